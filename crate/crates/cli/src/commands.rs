//! One function per subcommand. Each reads a [`CliConfig`], writes its
//! artifacts into a [`RunDir`] and returns the finished manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use saetune::checkpoint::Checkpoint;
use saetune::data::{QaPair, Vocab};
use saetune::eval::{
    evaluate, run_algorithm_ablation, run_layer_ablation, run_transfer, EvalResult, ARM_BASE,
    ARM_PLAIN_SFT, ARM_SAE_TUNED, ARM_SOURCE,
};
use saetune::gmm::{compare, entropy_base, fit_em, LayerDistribution};
use saetune::lora::{AdaptedModel, AdapterSet};
use saetune::model::{LanguageModel, LmTrainReport, TransformerModel};
use saetune::pipeline::{
    build_base, build_source, prepare_data, train_stage1, train_stage2, RunConfig,
    SaeMode, Workspace,
};
use saetune::probe::{encode_probe, layer_sweep, PROBE_PROMPT};
use saetune::sae::{SaeInit, SaeTrainReport, SparseAutoencoder};
use saetune::svg;

use crate::config::CliConfig;
use crate::error::CliError;
use crate::rundir::{Manifest, RunDir};

type Res<T> = Result<T, CliError>;

fn load_model(run: &mut RunDir, name: &str, path: &Path) -> Res<TransformerModel> {
    run.input(name, path)?;
    Ok(TransformerModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_sae(run: &mut RunDir, name: &str, path: &Path) -> Res<SparseAutoencoder> {
    run.input(name, path)?;
    Ok(SparseAutoencoder::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn record_data_inputs(run: &mut RunDir, rc: &RunConfig) -> Res<()> {
    if let Some(p) = &rc.data.trigger_path {
        run.input("trigger_data", p)?;
    }
    if let Some(p) = &rc.data.elicitation_path {
        run.input("elicitation_data", p)?;
    }
    Ok(())
}

/// Base and source from checkpoints when configured, otherwise trained.
fn workspace(cfg: &CliConfig, run: &mut RunDir) -> Res<Workspace> {
    let config = cfg.run.resolved();
    config.validate()?;
    record_data_inputs(run, &config)?;
    let vocab = Vocab::task_default();
    let data = prepare_data(&config.data)?;
    let (base, base_report) = match &cfg.paths.base {
        Some(p) => (load_model(run, "base", p)?, LmTrainReport::default()),
        None => build_base(&config, config.model.seed, &data, &vocab)?,
    };
    let (source, source_report) = match &cfg.paths.source {
        Some(p) => (load_model(run, "source", p)?, LmTrainReport::default()),
        None => build_source(&config, &base, &data, &vocab)?,
    };
    if !base.config.same_architecture(&source.config) {
        return Err(CliError::new("load", "base and source architectures differ"));
    }
    Ok(Workspace {
        config,
        vocab,
        data,
        base,
        source,
        base_report,
        source_report,
    })
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").unwrap();
    }
    s
}

fn sae_csv(r: &SaeTrainReport) -> String {
    let mut s = String::from("step,mse,dead_features,norm_error\n");
    for (i, ((l, d), e)) in r.losses.iter().zip(&r.dead_features).zip(&r.norm_errors).enumerate() {
        writeln!(s, "{i},{l},{d},{e}").unwrap();
    }
    s
}

fn eval_csv(rows: &[(&str, &EvalResult)]) -> String {
    let mut s = String::from("model,task,n,exact_match,format_misses\n");
    for (name, r) in rows {
        writeln!(s, "{name},{},{},{},{}", r.task, r.n, r.exact_match, r.format_misses()).unwrap();
    }
    s
}

fn score(model: &dyn LanguageModel, ws: &Workspace, eval: &[QaPair], task: &str) -> Res<EvalResult> {
    Ok(evaluate(model, &ws.vocab, eval, task, ws.config.eval.max_new_tokens)?)
}

/// Stage I per the configured mode, or a ready SAE from `[sae] path`.
fn obtain_sae(cfg: &CliConfig, ws: &Workspace, run: &mut RunDir) -> Res<(SparseAutoencoder, Option<SaeTrainReport>)> {
    if let Some(p) = &cfg.paths.sae {
        return Ok((load_sae(run, "sae", p)?, None));
    }
    let init = match ws.config.sae_mode {
        SaeMode::Scratch => SaeInit::FromScratch,
        mode => {
            let p = cfg.paths.sae_init.as_ref().ok_or_else(|| {
                CliError::config("[sae] mode finetune/pretrained needs [sae] init_path")
            })?;
            let sae = load_sae(run, "sae_init", p)?;
            if mode == SaeMode::FineTune {
                SaeInit::FineTune(sae)
            } else {
                SaeInit::LoadPretrained(sae)
            }
        }
    };
    let (sae, report) = train_stage1(&ws.config, &ws.source, &ws.trigger_seqs()?, ws.config.sae_layer, init)?;
    Ok((sae, Some(report)))
}

pub fn train_base(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    run.write("checkpoints/base.ck", ws.base.to_checkpoint().to_bytes())?;
    run.write("checkpoints/source.ck", ws.source.to_checkpoint().to_bytes())?;
    run.write("metrics/base_loss.csv", loss_csv(&ws.base_report.losses))?;
    run.write("metrics/sft_loss.csv", loss_csv(&ws.source_report.losses))?;
    let task = ws.config.data.trigger_task.to_string();
    let b = score(&ws.base, &ws, &ws.data.trigger_eval, &task)?;
    let s = score(&ws.source, &ws, &ws.data.trigger_eval, &task)?;
    run.write("metrics/eval.csv", eval_csv(&[("base", &b), ("source", &s)]))?;
    run.summary("base_exact_match", b.exact_match);
    run.summary("source_exact_match", s.exact_match);
    run.summary("base_hash", ws.base.param_hash());
    run.summary("source_hash", ws.source.param_hash());
    Ok(())
}

pub fn train_sae(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    let (sae, report) = obtain_sae(cfg, &ws, run)?;
    run.write("checkpoints/sae.ck", sae.to_checkpoint(ws.config.sae.seed).to_bytes())?;
    if let Some(r) = &report {
        run.write("metrics/sae.csv", sae_csv(r))?;
        run.summary("initial_mse", r.initial_mse);
        run.summary("final_mse", r.final_mse);
        run.summary("dead_features", r.dead_features.last().copied().unwrap_or(0));
    }
    run.summary("layer", sae.hook_layer);
    run.summary("max_column_norm_error", sae.max_column_norm_error());
    Ok(())
}

pub fn sae_tune(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    let target = match &cfg.paths.target {
        Some(p) => load_model(run, "target", p)?,
        None => ws.base.clone(),
    };
    let (sae, sae_report) = obtain_sae(cfg, &ws, run)?;
    if let Some(r) = &sae_report {
        run.write("checkpoints/sae.ck", sae.to_checkpoint(ws.config.sae.seed).to_bytes())?;
        run.write("metrics/sae.csv", sae_csv(r))?;
    }
    let tuned = train_stage2(&ws.config, &target, &sae, &ws.elicitation_seqs()?)?;
    run.write("checkpoints/adapters.ck", tuned.adapters.export().to_bytes())?;
    run.write("metrics/kl.csv", tuned.report.kl_csv())?;
    run.write("metrics/timing.csv", tuned.report.timing_csv())?;
    let task = ws.config.data.elicitation_task.to_string();
    let before = score(&target, &ws, &ws.data.elicitation_eval, &task)?;
    let after = score(&tuned.model, &ws, &ws.data.elicitation_eval, &task)?;
    run.write("metrics/eval.csv", eval_csv(&[("target", &before), ("tuned", &after)]))?;
    run.write("records.csv", after.records_csv())?;
    run.summary("initial_kl", tuned.report.initial_kl);
    run.summary("final_kl", tuned.report.final_kl);
    run.summary("target_exact_match", before.exact_match);
    run.summary("tuned_exact_match", after.exact_match);
    run.summary("target_hash", tuned.hashes_after.0);
    run.summary("sae_hash", tuned.hashes_after.1);
    Ok(())
}

pub fn probe_features(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    let prompt = encode_probe(PROBE_PROMPT, &ws.vocab)?;
    let (profile, saes) = layer_sweep(&ws.source, &ws.trigger_seqs()?, &prompt, &ws.config.sae, ws.config.eval.probe_eps)?;
    for (layer, sae) in &saes {
        run.write(
            &format!("checkpoints/sae_layer{layer}.ck"),
            sae.to_checkpoint(ws.config.sae.seed).to_bytes(),
        )?;
    }
    run.write("profile.csv", profile.to_csv())?;
    run.write("plots/features.svg", svg::feature_profile_chart(&profile))?;
    run.summary("total_features", profile.entries.iter().map(|e| e.1).sum::<usize>());
    Ok(())
}

/// Columns of a headed CSV by name.
fn read_columns(run: &mut RunDir, name: &str, path: &Path) -> Res<BTreeMap<String, Vec<String>>> {
    run.input(name, path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::new("parse", format!("{}: empty file", path.display())))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut cols: BTreeMap<String, Vec<String>> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(CliError::new(
                "parse",
                format!("{}: row {} has {} cells, header has {}", path.display(), i + 2, cells.len(), header.len()),
            ));
        }
        for (h, c) in header.iter().zip(cells) {
            cols.get_mut(h).expect("header column").push(c.trim().to_string());
        }
    }
    Ok(cols)
}

fn numeric(cols: &BTreeMap<String, Vec<String>>, names: &[&str], path: &Path) -> Res<Vec<f64>> {
    let col = names
        .iter()
        .find_map(|n| cols.get(*n))
        .ok_or_else(|| CliError::new("parse", format!("{}: no column among {names:?}", path.display())))?;
    col.iter()
        .map(|v| v.parse::<f64>().map_err(|_| CliError::new("parse", format!("{}: bad number {v:?}", path.display()))))
        .collect()
}

pub fn fit_gmm(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ev = &cfg.run.eval;
    let seed = cfg.run.resolved().seed;
    let fpath = cfg
        .paths
        .feature_csv
        .as_ref()
        .ok_or_else(|| CliError::config("fit-gmm needs [eval] feature_csv"))?;
    let fcols = read_columns(run, "feature_csv", fpath)?;
    let layers = numeric(&fcols, &["layer"], fpath)?;
    let counts = numeric(&fcols, &["count", "feature_count"], fpath)?;
    let feat = LayerDistribution::new(layers, counts)?;
    let feat_fit = fit_em(&feat, seed, ev.gmm_max_iters, ev.gmm_tol)?;
    run.write("gmm_features.csv", feat_fit.to_csv())?;
    run.summary("feature_entropy", entropy_base(&feat, ev.entropy_base));

    let spath = cfg.paths.score_csv.as_ref().unwrap_or(fpath);
    let scols = if spath == fpath { fcols } else { read_columns(run, "score_csv", spath)? };
    let Ok(scores) = numeric(&scols, &["exact_match_final", "exact_match", "score"], spath) else {
        if cfg.paths.score_csv.is_some() {
            return Err(CliError::new("parse", format!("{}: no score column", spath.display())));
        }
        return Ok(());
    };
    let slayers = numeric(&scols, &["layer"], spath)?;
    let mut chosen = None;
    for (variant, min_sub) in [("raw", false), ("min_subtracted", true)] {
        let dist = LayerDistribution::from_scores(slayers.clone(), &scores, min_sub)?;
        match fit_em(&dist, seed, ev.gmm_max_iters, ev.gmm_tol) {
            Ok(fit) => {
                run.write(&format!("gmm_scores_{variant}.csv"), fit.to_csv())?;
                run.summary(&format!("score_entropy_{variant}"), entropy_base(&dist, ev.entropy_base));
                if min_sub == ev.gmm_min_subtracted {
                    chosen = Some((dist, fit));
                }
            }
            Err(e) => run.summary(&format!("score_fit_{variant}"), CliError::from(e)),
        }
    }
    if let Some((dist, fit)) = chosen {
        let report = compare(&feat_fit, &fit, &feat, &dist);
        run.write("alignment.csv", report.to_csv())?;
        run.write("alignment.txt", report.to_text())?;
        run.write(
            "plots/gmm.svg",
            svg::gmm_overlay(("features", &feat, &feat_fit), ("scores", &dist, &fit)),
        )?;
        run.summary("entropy_delta", report.entropy_delta);
    }
    Ok(())
}

pub fn evaluate_cmd(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let rc = cfg.run.resolved();
    rc.validate()?;
    record_data_inputs(run, &rc)?;
    let data = prepare_data(&rc.data)?;
    let vocab = Vocab::task_default();
    let path = cfg
        .paths
        .target
        .as_ref()
        .or(cfg.paths.base.as_ref())
        .ok_or_else(|| CliError::config("evaluate needs [model] target_path or base_path"))?;
    let model = load_model(run, "model", path)?;
    let task = rc.data.elicitation_task.to_string();
    let result = match &cfg.paths.adapters {
        Some(p) => {
            run.input("adapters", p)?;
            let adapters = AdapterSet::import(&Checkpoint::load(p)?, &model)?;
            let m = AdaptedModel::new(model, adapters)?;
            evaluate(&m, &vocab, &data.elicitation_eval, &task, rc.eval.max_new_tokens)?
        }
        None => evaluate(&model, &vocab, &data.elicitation_eval, &task, rc.eval.max_new_tokens)?,
    };
    run.write("metrics/eval.csv", eval_csv(&[("model", &result)]))?;
    run.write("records.csv", result.records_csv())?;
    run.summary("exact_match", result.exact_match);
    run.summary("format_misses", result.format_misses());
    Ok(())
}

pub fn ablate_algorithm(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    let ab = run_algorithm_ablation(&ws)?;
    run.write("ablation.csv", ab.to_csv())?;
    run.write("metrics/kl.csv", ab.tuned.report.kl_csv())?;
    run.write("metrics/timing.csv", ab.tuned.report.timing_csv())?;
    run.write("metrics/sft_loss.csv", ab.sft_report.kl_csv().replacen("kl_loss", "ce_loss", 1))?;
    run.write("metrics/sae.csv", sae_csv(&ab.sae_report))?;
    run.write("checkpoints/adapters.ck", ab.tuned.adapters.export().to_bytes())?;
    for arm in [ARM_BASE, ARM_SOURCE, ARM_SAE_TUNED, ARM_PLAIN_SFT] {
        if let Some(a) = ab.arm(arm) {
            run.summary(&format!("{arm}_exact_match"), a.scored.final_exact_match());
            run.summary(&format!("{arm}_exact_match_best"), a.scored.best_exact_match);
        }
    }
    run.summary("initial_kl", ab.tuned.report.initial_kl);
    run.summary("final_kl", ab.tuned.report.final_kl);
    Ok(())
}

pub fn ablate_layers(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    let la = run_layer_ablation(&ws)?;
    run.write("layers.csv", la.to_csv())?;
    run.write("profile.csv", la.profile.to_csv())?;
    run.write("plots/features.svg", svg::feature_profile_chart(&la.profile))?;
    run.write("plots/layers.svg", svg::score_feature_overlay(&la.scores(), &la.profile))?;
    run.summary("layers", la.rows.len());
    if let Some(best) = la.rows.iter().max_by(|a, b| a.exact_match_final.total_cmp(&b.exact_match_final)) {
        run.summary("best_layer", best.layer);
    }
    Ok(())
}

pub fn transfer(cfg: &CliConfig, run: &mut RunDir) -> Res<()> {
    let ws = workspace(cfg, run)?;
    let second = match &cfg.paths.second {
        Some(p) => Some(load_model(run, "second", p)?),
        None => None,
    };
    let t = run_transfer(&ws, second.as_ref(), cfg.transfer_task)?;
    run.write("transfer.csv", t.to_csv())?;
    for r in &t.rows {
        run.summary(&format!("{}_exact_match", r.arm), r.exact_match);
    }
    run.summary("second_model_hash", &t.second_model_hash);
    Ok(())
}

/// Dispatch a config-driven subcommand into `out`.
pub fn run_command(name: &str, cfg: CliConfig, config_path: &Path, out: &Path) -> Res<Manifest> {
    let resolved = CliConfig {
        run: cfg.run.resolved(),
        ..cfg.clone()
    };
    let mut run = RunDir::create(out, name, Some(resolved))?;
    run.input("config", config_path)?;
    match name {
        "train-base" => train_base(&cfg, &mut run)?,
        "train-sae" => train_sae(&cfg, &mut run)?,
        "sae-tune" => sae_tune(&cfg, &mut run)?,
        "probe-features" => probe_features(&cfg, &mut run)?,
        "fit-gmm" => fit_gmm(&cfg, &mut run)?,
        "evaluate" => evaluate_cmd(&cfg, &mut run)?,
        "ablate-algorithm" => ablate_algorithm(&cfg, &mut run)?,
        "ablate-layers" => ablate_layers(&cfg, &mut run)?,
        "transfer" => transfer(&cfg, &mut run)?,
        other => return Err(CliError::new("usage", format!("unknown subcommand {other}"))),
    }
    run.finish()
}
