//! Experiment suites built on [`Workspace`]: the four-arm algorithm
//! ablation, the per-layer hookpoint sweep, and adapter transfer.

use std::fmt::Write as _;

use crate::data::{QaPair, Task, Vocab};
use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, AdapterSet};
use crate::model::{LanguageModel, TransformerModel};
use crate::pipeline::{
    build_base, build_source, encode_seqs, prepare_data, train_stage1, train_stage2, TunedRun,
    Workspace,
};
use crate::probe::{encode_probe, layer_sweep, FeatureCountProfile, PROBE_PROMPT};
use crate::rng::derive_seed;
use crate::sae::{SaeInit, SaeTrainReport};
use crate::tuning::{sft_adapters, TuneReport};

use super::{evaluate, EvalResult};

/// Exact match of the final adapters and of the best snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub final_result: EvalResult,
    pub best_exact_match: f64,
    /// Step of the best snapshot; the final step when no snapshot beats it.
    pub best_step: usize,
}

impl Scored {
    pub fn final_exact_match(&self) -> f64 {
        self.final_result.exact_match
    }
}

fn score_model(model: &dyn LanguageModel, vocab: &Vocab, eval: &[QaPair], task: &str, max_new: usize) -> Result<Scored> {
    let r = evaluate(model, vocab, eval, task, max_new)?;
    Ok(Scored {
        best_exact_match: r.exact_match,
        best_step: 0,
        final_result: r,
    })
}

/// Score the final adapters and every snapshot in `report`.
fn score_adapted(
    base: &TransformerModel,
    adapters: &AdapterSet,
    report: &TuneReport,
    vocab: &Vocab,
    eval: &[QaPair],
    task: &str,
    max_new: usize,
) -> Result<Scored> {
    let final_model = AdaptedModel::new(base.clone(), adapters.clone())?;
    let final_result = evaluate(&final_model, vocab, eval, task, max_new)?;
    let mut best = (final_result.exact_match, report.steps.len());
    for (step, snap) in &report.snapshots {
        if *step == report.steps.len() {
            continue;
        }
        let m = AdaptedModel::new(base.clone(), snap.clone())?;
        let em = evaluate(&m, vocab, eval, task, max_new)?.exact_match;
        if em > best.0 {
            best = (em, *step);
        }
    }
    Ok(Scored {
        final_result,
        best_exact_match: best.0,
        best_step: best.1,
    })
}

/// Fields every ablation arm must share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArmPlan {
    pub arm: &'static str,
    pub seed: u64,
    pub data_seed: u64,
    /// Adapter steps for trained arms; `None` for arms evaluated as is.
    pub steps: Option<usize>,
}

/// Fails unless all plans share seeds, data order and step budget.
pub fn check_shared_budget(plans: &[ArmPlan]) -> Result<()> {
    let Some(first) = plans.first() else {
        return Ok(());
    };
    let steps = plans.iter().find_map(|p| p.steps);
    for p in plans {
        if p.seed != first.seed || p.data_seed != first.data_seed {
            return Err(Error::Contract(format!(
                "arm {} uses seeds ({}, {}) but arm {} uses ({}, {})",
                p.arm, p.seed, p.data_seed, first.arm, first.seed, first.data_seed
            )));
        }
        if p.steps.is_some() && p.steps != steps {
            return Err(Error::Contract(format!(
                "arm {} has a step budget of {:?}, expected {:?}",
                p.arm, p.steps, steps
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: &'static str,
    pub scored: Scored,
}

#[derive(Clone, Debug)]
pub struct AlgorithmAblation {
    pub arms: Vec<ArmResult>,
    pub plans: Vec<ArmPlan>,
    pub sae_report: SaeTrainReport,
    pub tuned: TunedRun,
    pub sft_report: TuneReport,
}

impl AlgorithmAblation {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// `arm,exact_match_final,exact_match_best,best_step,format_misses`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,exact_match_final,exact_match_best,best_step,format_misses\n");
        for a in &self.arms {
            writeln!(
                s,
                "{},{},{},{},{}",
                a.arm,
                a.scored.final_exact_match(),
                a.scored.best_exact_match,
                a.scored.best_step,
                a.scored.final_result.format_misses()
            )
            .expect("string write");
        }
        s
    }
}

pub const ARM_BASE: &str = "base";
pub const ARM_SOURCE: &str = "source";
pub const ARM_SAE_TUNED: &str = "sae-tuned";
pub const ARM_PLAIN_SFT: &str = "plain-sft";

/// Base, source, SAE-tuned base, and plain cross-entropy adapter SFT on
/// the same data with the same adapter budget, all scored on the held-out
/// elicitation questions.
pub fn run_algorithm_ablation(ws: &Workspace) -> Result<AlgorithmAblation> {
    let cfg = &ws.config;
    let elicitation = ws.elicitation_seqs()?;
    let steps = cfg.tune.total_steps(elicitation.len());
    let plans: Vec<ArmPlan> = [
        (ARM_BASE, None),
        (ARM_SOURCE, None),
        (ARM_SAE_TUNED, Some(steps)),
        (ARM_PLAIN_SFT, Some(steps)),
    ]
    .into_iter()
    .map(|(arm, steps)| ArmPlan {
        arm,
        seed: cfg.seed,
        data_seed: cfg.data.seed,
        steps,
    })
    .collect();
    check_shared_budget(&plans)?;

    let task = cfg.data.elicitation_task.to_string();
    let eval = &ws.data.elicitation_eval;
    let max_new = cfg.eval.max_new_tokens;
    let base = score_model(&ws.base, &ws.vocab, eval, &task, max_new)?;
    let source = score_model(&ws.source, &ws.vocab, eval, &task, max_new)?;

    let (sae, sae_report) = train_stage1(cfg, &ws.source, &ws.trigger_seqs()?, cfg.sae_layer, SaeInit::FromScratch)?;
    let tuned = train_stage2(cfg, &ws.base, &sae, &elicitation)?;
    let tuned_score = score_adapted(&ws.base, &tuned.adapters, &tuned.report, &ws.vocab, eval, &task, max_new)?;

    let mut sft = AdapterSet::attach(&ws.base, cfg.lora.clone())?;
    let sft_report = sft_adapters(&ws.base, &mut sft, &elicitation, &cfg.tune)?;
    let sft_score = score_adapted(&ws.base, &sft, &sft_report, &ws.vocab, eval, &task, max_new)?;

    let arms = vec![
        ArmResult { arm: ARM_BASE, scored: base },
        ArmResult { arm: ARM_SOURCE, scored: source },
        ArmResult { arm: ARM_SAE_TUNED, scored: tuned_score },
        ArmResult { arm: ARM_PLAIN_SFT, scored: sft_score },
    ];
    Ok(AlgorithmAblation {
        arms,
        plans,
        sae_report,
        tuned,
        sft_report,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub feature_count: usize,
    pub exact_match_final: f64,
    pub exact_match_best: f64,
    pub initial_kl: f64,
    pub final_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAblation {
    pub rows: Vec<LayerRow>,
    pub profile: FeatureCountProfile,
}

impl LayerAblation {
    /// `layer,feature_count,exact_match_final,exact_match_best,initial_kl,final_kl`
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("layer,feature_count,exact_match_final,exact_match_best,initial_kl,final_kl\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer, r.feature_count, r.exact_match_final, r.exact_match_best, r.initial_kl, r.final_kl
            )
            .expect("string write");
        }
        s
    }

    /// `(layer, final exact match)` in layer order.
    pub fn scores(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.layer, r.exact_match_final)).collect()
    }
}

/// Full SAE-tuning at every probed layer, joined with the reasoning-feature
/// count of the SAE trained at that layer. The same SAEs serve both.
pub fn run_layer_ablation(ws: &Workspace) -> Result<LayerAblation> {
    let cfg = &ws.config;
    let prompt = encode_probe(PROBE_PROMPT, &ws.vocab)?;
    let (profile, saes) = layer_sweep(&ws.source, &ws.trigger_seqs()?, &prompt, &cfg.sae, cfg.eval.probe_eps)?;
    let elicitation = ws.elicitation_seqs()?;
    let task = cfg.data.elicitation_task.to_string();
    let mut rows = Vec::with_capacity(saes.len());
    for &(layer, count) in &profile.entries {
        let tuned = train_stage2(cfg, &ws.base, &saes[&layer], &elicitation)?;
        let scored = score_adapted(
            &ws.base,
            &tuned.adapters,
            &tuned.report,
            &ws.vocab,
            &ws.data.elicitation_eval,
            &task,
            cfg.eval.max_new_tokens,
        )?;
        rows.push(LayerRow {
            layer,
            feature_count: count,
            exact_match_final: scored.final_exact_match(),
            exact_match_best: scored.best_exact_match,
            initial_kl: tuned.report.initial_kl,
            final_kl: tuned.report.final_kl,
        });
    }
    Ok(LayerAblation { rows, profile })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub arm: &'static str,
    pub task: String,
    pub exact_match: f64,
}

#[derive(Clone, Debug)]
pub struct Transfer {
    pub rows: Vec<TransferRow>,
    /// The second model's parameter hash, for the manifest.
    pub second_model_hash: String,
}

impl Transfer {
    pub fn row(&self, arm: &str) -> Option<&TransferRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    /// `arm,task,exact_match`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,task,exact_match\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.arm, r.task, r.exact_match).expect("string write");
        }
        s
    }
}

pub const TRANSFER_M1_NATIVE: &str = "m1-native";
pub const TRANSFER_M2_BASELINE: &str = "m2-baseline";
pub const TRANSFER_M2_ZERO_ADAPTER: &str = "m2-zero-adapter";
pub const TRANSFER_M1_ADAPTER_ON_M2: &str = "m1-adapter-on-m2";
pub const TRANSFER_CROSS_BASE: &str = "cross-task-base";
pub const TRANSFER_CROSS_IN_DIST: &str = "cross-task-in-distribution";
pub const TRANSFER_CROSS_TUNED: &str = "cross-task-tuned";

/// (a) adapters tuned on the workspace base (M1) attached unchanged to a
/// second base pretrained from a different init (M2); (b) SAE trained on
/// trigger-task activations and adapters elicited on a second task,
/// against the base and the same-task pipeline on that second task.
/// `second` replaces the freshly pretrained M2 when given.
pub fn run_transfer(
    ws: &Workspace,
    second: Option<&TransformerModel>,
    second_task: Task,
) -> Result<Transfer> {
    let cfg = &ws.config;
    let max_new = cfg.eval.max_new_tokens;
    let task_a = cfg.data.trigger_task.to_string();
    let eval_a = &ws.data.trigger_eval;
    let trigger = ws.trigger_seqs()?;
    let mut rows = Vec::new();

    let (sae, _) = train_stage1(cfg, &ws.source, &trigger, cfg.sae_layer, SaeInit::FromScratch)?;
    let native = train_stage2(cfg, &ws.base, &sae, &trigger)?;
    let exported = native.adapters.export();
    rows.push(TransferRow {
        arm: TRANSFER_M1_NATIVE,
        task: task_a.clone(),
        exact_match: evaluate(&native.model, &ws.vocab, eval_a, &task_a, max_new)?.exact_match,
    });

    let m2 = match second {
        Some(m) => m.clone(),
        None => build_base(cfg, derive_seed(cfg.seed, "model/second"), &ws.data, &ws.vocab)?.0,
    };
    let m2_score = evaluate(&m2, &ws.vocab, eval_a, &task_a, max_new)?.exact_match;
    rows.push(TransferRow {
        arm: TRANSFER_M2_BASELINE,
        task: task_a.clone(),
        exact_match: m2_score,
    });
    let zero = AdapterSet::attach(&ws.base, cfg.lora.clone())?.export();
    let zero_on_m2 = AdaptedModel::new(m2.clone(), AdapterSet::import(&zero, &m2)?)?;
    rows.push(TransferRow {
        arm: TRANSFER_M2_ZERO_ADAPTER,
        task: task_a.clone(),
        exact_match: evaluate(&zero_on_m2, &ws.vocab, eval_a, &task_a, max_new)?.exact_match,
    });
    let moved = AdaptedModel::new(m2.clone(), AdapterSet::import(&exported, &m2)?)?;
    rows.push(TransferRow {
        arm: TRANSFER_M1_ADAPTER_ON_M2,
        task: task_a.clone(),
        exact_match: evaluate(&moved, &ws.vocab, eval_a, &task_a, max_new)?.exact_match,
    });

    // Cross-task: trigger stays on task A, elicitation and scoring move to B.
    let mut cross_cfg = cfg.clone();
    cross_cfg.data.elicitation_task = second_task;
    let cross_data = prepare_data(&cross_cfg.data)?;
    let task_b = second_task.to_string();
    let eval_b = &cross_data.elicitation_eval;
    rows.push(TransferRow {
        arm: TRANSFER_CROSS_BASE,
        task: task_b.clone(),
        exact_match: evaluate(&ws.base, &ws.vocab, eval_b, &task_b, max_new)?.exact_match,
    });
    let elicit_b = encode_seqs(&cross_data.elicitation_train, &ws.vocab)?;
    let cross = train_stage2(&cross_cfg, &ws.base, &sae, &elicit_b)?;
    rows.push(TransferRow {
        arm: TRANSFER_CROSS_TUNED,
        task: task_b.clone(),
        exact_match: evaluate(&cross.model, &ws.vocab, eval_b, &task_b, max_new)?.exact_match,
    });

    // In-distribution reference for B: trigger and elicitation both on B.
    let mut in_cfg = cross_cfg.clone();
    in_cfg.data.trigger_task = second_task;
    let in_data = prepare_data(&in_cfg.data)?;
    let (in_source, _) = build_source(&in_cfg, &ws.base, &in_data, &ws.vocab)?;
    let in_trigger = encode_seqs(&in_data.trigger_train, &ws.vocab)?;
    let (in_sae, _) = train_stage1(&in_cfg, &in_source, &in_trigger, in_cfg.sae_layer, SaeInit::FromScratch)?;
    let in_run = train_stage2(&in_cfg, &ws.base, &in_sae, &in_trigger)?;
    rows.push(TransferRow {
        arm: TRANSFER_CROSS_IN_DIST,
        task: task_b.clone(),
        exact_match: evaluate(&in_run.model, &ws.vocab, &in_data.elicitation_eval, &task_b, max_new)?
            .exact_match,
    });

    Ok(Transfer {
        rows,
        second_model_hash: m2.param_hash(),
    })
}

