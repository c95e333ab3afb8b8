use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saetune_cli::{execute, read_manifest, MANIFEST};

fn smoke_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

fn saetune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saetune")).args(args).output().unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(s.lines().count(), 1, "expected one stderr line, got {s:?}");
    s
}

/// Smoke config with extra lines appended under their sections.
fn smoke_with(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{}\n{extra}", fs::read_to_string(smoke_cfg()).unwrap())).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let o = saetune(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("sae-tune"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = saetune(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("saetune: error[usage]:"));
}

#[test]
fn unknown_key_names_section_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[model]\nnum_layers = 4\n[sae]\nbogus = 3\n").unwrap();
    let o = saetune(&["train-sae", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let line = stderr_line(&o);
    assert!(line.contains("error[config]") && line.contains("line 4") && line.contains("[sae] bogus"), "{line}");
}

#[test]
fn missing_config_is_io_error() {
    let o = saetune(&["sae-tune", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("saetune: error[io]:"));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_with(dir.path(), "[model]\nbase_path = missing.ck\n");
    let o = saetune(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sae_tune_writes_a_complete_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let m = execute("sae-tune", &smoke_cfg(), &out).unwrap();
    for f in ["checkpoints/adapters.ck", "checkpoints/sae.ck", "metrics/kl.csv", "metrics/timing.csv", "metrics/eval.csv"] {
        assert!(out.join(f).is_file(), "{f}");
        assert!(m.outputs.iter().any(|o| o == f), "{f} not in manifest");
    }
    let on_disk = read_manifest(&out).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(m.inputs.len(), 1);
    assert!(m.inputs.contains_key("config"));
    let kl = fs::read_to_string(out.join("metrics/kl.csv")).unwrap();
    assert!(kl.starts_with("step,kl_loss,lr\n"));
    assert_eq!(m.summary["target_hash"].len(), 64);
}

#[test]
fn stages_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let base_run = dir.path().join("base");
    execute("train-base", &smoke_cfg(), &base_run).unwrap();

    // Reuse the trained models and a trained SAE in pretrained mode.
    let sae_run = dir.path().join("sae");
    let cfg = smoke_with(
        dir.path(),
        "[model]\nbase_path = base/checkpoints/base.ck\nsource_path = base/checkpoints/source.ck\n",
    );
    let m = execute("train-sae", &cfg, &sae_run).unwrap();
    assert!(m.inputs.contains_key("base") && m.inputs.contains_key("source"));

    let cfg2 = dir.path().join("pretrained.cfg");
    fs::write(
        &cfg2,
        format!(
            "{}\n[model]\nbase_path = base/checkpoints/base.ck\nsource_path = base/checkpoints/source.ck\n\
             [sae]\nmode = pretrained\ninit_path = sae/checkpoints/sae.ck\n",
            fs::read_to_string(smoke_cfg()).unwrap()
        ),
    )
    .unwrap();
    let again = execute("train-sae", &cfg2, &dir.path().join("sae2")).unwrap();
    assert_eq!(
        fs::read(sae_run.join("checkpoints/sae.ck")).unwrap(),
        fs::read(dir.path().join("sae2/checkpoints/sae.ck")).unwrap()
    );
    assert!(again.inputs.contains_key("sae_init"));

    let tuned = execute("sae-tune", &cfg, &dir.path().join("tune")).unwrap();
    let cfg3 = dir.path().join("eval.cfg");
    fs::write(
        &cfg3,
        format!(
            "{}\n[model]\nbase_path = base/checkpoints/base.ck\n[lora]\nadapters_path = tune/checkpoints/adapters.ck\n",
            fs::read_to_string(smoke_cfg()).unwrap()
        ),
    )
    .unwrap();
    let ev = execute("evaluate", &cfg3, &dir.path().join("eval")).unwrap();
    assert_eq!(ev.summary["exact_match"], tuned.summary["tuned_exact_match"]);
}

fn write_fixture(dir: &Path) -> PathBuf {
    // Three bumps over 26 layers.
    let mut s = String::from("layer,count,exact_match_final\n");
    for l in 1..=26 {
        let x = l as f64;
        let bump = |mu: f64, w: f64| w * (-(x - mu).powi(2) / 4.5).exp();
        let c = (20.0 * (bump(5.0, 0.4) + bump(15.0, 0.35) + bump(23.0, 0.25))).round();
        let score = 0.3 + 0.1 * (bump(6.0, 0.4) + bump(15.0, 0.35) + bump(23.0, 0.25));
        s += &format!("{l},{c},{score}\n");
    }
    let p = dir.join("layers.csv");
    fs::write(&p, s).unwrap();
    p
}

#[test]
fn fit_gmm_reports_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let cfg = dir.path().join("gmm.cfg");
    fs::write(&cfg, "[eval]\nfeature_csv = layers.csv\n").unwrap();
    let out = dir.path().join("gmm");
    let m = execute("fit-gmm", &cfg, &out).unwrap();
    for f in ["gmm_features.csv", "gmm_scores_raw.csv", "gmm_scores_min_subtracted.csv", "alignment.csv", "alignment.txt", "plots/gmm.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let h: f64 = m.summary["feature_entropy"].parse().unwrap();
    assert!(h > 0.0 && h < 26f64.ln());
}

#[test]
fn fit_gmm_without_counts_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("f.csv"), "layer,other\n1,2\n").unwrap();
    let cfg = dir.path().join("gmm.cfg");
    fs::write(&cfg, "[eval]\nfeature_csv = f.csv\n").unwrap();
    let e = execute("fit-gmm", &cfg, &dir.path().join("o")).unwrap_err();
    assert_eq!(e.kind, "parse");
}

#[test]
fn report_merges_layer_runs_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_b = dir.path().join("seed1.cfg");
    fs::write(&cfg_b, format!("{}\n[train]\nseed = 1\n", fs::read_to_string(smoke_cfg()).unwrap())).unwrap();
    let a = dir.path().join("layers-a");
    let b = dir.path().join("layers-b");
    execute("ablate-layers", &smoke_cfg(), &a).unwrap();
    execute("ablate-layers", &cfg_b, &b).unwrap();
    let before = fs::read(a.join(MANIFEST)).unwrap();

    let out1 = dir.path().join("report1");
    let out2 = dir.path().join("report2");
    saetune_cli::report::report(&[a.clone(), b.clone()], &out1).unwrap();
    saetune_cli::report::report(&[a.clone(), b.clone()], &out2).unwrap();
    for f in ["report.csv", "layers.csv", "plots/layers.svg", "profile.csv", MANIFEST] {
        assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), before);

    let layers = fs::read_to_string(out1.join("layers.csv")).unwrap();
    let ls: Vec<usize> = layers.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ls.len(), 4);
    assert!(ls.windows(2).all(|w| w[0] <= w[1]));
    let report = fs::read_to_string(out1.join("report.csv")).unwrap();
    assert!(report.starts_with("run,command,"));
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn report_refuses_missing_or_nested_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = saetune(&["report", "--out", dir.path().join("r").to_str().unwrap(), dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let run = dir.path().join("gmm");
    write_fixture(dir.path());
    let cfg = dir.path().join("gmm.cfg");
    fs::write(&cfg, "[eval]\nfeature_csv = layers.csv\n").unwrap();
    execute("fit-gmm", &cfg, &run).unwrap();
    let e = saetune_cli::report::report(&[run.clone()], &run.join("nested")).unwrap_err();
    assert_eq!(e.kind, "usage");
}
