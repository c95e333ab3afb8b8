//! Acceptance criteria 1 to 13. Each test prints one PASS/FAIL line and
//! fails when its criterion does. Tests hold a shared lock so that the
//! wall-clock budgets are measured one criterion at a time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use saetune::checkpoint::Checkpoint;
use saetune::data::{encode_all, synth_tasks, Task, TokenId, Vocab};
use saetune::eval::{
    run_algorithm_ablation, TRANSFER_M1_ADAPTER_ON_M2, TRANSFER_M2_BASELINE, TRANSFER_M2_ZERO_ADAPTER,
    ARM_BASE, ARM_SAE_TUNED,
};
use saetune::gmm::{entropy, fit_em, LayerDistribution};
use saetune::lora::{AdapterSet, LoraConfig};
use saetune::model::{ModelConfig, TokenBatch, TransformerModel};
use saetune::pipeline::{RunConfig, Workspace};
use saetune::probe::{count_reasoning_features, encode_probe, probe_with_logits, FeatureActivationMap, PROBE_PROMPT};
use saetune::sae::{harvest_activations, train_on_activations, SaeInit, SaeTrainConfig, SparseAutoencoder};
use saetune::tensor::{precision_scope, Array, Precision};
use saetune::tuning::{SpliceSession, TuneConfig};
use saetune_validation::{brute_force_reasoning_count, full_sort_top_k, Verdict};

static SERIAL: Mutex<()> = Mutex::new(());

/// Run `body` under the lock, print its verdict, and fail the test unless
/// it passed inside `budget`.
fn criterion(n: u32, name: &'static str, budget_secs: u64, body: impl FnOnce() -> (bool, String)) {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = body();
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_secs);
    let v = Verdict {
        criterion: n,
        name,
        pass: ok && elapsed <= budget,
        detail: if elapsed > budget { format!("over budget; {detail}") } else { detail },
        elapsed,
        budget,
    };
    v.print();
    assert!(v.pass, "criterion {n} ({name}) failed: {}", v.detail);
}

fn trigger_seqs(n: usize, modulus: u64, seed: u64) -> Vec<Vec<TokenId>> {
    let v = Vocab::task_default();
    let pairs = synth_tasks(Task::ModAdd, n, modulus, seed).unwrap();
    encode_all(&pairs, &v).unwrap().into_iter().map(|e| e.ids).collect()
}

fn toy_model(layers: usize, d: usize, seed: u64) -> TransformerModel {
    TransformerModel::new(ModelConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: 4,
        vocab_size: Vocab::task_default().len(),
        context_len: 128,
        mlp_ratio: 4,
        seed,
    })
    .unwrap()
}

#[test]
fn c01_top_k_sparsity() {
    criterion(1, "top-k sparsity", 10, || {
        let _p = precision_scope(Precision::F64);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut violations = 0;
        for t in 0..1000u64 {
            let d = r.gen_range(2..12);
            let m = r.gen_range(2..64);
            let k = r.gen_range(1..m + 8);
            let mut sae = SparseAutoencoder::new_random(d, m, k.min(m), 1, t).unwrap();
            sae.k = k;
            let be: Vec<f64> = (0..m).map(|_| r.gen_range(-0.5..0.5)).collect();
            let bd: Vec<f64> = (0..d).map(|_| r.gen_range(-0.5..0.5)).collect();
            sae.b_enc = Array::from_f64(&[m], &be).unwrap();
            sae.b_dec = Array::from_f64(&[d], &bd).unwrap();
            let x: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
            let z = sae.encode(&Array::from_f64(&[d], &x).unwrap()).unwrap().to_f64_vec();
            let w = sae.w_enc.to_f64_vec();
            let h: Vec<f64> = (0..m)
                .map(|j| be[j] + (0..d).map(|i| w[j * d + i] * (x[i] - bd[i])).sum::<f64>())
                .collect();
            let support: Vec<usize> = (0..m).filter(|&j| z[j] != 0.0).collect();
            if support.len() != k.min(m) || support != full_sort_top_k(&h, k) {
                violations += 1;
            }
        }
        (violations == 0, format!("1000 pairs, {violations} violations"))
    });
}

#[test]
fn c02_decoder_normalization() {
    criterion(2, "decoder normalization", 120, || {
        let model = toy_model(4, 32, 2);
        let acts = harvest_activations(&model, &trigger_seqs(600, 10, 2), 2, 32).unwrap();
        let cfg = SaeTrainConfig {
            max_steps: Some(2000),
            epochs: 1000,
            seed: 2,
            ..Default::default()
        };
        let (_, rep) = train_on_activations(&acts, 2, &cfg, SaeInit::FromScratch).unwrap();
        let worst = rep.norm_errors.iter().copied().fold(0.0, f64::max);
        (
            rep.norm_errors.len() == 2000 && worst <= 1e-5,
            format!("{} steps, max |norm - 1| = {worst:.2e}", rep.norm_errors.len()),
        )
    });
}

#[test]
fn c03_sae_learning() {
    criterion(3, "SAE learning", 180, || {
        let model = toy_model(8, 64, 3);
        let acts = harvest_activations(&model, &trigger_seqs(5000, 43, 3), 4, 64).unwrap();
        let cfg = SaeTrainConfig {
            max_steps: Some(5000),
            epochs: 1000,
            seed: 3,
            ..Default::default()
        };
        let (_, rep) = train_on_activations(&acts, 4, &cfg, SaeInit::FromScratch).unwrap();
        (
            rep.losses.len() <= 5000 && rep.final_mse <= rep.initial_mse / 10.0,
            format!(
                "{} steps, mse {:.4e} -> {:.4e} (ratio {:.2e})",
                rep.losses.len(),
                rep.initial_mse,
                rep.final_mse,
                rep.final_mse / rep.initial_mse
            ),
        )
    });
}

#[test]
fn c04_stage_two_gradcheck() {
    criterion(4, "Stage II gradcheck", 60, || {
        let _p = precision_scope(Precision::F64);
        let model = TransformerModel::new(ModelConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            vocab_size: 16,
            context_len: 16,
            mlp_ratio: 4,
            seed: 4,
        })
        .unwrap();
        let lora = LoraConfig {
            dropout: 0.0,
            ..Default::default()
        }
        .with_mlp_targets();
        let mut adapters = AdapterSet::attach(&model, lora).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for (_, p) in adapters.named_params_mut() {
            let v: Vec<f64> = p.to_f64_vec().iter().map(|x| x + r.gen_range(-0.2..0.2)).collect();
            *p = Array::from_f64(p.shape(), &v).unwrap();
        }
        let sae = SparseAutoencoder::new_random(16, 64, 8, 1, 4).unwrap();
        let batch = TokenBatch::pack(&[&[1, 7, 3, 9, 12, 2], &[5, 5, 0, 14]], 0).unwrap();
        let cfg = TuneConfig::default();
        let session = SpliceSession::new(model.clone(), sae.clone(), adapters.clone(), cfg.clone()).unwrap();
        let (_, grads) = session.loss_and_grads(&batch, None).unwrap();
        let eps = 1e-4;
        let (mut worst, mut checked) = (0.0f64, 0usize);
        for (name, g) in &grads {
            for (i, &gi) in g.to_f64_vec().iter().enumerate() {
                let kl = |delta: f64| {
                    let mut set = adapters.clone();
                    for (n, p) in set.named_params_mut() {
                        if &n == name {
                            let mut v = p.to_f64_vec();
                            v[i] += delta;
                            *p = Array::from_f64(p.shape(), &v).unwrap();
                        }
                    }
                    SpliceSession::new(model.clone(), sae.clone(), set, cfg.clone())
                        .unwrap()
                        .batch_kl(&batch)
                        .unwrap()
                };
                let numeric = (kl(eps) - kl(-eps)) / (2.0 * eps);
                let denom = (gi.abs() + numeric.abs()).max(1e-6);
                if (gi - numeric).abs() > 1e-10 {
                    worst = worst.max((gi - numeric).abs() / denom);
                }
                checked += 1;
            }
        }
        (worst <= 1e-3, format!("{checked} adapter entries, max rel err {worst:.2e}"))
    });
}

#[test]
fn c05_pass_through_fixed_point() {
    criterion(5, "pass-through fixed point", 30, || {
        let model = toy_model(4, 32, 5);
        let sae = SparseAutoencoder::pass_through(32, 2, 5).unwrap();
        let adapters = AdapterSet::attach(&model, LoraConfig::default()).unwrap();
        let before = (model.param_hash(), sae.param_hash(), adapters.export().to_bytes());
        let cfg = TuneConfig {
            max_steps: Some(100),
            epochs: 100,
            ..Default::default()
        };
        let mut s = SpliceSession::new(model, sae, adapters, cfg).unwrap();
        let rep = s.tune(&trigger_seqs(200, 10, 5)).unwrap();
        let after = (s.base().param_hash(), s.sae().param_hash(), s.adapters().export().to_bytes());
        let ok = rep.initial_kl == 0.0 && rep.steps.len() == 100 && before == after;
        (
            ok,
            format!(
                "initial KL {:e}, {} steps, parameters {}",
                rep.initial_kl,
                rep.steps.len(),
                if before == after { "unchanged" } else { "CHANGED" }
            ),
        )
    });
}

#[test]
fn c06_freeze_invariants() {
    criterion(6, "freeze invariants", 60, || {
        let mut details = Vec::new();
        let mut ok = true;
        for seed in 0..3u64 {
            let model = toy_model(4, 32, 60 + seed);
            let sae = SparseAutoencoder::new_random(32, 128, 16, 2, seed).unwrap();
            let adapters = AdapterSet::attach(&model, LoraConfig { seed, ..Default::default() }).unwrap();
            let (mh, sh) = (model.param_hash(), sae.param_hash());
            let a0 = adapters.export().to_bytes();
            let cfg = TuneConfig {
                max_steps: Some(20),
                lr: 1e-2,
                seed,
                ..Default::default()
            };
            let mut s = SpliceSession::new(model, sae, adapters, cfg).unwrap();
            s.tune(&trigger_seqs(64, 10, seed)).unwrap();
            let frozen = s.base().param_hash() == mh && s.sae().param_hash() == sh;
            let moved = s.adapters().export().to_bytes() != a0;
            ok &= frozen && moved;
            details.push(format!("seed {seed}: frozen={frozen} adapters_moved={moved}"));
        }
        (ok, details.join("; "))
    });
}

#[test]
fn c07_end_to_end_directional() {
    criterion(7, "end-to-end directional", 900, || {
        let mut ok = true;
        let mut details = Vec::new();
        for seed in 0..3u64 {
            let cfg = RunConfig {
                seed,
                ..Default::default()
            }
            .resolved();
            let ws = Workspace::build(&cfg).unwrap();
            let ab = run_algorithm_ablation(&ws).unwrap();
            let base = ab.arm(ARM_BASE).unwrap().scored.final_exact_match();
            let tuned = ab.arm(ARM_SAE_TUNED).unwrap().scored.final_exact_match();
            let (k0, k1) = (ab.tuned.report.initial_kl, ab.tuned.report.final_kl);
            let gain = tuned - base >= 0.10;
            let kl = k1 <= 0.1 * k0;
            let frozen = ab.tuned.hashes_before == ab.tuned.hashes_after;
            ok &= gain && kl && frozen;
            details.push(format!(
                "seed {seed}: base {base:.3} tuned {tuned:.3} gain {}; KL {k0:.2e} -> {k1:.2e} ratio {:.3} {}",
                if gain { "ok" } else { "<0.10" },
                k1 / k0,
                if kl { "ok" } else { ">0.1" }
            ));
        }
        (ok, details.join(" | "))
    });
}

#[test]
fn c08_feature_count_oracle() {
    criterion(8, "feature counting oracle", 10, || {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut mismatches = 0;
        let mut nonzero = 0;
        for _ in 0..1000 {
            let p = r.gen_range(3..16);
            let m = r.gen_range(1..48);
            let density = r.gen_range(0.02..0.5);
            let mut z: Vec<f64> = (0..p * m)
                .map(|_| if r.gen_bool(density) { r.gen_range(-3.0..3.0) } else { 0.0 })
                .collect();
            let open = r.gen_range(0..p - 1);
            let close = r.gen_range(open + 1..p);
            for f in 0..m {
                if r.gen_bool(0.15) {
                    for pos in 0..p {
                        let on = pos == open || pos == close || r.gen_bool(0.05);
                        z[pos * m + f] = if on { r.gen_range(0.1..1.0) } else { 0.0 };
                    }
                }
            }
            let map = FeatureActivationMap {
                layer: 1,
                z: Array::from_f64(&[p, m], &z).unwrap(),
            };
            let want = brute_force_reasoning_count(&z, p, m, open, close);
            nonzero += usize::from(want > 0);
            if count_reasoning_features(&map, open, close, 0.0) != want {
                mismatches += 1;
            }
        }
        (mismatches == 0, format!("1000 maps ({nonzero} with reasoning features), {mismatches} mismatches"))
    });
}

#[test]
fn c09_probe_is_observational() {
    criterion(9, "probe is observational", 10, || {
        let model = toy_model(6, 32, 9);
        let prompt = encode_probe(PROBE_PROMPT, &Vocab::task_default()).unwrap();
        let saes: BTreeMap<usize, SparseAutoencoder> = (2..6)
            .map(|l| (l, SparseAutoencoder::new_random(32, 128, 16, l, l as u64).unwrap()))
            .collect();
        let plain = model.logits(&TokenBatch::single(&prompt.ids).unwrap()).unwrap();
        let (maps, probed) = probe_with_logits(&model, &saes, &prompt.ids).unwrap();
        let ok = plain.bit_eq(&probed) && maps.len() == 4;
        (ok, format!("{} probed layers, logits bit-identical: {}", maps.len(), plain.bit_eq(&probed)))
    });
}

fn planted(seed: u64) -> LayerDistribution {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..2000)
        .map(|_| {
            let u: f64 = r.gen();
            let mu = if u < 0.4 { 5.0 } else if u < 0.75 { 15.0 } else { 23.0 };
            Normal::new(mu, 1.5).unwrap().sample(&mut r)
        })
        .collect();
    LayerDistribution::from_samples(samples).unwrap()
}

#[test]
fn c10_em_correctness() {
    criterion(10, "EM correctness", 30, || {
        let mut monotone = true;
        let mut fits = 0;
        for seed in 0..8u64 {
            let fit = fit_em(&planted(seed), seed, 500, 1e-9).unwrap();
            monotone &= fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9);
            fits += 1;
        }
        let fit = fit_em(&planted(100), 0, 500, 1e-9).unwrap();
        monotone &= fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9);
        let dmu = [5.0, 15.0, 23.0].iter().zip(&fit.means).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dpi = [0.4, 0.35, 0.25].iter().zip(&fit.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        (
            monotone && dmu <= 0.3 && dpi <= 0.05,
            format!("{} fits monotone: {monotone}; planted max |dmu| {dmu:.3}, max |dpi| {dpi:.3}", fits + 1),
        )
    });
}

#[test]
fn c11_entropy_consistency() {
    criterion(11, "entropy consistency", 5, || {
        let d = LayerDistribution::new((1..=26).map(f64::from).collect(), vec![1.0; 26]).unwrap();
        let h = entropy(&d);
        let bound = 26f64.ln();
        let ok = (h - bound).abs() <= 1e-9;
        (
            ok,
            format!("H(uniform 26) = {h:.12}, ln 26 = {bound:.12}; 3.194 and 3.202 below bound: {}", 3.202 < bound),
        )
    });
}

fn smoke_cfg() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

#[test]
fn c12_modularity_plumbing() {
    criterion(12, "modularity plumbing", 300, || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("transfer");
        let m = saetune_cli::execute("transfer", &smoke_cfg(), &out).unwrap();
        let get = |arm: &str| m.summary.get(&format!("{arm}_exact_match")).cloned();
        let (base, zero, moved) = (
            get(TRANSFER_M2_BASELINE),
            get(TRANSFER_M2_ZERO_ADAPTER),
            get(TRANSFER_M1_ADAPTER_ON_M2),
        );
        let table = fs::read_to_string(out.join("transfer.csv")).unwrap_or_default();
        let tabulated = table.lines().any(|l| l.starts_with(TRANSFER_M1_ADAPTER_ON_M2));
        let ok = base.is_some() && base == zero && moved.is_some() && tabulated;
        (
            ok,
            format!("m2 baseline {base:?}, zero adapter {zero:?}, tuned adapter on m2 {moved:?}, tabulated {tabulated}"),
        )
    });
}

fn files_under(root: &Path, rel: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in fs::read_dir(root.join(rel)).unwrap() {
        let e = e.unwrap();
        let r = rel.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            files_under(root, &r, out);
        } else {
            out.push(r);
        }
    }
}

#[test]
fn c13_determinism_and_persistence() {
    criterion(13, "determinism and persistence", 120, || {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        saetune_cli::execute("sae-tune", &smoke_cfg(), &a).unwrap();
        saetune_cli::execute("sae-tune", &smoke_cfg(), &b).unwrap();
        let mut files = Vec::new();
        files_under(&a, Path::new(""), &mut files);
        files.sort();
        let mut differing = Vec::new();
        let mut compared = 0;
        for f in &files {
            let name = f.to_string_lossy();
            if name.ends_with("timing.csv") {
                continue;
            }
            compared += 1;
            if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
                differing.push(name.into_owned());
            }
        }

        // Round trips through every checkpoint kind.
        let mut round_trip = true;
        let bytes = fs::read(a.join("checkpoints/sae.ck")).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        round_trip &= ck.to_bytes() == bytes;
        let sae = SparseAutoencoder::from_checkpoint(&ck).unwrap();
        round_trip &= sae.to_checkpoint(ck.header.seed).to_bytes() == bytes;
        let model = toy_model(4, 32, 13);
        let mbytes = model.to_checkpoint().to_bytes();
        let back = TransformerModel::from_checkpoint(&Checkpoint::from_bytes(&mbytes).unwrap()).unwrap();
        round_trip &= back.to_checkpoint().to_bytes() == mbytes && back.param_hash() == model.param_hash();
        let abytes = fs::read(a.join("checkpoints/adapters.ck")).unwrap();
        let acks = Checkpoint::from_bytes(&abytes).unwrap();
        round_trip &= acks.to_bytes() == abytes;
        let path = dir.path().join("model.ck");
        model.to_checkpoint().save(&path).unwrap();
        round_trip &= Checkpoint::load(&path).unwrap().to_bytes() == mbytes;

        (
            differing.is_empty() && round_trip && compared > 0,
            format!("{compared} artifacts compared, differing {differing:?}; checkpoint round trips bit-exact: {round_trip}"),
        )
    });
}
