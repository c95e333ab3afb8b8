use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SparseAutoencoder;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::model::{Batches, Capture, ForwardOptions, TokenBatch, TransformerModel};
use crate::optim::{Schedule, Signum};
use crate::rng;
use crate::tensor::{Array, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub expansion_factor: usize,
    pub k: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate decay; `Constant` keeps every step at `lr`.
    pub schedule: Schedule,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Tokens per optimizer step.
    pub batch_tokens: usize,
    /// Tokens without entering any top-k set before a feature counts as dead.
    pub dead_feature_window: usize,
    pub normalize_decoder: bool,
    /// Re-seed dead features from high-error residual directions.
    pub resample_dead: bool,
    /// Tokens in the fixed subset used for the reported initial/final MSE.
    pub eval_tokens: usize,
    /// Sequences per harvesting forward pass.
    pub harvest_batch: usize,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            expansion_factor: 8,
            k: 32,
            lr: 2e-3,
            momentum: 0.9,
            schedule: Schedule::Constant,
            epochs: 1,
            max_steps: None,
            batch_tokens: 64,
            dead_feature_window: 10_000,
            normalize_decoder: true,
            resample_dead: false,
            eval_tokens: 4096,
            harvest_batch: 32,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("sae lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "sae momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.expansion_factor == 0 || self.k == 0 || self.batch_tokens == 0 {
            return Err(Error::Config(
                "expansion_factor, k and batch_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Where the SAE's starting weights come from.
#[derive(Clone, Debug)]
pub enum SaeInit {
    FromScratch,
    /// Continue training an existing SAE.
    FineTune(SparseAutoencoder),
    /// Use an existing SAE as-is; no training steps run.
    LoadPretrained(SparseAutoencoder),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SaeTrainReport {
    pub losses: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Dead-feature count after each step.
    pub dead_features: Vec<usize>,
    /// Largest decoder column-norm deviation from 1 at the end of each step.
    pub norm_errors: Vec<f64>,
    pub resampled: usize,
    pub tokens: usize,
}

/// Per-token MLP-output activations at `layer` for every non-padding
/// position, stacked `[tokens × d]`. The forward stops after `layer`.
pub fn harvest_activations(
    model: &TransformerModel,
    sequences: &[Vec<TokenId>],
    layer: usize,
    batch_size: usize,
) -> Result<Array> {
    Ok(harvest_layers(model, sequences, &[layer], batch_size)?
        .remove(&layer)
        .expect("requested layer"))
}

/// [`harvest_activations`] for several layers from one set of forward
/// passes, which stop after the deepest requested layer.
pub fn harvest_layers(
    model: &TransformerModel,
    sequences: &[Vec<TokenId>],
    layers: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<usize, Array>> {
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > model.config.num_layers) {
        return Err(Error::Config(format!(
            "hook layer {bad} outside 1..={}",
            model.config.num_layers
        )));
    }
    let deepest = layers.iter().copied().max().unwrap_or(1);
    let d = model.config.hidden_dim;
    let mut rows: BTreeMap<usize, Vec<f64>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for chunk in sequences.chunks(batch_size.max(1)) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = TokenBatch::pack(&seqs, 0)?;
        let mut cap = Capture::new(layers.iter().copied());
        model.forward(
            &batch,
            ForwardOptions {
                hook: Some(&mut cap),
                stop_after: Some(deepest),
                ..Default::default()
            },
        )?;
        let real = batch.real_rows();
        for (layer, out) in rows.iter_mut() {
            let acts = cap.captured[layer].to_f64_vec();
            for (r, &keep) in real.iter().enumerate() {
                if keep {
                    out.extend_from_slice(&acts[r * d..(r + 1) * d]);
                }
            }
        }
    }
    rows.into_iter()
        .map(|(l, v)| Ok((l, Array::from_f64(&[v.len() / d, d], &v)?)))
        .collect()
}

/// Harvest activations from `source` over `sequences` and fit an SAE.
pub fn train_sae(
    source: &TransformerModel,
    sequences: &[Vec<TokenId>],
    hook_layer: usize,
    cfg: &SaeTrainConfig,
    init: SaeInit,
) -> Result<(SparseAutoencoder, SaeTrainReport)> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Input("trigger dataset is empty".into()));
    }
    let acts = harvest_activations(source, sequences, hook_layer, cfg.harvest_batch)?;
    train_on_activations(&acts, hook_layer, cfg, init)
}

/// Fit an SAE to a fixed activation matrix `[tokens × d]`.
pub fn train_on_activations(
    acts: &Array,
    hook_layer: usize,
    cfg: &SaeTrainConfig,
    init: SaeInit,
) -> Result<(SparseAutoencoder, SaeTrainReport)> {
    cfg.validate()?;
    let (n, d) = match acts.shape() {
        [n, d] if *n > 0 => (*n, *d),
        s => return Err(Error::Input(format!("need a non-empty [tokens × d] matrix, got {s:?}"))),
    };
    let m = cfg.expansion_factor * d;
    if cfg.k > m {
        return Err(Error::Config(format!("k = {} exceeds m = {m}", cfg.k)));
    }
    let check = |s: &SparseAutoencoder| -> Result<()> {
        if s.d() != d || s.m() != m {
            return Err(Error::Load(format!(
                "sae checkpoint is [{} × {}] but training expects d = {d}, m = {m}",
                s.d(),
                s.m()
            )));
        }
        Ok(())
    };
    let (mut sae, train) = match init {
        SaeInit::FromScratch => (
            SparseAutoencoder::new_random(d, m, cfg.k, hook_layer, cfg.seed)?,
            true,
        ),
        SaeInit::FineTune(s) => {
            check(&s)?;
            (s, true)
        }
        SaeInit::LoadPretrained(s) => {
            check(&s)?;
            (s, false)
        }
    };
    sae.hook_layer = hook_layer;
    sae = sae.cast(acts.precision());

    let mut eval_idx: Vec<usize> = (0..n).collect();
    eval_idx.shuffle(&mut rng::stream(cfg.seed, "sae/eval-subset"));
    eval_idx.truncate(cfg.eval_tokens.max(1));
    eval_idx.sort_unstable();
    let eval_set = acts.select_rows(&eval_idx);

    let mut report = SaeTrainReport {
        initial_mse: sae.mse(&eval_set)?,
        tokens: n,
        ..Default::default()
    };
    let per_epoch = n.div_ceil(cfg.batch_tokens);
    let mut steps = if train { cfg.epochs * per_epoch } else { 0 };
    if let Some(cap) = cfg.max_steps {
        steps = steps.min(cap);
    }

    let mut opt = Signum::new(cfg.momentum);
    let mut batches = Batches::new(n, cfg.batch_tokens, rng::stream(cfg.seed, "sae/batches"));
    let mut norm_rng = rng::stream(cfg.seed, "sae/renorm");
    let mut since_fired = vec![0usize; m];
    for step in 0..steps {
        let idx = batches.next_batch();
        let x = Tensor::constant(acts.select_rows(&idx));
        let p = sae.bind(true);
        let z = sae.encode_with(&p, &x)?;
        let rec = sae.decode_with(&p, &z)?;
        let diff = rec.sub(&x)?;
        let loss = diff.mul(&diff)?.sum().scale(1.0 / idx.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("reconstruction loss became {value}"),
            });
        }
        loss.backward()?;
        let lr = cfg.schedule.lr_at(cfg.lr, step);
        let grads: Vec<(&str, Array)> = p
            .iter()
            .into_iter()
            .map(|(name, t)| (name, t.grad().expect("tracked")))
            .collect();
        for ((name, param), (_, g)) in sae.named_params_mut().into_iter().zip(&grads) {
            opt.update(name, param, g, lr);
        }
        if cfg.normalize_decoder {
            sae.renormalize_decoder(&mut norm_rng);
        }

        let zv = z.value().to_f64_vec();
        let mut fired = vec![false; m];
        for row in zv.chunks(m) {
            for (f, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    fired[f] = true;
                }
            }
        }
        for f in 0..m {
            since_fired[f] = if fired[f] { 0 } else { since_fired[f] + idx.len() };
        }
        let dead: Vec<usize> = (0..m)
            .filter(|&f| since_fired[f] >= cfg.dead_feature_window)
            .collect();
        if cfg.resample_dead && !dead.is_empty() {
            let residual = x.value().to_f64_vec();
            let recv = rec.value().to_f64_vec();
            resample(&mut sae, &mut opt, &dead, &residual, &recv, d);
            for &f in &dead {
                since_fired[f] = 0;
            }
            report.resampled += dead.len();
            report.dead_features.push(0);
        } else {
            report.dead_features.push(dead.len());
        }
        report.norm_errors.push(sae.max_column_norm_error());
        report.losses.push(value);
    }
    report.final_mse = sae.mse(&eval_set)?;
    if let Some(&dead) = report.dead_features.last() {
        log::info!(
            "sae layer {hook_layer}: {steps} steps, mse {:.4} -> {:.4}, {dead} dead features",
            report.initial_mse,
            report.final_mse
        );
    }
    Ok((sae, report))
}

/// Point each dead feature at the residual of a high-error token in the
/// current batch, cycling through tokens from worst to best.
fn resample(
    sae: &mut SparseAutoencoder,
    opt: &mut Signum,
    dead: &[usize],
    x: &[f64],
    rec: &[f64],
    d: usize,
) {
    let m = sae.m();
    let rows = x.len() / d;
    let mut by_err: Vec<(usize, f64)> = (0..rows)
        .map(|r| {
            let e = (0..d).map(|i| (x[r * d + i] - rec[r * d + i]).powi(2)).sum();
            (r, e)
        })
        .collect();
    by_err.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut enc = sae.w_enc.to_f64_vec();
    let mut dec = sae.w_dec.to_f64_vec();
    let mut benc = sae.b_enc.to_f64_vec();
    for (i, &f) in dead.iter().enumerate() {
        let r = by_err[i % rows].0;
        let dir: Vec<f64> = (0..d).map(|j| x[r * d + j] - rec[r * d + j]).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for j in 0..d {
            dec[j * m + f] = dir[j] / norm;
            enc[f * d + j] = dir[j] / norm;
        }
        benc[f] = 0.0;
    }
    let p = sae.w_enc.precision();
    let mk = |shape: &[usize], v: &[f64]| {
        Array::new(shape.to_vec(), crate::tensor::Storage::from_f64(p, v)).expect("same shape")
    };
    sae.w_enc = mk(&[m, d], &enc);
    sae.w_dec = mk(&[d, m], &dec);
    sae.b_enc = mk(&[m], &benc);
    let enc_idx: Vec<usize> = dead.iter().flat_map(|&f| (0..d).map(move |j| f * d + j)).collect();
    let dec_idx: Vec<usize> = dead.iter().flat_map(|&f| (0..d).map(move |j| j * m + f)).collect();
    opt.reset("w_enc", &enc_idx);
    opt.reset("w_dec", &dec_idx);
    opt.reset("b_enc", dead);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, d: usize) -> Array {
        let mut r = rng::stream(4, "blobs");
        let centers = rng::gaussian_vec(&mut r, 4 * d, 1.0);
        let noise = rng::gaussian_vec(&mut r, n * d, 0.05);
        let v: Vec<f64> = (0..n * d)
            .map(|i| centers[(i / d % 4) * d + i % d] + noise[i])
            .collect();
        Array::from_f64(&[n, d], &v).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let acts = blobs(64, 8);
        let cfg = SaeTrainConfig {
            expansion_factor: 2,
            k: 4,
            epochs: 0,
            ..Default::default()
        };
        let (s, r) = train_on_activations(&acts, 1, &cfg, SaeInit::FromScratch).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(s, SparseAutoencoder::new_random(8, 16, 4, 1, cfg.seed).unwrap());
    }

    #[test]
    fn load_pretrained_skips_training() {
        let acts = blobs(64, 8);
        let start = SparseAutoencoder::new_random(8, 16, 4, 1, 7).unwrap();
        let cfg = SaeTrainConfig {
            expansion_factor: 2,
            k: 4,
            ..Default::default()
        };
        let (s, r) =
            train_on_activations(&acts, 1, &cfg, SaeInit::LoadPretrained(start.clone())).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(s, start);
    }

    #[test]
    fn fine_tune_shape_mismatch_is_load_error() {
        let acts = blobs(64, 8);
        let wrong = SparseAutoencoder::new_random(8, 32, 4, 1, 7).unwrap();
        let cfg = SaeTrainConfig {
            expansion_factor: 2,
            k: 4,
            ..Default::default()
        };
        let err = train_on_activations(&acts, 1, &cfg, SaeInit::FineTune(wrong)).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
    }

    #[test]
    fn reconstruction_improves() {
        let acts = blobs(512, 8);
        let cfg = SaeTrainConfig {
            expansion_factor: 2,
            k: 4,
            epochs: 20,
            batch_tokens: 32,
            lr: 2e-3,
            ..Default::default()
        };
        let (s, r) = train_on_activations(&acts, 1, &cfg, SaeInit::FromScratch).unwrap();
        assert!(r.final_mse < r.initial_mse / 4.0, "{} -> {}", r.initial_mse, r.final_mse);
        assert!(s.max_column_norm_error() < 1e-5);
    }
}
