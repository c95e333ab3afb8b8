//! Adapter training through a spliced sparse autoencoder.
//!
//! The frozen SAE replaces one layer's MLP output with its reconstruction;
//! the adapters are trained so the spliced model's next-token distributions
//! match a detached reference, `KL(spliced ‖ reference)`. The SAE is dropped
//! again for inference.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, AdapterSet};
use crate::model::{
    Batches, ForwardHook, ForwardOptions, TokenBatch, TransformerModel,
};
use crate::optim::{AdamW, Schedule};
use crate::rng::{self, Rng};
use crate::sae::{SaeLeaves, SparseAutoencoder};
use crate::tensor::{Array, Tensor};

/// Which network produces the target distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// The unadapted base model without the SAE.
    #[default]
    Base,
    /// The adapted model without the SAE (current adapter values).
    Adapted,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ReferenceMode::Base),
            "adapted" => Ok(ReferenceMode::Adapted),
            _ => Err(Error::Config(format!("unknown reference mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Floor of the cosine schedule as a fraction of the peak lr.
    pub min_lr_ratio: f64,
    pub reference: ReferenceMode,
    /// Sequences held fixed for the before/after KL measurement.
    pub eval_sequences: usize,
    /// Snapshot the adapters every this many steps; `0` disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            lr: 1e-3,
            epochs: 2,
            max_steps: None,
            batch_size: 8,
            weight_decay: 0.0,
            warmup: 0,
            min_lr_ratio: 0.1,
            reference: ReferenceMode::Base,
            eval_sequences: 64,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!(
                "min_lr_ratio must be in [0, 1], got {}",
                self.min_lr_ratio
            )));
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `n` sequences.
    pub fn total_steps(&self, n: usize) -> usize {
        let steps = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(steps, |cap| steps.min(cap))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub kl: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default)]
pub struct TuneReport {
    pub steps: Vec<StepRecord>,
    /// KL on the fixed evaluation sequences before the first step.
    pub initial_kl: f64,
    /// KL on the same sequences after the last step.
    pub final_kl: f64,
    pub snapshots: Vec<(usize, AdapterSet)>,
}

impl TuneReport {
    /// `step,kl_loss,lr`; free of timing so reruns are byte-identical.
    pub fn kl_csv(&self) -> String {
        let mut s = String::from("step,kl_loss,lr\n");
        for r in &self.steps {
            writeln!(s, "{},{},{}", r.step, r.kl, r.lr).expect("string write");
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_ms\n");
        for r in &self.steps {
            writeln!(s, "{},{}", r.step, r.wall_ms).expect("string write");
        }
        s
    }

    /// Mean KL over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |r: &[StepRecord]| r.iter().map(|s| s.kl).sum::<f64>() / r.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }
}

/// Replaces the hook layer's MLP output with the SAE reconstruction.
struct Splice<'a> {
    sae: &'a SparseAutoencoder,
    params: SaeLeaves,
}

impl ForwardHook for Splice<'_> {
    fn mlp_out(&mut self, layer: usize, out: Tensor) -> Result<Tensor> {
        if layer == self.sae.hook_layer {
            self.sae.reconstruct_with(&self.params, &out)
        } else {
            Ok(out)
        }
    }
}

/// `KL(softmax(spliced) ‖ softmax(reference))` per position, averaged over
/// the rows where `mask` is true. The reference is a constant.
pub fn kl_loss(spliced: &Tensor, reference: &Array, mask: &[bool]) -> Result<Tensor> {
    if spliced.shape() != reference.shape() || spliced.shape().len() != 2 {
        return Err(Error::Input(format!(
            "kl_loss needs equal [positions × V] logits, got {:?} and {:?}",
            spliced.shape(),
            reference.shape()
        )));
    }
    if mask.len() != spliced.shape()[0] {
        return Err(Error::Input(format!(
            "mask has {} rows, logits have {}",
            mask.len(),
            spliced.shape()[0]
        )));
    }
    spliced.kl_div(reference, mask)
}

pub struct SpliceSession {
    base: TransformerModel,
    sae: SparseAutoencoder,
    adapters: AdapterSet,
    config: TuneConfig,
}

impl SpliceSession {
    pub fn new(
        base: TransformerModel,
        sae: SparseAutoencoder,
        adapters: AdapterSet,
        config: TuneConfig,
    ) -> Result<Self> {
        config.validate()?;
        if sae.d() != base.config.hidden_dim {
            return Err(Error::Splice(format!(
                "sae width {} does not match model hidden width {}",
                sae.d(),
                base.config.hidden_dim
            )));
        }
        if sae.hook_layer == 0 || sae.hook_layer > base.config.num_layers {
            return Err(Error::Splice(format!(
                "sae hook layer {} outside 1..={}",
                sae.hook_layer, base.config.num_layers
            )));
        }
        adapters
            .check_compatible(&base)
            .map_err(|e| Error::Splice(e.to_string()))?;
        let sae = sae.cast(base.tok_emb.precision());
        Ok(SpliceSession {
            base,
            sae,
            adapters,
            config,
        })
    }

    pub fn base(&self) -> &TransformerModel {
        &self.base
    }

    pub fn sae(&self) -> &SparseAutoencoder {
        &self.sae
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterSet {
        &mut self.adapters
    }

    pub fn config(&self) -> &TuneConfig {
        &self.config
    }

    /// Reference logits for `batch` under the configured mode.
    pub fn reference_logits(&self, batch: &TokenBatch) -> Result<Array> {
        self.reference_with(&self.adapters, batch)
    }

    fn reference_with(&self, adapters: &AdapterSet, batch: &TokenBatch) -> Result<Array> {
        match self.config.reference {
            ReferenceMode::Base => self.base.logits(batch),
            ReferenceMode::Adapted => self.base.logits_with(batch, Some(adapters), None),
        }
    }

    /// Spliced forward with `adapters` active; returns the graph output plus
    /// adapter leaves when `track` is set.
    fn spliced(
        &self,
        adapters: &AdapterSet,
        batch: &TokenBatch,
        track: bool,
        dropout: Option<&mut Rng>,
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut hook = Splice {
            sae: &self.sae,
            params: self.sae.bind(false),
        };
        let out = self.base.forward(
            batch,
            ForwardOptions {
                adapters: Some(adapters),
                track_adapters: track,
                dropout_rng: dropout,
                hook: Some(&mut hook),
                ..Default::default()
            },
        )?;
        Ok((out.logits.expect("full forward"), out.adapter_leaves))
    }

    /// `(spliced logits, reference logits)` in evaluation mode.
    pub fn spliced_forward(&self, batch: &TokenBatch) -> Result<(Array, Array)> {
        let (y_tilde, _) = self.spliced(&self.adapters, batch, false, None)?;
        Ok((y_tilde.value().clone(), self.reference_logits(batch)?))
    }

    /// KL over every non-padding position of `batch`.
    pub fn batch_kl(&self, batch: &TokenBatch) -> Result<f64> {
        let (y_tilde, _) = self.spliced(&self.adapters, batch, false, None)?;
        let y = self.reference_logits(batch)?;
        Ok(kl_loss(&y_tilde, &y, &batch.real_rows())?.item())
    }

    /// Loss and adapter gradients for one batch, without updating anything.
    pub fn loss_and_grads(
        &self,
        batch: &TokenBatch,
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, Vec<(String, Array)>)> {
        self.loss_and_grads_with(&self.adapters, batch, dropout)
    }

    fn loss_and_grads_with(
        &self,
        adapters: &AdapterSet,
        batch: &TokenBatch,
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, Vec<(String, Array)>)> {
        let y = self.reference_with(adapters, batch)?;
        let (y_tilde, leaves) = self.spliced(adapters, batch, true, dropout)?;
        let loss = kl_loss(&y_tilde, &y, &batch.real_rows())?;
        Ok((loss.item(), leaf_grads(&loss, leaves)?))
    }

    fn mean_kl(&self, seqs: &[&[TokenId]]) -> Result<f64> {
        let mut total = 0.0;
        let mut rows = 0usize;
        for chunk in seqs.chunks(self.config.batch_size.max(8)) {
            let batch = TokenBatch::pack(chunk, 0)?;
            let n = batch.lengths.iter().sum::<usize>();
            total += self.batch_kl(&batch)? * n as f64;
            rows += n;
        }
        Ok(if rows == 0 { 0.0 } else { total / rows as f64 })
    }

    /// Train the adapters on `data`. Only adapter parameters change.
    pub fn tune(&mut self, data: &[Vec<TokenId>]) -> Result<TuneReport> {
        let cfg = self.config.clone();
        let mut eval_idx: Vec<usize> = (0..data.len()).collect();
        eval_idx.shuffle(&mut rng::stream(cfg.seed, "tune/eval-subset"));
        eval_idx.truncate(cfg.eval_sequences);
        eval_idx.sort_unstable();
        let eval_seqs: Vec<&[TokenId]> = eval_idx.iter().map(|&i| data[i].as_slice()).collect();
        let initial_kl = self.mean_kl(&eval_seqs)?;

        let mut adapters = self.adapters.clone();
        let mut report = adapter_loop(&mut adapters, data, &cfg, |set, batch, dropout| {
            self.loss_and_grads_with(set, batch, Some(dropout))
        })?;
        self.adapters = adapters;
        report.initial_kl = initial_kl;
        report.final_kl = self.mean_kl(&eval_seqs)?;
        Ok(report)
    }

    /// The base model with the trained adapters and no SAE.
    pub fn finalize(&self) -> AdaptedModel {
        AdaptedModel {
            base: self.base.clone(),
            adapters: self.adapters.clone(),
        }
    }
}

fn leaf_grads(loss: &Tensor, leaves: Vec<(String, Tensor)>) -> Result<Vec<(String, Array)>> {
    if loss.requires_grad() {
        loss.backward()?;
    }
    Ok(leaves
        .into_iter()
        .map(|(n, t)| {
            let g = t
                .grad()
                .unwrap_or_else(|| Array::zeros_with(t.shape(), t.value().precision()));
            (n, g)
        })
        .collect())
}

/// Optimizer loop shared by every adapter-training objective. `step` gives
/// the loss and adapter gradients for one batch under the current adapters.
/// Batch order and dropout draws depend only on `cfg.seed`.
fn adapter_loop<F>(
    adapters: &mut AdapterSet,
    data: &[Vec<TokenId>],
    cfg: &TuneConfig,
    mut step_fn: F,
) -> Result<TuneReport>
where
    F: FnMut(&AdapterSet, &TokenBatch, &mut Rng) -> Result<(f64, Vec<(String, Array)>)>,
{
    cfg.validate()?;
    let mut report = TuneReport::default();
    let steps = if data.is_empty() { 0 } else { cfg.total_steps(data.len()) };
    let schedule = Schedule::Cosine {
        total: steps,
        warmup: cfg.warmup,
        min_ratio: cfg.min_lr_ratio,
    };
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut batches = Batches::new(data.len(), cfg.batch_size, rng::stream(cfg.seed, "tune/batches"));
    let mut dropout = rng::stream(cfg.seed, "tune/dropout");
    let start = Instant::now();
    for step in 0..steps {
        let idx = batches.next_batch();
        let seqs: Vec<&[TokenId]> = idx.iter().map(|&i| data[i].as_slice()).collect();
        let batch = TokenBatch::pack(&seqs, 0)?;
        let (loss, grads) = step_fn(adapters, &batch, &mut dropout)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss became {loss}"),
            });
        }
        let lr = schedule.lr_at(cfg.lr, step);
        opt.begin_step();
        let mut params = adapters.named_params_mut();
        for (name, g) in &grads {
            let (_, p) = params
                .iter_mut()
                .find(|(n, _)| n == name)
                .expect("leaf names match adapter parameters");
            opt.update(name, p, g, lr);
        }
        report.steps.push(StepRecord {
            step,
            kl: loss,
            lr,
            wall_ms: start.elapsed().as_millis(),
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            report.snapshots.push((step + 1, adapters.clone()));
        }
    }
    Ok(report)
}

/// Plain next-token cross-entropy training of `adapters` on `base`, with
/// the same optimizer, schedule, batch order and dropout stream as
/// [`SpliceSession::tune`]. The report's `kl` column holds the CE loss.
pub fn sft_adapters(
    base: &TransformerModel,
    adapters: &mut AdapterSet,
    data: &[Vec<TokenId>],
    cfg: &TuneConfig,
) -> Result<TuneReport> {
    adapters.check_compatible(base)?;
    adapter_loop(adapters, data, cfg, |set, batch, dropout| {
        let out = base.forward(
            batch,
            ForwardOptions {
                adapters: Some(set),
                track_adapters: true,
                dropout_rng: Some(dropout),
                ..Default::default()
            },
        )?;
        let logits = out.logits.expect("full forward");
        let loss = logits.cross_entropy(&batch.next_token_targets())?;
        Ok((loss.item(), leaf_grads(&loss, out.adapter_leaves)?))
    })
}
