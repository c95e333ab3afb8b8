use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ForwardOptions, TokenBatch, TransformerModel};
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::optim::{grad_norm, AdamW, Schedule};
use crate::rng::{self, Rng};
use crate::tensor::{Array, Storage};

/// Endless seeded stream of index batches; reshuffles every epoch.
pub struct Batches {
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
    pub epoch: usize,
}

impl Batches {
    pub fn new(n: usize, size: usize, rng: Rng) -> Self {
        let mut b = Batches {
            n,
            size: size.clamp(1, n.max(1)),
            order: (0..n).collect(),
            pos: 0,
            rng,
            epoch: 0,
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            warmup: 50,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmTrainReport {
    pub losses: Vec<f64>,
}

pub(crate) fn scaled(a: &Array, c: f64) -> Array {
    let v: Vec<f64> = a.to_f64_vec().iter().map(|x| x * c).collect();
    Array::new(a.shape().to_vec(), Storage::from_f64(a.precision(), &v)).expect("same shape")
}

/// Next-token cross-entropy training of every parameter with AdamW.
pub fn train_lm(
    model: &mut TransformerModel,
    data: &[Vec<TokenId>],
    cfg: &LmTrainConfig,
) -> Result<LmTrainReport> {
    let mut report = LmTrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let schedule = Schedule::Cosine {
        total: cfg.steps,
        warmup: cfg.warmup,
        min_ratio: 0.1,
    };
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut batches = Batches::new(data.len(), cfg.batch_size, rng::stream(cfg.seed, "lm/batches"));
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let seqs: Vec<&[TokenId]> = idx.iter().map(|&i| data[i].as_slice()).collect();
        let batch = TokenBatch::pack(&seqs, 0)?;
        let out = model.forward(
            &batch,
            ForwardOptions {
                track_base: true,
                ..Default::default()
            },
        )?;
        let loss = out
            .logits
            .expect("full forward")
            .cross_entropy(&batch.next_token_targets())?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss became {value}"),
            });
        }
        loss.backward()?;
        let grads: Vec<(String, Array)> = out
            .base_leaves
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().expect("tracked leaf")))
            .collect();
        let norm = grad_norm(grads.iter().map(|(_, g)| g));
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = schedule.lr_at(cfg.lr, step);
        opt.begin_step();
        let mut params = model.named_params_mut();
        for (name, g) in &grads {
            let g = if clip < 1.0 { scaled(g, clip) } else { g.clone() };
            let (_, p) = params
                .iter_mut()
                .find(|(n, _)| n == name)
                .expect("leaf names match parameters");
            opt.update(name, p, &g, lr);
        }
        report.losses.push(value);
    }
    Ok(report)
}
