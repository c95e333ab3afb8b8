//! Optimizers and learning-rate schedules keyed by parameter name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Array, Scalar, Storage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the peak to `min_ratio × peak` over `total` steps,
    /// after a linear warmup.
    Cosine {
        total: usize,
        warmup: usize,
        min_ratio: f64,
    },
}

impl Schedule {
    pub fn lr_at(&self, peak: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => peak,
            Schedule::Cosine {
                total,
                warmup,
                min_ratio,
            } => {
                if step < warmup {
                    return peak * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let t = ((step - warmup) as f64 / span as f64).min(1.0);
                let min = peak * min_ratio;
                min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Storage, Storage)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64) {
        let n = param.len();
        let p = param.precision();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Storage::zeros(p, n), Storage::zeros(p, n)));
        let t = self.step.max(1) as i32;
        let h = AdamHyper {
            lr,
            b1: self.beta1,
            b2: self.beta2,
            eps: self.eps,
            wd: self.weight_decay,
            bc1: 1.0 - self.beta1.powi(t),
            bc2: 1.0 - self.beta2.powi(t),
        };
        match (param.storage_mut(), grad.storage(), m, v) {
            (Storage::F32(w), Storage::F32(g), Storage::F32(m), Storage::F32(v)) => {
                adam_kernel(w, g, m, v, &h)
            }
            (Storage::F64(w), Storage::F64(g), Storage::F64(m), Storage::F64(v)) => {
                adam_kernel(w, g, m, v, &h)
            }
            _ => panic!("precision mismatch between parameter and gradient"),
        }
    }
}

struct AdamHyper {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
}

fn adam_kernel<T: Scalar>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], h: &AdamHyper) {
    let (b1, b2) = (T::of(h.b1), T::of(h.b2));
    let (bc1, bc2) = (T::of(h.bc1), T::of(h.bc2));
    let (lr, eps, decay) = (T::of(h.lr), T::of(h.eps), T::of(h.lr * h.wd));
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        if h.wd != 0.0 {
            w[i] = w[i] - decay * w[i];
        }
        w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Sign-of-momentum descent: `m ← β·m + (1−β)·g`, `w ← w − lr·sign(m)`.
///
/// Entries whose momentum is exactly zero are left untouched.
#[derive(Clone, Debug)]
pub struct Signum {
    pub beta: f64,
    momentum: HashMap<String, Storage>,
}

impl Signum {
    pub fn new(beta: f64) -> Self {
        Signum {
            beta,
            momentum: HashMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64) {
        let n = param.len();
        let p = param.precision();
        let m = self
            .momentum
            .entry(name.to_string())
            .or_insert_with(|| Storage::zeros(p, n));
        let beta = self.beta;
        match (param.storage_mut(), grad.storage(), m) {
            (Storage::F32(w), Storage::F32(g), Storage::F32(m)) => signum_kernel(w, g, m, beta, lr),
            (Storage::F64(w), Storage::F64(g), Storage::F64(m)) => signum_kernel(w, g, m, beta, lr),
            _ => panic!("precision mismatch between parameter and gradient"),
        }
    }

    pub fn reset(&mut self, name: &str, indices: &[usize]) {
        if let Some(m) = self.momentum.get_mut(name) {
            for &i in indices {
                m.set(i, 0.0);
            }
        }
    }
}

fn signum_kernel<T: Scalar>(w: &mut [T], g: &[T], m: &mut [T], beta: f64, lr: f64) {
    let (b, lr) = (T::of(beta), T::of(lr));
    for i in 0..w.len() {
        m[i] = b * m[i] + (T::one() - b) * g[i];
        if m[i] > T::zero() {
            w[i] = w[i] - lr;
        } else if m[i] < T::zero() {
            w[i] = w[i] + lr;
        }
    }
}

/// Global L2 norm of a set of gradients.
pub fn grad_norm<'a>(grads: impl IntoIterator<Item = &'a Array>) -> f64 {
    grads
        .into_iter()
        .map(|g| g.to_f64_vec().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_decays_to_floor() {
        let s = Schedule::Cosine {
            total: 100,
            warmup: 0,
            min_ratio: 0.1,
        };
        assert_eq!(s.lr_at(1.0, 0), 1.0);
        assert!((s.lr_at(1.0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 50) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn signum_steps_have_fixed_magnitude() {
        let mut opt = Signum::new(0.9);
        let mut w = Array::from_f64(&[4], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let before = w.to_f64_vec();
        let g = Array::from_f64(&[4], &[0.5, -3.0, 0.0, 1e-9]).unwrap();
        opt.update("w", &mut w, &g, 0.25);
        let after = w.to_f64_vec();
        let deltas: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
        assert_eq!(deltas, vec![-0.25, 0.25, 0.0, -0.25]);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_noop() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let mut w = Array::from_f64(&[3], &[0.3, -0.2, 0.1]).unwrap();
        let before = w.clone();
        for _ in 0..10 {
            opt.begin_step();
            opt.update("w", &mut w, &Array::zeros(&[3]), 1e-2);
        }
        assert!(w.bit_eq(&before));
    }
}
