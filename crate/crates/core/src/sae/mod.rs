//! Top-k sparse autoencoder over one layer's MLP-output activations.
//!
//! ```text
//! z  = TopK((x − b_dec)·W_encᵀ + b_enc)
//! x̃ = z·W_decᵀ + b_dec
//! ```
//!
//! `W_enc` is `[m × d]`, `W_dec` is `[d × m]`; rows of the activation
//! matrices are tokens.

mod train;

pub use train::{
    harvest_activations, harvest_layers, train_on_activations, train_sae, SaeInit, SaeTrainConfig,
    SaeTrainReport,
};

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::hex;
use crate::rng::{self, Rng};
use crate::tensor::{Array, Storage, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder {
    pub w_enc: Array,
    pub w_dec: Array,
    pub b_enc: Array,
    pub b_dec: Array,
    pub k: usize,
    pub hook_layer: usize,
}

/// The four parameters bound into a graph, in `named_params` order.
pub struct SaeLeaves {
    pub w_enc: Tensor,
    pub w_dec: Tensor,
    pub b_enc: Tensor,
    pub b_dec: Tensor,
}

impl SaeLeaves {
    pub fn iter(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_enc", &self.w_enc),
            ("w_dec", &self.w_dec),
            ("b_enc", &self.b_enc),
            ("b_dec", &self.b_dec),
        ]
    }
}

impl SparseAutoencoder {
    /// Random unit-norm decoder columns, tied encoder `W_enc = W_decᵀ`,
    /// zero biases.
    pub fn new_random(d: usize, m: usize, k: usize, hook_layer: usize, seed: u64) -> Result<Self> {
        check_dims(d, m, k)?;
        let mut r = rng::stream(seed, "sae/init");
        let raw = rng::gaussian_vec(&mut r, d * m, 1.0);
        let mut dec = vec![0.0; d * m];
        for j in 0..m {
            let norm = (0..d).map(|i| raw[i * m + j].powi(2)).sum::<f64>().sqrt();
            for i in 0..d {
                dec[i * m + j] = raw[i * m + j] / norm;
            }
        }
        let mut enc = vec![0.0; m * d];
        for i in 0..d {
            for j in 0..m {
                enc[j * d + i] = dec[i * m + j];
            }
        }
        Ok(SparseAutoencoder {
            w_enc: Array::from_f64(&[m, d], &enc)?,
            w_dec: Array::from_f64(&[d, m], &dec)?,
            b_enc: Array::zeros(&[m]),
            b_dec: Array::zeros(&[d]),
            k,
            hook_layer,
        })
    }

    /// Exact identity map: `d = m = k`, `W_dec` a signed permutation and
    /// `W_enc = W_decᵀ`, zero biases. Every product involves a single ±1,
    /// so reconstruction is exact in floating point.
    pub fn pass_through(d: usize, hook_layer: usize, seed: u64) -> Result<Self> {
        check_dims(d, d, d)?;
        let mut r = rng::stream(seed, "sae/pass-through");
        let mut perm: Vec<usize> = (0..d).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let mut dec = vec![0.0; d * d];
        let mut enc = vec![0.0; d * d];
        for (j, &i) in perm.iter().enumerate() {
            let s = if rand::Rng::gen_bool(&mut r, 0.5) { 1.0 } else { -1.0 };
            dec[i * d + j] = s;
            enc[j * d + i] = s;
        }
        Ok(SparseAutoencoder {
            w_enc: Array::from_f64(&[d, d], &enc)?,
            w_dec: Array::from_f64(&[d, d], &dec)?,
            b_enc: Array::zeros(&[d]),
            b_dec: Array::zeros(&[d]),
            k: d,
            hook_layer,
        })
    }

    pub fn d(&self) -> usize {
        self.w_dec.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.w_dec.shape()[1]
    }

    pub fn named_params(&self) -> [(&'static str, &Array); 4] {
        [
            ("w_enc", &self.w_enc),
            ("w_dec", &self.w_dec),
            ("b_enc", &self.b_enc),
            ("b_dec", &self.b_dec),
        ]
    }

    pub fn named_params_mut(&mut self) -> [(&'static str, &mut Array); 4] {
        [
            ("w_enc", &mut self.w_enc),
            ("w_dec", &mut self.w_dec),
            ("b_enc", &mut self.b_enc),
            ("b_dec", &mut self.b_dec),
        ]
    }

    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, a) in self.named_params() {
            h.update(n.as_bytes());
            h.update(a.storage().to_le_bytes());
        }
        h.update((self.k as u64).to_le_bytes());
        hex(&h.finalize())
    }

    pub fn cast(&self, p: crate::tensor::Precision) -> SparseAutoencoder {
        let mut s = self.clone();
        for (_, a) in s.named_params_mut() {
            *a = a.cast(p);
        }
        s
    }

    pub fn bind(&self, track: bool) -> SaeLeaves {
        let b = |a: &Array| {
            if track {
                Tensor::param(a.clone())
            } else {
                Tensor::constant(a.clone())
            }
        };
        SaeLeaves {
            w_enc: b(&self.w_enc),
            w_dec: b(&self.w_dec),
            b_enc: b(&self.b_enc),
            b_dec: b(&self.b_dec),
        }
    }

    /// Sparse code for a batch `[n × d]` through bound parameters.
    pub fn encode_with(&self, p: &SaeLeaves, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let centered = x.add_row(&p.b_dec.scale(-1.0))?;
        centered
            .matmul(&p.w_enc.transpose()?)?
            .add_row(&p.b_enc)?
            .top_k_rows(self.k.min(self.m()))
    }

    pub fn decode_with(&self, p: &SaeLeaves, z: &Tensor) -> Result<Tensor> {
        match z.shape() {
            [_, m] if *m == self.m() => {}
            s => return Err(Error::Input(format!("latent shape {s:?} does not have width {}", self.m()))),
        }
        z.matmul(&p.w_dec.transpose()?)?.add_row(&p.b_dec)
    }

    /// `decode(encode(x))` for a batch, as a graph node; gradients flow to
    /// `x` and to any tracked parameters in `p`.
    pub fn reconstruct_with(&self, p: &SaeLeaves, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_with(p, x)?;
        self.decode_with(p, &z)
    }

    /// Accepts a single vector `[d]` or a batch `[n × d]`.
    pub fn encode(&self, x: &Array) -> Result<Array> {
        let (x, single) = as_batch(x)?;
        let z = self.encode_with(&self.bind(false), &Tensor::constant(x))?;
        unbatch(z.value(), single)
    }

    pub fn decode(&self, z: &Array) -> Result<Array> {
        let (z, single) = as_batch(z)?;
        let out = self.decode_with(&self.bind(false), &Tensor::constant(z))?;
        unbatch(out.value(), single)
    }

    pub fn reconstruct(&self, x: &Array) -> Result<Array> {
        self.decode(&self.encode(x)?)
    }

    /// Mean over rows of the squared reconstruction error.
    pub fn mse(&self, x: &Array) -> Result<f64> {
        let (x, _) = as_batch(x)?;
        let rec = self.reconstruct(&x)?.to_f64_vec();
        let xv = x.to_f64_vec();
        let n = x.shape()[0].max(1);
        Ok(xv.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, d] if *d == self.d() => Ok(()),
            _ => Err(Error::Input(format!(
                "activation shape {shape:?} does not have width {}",
                self.d()
            ))),
        }
    }

    /// Scale every decoder column to unit norm. Zero columns are redrawn from
    /// `rng` first. Returns the indices that were redrawn.
    pub fn renormalize_decoder(&mut self, rng: &mut Rng) -> Vec<usize> {
        let (d, m) = (self.d(), self.m());
        let mut w = self.w_dec.to_f64_vec();
        let mut redrawn = Vec::new();
        for j in 0..m {
            let mut norm = (0..d).map(|i| w[i * m + j].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                log::warn!("decoder column {j} collapsed; reinitializing");
                let fresh = rng::gaussian_vec(rng, d, 1.0);
                for i in 0..d {
                    w[i * m + j] = fresh[i];
                }
                norm = fresh.iter().map(|v| v * v).sum::<f64>().sqrt();
                redrawn.push(j);
            }
            for i in 0..d {
                w[i * m + j] /= norm;
            }
        }
        self.w_dec = Array::new(vec![d, m], Storage::from_f64(self.w_dec.precision(), &w))
            .expect("same shape");
        redrawn
    }

    /// Largest deviation of a decoder column norm from 1.
    pub fn max_column_norm_error(&self) -> f64 {
        let (d, m) = (self.d(), self.m());
        let w = self.w_dec.to_f64_vec();
        (0..m)
            .map(|j| ((0..d).map(|i| w[i * m + j].powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "k": self.k,
            "m": self.m(),
            "d": self.d(),
            "hook_layer": self.hook_layer,
        });
        let mut ck = Checkpoint::new("sae", seed, meta);
        for (n, a) in self.named_params() {
            ck.push(n, a.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_kind("sae")?;
        let field = |name: &str| {
            ck.header.meta[name]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Load(format!("sae header is missing {name}")))
        };
        let (k, m, d, hook_layer) = (field("k")?, field("m")?, field("d")?, field("hook_layer")?);
        check_dims(d, m, k).map_err(|e| Error::Load(e.to_string()))?;
        Ok(SparseAutoencoder {
            w_enc: ck.expect("w_enc", &[m, d])?,
            w_dec: ck.expect("w_dec", &[d, m])?,
            b_enc: ck.expect("b_enc", &[m])?,
            b_dec: ck.expect("b_dec", &[d])?,
            k,
            hook_layer,
        })
    }
}

fn check_dims(d: usize, m: usize, k: usize) -> Result<()> {
    if d == 0 || m == 0 || k == 0 || k > m {
        return Err(Error::Config(format!(
            "sae needs d, m >= 1 and 1 <= k <= m; got d={d}, m={m}, k={k}"
        )));
    }
    Ok(())
}

fn as_batch(x: &Array) -> Result<(Array, bool)> {
    match x.shape() {
        [n] => Ok((x.reshape(&[1, *n])?, true)),
        [_, _] => Ok((x.clone(), false)),
        s => Err(Error::Input(format!("expected a vector or matrix, got shape {s:?}"))),
    }
}

fn unbatch(a: &Array, single: bool) -> Result<Array> {
    if single {
        a.reshape(&[a.shape()[1]])
    } else {
        Ok(a.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_code_decodes_to_bias() {
        let mut s = SparseAutoencoder::new_random(4, 8, 2, 1, 0).unwrap();
        s.b_dec = Array::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let out = s.decode(&Array::zeros(&[8])).unwrap();
        assert!(out.bit_eq(&s.b_dec));
    }

    #[test]
    fn pass_through_is_exact() {
        let s = SparseAutoencoder::pass_through(6, 1, 3).unwrap();
        let x = Array::from_f64(&[2, 6], &[0.3, -1.7, 2.2, 1e-7, -0.0001, 5.5, 1.0, 2.0, -3.0, 0.1, 0.2, 0.3])
            .unwrap();
        assert!(s.reconstruct(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn wrong_width_is_input_error() {
        let s = SparseAutoencoder::new_random(4, 8, 2, 1, 0).unwrap();
        assert!(matches!(s.encode(&Array::zeros(&[5])), Err(Error::Input(_))));
        assert!(matches!(s.decode(&Array::zeros(&[4])), Err(Error::Input(_))));
    }

    #[test]
    fn zero_column_is_redrawn() {
        let mut s = SparseAutoencoder::new_random(3, 4, 2, 1, 0).unwrap();
        let mut w = s.w_dec.to_f64_vec();
        for i in 0..3 {
            w[i * 4 + 2] = 0.0;
        }
        s.w_dec = Array::from_f64(&[3, 4], &w).unwrap();
        let redrawn = s.renormalize_decoder(&mut rng::stream(0, "t"));
        assert_eq!(redrawn, vec![2]);
        assert!(s.max_column_norm_error() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = SparseAutoencoder::new_random(4, 8, 3, 2, 9).unwrap();
        let back = SparseAutoencoder::from_checkpoint(
            &Checkpoint::from_bytes(&s.to_checkpoint(9).to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, s);
    }
}
