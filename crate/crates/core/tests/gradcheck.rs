//! Central-difference gradient checks in f64 for every differentiable op
//! and for the spliced KL loss with respect to adapter parameters.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saetune::lora::{AdapterSet, LoraConfig};
use saetune::model::{ModelConfig, TokenBatch, TransformerModel};
use saetune::sae::SparseAutoencoder;
use saetune::tensor::{precision_scope, Array, Precision, Tensor};
use saetune::tuning::{SpliceSession, TuneConfig};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-5;
/// Tolerance for the full spliced-model check.
const SPLICE_TOL: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Array::from_f64(shape, &v).unwrap().cast(Precision::F64)
}

/// Compare backward() against central differences of `f` for every
/// entry of every input.
fn check(inputs: Vec<Array>, f: impl Fn(&[Tensor]) -> Tensor) {
    let _g = precision_scope(Precision::F64);
    let leaves: Vec<Tensor> = inputs.iter().cloned().map(Tensor::param).collect();
    let out = f(&leaves);
    out.backward().unwrap();
    for (li, base) in inputs.iter().enumerate() {
        let analytic = leaves[li].grad().map(|g| g.to_f64_vec()).unwrap_or(vec![0.0; base.len()]);
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut vals = base.to_f64_vec();
                vals[i] += delta;
                let ts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        if j == li {
                            Tensor::constant(Array::from_f64(a.shape(), &vals).unwrap())
                        } else {
                            Tensor::constant(a.clone())
                        }
                    })
                    .collect();
                f(&ts).item()
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            let e = rel_err(analytic[i], numeric);
            assert!(
                e <= TOL || (analytic[i] - numeric).abs() < 1e-8,
                "input {li} entry {i}: analytic {} numeric {numeric} rel {e}",
                analytic[i]
            );
        }
    }
}

/// Weighted sum so that every output entry gets a distinct cotangent.
fn reduce(t: &Tensor, rng_seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::constant(random(&mut rng, t.shape()));
    t.mul(&w).unwrap().sum()
}

#[test]
fn matmul_add_sub_mul() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 2]), random(&mut r, &[3, 2])], |t| {
        let y = t[0].matmul(&t[1]).unwrap();
        let z = y.mul(&t[2]).unwrap().sub(&t[2]).unwrap().add(&y).unwrap();
        reduce(&z, 9)
    });
}

#[test]
fn transpose_reshape_scale_mean() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    check(vec![random(&mut r, &[3, 4])], |t| {
        let y = t[0].transpose().unwrap().reshape(&[2, 6]).unwrap().scale(0.7);
        reduce(&y, 3).add(&y.mean()).unwrap()
    });
}

#[test]
fn add_row_and_gelu() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    check(vec![random(&mut r, &[4, 3]), random(&mut r, &[3])], |t| {
        reduce(&t[0].add_row(&t[1]).unwrap().gelu(), 4)
    });
}

#[test]
fn softmax_rows() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    check(vec![random(&mut r, &[3, 5])], |t| reduce(&t[0].softmax(1).unwrap(), 5));
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    check(vec![random(&mut r, &[3, 6]), random(&mut r, &[6]), random(&mut r, &[6])], |t| {
        reduce(&t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap(), 6)
    });
}

#[test]
fn causal_attention_q_k_v() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let (b, s, d) = (2, 3, 4);
    check(
        vec![random(&mut r, &[b * s, d]), random(&mut r, &[b * s, d]), random(&mut r, &[b * s, d])],
        |t| reduce(&Tensor::causal_attention(&t[0], &t[1], &t[2], b, s, 2).unwrap(), 7),
    );
}

#[test]
fn embedding_table() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    check(vec![random(&mut r, &[5, 3])], |t| {
        reduce(&Tensor::embedding(&t[0], &[0, 3, 3, 1]).unwrap(), 8)
    });
}

#[test]
fn cross_entropy_with_ignored_rows() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    check(vec![random(&mut r, &[4, 5])], |t| {
        t[0].cross_entropy(&[Some(1), None, Some(4), Some(0)]).unwrap()
    });
}

#[test]
fn kl_div_against_constant_reference() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let reference = random(&mut r, &[4, 5]);
    check(vec![random(&mut r, &[4, 5])], move |t| {
        t[0].kl_div(&reference, &[true, true, false, true]).unwrap()
    });
}

#[test]
fn top_k_passes_gradient_through_kept_entries() {
    // Entries spaced well apart so ±EPS never changes the selection.
    let vals: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 * 0.1 - 0.5).collect();
    check(vec![Array::from_f64(&[2, 6], &vals).unwrap().cast(Precision::F64)], |t| reduce(&t[0].top_k_rows(3).unwrap(), 10));
}

/// Stage II KL gradient with respect to every adapter entry, on a 2-layer,
/// d=16, V=16 model with a random SAE at layer 1.
#[test]
fn spliced_kl_adapter_gradients() {
    let _g = precision_scope(Precision::F64);
    let model = TransformerModel::new(ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        vocab_size: 16,
        context_len: 8,
        mlp_ratio: 2,
        seed: 11,
    })
    .unwrap();
    let mut adapters = AdapterSet::attach(
        &model,
        LoraConfig {
            rank: 2,
            dropout: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    // Nonzero B so both factors carry gradient.
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for (_, p) in adapters.named_params_mut() {
        let v: Vec<f64> = p.to_f64_vec().iter().map(|x| x + r.gen_range(-0.3..0.3)).collect();
        *p = Array::from_f64(p.shape(), &v).unwrap();
    }
    let sae = SparseAutoencoder::new_random(16, 32, 4, 1, 13).unwrap();
    let batch = TokenBatch::pack(&[&[1, 5, 9, 2, 7], &[3, 3, 14]], 0).unwrap();
    let session = SpliceSession::new(model, sae, adapters.clone(), TuneConfig::default()).unwrap();
    let (_, grads) = session.loss_and_grads(&batch, None).unwrap();
    assert_eq!(grads.len(), adapters.named_params().len());

    let kl_at = |set: AdapterSet| {
        let s = SpliceSession::new(session.base().clone(), session.sae().clone(), set, TuneConfig::default())
            .unwrap();
        s.batch_kl(&batch).unwrap()
    };
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        let g = g.to_f64_vec();
        for i in 0..g.len() {
            let nudge = |delta: f64| {
                let mut set = adapters.clone();
                for (n, p) in set.named_params_mut() {
                    if &n == name {
                        let mut v = p.to_f64_vec();
                        v[i] += delta;
                        *p = Array::from_f64(p.shape(), &v).unwrap();
                    }
                }
                kl_at(set)
            };
            let numeric = (nudge(EPS) - nudge(-EPS)) / (2.0 * EPS);
            if (g[i] - numeric).abs() > 1e-9 {
                worst = worst.max(rel_err(g[i], numeric));
            }
        }
    }
    assert!(worst <= SPLICE_TOL, "worst relative error {worst}");
}
