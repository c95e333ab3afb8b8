//! Three-component 1-D Gaussian mixtures over layer-indexed distributions.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const COMPONENTS: usize = 3;
pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const RESTARTS: u64 = 5;

/// Nonnegative weights over real-valued positions (layer indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LayerDistribution {
    pub fn new(positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if positions.len() != weights.len() {
            return Err(Error::Input(format!(
                "{} positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || positions.iter().any(|p| !p.is_finite())
        {
            return Err(Error::Input("weights must be finite and nonnegative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Input("distribution has no mass".into()));
        }
        Ok(LayerDistribution { positions, weights })
    }

    /// Equal weight on every sample.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        let w = vec![1.0; samples.len()];
        LayerDistribution::new(samples, w)
    }

    /// Scores turned into weights, optionally shifted so the lowest score
    /// gets zero weight.
    pub fn from_scores(layers: Vec<f64>, scores: &[f64], min_subtracted: bool) -> Result<Self> {
        let shift = if min_subtracted {
            scores.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            0.0
        };
        LayerDistribution::new(layers, scores.iter().map(|s| s - shift).collect())
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    fn distinct_support(&self) -> usize {
        let mut pts: Vec<f64> = self
            .positions
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&p, _)| p)
            .collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts.len()
    }
}

/// Shannon entropy of the normalized weights in the given log base
/// (`std::f64::consts::E` for nats). `0·log 0 = 0`.
pub fn entropy_base(dist: &LayerDistribution, base: f64) -> f64 {
    let h: f64 = dist
        .normalized()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h / base.ln()
}

/// Entropy in nats.
pub fn entropy(dist: &LayerDistribution) -> f64 {
    entropy_base(dist, std::f64::consts::E)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    /// Components sorted by ascending mean.
    pub weights: [f64; COMPONENTS],
    pub means: [f64; COMPONENTS],
    pub variances: [f64; COMPONENTS],
    /// Weighted log-likelihood per unit mass.
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Log-likelihood after every EM iteration of the returned restart.
    pub trace: Vec<f64>,
    pub restart_seed: u64,
}

impl GmmFit {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,weight,mean,variance\n");
        for j in 0..COMPONENTS {
            writeln!(s, "{j},{},{},{}", self.weights[j], self.means[j], self.variances[j])
                .expect("string write");
        }
        s
    }

    pub fn density(&self, x: f64) -> f64 {
        (0..COMPONENTS)
            .map(|j| self.weights[j] * normal_pdf(x, self.means[j], self.variances[j]))
            .sum()
    }
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

struct Params {
    pi: [f64; COMPONENTS],
    mu: [f64; COMPONENTS],
    var: [f64; COMPONENTS],
}

/// Responsibilities and log-likelihood for the current parameters.
fn e_step(x: &[f64], w: &[f64], p: &Params, resp: &mut [[f64; COMPONENTS]]) -> f64 {
    let mut ll = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let mut lp = [0.0; COMPONENTS];
        for j in 0..COMPONENTS {
            lp[j] = p.pi[j].ln() + log_normal(xi, p.mu[j], p.var[j]);
        }
        let mx = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = lp.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + s.ln();
        for j in 0..COMPONENTS {
            resp[i][j] = (lp[j] - lse).exp();
        }
        ll += w[i] * lse;
    }
    ll
}

fn m_step(x: &[f64], w: &[f64], resp: &[[f64; COMPONENTS]]) -> Params {
    let mut p = Params {
        pi: [0.0; COMPONENTS],
        mu: [0.0; COMPONENTS],
        var: [0.0; COMPONENTS],
    };
    for j in 0..COMPONENTS {
        let nj: f64 = (0..x.len()).map(|i| w[i] * resp[i][j]).sum();
        let nj_safe = nj.max(f64::MIN_POSITIVE);
        let mu = (0..x.len()).map(|i| w[i] * resp[i][j] * x[i]).sum::<f64>() / nj_safe;
        let var = (0..x.len())
            .map(|i| w[i] * resp[i][j] * (x[i] - mu).powi(2))
            .sum::<f64>()
            / nj_safe;
        p.pi[j] = nj.max(1e-300);
        p.mu[j] = mu;
        p.var[j] = var.max(VARIANCE_FLOOR);
    }
    let total: f64 = p.pi.iter().sum();
    for v in p.pi.iter_mut() {
        *v /= total;
    }
    p
}

fn fit_once(x: &[f64], w: &[f64], seed: u64, max_iters: usize, tol: f64) -> GmmFit {
    let mut r = rng::stream(seed, "gmm/init");
    // Means: three distinct support points drawn in proportion to weight.
    let mut mu = [0.0; COMPONENTS];
    let mut taken: Vec<usize> = Vec::new();
    for slot in mu.iter_mut() {
        let avail: f64 = (0..x.len())
            .filter(|i| !taken.iter().any(|&t| x[t] == x[*i]))
            .map(|i| w[i])
            .sum();
        let mut u = r.gen::<f64>() * avail;
        let mut pick = None;
        for i in 0..x.len() {
            if taken.iter().any(|&t| x[t] == x[i]) || w[i] <= 0.0 {
                continue;
            }
            pick = Some(i);
            u -= w[i];
            if u <= 0.0 {
                break;
            }
        }
        let i = pick.expect("enough distinct support points");
        taken.push(i);
        *slot = x[i];
    }
    let mean: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let var: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum();
    let mut p = Params {
        pi: [1.0 / COMPONENTS as f64; COMPONENTS],
        mu,
        var: [var.max(VARIANCE_FLOOR); COMPONENTS],
    };
    let mut resp = vec![[0.0; COMPONENTS]; x.len()];
    let mut ll = e_step(x, w, &p, &mut resp);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < max_iters {
        p = m_step(x, w, &resp);
        let next = e_step(x, w, &p, &mut resp);
        iterations += 1;
        trace.push(next);
        let done = (next - ll).abs() < tol;
        ll = next;
        if done {
            break;
        }
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| p.mu[a].total_cmp(&p.mu[b]));
    GmmFit {
        weights: order.map(|j| p.pi[j]),
        means: order.map(|j| p.mu[j]),
        variances: order.map(|j| p.var[j]),
        log_likelihood: ll,
        iterations,
        trace,
        restart_seed: seed,
    }
}

/// Weighted EM from `RESTARTS` seeded starts; the highest final
/// log-likelihood wins, ties going to the lowest seed.
pub fn fit_em(dist: &LayerDistribution, seed: u64, max_iters: usize, tol: f64) -> Result<GmmFit> {
    if dist.distinct_support() < COMPONENTS {
        return Err(Error::Fit(format!(
            "need at least {COMPONENTS} distinct positions with positive weight, found {}",
            dist.distinct_support()
        )));
    }
    let w = dist.normalized();
    let mut best: Option<GmmFit> = None;
    for s in 0..RESTARTS {
        let fit = fit_once(&dist.positions, &w, seed.wrapping_add(s), max_iters, tol);
        if !fit.log_likelihood.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::Fit("every restart diverged".into()))
}

/// Component-wise differences `b − a` after sorting by mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mean_deltas: [f64; COMPONENTS],
    pub weight_deltas: [f64; COMPONENTS],
    pub entropy_a: f64,
    pub entropy_b: f64,
    pub entropy_delta: f64,
}

pub fn compare(
    fit_a: &GmmFit,
    fit_b: &GmmFit,
    dist_a: &LayerDistribution,
    dist_b: &LayerDistribution,
) -> AlignmentReport {
    let mut mean_deltas = [0.0; COMPONENTS];
    let mut weight_deltas = [0.0; COMPONENTS];
    for j in 0..COMPONENTS {
        mean_deltas[j] = fit_b.means[j] - fit_a.means[j];
        weight_deltas[j] = fit_b.weights[j] - fit_a.weights[j];
    }
    let (entropy_a, entropy_b) = (entropy(dist_a), entropy(dist_b));
    AlignmentReport {
        mean_deltas,
        weight_deltas,
        entropy_a,
        entropy_b,
        entropy_delta: entropy_b - entropy_a,
    }
}

impl AlignmentReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,component,value\n");
        for j in 0..COMPONENTS {
            writeln!(s, "mean_delta,{j},{}", self.mean_deltas[j]).expect("string write");
        }
        for j in 0..COMPONENTS {
            writeln!(s, "weight_delta,{j},{}", self.weight_deltas[j]).expect("string write");
        }
        writeln!(s, "entropy_a,,{}", self.entropy_a).expect("string write");
        writeln!(s, "entropy_b,,{}", self.entropy_b).expect("string write");
        writeln!(s, "entropy_delta,,{}", self.entropy_delta).expect("string write");
        s
    }

    pub fn to_text(&self) -> String {
        let f = |v: &[f64; COMPONENTS]| {
            v.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(", ")
        };
        format!(
            "mean deltas (b - a):   {}\nweight deltas (b - a): {}\nentropy: a = {:.4}, b = {:.4}, delta = {:+.4} (nats)\n",
            f(&self.mean_deltas),
            f(&self.weight_deltas),
            self.entropy_a,
            self.entropy_b,
            self.entropy_delta
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_is_fit_error() {
        let d = LayerDistribution::new(vec![3.0, 3.0, 3.0], vec![1.0, 2.0, 1.0]).unwrap();
        assert!(matches!(fit_em(&d, 0, 100, 1e-9), Err(Error::Fit(_))));
    }

    #[test]
    fn entropy_of_point_mass_is_zero() {
        let d = LayerDistribution::new(vec![1.0, 2.0], vec![0.0, 5.0]).unwrap();
        assert_eq!(entropy(&d), 0.0);
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let d = LayerDistribution::new((1..=10).map(f64::from).collect(), vec![1.0, 3.0, 1.0, 0.5, 2.0, 4.0, 2.0, 0.5, 1.0, 3.0])
            .unwrap();
        let f = fit_em(&d, 0, 200, 1e-10).unwrap();
        let r = compare(&f, &f, &d, &d);
        assert_eq!(r.mean_deltas, [0.0; 3]);
        assert_eq!(r.weight_deltas, [0.0; 3]);
        assert_eq!(r.entropy_delta, 0.0);
    }

    #[test]
    fn min_subtracted_scores_zero_the_minimum() {
        let d = LayerDistribution::from_scores(vec![1.0, 2.0, 3.0], &[45.0, 47.0, 49.0], true).unwrap();
        assert_eq!(d.weights, vec![0.0, 2.0, 4.0]);
    }
}
