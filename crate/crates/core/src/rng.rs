//! Seeded random streams.
//!
//! Every run has one seed; each component draws from its own stream derived
//! from `(run_seed, component name)`, so adding a component never shifts the
//! numbers another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::Array;

pub type Rng = ChaCha8Rng;

pub fn derive_seed(run_seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(run_seed: u64, component: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(run_seed, component))
}

pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Array of i.i.d. `N(0, std²)` entries in the thread's default precision.
pub fn gaussian_array(rng: &mut Rng, shape: &[usize], std: f64) -> Array {
    let n = shape.iter().product();
    Array::from_f64(shape, &gaussian_vec(rng, n, std)).expect("shape matches length")
}
