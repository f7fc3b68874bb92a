//! Seeded random streams and a few sampling helpers.
//!
//! Every consumer of randomness asks for a ChaCha8 stream identified by a
//! root seed, a purpose tag and an index (trajectory number, iteration,
//! probe number). Streams are independent of evaluation order, so runs are
//! reproducible regardless of how work is split.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Purpose {
    Features = 1,
    Rollout = 2,
    ThetaBatch = 3,
    OmegaBatch = 4,
    ThetaStar = 5,
    Probe = 6,
    Rademacher = 7,
    Init = 8,
    Mdp = 9,
    Sphere = 10,
    Gap = 11,
    Test = 12,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ (index & 0xFFFF_FFFF_FFFF));
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw from the closed unit ball in `dim` dimensions.
pub fn unit_ball(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let n = crate::linalg::norm(&v);
    let r = libm::pow(rng.random::<f64>(), 1.0 / dim as f64);
    let s = if n > 0.0 { r / n } else { 0.0 };
    crate::linalg::scale(s, &mut v);
    v
}

/// Uniform draw from the sphere of radius `radius`.
pub fn sphere(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-300 {
            crate::linalg::scale(radius / n, &mut v);
            return v;
        }
    }
}

/// Categorical sampler over non-negative weights.
#[derive(Debug, Clone)]
pub struct Categorical {
    index: WeightedIndex<f64>,
}

impl Categorical {
    /// `None` when the weights are all zero or contain a negative/NaN entry.
    pub fn new(weights: &[f64]) -> Option<Self> {
        WeightedIndex::new(weights.iter().copied())
            .ok()
            .map(|index| Categorical { index })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.index.sample(rng)
    }
}

/// Exact multinomial counts for `n` draws from `probs`, built from a chain of
/// conditional binomials. Cost is linear in `probs.len()`, not in `n`.
pub fn multinomial(rng: &mut impl Rng, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let mut left = n;
    let mut mass_left: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = left;
            break;
        }
        let cond = if mass_left > 0.0 {
            (p / mass_left).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = if cond >= 1.0 {
            left
        } else if cond <= 0.0 {
            0
        } else {
            rng.sample(Binomial::new(left, cond).expect("probability in [0,1]"))
        };
        counts[i] = c;
        left -= c;
        mass_left -= p;
    }
    counts
}
