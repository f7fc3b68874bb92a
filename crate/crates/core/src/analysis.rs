//! Reward-class distances between policies, independent-block partitions of
//! dependent trajectories, Rademacher complexity of the kernel reward ball,
//! covering numbers and the resulting generalization bound.

use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSystem;
use crate::linalg;
use crate::mdp::{self, PolicyChain, PolicyTable, TabularMDP};
use crate::rng::{self, Purpose};
use crate::sampling::{self, TrajectoryBatch};

const SQRT2: f64 = core::f64::consts::SQRT_2;

/// Distance between two policies over the reward ball of radius `kappa`:
/// `kappa |G(a) - G(b)|`.
pub fn exact_r_distance(fs: &FeatureSystem, a: &PolicyChain, b: &PolicyChain, kappa: f64) -> f64 {
    kappa
        * linalg::dist(
            &fs.feature_expectation(&a.stationary),
            &fs.feature_expectation(&b.stationary),
        )
}

/// Same distance with the first policy replaced by the empirical
/// distribution of a demonstration batch.
pub fn empirical_r_distance(
    fs: &FeatureSystem,
    batch: &TrajectoryBatch,
    chain: &PolicyChain,
    kappa: f64,
) -> Result<f64> {
    let emp = sampling::empirical_feature_expectation(batch, fs)?;
    Ok(kappa * linalg::dist(&emp, &fs.feature_expectation(&chain.stationary)))
}

/// `2m` alternating blocks of `b` consecutive steps covering `[0, 2bm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    pub block_size: usize,
    pub m: usize,
    pub t_len: usize,
    pub zeta: f64,
}

impl BlockPartition {
    /// Blocks 1, 3, 5, ... (the first of each pair).
    pub fn odd_blocks(&self) -> Vec<Range<usize>> {
        (0..self.m)
            .map(|i| 2 * i * self.block_size..(2 * i + 1) * self.block_size)
            .collect()
    }

    pub fn even_blocks(&self) -> Vec<Range<usize>> {
        (0..self.m)
            .map(|i| (2 * i + 1) * self.block_size..(2 * i + 2) * self.block_size)
            .collect()
    }

    /// First index of each odd block.
    pub fn odd_heads(&self) -> Vec<usize> {
        (0..self.m).map(|i| 2 * i * self.block_size).collect()
    }
}

/// Block size for horizon `t` under `beta(k) <= beta0 exp(-beta1 k^alpha)`.
pub fn block_size(t: usize, delta: f64, beta0: f64, beta1: f64, alpha: f64) -> usize {
    let l = libm::log(4.0 * beta0 * t as f64 / delta) / beta1;
    if l <= 0.0 {
        1
    } else {
        (libm::ceil(libm::pow(l, 1.0 / alpha)) as usize).max(1)
    }
}

/// Effective dependence length `(log(beta0 t / delta) / beta1)^(1/alpha)`.
pub fn zeta(t: usize, delta: f64, beta0: f64, beta1: f64, alpha: f64) -> f64 {
    let l = libm::log(beta0 * t as f64 / delta) / beta1;
    if l <= 0.0 {
        0.0
    } else {
        libm::pow(l, 1.0 / alpha)
    }
}

fn check_mixing_args(delta: f64, beta0: f64, beta1: f64, alpha: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("delta must lie in (0, 1)"));
    }
    if !(beta0 > 0.0 && beta1 > 0.0 && alpha > 0.0) {
        return Err(Error::InvalidArgument("mixing constants must be positive"));
    }
    Ok(())
}

pub fn make_blocks(t: usize, delta: f64, beta0: f64, beta1: f64, alpha: f64) -> Result<BlockPartition> {
    check_mixing_args(delta, beta0, beta1, alpha)?;
    let fits = |t: usize| 2 * block_size(t, delta, beta0, beta1, alpha) <= t;
    if !fits(t) {
        // b grows logarithmically, so the admissible set is an up-ray
        let mut hi = t.max(2);
        while !fits(hi) {
            hi = hi
                .checked_mul(2)
                .ok_or(Error::InvalidArgument("mixing too slow for any horizon"))?;
        }
        let mut lo = t;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        return Err(Error::TrajectoryTooShort { min_len: hi });
    }
    let b = block_size(t, delta, beta0, beta1, alpha);
    Ok(BlockPartition {
        block_size: b,
        m: t / (2 * b),
        t_len: t,
        zeta: zeta(t, delta, beta0, beta1, alpha),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RademacherEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Empirical Rademacher complexity of the reward ball of radius `b_theta`
/// on the given pairs: `E_sigma (b_theta / m) |sum_t sigma_t g(x_t)|`.
pub fn kernel_rademacher(
    fs: &FeatureSystem,
    heads: &[(usize, usize)],
    b_theta: f64,
    n_sigma: usize,
    seed: u64,
) -> Result<RademacherEstimate> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("need at least one block head"));
    }
    if n_sigma == 0 {
        return Err(Error::InvalidArgument("n_sigma must be positive"));
    }
    let feats: Vec<&[f64]> = heads
        .iter()
        .map(|&(s, a)| fs.reward_features(s, a))
        .collect::<Result<_>>()?;
    let m = heads.len() as f64;
    let mut r = rng::stream(seed, Purpose::Rademacher, 0);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut acc = alloc::vec![0.0; fs.q];
    for _ in 0..n_sigma {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for f in &feats {
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            linalg::axpy(sign, f, &mut acc);
        }
        let v = b_theta * linalg::norm(&acc) / m;
        sum += v;
        sum_sq += v * v;
    }
    let n = n_sigma as f64;
    let mean = sum / n;
    let var = if n_sigma > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(RademacherEstimate {
        mean,
        std_err: libm::sqrt(var / n),
    })
}

/// Log covering number of the kernel reward class in sup norm.
pub fn covering_bound_kernel(b_theta: f64, rho_g: f64, q: usize, eps: f64) -> f64 {
    q as f64 * libm::log(1.0 + 2.0 * SQRT2 * rho_g * b_theta / eps)
}

/// Log covering number of depth-`depth`, width-`width` network rewards.
pub fn covering_bound_nn(width: usize, depth: usize, eps: f64) -> f64 {
    let d = width as f64;
    let dd = depth as f64;
    d * d * dd * libm::log(1.0 + SQRT2 * dd * libm::sqrt(d) / eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizationBound {
    pub value: f64,
    pub block_size: usize,
    pub zeta: f64,
}

/// Explicit-constant generalization bound for `n` concatenated trajectories
/// of length `t`:
/// `32b/L + 48 B_r sqrt(log N(1/sqrt(L/2b)) / (L/2b)) + 12 B_r sqrt(log(4/delta') / (L/b)) + eps_opt`
/// with `L = n t`, `delta' = delta/2` and `b` from [`make_blocks`].
#[allow(clippy::too_many_arguments)]
pub fn generalization_bound(
    b_r: f64,
    log_covering: impl Fn(f64) -> f64,
    n: usize,
    t: usize,
    delta: f64,
    beta0: f64,
    beta1: f64,
    alpha: f64,
    epsilon_opt: f64,
) -> Result<GeneralizationBound> {
    if !(b_r > 0.0) || n == 0 || t == 0 || !(epsilon_opt >= 0.0) {
        return Err(Error::InvalidArgument("bound inputs must be positive"));
    }
    let len = n.checked_mul(t).ok_or(Error::InvalidArgument("n * T overflows"))?;
    let bp = make_blocks(len, delta, beta0, beta1, alpha)?;
    let l = len as f64;
    let b = bp.block_size as f64;
    let m = l / (2.0 * b);
    let delta_p = delta / 2.0;
    let value = 32.0 * b / l
        + 48.0 * b_r / libm::sqrt(m) * libm::sqrt(log_covering(1.0 / libm::sqrt(m)).max(0.0))
        + 12.0 * b_r * libm::sqrt(libm::log(4.0 / delta_p) / (l / b))
        + epsilon_opt;
    Ok(GeneralizationBound {
        value,
        block_size: bp.block_size,
        zeta: bp.zeta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRow {
    pub nt: usize,
    pub seed: u64,
    pub gap: f64,
    pub empirical_d: f64,
    pub exact_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
    /// `(nT, median gap)` in grid order.
    pub medians: Vec<(usize, f64)>,
    /// Least-squares slope of log median gap against log nT.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapConfig {
    pub kappa: f64,
    /// Trajectory length; a grid point `nT` uses `nT / t_len` trajectories,
    /// or one shorter trajectory when `nT < t_len`.
    pub t_len: usize,
    pub burn_in: usize,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// `|empirical distance - exact distance|` between expert demonstrations of
/// size `nT` and a learned policy, over a grid of sizes and seeds.
pub fn generalization_gap_experiment(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    expert: &PolicyTable,
    learned: &PolicyTable,
    cfg: &GapConfig,
    nt_grid: &[usize],
    seeds: &[u64],
) -> Result<GapTable> {
    if nt_grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("gap experiment needs non-empty grids"));
    }
    if cfg.t_len == 0 || nt_grid.contains(&0) {
        return Err(Error::InvalidArgument("trajectory lengths must be positive"));
    }
    let ce = mdp::induced_chain(mdp, expert)?;
    let cl = mdp::induced_chain(mdp, learned)?;
    let exact = exact_r_distance(fs, &ce, &cl, cfg.kappa);
    let mut rows = Vec::with_capacity(nt_grid.len() * seeds.len());
    let mut medians = Vec::with_capacity(nt_grid.len());
    for &nt in nt_grid {
        let t_len = cfg.t_len.min(nt);
        if nt % t_len != 0 {
            return Err(Error::InvalidArgument("nT must be a multiple of the trajectory length"));
        }
        let n = nt / t_len;
        let mut gaps = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let sub = linalg::fingerprint(&[seed, nt as u64], &[]);
            let batch = sampling::rollout(mdp, expert, n, t_len, sub, cfg.burn_in)?;
            let emp = empirical_r_distance(fs, &batch, &cl, cfg.kappa)?;
            let gap = libm::fabs(emp - exact);
            gaps.push(gap);
            rows.push(GapRow {
                nt,
                seed,
                gap,
                empirical_d: emp,
                exact_d: exact,
            });
        }
        medians.push((nt, median(&mut gaps)));
    }
    let xs: Vec<f64> = medians.iter().map(|&(n, _)| libm::log(n as f64)).collect();
    let ys: Vec<f64> = medians.iter().map(|&(_, g)| libm::log(g)).collect();
    let slope = if medians.len() >= 2 {
        fit_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(GapTable { rows, medians, slope })
}
