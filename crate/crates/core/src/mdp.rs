//! Finite MDPs, the state-action chains that policies induce on them, and
//! mixing diagnostics for those chains.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::{self, tv_distance, vec_mat};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// TV values at or below this level are treated as numerically zero.
pub const TV_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `P[s][a][s']`.
    pub transition: Vec<f64>,
    pub initial_dist: Vec<f64>,
    /// Ground-truth reward `r*[s][a]`, row-major; only used for evaluation.
    pub eval_reward: Option<Vec<f64>>,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
        eval_reward: Option<Vec<f64>>,
    ) -> Result<Self> {
        let mdp = TabularMDP {
            n_states,
            n_actions,
            transition,
            initial_dist,
            eval_reward,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp {
                reason: "n_states and n_actions must be positive",
                index: None,
            });
        }
        if self.transition.len() != ns * na * ns {
            return Err(Error::DimensionMismatch {
                what: "transition",
                expected: ns * na * ns,
                found: self.transition.len(),
            });
        }
        for row in 0..ns * na {
            let r = &self.transition[row * ns..(row + 1) * ns];
            if r.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidMdp {
                    reason: "negative or non-finite transition probability",
                    index: Some(row),
                });
            }
            if libm::fabs(r.iter().sum::<f64>() - 1.0) > ROW_TOL {
                return Err(Error::InvalidMdp {
                    reason: "transition row does not sum to 1",
                    index: Some(row),
                });
            }
        }
        if self.initial_dist.len() != ns {
            return Err(Error::DimensionMismatch {
                what: "initial_dist",
                expected: ns,
                found: self.initial_dist.len(),
            });
        }
        if self.initial_dist.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
            || libm::fabs(self.initial_dist.iter().sum::<f64>() - 1.0) > ROW_TOL
        {
            return Err(Error::InvalidMdp {
                reason: "initial_dist is not a distribution",
                index: None,
            });
        }
        if let Some(r) = &self.eval_reward {
            if r.len() != ns * na {
                return Err(Error::DimensionMismatch {
                    what: "eval_reward",
                    expected: ns * na,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMdp {
                    reason: "non-finite eval_reward",
                    index: None,
                });
            }
        }
        Ok(())
    }

    /// Random MDP with Dirichlet(1) transition rows and a uniform start.
    /// All transition probabilities are positive, so every policy induces an
    /// ergodic chain.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Mdp, 0);
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let mut row: Vec<f64> = (0..n_states)
                .map(|_| -libm::log(1.0 - rng.random::<f64>()) + 1e-3)
                .collect();
            let z: f64 = row.iter().sum();
            linalg::scale(1.0 / z, &mut row);
            transition.extend(row);
        }
        TabularMDP {
            n_states,
            n_actions,
            transition,
            initial_dist: vec![1.0 / n_states as f64; n_states],
            eval_reward: None,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// `P(. | s, a)`
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.n_states;
        let i = self.pair(s, a);
        &self.transition[i * ns..(i + 1) * ns]
    }
}

/// A stochastic policy as an explicit `n_states x n_actions` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
    /// Identifies the parameters the table was built from.
    pub fingerprint: u64,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                what: "policy table",
                expected: n_states * n_actions,
                found: probs.len(),
            });
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !(*p >= 0.0)) || libm::fabs(row.iter().sum::<f64>() - 1.0) > ROW_TOL {
                return Err(Error::InvalidArgument("policy row is not a distribution"));
            }
        }
        let fingerprint = linalg::fingerprint(&[n_states as u64, n_actions as u64], &probs);
        Ok(PolicyTable {
            n_states,
            n_actions,
            probs,
            fingerprint,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyTable::new(n_states, n_actions, vec![1.0 / n_actions as f64; n_states * n_actions])
            .expect("uniform rows are valid")
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    len: n_actions,
                });
            }
            probs[s * n_actions + a] = 1.0;
        }
        PolicyTable::new(actions.len(), n_actions, probs)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

/// Envelope `d_t <= chi * upsilon^t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingFit {
    pub chi: f64,
    pub upsilon: f64,
    /// Set when the chain mixes in a single step and the pair is a
    /// convention rather than a fit.
    pub exact: bool,
}

impl MixingFit {
    pub fn bound(&self, t: usize) -> f64 {
        self.chi * libm::pow(self.upsilon, t as f64)
    }

    /// `chi / (1 - upsilon)`, the sum of the envelope over `t >= 0`.
    pub fn series_factor(&self) -> f64 {
        self.chi / (1.0 - self.upsilon)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChainOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub disagreement: f64,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            max_iters: 100_000,
            tol: 1e-12,
            disagreement: 1e-8,
        }
    }
}

/// Markov chain on state-action pairs, index `s * n_actions + a`.
#[derive(Debug, Clone)]
pub struct PolicyChain {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `n_pairs x n_pairs`.
    pub kernel: Vec<f64>,
    pub stationary: Vec<f64>,
    pub policy_fingerprint: u64,
    pub mixing_fit: Option<MixingFit>,
}

/// `P_pi((s,a) -> (s',a')) = pi(a'|s') P(s'|s,a)`.
pub fn induced_kernel(mdp: &TabularMDP, pi: &PolicyTable) -> Result<Vec<f64>> {
    if pi.n_states != mdp.n_states || pi.n_actions != mdp.n_actions {
        return Err(Error::DimensionMismatch {
            what: "policy",
            expected: mdp.n_pairs(),
            found: pi.n_states * pi.n_actions,
        });
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut kernel = vec![0.0; n * n];
    for x in 0..n {
        let p = &mdp.transition[x * ns..(x + 1) * ns];
        let out = &mut kernel[x * n..(x + 1) * n];
        for (s2, &ps) in p.iter().enumerate() {
            for a2 in 0..na {
                out[s2 * na + a2] = ps * pi.probs[s2 * na + a2];
            }
        }
    }
    Ok(kernel)
}

pub fn induced_chain(mdp: &TabularMDP, pi: &PolicyTable) -> Result<PolicyChain> {
    induced_chain_with(mdp, pi, ChainOptions::default())
}

pub fn induced_chain_with(mdp: &TabularMDP, pi: &PolicyTable, opts: ChainOptions) -> Result<PolicyChain> {
    let kernel = induced_kernel(mdp, pi)?;
    PolicyChain::from_kernel(kernel, mdp.n_states, mdp.n_actions, pi.fingerprint, opts)
}

fn power_iterate(kernel: &[f64], n: usize, mut v: Vec<f64>, opts: &ChainOptions) -> Option<Vec<f64>> {
    for _ in 0..opts.max_iters {
        let next = vec_mat(&v, kernel, n);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| libm::fabs(a - b)).sum();
        v = next;
        if diff <= opts.tol {
            return Some(v);
        }
    }
    None
}

impl PolicyChain {
    pub fn from_kernel(
        kernel: Vec<f64>,
        n_states: usize,
        n_actions: usize,
        policy_fingerprint: u64,
        opts: ChainOptions,
    ) -> Result<Self> {
        let n = n_states * n_actions;
        if kernel.len() != n * n {
            return Err(Error::DimensionMismatch {
                what: "kernel",
                expected: n * n,
                found: kernel.len(),
            });
        }
        let uniform = vec![1.0 / n as f64; n];
        let mut point = vec![0.0; n];
        point[n - 1] = 1.0;
        let a = power_iterate(&kernel, n, uniform, &opts)
            .ok_or(Error::NonErgodicChain("power iteration did not converge"))?;
        let b = power_iterate(&kernel, n, point, &opts)
            .ok_or(Error::NonErgodicChain("power iteration did not converge"))?;
        if linalg::max_abs(&linalg::sub(&a, &b)) > opts.disagreement {
            return Err(Error::NonErgodicChain(
                "starting distributions reach different fixed points",
            ));
        }
        let stationary = polish(&kernel, n, a);
        Ok(PolicyChain {
            n_states,
            n_actions,
            kernel,
            stationary,
            policy_fingerprint,
            mixing_fit: None,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// `max |rho^T K - rho^T|`
    pub fn fixed_point_residual(&self) -> f64 {
        let n = self.n_pairs();
        linalg::max_abs(&linalg::sub(
            &vec_mat(&self.stationary, &self.kernel, n),
            &self.stationary,
        ))
    }

    /// Returns a copy carrying the worst-case mixing envelope over starting
    /// pairs.
    pub fn with_mixing_fit(mut self, horizon: usize) -> Self {
        self.mixing_fit = Some(worst_case_mixing(&self, horizon));
        self
    }

    /// Stationary mass on states (marginal over actions).
    pub fn state_marginal(&self) -> Vec<f64> {
        let na = self.n_actions;
        (0..self.n_states)
            .map(|s| self.stationary[s * na..(s + 1) * na].iter().sum())
            .collect()
    }
}

// Refines the power-iteration vector with a direct solve; keeps the iterate
// when the solve is unavailable or worse.
fn polish(kernel: &[f64], n: usize, v: Vec<f64>) -> Vec<f64> {
    let resid = |x: &[f64]| linalg::max_abs(&linalg::sub(&vec_mat(x, kernel, n), x));
    let mut best = normalise(v);
    if let Some(d) = linalg::stationary_direct(kernel, n) {
        if d.iter().all(|x| *x > -1e-10) {
            let d = normalise(d);
            if resid(&d) <= resid(&best) {
                best = d;
            }
        }
    }
    best
}

fn normalise(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let z: f64 = v.iter().sum();
    linalg::scale(1.0 / z, &mut v);
    v
}

/// Initial state-action distribution `p0(s) pi(a|s)`.
pub fn initial_pair_dist(mdp: &TabularMDP, pi: &PolicyTable) -> Vec<f64> {
    let na = mdp.n_actions;
    let mut out = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states {
        for a in 0..na {
            out[s * na + a] = mdp.initial_dist[s] * pi.prob(s, a);
        }
    }
    out
}

/// `d_t = TV(rho0 K^t, rho)` for `t = 1..=horizon`, with values at or below
/// [`TV_FLOOR`] flushed to zero.
pub fn tv_curve(chain: &PolicyChain, rho0: &[f64], horizon: usize) -> Vec<f64> {
    let n = chain.n_pairs();
    let mut v = rho0.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        v = vec_mat(&v, &chain.kernel, n);
        out.push(flush(tv_distance(&v, &chain.stationary)));
    }
    out
}

fn flush(d: f64) -> f64 {
    if d <= TV_FLOOR {
        0.0
    } else {
        d
    }
}

// Least-squares fit of log d_t on t for the positive entries of `curve`
// (curve[i] measured at t = t0 + i), then chi is raised until the envelope
// covers every point. Needs at least one positive entry.
fn envelope_fit(curve: &[f64], t0: usize) -> MixingFit {
    let mut pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, d)| ((t0 + i) as f64, libm::log(*d)))
        .collect();
    if pts.len() == 1 {
        // decays below the floor right after the only measured point
        let t = pts[0].0;
        pts.push((t + 1.0, libm::log(TV_FLOOR)));
    }
    let m = pts.len() as f64;
    let tbar = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tbar) * (p.0 - tbar)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tbar) * (p.1 - ybar)).sum();
    let slope = sxy / sxx;
    let upsilon = libm::exp(slope).clamp(f64::EPSILON, 1.0 - 1e-12);
    let log_u = libm::log(upsilon);
    let mut log_chi = ybar - slope * tbar;
    for (i, d) in curve.iter().enumerate() {
        if *d > 0.0 {
            let need = libm::log(*d) - (t0 + i) as f64 * log_u;
            if need > log_chi {
                log_chi = need;
            }
        }
    }
    MixingFit {
        chi: libm::exp(log_chi),
        upsilon,
        exact: false,
    }
}

/// Fits `TV(rho0 K^t, rho) <= chi upsilon^t` over `t = 1..=horizon`.
pub fn fit_mixing(chain: &PolicyChain, rho0: &[f64], horizon: usize) -> Result<MixingFit> {
    if horizon < 10 {
        return Err(Error::InvalidArgument("horizon must be at least 10"));
    }
    if rho0.len() != chain.n_pairs() {
        return Err(Error::DimensionMismatch {
            what: "rho0",
            expected: chain.n_pairs(),
            found: rho0.len(),
        });
    }
    let curve = tv_curve(chain, rho0, horizon);
    if curve[0] == 0.0 {
        return Err(Error::DegenerateDecay(MixingFit {
            chi: 1.0,
            upsilon: f64::EPSILON,
            exact: true,
        }));
    }
    Ok(envelope_fit(&curve, 1))
}

/// `max_x TV(K^t(x, .), rho)` for `t = 0..=horizon`, flushed like
/// [`tv_curve`].
pub fn worst_case_curve(chain: &PolicyChain, horizon: usize) -> Vec<f64> {
    let n = chain.n_pairs();
    let mut power = vec![0.0; n * n];
    for i in 0..n {
        power[i * n + i] = 1.0;
    }
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        if t > 0 {
            power = linalg::mat_mul(&power, &chain.kernel, n);
        }
        let worst = (0..n)
            .map(|x| tv_distance(&power[x * n..(x + 1) * n], &chain.stationary))
            .fold(0.0, f64::max);
        out.push(flush(worst));
    }
    out
}

/// Envelope valid uniformly over starting pairs, including `t = 0`.
pub fn worst_case_mixing(chain: &PolicyChain, horizon: usize) -> MixingFit {
    let curve = worst_case_curve(chain, horizon);
    if curve.iter().all(|d| *d == 0.0) {
        // single pair chain
        return MixingFit {
            chi: f64::MIN_POSITIVE,
            upsilon: f64::EPSILON,
            exact: true,
        };
    }
    envelope_fit(&curve, 0)
}

/// Largest eigenvalue modulus of the kernel after removing the unit
/// eigenvalue; the asymptotic per-step contraction rate.
pub fn second_eigenvalue_modulus(chain: &PolicyChain) -> f64 {
    let n = chain.n_pairs();
    if n < 2 {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(n, n, &chain.kernel);
    let eig = m.complex_eigenvalues();
    let mut mods: Vec<(f64, f64)> = eig
        .iter()
        .map(|z| (libm::fabs(z.re - 1.0) + libm::fabs(z.im), libm::hypot(z.re, z.im)))
        .collect();
    mods.sort_by(|a, b| a.0.total_cmp(&b.0));
    mods[1..].iter().map(|p| p.1).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaCurve {
    /// `beta_hat(k)` for `k = 1..=kmax`.
    pub values: Vec<f64>,
    pub beta0: f64,
    pub beta1: f64,
}

impl BetaCurve {
    pub fn bound(&self, k: usize) -> f64 {
        self.beta0 * libm::exp(-self.beta1 * k as f64)
    }
}

/// Upper bounds on the beta-mixing coefficients of the stationary chain,
/// `beta_hat(k) = max_x TV(K^k(x, .), rho)`, with an exponential envelope
/// `beta0 exp(-beta1 k)`.
pub fn beta_mixing_curve(chain: &PolicyChain, kmax: usize) -> BetaCurve {
    let curve = worst_case_curve(chain, kmax);
    let values = curve[1..].to_vec();
    if values.iter().all(|d| *d == 0.0) {
        return BetaCurve {
            values,
            beta0: 1.0,
            beta1: -libm::log(f64::EPSILON),
        };
    }
    let fit = envelope_fit(&values, 1);
    BetaCurve {
        values,
        beta0: fit.chi,
        beta1: -libm::log(fit.upsilon),
    }
}

/// Long-run average of `reward[s][a]` under `pi`.
pub fn average_reward(mdp: &TabularMDP, pi: &PolicyTable, reward: &[f64]) -> Result<f64> {
    let chain = induced_chain(mdp, pi)?;
    Ok(linalg::dot(&chain.stationary, reward))
}

/// Average-reward policy iteration. Returns a gain-optimal deterministic
/// policy and its gain. Assumes every deterministic policy is unichain.
pub fn policy_iteration(mdp: &TabularMDP, reward: &[f64]) -> Result<(Vec<usize>, f64)> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if reward.len() != ns * na {
        return Err(Error::DimensionMismatch {
            what: "reward",
            expected: ns * na,
            found: reward.len(),
        });
    }
    let mut actions: Vec<usize> = (0..ns)
        .map(|s| {
            (0..na)
                .max_by(|&a, &b| reward[s * na + a].total_cmp(&reward[s * na + b]).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect();
    for _ in 0..10_000 {
        let (gain, h) = evaluate_deterministic(mdp, reward, &actions)?;
        let mut changed = false;
        for s in 0..ns {
            let value = |a: usize| reward[s * na + a] + linalg::dot(mdp.row(s, a), &h);
            let current = value(actions[s]);
            let mut best = actions[s];
            let mut best_v = current;
            for a in 0..na {
                let v = value(a);
                if v > best_v + 1e-10 * (1.0 + libm::fabs(best_v)) {
                    best = a;
                    best_v = v;
                }
            }
            if best != actions[s] {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((actions, gain));
        }
    }
    Err(Error::InvalidArgument("policy iteration did not terminate"))
}

// Gain and bias (h[0] = 0) of a deterministic policy.
fn evaluate_deterministic(mdp: &TabularMDP, reward: &[f64], actions: &[usize]) -> Result<(f64, Vec<f64>)> {
    let ns = mdp.n_states;
    let na = mdp.n_actions;
    let mut a = DMatrix::<f64>::zeros(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        let row = mdp.row(s, actions[s]);
        a[(s, 0)] = 1.0;
        for s2 in 1..ns {
            a[(s, s2)] = if s == s2 { 1.0 } else { 0.0 } - row[s2];
        }
        b[s] = reward[s * na + actions[s]];
    }
    let z = a
        .lu()
        .solve(&b)
        .ok_or(Error::InvalidArgument("deterministic policy is multichain"))?;
    let mut h = vec![0.0; ns];
    for s in 1..ns {
        h[s] = z[s];
    }
    Ok((z[0], h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_state(p: f64, q: f64, n_actions: usize) -> TabularMDP {
        let mut t = Vec::new();
        for s in 0..2 {
            for _ in 0..n_actions {
                if s == 0 {
                    t.extend([1.0 - p, p]);
                } else {
                    t.extend([q, 1.0 - q]);
                }
            }
        }
        TabularMDP::new(2, n_actions, t, vec![1.0, 0.0], None).unwrap()
    }

    fn chain_from(k: Vec<f64>, n: usize) -> PolicyChain {
        PolicyChain::from_kernel(k, n, 1, 0, ChainOptions::default()).unwrap()
    }

    #[test]
    fn single_pair_stationary() {
        let mdp = TabularMDP::new(1, 1, vec![1.0], vec![1.0], None).unwrap();
        let c = induced_chain(&mdp, &PolicyTable::uniform(1, 1)).unwrap();
        assert_eq!(c.stationary, vec![1.0]);
    }

    #[test]
    fn symmetric_two_state_is_uniform() {
        let mdp = two_state(0.5, 0.5, 3);
        let c = induced_chain(&mdp, &PolicyTable::uniform(2, 3)).unwrap();
        for x in &c.stationary {
            assert!((x - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_matches_svd_null_vector() {
        let mdp = TabularMDP::random(5, 3, 11);
        let mut rng = rng::stream(3, Purpose::Test, 0);
        let probs: Vec<f64> = (0..5)
            .flat_map(|_| {
                let r: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.05).collect();
                let z: f64 = r.iter().sum();
                r.into_iter().map(move |x| x / z)
            })
            .collect();
        let pi = PolicyTable::new(5, 3, probs).unwrap();
        let c = induced_chain(&mdp, &pi).unwrap();
        // left null vector of (K - I): right singular vector of (K - I)^T
        let n = 15;
        let m = DMatrix::from_fn(n, n, |i, j| c.kernel[j * n + i] - if i == j { 1.0 } else { 0.0 });
        let svd = m.svd(false, true);
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
        let vt = svd.v_t.unwrap();
        let mut v: Vec<f64> = (0..n).map(|j| vt[(imin, j)]).collect();
        let z: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= z);
        assert!(linalg::max_abs(&linalg::sub(&v, &c.stationary)) <= 1e-8);
        assert!(c.fixed_point_residual() <= 1e-10);
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let k = vec![0.0, 1.0, 1.0, 0.0];
        let r = PolicyChain::from_kernel(k, 2, 1, 0, ChainOptions::default());
        assert!(matches!(r, Err(Error::NonErgodicChain(_))));
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let k = vec![1.0, 0.0, 0.0, 1.0];
        let r = PolicyChain::from_kernel(k, 2, 1, 0, ChainOptions::default());
        assert!(matches!(r, Err(Error::NonErgodicChain(_))));
    }

    #[test]
    fn iid_chain_degenerate_decay() {
        let k = vec![0.3, 0.7, 0.3, 0.7];
        let c = chain_from(k, 2);
        match fit_mixing(&c, &[1.0, 0.0], 20) {
            Err(Error::DegenerateDecay(fit)) => {
                assert!(fit.exact);
                assert_eq!(fit.chi, 1.0);
                assert_eq!(fit.upsilon, f64::EPSILON);
            }
            other => panic!("expected degenerate decay, got {other:?}"),
        }
        let beta = beta_mixing_curve(&c, 10);
        assert!(beta.values.iter().all(|v| *v == 0.0));
    }

    // Two-state chain [[1-p, p], [q, 1-q]] has second eigenvalue 1 - p - q and
    // TV(e_0 K^t, rho) = p/(p+q) * |1-p-q|^t.
    fn lazy(p: f64, q: f64) -> PolicyChain {
        chain_from(vec![1.0 - p, p, q, 1.0 - q], 2)
    }

    #[test]
    fn lazy_chain_rate_matches_spectrum() {
        let c = lazy(0.25, 0.15);
        let fit = fit_mixing(&c, &[1.0, 0.0], 60).unwrap();
        assert!((fit.upsilon - 0.6).abs() <= 0.05, "{fit:?}");
        let curve = tv_curve(&c, &[1.0, 0.0], 60);
        for (i, d) in curve.iter().enumerate() {
            assert!(*d <= 1.05 * fit.bound(i + 1));
        }
    }

    #[test]
    fn beta_curve_tracks_spectrum() {
        let c = lazy(0.25, 0.15);
        let b = beta_mixing_curve(&c, 40);
        // worst start is the lighter state: rho = (0.375, 0.625)
        for (i, v) in b.values.iter().enumerate() {
            let k = (i + 1) as f64;
            let spectral = libm::pow(0.6, k);
            if *v > 0.0 {
                assert!(*v <= 2.0 * spectral && *v >= 0.5 * spectral, "k={k} {v} {spectral}");
            }
            assert!(*v <= b.bound(i + 1) * (1.0 + 1e-12));
        }
    }

    fn birth_death(n: usize, up: f64, down: f64) -> PolicyChain {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            let u = if i + 1 < n { up } else { 0.0 };
            let d = if i > 0 { down } else { 0.0 };
            if i + 1 < n {
                k[i * n + i + 1] = u;
            }
            if i > 0 {
                k[i * n + i - 1] = d;
            }
            k[i * n + i] = 1.0 - u - d;
        }
        chain_from(k, n)
    }

    #[test]
    fn beta_monotone_on_birth_death() {
        for (n, up, down) in [(4, 0.3, 0.2), (6, 0.45, 0.45), (8, 0.1, 0.4)] {
            let b = beta_mixing_curve(&birth_death(n, up, down), 80);
            for w in b.values.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn envelope_on_seeded_chain() {
        let mdp = TabularMDP::random(5, 3, 5);
        let pi = PolicyTable::uniform(5, 3);
        let c = induced_chain(&mdp, &pi).unwrap();
        let rho0 = initial_pair_dist(&mdp, &pi);
        let fit = fit_mixing(&c, &rho0, 50).unwrap();
        // recompute the TV curve from scratch with dense powers
        let n = 15;
        let mut p = c.kernel.clone();
        for t in 1..=50 {
            let v = vec_mat(&rho0, &p, n);
            let d = tv_distance(&v, &c.stationary);
            assert!(d <= TV_FLOOR || d <= 1.05 * fit.bound(t), "t={t}");
            p = linalg::mat_mul(&p, &c.kernel, n);
        }
    }

    #[test]
    fn worst_case_covers_t0() {
        let c = lazy(0.25, 0.15);
        let fit = worst_case_mixing(&c, 60);
        let curve = worst_case_curve(&c, 60);
        for (t, d) in curve.iter().enumerate() {
            assert!(*d <= fit.bound(t) * (1.0 + 1e-12));
        }
        assert!(fit.chi >= 0.625);
    }

    #[test]
    fn invalid_rows_reported() {
        let t = vec![0.5, 0.5, 0.9, 0.2];
        match TabularMDP::new(2, 1, t, vec![0.5, 0.5], None) {
            Err(Error::InvalidMdp { index: Some(1), .. }) => {}
            other => panic!("{other:?}"),
        }
        let t = vec![0.5, 0.5, -0.1, 1.1];
        assert!(matches!(
            TabularMDP::new(2, 1, t, vec![0.5, 0.5], None),
            Err(Error::InvalidMdp { index: Some(1), .. })
        ));
    }

    #[test]
    fn policy_iteration_beats_all_deterministic() {
        let mut mdp = TabularMDP::random(4, 2, 9);
        let mut rng = rng::stream(9, Purpose::Test, 1);
        let r: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        mdp.eval_reward = Some(r.clone());
        let (best, gain) = policy_iteration(&mdp, &r).unwrap();
        let pi = PolicyTable::deterministic(2, &best).unwrap();
        assert!((average_reward(&mdp, &pi, &r).unwrap() - gain).abs() < 1e-10);
        for code in 0..16usize {
            let acts: Vec<usize> = (0..4).map(|s| (code >> s) & 1).collect();
            let pi = PolicyTable::deterministic(2, &acts).unwrap();
            assert!(average_reward(&mdp, &pi, &r).unwrap() <= gain + 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kernel_rows_and_fixed_point(seed in 0u64..10_000, ns in 1usize..6, na in 1usize..4) {
            let mdp = TabularMDP::random(ns, na, seed);
            let mut rng = rng::stream(seed, Purpose::Test, 7);
            let probs: Vec<f64> = (0..ns).flat_map(|_| {
                let r: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 1e-3).collect();
                let z: f64 = r.iter().sum();
                r.into_iter().map(move |x| x / z)
            }).collect();
            let pi = PolicyTable::new(ns, na, probs).unwrap();
            let c = induced_chain(&mdp, &pi).unwrap();
            let n = ns * na;
            for x in 0..n {
                let s: f64 = c.kernel[x * n..(x + 1) * n].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            prop_assert!(c.fixed_point_residual() <= 1e-10);
            prop_assert!(c.stationary.iter().all(|x| *x >= 0.0));
            prop_assert!((c.stationary.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn fit_envelope_holds(seed in 0u64..10_000) {
            let mdp = TabularMDP::random(4, 2, seed);
            let pi = PolicyTable::uniform(4, 2);
            let c = induced_chain(&mdp, &pi).unwrap();
            let rho0 = initial_pair_dist(&mdp, &pi);
            let fit = fit_mixing(&c, &rho0, 40).unwrap();
            prop_assert!(fit.chi > 0.0 && fit.upsilon > 0.0 && fit.upsilon < 1.0);
            for (i, d) in tv_curve(&c, &rho0, 40).iter().enumerate() {
                prop_assert!(*d <= 1.05 * fit.bound(i + 1));
            }
        }
    }

    #[test]
    fn second_eigenvalue_of_lazy_chain() {
        // two states, one action; eigenvalues 1 and 1 - p - q
        let (p, q) = (0.25, 0.15);
        let mdp = TabularMDP::new(2, 1, vec![1.0 - p, p, q, 1.0 - q], vec![0.5, 0.5], None).unwrap();
        let chain = induced_chain(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert!((second_eigenvalue_modulus(&chain) - 0.6).abs() < 1e-12);
    }
}
