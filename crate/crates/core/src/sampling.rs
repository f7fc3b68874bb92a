//! Trajectory simulation, demonstration statistics and stochastic gradient
//! estimators.
//!
//! The estimators only depend on how many times each state-action pair
//! appears in a minibatch, so a batch is drawn as a vector of pair counts.
//! In the default mode those counts are an exact multinomial draw from the
//! stationary distribution, which keeps the estimators exactly unbiased and
//! makes very large batches cheap.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::features::FeatureSystem;
use crate::linalg;
use crate::mdp::{PolicyTable, TabularMDP};
use crate::oracles::{KernelReward, PolicyEval};
use crate::policy::SoftmaxPolicy;
use crate::rng::{self, Categorical, Purpose, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryBatch {
    pub n: usize,
    pub t_len: usize,
    /// Row-major `n x t_len`.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub seed: u64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }

    pub fn pair_counts(&self, n_states: usize, n_actions: usize) -> Vec<u64> {
        let mut c = vec![0u64; n_states * n_actions];
        for (s, a) in self.pairs() {
            c[s * n_actions + a] += 1;
        }
        c
    }

    /// First `n` trajectories.
    pub fn take(&self, n: usize) -> TrajectoryBatch {
        let n = n.min(self.n);
        TrajectoryBatch {
            n,
            t_len: self.t_len,
            states: self.states[..n * self.t_len].to_vec(),
            actions: self.actions[..n * self.t_len].to_vec(),
            seed: self.seed,
        }
    }
}

/// Samplers for the MDP dynamics under a fixed policy.
#[derive(Debug, Clone)]
pub struct Simulator {
    n_actions: usize,
    initial: Categorical,
    next_state: Vec<Categorical>,
    action: Vec<Categorical>,
}

impl Simulator {
    pub fn new(mdp: &TabularMDP, pi: &PolicyTable) -> Result<Self> {
        if pi.n_states != mdp.n_states || pi.n_actions != mdp.n_actions {
            return Err(Error::DimensionMismatch {
                what: "policy",
                expected: mdp.n_pairs(),
                found: pi.n_states * pi.n_actions,
            });
        }
        let bad = Error::InvalidArgument("zero-mass distribution");
        let initial = Categorical::new(&mdp.initial_dist).ok_or(bad.clone())?;
        let mut next_state = Vec::with_capacity(mdp.n_pairs());
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                next_state.push(Categorical::new(mdp.row(s, a)).ok_or(bad.clone())?);
            }
        }
        let action = (0..mdp.n_states)
            .map(|s| Categorical::new(pi.row(s)).ok_or(bad.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulator {
            n_actions: mdp.n_actions,
            initial,
            next_state,
            action,
        })
    }

    pub fn start(&self, rng: &mut impl Rng) -> (usize, usize) {
        let s = self.initial.sample(rng);
        (s, self.action[s].sample(rng))
    }

    pub fn step(&self, rng: &mut impl Rng, s: usize, a: usize) -> (usize, usize) {
        let s2 = self.next_state[s * self.n_actions + a].sample(rng);
        (s2, self.action[s2].sample(rng))
    }
}

/// `n` trajectories of `t_len` retained steps each; the first `burn_in`
/// steps of every trajectory are simulated and discarded. Trajectory `i`
/// uses its own random stream, so any subset can be regenerated alone.
pub fn rollout(
    mdp: &TabularMDP,
    pi: &PolicyTable,
    n: usize,
    t_len: usize,
    seed: u64,
    burn_in: usize,
) -> Result<TrajectoryBatch> {
    if n == 0 || t_len == 0 {
        return Err(Error::InvalidArgument("rollout needs n >= 1 and T >= 1"));
    }
    let sim = Simulator::new(mdp, pi)?;
    let mut states = Vec::with_capacity(n * t_len);
    let mut actions = Vec::with_capacity(n * t_len);
    for i in 0..n {
        let mut r = rng::stream(seed, Purpose::Rollout, i as u64);
        let (mut s, mut a) = sim.start(&mut r);
        for _ in 0..burn_in {
            (s, a) = sim.step(&mut r, s, a);
        }
        for t in 0..t_len {
            if t > 0 {
                (s, a) = sim.step(&mut r, s, a);
            }
            states.push(s);
            actions.push(a);
        }
    }
    Ok(TrajectoryBatch {
        n,
        t_len,
        states,
        actions,
        seed,
    })
}

/// Average reward features over every retained pair of the batch.
pub fn empirical_feature_expectation(batch: &TrajectoryBatch, fs: &FeatureSystem) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch"));
    }
    let counts = batch.pair_counts(fs.n_states, fs.n_actions);
    Ok(counts_mean(fs, &counts))
}

fn counts_mean(fs: &FeatureSystem, counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let mut out = vec![0.0; fs.q];
    for (x, &c) in counts.iter().enumerate() {
        if c > 0 {
            linalg::axpy(c as f64 / total as f64, fs.pair(x), &mut out);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Theta,
    Omega,
    ThetaStar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochGrad {
    pub value: Vec<f64>,
    pub batch_size: u64,
    pub kind: EstimatorKind,
}

/// Where minibatch pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSource {
    /// Independent exact draws from the stationary distribution.
    #[default]
    Stationary,
    /// Consecutive pairs of one simulated trajectory after `burn_in` steps
    /// from the initial distribution. Biased by incomplete mixing and
    /// correlated.
    Trajectory { burn_in: usize },
}

/// How the omega estimator obtains Q values for sampled pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QEstimate {
    /// Read from the Poisson solve; unbiased.
    #[default]
    Exact,
    /// Sum of centred rewards along a fresh `horizon`-step rollout from the
    /// sampled pair. Bias is at most `B_Q chi upsilon^horizon`.
    Rollout { horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplerConfig {
    pub source: PairSource,
    pub q_estimate: QEstimate,
}

/// Pair counts for a minibatch of size `batch`.
pub fn draw_counts(
    mdp: &TabularMDP,
    eval: &PolicyEval,
    batch: u64,
    source: PairSource,
    rng: &mut StreamRng,
) -> Result<Vec<u64>> {
    match source {
        PairSource::Stationary => Ok(rng::multinomial(rng, batch, &eval.chain.stationary)),
        PairSource::Trajectory { burn_in } => {
            let sim = Simulator::new(mdp, &eval.table)?;
            let na = mdp.n_actions;
            let mut counts = vec![0u64; mdp.n_pairs()];
            let (mut s, mut a) = sim.start(rng);
            for _ in 0..burn_in {
                (s, a) = sim.step(rng, s, a);
            }
            for t in 0..batch {
                if t > 0 {
                    (s, a) = sim.step(rng, s, a);
                }
                counts[s * na + a] += 1;
            }
            Ok(counts)
        }
    }
}

/// `mean_j g(x_j) - demo - mu theta`
pub fn stoch_grad_theta_eval(
    mdp: &TabularMDP,
    eval: &PolicyEval,
    fs: &FeatureSystem,
    theta: &[f64],
    mu: f64,
    demo_fe: &[f64],
    batch: u64,
    source: PairSource,
    rng: &mut StreamRng,
) -> Result<StochGrad> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive"));
    }
    let counts = draw_counts(mdp, eval, batch, source, rng)?;
    let mean = counts_mean(fs, &counts);
    let value = mean
        .iter()
        .zip(demo_fe)
        .zip(theta)
        .map(|((g, d), t)| g - d - mu * t)
        .collect();
    Ok(StochGrad {
        value,
        batch_size: batch,
        kind: EstimatorKind::Theta,
    })
}

/// `mean_j score(x_j) (Q_theta(x_j) - lambda Q_ent(x_j))`
#[allow(clippy::too_many_arguments)]
pub fn stoch_grad_omega_eval(
    mdp: &TabularMDP,
    eval: &PolicyEval,
    fs: &FeatureSystem,
    theta: &[f64],
    lambda: f64,
    batch: u64,
    cfg: SamplerConfig,
    rng: &mut StreamRng,
) -> Result<StochGrad> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive"));
    }
    let counts = draw_counts(mdp, eval, batch, cfg.source, rng)?;
    let dim = eval.policy.dim();
    let mut value = vec![0.0; dim];
    match cfg.q_estimate {
        QEstimate::Exact => {
            for (x, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let qv = linalg::dot(eval.q_features(x), theta) - lambda * eval.q_ent[x];
                linalg::axpy(c as f64 / batch as f64 * qv, eval.score(x), &mut value);
            }
        }
        QEstimate::Rollout { horizon } => {
            // combined per-pair reward and its stationary mean
            let r: Vec<f64> = (0..fs.n_pairs())
                .map(|x| linalg::dot(fs.pair(x), theta) + lambda * eval.log_pi[x])
                .collect();
            let j = linalg::dot(&eval.chain.stationary, &r);
            let sim = Simulator::new(mdp, &eval.table)?;
            let na = mdp.n_actions;
            for (x, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    let (mut s, mut a) = (x / na, x % na);
                    let mut ret = 0.0;
                    for t in 0..horizon {
                        if t > 0 {
                            (s, a) = sim.step(rng, s, a);
                        }
                        ret += r[s * na + a] - j;
                    }
                    linalg::axpy(ret / batch as f64, eval.score(x), &mut value);
                }
            }
        }
    }
    Ok(StochGrad {
        value,
        batch_size: batch,
        kind: EstimatorKind::Omega,
    })
}

/// `(mean_j g(x_j) - demo) / mu`, unbiased for the inner maximizer.
pub fn theta_star_estimate_eval(
    mdp: &TabularMDP,
    eval: &PolicyEval,
    fs: &FeatureSystem,
    demo_fe: &[f64],
    mu: f64,
    batch: u64,
    source: PairSource,
    rng: &mut StreamRng,
) -> Result<StochGrad> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive"));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument("mu must be positive"));
    }
    let counts = draw_counts(mdp, eval, batch, source, rng)?;
    let mean = counts_mean(fs, &counts);
    Ok(StochGrad {
        value: mean.iter().zip(demo_fe).map(|(g, d)| (g - d) / mu).collect(),
        batch_size: batch,
        kind: EstimatorKind::ThetaStar,
    })
}

pub fn stoch_grad_theta(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    policy: &SoftmaxPolicy,
    reward: &KernelReward,
    mu: f64,
    demo_fe: &[f64],
    q_theta: u64,
    seed: u64,
) -> Result<StochGrad> {
    let eval = PolicyEval::new(mdp, fs, policy)?;
    let mut r = rng::stream(seed, Purpose::ThetaBatch, 0);
    stoch_grad_theta_eval(
        mdp,
        &eval,
        fs,
        &reward.theta,
        mu,
        demo_fe,
        q_theta,
        PairSource::Stationary,
        &mut r,
    )
}

pub fn stoch_grad_omega(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    policy: &SoftmaxPolicy,
    reward: &KernelReward,
    lambda: f64,
    q_omega: u64,
    seed: u64,
) -> Result<StochGrad> {
    let eval = PolicyEval::new(mdp, fs, policy)?;
    let mut r = rng::stream(seed, Purpose::OmegaBatch, 0);
    stoch_grad_omega_eval(
        mdp,
        &eval,
        fs,
        &reward.theta,
        lambda,
        q_omega,
        SamplerConfig::default(),
        &mut r,
    )
}

pub fn theta_star_estimator(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    policy: &SoftmaxPolicy,
    demo_fe: &[f64],
    mu: f64,
    batch: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    let eval = PolicyEval::new(mdp, fs, policy)?;
    let mut r = rng::stream(seed, Purpose::ThetaStar, 0);
    Ok(theta_star_estimate_eval(mdp, &eval, fs, demo_fe, mu, batch, PairSource::Stationary, &mut r)?.value)
}

/// Per-sample noise `E|g(x) - G|^2` of the theta estimator under `rho`.
pub fn theta_noise_moment(eval: &PolicyEval, fs: &FeatureSystem) -> f64 {
    let rho = &eval.chain.stationary;
    (0..fs.n_pairs())
        .map(|x| rho[x] * linalg::dist_sq(fs.pair(x), &eval.fe))
        .sum()
}

/// Covariance of `g(x)` under `rho`, row-major `q x q`.
fn feature_covariance(eval: &PolicyEval, fs: &FeatureSystem) -> Vec<f64> {
    let q = fs.q;
    let rho = &eval.chain.stationary;
    let mut c = vec![0.0; q * q];
    for x in 0..fs.n_pairs() {
        let d = linalg::sub(fs.pair(x), &eval.fe);
        for i in 0..q {
            for j in 0..q {
                c[i * q + j] += rho[x] * d[i] * d[j];
            }
        }
    }
    c
}

// Second-moment pieces of the omega estimator as a quadratic in theta:
// per-sample variance = theta' M theta - 2 lambda theta' m + lambda^2 c.
struct OmegaQuadratic {
    m_mat: Vec<f64>,
    m_vec: Vec<f64>,
    c: f64,
}

fn omega_quadratic(eval: &PolicyEval) -> OmegaQuadratic {
    let q = eval.q;
    let dim = eval.policy.dim();
    let rho = &eval.chain.stationary;
    let mut m_mat = vec![0.0; q * q];
    let mut m_vec = vec![0.0; q];
    let mut c = 0.0;
    for x in 0..eval.n_pairs() {
        let w = rho[x] * linalg::norm_sq(eval.score(x));
        if w == 0.0 {
            continue;
        }
        let qx = eval.q_features(x);
        for i in 0..q {
            for j in 0..q {
                m_mat[i * q + j] += w * qx[i] * qx[j];
            }
            m_vec[i] += w * eval.q_ent[x] * qx[i];
        }
        c += w * eval.q_ent[x] * eval.q_ent[x];
    }
    // subtract the squared mean: D^T D, D^T grad_H, |grad_H|^2
    for k in 0..dim {
        let dk = &eval.grad_feat[k * q..(k + 1) * q];
        let hk = eval.grad_entropy[k];
        for i in 0..q {
            for j in 0..q {
                m_mat[i * q + j] -= dk[i] * dk[j];
            }
            m_vec[i] -= dk[i] * hk;
        }
        c -= hk * hk;
    }
    OmegaQuadratic { m_mat, m_vec, c }
}

/// Per-sample noise `E|v(x, theta) - grad_omega F|^2` of the omega estimator
/// at a given `theta`.
pub fn omega_noise_at(eval: &PolicyEval, theta: &[f64], lambda: f64) -> f64 {
    let oq = omega_quadratic(eval);
    let q = eval.q;
    let quad: f64 = (0..q)
        .map(|i| theta[i] * linalg::dot(&oq.m_mat[i * q..(i + 1) * q], theta))
        .sum();
    quad - 2.0 * lambda * linalg::dot(theta, &oq.m_vec) + lambda * lambda * oq.c
}

/// Upper bound on the per-sample omega noise over the whole `kappa` ball.
pub fn omega_noise_sup(eval: &PolicyEval, kappa: f64, lambda: f64) -> f64 {
    let oq = omega_quadratic(eval);
    let q = eval.q;
    let m = DMatrix::from_row_slice(q, q, &oq.m_mat);
    let sym = (&m + m.transpose()) * 0.5;
    let top = SymmetricEigen::new(sym).eigenvalues.max().max(0.0);
    kappa * kappa * top + 2.0 * libm::fabs(lambda) * kappa * linalg::norm(&oq.m_vec) + lambda * lambda * oq.c.max(0.0)
}

/// Exact `E|omega-estimate(omega, theta_hat)|^2` when `theta_hat` is the
/// inner-maximizer estimate from `b_theta` fresh pairs and the gradient
/// averages `q_omega` independent pairs.
pub fn greedy_second_moment(
    eval: &PolicyEval,
    fs: &FeatureSystem,
    demo_fe: &[f64],
    mu: f64,
    lambda: f64,
    q_omega: u64,
    b_theta: u64,
) -> f64 {
    let q = fs.q;
    let dim = eval.policy.dim();
    let rho = &eval.chain.stationary;
    let t_star = eval.theta_star(mu, demo_fe);
    let mut ce = feature_covariance(eval, fs);
    linalg::scale(1.0 / (mu * mu * b_theta as f64), &mut ce);
    let quad_c = |v: &[f64]| -> f64 { (0..q).map(|i| v[i] * linalg::dot(&ce[i * q..(i + 1) * q], v)).sum() };

    let mean = eval.grad_omega(&t_star, lambda);
    let mean_sq = linalg::norm_sq(&mean);
    // tr(D C D^T)
    let tr_dcd: f64 = (0..dim).map(|k| quad_c(&eval.grad_feat[k * q..(k + 1) * q])).sum();
    let mut per_sample = 0.0;
    for x in 0..eval.n_pairs() {
        if rho[x] == 0.0 {
            continue;
        }
        let s2 = linalg::norm_sq(eval.score(x));
        let qx = eval.q_features(x);
        let v = linalg::dot(qx, &t_star) - lambda * eval.q_ent[x];
        per_sample += rho[x] * s2 * (v * v + quad_c(qx));
    }
    let outer = mean_sq + tr_dcd;
    outer + (per_sample - outer) / q_omega as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_features, FeatureConfig};
    use crate::mdp::induced_chain;

    fn setup() -> (TabularMDP, FeatureSystem, SoftmaxPolicy) {
        let mdp = TabularMDP::random(5, 3, 31);
        let fs = build_features(5, 3, &FeatureConfig::default(), 32).unwrap();
        let mut r = rng::stream(33, Purpose::Test, 0);
        let w: Vec<f64> = (0..15).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
        (mdp, fs, SoftmaxPolicy::new(3, 5, w).unwrap())
    }

    fn theta(fs: &FeatureSystem, seed: u64) -> Vec<f64> {
        rng::unit_ball(&mut rng::stream(seed, Purpose::Test, 9), fs.q)
    }

    #[test]
    fn trivial_mdp_rollout() {
        let mdp = TabularMDP::new(1, 1, vec![1.0], vec![1.0], None).unwrap();
        let b = rollout(&mdp, &PolicyTable::uniform(1, 1), 3, 4, 0, 2).unwrap();
        assert!(b.states.iter().all(|s| *s == 0) && b.actions.iter().all(|a| *a == 0));
    }

    #[test]
    fn rollout_deterministic_and_stationary() {
        let (mdp, fs, p) = setup();
        let t = p.table(&fs).unwrap();
        let a = rollout(&mdp, &t, 100, 10_000, 5, 50).unwrap();
        assert_eq!(a, rollout(&mdp, &t, 100, 10_000, 5, 50).unwrap());
        let c = induced_chain(&mdp, &t).unwrap();
        let counts = a.pair_counts(5, 3);
        let freq: Vec<f64> = counts.iter().map(|c| *c as f64 / a.len() as f64).collect();
        assert!(linalg::tv_distance(&freq, &c.stationary) <= 0.01);
        let efe = empirical_feature_expectation(&a, &fs).unwrap();
        assert!(linalg::dist(&efe, &fs.feature_expectation(&c.stationary)) <= 0.02);
    }

    #[test]
    fn empirical_fe_single_pair_and_concat() {
        let (_, fs, _) = setup();
        let b = TrajectoryBatch {
            n: 1,
            t_len: 4,
            states: vec![2; 4],
            actions: vec![1; 4],
            seed: 0,
        };
        assert_eq!(empirical_feature_expectation(&b, &fs).unwrap(), fs.pair(7).to_vec());
        let b2 = TrajectoryBatch {
            n: 1,
            t_len: 4,
            states: vec![0, 1, 2, 3],
            actions: vec![0, 1, 2, 0],
            seed: 0,
        };
        let cat = TrajectoryBatch {
            n: 2,
            t_len: 4,
            states: [b.states.clone(), b2.states.clone()].concat(),
            actions: [b.actions.clone(), b2.actions.clone()].concat(),
            seed: 0,
        };
        let (e1, e2, e) = (
            empirical_feature_expectation(&b, &fs).unwrap(),
            empirical_feature_expectation(&b2, &fs).unwrap(),
            empirical_feature_expectation(&cat, &fs).unwrap(),
        );
        for j in 0..fs.q {
            assert!((e[j] - 0.5 * (e1[j] + e2[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_theta_omega_estimate_is_zero() {
        let (mdp, fs, p) = setup();
        let g = stoch_grad_omega(&mdp, &fs, &p, &KernelReward::zero(fs.q, 1.0), 0.0, 64, 1).unwrap();
        assert!(g.value.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn point_mass_theta_estimate_is_exact() {
        // single-pair chain: every sample is the same pair
        let mdp = TabularMDP::new(1, 1, vec![1.0], vec![1.0], None).unwrap();
        let fs = build_features(1, 1, &FeatureConfig::default(), 3).unwrap();
        let p = SoftmaxPolicy::zeros(1, fs.d_s);
        let th = KernelReward::new(theta(&fs, 1), 1.0).unwrap();
        let demo = vec![0.1; fs.q];
        let exact = crate::oracles::exact_grad_theta(&mdp, &fs, &p, &th, 0.3, &demo).unwrap();
        for q in [1, 7, 1000] {
            let g = stoch_grad_theta(&mdp, &fs, &p, &th, 0.3, &demo, q, 4).unwrap();
            assert!(linalg::max_abs(&linalg::sub(&g.value, &exact)) < 1e-15);
        }
    }

    // mean of `reps` estimates within z standard errors of `exact`, per coordinate
    fn check_unbiased(samples: &[Vec<f64>], exact: &[f64], z: f64) {
        let n = samples.len() as f64;
        for k in 0..exact.len() {
            let m = samples.iter().map(|s| s[k]).sum::<f64>() / n;
            let v = samples.iter().map(|s| (s[k] - m) * (s[k] - m)).sum::<f64>() / (n - 1.0);
            let se = libm::sqrt(v / n);
            assert!(
                libm::fabs(m - exact[k]) <= z * se + 1e-12,
                "coord {k}: {m} vs {} (se {se})",
                exact[k]
            );
        }
    }

    #[test]
    fn estimators_unbiased_across_probes() {
        let (mdp, fs, _) = setup();
        let demo = vec![0.05; fs.q];
        for probe in 0..20u64 {
            let mut r = rng::stream(probe, Purpose::Test, 2);
            let w: Vec<f64> = (0..15).map(|_| 3.0 * (2.0 * r.random::<f64>() - 1.0)).collect();
            let p = SoftmaxPolicy::new(3, 5, w).unwrap();
            let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
            let th = theta(&fs, probe);
            let mut rt = rng::stream(probe, Purpose::ThetaBatch, 0);
            let mut ro = rng::stream(probe, Purpose::OmegaBatch, 0);
            let mut gt = Vec::new();
            let mut go = Vec::new();
            for _ in 0..2000 {
                gt.push(
                    stoch_grad_theta_eval(&mdp, &e, &fs, &th, 0.3, &demo, 4, PairSource::Stationary, &mut rt)
                        .unwrap()
                        .value,
                );
                go.push(
                    stoch_grad_omega_eval(&mdp, &e, &fs, &th, 0.1, 4, SamplerConfig::default(), &mut ro)
                        .unwrap()
                        .value,
                );
            }
            // 20 probes x ~30 coordinates: family-wise threshold
            check_unbiased(&gt, &e.grad_theta(&th, 0.3, &demo), 4.5);
            check_unbiased(&go, &e.grad_omega(&th, 0.1), 4.5);
        }
    }

    #[test]
    fn exact_noise_moments_match_sampling() {
        let (mdp, fs, p) = setup();
        let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
        let th = theta(&fs, 3);
        let demo = vec![0.0; fs.q];
        let mut r = rng::stream(1, Purpose::Test, 5);
        let n = 40_000;
        let (mut st, mut so) = (0.0, 0.0);
        let gt_exact = e.grad_theta(&th, 0.3, &demo);
        let go_exact = e.grad_omega(&th, 0.2);
        for _ in 0..n {
            let a = stoch_grad_theta_eval(&mdp, &e, &fs, &th, 0.3, &demo, 1, PairSource::Stationary, &mut r).unwrap();
            st += linalg::dist_sq(&a.value, &gt_exact);
            let b = stoch_grad_omega_eval(&mdp, &e, &fs, &th, 0.2, 1, SamplerConfig::default(), &mut r).unwrap();
            so += linalg::dist_sq(&b.value, &go_exact);
        }
        let (mt, mo) = (theta_noise_moment(&e, &fs), omega_noise_at(&e, &th, 0.2));
        assert!(libm::fabs(st / n as f64 - mt) / mt < 0.05, "{} vs {mt}", st / n as f64);
        assert!(libm::fabs(so / n as f64 - mo) / mo < 0.05, "{} vs {mo}", so / n as f64);
        assert!(omega_noise_sup(&e, 1.0, 0.2) >= mo);

        let mut g2 = 0.0;
        for _ in 0..n {
            let ts = theta_star_estimate_eval(&mdp, &e, &fs, &demo, 0.3, 3, PairSource::Stationary, &mut r).unwrap();
            let g = stoch_grad_omega_eval(&mdp, &e, &fs, &ts.value, 0.2, 2, SamplerConfig::default(), &mut r).unwrap();
            g2 += linalg::norm_sq(&g.value);
        }
        let mg = greedy_second_moment(&e, &fs, &demo, 0.3, 0.2, 2, 3);
        assert!(libm::fabs(g2 / n as f64 - mg) / mg < 0.05, "{} vs {mg}", g2 / n as f64);
    }

    #[test]
    fn theta_star_bounded_and_determined() {
        let (mdp, fs, p) = setup();
        let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
        let demo = fs.feature_expectation(&induced_chain(&mdp, &PolicyTable::uniform(5, 3)).unwrap().stationary);
        let ts = e.theta_star(0.3, &demo);
        assert!(linalg::norm(&ts) <= 2.0 * libm::sqrt(2.0) * fs.rho_g / 0.3);
        let a = theta_star_estimator(&mdp, &fs, &p, &demo, 0.3, 100, 8).unwrap();
        assert_eq!(a, theta_star_estimator(&mdp, &fs, &p, &demo, 0.3, 100, 8).unwrap());
    }

    #[test]
    fn rollout_q_estimator_close_to_exact() {
        let (mdp, fs, p) = setup();
        let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
        let th = theta(&fs, 4);
        let mut r = rng::stream(2, Purpose::Test, 3);
        let cfg = SamplerConfig {
            source: PairSource::Stationary,
            q_estimate: QEstimate::Rollout { horizon: 60 },
        };
        // bias at horizon 60 is far below the sampling error here
        let samples: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                stoch_grad_omega_eval(&mdp, &e, &fs, &th, 0.1, 500, cfg, &mut r)
                    .unwrap()
                    .value
            })
            .collect();
        check_unbiased(&samples, &e.grad_omega(&th, 0.1), 4.5);
    }

    #[test]
    fn trajectory_source_counts_total() {
        let (mdp, fs, p) = setup();
        let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
        let mut r = rng::stream(2, Purpose::Test, 4);
        let c = draw_counts(&mdp, &e, 500, PairSource::Trajectory { burn_in: 10 }, &mut r).unwrap();
        assert_eq!(c.iter().sum::<u64>(), 500);
    }
}
