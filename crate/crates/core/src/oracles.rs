//! Exact tabular evaluation: average reward, differential Q-functions,
//! the regularized objective and its gradients.
//!
//! The objective is
//!
//! ```text
//! F(omega, theta) = theta . (G(pi_omega) - demo) - lambda H(pi_omega) - mu/2 |theta|^2
//! ```
//!
//! where `G` is the stationary feature expectation and `demo` the expert's
//! (exact or empirical) feature expectation.

use alloc::vec;
use alloc::vec::Vec;

use crate::features::FeatureSystem;
use crate::linalg::{self, PoissonSystem};
use crate::mdp::{self, MixingFit, PolicyChain, PolicyTable, TabularMDP};
use crate::policy::{score_into, RegularityConstants, SoftmaxPolicy};
use crate::{Error, Result};

/// Tolerance on the ball constraint.
pub const BALL_TOL: f64 = 1e-9;

/// Reward `r(s, a) = theta . g(psi_s, psi_a)` with `|theta| <= kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelReward {
    pub theta: Vec<f64>,
    pub kappa: f64,
}

impl KernelReward {
    pub fn new(theta: Vec<f64>, kappa: f64) -> Result<Self> {
        let n = linalg::norm(&theta);
        if n > kappa + BALL_TOL {
            return Err(Error::BallViolation { norm: n, kappa });
        }
        Ok(KernelReward { theta, kappa })
    }

    /// No ball constraint; used for the closed-form inner maximizer.
    pub fn unconstrained(theta: Vec<f64>) -> Self {
        KernelReward {
            theta,
            kappa: f64::INFINITY,
        }
    }

    pub fn zero(q: usize, kappa: f64) -> Self {
        KernelReward {
            theta: vec![0.0; q],
            kappa,
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = linalg::norm(&self.theta);
        if n > self.kappa + BALL_TOL {
            return Err(Error::BallViolation {
                norm: n,
                kappa: self.kappa,
            });
        }
        Ok(())
    }

    pub fn reward_vector(&self, fs: &FeatureSystem) -> Vec<f64> {
        (0..fs.n_pairs())
            .map(|x| linalg::dot(fs.pair(x), &self.theta))
            .collect()
    }
}

/// Everything about one policy that the objective and its gradients need,
/// for any reward parameter. Built with one chain solve and one factorised
/// Poisson system.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub policy: SoftmaxPolicy,
    pub table: PolicyTable,
    pub chain: PolicyChain,
    pub q: usize,
    /// `G(pi)`.
    pub fe: Vec<f64>,
    /// Poisson solutions for each feature channel, row-major `n_pairs x q`.
    pub q_feat: Vec<f64>,
    pub log_pi: Vec<f64>,
    /// Poisson solution for the pseudo-reward `-log pi`.
    pub q_ent: Vec<f64>,
    pub entropy: f64,
    /// Score vectors, row-major `n_pairs x dim`.
    pub scores: Vec<f64>,
    /// `sum_x rho(x) score(x) Q_g(x)^T`, row-major `dim x q`; the reward part
    /// of the policy gradient is this matrix times `theta`.
    pub grad_feat: Vec<f64>,
    pub grad_entropy: Vec<f64>,
}

impl PolicyEval {
    pub fn new(mdp: &TabularMDP, fs: &FeatureSystem, policy: &SoftmaxPolicy) -> Result<Self> {
        let table = policy.table(fs)?;
        let chain = mdp::induced_chain(mdp, &table)?;
        Self::from_chain(fs, policy, chain)
    }

    pub fn from_chain(fs: &FeatureSystem, policy: &SoftmaxPolicy, chain: PolicyChain) -> Result<Self> {
        let table = policy.table(fs)?;
        if table.fingerprint != chain.policy_fingerprint {
            return Err(Error::ChainMismatch);
        }
        let n = fs.n_pairs();
        let q = fs.q;
        let na = fs.n_actions;
        let dim = policy.dim();
        let system = PoissonSystem::new(&chain.kernel, &chain.stationary)?;
        let rho = &chain.stationary;

        let mut q_feat = vec![0.0; n * q];
        let mut col = vec![0.0; n];
        for j in 0..q {
            for (x, c) in col.iter_mut().enumerate() {
                *c = fs.pair(x)[j];
            }
            let (sol, _) = system.solve(&col)?;
            for x in 0..n {
                q_feat[x * q + j] = sol[x];
            }
        }

        let mut log_pi = Vec::with_capacity(n);
        let mut scores = vec![0.0; n * dim];
        for s in 0..fs.n_states {
            log_pi.extend(policy.log_probs(fs, s));
            let pr = policy.probs(fs, s);
            for a in 0..na {
                let x = s * na + a;
                score_into(
                    &pr,
                    fs.psi_s(s),
                    a,
                    policy.temperature,
                    &mut scores[x * dim..(x + 1) * dim],
                );
            }
        }
        let neg_log: Vec<f64> = log_pi.iter().map(|v| -v).collect();
        let (q_ent, entropy) = system.solve(&neg_log)?;

        let mut grad_feat = vec![0.0; dim * q];
        let mut grad_entropy = vec![0.0; dim];
        for x in 0..n {
            let w = rho[x];
            if w == 0.0 {
                continue;
            }
            let sc = &scores[x * dim..(x + 1) * dim];
            let qx = &q_feat[x * q..(x + 1) * q];
            for (i, &si) in sc.iter().enumerate() {
                let ws = w * si;
                if ws == 0.0 {
                    continue;
                }
                linalg::axpy(ws, qx, &mut grad_feat[i * q..(i + 1) * q]);
                grad_entropy[i] += ws * q_ent[x];
            }
        }

        Ok(PolicyEval {
            policy: policy.clone(),
            table,
            fe: fs.feature_expectation(rho),
            chain,
            q,
            q_feat,
            log_pi,
            q_ent,
            entropy,
            scores,
            grad_feat,
            grad_entropy,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.chain.n_pairs()
    }

    pub fn score(&self, x: usize) -> &[f64] {
        let d = self.policy.dim();
        &self.scores[x * d..(x + 1) * d]
    }

    pub fn q_features(&self, x: usize) -> &[f64] {
        &self.q_feat[x * self.q..(x + 1) * self.q]
    }

    pub fn avg_reward(&self, theta: &[f64]) -> f64 {
        linalg::dot(&self.fe, theta)
    }

    /// Differential Q-function for reward parameter `theta`.
    pub fn q_function(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_pairs())
            .map(|x| linalg::dot(self.q_features(x), theta))
            .collect()
    }

    pub fn objective(&self, theta: &[f64], lambda: f64, mu: f64, demo_fe: &[f64]) -> f64 {
        let gap: f64 = self
            .fe
            .iter()
            .zip(demo_fe)
            .zip(theta)
            .map(|((g, d), t)| t * (g - d))
            .sum();
        gap - lambda * self.entropy - 0.5 * mu * linalg::norm_sq(theta)
    }

    pub fn grad_theta(&self, theta: &[f64], mu: f64, demo_fe: &[f64]) -> Vec<f64> {
        self.fe
            .iter()
            .zip(demo_fe)
            .zip(theta)
            .map(|((g, d), t)| g - d - mu * t)
            .collect()
    }

    pub fn grad_omega(&self, theta: &[f64], lambda: f64) -> Vec<f64> {
        let q = self.q;
        (0..self.policy.dim())
            .map(|i| linalg::dot(&self.grad_feat[i * q..(i + 1) * q], theta) - lambda * self.grad_entropy[i])
            .collect()
    }

    /// Unconstrained inner maximizer `(G(pi) - demo) / mu`.
    pub fn theta_star(&self, mu: f64, demo_fe: &[f64]) -> Vec<f64> {
        self.fe.iter().zip(demo_fe).map(|(g, d)| (g - d) / mu).collect()
    }

    pub fn exact(&self, reward: &KernelReward, lambda: f64, mu: f64, demo_fe: &[f64]) -> ExactEval {
        ExactEval {
            avg_reward: self.avg_reward(&reward.theta),
            q_function: self.q_function(&reward.theta),
            f_value: self.objective(&reward.theta, lambda, mu, demo_fe),
            grad_omega: self.grad_omega(&reward.theta, lambda),
            grad_theta: self.grad_theta(&reward.theta, mu, demo_fe),
        }
    }
}

/// Exact quantities at one `(omega, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactEval {
    pub avg_reward: f64,
    /// Indexed by pair.
    pub q_function: Vec<f64>,
    pub f_value: f64,
    pub grad_omega: Vec<f64>,
    pub grad_theta: Vec<f64>,
}

/// Differential Q-function and average reward for a reward vector over pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    pub q: Vec<f64>,
    pub avg_reward: f64,
}

pub fn solve_poisson_vec(chain: &PolicyChain, reward: &[f64]) -> Result<PoissonSolution> {
    let system = PoissonSystem::new(&chain.kernel, &chain.stationary)?;
    let (q, avg_reward) = system.solve(reward)?;
    Ok(PoissonSolution { q, avg_reward })
}

pub fn solve_poisson(chain: &PolicyChain, reward: &KernelReward, fs: &FeatureSystem) -> Result<PoissonSolution> {
    solve_poisson_vec(chain, &reward.reward_vector(fs))
}

/// `max_x |Q(x) - (r(x) - J + (K Q)(x))|`
pub fn poisson_residual(chain: &PolicyChain, reward: &[f64], sol: &PoissonSolution) -> f64 {
    let n = chain.n_pairs();
    let kq = linalg::mat_vec(&chain.kernel, &sol.q, n);
    (0..n)
        .map(|x| libm::fabs(sol.q[x] - (reward[x] - sol.avg_reward + kq[x])))
        .fold(0.0, f64::max)
}

pub fn exact_avg_reward(chain: &PolicyChain, reward: &KernelReward, fs: &FeatureSystem) -> f64 {
    linalg::dot(&chain.stationary, &reward.reward_vector(fs))
}

pub fn exact_objective(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    policy: &SoftmaxPolicy,
    reward: &KernelReward,
    lambda: f64,
    mu: f64,
    demo_fe: &[f64],
) -> Result<f64> {
    reward.check()?;
    Ok(PolicyEval::new(mdp, fs, policy)?.objective(&reward.theta, lambda, mu, demo_fe))
}

pub fn exact_grad_omega(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    policy: &SoftmaxPolicy,
    reward: &KernelReward,
    lambda: f64,
) -> Result<Vec<f64>> {
    reward.check()?;
    Ok(PolicyEval::new(mdp, fs, policy)?.grad_omega(&reward.theta, lambda))
}

pub fn exact_grad_theta(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    policy: &SoftmaxPolicy,
    reward: &KernelReward,
    mu: f64,
    demo_fe: &[f64],
) -> Result<Vec<f64>> {
    reward.check()?;
    Ok(PolicyEval::new(mdp, fs, policy)?.grad_theta(&reward.theta, mu, demo_fe))
}

/// Uniform bound on `|Q|` for rewards in the `kappa` ball.
pub fn q_bound(kappa: f64, rho_g: f64, fit: &MixingFit) -> f64 {
    2.0 * libm::sqrt(2.0) * kappa * rho_g * fit.series_factor()
}

/// `(L_omega, S_omega)`: Lipschitz constants of `grad_omega F` and of
/// `grad_theta F` with respect to `omega`.
pub fn lipschitz_constants(rc: &RegularityConstants, rho_g: f64, kappa: f64, q: usize) -> (f64, f64) {
    let mix = rc.chi / (1.0 - rc.upsilon);
    let r2 = libm::sqrt(2.0);
    let l = 2.0 * r2 * (rc.s_pi + 2.0 * rc.b_omega * rc.l_rho) * kappa * rho_g * mix + rc.b_omega * rc.l_q;
    let s = 2.0 * libm::sqrt(2.0 * q as f64) * kappa * rho_g * mix * rc.b_omega;
    (l, s)
}

/// Lower bound on `F` over the feasible set.
pub fn objective_lower_bound(rho_g: f64, kappa: f64, mu: f64, lambda: f64, b_h: f64) -> f64 {
    -(2.0 * libm::sqrt(2.0) * rho_g * kappa + 0.5 * mu * kappa * kappa + lambda * b_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_features, FeatureConfig};
    use crate::mdp::{ChainOptions, PolicyTable};
    use crate::rng::{self, Purpose};
    use rand::Rng;

    fn setup() -> (TabularMDP, FeatureSystem) {
        (
            TabularMDP::random(5, 3, 21),
            build_features(5, 3, &FeatureConfig::default(), 22).unwrap(),
        )
    }

    fn random_point(fs: &FeatureSystem, seed: u64) -> (SoftmaxPolicy, KernelReward) {
        let mut r = rng::stream(seed, Purpose::Test, 0);
        let w: Vec<f64> = (0..fs.n_actions * fs.d_s)
            .map(|_| 2.0 * (2.0 * r.random::<f64>() - 1.0))
            .collect();
        let t = rng::unit_ball(&mut r, fs.q);
        (
            SoftmaxPolicy::new(fs.n_actions, fs.d_s, w).unwrap(),
            KernelReward::new(t, 1.0).unwrap(),
        )
    }

    #[test]
    fn constant_reward_has_zero_q() {
        let (mdp, fs) = setup();
        let (p, _) = random_point(&fs, 1);
        let c = mdp::induced_chain(&mdp, &p.table(&fs).unwrap()).unwrap();
        let sol = solve_poisson_vec(&c, &vec![0.7; 15]).unwrap();
        assert_eq!(sol.avg_reward, 0.7);
        assert!(sol.q.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_theta_gives_zero() {
        let (mdp, fs) = setup();
        let (p, _) = random_point(&fs, 2);
        let r = KernelReward::zero(fs.q, 1.0);
        let c = mdp::induced_chain(&mdp, &p.table(&fs).unwrap()).unwrap();
        assert_eq!(exact_avg_reward(&c, &r, &fs), 0.0);
        let g = exact_grad_omega(&mdp, &fs, &p, &r, 0.0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(
            exact_objective(&mdp, &fs, &p, &r, 0.0, 0.3, &vec![0.1; fs.q]).unwrap(),
            0.0
        );
    }

    // Two states, one action, kernel [[1-p, p], [q, 1-q]], reward (r0, r1).
    // rho = (q, p)/(p+q), J = rho . r, and Q(0) - Q(1) = (r0 - r1)/(p + q)
    // with rho . Q = 0.
    #[test]
    fn two_state_closed_form() {
        let (p, q) = (0.2, 0.35);
        let k = vec![1.0 - p, p, q, 1.0 - q];
        let c = PolicyChain::from_kernel(k, 2, 1, 0, ChainOptions::default()).unwrap();
        let r = [1.0, -0.5];
        let sol = solve_poisson_vec(&c, &r).unwrap();
        let rho = [q / (p + q), p / (p + q)];
        let j = rho[0] * r[0] + rho[1] * r[1];
        let diff = (r[0] - r[1]) / (p + q);
        let q1 = -rho[0] * diff;
        let q0 = q1 + diff;
        assert!((sol.avg_reward - j).abs() < 1e-12);
        assert!((sol.q[0] - q0).abs() < 1e-10);
        assert!((sol.q[1] - q1).abs() < 1e-10);
    }

    #[test]
    fn truncated_series_and_residual() {
        let (mdp, fs) = setup();
        for seed in 0..5 {
            let (p, th) = random_point(&fs, seed);
            let c = mdp::induced_chain(&mdp, &p.table(&fs).unwrap()).unwrap();
            let r = th.reward_vector(&fs);
            let sol = solve_poisson(&c, &th, &fs).unwrap();
            assert!(poisson_residual(&c, &r, &sol) <= 1e-8);
            assert!(linalg::dot(&c.stationary, &sol.q).abs() <= 1e-8);
            // sum_{t <= 200} (K^t r - J)
            let n = 15;
            let mut series = vec![0.0; n];
            let mut v = r.clone();
            for _ in 0..=200 {
                for x in 0..n {
                    series[x] += v[x] - sol.avg_reward;
                }
                v = linalg::mat_vec(&c.kernel, &v, n);
            }
            assert!(linalg::max_abs(&linalg::sub(&series, &sol.q)) <= 1e-6);
            let fit = mdp::worst_case_mixing(&c, 200);
            assert!(linalg::max_abs(&sol.q) <= q_bound(1.0, fs.rho_g, &fit));
        }
    }

    fn fd_omega(
        mdp: &TabularMDP,
        fs: &FeatureSystem,
        p: &SoftmaxPolicy,
        th: &KernelReward,
        lambda: f64,
        demo: &[f64],
    ) -> Vec<f64> {
        let h = 1e-5;
        (0..p.dim())
            .map(|i| {
                let mut up = p.clone();
                up.omega[i] += h;
                let mut dn = p.clone();
                dn.omega[i] -= h;
                let fu = exact_objective(mdp, fs, &up, th, lambda, 0.3, demo).unwrap();
                let fd = exact_objective(mdp, fs, &dn, th, lambda, 0.3, demo).unwrap();
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn omega_gradient_matches_finite_differences() {
        let (mdp, fs) = setup();
        let demo = vec![0.05; fs.q];
        for seed in 0..6 {
            let (p, th) = random_point(&fs, 100 + seed);
            for lambda in [0.0, 0.1] {
                let g = exact_grad_omega(&mdp, &fs, &p, &th, lambda).unwrap();
                let fd = fd_omega(&mdp, &fs, &p, &th, lambda, &demo);
                let err = linalg::dist(&g, &fd) / linalg::norm(&g);
                assert!(err <= 1e-5, "seed {seed} lambda {lambda}: {err}");
            }
        }
    }

    #[test]
    fn theta_gradient_identities() {
        let (mdp, fs) = setup();
        let (p, th) = random_point(&fs, 7);
        let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
        // population mode at the expert itself
        let g = e.grad_theta(&th.theta, 0.3, &e.fe);
        for (gi, ti) in g.iter().zip(&th.theta) {
            assert!((gi + 0.3 * ti).abs() < 1e-15);
        }
        let demo = vec![0.02; fs.q];
        let ts = e.theta_star(0.3, &demo);
        assert!(linalg::max_abs(&e.grad_theta(&ts, 0.3, &demo)) < 1e-15);
        assert!((e.objective(&th.theta, 0.0, 0.3, &e.fe) + 0.15 * linalg::norm_sq(&th.theta)).abs() < 1e-15);
    }

    #[test]
    fn objective_concave_in_theta() {
        let (mdp, fs) = setup();
        let (p, _) = random_point(&fs, 8);
        let e = PolicyEval::new(&mdp, &fs, &p).unwrap();
        let mut r = rng::stream(8, Purpose::Test, 1);
        let demo = vec![0.0; fs.q];
        for _ in 0..50 {
            let a = rng::unit_ball(&mut r, fs.q);
            let b = rng::unit_ball(&mut r, fs.q);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let lhs = e.objective(&mid, 0.1, 0.3, &demo);
            let rhs = 0.5 * (e.objective(&a, 0.1, 0.3, &demo) + e.objective(&b, 0.1, 0.3, &demo));
            // strong concavity: gap equals mu/8 |a-b|^2
            assert!(lhs - rhs >= 0.3 / 8.0 * linalg::dist_sq(&a, &b) - 1e-12);
        }
    }

    #[test]
    fn ball_violation_detected() {
        let (mdp, fs) = setup();
        let p = SoftmaxPolicy::zeros(3, fs.d_s);
        let th = KernelReward {
            theta: vec![1.0; fs.q],
            kappa: 1.0,
        };
        assert!(matches!(
            exact_objective(&mdp, &fs, &p, &th, 0.0, 0.3, &vec![0.0; fs.q]),
            Err(Error::BallViolation { .. })
        ));
        assert!(KernelReward::new(vec![1.0; 4], 1.0).is_err());
    }

    #[test]
    fn lipschitz_formulas() {
        let zero = RegularityConstants {
            b_omega: 0.0,
            s_pi: 0.0,
            l_rho: 0.0,
            l_q: 0.0,
            b_h: 0.0,
            s_h: 0.0,
            chi: 1.0,
            upsilon: 0.5,
        };
        assert_eq!(lipschitz_constants(&zero, 1.0, 1.0, 4), (0.0, 0.0));
        let r2 = libm::sqrt(2.0);
        let rc = RegularityConstants {
            b_omega: r2,
            s_pi: 1.0,
            l_rho: 1.0,
            l_q: 1.0,
            ..zero
        };
        let (l, s) = lipschitz_constants(&rc, 1.0, 1.0, 4);
        assert!((l - (2.0 * r2 * (1.0 + 2.0 * r2) * 2.0 + r2)).abs() < 1e-12);
        assert!((s - 2.0 * libm::sqrt(8.0) * r2 * 2.0).abs() < 1e-12);
        let (l2, s2) = lipschitz_constants(&rc, 1.0, 2.0, 4);
        assert!((l2 - r2 - 2.0 * (l - r2)).abs() < 1e-12);
        assert!((s2 - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn point_mass_policy_pairs() {
        // deterministic table exercises zero stationary entries
        let mdp = TabularMDP::random(3, 2, 5);
        let t = PolicyTable::deterministic(2, &[0, 1, 0]).unwrap();
        let c = mdp::induced_chain(&mdp, &t).unwrap();
        let r: Vec<f64> = (0..6).map(|x| x as f64).collect();
        let sol = solve_poisson_vec(&c, &r).unwrap();
        assert!(poisson_residual(&c, &r, &sol) <= 1e-8);
    }
}
