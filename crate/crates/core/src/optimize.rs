//! Alternating and greedy stochastic gradient methods for the regularized
//! min-max problem, their stationarity measures, the theory step sizes and
//! batch sizes, and a runtime monitor for the decreasing potential.
//!
//! Iterates are numbered from 0 (the initialization). Step `t` reads
//! `(omega_t, theta_t)`, produces `(omega_{t+1}, theta_{t+1})` and reports
//! the metrics of iterate `t`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::FeatureSystem;
use crate::linalg;
use crate::mdp::TabularMDP;
use crate::oracles::{objective_lower_bound, PolicyEval};
use crate::policy::{self, ProbeConfig, RegularityConstants, SoftmaxPolicy};
use crate::rng::{self, Purpose};
use crate::sampling::{self, SamplerConfig};

const SQRT2: f64 = core::f64::consts::SQRT_2;

/// Euclidean projection onto the ball of radius `kappa`.
pub fn project_ball(v: &[f64], kappa: f64) -> Vec<f64> {
    let n = linalg::norm(v);
    if n <= kappa {
        v.to_vec()
    } else {
        v.iter().map(|x| kappa * x / n).collect()
    }
}

/// `|theta - P(theta + grad)|^2`, the projected-gradient residual.
pub fn projection_residual(theta: &[f64], grad: &[f64], kappa: f64) -> f64 {
    let mut step = theta.to_vec();
    linalg::axpy(1.0, grad, &mut step);
    linalg::dist_sq(theta, &project_ball(&step, kappa))
}

/// Whether demonstrations enter as the exact expert feature expectation or
/// as an empirical average over sampled trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DemoMode {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Alternating,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltSgdConfig {
    pub eta_theta: f64,
    pub eta_omega: f64,
    /// Theta batch; for the greedy method, the batch behind the inner
    /// maximizer estimate.
    pub q_theta: u64,
    pub q_omega: u64,
    pub kappa: f64,
    pub mu: f64,
    pub lambda: f64,
    pub max_iters: usize,
    pub mode: DemoMode,
    /// Theta ascent steps per iteration.
    pub reward_updates: usize,
    /// Use exact gradients instead of minibatch estimates.
    pub exact_gradients: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for AltSgdConfig {
    fn default() -> Self {
        AltSgdConfig {
            eta_theta: 1.0,
            eta_omega: 1.0,
            q_theta: 8192,
            q_omega: 8192,
            kappa: 1.0,
            mu: 0.3,
            lambda: 0.0,
            max_iters: 2000,
            mode: DemoMode::Population,
            reward_updates: 1,
            exact_gradients: false,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl AltSgdConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.eta_theta) {
            return Err(Error::InvalidArgument("eta_theta must be finite and nonnegative"));
        }
        if !nonneg(self.eta_omega) {
            return Err(Error::InvalidArgument("eta_omega must be finite and nonnegative"));
        }
        if self.q_theta == 0 || self.q_omega == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidArgument("kappa must be positive"));
        }
        if !nonneg(self.mu) {
            return Err(Error::InvalidArgument("mu must be finite and nonnegative"));
        }
        if !nonneg(self.lambda) {
            return Err(Error::InvalidArgument("lambda must be finite and nonnegative"));
        }
        if self.reward_updates == 0 {
            return Err(Error::InvalidArgument("reward_updates must be at least 1"));
        }
        Ok(())
    }

    /// Checks the step sizes against the convergence conditions for
    /// smoothness constants `(l, s)`. The first violated condition is named.
    pub fn check_step_sizes(&self, l: f64, s: f64) -> Result<()> {
        let caps = step_caps(l, s, self.mu)?;
        if self.eta_omega > caps.eta_omega {
            return Err(Error::InfeasibleConstants("eta_omega above its cap"));
        }
        if self.eta_theta > caps.eta_theta {
            return Err(Error::InfeasibleConstants("eta_theta above its cap"));
        }
        if self.eta_omega > caps.ratio * self.eta_theta {
            return Err(Error::InfeasibleConstants("eta_omega / eta_theta above its cap"));
        }
        Ok(())
    }

    /// True when the ball is smaller than the norm bound on the unconstrained
    /// inner maximizer, so greedy and constrained formulations differ.
    pub fn greedy_ball_mismatch(&self, rho_g: f64) -> bool {
        self.mu > 0.0 && self.kappa < 2.0 * SQRT2 * rho_g / self.mu
    }
}

/// Largest admissible step sizes and step ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCaps {
    pub eta_omega: f64,
    pub eta_theta: f64,
    /// Cap on `eta_omega / eta_theta`.
    pub ratio: f64,
}

pub fn step_caps(l: f64, s: f64, mu: f64) -> Result<StepCaps> {
    if !(l > 0.0) || !(s >= 0.0) || !(mu > 0.0) {
        return Err(Error::InfeasibleConstants("need L > 0, S >= 0, mu > 0"));
    }
    let w1 = if s > 0.0 {
        l / (s * (8.0 * l + 2.0))
    } else {
        f64::INFINITY
    };
    let eta_omega = w1.min(1.0 / (2.0 * l));
    let t2 = if s > 0.0 {
        (7.0 * l + 1.0) / (150.0 * s * s)
    } else {
        f64::INFINITY
    };
    let eta_theta = (1.0 / (150.0 * mu)).min(t2).min(1.0 / (100.0 * (2.0 * mu + s)));
    Ok(StepCaps {
        eta_omega,
        eta_theta,
        ratio: mu / (30.0 * l + 5.0),
    })
}

/// Step sizes at `margin` times the caps, with the ratio condition applied
/// to the omega step.
pub fn theory_step_sizes(l: f64, s: f64, mu: f64, margin: f64) -> Result<(f64, f64)> {
    let caps = step_caps(l, s, mu)?;
    let eta_theta = margin * caps.eta_theta;
    let eta_omega = margin * caps.eta_omega.min(caps.ratio * caps.eta_theta);
    Ok((eta_theta, eta_omega))
}

/// Coefficients of the potential
/// `E_t = F(omega_t, theta_t) + s (c_w |omega_t - omega_{t-1}|^2
///        + c_next |theta_{t+1} - theta_t|^2 + c_prev |theta_t - theta_{t-1}|^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialState {
    pub s_coefficient: f64,
    pub omega_coef: f64,
    pub theta_next_coef: f64,
    pub theta_prev_coef: f64,
    /// Last evaluated value.
    pub value: Option<f64>,
}

impl PotentialState {
    pub fn new(eta_omega: f64, eta_theta: f64, mu: f64, l: f64) -> Result<Self> {
        if !(eta_omega > 0.0) || !(eta_theta > 0.0) {
            return Err(Error::InvalidArgument("potential needs positive step sizes"));
        }
        Ok(PotentialState {
            s_coefficient: 8.0 / (eta_omega * eta_omega * (58.0 * l + 9.0)),
            omega_coef: 0.5 * (1.0 + 2.0 * eta_omega * l),
            theta_next_coef: eta_omega / (2.0 * eta_theta) - mu * eta_omega / 4.0
                + 1.5 * eta_omega * eta_theta * mu * mu,
            theta_prev_coef: mu * eta_omega / 8.0,
            value: None,
        })
    }

    pub fn combine(&self, f: f64, d_omega_sq: f64, d_theta_next_sq: f64, d_theta_prev_sq: f64) -> f64 {
        f + self.s_coefficient
            * (self.omega_coef * d_omega_sq
                + self.theta_next_coef * d_theta_next_sq
                + self.theta_prev_coef * d_theta_prev_sq)
    }
}

/// Per-iteration decrease coefficients of the potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
}

pub fn descent_constants(eta_omega: f64, eta_theta: f64, mu: f64, l: f64, s_omega: f64) -> DescentConstants {
    let s = 8.0 / (eta_omega * eta_omega * (58.0 * l + 9.0));
    DescentConstants {
        k1: 0.5 / eta_omega - s * (0.5 * eta_omega * (7.0 * l + 1.0) + 1.5 * eta_omega * eta_theta * s_omega * s_omega),
        k2: s * eta_omega * l / 2.0 - s_omega / 2.0,
        k3: s * (eta_omega * mu / 4.0 - 1.5 * eta_omega * eta_theta * mu * mu),
        k4: s * mu * eta_omega / 8.0 - (0.5 / eta_theta + (s_omega + 2.0 * mu) / 2.0),
        k5: s * mu * eta_omega / 8.0 - (0.5 / eta_theta + mu / 2.0),
    }
}

/// Problem constants the schedules are built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    /// Smoothness of the omega gradient, entropy term included.
    pub l_omega: f64,
    pub s_omega: f64,
    pub mu: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub rho_g: f64,
    pub b_h: f64,
    /// Per-sample theta gradient noise.
    pub m_theta: f64,
    /// Per-sample omega gradient noise, sup over the ball.
    pub m_omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingSchedule {
    pub config: AltSgdConfig,
    pub caps: StepCaps,
    pub descent: DescentConstants,
    pub s_coefficient: f64,
    pub k: f64,
    pub phi: f64,
    pub nu: f64,
    /// Iteration budget, unrounded; may exceed any practical run.
    pub n_iters: f64,
    /// A batch size was clipped to `u64::MAX`.
    pub saturated: bool,
}

fn ceil_u64(x: f64) -> (u64, bool) {
    let c = libm::ceil(x);
    if c >= u64::MAX as f64 {
        (u64::MAX, true)
    } else {
        ((c as u64).max(1), false)
    }
}

/// Step sizes, batch sizes and iteration count that drive the running
/// stationarity measure below `epsilon`. `c0` is twice the potential at the
/// first iterate with full history.
pub fn alternating_schedule(tc: &TheoryConstants, epsilon: f64, c0: f64) -> Result<AlternatingSchedule> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive"));
    }
    let mu = tc.mu;
    let l = tc.l_omega;
    let caps = step_caps(l, tc.s_omega, mu)?;
    let (eta_theta, eta_omega) = theory_step_sizes(l, tc.s_omega, mu, 0.99)?;
    let descent = descent_constants(eta_omega, eta_theta, mu, l, tc.s_omega);
    let kmin = descent.k1.min(descent.k4);
    if !(kmin > 0.0) {
        return Err(Error::InfeasibleConstants("min(k1, k4) is not positive"));
    }
    let k = 1.0 / kmin;
    let phi = 1.0f64
        .max(1.0 / (eta_theta * eta_theta))
        .max(1.0 / (eta_omega * eta_omega));
    let s = 8.0 / (eta_omega * eta_omega * (58.0 * l + 9.0));
    let w_part = (eta_omega + s * eta_omega * eta_omega + s * eta_omega / (2.0 * mu)).max(s * eta_omega / 2.0);
    let t_part = (0.5 / mu).max(1.5 * eta_omega * eta_theta);
    let nu = (2.0 * w_part).max(3.0 * t_part);
    let (q_theta, sat1) = ceil_u64(4.0 * k * phi * nu * tc.m_theta / epsilon);
    let (q_omega, sat2) = ceil_u64(4.0 * k * phi * nu * tc.m_omega / epsilon);
    let head = c0 + 4.0 * SQRT2 * tc.rho_g * tc.kappa + mu * tc.kappa * tc.kappa + 2.0 * tc.lambda * tc.b_h;
    if !(head > 0.0) {
        return Err(Error::InfeasibleConstants("iteration count numerator is not positive"));
    }
    let n_iters = k * phi * head / epsilon;
    let max_iters = if n_iters >= usize::MAX as f64 {
        usize::MAX
    } else {
        libm::ceil(n_iters) as usize
    };
    let config = AltSgdConfig {
        eta_theta,
        eta_omega,
        q_theta,
        q_omega,
        kappa: tc.kappa,
        mu,
        lambda: tc.lambda,
        max_iters,
        ..AltSgdConfig::default()
    };
    Ok(AlternatingSchedule {
        config,
        caps,
        descent,
        s_coefficient: s,
        k,
        phi,
        nu,
        n_iters,
        saturated: sat1 || sat2,
    })
}

/// `L + S^2 / mu`, the smoothness of the greedy objective.
pub fn greedy_smoothness(tc: &TheoryConstants) -> f64 {
    tc.l_omega + tc.s_omega * tc.s_omega / tc.mu
}

/// Half-width `B_F` of the range of the greedy objective.
pub fn greedy_range(rho_g: f64, mu: f64, lambda: f64, b_h: f64) -> f64 {
    12.0 * rho_g * rho_g / mu + lambda * b_h
}

/// Greedy step `epsilon / ((L + S^2/mu) M_G)` and the matching iteration
/// count `4 B_F (L + S^2/mu) M_G / epsilon^2`.
pub fn greedy_schedule(smoothness: f64, b_f: f64, m_g: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0) || !(smoothness > 0.0) || !(m_g > 0.0) {
        return Err(Error::InfeasibleConstants("greedy schedule needs positive constants"));
    }
    let eta = epsilon / (smoothness * m_g);
    Ok((eta, 4.0 * b_f * smoothness * m_g / (epsilon * epsilon)))
}

/// Step that balances the two terms of the greedy bound at horizon `n`.
pub fn greedy_step_for_horizon(smoothness: f64, b_f: f64, m_g: f64, n: usize) -> f64 {
    2.0 * libm::sqrt(b_f / (smoothness * m_g * n as f64))
}

/// `2 sqrt(B_F (L + S^2/mu) M_G / N)`.
pub fn greedy_bound(smoothness: f64, b_f: f64, m_g: f64, n: usize) -> f64 {
    2.0 * libm::sqrt(b_f * smoothness * m_g / n as f64)
}

/// Optimizer state. `omega_prev` and `theta_prev` hold up to two earlier
/// iterates, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub policy: SoftmaxPolicy,
    pub theta: Vec<f64>,
    pub iteration: usize,
    pub omega_prev: Vec<Vec<f64>>,
    pub theta_prev: Vec<Vec<f64>>,
    pub j_running: f64,
    pub i_running: f64,
    pub monitor: Option<PotentialState>,
}

impl TrainerState {
    pub fn new(policy: SoftmaxPolicy, theta: Vec<f64>) -> Self {
        TrainerState {
            policy,
            theta,
            iteration: 0,
            omega_prev: Vec::new(),
            theta_prev: Vec::new(),
            j_running: f64::INFINITY,
            i_running: f64::INFINITY,
            monitor: None,
        }
    }

    pub fn omega(&self) -> &[f64] {
        &self.policy.omega
    }

    pub fn with_monitor(mut self, monitor: PotentialState) -> Self {
        self.monitor = Some(monitor);
        self
    }

    fn push_history(&mut self, omega_old: Vec<f64>, theta_old: Vec<f64>) {
        self.omega_prev.insert(0, omega_old);
        self.omega_prev.truncate(2);
        self.theta_prev.insert(0, theta_old);
        self.theta_prev.truncate(2);
    }
}

/// Metrics of one iterate. Fields that do not apply are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub f_exact: f64,
    pub j_value: Option<f64>,
    pub j_running: Option<f64>,
    pub i_value: f64,
    pub i_running: Option<f64>,
    pub potential: Option<f64>,
    pub grad_omega_norm: f64,
    pub proj_residual: Option<f64>,
    pub theta_norm: f64,
    pub avg_true_reward: Option<f64>,
}

fn finite_opt(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

fn true_reward(mdp: &TabularMDP, eval: &PolicyEval) -> Option<f64> {
    mdp.eval_reward.as_ref().map(|r| linalg::dot(&eval.chain.stationary, r))
}

/// `|grad_omega F(omega, theta*(omega))|^2` with the exact inner maximizer.
pub fn i_term(eval: &PolicyEval, cfg: &AltSgdConfig, demo_fe: &[f64]) -> f64 {
    let t_star = eval.theta_star(cfg.mu, demo_fe);
    linalg::norm_sq(&eval.grad_omega(&t_star, cfg.lambda))
}

/// Alternating stationarity term for iterate `t`, from the policy
/// evaluation at `omega_t` and the two reward iterates.
pub fn j_term(eval: &PolicyEval, cfg: &AltSgdConfig, demo_fe: &[f64], theta_t: &[f64], theta_next: &[f64]) -> f64 {
    let g = eval.grad_theta(theta_t, cfg.mu, demo_fe);
    projection_residual(theta_t, &g, cfg.kappa) + linalg::norm_sq(&eval.grad_omega(theta_next, cfg.lambda))
}

fn check_iterate(state: &TrainerState, kappa: f64, bounded: bool) -> Result<()> {
    let finite = state
        .theta
        .iter()
        .chain(state.policy.omega.iter())
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            iteration: state.iteration,
        });
    }
    let norm = linalg::norm(&state.theta);
    if bounded && norm > kappa * (1.0 + crate::oracles::BALL_TOL) {
        return Err(Error::BallViolation { norm, kappa });
    }
    Ok(())
}

/// One alternating step: projected theta ascent at `(omega_t, theta_t)`,
/// then omega descent at `(omega_t, theta_{t+1})`.
pub fn alt_sgd_step(
    state: &mut TrainerState,
    cfg: &AltSgdConfig,
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
) -> Result<StepMetrics> {
    let t = state.iteration;
    let eval = PolicyEval::new(mdp, fs, &state.policy)?;
    let theta_t = state.theta.clone();
    let f = eval.objective(&theta_t, cfg.lambda, cfg.mu, demo_fe);
    let g_exact = eval.grad_theta(&theta_t, cfg.mu, demo_fe);
    let proj = projection_residual(&theta_t, &g_exact, cfg.kappa);

    let mut theta = theta_t.clone();
    for k in 0..cfg.reward_updates {
        let g = if cfg.exact_gradients {
            eval.grad_theta(&theta, cfg.mu, demo_fe)
        } else {
            let mut r = rng::stream(cfg.seed, Purpose::ThetaBatch, (t as u64) << 8 | k as u64);
            sampling::stoch_grad_theta_eval(
                mdp,
                &eval,
                fs,
                &theta,
                cfg.mu,
                demo_fe,
                cfg.q_theta,
                cfg.sampler.source,
                &mut r,
            )?
            .value
        };
        linalg::axpy(cfg.eta_theta, &g, &mut theta);
        theta = project_ball(&theta, cfg.kappa);
    }

    let grad_w = eval.grad_omega(&theta, cfg.lambda);
    let j = proj + linalg::norm_sq(&grad_w);
    let i = i_term(&eval, cfg, demo_fe);
    let step_w = if cfg.exact_gradients {
        grad_w.clone()
    } else {
        let mut r = rng::stream(cfg.seed, Purpose::OmegaBatch, t as u64);
        sampling::stoch_grad_omega_eval(mdp, &eval, fs, &theta, cfg.lambda, cfg.q_omega, cfg.sampler, &mut r)?.value
    };
    let omega_t = state.policy.omega.clone();
    let mut omega = omega_t.clone();
    linalg::axpy(-cfg.eta_omega, &step_w, &mut omega);

    state.push_history(omega_t, theta_t.clone());
    state.policy.omega = omega;
    state.theta = theta;
    state.j_running = state.j_running.min(j);
    state.i_running = state.i_running.min(i);

    let potential = match state.monitor {
        Some(ref mut m) if state.omega_prev.len() == 2 => {
            let e = m.combine(
                f,
                linalg::dist_sq(&state.omega_prev[0], &state.omega_prev[1]),
                linalg::dist_sq(&state.theta, &state.theta_prev[0]),
                linalg::dist_sq(&state.theta_prev[0], &state.theta_prev[1]),
            );
            m.value = Some(e);
            Some(e)
        }
        _ => None,
    };
    state.iteration += 1;
    check_iterate(state, cfg.kappa, true)?;

    Ok(StepMetrics {
        iter: t,
        f_exact: f,
        j_value: Some(j),
        j_running: Some(state.j_running),
        i_value: i,
        i_running: Some(state.i_running),
        potential,
        grad_omega_norm: libm::sqrt(linalg::norm_sq(&grad_w)),
        proj_residual: Some(proj),
        theta_norm: linalg::norm(&theta_t),
        avg_true_reward: true_reward(mdp, &eval),
    })
}

/// One greedy step: estimate the inner maximizer, then descend in omega
/// with that reward.
pub fn greedy_sgd_step(
    state: &mut TrainerState,
    cfg: &AltSgdConfig,
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
) -> Result<StepMetrics> {
    if !(cfg.mu > 0.0) {
        return Err(Error::InvalidArgument("greedy updates need mu > 0"));
    }
    let t = state.iteration;
    let eval = PolicyEval::new(mdp, fs, &state.policy)?;
    let t_star = eval.theta_star(cfg.mu, demo_fe);
    let f = eval.objective(&t_star, cfg.lambda, cfg.mu, demo_fe);
    let grad_star = eval.grad_omega(&t_star, cfg.lambda);
    let i = linalg::norm_sq(&grad_star);

    let (theta_hat, step_w) = if cfg.exact_gradients {
        (t_star.clone(), grad_star.clone())
    } else {
        let mut r = rng::stream(cfg.seed, Purpose::ThetaStar, t as u64);
        let th = sampling::theta_star_estimate_eval(
            mdp,
            &eval,
            fs,
            demo_fe,
            cfg.mu,
            cfg.q_theta,
            cfg.sampler.source,
            &mut r,
        )?
        .value;
        let mut r = rng::stream(cfg.seed, Purpose::OmegaBatch, t as u64);
        let g =
            sampling::stoch_grad_omega_eval(mdp, &eval, fs, &th, cfg.lambda, cfg.q_omega, cfg.sampler, &mut r)?.value;
        (th, g)
    };
    let omega_t = state.policy.omega.clone();
    let mut omega = omega_t.clone();
    linalg::axpy(-cfg.eta_omega, &step_w, &mut omega);
    let theta_t = core::mem::replace(&mut state.theta, theta_hat);
    state.push_history(omega_t, theta_t);
    state.policy.omega = omega;
    state.i_running = state.i_running.min(i);
    state.iteration += 1;
    check_iterate(state, cfg.kappa, false)?;

    Ok(StepMetrics {
        iter: t,
        f_exact: f,
        j_value: None,
        j_running: None,
        i_value: i,
        i_running: Some(state.i_running),
        potential: None,
        grad_omega_norm: libm::sqrt(i),
        proj_residual: None,
        theta_norm: linalg::norm(&t_star),
        avg_true_reward: true_reward(mdp, &eval),
    })
}

/// Metrics at the current iterate without stepping. Running minima are
/// reported as they stand.
pub fn observe(
    state: &TrainerState,
    cfg: &AltSgdConfig,
    algo: Algorithm,
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
) -> Result<StepMetrics> {
    let eval = PolicyEval::new(mdp, fs, &state.policy)?;
    let i = i_term(&eval, cfg, demo_fe);
    let (f, gw, proj, tn) = match algo {
        Algorithm::Alternating => {
            let g = eval.grad_theta(&state.theta, cfg.mu, demo_fe);
            (
                eval.objective(&state.theta, cfg.lambda, cfg.mu, demo_fe),
                linalg::norm(&eval.grad_omega(&state.theta, cfg.lambda)),
                Some(projection_residual(&state.theta, &g, cfg.kappa)),
                linalg::norm(&state.theta),
            )
        }
        Algorithm::Greedy => {
            let ts = eval.theta_star(cfg.mu, demo_fe);
            (
                eval.objective(&ts, cfg.lambda, cfg.mu, demo_fe),
                libm::sqrt(i),
                None,
                linalg::norm(&ts),
            )
        }
    };
    Ok(StepMetrics {
        iter: state.iteration,
        f_exact: f,
        j_value: None,
        j_running: match algo {
            Algorithm::Alternating => finite_opt(state.j_running),
            Algorithm::Greedy => None,
        },
        i_value: i,
        i_running: finite_opt(state.i_running),
        potential: None,
        grad_omega_norm: gw,
        proj_residual: proj,
        theta_norm: tn,
        avg_true_reward: true_reward(mdp, &eval),
    })
}

/// Runs `iters` steps, passing the metrics of iterates `0..iters` and then
/// of the final iterate to `sink`.
pub fn train<E>(
    state: &mut TrainerState,
    cfg: &AltSgdConfig,
    algo: Algorithm,
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
    iters: usize,
    mut sink: impl FnMut(&StepMetrics) -> core::result::Result<(), E>,
) -> core::result::Result<(), E>
where
    E: From<Error>,
{
    cfg.validate()?;
    for _ in 0..iters {
        let m = match algo {
            Algorithm::Alternating => alt_sgd_step(state, cfg, mdp, fs, demo_fe)?,
            Algorithm::Greedy => greedy_sgd_step(state, cfg, mdp, fs, demo_fe)?,
        };
        sink(&m)?;
    }
    let last = observe(state, cfg, algo, mdp, fs, demo_fe)?;
    sink(&last)
}

/// Running minimum of the alternating stationarity measure.
pub fn substationarity_j(state: &TrainerState) -> Result<f64> {
    finite_opt(state.j_running).ok_or(Error::InsufficientHistory)
}

/// Running minimum of the greedy stationarity measure.
pub fn substationarity_i(state: &TrainerState) -> Result<f64> {
    finite_opt(state.i_running).ok_or(Error::InsufficientHistory)
}

/// Potential of the previous iterate, recomputed with an exact objective.
/// Needs two completed steps.
pub fn potential_eval(
    ps: &PotentialState,
    state: &TrainerState,
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
    cfg: &AltSgdConfig,
) -> Result<f64> {
    if state.omega_prev.len() < 2 || state.theta_prev.len() < 2 {
        return Err(Error::InsufficientHistory);
    }
    let pol = state.policy.with_omega(state.omega_prev[0].clone());
    let eval = PolicyEval::new(mdp, fs, &pol)?;
    let f = eval.objective(&state.theta_prev[0], cfg.lambda, cfg.mu, demo_fe);
    Ok(ps.combine(
        f,
        linalg::dist_sq(&state.omega_prev[0], &state.omega_prev[1]),
        linalg::dist_sq(&state.theta, &state.theta_prev[0]),
        linalg::dist_sq(&state.theta_prev[0], &state.theta_prev[1]),
    ))
}

/// Potential after the first two exact-gradient steps from `state`, the
/// quantity behind the iteration count of the alternating schedule.
pub fn initial_potential(
    state: &TrainerState,
    cfg: &AltSgdConfig,
    l_omega: f64,
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
) -> Result<f64> {
    let mut st = state
        .clone()
        .with_monitor(PotentialState::new(cfg.eta_omega, cfg.eta_theta, cfg.mu, l_omega)?);
    let exact = AltSgdConfig {
        exact_gradients: true,
        reward_updates: 1,
        ..cfg.clone()
    };
    alt_sgd_step(&mut st, &exact, mdp, fs, demo_fe)?;
    alt_sgd_step(&mut st, &exact, mdp, fs, demo_fe)?
        .potential
        .ok_or(Error::InsufficientHistory)
}

/// Measured constants for the schedules: regularity probes, the smoothness
/// pair with the entropy term folded in, and worst per-sample noise over the
/// probed policies times the probe safety factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredConstants {
    pub regularity: RegularityConstants,
    /// Smoothness without the entropy term.
    pub l_reward: f64,
    pub theory: TheoryConstants,
}

pub fn measure_constants(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    probe: &ProbeConfig,
    mu: f64,
    lambda: f64,
    seed: u64,
) -> Result<MeasuredConstants> {
    let rc = policy::estimate_regularity(mdp, fs, probe, seed)?;
    let (l, s) = crate::oracles::lipschitz_constants(&rc, fs.rho_g, probe.kappa, fs.q);
    let mut m_theta: f64 = 0.0;
    let mut m_omega: f64 = 0.0;
    for_probe_policies(mdp, fs, probe, seed, |eval| {
        m_theta = m_theta.max(sampling::theta_noise_moment(eval, fs));
        m_omega = m_omega.max(sampling::omega_noise_sup(eval, probe.kappa, lambda));
    })?;
    Ok(MeasuredConstants {
        regularity: rc,
        l_reward: l,
        theory: TheoryConstants {
            l_omega: l + lambda * rc.s_h,
            s_omega: s,
            mu,
            kappa: probe.kappa,
            lambda,
            rho_g: fs.rho_g,
            b_h: rc.b_h,
            m_theta: probe.safety * m_theta,
            m_omega: probe.safety * m_omega,
        },
    })
}

/// Worst greedy second moment over the probed policies, times the safety
/// factor.
#[allow(clippy::too_many_arguments)]
pub fn measure_greedy_moment(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    probe: &ProbeConfig,
    demo_fe: &[f64],
    mu: f64,
    lambda: f64,
    q_omega: u64,
    b_theta: u64,
    seed: u64,
) -> Result<f64> {
    let mut m: f64 = 0.0;
    for_probe_policies(mdp, fs, probe, seed, |eval| {
        m = m.max(sampling::greedy_second_moment(
            eval, fs, demo_fe, mu, lambda, q_omega, b_theta,
        ));
    })?;
    Ok(probe.safety * m)
}

/// Visits the uniform policy and the first member of each probe pair.
fn for_probe_policies(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    probe: &ProbeConfig,
    seed: u64,
    mut f: impl FnMut(&PolicyEval),
) -> Result<()> {
    let mut base = SoftmaxPolicy::zeros(fs.n_actions, fs.d_s);
    base.temperature = probe.temperature;
    f(&PolicyEval::new(mdp, fs, &base)?);
    for i in 0..probe.n_probe {
        let (w, _) = policy::probe_pair(base.dim(), probe, seed, i);
        f(&PolicyEval::new(mdp, fs, &base.with_omega(w))?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRow {
    pub name: &'static str,
    pub bound: f64,
    pub observed: f64,
}

impl AuditRow {
    pub fn ok(&self) -> bool {
        self.observed <= self.bound
    }
}

/// Settings for [`audit_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditConfig {
    pub probe: ProbeConfig,
    pub mu: f64,
    pub lambda: f64,
    /// Batch sizes entering the greedy moment.
    pub q_omega: u64,
    pub b_theta: u64,
    /// Held-out policy pairs, drawn independently of the estimation probes.
    pub n_heldout: usize,
}

/// Estimates every regularity and noise constant, then compares each with
/// the worst value seen on held-out policy pairs.
pub fn audit_constants(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    demo_fe: &[f64],
    cfg: &AuditConfig,
    seed: u64,
) -> Result<Vec<AuditRow>> {
    let probe = &cfg.probe;
    let kappa = probe.kappa;
    let mc = measure_constants(mdp, fs, probe, cfg.mu, cfg.lambda, seed)?;
    let rc = mc.regularity;
    let m_g = measure_greedy_moment(
        mdp,
        fs,
        probe,
        demo_fe,
        cfg.mu,
        cfg.lambda,
        cfg.q_omega,
        cfg.b_theta,
        seed,
    )?;
    let fit = crate::mdp::MixingFit {
        chi: rc.chi,
        upsilon: rc.upsilon,
        exact: false,
    };

    let held_seed = linalg::fingerprint(&[seed, 0xa0d1], &[]);
    let mut base = SoftmaxPolicy::zeros(fs.n_actions, fs.d_s);
    base.temperature = probe.temperature;
    let dim = base.dim();
    let mut obs = [0.0f64; 15];
    for i in 0..cfg.n_heldout {
        let (w1, w2) = policy::probe_pair(dim, probe, held_seed, i);
        let dw = linalg::dist(&w1, &w2);
        let e1 = PolicyEval::new(mdp, fs, &base.with_omega(w1))?;
        let e2 = PolicyEval::new(mdp, fs, &base.with_omega(w2))?;
        let mut r = rng::stream(held_seed, Purpose::Probe, i as u64);
        let mut theta = rng::unit_ball(&mut r, fs.q);
        linalg::scale(kappa, &mut theta);
        let pr = policy::probe_ratios(&e1, &e2, kappa);
        let gd = linalg::dist(&e1.grad_omega(&theta, cfg.lambda), &e2.grad_omega(&theta, cfg.lambda));
        let vals = [
            (
                0,
                e1.scores
                    .chunks(dim)
                    .chain(e2.scores.chunks(dim))
                    .map(linalg::norm)
                    .fold(0.0, f64::max),
            ),
            (1, gd / dw),
            (2, linalg::dist(&e1.fe, &e2.fe) / dw),
            (3, kappa * e1.q_feat.chunks(fs.q).map(linalg::norm).fold(0.0, f64::max)),
            (4, chi_needed(&e1, rc.upsilon, probe.mixing_horizon)),
            (5, crate::mdp::second_eigenvalue_modulus(&e1.chain)),
            (6, sampling::theta_noise_moment(&e1, fs)),
            (7, sampling::omega_noise_sup(&e1, kappa, cfg.lambda)),
            (
                8,
                sampling::greedy_second_moment(&e1, fs, demo_fe, cfg.mu, cfg.lambda, cfg.q_omega, cfg.b_theta),
            ),
            (9, pr.score),
            (10, pr.stationary_tv),
            (11, pr.q_sup),
            (12, pr.entropy_grad),
            (13, e1.entropy.max(e2.entropy)),
        ];
        for (k, v) in vals {
            obs[k] = obs[k].max(v);
        }
    }
    obs[14] = fs.lipschitz_audit(cfg.n_heldout.max(1) * 10, held_seed);
    let t = mc.theory;
    let bounds = [
        ("B_omega", rc.b_omega),
        ("L_omega", t.l_omega),
        ("S_omega", t.s_omega),
        ("B_Q", crate::oracles::q_bound(kappa, fs.rho_g, &fit)),
        ("chi", rc.chi),
        ("upsilon", rc.upsilon),
        ("M_theta", t.m_theta),
        ("M_omega", t.m_omega),
        ("M_G", m_g),
        ("S_pi", rc.s_pi),
        ("L_rho", rc.l_rho),
        ("L_Q", rc.l_q),
        ("S_H", rc.s_h),
        ("B_H", rc.b_h),
        ("rho_g", fs.rho_g),
    ];
    Ok(bounds
        .iter()
        .zip(obs)
        .map(|(&(name, bound), observed)| AuditRow { name, bound, observed })
        .collect())
}

/// Smallest `chi` with `TV_t <= chi upsilon^t` along the worst-case curve.
fn chi_needed(eval: &PolicyEval, upsilon: f64, horizon: usize) -> f64 {
    crate::mdp::worst_case_curve(&eval.chain, horizon)
        .iter()
        .enumerate()
        .map(|(t, d)| {
            if *d == 0.0 {
                0.0
            } else {
                d / libm::pow(upsilon, t as f64)
            }
        })
        .fold(0.0, f64::max)
}

/// Lower bound on the potential along any run, used to sanity check the
/// iteration budget.
pub fn potential_floor(tc: &TheoryConstants) -> f64 {
    objective_lower_bound(tc.rho_g, tc.kappa, tc.mu, tc.lambda, tc.b_h)
}
