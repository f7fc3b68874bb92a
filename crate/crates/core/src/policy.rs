//! Log-linear softmax policies over state features.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::features::FeatureSystem;
use crate::linalg;
use crate::mdp::{self, PolicyChain, PolicyTable, TabularMDP};
use crate::oracles::PolicyEval;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// `pi(a|s) = softmax_a(omega_a . psi_s / temperature)`. `omega` is stored
/// row-major as `n_actions x d_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    pub n_actions: usize,
    pub d_s: usize,
    pub omega: Vec<f64>,
    pub temperature: f64,
}

impl SoftmaxPolicy {
    pub fn new(n_actions: usize, d_s: usize, omega: Vec<f64>) -> Result<Self> {
        if omega.len() != n_actions * d_s {
            return Err(Error::DimensionMismatch {
                what: "omega",
                expected: n_actions * d_s,
                found: omega.len(),
            });
        }
        Ok(SoftmaxPolicy {
            n_actions,
            d_s,
            omega,
            temperature: 1.0,
        })
    }

    pub fn zeros(n_actions: usize, d_s: usize) -> Self {
        SoftmaxPolicy {
            n_actions,
            d_s,
            omega: vec![0.0; n_actions * d_s],
            temperature: 1.0,
        }
    }

    pub fn with_omega(&self, omega: Vec<f64>) -> Self {
        SoftmaxPolicy { omega, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn check(&self, fs: &FeatureSystem) -> Result<()> {
        if fs.d_s != self.d_s {
            return Err(Error::DimensionMismatch {
                what: "state feature dimension",
                expected: fs.d_s,
                found: self.d_s,
            });
        }
        if fs.n_actions != self.n_actions {
            return Err(Error::DimensionMismatch {
                what: "action count",
                expected: fs.n_actions,
                found: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn logits(&self, fs: &FeatureSystem, s: usize) -> Vec<f64> {
        let psi = fs.psi_s(s);
        (0..self.n_actions)
            .map(|a| linalg::dot(&self.omega[a * self.d_s..(a + 1) * self.d_s], psi) / self.temperature)
            .collect()
    }

    pub fn probs(&self, fs: &FeatureSystem, s: usize) -> Vec<f64> {
        let z = self.logits(fs, s);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = z.iter().map(|v| libm::exp(v - m)).collect();
        let tot: f64 = p.iter().sum();
        linalg::scale(1.0 / tot, &mut p);
        p
    }

    /// Log-probabilities for state `s`, computed without forming `pi`.
    pub fn log_probs(&self, fs: &FeatureSystem, s: usize) -> Vec<f64> {
        let z = self.logits(fs, s);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(z.iter().map(|v| libm::exp(v - m)).sum::<f64>());
        z.iter().map(|v| v - lse).collect()
    }

    pub fn table(&self, fs: &FeatureSystem) -> Result<PolicyTable> {
        self.check(fs)?;
        let mut probs = Vec::with_capacity(fs.n_states * self.n_actions);
        for s in 0..fs.n_states {
            probs.extend(self.probs(fs, s));
        }
        PolicyTable::new(fs.n_states, self.n_actions, probs)
    }

    /// `grad_omega log pi(a|s)`: block `a'` equals
    /// `(1[a' = a] - pi(a'|s)) psi_s / temperature`.
    pub fn log_prob_grad(&self, fs: &FeatureSystem, s: usize, a: usize) -> Result<Vec<f64>> {
        self.check(fs)?;
        if s >= fs.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                len: fs.n_states,
            });
        }
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                len: self.n_actions,
            });
        }
        let mut out = vec![0.0; self.dim()];
        score_into(&self.probs(fs, s), fs.psi_s(s), a, self.temperature, &mut out);
        Ok(out)
    }

    /// `sqrt(2) max_s ||psi_s|| / temperature`, or zero with one action.
    pub fn score_bound(&self, fs: &FeatureSystem) -> f64 {
        if self.n_actions < 2 {
            return 0.0;
        }
        let m = (0..fs.n_states).map(|s| linalg::norm(fs.psi_s(s))).fold(0.0, f64::max);
        libm::sqrt(2.0) * m / self.temperature
    }
}

pub(crate) fn score_into(probs: &[f64], psi: &[f64], a: usize, temperature: f64, out: &mut [f64]) {
    let d = psi.len();
    for (b, &p) in probs.iter().enumerate() {
        let coef = (if b == a { 1.0 } else { 0.0 } - p) / temperature;
        for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(psi) {
            *o = coef * v;
        }
    }
}

/// Stationary conditional entropy `E_rho[-log pi(a|s)]`.
pub fn entropy(policy: &SoftmaxPolicy, fs: &FeatureSystem, chain: &PolicyChain) -> Result<f64> {
    let table = policy.table(fs)?;
    if table.fingerprint != chain.policy_fingerprint {
        return Err(Error::ChainMismatch);
    }
    let na = policy.n_actions;
    let mut h = 0.0;
    for s in 0..fs.n_states {
        let lp = policy.log_probs(fs, s);
        for a in 0..na {
            h -= chain.stationary[s * na + a] * lp[a];
        }
    }
    Ok(h)
}

/// Softens a deterministic action choice into the softmax class: the logit
/// of the chosen action exceeds the others by `margin` in every state when
/// the state features allow it (minimum-norm least squares).
pub fn expert_softmax(fs: &FeatureSystem, actions: &[usize], margin: f64) -> Result<SoftmaxPolicy> {
    if actions.len() != fs.n_states {
        return Err(Error::DimensionMismatch {
            what: "expert actions",
            expected: fs.n_states,
            found: actions.len(),
        });
    }
    let (ns, na, d) = (fs.n_states, fs.n_actions, fs.d_s);
    let psi = DMatrix::from_row_slice(ns, d, &fs.psi_s);
    let pinv = psi.pseudo_inverse(1e-12).map_err(|_| Error::ExpertNotRepresentable)?;
    let mut omega = vec![0.0; na * d];
    for a in 0..na {
        let target = DVector::from_iterator(ns, actions.iter().map(|&b| if b == a { margin } else { 0.0 }));
        let w = &pinv * target;
        omega[a * d..(a + 1) * d].copy_from_slice(w.as_slice());
    }
    let pol = SoftmaxPolicy::new(na, d, omega)?;
    for (s, &a_star) in actions.iter().enumerate() {
        let z = pol.logits(fs, s);
        if z.iter().enumerate().any(|(b, v)| b != a_star && *v >= z[a_star]) {
            return Err(Error::ExpertNotRepresentable);
        }
    }
    Ok(pol)
}

/// Constants describing how the policy class behaves on one MDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityConstants {
    pub b_omega: f64,
    pub s_pi: f64,
    pub l_rho: f64,
    pub l_q: f64,
    pub b_h: f64,
    pub s_h: f64,
    pub chi: f64,
    pub upsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub n_probe: usize,
    pub radius: f64,
    pub safety: f64,
    /// Perturbation size for the local half of the probe pairs.
    pub near_scale: f64,
    pub mixing_horizon: usize,
    /// Reward ball radius used to scale the Q sensitivity.
    pub kappa: f64,
    pub temperature: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_probe: 200,
            radius: 5.0,
            safety: 1.5,
            near_scale: 1e-3,
            mixing_horizon: 200,
            kappa: 1.0,
            temperature: 1.0,
        }
    }
}

/// Probe pair `i`: `omega` uniform in the radius ball, the partner either
/// independent (even `i`) or a small perturbation (odd `i`).
pub fn probe_pair(dim: usize, cfg: &ProbeConfig, seed: u64, i: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, Purpose::Probe, i as u64);
    let mut w = rng::unit_ball(&mut r, dim);
    linalg::scale(cfg.radius, &mut w);
    let w2 = if i % 2 == 0 {
        let mut v = rng::unit_ball(&mut r, dim);
        linalg::scale(cfg.radius, &mut v);
        v
    } else {
        let mut v = w.clone();
        linalg::axpy(1.0, &rng::sphere(&mut r, dim, cfg.near_scale), &mut v);
        v
    };
    (w, w2)
}

/// Ratios `||change|| / ||omega - omega'||` for one probe pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProbeRatios {
    pub score: f64,
    pub stationary_tv: f64,
    pub q_sup: f64,
    pub entropy_grad: f64,
}

pub fn probe_ratios(a: &PolicyEval, b: &PolicyEval, kappa: f64) -> ProbeRatios {
    let dw = linalg::dist(&a.policy.omega, &b.policy.omega);
    if dw == 0.0 {
        return ProbeRatios::default();
    }
    let n = a.chain.n_pairs();
    let dim = a.policy.dim();
    let q = a.q;
    let mut score: f64 = 0.0;
    let mut q_sup: f64 = 0.0;
    for x in 0..n {
        score = score.max(linalg::dist(
            &a.scores[x * dim..(x + 1) * dim],
            &b.scores[x * dim..(x + 1) * dim],
        ));
        q_sup = q_sup.max(linalg::dist(
            &a.q_feat[x * q..(x + 1) * q],
            &b.q_feat[x * q..(x + 1) * q],
        ));
    }
    ProbeRatios {
        score: score / dw,
        stationary_tv: linalg::tv_distance(&a.chain.stationary, &b.chain.stationary) / dw,
        q_sup: kappa * q_sup / dw,
        entropy_grad: linalg::dist(&a.grad_entropy, &b.grad_entropy) / dw,
    }
}

/// Estimates the regularity constants by probing random parameter pairs.
/// `b_omega` and `b_h` are analytic; the smoothness constants are the
/// largest observed ratios times `cfg.safety`; `(chi, upsilon)` is the
/// worst mixing envelope over all probed policies.
pub fn estimate_regularity(
    mdp: &TabularMDP,
    fs: &FeatureSystem,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<RegularityConstants> {
    if cfg.n_probe == 0 {
        return Err(Error::InvalidArgument("n_probe must be positive"));
    }
    let mut base = SoftmaxPolicy::zeros(fs.n_actions, fs.d_s);
    base.temperature = cfg.temperature;
    let dim = base.dim();
    let mut worst = ProbeRatios::default();
    let mut chi: f64 = 0.0;
    let mut upsilon: f64 = 0.0;
    for i in 0..cfg.n_probe {
        let (w1, w2) = probe_pair(dim, cfg, seed, i);
        let e1 = PolicyEval::new(mdp, fs, &base.with_omega(w1))?;
        let e2 = PolicyEval::new(mdp, fs, &base.with_omega(w2))?;
        let r = probe_ratios(&e1, &e2, cfg.kappa);
        worst.score = worst.score.max(r.score);
        worst.stationary_tv = worst.stationary_tv.max(r.stationary_tv);
        worst.q_sup = worst.q_sup.max(r.q_sup);
        worst.entropy_grad = worst.entropy_grad.max(r.entropy_grad);
        for e in [&e1, &e2] {
            let fit = mdp::worst_case_mixing(&e.chain, cfg.mixing_horizon);
            chi = chi.max(fit.chi);
            upsilon = upsilon.max(fit.upsilon);
        }
    }
    Ok(RegularityConstants {
        b_omega: base.score_bound(fs),
        s_pi: cfg.safety * worst.score,
        l_rho: cfg.safety * worst.stationary_tv,
        l_q: cfg.safety * worst.q_sup,
        b_h: libm::log(fs.n_actions as f64),
        s_h: cfg.safety * worst.entropy_grad,
        chi,
        upsilon,
    })
}
