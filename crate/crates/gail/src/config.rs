//! Run configuration: one flat TOML table shared by every subcommand.
//! Relative paths resolve against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use gail_core::features::FeatureConfig;
use gail_core::optimize::{Algorithm, AltSgdConfig, AuditConfig, DemoMode};
use gail_core::policy::ProbeConfig;
use gail_core::sampling::{PairSource, QEstimate, SamplerConfig};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKey {
    Alt,
    Greedy,
}

impl AlgoKey {
    pub fn algorithm(self) -> Algorithm {
        match self {
            AlgoKey::Alt => Algorithm::Alternating,
            AlgoKey::Greedy => Algorithm::Greedy,
        }
    }
}

impl std::str::FromStr for AlgoKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "alt" => Ok(AlgoKey::Alt),
            "greedy" => Ok(AlgoKey::Greedy),
            other => Err(format!("unknown algorithm `{other}`, expected alt or greedy")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKey {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSourceKey {
    Stationary,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QEstimateKey {
    Exact,
    Rollout,
}

/// Every key the driver understands. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub strict_theory: bool,

    pub mdp: Option<PathBuf>,
    /// Feature file; when absent features are drawn from `feature_seed`.
    pub features: Option<PathBuf>,
    pub feature_seed: Option<u64>,
    pub d_s: usize,
    pub d_a: usize,
    pub q: usize,
    pub bandwidth: f64,
    pub temperature: f64,

    /// Expert checkpoint. `demo-gen` derives one from `eval_reward` when
    /// absent; other commands default to `<out>/expert.toml`.
    pub expert: Option<PathBuf>,
    pub expert_margin: f64,
    pub demos: Option<PathBuf>,
    pub n_traj: usize,
    pub traj_len: usize,
    pub burn_in: usize,

    pub algo: AlgoKey,
    pub mode: ModeKey,
    pub kappa: f64,
    pub mu: f64,
    pub lambda: f64,
    pub eta_theta: f64,
    pub eta_omega: f64,
    pub q_theta: u64,
    pub q_omega: u64,
    pub iters: usize,
    pub reward_updates: usize,
    pub exact_gradients: bool,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub pair_source: PairSourceKey,
    pub q_estimate: QEstimateKey,
    pub rollout_horizon: usize,
    /// Target stationarity for the theory schedules.
    pub epsilon: f64,

    pub n_probe: usize,
    pub probe_radius: f64,
    pub safety: f64,
    pub mixing_horizon: usize,
    pub n_heldout: usize,

    /// Policy checkpoint to evaluate; defaults to `<out>/final.toml`.
    pub policy: Option<PathBuf>,
    /// Learned policy for `gen-gap`; the uniform policy when absent.
    pub learned: Option<PathBuf>,
    pub nt_grid: Vec<usize>,
    pub gap_seeds: usize,
    pub delta: f64,
    pub epsilon_opt: f64,
    pub beta0: Option<f64>,
    pub beta1: Option<f64>,
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let alt = AltSgdConfig::default();
        let probe = ProbeConfig::default();
        let fc = FeatureConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            strict_theory: false,
            mdp: None,
            features: None,
            feature_seed: None,
            d_s: fc.d_s,
            d_a: fc.d_a,
            q: fc.q,
            bandwidth: fc.bandwidth,
            temperature: 1.0,
            expert: None,
            expert_margin: 4.0,
            demos: None,
            n_traj: 500,
            traj_len: 200,
            burn_in: 0,
            algo: AlgoKey::Alt,
            mode: ModeKey::Population,
            kappa: alt.kappa,
            mu: alt.mu,
            lambda: alt.lambda,
            eta_theta: alt.eta_theta,
            eta_omega: alt.eta_omega,
            q_theta: alt.q_theta,
            q_omega: alt.q_omega,
            iters: alt.max_iters,
            reward_updates: alt.reward_updates,
            exact_gradients: false,
            checkpoint_every: 0,
            pair_source: PairSourceKey::Stationary,
            q_estimate: QEstimateKey::Exact,
            rollout_horizon: 50,
            epsilon: 1e-2,
            n_probe: probe.n_probe,
            probe_radius: probe.radius,
            safety: probe.safety,
            mixing_horizon: probe.mixing_horizon,
            n_heldout: 200,
            policy: None,
            learned: None,
            nt_grid: vec![1_000, 10_000, 100_000],
            gap_seeds: 20,
            delta: 0.05,
            epsilon_opt: 0.0,
            beta0: None,
            beta1: None,
            alpha: 1.0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub algo: Option<AlgoKey>,
    pub strict_theory: bool,
    pub reward_updates: Option<usize>,
    pub iters: Option<usize>,
}

impl RunConfig {
    /// Loads, resolves relative paths, applies overrides and validates.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::parse(p, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        cfg.resolve(&base);
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if let Some(a) = ov.algo {
            cfg.algo = a;
        }
        cfg.strict_theory |= ov.strict_theory;
        if let Some(k) = ov.reward_updates {
            cfg.reward_updates = k;
        }
        if let Some(n) = ov.iters {
            cfg.iters = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out);
        for p in [
            &mut self.mdp,
            &mut self.features,
            &mut self.expert,
            &mut self.demos,
            &mut self.policy,
            &mut self.learned,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(key, format!("must be positive and finite, got {v}")))
            }
        }
        fn nonneg(key: &'static str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(
                    key,
                    format!("must be nonnegative and finite, got {v}"),
                ))
            }
        }
        fn at_least_one(key: &'static str, v: usize) -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(CliError::config(key, "must be at least 1"))
            }
        }
        at_least_one("d_s", self.d_s)?;
        at_least_one("d_a", self.d_a)?;
        at_least_one("q", self.q)?;
        positive("bandwidth", self.bandwidth)?;
        positive("temperature", self.temperature)?;
        positive("expert_margin", self.expert_margin)?;
        at_least_one("n_traj", self.n_traj)?;
        at_least_one("traj_len", self.traj_len)?;
        positive("kappa", self.kappa)?;
        nonneg("mu", self.mu)?;
        nonneg("lambda", self.lambda)?;
        nonneg("eta_theta", self.eta_theta)?;
        nonneg("eta_omega", self.eta_omega)?;
        if self.q_theta == 0 {
            return Err(CliError::config("q_theta", "must be at least 1"));
        }
        if self.q_omega == 0 {
            return Err(CliError::config("q_omega", "must be at least 1"));
        }
        at_least_one("reward_updates", self.reward_updates)?;
        if self.algo == AlgoKey::Greedy && !(self.mu > 0.0) {
            return Err(CliError::config("mu", "greedy updates need mu > 0"));
        }
        if self.q_estimate == QEstimateKey::Rollout {
            at_least_one("rollout_horizon", self.rollout_horizon)?;
        }
        positive("epsilon", self.epsilon)?;
        at_least_one("n_probe", self.n_probe)?;
        positive("probe_radius", self.probe_radius)?;
        if !(self.safety >= 1.0 && self.safety.is_finite()) {
            return Err(CliError::config("safety", "must be at least 1"));
        }
        at_least_one("mixing_horizon", self.mixing_horizon)?;
        at_least_one("n_heldout", self.n_heldout)?;
        if self.nt_grid.is_empty() {
            return Err(CliError::config("nt_grid", "must not be empty"));
        }
        for &nt in &self.nt_grid {
            if nt == 0 || (nt >= self.traj_len && nt % self.traj_len != 0) {
                return Err(CliError::config(
                    "nt_grid",
                    format!("{nt} is not positive or not a multiple of traj_len = {}", self.traj_len),
                ));
            }
        }
        at_least_one("gap_seeds", self.gap_seeds)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::config("delta", "must lie in (0, 1)"));
        }
        nonneg("epsilon_opt", self.epsilon_opt)?;
        if let Some(b) = self.beta0 {
            positive("beta0", b)?;
        }
        if let Some(b) = self.beta1 {
            positive("beta1", b)?;
        }
        if self.beta0.is_some() != self.beta1.is_some() {
            return Err(CliError::config("beta1", "beta0 and beta1 must be given together"));
        }
        positive("alpha", self.alpha)?;
        Ok(())
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            d_s: self.d_s,
            d_a: self.d_a,
            q: self.q,
            bandwidth: self.bandwidth,
            pin_zero: None,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            n_probe: self.n_probe,
            radius: self.probe_radius,
            safety: self.safety,
            mixing_horizon: self.mixing_horizon,
            kappa: self.kappa,
            temperature: self.temperature,
            ..ProbeConfig::default()
        }
    }

    pub fn optimizer(&self) -> AltSgdConfig {
        AltSgdConfig {
            eta_theta: self.eta_theta,
            eta_omega: self.eta_omega,
            q_theta: self.q_theta,
            q_omega: self.q_omega,
            kappa: self.kappa,
            mu: self.mu,
            lambda: self.lambda,
            max_iters: self.iters,
            mode: match self.mode {
                ModeKey::Population => DemoMode::Population,
                ModeKey::Sample => DemoMode::Sample,
            },
            reward_updates: self.reward_updates,
            exact_gradients: self.exact_gradients,
            sampler: SamplerConfig {
                source: match self.pair_source {
                    PairSourceKey::Stationary => PairSource::Stationary,
                    PairSourceKey::Trajectory => PairSource::Trajectory { burn_in: self.burn_in },
                },
                q_estimate: match self.q_estimate {
                    QEstimateKey::Exact => QEstimate::Exact,
                    QEstimateKey::Rollout => QEstimate::Rollout {
                        horizon: self.rollout_horizon,
                    },
                },
            },
            seed: self.seed,
        }
    }

    pub fn audit(&self) -> AuditConfig {
        AuditConfig {
            probe: self.probe(),
            mu: self.mu,
            lambda: self.lambda,
            q_omega: self.q_omega,
            b_theta: self.q_theta,
            n_heldout: self.n_heldout,
        }
    }

    pub fn expert_path(&self) -> PathBuf {
        self.expert.clone().unwrap_or_else(|| self.out.join("expert.toml"))
    }

    pub fn demos_path(&self) -> PathBuf {
        self.demos.clone().unwrap_or_else(|| self.out.join("demos.csv"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.policy.clone().unwrap_or_else(|| self.out.join("final.toml"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::parse("<test>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn defaults_validate() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.kappa, 1.0);
        assert_eq!(cfg.mu, 0.3);
        assert_eq!(cfg.n_traj, 500);
        assert_eq!(cfg.q_theta, 8192);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse("kapa = 2.0").unwrap_err();
        assert!(err.to_string().contains("kapa"), "{err}");
    }

    #[test]
    fn validation_names_key() {
        for (text, key) in [
            ("kappa = -1.0", "kappa"),
            ("mu = -0.1", "mu"),
            ("q_omega = 0", "q_omega"),
            ("reward_updates = 0", "reward_updates"),
            ("delta = 1.5", "delta"),
            ("nt_grid = [300]", "nt_grid"),
            ("algo = \"greedy\"\nmu = 0.0", "mu"),
            ("beta0 = 1.0", "beta1"),
        ] {
            match parse(text) {
                Err(CliError::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_win_and_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 3\niters = 10\nmdp = \"m.toml\"\n").unwrap();
        let ov = Overrides {
            seed: Some(9),
            iters: Some(0),
            algo: Some(AlgoKey::Greedy),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(Some(&p), &ov).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.iters, 0);
        assert_eq!(cfg.algo, AlgoKey::Greedy);
        assert_eq!(cfg.mdp.unwrap(), dir.path().join("m.toml"));
        assert_eq!(cfg.out, dir.path().join("out"));
    }
}
