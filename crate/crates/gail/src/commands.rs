//! The six subcommands. Each one is a pure function of its configuration:
//! outputs are assembled in memory and written atomically at the end.

use std::f64::consts::SQRT_2;
use std::path::PathBuf;

use gail_core::analysis::{self, GapConfig};
use gail_core::features::build_features;
use gail_core::mdp::{self, PolicyTable};
use gail_core::optimize::{self, Algorithm, AltSgdConfig, PotentialState, StepMetrics, TrainerState};
use gail_core::sampling;
use gail_core::{linalg, FeatureSystem, PolicyEval, SoftmaxPolicy, TabularMDP};
use serde::Serialize;

use crate::config::{ModeKey, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::{self, Checkpoint};

/// Slack allowed on the per-step potential decrease in audited runs.
pub const POTENTIAL_TOL: f64 = 1e-9;

pub struct Problem {
    pub mdp: TabularMDP,
    pub fs: FeatureSystem,
}

impl Problem {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg
            .mdp
            .as_ref()
            .ok_or_else(|| CliError::config("mdp", "an MDP file is required"))?;
        let mdp = formats::read_mdp(path)?;
        let fs = match &cfg.features {
            Some(p) => formats::read_features(p)?,
            None => build_features(
                mdp.n_states,
                mdp.n_actions,
                &cfg.feature_config(),
                cfg.feature_seed.unwrap_or(cfg.seed),
            )?,
        };
        if fs.n_states != mdp.n_states || fs.n_actions != mdp.n_actions {
            return Err(CliError::config("features", "feature tables do not match the MDP"));
        }
        Ok(Problem { mdp, fs })
    }

    fn policy(&self, ck: &Checkpoint) -> Result<SoftmaxPolicy> {
        let p = ck.policy()?;
        p.check(&self.fs)?;
        Ok(p)
    }

    fn eval(&self, p: &SoftmaxPolicy) -> Result<PolicyEval> {
        Ok(PolicyEval::new(&self.mdp, &self.fs, p)?)
    }

    fn true_reward(&self, table: &PolicyTable) -> Result<Option<f64>> {
        match &self.mdp.eval_reward {
            Some(r) => Ok(Some(mdp::average_reward(&self.mdp, table, r)?)),
            None => Ok(None),
        }
    }
}

fn load_expert(cfg: &RunConfig, pb: &Problem) -> Result<PolicyEval> {
    let ck = formats::read_checkpoint(&cfg.expert_path())?;
    pb.eval(&pb.policy(&ck)?)
}

/// Feature expectation the learner matches: exact under the expert policy,
/// or the empirical average of the demonstration file.
fn demo_features(cfg: &RunConfig, pb: &Problem) -> Result<Vec<f64>> {
    match cfg.mode {
        ModeKey::Population => Ok(load_expert(cfg, pb)?.fe),
        ModeKey::Sample => {
            let batch = formats::read_demos(&cfg.demos_path(), &pb.mdp)?;
            Ok(sampling::empirical_feature_expectation(&batch, &pb.fs)?)
        }
    }
}

fn write_all(files: Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
    for (path, bytes) in files {
        formats::atomic_write(&path, &bytes)?;
    }
    Ok(())
}

pub fn demo_gen(cfg: &RunConfig) -> Result<()> {
    let pb = Problem::load(cfg)?;
    let expert = match (&cfg.expert, &pb.mdp.eval_reward) {
        (Some(p), _) => pb.policy(&formats::read_checkpoint(p)?)?,
        (None, Some(r)) => {
            let (actions, _) = mdp::policy_iteration(&pb.mdp, r)?;
            let mut p = gail_core::policy::expert_softmax(&pb.fs, &actions, cfg.expert_margin)?;
            p.temperature = 1.0;
            p
        }
        (None, None) => return Err(CliError::MissingExpert),
    };
    let table = expert.table(&pb.fs)?;
    let batch = sampling::rollout(&pb.mdp, &table, cfg.n_traj, cfg.traj_len, cfg.seed, cfg.burn_in)?;
    if let Some(r) = pb.true_reward(&table)? {
        println!("expert average reward {r:.6}");
    }
    println!("{} trajectories of length {}", batch.n, batch.t_len);
    write_all(vec![
        (cfg.out.join("demos.csv"), formats::demos_bytes(&batch)?),
        (
            cfg.out.join("expert.toml"),
            formats::checkpoint_bytes(&Checkpoint::from_policy(&expert))?,
        ),
    ])
}

#[derive(Serialize)]
struct MetricsRow {
    iter: usize,
    #[serde(rename = "F_exact")]
    f_exact: f64,
    #[serde(rename = "J_running")]
    j_running: Option<f64>,
    #[serde(rename = "I_running")]
    i_running: Option<f64>,
    potential: Option<f64>,
    grad_omega_norm: f64,
    proj_residual: Option<f64>,
    theta_norm: f64,
    avg_true_reward: Option<f64>,
}

impl From<&StepMetrics> for MetricsRow {
    fn from(m: &StepMetrics) -> Self {
        MetricsRow {
            iter: m.iter,
            f_exact: m.f_exact,
            j_running: m.j_running,
            i_running: m.i_running,
            potential: m.potential,
            grad_omega_norm: m.grad_omega_norm,
            proj_residual: m.proj_residual,
            theta_norm: m.theta_norm,
            avg_true_reward: m.avg_true_reward,
        }
    }
}

/// Optimizer settings and audit flag after the theory schedules are applied.
struct Plan {
    opt: AltSgdConfig,
    iters: usize,
    monitor: Option<PotentialState>,
    audit_potential: bool,
}

fn plan(cfg: &RunConfig, pb: &Problem, state: &TrainerState, demo_fe: &[f64]) -> Result<Plan> {
    let mut opt = cfg.optimizer();
    if !cfg.strict_theory {
        eprintln!(
            "warning: step and batch sizes are taken as given and not checked against the convergence conditions"
        );
        return Ok(Plan {
            opt,
            iters: cfg.iters,
            monitor: None,
            audit_potential: false,
        });
    }
    if cfg.reward_updates != 1 {
        return Err(CliError::config(
            "reward_updates",
            "the theory schedules assume one reward step per iteration",
        ));
    }
    let (mdp, fs) = (&pb.mdp, &pb.fs);
    let mc = optimize::measure_constants(mdp, fs, &cfg.probe(), cfg.mu, cfg.lambda, cfg.seed)?;
    let tc = mc.theory;
    match cfg.algo.algorithm() {
        Algorithm::Alternating => {
            let (eta_theta, eta_omega) = optimize::theory_step_sizes(tc.l_omega, tc.s_omega, tc.mu, 0.99)?;
            opt.eta_theta = eta_theta;
            opt.eta_omega = eta_omega;
            let e1 = optimize::initial_potential(state, &opt, tc.l_omega, mdp, fs, demo_fe)?;
            let sched = optimize::alternating_schedule(&tc, cfg.epsilon, 2.0 * e1)?;
            opt.q_theta = sched.config.q_theta;
            opt.q_omega = sched.config.q_omega;
            let iters = if sched.n_iters < cfg.iters as f64 {
                sched.n_iters.ceil() as usize
            } else {
                cfg.iters
            };
            eprintln!(
                "theory schedule: eta_theta {:e}, eta_omega {:e}, batches {} / {}{}, iteration budget {:e}",
                opt.eta_theta,
                opt.eta_omega,
                opt.q_theta,
                opt.q_omega,
                if sched.saturated { " (saturated)" } else { "" },
                sched.n_iters
            );
            // Per-step decrease is deterministic only without sampling noise.
            let audit_potential = opt.exact_gradients || sched.saturated;
            Ok(Plan {
                monitor: Some(PotentialState::new(opt.eta_omega, opt.eta_theta, opt.mu, tc.l_omega)?),
                opt,
                iters,
                audit_potential,
            })
        }
        Algorithm::Greedy => {
            let m_g = optimize::measure_greedy_moment(
                mdp,
                fs,
                &cfg.probe(),
                demo_fe,
                cfg.mu,
                cfg.lambda,
                cfg.q_omega,
                cfg.q_theta,
                cfg.seed,
            )?;
            let c = optimize::greedy_smoothness(&tc);
            let b_f = optimize::greedy_range(tc.rho_g, tc.mu, tc.lambda, tc.b_h);
            let n = cfg.iters.max(1);
            opt.eta_omega = optimize::greedy_step_for_horizon(c, b_f, m_g, n);
            eprintln!(
                "theory schedule: eta_omega {:e}, stationarity bound after {n} iterations {:e}",
                opt.eta_omega,
                optimize::greedy_bound(c, b_f, m_g, n)
            );
            Ok(Plan {
                opt,
                iters: cfg.iters,
                monitor: None,
                audit_potential: false,
            })
        }
    }
}

fn invariant(err: gail_core::Error, iteration: usize) -> CliError {
    match err {
        gail_core::Error::NonFinite { iteration } => CliError::Invariant {
            iteration,
            detail: "non-finite iterate".into(),
        },
        e @ gail_core::Error::BallViolation { .. } => CliError::Invariant {
            iteration,
            detail: e.to_string(),
        },
        e => e.into(),
    }
}

fn checkpoint_of(state: &TrainerState) -> Checkpoint {
    Checkpoint {
        iteration: Some(state.iteration),
        theta: Some(state.theta.clone()),
        ..Checkpoint::from_policy(&state.policy)
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let pb = Problem::load(cfg)?;
    let demo_fe = demo_features(cfg, &pb)?;
    let mut policy = SoftmaxPolicy::zeros(pb.fs.n_actions, pb.fs.d_s);
    policy.temperature = cfg.temperature;
    let mut state = TrainerState::new(policy, vec![0.0; pb.fs.q]);
    let plan = plan(cfg, &pb, &state, &demo_fe)?;
    plan.opt.validate()?;
    if let Some(m) = plan.monitor {
        state = state.with_monitor(m);
    }
    let algo = cfg.algo.algorithm();
    let (mdp, fs) = (&pb.mdp, &pb.fs);

    let mut rows = Vec::with_capacity(plan.iters + 1);
    let mut files = Vec::new();
    let mut last_potential = f64::INFINITY;
    for t in 0..plan.iters {
        let m = match algo {
            Algorithm::Alternating => optimize::alt_sgd_step(&mut state, &plan.opt, mdp, fs, &demo_fe),
            Algorithm::Greedy => optimize::greedy_sgd_step(&mut state, &plan.opt, mdp, fs, &demo_fe),
        }
        .map_err(|e| invariant(e, t))?;
        if let Some(e) = m.potential {
            if plan.audit_potential && e > last_potential + POTENTIAL_TOL {
                return Err(CliError::Invariant {
                    iteration: m.iter,
                    detail: format!("potential rose from {last_potential:e} to {e:e}"),
                });
            }
            last_potential = e;
        }
        rows.push(MetricsRow::from(&m));
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            let path = cfg
                .out
                .join("checkpoints")
                .join(format!("iter_{:06}.toml", state.iteration));
            files.push((path, formats::checkpoint_bytes(&checkpoint_of(&state))?));
        }
    }
    let last = optimize::observe(&state, &plan.opt, algo, mdp, fs, &demo_fe)?;
    rows.push(MetricsRow::from(&last));
    if let Some(r) = last.avg_true_reward {
        println!("final average true reward {r:.6}");
    }
    println!("final F {:.6}, stationarity {:e}", last.f_exact, last.i_value);
    files.push((cfg.out.join("metrics.csv"), formats::csv_bytes(&rows)?));
    files.push((
        cfg.out.join("final.toml"),
        formats::checkpoint_bytes(&checkpoint_of(&state))?,
    ));
    write_all(files)
}

#[derive(Serialize)]
struct MetricValue {
    metric: &'static str,
    value: f64,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let pb = Problem::load(cfg)?;
    let ck = formats::read_checkpoint(&cfg.policy_path())?;
    let learned = pb.eval(&pb.policy(&ck)?)?;
    let expert = load_expert(cfg, &pb)?;
    let demo_fe = demo_features(cfg, &pb)?;
    let opt = cfg.optimizer();
    let t_star = learned.theta_star(cfg.mu, &demo_fe);
    let mut rows = vec![
        MetricValue {
            metric: "r_distance_to_expert",
            value: analysis::exact_r_distance(&pb.fs, &expert.chain, &learned.chain, cfg.kappa),
        },
        MetricValue {
            metric: "objective_best_response",
            value: learned.objective(&t_star, cfg.lambda, cfg.mu, &demo_fe),
        },
        MetricValue {
            metric: "grad_sq_best_response",
            value: optimize::i_term(&learned, &opt, &demo_fe),
        },
        MetricValue {
            metric: "entropy",
            value: learned.entropy,
        },
    ];
    if let Some(theta) = &ck.theta {
        rows.push(MetricValue {
            metric: "objective_checkpoint",
            value: learned.objective(theta, cfg.lambda, cfg.mu, &demo_fe),
        });
    }
    if let (Some(r), Some(re)) = (pb.true_reward(&learned.table)?, pb.true_reward(&expert.table)?) {
        rows.push(MetricValue {
            metric: "avg_true_reward",
            value: r,
        });
        rows.push(MetricValue {
            metric: "expert_avg_true_reward",
            value: re,
        });
        rows.push(MetricValue {
            metric: "reward_ratio",
            value: r / re,
        });
        println!("average true reward {r:.6} (expert {re:.6})");
    }
    write_all(vec![(cfg.out.join("eval.csv"), formats::csv_bytes(&rows)?)])
}

#[derive(Serialize)]
struct GapCsvRow {
    #[serde(rename = "nT")]
    nt: usize,
    seed: u64,
    gap: f64,
    empirical_d: f64,
    exact_d: f64,
}

/// Seeds of the gap experiment, derived from the root seed.
pub fn gap_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.gap_seeds as u64)
        .map(|i| linalg::fingerprint(&[cfg.seed, i], &[]))
        .collect()
}

pub fn gen_gap(cfg: &RunConfig) -> Result<()> {
    let pb = Problem::load(cfg)?;
    let expert = load_expert(cfg, &pb)?;
    let learned = match &cfg.learned {
        Some(p) => pb.policy(&formats::read_checkpoint(p)?)?.table(&pb.fs)?,
        None => PolicyTable::uniform(pb.mdp.n_states, pb.mdp.n_actions),
    };
    let gc = GapConfig {
        kappa: cfg.kappa,
        t_len: cfg.traj_len,
        burn_in: cfg.burn_in,
    };
    let table = analysis::generalization_gap_experiment(
        &pb.mdp,
        &pb.fs,
        &expert.table,
        &learned,
        &gc,
        &cfg.nt_grid,
        &gap_seeds(cfg),
    )?;
    for (nt, g) in &table.medians {
        println!("nT {nt}: median gap {g:e}");
    }
    println!("log-log slope {:.4}", table.slope);
    let rows: Vec<GapCsvRow> = table
        .rows
        .iter()
        .map(|r| GapCsvRow {
            nt: r.nt,
            seed: r.seed,
            gap: r.gap,
            empirical_d: r.empirical_d,
            exact_d: r.exact_d,
        })
        .collect();
    write_all(vec![(cfg.out.join("gen_gap.csv"), formats::csv_bytes(&rows)?)])
}

#[derive(Serialize)]
pub struct BoundRow {
    #[serde(rename = "nT")]
    pub nt: usize,
    pub bound: f64,
    pub b: usize,
    pub zeta: f64,
}

/// Generalization bound for each grid size, with mixing constants from the
/// config or fitted on the expert chain.
pub fn bound_rows(cfg: &RunConfig, pb: &Problem, expert: &PolicyEval) -> Result<Vec<BoundRow>> {
    let (beta0, beta1) = match (cfg.beta0, cfg.beta1) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            let c = mdp::beta_mixing_curve(&expert.chain, cfg.mixing_horizon);
            (c.beta0, c.beta1)
        }
    };
    let fs = &pb.fs;
    let b_r = SQRT_2 * cfg.kappa * fs.rho_g;
    let log_cover = |eps: f64| analysis::covering_bound_kernel(cfg.kappa, fs.rho_g, fs.q, eps);
    cfg.nt_grid
        .iter()
        .map(|&nt| {
            let t = cfg.traj_len.min(nt);
            let b = analysis::generalization_bound(
                b_r,
                log_cover,
                nt / t,
                t,
                cfg.delta,
                beta0,
                beta1,
                cfg.alpha,
                cfg.epsilon_opt,
            )?;
            Ok(BoundRow {
                nt,
                bound: b.value,
                b: b.block_size,
                zeta: b.zeta,
            })
        })
        .collect()
}

pub fn bounds(cfg: &RunConfig) -> Result<()> {
    let pb = Problem::load(cfg)?;
    let expert = load_expert(cfg, &pb)?;
    let rows = bound_rows(cfg, &pb, &expert)?;
    for r in &rows {
        println!("nT {}: bound {:e} (block {}, zeta {:.3})", r.nt, r.bound, r.b, r.zeta);
    }
    write_all(vec![(cfg.out.join("bounds.csv"), formats::csv_bytes(&rows)?)])
}

#[derive(Serialize)]
struct AuditCsvRow {
    constant: &'static str,
    bound: f64,
    observed: f64,
    ok: bool,
}

pub fn audit(cfg: &RunConfig) -> Result<()> {
    let pb = Problem::load(cfg)?;
    let demo_fe = demo_features(cfg, &pb)?;
    let rows = optimize::audit_constants(&pb.mdp, &pb.fs, &demo_fe, &cfg.audit(), cfg.seed)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.ok()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} constants dominate the held-out observations", rows.len());
    } else {
        println!("observed values exceed the bound for: {}", failed.join(", "));
    }
    let out: Vec<AuditCsvRow> = rows
        .iter()
        .map(|r| AuditCsvRow {
            constant: r.name,
            bound: r.bound,
            observed: r.observed,
            ok: r.ok(),
        })
        .collect();
    write_all(vec![(cfg.out.join("audit.csv"), formats::csv_bytes(&out)?)])
}
