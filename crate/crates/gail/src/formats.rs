//! On-disk formats: TOML for MDPs, feature maps and policy checkpoints,
//! CSV for demonstrations and run outputs. Every write goes through a
//! temporary file in the target directory and an atomic rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use gail_core::sampling::TrajectoryBatch;
use gail_core::{FeatureSystem, SoftmaxPolicy, TabularMDP};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::parse(path, e))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| CliError::parse(path, e))?;
    atomic_write(path, text.as_bytes())
}

fn flatten(rows: &[Vec<f64>], width: usize, path: &Path, what: &str) -> Result<Vec<f64>> {
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(CliError::parse(
            path,
            format!("{what} row {i} has {} entries, expected {width}", rows[i].len()),
        ));
    }
    Ok(rows.concat())
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

/// `transition` has one row per `(s, a)`, ordered `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_reward: Option<Vec<f64>>,
    pub transition: Vec<Vec<f64>>,
}

pub fn read_mdp(path: &Path) -> Result<TabularMDP> {
    let f: MdpFile = read_toml(path)?;
    let transition = flatten(&f.transition, f.n_states, path, "transition")?;
    TabularMDP::new(f.n_states, f.n_actions, transition, f.initial_dist, f.eval_reward)
        .map_err(|e| CliError::parse(path, e))
}

pub fn write_mdp(path: &Path, mdp: &TabularMDP) -> Result<()> {
    write_toml(
        path,
        &MdpFile {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            initial_dist: mdp.initial_dist.clone(),
            eval_reward: mdp.eval_reward.clone(),
            transition: rows(&mdp.transition, mdp.n_states),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub q: usize,
    pub g_phase: Vec<f64>,
    pub psi_s: Vec<Vec<f64>>,
    pub psi_a: Vec<Vec<f64>>,
    pub g_weights: Vec<Vec<f64>>,
}

pub fn read_features(path: &Path) -> Result<FeatureSystem> {
    let f: FeaturesFile = read_toml(path)?;
    FeatureSystem::new(
        f.n_states,
        f.n_actions,
        f.d_s,
        f.d_a,
        flatten(&f.psi_s, f.d_s, path, "psi_s")?,
        flatten(&f.psi_a, f.d_a, path, "psi_a")?,
        f.q,
        flatten(&f.g_weights, f.d_s + f.d_a, path, "g_weights")?,
        f.g_phase,
    )
    .map_err(|e| CliError::parse(path, e))
}

pub fn write_features(path: &Path, fs: &FeatureSystem) -> Result<()> {
    write_toml(
        path,
        &FeaturesFile {
            n_states: fs.n_states,
            n_actions: fs.n_actions,
            d_s: fs.d_s,
            d_a: fs.d_a,
            q: fs.q,
            g_phase: fs.g_phase.clone(),
            psi_s: rows(&fs.psi_s, fs.d_s),
            psi_a: rows(&fs.psi_a, fs.d_a),
            g_weights: rows(&fs.g_weights, fs.d_s + fs.d_a),
        },
    )
}

/// Policy parameters, optionally with the reward parameter and iteration of
/// a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub n_actions: usize,
    pub d_s: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub omega: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_policy(policy: &SoftmaxPolicy) -> Self {
        Checkpoint {
            n_actions: policy.n_actions,
            d_s: policy.d_s,
            temperature: policy.temperature,
            iteration: None,
            omega: policy.omega.clone(),
            theta: None,
        }
    }

    pub fn policy(&self) -> gail_core::Result<SoftmaxPolicy> {
        let mut p = SoftmaxPolicy::new(self.n_actions, self.d_s, self.omega.clone())?;
        p.temperature = self.temperature;
        Ok(p)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_toml(path)
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    toml::to_string(ck)
        .map(String::into_bytes)
        .map_err(|e| CliError::parse("<checkpoint>", e))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_toml(path, ck)
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoRow {
    traj: usize,
    t: usize,
    state: usize,
    action: usize,
}

pub fn demos_bytes(batch: &TrajectoryBatch) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..batch.n {
        for t in 0..batch.t_len {
            let k = i * batch.t_len + t;
            w.serialize(DemoRow {
                traj: i,
                t,
                state: batch.states[k],
                action: batch.actions[k],
            })
            .map_err(|e| CliError::parse("<demos>", e))?;
        }
    }
    w.into_inner().map_err(|e| CliError::parse("<demos>", e))
}

/// Reads a demonstration CSV. Rows must list trajectories `0..n` in order,
/// each with steps `0..T` for a common `T`.
pub fn read_demos(path: &Path, mdp: &TabularMDP) -> Result<TrajectoryBatch> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::parse(path, e))?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut lens: Vec<usize> = Vec::new();
    for (line, row) in r.deserialize::<DemoRow>().enumerate() {
        let row = row.map_err(|e| CliError::parse(path, e))?;
        let bad = |what: &str| CliError::parse(path, format!("data row {}: {what}", line + 1));
        if row.state >= mdp.n_states || row.action >= mdp.n_actions {
            return Err(bad("state or action out of range"));
        }
        if row.t == 0 && row.traj == lens.len() {
            lens.push(0);
        }
        let n = lens.len();
        match lens.last_mut() {
            Some(len) if row.traj + 1 == n && row.t == *len => *len += 1,
            _ => return Err(bad("rows out of order")),
        }
        states.push(row.state);
        actions.push(row.action);
    }
    let t_len = match lens.first() {
        Some(&t) => t,
        None => return Err(CliError::parse(path, "no demonstration rows")),
    };
    if lens.iter().any(|&l| l != t_len) {
        return Err(CliError::parse(path, "trajectories have different lengths"));
    }
    Ok(TrajectoryBatch {
        n: lens.len(),
        t_len,
        states,
        actions,
        seed: 0,
    })
}

/// Serializes rows with a header into CSV bytes.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::parse("<csv>", e))?;
    }
    w.into_inner().map_err(|e| CliError::parse("<csv>", e))
}
