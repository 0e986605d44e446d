//! Single-experiment driver: simulate data, run the configured filter,
//! emit artifacts (runrecord.csv, diagnostics.csv, marginals, manifest).
//!
//! Artifacts are written atomically (temp file + rename) and are
//! byte-identical across runs with the same config and seed, for any
//! worker count. Wall-clock time lives only in the in-memory record and
//! the CLI's stderr log, never in the artifacts.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::engine::PfConfig;
use crate::error::Result;
use crate::streams::{derive_seed, StreamRole};

use super::config::ExperimentConfig;
use super::kernels::{run_filter, RunOutput};
use super::models::build_model;

/// Everything one run produced, plus provenance.
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub output: RunOutput,
    pub trajectory: crate::ssm::Trajectory,
    pub wall_clock: Duration,
    pub config_sha256: String,
    pub data_seed: u64,
    pub filter_seed: u64,
    pub d_x: usize,
}

impl RunRecord {
    pub fn collapsed(&self) -> bool {
        self.output.collapsed_at.is_some()
    }
}

/// SHA-256 hex of the canonical config JSON.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Run the configured experiment in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let data_seed = derive_seed(config.seed, StreamRole::Simulate, 0);
    let filter_seed = derive_seed(config.seed, StreamRole::Replicate, 0);
    let n_steps = config.steps();
    let model = build_model(config.model, config.delta)?;
    let traj = model.simulate(n_steps, data_seed);
    let mut pf_cfg = PfConfig::new(config.n_particles, n_steps, filter_seed);
    pf_cfg.policy = config.resample;
    let keep_times = config.marginal_times();
    let output = run_filter(
        &model,
        &traj.observations,
        config.filter,
        &pf_cfg,
        config.bridge_steps(),
        &keep_times,
        &config.marginal_components(),
        config.dump_paths,
    )?;
    Ok(RunRecord {
        config: config.clone(),
        output,
        trajectory: traj,
        wall_clock: start.elapsed(),
        config_sha256: config_hash(config)?,
        data_seed,
        filter_seed,
        d_x: model.d_x(),
    })
}

/// Render runrecord.csv: `n,ess,resampled,mean_1..mean_dx,var_1..var_dx`.
pub fn runrecord_csv(record: &RunRecord) -> String {
    let d_x = record.d_x;
    let mut out = String::from("n,ess,resampled");
    for i in 1..=d_x {
        out.push_str(&format!(",mean_{i}"));
    }
    for i in 1..=d_x {
        out.push_str(&format!(",var_{i}"));
    }
    out.push('\n');
    for (k, diag) in record.output.diags.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}",
            diag.n,
            diag.ess,
            if diag.resampled { 1 } else { 0 }
        ));
        for v in record.output.means[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        for v in record.output.vars[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn marginals_csv(cloud: &super::kernels::MarginalCloud) -> String {
    let mut out = String::new();
    for c in &cloud.components {
        out.push_str(&format!("x_{c},"));
    }
    out.push_str("weight\n");
    for i in 0..cloud.weights.len() {
        for vals in &cloud.values {
            out.push_str(&format!("{},", vals[i]));
        }
        out.push_str(&format!("{}\n", cloud.weights[i]));
    }
    out
}

fn manifest_json(record: &RunRecord) -> Result<String> {
    let log_evidence = if record.output.log_evidence.is_finite() {
        serde_json::json!(record.output.log_evidence)
    } else {
        serde_json::Value::Null
    };
    let value = serde_json::json!({
        "schema_version": 1,
        "config": record.config,
        "config_sha256": record.config_sha256,
        "data_seed": record.data_seed,
        "filter_seed": record.filter_seed,
        "d_x": record.d_x,
        "n_steps": record.config.steps(),
        "collapsed_at": record.output.collapsed_at,
        "log_evidence": log_evidence,
    });
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Run and write all artifacts into `out_dir`. Returns the record and the
/// paths written.
pub fn run_experiment_to_dir(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(RunRecord, Vec<PathBuf>)> {
    let record = run_experiment(config)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let rr = out_dir.join("runrecord.csv");
    write_atomic(&rr, runrecord_csv(&record).as_bytes())?;
    written.push(rr);

    let diag = out_dir.join("diagnostics.csv");
    let mut buf = Vec::new();
    crate::engine::write_diagnostics_csv(&record.output.diags, &mut buf)?;
    write_atomic(&diag, &buf)?;
    written.push(diag);

    // Data set used by the run, with its seed in a sidecar manifest.
    let traj_path = out_dir.join("trajectory.csv");
    crate::ssm::export_trajectory(&record.trajectory, record.data_seed, &traj_path)?;
    written.push(traj_path.clone());
    written.push(traj_path.with_extension("manifest.json"));

    for cloud in &record.output.marginals {
        let path = out_dir.join(format!("marginals_{}.csv", cloud.time));
        write_atomic(&path, marginals_csv(cloud).as_bytes())?;
        written.push(path);
    }

    if let Some(paths) = &record.output.paths {
        let mut by_time: std::collections::BTreeMap<usize, Vec<(usize, &Vec<nalgebra::DVector<f64>>)>> =
            std::collections::BTreeMap::new();
        for ((n, i), states) in paths {
            by_time.entry(*n).or_default().push((*i, states));
        }
        for (n, entries) in by_time {
            let mut out = String::from("particle,t");
            for i in 1..=record.d_x {
                out.push_str(&format!(",x_{i}"));
            }
            out.push('\n');
            for (i, states) in entries {
                for (j, x) in states.iter().enumerate() {
                    out.push_str(&format!("{i},{j}"));
                    for v in x.iter() {
                        out.push_str(&format!(",{v}"));
                    }
                    out.push('\n');
                }
            }
            let path = out_dir.join(format!("paths_{n}.csv"));
            write_atomic(&path, out.as_bytes())?;
            written.push(path);
        }
    }

    let manifest = out_dir.join("manifest.json");
    write_atomic(&manifest, manifest_json(&record)?.as_bytes())?;
    written.push(manifest);

    Ok((record, written))
}
