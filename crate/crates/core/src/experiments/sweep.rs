//! Delta sweeps: run every filter over a shared data set reassembled at
//! each noise scale, with coupled seeds, and report median ESS and MSE per
//! (filter, delta) cell.
//!
//! The hidden states and the observation-noise draws are simulated once;
//! `y_n(delta) = A x_n + sqrt(delta) eps_n` couples the data across the
//! sweep. Every cell runs with the same filter seed, so the low-noise and
//! degenerate filters consume coupled randomness and their rows converge
//! as delta drops.
//!
//! MSE baseline: the exact Kalman mean for the linear Gaussian model, the
//! simulated true state for the nonlinear models. The degenerate filter
//! contributes a single row at delta = 0 (the limit row).

use nalgebra::DVector;
use rayon::prelude::*;

use crate::engine::PfConfig;
use crate::error::{Error, Result};
use crate::kalman::kalman_filter;
use crate::ssm::Trajectory;
use crate::streams::{derive_seed, StreamRole};

use super::config::{ExperimentConfig, FilterId, ModelId};
use super::models::{build_model, lgm_matrices};
use super::run::write_atomic;

#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub filter: FilterId,
    pub delta: f64,
    pub median_ess: f64,
    pub mse: f64,
}

pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, filter: FilterId, delta: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.filter == filter && r.delta == delta)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("filter,delta,median_ess,mse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.filter, r.delta, r.median_ess, r.mse));
        }
        out
    }
}

/// Time-averaged squared deviation of the filter mean from the reference
/// mean, averaged over components; partial runs (collapse) average over
/// the recorded steps.
fn mse_vs(means: &[DVector<f64>], reference: &[DVector<f64>]) -> f64 {
    if means.is_empty() {
        return f64::NAN;
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (m, r) in means.iter().zip(reference.iter()) {
        acc += (m - r).norm_squared();
        count += m.len();
    }
    acc / count as f64
}

fn reference_means(
    model_id: ModelId,
    delta: f64,
    traj: &Trajectory,
    ys: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    match model_id {
        ModelId::Lgm => {
            let (b, omega) = lgm_matrices();
            let model = build_model(ModelId::Lgm, delta)?;
            let x0 = DVector::zeros(b.nrows());
            Ok(kalman_filter(&b, &omega, model.obs(), &x0, ys)?
                .into_iter()
                .map(|s| s.mean)
                .collect())
        }
        _ => Ok(traj.states[1..].to_vec()),
    }
}

/// Run the sweep. `deltas` lists the positive noise scales; the degenerate
/// filter is appended once at delta = 0 regardless.
pub fn sweep_delta(config: &ExperimentConfig, deltas: &[f64]) -> Result<SweepResult> {
    if deltas.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::Config("sweep deltas must be finite and >= 0".into()));
    }
    let n_steps = config.steps();
    let data_seed = derive_seed(config.seed, StreamRole::Simulate, 0);
    let filter_seed = derive_seed(config.seed, StreamRole::Replicate, 0);
    let base_model = build_model(config.model, config.delta.max(f64::MIN_POSITIVE))?;
    let traj = base_model.simulate(n_steps, data_seed);

    let positive: Vec<f64> = deltas.iter().copied().filter(|&d| d > 0.0).collect();
    let mut cells: Vec<(FilterId, f64)> = Vec::new();
    for filter in [FilterId::Bootstrap, FilterId::OptimalNatural, FilterId::LowNoise] {
        for &d in &positive {
            cells.push((filter, d));
        }
    }
    cells.push((FilterId::Degenerate, 0.0));

    let rows: Vec<Result<SweepRow>> = cells
        .par_iter()
        .map(|&(filter, delta)| -> Result<SweepRow> {
            let model = build_model(config.model, delta)?;
            let ys = traj.observations_at_delta(model.obs(), delta)?;
            let mut pf_cfg = PfConfig::new(config.n_particles, n_steps, filter_seed);
            pf_cfg.policy = config.resample;
            let out = super::kernels::run_filter(
                &model,
                &ys,
                filter,
                &pf_cfg,
                config.bridge_steps(),
                &[],
                &[],
                false,
            )?;
            let reference = reference_means(config.model, delta, &traj, &ys)?;
            let median_ess = if out.diags.is_empty() {
                // Collapse before the first full step: the cell is recorded
                // at the collapse level rather than omitted.
                1.0
            } else {
                out.median_ess()
            };
            let mse = mse_vs(&out.means, &reference);
            Ok(SweepRow { filter, delta, median_ess, mse })
        })
        .collect();
    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<_>>()?;
    Ok(SweepResult { rows })
}

/// Run the sweep and write sweep.csv into `out_dir`.
pub fn sweep_to_dir(
    config: &ExperimentConfig,
    deltas: &[f64],
    out_dir: &std::path::Path,
) -> Result<(SweepResult, std::path::PathBuf)> {
    let result = sweep_delta(config, deltas)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("sweep.csv");
    write_atomic(&path, result.to_csv().as_bytes())?;
    Ok((result, path))
}
