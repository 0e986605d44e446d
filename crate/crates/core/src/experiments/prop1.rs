//! Empirical L_r-error convergence harness: as delta drops to zero, the
//! low-noise filter's L_r error (over independent replicates, against the
//! exact filter) converges to the degenerate filter's.
//!
//! The low-noise filter here uses the proposal family that the convergence
//! statement assumes: propose the reduced coordinate from the degenerate
//! optimal proposal and the noise coordinate from the noise density, so
//! the proposal converges to `p(z_bar) q*(z | z')` by construction.
//!
//! Test function: the first reduced chart coordinate, phi(z) = z_1. Its
//! exact posterior mean comes from the noise-augmented Kalman filter
//! (delta > 0) or the degenerate Kalman filter (delta = 0). Replicates are
//! coupled across deltas by common random numbers: the same replicate seed
//! drives every delta, data is reassembled from shared noise draws, and
//! the reduced-coordinate proposal consumes the leading normal of the
//! shared stream in both filters.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::engine::{estimate, pf_run, FilterKernel, PfConfig, StreamCtx};
use crate::error::{Error, Result};
use crate::geometry::{AffineChart, ConstraintGeometry};
use crate::kalman::{kalman_filter, kalman_filter_noise_augmented};
use crate::proposals::{low_noise_generic_log_weight_from_ambient, reduced_conjugate};
use crate::ssm::{lgm_transition, GaussianTransition, ObsMatrix, ObservationSpec, Trajectory};
use crate::streams::{derive_seed, StreamRole};

#[derive(Clone, Debug)]
pub struct Prop1Config {
    pub n_particles: usize,
    pub n_steps: usize,
    pub n_reps: usize,
    pub r: u32,
    /// Positive noise scales; the delta = 0 row is always appended.
    pub deltas: Vec<f64>,
    pub seed: u64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self { n_particles: 50, n_steps: 10, n_reps: 2000, r: 2, deltas: vec![1e-2, 1e-8], seed: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Prop1Row {
    pub delta: f64,
    pub lr_error: f64,
    pub mc_se: f64,
}

pub struct Prop1Result {
    pub rows: Vec<Prop1Row>,
}

impl Prop1Result {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,lr_error,mc_se\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.delta, r.lr_error, r.mc_se));
        }
        out
    }

    pub fn row_at(&self, delta: f64) -> Option<&Prop1Row> {
        self.rows.iter().find(|r| r.delta == delta)
    }
}

/// The harness model: d_x = 2, d_y = 1, B = 0.9 I, Omega = I, A fixed.
fn harness_model(delta: f64) -> Result<(GaussianTransition, ObservationSpec)> {
    let transition = lgm_transition(DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2))?;
    let a = DMatrix::from_row_slice(1, 2, &[0.8, 0.6]);
    let obs = ObservationSpec::new(ObsMatrix::Constant(a), DMatrix::identity(1, 1), delta)?;
    Ok((transition, obs))
}

/// Low-noise filter with the product proposal
/// `q*(z | z') p(z_bar)` and the generic weight.
struct A1LowNoiseKernel<'a> {
    transition: &'a GaussianTransition,
    obs: &'a ObservationSpec,
    ext_charts: Vec<AffineChart>,
    red_charts: Vec<AffineChart>,
    x0: DVector<f64>,
}

impl A1LowNoiseKernel<'_> {
    fn propagate(
        &self,
        n: usize,
        x_prev_num: &DVector<f64>,
        x_prev_prop: &DVector<f64>,
        ctx: &StreamCtx,
    ) -> Result<(DVector<f64>, f64)> {
        let d_x = self.transition.dim();
        let d_y = self.obs.d_y();
        let red = &self.red_charts[n - 1];
        let ext = &self.ext_charts[n - 1];
        let (params, _) =
            reduced_conjugate(red, &self.transition.mean(x_prev_prop), self.transition.cov())?;
        let mut rng = ctx.rng(StreamRole::Propose);
        // z first (couples with the degenerate filter's draw), then z_bar.
        let z = params.sample(&mut rng)?;
        let z_bar = self.obs.sample_noise(&mut rng);
        let mut z_tilde = DVector::zeros(d_x);
        z_tilde.rows_mut(0, d_x - d_y).copy_from(&z);
        z_tilde.rows_mut(d_x - d_y, d_y).copy_from(&z_bar);
        let log_q = params.log_density(&z) + self.obs.noise_log_density(&z_bar);
        let logw = low_noise_generic_log_weight_from_ambient(
            x_prev_num,
            &z_tilde,
            ext,
            |x, xp| self.transition.log_density(x, xp),
            |eps| self.obs.noise_log_density(eps),
            log_q,
        )?;
        Ok((z_tilde, logw))
    }
}

impl FilterKernel for A1LowNoiseKernel<'_> {
    type State = DVector<f64>;

    fn dim(&self) -> usize {
        self.transition.dim()
    }

    fn init(&self, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(1, &self.x0.clone(), &self.x0.clone(), ctx)
    }

    fn step(&self, n: usize, prev: &Self::State, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        let d_red = self.dim() - self.obs.d_y();
        let x_prev_num = self.ext_charts[n - 2].map_state(prev)?;
        let z_block = prev.rows(0, d_red).into_owned();
        let x_prev_prop = self.red_charts[n - 2].map(&z_block)?;
        self.propagate(n, &x_prev_num, &x_prev_prop, ctx)
    }

    fn ambient(&self, n: usize, state: &Self::State) -> DVector<f64> {
        self.ext_charts[n - 1].map_state(state).expect("chart dimensions match")
    }
}

/// Degenerate filter with the optimal proposal (the limit family).
struct DegenerateKernel<'a> {
    transition: &'a GaussianTransition,
    red_charts: Vec<AffineChart>,
    x0: DVector<f64>,
}

impl DegenerateKernel<'_> {
    fn propagate(
        &self,
        n: usize,
        x_prev: &DVector<f64>,
        ctx: &StreamCtx,
    ) -> Result<(DVector<f64>, f64)> {
        let (params, logw) = reduced_conjugate(
            &self.red_charts[n - 1],
            &self.transition.mean(x_prev),
            self.transition.cov(),
        )?;
        let mut rng = ctx.rng(StreamRole::Propose);
        Ok((params.sample(&mut rng)?, logw))
    }
}

impl FilterKernel for DegenerateKernel<'_> {
    type State = DVector<f64>;

    fn dim(&self) -> usize {
        self.transition.dim()
    }

    fn init(&self, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(1, &self.x0.clone(), ctx)
    }

    fn step(&self, n: usize, prev: &Self::State, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        let x_prev = self.red_charts[n - 2].map(prev)?;
        self.propagate(n, &x_prev, ctx)
    }

    fn ambient(&self, n: usize, state: &Self::State) -> DVector<f64> {
        self.red_charts[n - 1].map(state).expect("chart dimensions match")
    }
}

fn empirical_lr(errors: &[f64], r: u32) -> (f64, f64) {
    let n = errors.len() as f64;
    let powers: Vec<f64> = errors.iter().map(|e| e.powi(r as i32)).collect();
    let mean = powers.iter().sum::<f64>() / n;
    let varp = powers.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (varp / n).sqrt();
    let lr = mean.powf(1.0 / r as f64);
    // Delta method: d(m^{1/r})/dm = m^{1/r - 1} / r.
    let se = if mean > 0.0 { se_mean * mean.powf(1.0 / r as f64 - 1.0) / r as f64 } else { 0.0 };
    (lr, se)
}

/// Run the harness: one row per positive delta, then the delta = 0 row.
pub fn prop1_gap_harness(cfg: &Prop1Config) -> Result<Prop1Result> {
    if cfg.n_reps < 2 || cfg.r == 0 {
        return Err(Error::Config("prop1: need n_reps >= 2 and r >= 1".into()));
    }
    let data_seed = derive_seed(cfg.seed, StreamRole::Simulate, 0);
    let (transition, obs_unit) = harness_model(1.0)?;
    let x0 = DVector::zeros(2);
    let traj: Trajectory =
        crate::ssm::simulate_ssm(&transition, &obs_unit, &x0, cfg.n_steps, data_seed);
    let geom = ConstraintGeometry::new(obs_unit.a_at(1).clone())?;

    let mut rows = Vec::new();
    for &delta in cfg.deltas.iter().chain(std::iter::once(&0.0)) {
        let degenerate = delta == 0.0;
        let (_, obs) = harness_model(delta)?;
        let ys = traj.observations_at_delta(&obs, delta)?;
        let red_charts: Vec<AffineChart> =
            ys.iter().map(|y| geom.reduced_chart(y)).collect::<Result<_>>()?;

        // Exact reference for phi(z) = z_1 at the final step.
        let reference = if degenerate {
            let (b, omega) = (DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2));
            let states = kalman_filter(&b, &omega, &obs, &x0, &ys)?;
            let chart = &red_charts[cfg.n_steps - 1];
            chart.basis().column(0).dot(&(&states[cfg.n_steps - 1].mean - chart.base_point()))
        } else {
            let (b, omega) = (DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2));
            let states = kalman_filter_noise_augmented(&b, &omega, &obs, &x0, &ys)?;
            let chart = geom.extended_chart(&ys[cfg.n_steps - 1], delta)?;
            chart.basis().column(0).dot(&(&states[cfg.n_steps - 1].mean - chart.base_point()))
        };

        let errors: Vec<Result<f64>> = (0..cfg.n_reps)
            .into_par_iter()
            .map(|rep| -> Result<f64> {
                let rep_seed = derive_seed(cfg.seed, StreamRole::Replicate, rep as u64 + 1);
                let mut pf_cfg = PfConfig::new(cfg.n_particles, cfg.n_steps, rep_seed);
                pf_cfg.parallel = false;
                let est = if degenerate {
                    let kernel = DegenerateKernel {
                        transition: &transition,
                        red_charts: red_charts.clone(),
                        x0: x0.clone(),
                    };
                    let out = pf_run(&kernel, &pf_cfg, &[])?;
                    estimate(&out.final_cloud.expect("run completed"), |z| z[0])?
                } else {
                    let ext_charts: Vec<AffineChart> = ys
                        .iter()
                        .map(|y| geom.extended_chart(y, delta))
                        .collect::<Result<_>>()?;
                    let kernel = A1LowNoiseKernel {
                        transition: &transition,
                        obs: &obs,
                        ext_charts,
                        red_charts: red_charts.clone(),
                        x0: x0.clone(),
                    };
                    let out = pf_run(&kernel, &pf_cfg, &[])?;
                    estimate(&out.final_cloud.expect("run completed"), |z| z[0])?
                };
                Ok((est - reference).abs())
            })
            .collect();
        let errors: Vec<f64> = errors.into_iter().collect::<Result<_>>()?;
        let (lr_error, mc_se) = empirical_lr(&errors, cfg.r);
        rows.push(Prop1Row { delta, lr_error, mc_se });
    }
    Ok(Prop1Result { rows })
}

/// Run and write prop1.csv into `out_dir`.
pub fn prop1_to_dir(
    cfg: &Prop1Config,
    out_dir: &std::path::Path,
) -> Result<(Prop1Result, std::path::PathBuf)> {
    let result = prop1_gap_harness(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("prop1.csv");
    super::run::write_atomic(&path, result.to_csv().as_bytes())?;
    Ok((result, path))
}
