//! Concrete experiment models, one builder per model id, and their data
//! generation.
//!
//! - `lgm`: linear Gaussian, d_x = 10, B = 0.9 I, Omega = I, A the
//!   1 x 10 averaging row (entries 1/d_x), Sigma = 1, X_0 = 0.
//! - `lorenz96`: d_x = 8, F_0 = 8, Euler step 1e-2, Omega = 1e-2 I,
//!   A selects components 1 and 5, Sigma = I_2, X_0 = 1.
//! - `fhn` / `fhn_statedep`: FitzHugh-Nagumo, alpha = 0.1, gamma = 1,
//!   beta = 0.2, sigma = 0.1 (or diag(0.1 sqrt(x_i^2 + 1))), X_0 =
//!   (0.5, 0.5), first component observed every 0.1 time units, data
//!   simulated by Euler-Maruyama at step 5e-3, 20 deterministic flow
//!   substeps for the auxiliary linearization.

use nalgebra::{DMatrix, DVector};

use crate::bridge::{fhn_sde, fhn_statedep_sde, FhnParams, SdeSpec};
use crate::error::Result;
use crate::linalg::standard_normal_vector;
use crate::ssm::{
    lgm_transition, lorenz96_transition, simulate_ssm, GaussianTransition, ObsMatrix,
    ObservationSpec, Trajectory,
};
use crate::streams::{stream_rng, StreamRole};

use super::config::ModelId;

/// A discrete-time model ready to filter.
pub struct DiscreteModel {
    pub transition: GaussianTransition,
    pub obs: ObservationSpec,
    pub x0: DVector<f64>,
}

/// A hidden-diffusion model ready to filter.
pub struct DiffusionModel {
    pub sde: SdeSpec,
    pub obs: ObservationSpec,
    pub x0: DVector<f64>,
    /// Time between observations.
    pub obs_spacing: f64,
    /// Euler-Maruyama step for data simulation.
    pub sim_dt: f64,
    /// Deterministic flow substeps for the auxiliary linearization.
    pub flow_substeps: usize,
    pub statedep: bool,
}

pub enum ModelBundle {
    Discrete(DiscreteModel),
    Diffusion(DiffusionModel),
}

impl ModelBundle {
    pub fn d_x(&self) -> usize {
        match self {
            ModelBundle::Discrete(m) => m.transition.dim(),
            ModelBundle::Diffusion(m) => m.sde.dim(),
        }
    }

    pub fn obs(&self) -> &ObservationSpec {
        match self {
            ModelBundle::Discrete(m) => &m.obs,
            ModelBundle::Diffusion(m) => &m.obs,
        }
    }

    /// Simulate a data trajectory with recorded noise draws.
    pub fn simulate(&self, n_steps: usize, seed: u64) -> Trajectory {
        match self {
            ModelBundle::Discrete(m) => simulate_ssm(&m.transition, &m.obs, &m.x0, n_steps, seed),
            ModelBundle::Diffusion(m) => simulate_diffusion(m, n_steps, seed),
        }
    }
}

/// (B, Omega) of the linear Gaussian experiment, for exact-filter oracles.
pub fn lgm_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    let d = 10;
    (DMatrix::identity(d, d) * 0.9, DMatrix::identity(d, d))
}

/// Build a model at the given observation-noise scale.
pub fn build_model(id: ModelId, delta: f64) -> Result<ModelBundle> {
    match id {
        ModelId::Lgm => {
            let d = 10;
            let transition =
                lgm_transition(DMatrix::identity(d, d) * 0.9, DMatrix::identity(d, d))?;
            let a = DMatrix::from_element(1, d, 1.0 / d as f64);
            let obs = ObservationSpec::new(ObsMatrix::Constant(a), DMatrix::identity(1, 1), delta)?;
            Ok(ModelBundle::Discrete(DiscreteModel { transition, obs, x0: DVector::zeros(d) }))
        }
        ModelId::Lorenz96 => {
            let d = 8;
            let dt = 1e-2;
            let transition = lorenz96_transition(8.0, dt, DMatrix::identity(d, d) * dt)?;
            let mut a = DMatrix::zeros(2, d);
            a[(0, 0)] = 1.0;
            a[(1, 4)] = 1.0;
            let obs = ObservationSpec::new(ObsMatrix::Constant(a), DMatrix::identity(2, 2), delta)?;
            Ok(ModelBundle::Discrete(DiscreteModel {
                transition,
                obs,
                x0: DVector::from_element(d, 1.0),
            }))
        }
        ModelId::Fhn | ModelId::FhnStatedep => {
            let params = FhnParams { alpha: 0.1, gamma: 1.0, beta: 0.2 };
            let statedep = id == ModelId::FhnStatedep;
            let sde = if statedep {
                fhn_statedep_sde(params, 0.1, 0.1)
            } else {
                fhn_sde(params, 0.1)
            };
            let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
            let obs = ObservationSpec::new(ObsMatrix::Constant(a), DMatrix::identity(1, 1), delta)?;
            Ok(ModelBundle::Diffusion(DiffusionModel {
                sde,
                obs,
                x0: DVector::from_row_slice(&[0.5, 0.5]),
                obs_spacing: 0.1,
                sim_dt: 5e-3,
                flow_substeps: 20,
                statedep,
            }))
        }
    }
}

/// Euler-Maruyama simulation of the hidden diffusion at `sim_dt`,
/// recording the state at each observation time and the observation noise
/// draws. The trajectory's `states[n]` is x at time n * obs_spacing.
fn simulate_diffusion(model: &DiffusionModel, n_obs: usize, seed: u64) -> Trajectory {
    let substeps = (model.obs_spacing / model.sim_dt).round() as usize;
    let mut rng = stream_rng(seed, StreamRole::Simulate, 0, 0);
    let d = model.sde.dim();
    let sqrt_dt = model.sim_dt.sqrt();
    let mut x = model.x0.clone();
    let mut states = Vec::with_capacity(n_obs + 1);
    states.push(x.clone());
    for _ in 0..n_obs {
        for _ in 0..substeps {
            let dw = standard_normal_vector(d, &mut rng) * sqrt_dt;
            x = &x + model.sde.drift(&x) * model.sim_dt + model.sde.sigma(&x) * dw;
        }
        states.push(x.clone());
    }
    let mut noise_rng = stream_rng(seed, StreamRole::Simulate, 1, 0);
    let noise: Vec<DVector<f64>> =
        (0..n_obs).map(|_| model.obs.sample_noise(&mut noise_rng)).collect();
    let observations = (1..=n_obs)
        .map(|n| model.obs.a_at(n) * &states[n] + model.obs.delta.sqrt() * &noise[n - 1])
        .collect();
    Trajectory { states, observations, noise }
}
