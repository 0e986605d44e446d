//! State-space model abstractions and the concrete discrete-time models.
//!
//! Hidden chain: `X_n = f_n(X_{n-1}) + nu_n`, `nu_n ~ N(0, Omega)`.
//! Observations: `Y_n = A X_n + sqrt(delta) eps_n`, `eps_n ~ N(0, Sigma)`
//! by default, or any positive noise density supplied by the caller.
//!
//! Model objects are immutable after construction and reentrant; a
//! simulation owns its RNG stream.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::{standard_normal_vector, SpdFactor, LN_2PI};
use crate::streams::{stream_rng, StreamRole};

type MeanMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type LogDensity = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Gaussian transition kernel `x' ~ N(f(x), Omega)` with cached Cholesky
/// factor and log-determinant.
#[derive(Clone)]
pub struct GaussianTransition {
    mean_map: MeanMap,
    cov: Arc<SpdFactor>,
}

impl GaussianTransition {
    pub fn new(mean_map: MeanMap, cov: DMatrix<f64>) -> Result<Self> {
        let asym = (&cov - cov.transpose()).abs().max();
        let scale = cov.abs().max().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::Invalid(format!(
                "transition covariance is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(Self { mean_map, cov: Arc::new(SpdFactor::from_spd(cov)?) })
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    /// f_n(x).
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.mean_map)(x)
    }

    pub fn cov(&self) -> &SpdFactor {
        &self.cov
    }

    /// log f_n(x | x_prev).
    pub fn log_density(&self, x: &DVector<f64>, x_prev: &DVector<f64>) -> f64 {
        let d = x - self.mean(x_prev);
        -0.5 * (self.cov.quad_inv(&d) + self.cov.logdet() + self.dim() as f64 * LN_2PI)
    }

    pub fn sample<R: rand::Rng + ?Sized>(
        &self,
        x_prev: &DVector<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        let eta = standard_normal_vector(self.dim(), rng);
        self.mean(x_prev) + self.cov.factor_mul(&eta)
    }
}

/// log N(x; mean, cov).
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() || cov.ncols() != x.len() {
        return Err(Error::Invalid("gaussian_log_density: dimension mismatch".into()));
    }
    let f = SpdFactor::from_spd(cov.clone())?;
    let d = x - mean;
    Ok(-0.5 * (f.quad_inv(&d) + f.logdet() + x.len() as f64 * LN_2PI))
}

/// Linear Gaussian transition `x' ~ N(B x, Omega)`.
pub fn lgm_transition(b: DMatrix<f64>, omega: DMatrix<f64>) -> Result<GaussianTransition> {
    if b.nrows() != b.ncols() || b.nrows() != omega.nrows() {
        return Err(Error::Invalid("lgm_transition: B and Omega must be square d_x".into()));
    }
    let b = Arc::new(b);
    GaussianTransition::new(Arc::new(move |x: &DVector<f64>| &*b * x), omega)
}

/// One Lorenz-96 Euler step:
/// `F_i(x) = x_i + dt ((x_{i+1} - x_{i-2}) x_{i-1} - x_i + f0)`,
/// indices cyclic modulo d_x.
pub fn lorenz96_map(x: &DVector<f64>, f0: f64, dt: f64) -> DVector<f64> {
    let d = x.len();
    assert!(d >= 4, "lorenz96_map requires d_x >= 4");
    DVector::from_fn(d, |i, _| {
        let ip1 = x[(i + 1) % d];
        let im1 = x[(i + d - 1) % d];
        let im2 = x[(i + d - 2) % d];
        x[i] + dt * ((ip1 - im2) * im1 - x[i] + f0)
    })
}

/// Lorenz-96 transition `x' ~ N(F(x), Omega)`.
pub fn lorenz96_transition(f0: f64, dt: f64, omega: DMatrix<f64>) -> Result<GaussianTransition> {
    GaussianTransition::new(Arc::new(move |x: &DVector<f64>| lorenz96_map(x, f0, dt)), omega)
}

/// Observation matrix, constant across time or one per step (1-based time).
#[derive(Clone, Debug)]
pub enum ObsMatrix {
    Constant(DMatrix<f64>),
    Sequence(Vec<DMatrix<f64>>),
}

impl ObsMatrix {
    pub fn at(&self, n: usize) -> &DMatrix<f64> {
        match self {
            ObsMatrix::Constant(a) => a,
            ObsMatrix::Sequence(seq) => &seq[n - 1],
        }
    }
}

/// Observation model `Y_n = A_n X_n + sqrt(delta) eps_n` with noise density
/// `p_n`, Gaussian `N(0, Sigma)` unless a custom positive log-density is
/// supplied.
#[derive(Clone)]
pub struct ObservationSpec {
    a: ObsMatrix,
    sigma: Arc<SpdFactor>,
    pub delta: f64,
    custom_noise_log_density: Option<LogDensity>,
}

impl ObservationSpec {
    pub fn new(a: ObsMatrix, sigma: DMatrix<f64>, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Invalid("observation: delta must be finite and >= 0".into()));
        }
        let d_y = match &a {
            ObsMatrix::Constant(m) => m.nrows(),
            ObsMatrix::Sequence(seq) => {
                let d = seq.first().map(|m| m.nrows()).unwrap_or(0);
                if seq.iter().any(|m| m.nrows() != d) {
                    return Err(Error::Invalid("observation: inconsistent A dimensions".into()));
                }
                d
            }
        };
        if sigma.nrows() != d_y || sigma.ncols() != d_y {
            return Err(Error::Invalid("observation: Sigma must be d_y x d_y".into()));
        }
        Ok(Self {
            a,
            sigma: Arc::new(SpdFactor::from_spd(sigma)?),
            delta,
            custom_noise_log_density: None,
        })
    }

    /// Replace the Gaussian noise density by an arbitrary positive
    /// log-density (used by the generic manifold weight; simulation still
    /// draws Gaussian noise).
    pub fn with_noise_log_density(mut self, p: LogDensity) -> Self {
        self.custom_noise_log_density = Some(p);
        self
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Invalid("observation: delta must be finite and >= 0".into()));
        }
        let mut out = self.clone();
        out.delta = delta;
        Ok(out)
    }

    pub fn a_at(&self, n: usize) -> &DMatrix<f64> {
        self.a.at(n)
    }

    pub fn d_y(&self) -> usize {
        self.sigma.dim()
    }

    pub fn sigma(&self) -> &SpdFactor {
        &self.sigma
    }

    /// log p_n(eps).
    pub fn noise_log_density(&self, eps: &DVector<f64>) -> f64 {
        match &self.custom_noise_log_density {
            Some(p) => p(eps),
            None => {
                -0.5 * (self.sigma.quad_inv(eps)
                    + self.sigma.logdet()
                    + self.d_y() as f64 * LN_2PI)
            }
        }
    }

    /// log h_n(y | x) for delta > 0: the density of
    /// `A x + sqrt(delta) eps` at y, i.e. `p((y - A x)/sqrt(delta))` with
    /// the change-of-variables factor `delta^{-d_y/2}`.
    pub fn obs_log_density(&self, n: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        if self.delta <= 0.0 {
            return Err(Error::Unsupported(
                "observation density w.r.t. Lebesgue measure is undefined at delta = 0".into(),
            ));
        }
        let eps = (y - self.a_at(n) * x) / self.delta.sqrt();
        Ok(self.noise_log_density(&eps) - 0.5 * self.d_y() as f64 * self.delta.ln())
    }

    /// Draw eps ~ N(0, Sigma).
    pub fn sample_noise<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eta = standard_normal_vector(self.d_y(), rng);
        self.sigma.factor_mul(&eta)
    }
}

/// A simulated (or imported) state/observation sequence. `states[n]` is
/// x_n for n = 0..=n_steps; `observations[n-1]` and `noise[n-1]` belong to
/// time n >= 1. `noise` holds the eps draws so observations can be
/// reassembled for any delta; it is empty for imported trajectories.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.observations.len()
    }

    pub fn d_x(&self) -> usize {
        self.states.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn d_y(&self) -> usize {
        self.observations.first().map(|y| y.len()).unwrap_or(0)
    }

    /// Observations reassembled at a different noise scale from the stored
    /// eps draws: y_n = A_n x_n + sqrt(delta) eps_n.
    pub fn observations_at_delta(
        &self,
        obs: &ObservationSpec,
        delta: f64,
    ) -> Result<Vec<DVector<f64>>> {
        if self.noise.len() != self.observations.len() {
            return Err(Error::Invalid(
                "trajectory has no recorded noise draws; cannot re-derive observations".into(),
            ));
        }
        Ok((1..=self.n_steps())
            .map(|n| obs.a_at(n) * &self.states[n] + delta.sqrt() * &self.noise[n - 1])
            .collect())
    }
}

/// Simulate states only: x_n = f(x_{n-1}) + nu_n.
pub fn simulate_states(
    transition: &GaussianTransition,
    x0: &DVector<f64>,
    n_steps: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = stream_rng(seed, StreamRole::Simulate, 0, 0);
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    for _ in 0..n_steps {
        let next = transition.sample(states.last().unwrap(), &mut rng);
        states.push(next);
    }
    states
}

/// Simulate a full trajectory; deterministic given the seed.
pub fn simulate_ssm(
    transition: &GaussianTransition,
    obs: &ObservationSpec,
    x0: &DVector<f64>,
    n_steps: usize,
    seed: u64,
) -> Trajectory {
    let states = simulate_states(transition, x0, n_steps, seed);
    let mut rng = stream_rng(seed, StreamRole::Simulate, 1, 0);
    let noise: Vec<DVector<f64>> = (0..n_steps).map(|_| obs.sample_noise(&mut rng)).collect();
    let observations = (1..=n_steps)
        .map(|n| obs.a_at(n) * &states[n] + obs.delta.sqrt() * &noise[n - 1])
        .collect();
    Trajectory { states, observations, noise }
}

/// Write `t, x_1..x_dx, y_1..y_dy` rows (observations blank at t = 0).
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    let d_x = traj.d_x();
    let d_y = traj.d_y();
    let mut header = String::from("t");
    for i in 1..=d_x {
        header.push_str(&format!(",x_{i}"));
    }
    for i in 1..=d_y {
        header.push_str(&format!(",y_{i}"));
    }
    writeln!(w, "{header}")?;
    for (t, x) in traj.states.iter().enumerate() {
        let mut row = format!("{t}");
        for v in x.iter() {
            row.push_str(&format!(",{v}"));
        }
        if t == 0 {
            for _ in 0..d_y {
                row.push(',');
            }
        } else {
            for v in traj.observations[t - 1].iter() {
                row.push_str(&format!(",{v}"));
            }
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Read a trajectory written by [`write_trajectory_csv`]. The noise draws
/// are not part of the format, so `noise` comes back empty.
pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<Trajectory> {
    let mut lines = r.lines();
    let header =
        lines.next().ok_or_else(|| Error::Invalid("trajectory csv: empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let d_x = cols.iter().filter(|c| c.starts_with("x_")).count();
    let d_y = cols.iter().filter(|c| c.starts_with("y_")).count();
    if d_x == 0 || cols.first() != Some(&"t") {
        return Err(Error::Invalid("trajectory csv: bad header".into()));
    }
    let mut states = Vec::new();
    let mut observations = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + d_x + d_y {
            return Err(Error::Invalid("trajectory csv: bad row width".into()));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Invalid(format!("trajectory csv: {e}")))
        };
        let mut x = DVector::zeros(d_x);
        for i in 0..d_x {
            x[i] = parse(fields[1 + i])?;
        }
        states.push(x);
        if fields[1 + d_x..].iter().all(|f| !f.is_empty()) {
            let mut y = DVector::zeros(d_y);
            for i in 0..d_y {
                y[i] = parse(fields[1 + d_x + i])?;
            }
            observations.push(y);
        }
    }
    Ok(Trajectory { states, observations, noise: Vec::new() })
}

/// Sidecar manifest recording how a trajectory was generated.
pub fn trajectory_manifest(
    seed: u64,
    n_steps: usize,
    d_x: usize,
    d_y: usize,
) -> serde_json::Value {
    json!({ "seed": seed, "n_steps": n_steps, "d_x": d_x, "d_y": d_y })
}

/// Write a trajectory CSV plus its manifest next to it.
pub fn export_trajectory(traj: &Trajectory, seed: u64, csv_path: &Path) -> Result<()> {
    let file = std::fs::File::create(csv_path)?;
    write_trajectory_csv(traj, std::io::BufWriter::new(file))?;
    let manifest = trajectory_manifest(seed, traj.n_steps(), traj.d_x(), traj.d_y());
    let manifest_path = csv_path.with_extension("manifest.json");
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
