//! Guided diffusion-bridge machinery for hidden diffusions
//! `dX_t = mu(X_t) dt + sigma(X_t) dW_t` observed linearly at unit-spaced
//! (or regularly spaced) times.
//!
//! An auxiliary linear (Ornstein-Uhlenbeck) process with drift
//! `mu_tilde(x) = mu(x_ref) + J (x - x_ref)` supplies a closed-form Gaussian
//! transition density `f_tilde`. Its score steers an Euler-discretized
//! proposal path toward the interval endpoint (guided drift
//! `mu° = mu + Sigma grad_x log f_tilde`), and the likelihood ratio between
//! the conditioned diffusion and the guided proposal is discretized as
//!
//! ```text
//! R^l = exp{ sum_j L(t_j, X_j) Xi_l } * f_tilde(x_end | x_start)
//! L(t, x) = (mu(x) - mu_tilde(x))^T score
//!           - 1/2 Tr{ [Sigma(x) - Sigma_tilde] [-hess - score score^T] }
//! ```
//!
//! with the sum over left grid endpoints. For constant-sigma models
//! `Sigma - Sigma_tilde = 0` and only the drift term contributes.
//!
//! The FitzHugh-Nagumo models (constant and state-dependent diffusion) live
//! here too. Path construction and weight evaluation are pure over
//! immutable aux/sde objects and run per particle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::AffineChart;
use crate::linalg::{
    matrix_exp, solve_lyapunov_kron, standard_normal_vector, symmetrize, SpdFactor, LN_2PI,
};

type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Drift and diffusion of the hidden SDE, with an optional analytic drift
/// Jacobian (central differences otherwise).
#[derive(Clone)]
pub struct SdeSpec {
    dim: usize,
    drift: VectorField,
    diffusion: MatrixField,
    jacobian: Option<MatrixField>,
    /// True when sigma(x) does not depend on x; lets weights skip the
    /// trace term exactly.
    pub constant_diffusion: bool,
}

impl SdeSpec {
    pub fn new(
        dim: usize,
        drift: VectorField,
        diffusion: MatrixField,
        jacobian: Option<MatrixField>,
        constant_diffusion: bool,
    ) -> Self {
        Self { dim, drift, diffusion, jacobian, constant_diffusion }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn sigma(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.diffusion)(x)
    }

    /// Sigma(x) = sigma(x) sigma(x)^T.
    pub fn sigma_sq(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let s = self.sigma(x);
        &s * s.transpose()
    }

    /// Drift Jacobian: analytic when supplied, else central differences
    /// with step 1e-6.
    pub fn jacobian_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(x),
            None => {
                let h = 1e-6;
                let d = self.dim;
                let mut out = DMatrix::zeros(d, d);
                for k in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let col = (self.drift(&xp) - self.drift(&xm)) / (2.0 * h);
                    out.column_mut(k).copy_from(&col);
                }
                out
            }
        }
    }

    /// Drop the analytic Jacobian (testing the finite-difference path).
    pub fn without_jacobian(&self) -> Self {
        let mut s = self.clone();
        s.jacobian = None;
        s
    }
}

/// FitzHugh-Nagumo drift parameters.
#[derive(Clone, Copy, Debug)]
pub struct FhnParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

fn fhn_drift(p: FhnParams) -> (VectorField, MatrixField) {
    let drift: VectorField = Arc::new(move |x: &DVector<f64>| {
        DVector::from_row_slice(&[
            (x[0] - x[0].powi(3) - x[1]) / p.alpha,
            p.gamma * x[0] - x[1] + p.beta,
        ])
    });
    let jac: MatrixField = Arc::new(move |x: &DVector<f64>| {
        DMatrix::from_row_slice(
            2,
            2,
            &[(1.0 - 3.0 * x[0] * x[0]) / p.alpha, -1.0 / p.alpha, p.gamma, -1.0],
        )
    });
    (drift, jac)
}

/// FitzHugh-Nagumo with constant diffusion sigma0 * I.
pub fn fhn_sde(p: FhnParams, sigma0: f64) -> SdeSpec {
    let (drift, jac) = fhn_drift(p);
    let diffusion: MatrixField = Arc::new(move |_| DMatrix::identity(2, 2) * sigma0);
    SdeSpec::new(2, drift, diffusion, Some(jac), true)
}

/// FitzHugh-Nagumo with state-dependent diagonal diffusion
/// `diag(sigma_i sqrt(x_i^2 + 1))`.
pub fn fhn_statedep_sde(p: FhnParams, sigma1: f64, sigma2: f64) -> SdeSpec {
    let (drift, jac) = fhn_drift(p);
    let diffusion: MatrixField = Arc::new(move |x: &DVector<f64>| {
        DMatrix::from_diagonal(&DVector::from_row_slice(&[
            sigma1 * (x[0] * x[0] + 1.0).sqrt(),
            sigma2 * (x[1] * x[1] + 1.0).sqrt(),
        ]))
    });
    SdeSpec::new(2, drift, diffusion, Some(jac), false)
}

/// Linear SDE `dX = B X dt + sigma dW` (tests and validation).
pub fn linear_sde(b: DMatrix<f64>, sigma: DMatrix<f64>) -> SdeSpec {
    let dim = b.nrows();
    let b2 = b.clone();
    let drift: VectorField = Arc::new(move |x: &DVector<f64>| &b2 * x);
    let jac: MatrixField = Arc::new(move |_| b.clone());
    let diffusion: MatrixField = Arc::new(move |_| sigma.clone());
    SdeSpec::new(dim, drift, diffusion, Some(jac), true)
}

// ---------------------------------------------------------------------------
// Auxiliary OU process
// ---------------------------------------------------------------------------

/// Auxiliary OU process `dX = (mu_ref + J (X - x_ref)) dt + sigma_tilde dW`
/// with `Psi` solving `J Psi + Psi J^T = Sigma_tilde` so that the
/// transition covariance over h is `exp(Jh) Psi exp(J^T h) - Psi`.
#[derive(Clone)]
pub struct AuxiliaryOu {
    pub j: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub mu_ref: DVector<f64>,
    pub tilde_sigma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    sigma_sq_tilde: DMatrix<f64>,
    /// mu_ref - J x_ref, the affine part of the drift.
    affine: DVector<f64>,
}

impl AuxiliaryOu {
    pub fn new(
        j: DMatrix<f64>,
        x_ref: DVector<f64>,
        mu_ref: DVector<f64>,
        tilde_sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let d = j.nrows();
        if j.ncols() != d || x_ref.len() != d || mu_ref.len() != d || tilde_sigma.nrows() != d {
            return Err(Error::Invalid("auxiliary OU: dimension mismatch".into()));
        }
        let det = j.determinant();
        if !(det.abs() > 1e-12) {
            return Err(Error::Conditioning(format!(
                "auxiliary Jacobian is not invertible (|det J| = {:.3e})",
                det.abs()
            )));
        }
        check_diagonalizable(&j)?;
        let sigma_sq_tilde = symmetrize(&(&tilde_sigma * tilde_sigma.transpose()));
        let psi = solve_lyapunov_kron(&j, &sigma_sq_tilde)?;
        let affine = &mu_ref - &j * &x_ref;
        Ok(Self { j, x_ref, mu_ref, tilde_sigma, psi, sigma_sq_tilde, affine })
    }

    /// Same linearization with a different diffusion matrix (the
    /// state-dependent models set sigma_tilde = sigma(endpoint)).
    pub fn with_tilde_sigma(&self, tilde_sigma: DMatrix<f64>) -> Result<Self> {
        AuxiliaryOu::new(self.j.clone(), self.x_ref.clone(), self.mu_ref.clone(), tilde_sigma)
    }

    pub fn dim(&self) -> usize {
        self.j.nrows()
    }

    /// Linearized drift mu_ref + J (x - x_ref).
    pub fn mu_tilde(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.affine + &self.j * x
    }

    /// Sigma_tilde = sigma_tilde sigma_tilde^T (time-independent here).
    pub fn sigma_sq_tilde(&self) -> &DMatrix<f64> {
        &self.sigma_sq_tilde
    }

    /// Transition over horizon h > 0: mean `E x + c`, covariance
    /// `E Psi E^T - Psi` (symmetrized; tiny negative eigenvalues within
    /// -1e-12 are clamped, anything worse is a conditioning error).
    pub fn transition(&self, h: f64) -> Result<OuStep> {
        if !(h > 0.0) {
            return Err(Error::Invalid("OU transition requires h > 0".into()));
        }
        let e = matrix_exp(&(&self.j * h));
        self.step_from_exp(h, e)
    }

    fn step_from_exp(&self, h: f64, e: DMatrix<f64>) -> Result<OuStep> {
        let d = self.dim();
        let rhs = (&e - DMatrix::identity(d, d)) * &self.affine;
        let c = self
            .j
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Conditioning("auxiliary Jacobian is singular".into()))?;
        let q = &e * &self.psi * e.transpose() - &self.psi;
        let q = SpdFactor::from_spd_clamped(&q)?;
        Ok(OuStep { h, e, c, q })
    }
}

/// Diagonalizability guard: distinct eigenvalues, symmetric, or a scalar
/// multiple of the identity all pass; a repeated eigenvalue on a
/// non-normal matrix is rejected rather than silently regularized.
fn check_diagonalizable(j: &DMatrix<f64>) -> Result<()> {
    let scale = j.abs().max().max(1.0);
    if (j - j.transpose()).abs().max() <= 1e-12 * scale {
        return Ok(());
    }
    let eig = j.complex_eigenvalues();
    let mut distinct = true;
    for i in 0..eig.len() {
        for k in (i + 1)..eig.len() {
            if (eig[i] - eig[k]).norm() <= 1e-8 * scale {
                distinct = false;
            }
        }
    }
    if distinct {
        return Ok(());
    }
    let lambda = eig[0].re;
    let dev = (j - DMatrix::identity(j.nrows(), j.ncols()) * lambda).abs().max();
    if dev <= 1e-10 * scale {
        return Ok(());
    }
    Err(Error::Conditioning(
        "auxiliary Jacobian has repeated eigenvalues and is not diagonalizable".into(),
    ))
}

/// One OU transition: mean map `x -> E x + c` over horizon h, covariance
/// factor Q.
pub struct OuStep {
    pub h: f64,
    pub e: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q: SpdFactor,
}

impl OuStep {
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.e * x + &self.c
    }

    /// log f_tilde(x_end | x_start) over this horizon.
    pub fn log_density(&self, x_end: &DVector<f64>, x_start: &DVector<f64>) -> f64 {
        let d = x_end - self.mean(x_start);
        -0.5 * (self.q.quad_inv(&d) + self.q.logdet() + d.len() as f64 * LN_2PI)
    }

    /// grad_x log f_tilde(x_end | x) = E^T Q^{-1} (x_end - E x - c).
    pub fn score(&self, x: &DVector<f64>, x_end: &DVector<f64>) -> DVector<f64> {
        self.e.transpose() * self.q.solve_vec(&(x_end - self.mean(x)))
    }

    /// grad^2_x log f_tilde = -E^T Q^{-1} E (independent of x).
    pub fn hessian(&self) -> DMatrix<f64> {
        -(self.e.transpose() * self.q.solve_mat(&self.e))
    }

    pub fn sample_endpoint<R: rand::Rng + ?Sized>(
        &self,
        x_start: &DVector<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        let eta = standard_normal_vector(self.c.len(), rng);
        self.mean(x_start) + self.q.factor_mul(&eta)
    }
}

/// (m, Q) of the auxiliary transition over horizon h starting at x.
pub fn ou_transition(
    aux: &AuxiliaryOu,
    x: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let step = aux.transition(h)?;
    Ok((step.mean(x), step.q.matrix().clone()))
}

/// Score and Hessian of `log f_tilde_{t, s2}(x_end | x)` in x.
pub fn ou_logdensity_derivs(
    aux: &AuxiliaryOu,
    t: f64,
    x: &DVector<f64>,
    x_end: &DVector<f64>,
    s2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(s2 > t) {
        return Err(Error::Invalid("ou_logdensity_derivs requires s2 > t".into()));
    }
    let step = aux.transition(s2 - t)?;
    Ok((step.score(x, x_end), step.hessian()))
}

/// Guided drift `mu°(t, x; x_end) = mu(x) + Sigma(x) grad_x log f_tilde`.
pub fn guided_drift(
    sde: &SdeSpec,
    aux: &AuxiliaryOu,
    t: f64,
    x: &DVector<f64>,
    x_end: &DVector<f64>,
    s2: f64,
) -> Result<DVector<f64>> {
    let (score, _) = ou_logdensity_derivs(aux, t, x, x_end, s2)?;
    Ok(sde.drift(x) + sde.sigma_sq(x) * score)
}

// ---------------------------------------------------------------------------
// Grids, paths, ladders
// ---------------------------------------------------------------------------

/// Regular Euler grid on one inter-observation interval.
#[derive(Clone, Copy, Debug)]
pub struct BridgeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Dyadic level when the grid was built as 2^l steps.
    pub level: Option<u32>,
}

impl BridgeGrid {
    /// 2^level steps of spacing `len / 2^level`.
    pub fn dyadic(level: u32, t0: f64, len: f64) -> Self {
        let n = 1usize << level;
        Self { t0, dt: len / n as f64, n_steps: n, level: Some(level) }
    }

    /// n_steps uniform steps.
    pub fn uniform(n_steps: usize, t0: f64, len: f64) -> Self {
        Self { t0, dt: len / n_steps as f64, n_steps, level: None }
    }

    pub fn len(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn is_empty(&self) -> bool {
        self.n_steps == 0
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }
}

/// Draw the Brownian block: n_steps increments ~ N(0, dt I_dim).
pub fn sample_increments<R: rand::Rng + ?Sized>(
    grid: &BridgeGrid,
    dim: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let sd = grid.dt.sqrt();
    (0..grid.n_steps).map(|_| standard_normal_vector(dim, rng) * sd).collect()
}

/// A discretized guided path: states at t0, t0 + dt, ..., t0 + n dt, with
/// both endpoints pinned exactly to the supplied values.
pub struct GuidedPath {
    pub states: Vec<DVector<f64>>,
    pub grid: BridgeGrid,
}

impl GuidedPath {
    pub fn start(&self) -> &DVector<f64> {
        self.states.first().expect("path has endpoints")
    }

    pub fn end(&self) -> &DVector<f64> {
        self.states.last().expect("path has endpoints")
    }
}

/// Per-interval cache of OU transitions over the horizons
/// `(n_steps - j) dt` for j = 0..n_steps-1. `steps[0]` spans the whole
/// interval (the endpoint density); `steps[j]` is what the score at grid
/// time j needs. Built from one matrix exponential of `J dt` by repeated
/// multiplication.
pub struct OuLadder {
    pub steps: Vec<OuStep>,
    pub grid: BridgeGrid,
}

impl OuLadder {
    pub fn new(aux: &AuxiliaryOu, grid: &BridgeGrid) -> Result<Self> {
        if grid.n_steps == 0 {
            return Err(Error::Invalid("bridge grid must have at least one step".into()));
        }
        let base = matrix_exp(&(&aux.j * grid.dt));
        // exps[k] = exp(J (k+1) dt).
        let mut exps = Vec::with_capacity(grid.n_steps);
        exps.push(base.clone());
        for k in 1..grid.n_steps {
            let next = &exps[k - 1] * &base;
            exps.push(next);
        }
        let mut steps = Vec::with_capacity(grid.n_steps);
        for j in 0..grid.n_steps {
            let horizon_steps = grid.n_steps - j;
            let h = horizon_steps as f64 * grid.dt;
            steps.push(aux.step_from_exp(h, exps[horizon_steps - 1].clone())?);
        }
        Ok(Self { steps, grid: *grid })
    }

    /// Transition over the full interval.
    pub fn endpoint(&self) -> &OuStep {
        &self.steps[0]
    }
}

/// Euler recursion of the guided SDE between pinned endpoints:
/// `X_{j+1} = X_j + mu°(t_j, X_j) dt + sigma(X_j) dW_j` for
/// j = 0..n_steps-2; the final state is set to x_end exactly (the last
/// increment is part of the Brownian block but unused by the recursion).
pub fn build_guided_path_with(
    sde: &SdeSpec,
    ladder: &OuLadder,
    x_start: &DVector<f64>,
    x_end: &DVector<f64>,
    increments: &[DVector<f64>],
) -> Result<GuidedPath> {
    let grid = ladder.grid;
    if increments.len() != grid.n_steps {
        return Err(Error::Invalid(format!(
            "increments: expected {} blocks, got {}",
            grid.n_steps,
            increments.len()
        )));
    }
    let mut states = Vec::with_capacity(grid.n_steps + 1);
    states.push(x_start.clone());
    for j in 0..grid.n_steps.saturating_sub(1) {
        let x = &states[j];
        let score = ladder.steps[j].score(x, x_end);
        let drift = sde.drift(x) + sde.sigma_sq(x) * score;
        let next = x + drift * grid.dt + sde.sigma(x) * &increments[j];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathDivergence { step: j + 1 });
        }
        states.push(next);
    }
    states.push(x_end.clone());
    Ok(GuidedPath { states, grid })
}

/// [`build_guided_path_with`] building the ladder internally.
pub fn build_guided_path(
    sde: &SdeSpec,
    aux: &AuxiliaryOu,
    x_start: &DVector<f64>,
    x_end: &DVector<f64>,
    grid: &BridgeGrid,
    increments: &[DVector<f64>],
) -> Result<GuidedPath> {
    let ladder = OuLadder::new(aux, grid)?;
    build_guided_path_with(sde, &ladder, x_start, x_end, increments)
}

/// L(t, x) for one grid time, given that time's OU transition.
pub fn log_l_with(sde: &SdeSpec, aux: &AuxiliaryOu, step: &OuStep, x: &DVector<f64>, x_end: &DVector<f64>) -> f64 {
    let score = step.score(x, x_end);
    let dmu = sde.drift(x) - aux.mu_tilde(x);
    let mut l = dmu.dot(&score);
    let dsig = sde.sigma_sq(x) - aux.sigma_sq_tilde();
    if dsig.abs().max() != 0.0 {
        // -hess - score score^T = E^T Q^{-1} E - score score^T.
        let m = -step.hessian() - &score * score.transpose();
        l -= 0.5 * (&dsig * m).trace();
    }
    l
}

/// L_{s2}(t, x); see module docs.
pub fn log_l(
    sde: &SdeSpec,
    aux: &AuxiliaryOu,
    t: f64,
    x: &DVector<f64>,
    x_end: &DVector<f64>,
    s2: f64,
) -> Result<f64> {
    if !(s2 > t) {
        return Err(Error::Invalid("log_l requires s2 > t".into()));
    }
    Ok(log_l_with(sde, aux, &aux.transition(s2 - t)?, x, x_end))
}

/// Riemann sum of L over left endpoints (all n_steps of them).
pub fn log_l_sum_with(sde: &SdeSpec, aux: &AuxiliaryOu, ladder: &OuLadder, path: &GuidedPath) -> f64 {
    let x_end = path.end();
    (0..ladder.grid.n_steps)
        .map(|j| log_l_with(sde, aux, &ladder.steps[j], &path.states[j], x_end) * ladder.grid.dt)
        .sum()
}

/// Discretized Radon-Nikodym weight
/// `log R^l = sum_j L(t_j, X_j) Xi + log f_tilde(x_end | x_start)`.
pub fn log_r_l_with(sde: &SdeSpec, aux: &AuxiliaryOu, ladder: &OuLadder, path: &GuidedPath) -> f64 {
    log_l_sum_with(sde, aux, ladder, path) + ladder.endpoint().log_density(path.end(), path.start())
}

/// [`log_r_l_with`] building the ladder internally.
pub fn log_r_l(sde: &SdeSpec, aux: &AuxiliaryOu, path: &GuidedPath) -> Result<f64> {
    let ladder = OuLadder::new(aux, &path.grid)?;
    Ok(log_r_l_with(sde, aux, &ladder, path))
}

// ---------------------------------------------------------------------------
// Linearization
// ---------------------------------------------------------------------------

/// Build the auxiliary OU process for one observation interval: x_ref is
/// the deterministic Euler flow of `x' = mu(x)` from x_start over the
/// interval with `substeps` iterations; J is the drift Jacobian at x_ref;
/// sigma_tilde = sigma(x_ref). The flow step count is fixed by the caller
/// and independent of the bridge grid level, so the auxiliary process does
/// not change when the grid is refined.
pub fn linearize(
    sde: &SdeSpec,
    x_start: &DVector<f64>,
    interval: f64,
    substeps: usize,
) -> Result<AuxiliaryOu> {
    if substeps == 0 || !(interval > 0.0) {
        return Err(Error::Invalid("linearize: need interval > 0 and substeps >= 1".into()));
    }
    let h = interval / substeps as f64;
    let mut x = x_start.clone();
    for _ in 0..substeps {
        x = &x + sde.drift(&x) * h;
    }
    let j = sde.jacobian_at(&x);
    let mu_ref = sde.drift(&x);
    let tilde_sigma = sde.sigma(&x);
    AuxiliaryOu::new(j, x, mu_ref, tilde_sigma)
}

// ---------------------------------------------------------------------------
// Composite filter weights
// ---------------------------------------------------------------------------

/// Low-noise bridge-filter weight
/// `w = R^l(C^l(u(z', x), W^l, u(z, x))) p(u(z, eps)) / q(z | z')`,
/// assembled from the primitives above.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_pf_weight_low_noise(
    z_prev: &DVector<f64>,
    z_new: &DVector<f64>,
    chart_prev: &AffineChart,
    chart_new: &AffineChart,
    increments: &[DVector<f64>],
    sde: &SdeSpec,
    aux: &AuxiliaryOu,
    grid: &BridgeGrid,
    log_q: f64,
    noise_log_density: impl Fn(&DVector<f64>) -> f64,
) -> Result<f64> {
    let x_prev = chart_prev.map_state(z_prev)?;
    let x_new = chart_new.map_state(z_new)?;
    let eps = chart_new.map_noise(z_new)?;
    let ladder = OuLadder::new(aux, grid)?;
    let path = build_guided_path_with(sde, &ladder, &x_prev, &x_new, increments)?;
    Ok(log_r_l_with(sde, aux, &ladder, &path) + noise_log_density(&eps) - log_q)
}

/// Degenerate bridge-filter weight `w = R^l(C^l(u*(z'), W^l, u*(z))) / q`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_pf_weight_degenerate(
    z_prev: &DVector<f64>,
    z_new: &DVector<f64>,
    chart_prev: &AffineChart,
    chart_new: &AffineChart,
    increments: &[DVector<f64>],
    sde: &SdeSpec,
    aux: &AuxiliaryOu,
    grid: &BridgeGrid,
    log_q: f64,
) -> Result<f64> {
    let x_prev = chart_prev.map_state(z_prev)?;
    let x_new = chart_new.map_state(z_new)?;
    let ladder = OuLadder::new(aux, grid)?;
    let path = build_guided_path_with(sde, &ladder, &x_prev, &x_new, increments)?;
    Ok(log_r_l_with(sde, aux, &ladder, &path) - log_q)
}

/// Natural-parameterization bridge variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NaturalDiffusionVariant {
    /// Endpoint proposed from the auxiliary transition itself; its density
    /// cancels the f_tilde factor inside R^l, leaving
    /// `w = h(y | x) exp{sum L Xi}`.
    Bootstrap,
    /// Endpoint proposed from the conjugate of the Gaussian observation
    /// with the auxiliary transition; `w = exp{sum L Xi} * evidence` with
    /// evidence the Gaussian marginal of y.
    GuidedOptimal,
}

/// Weight for the natural-parameterization bridge filters, given the
/// proposed endpoint and its path. `log_h` is `log h(y | x_new)` and
/// `log_evidence` the conjugate marginal; exactly one is used per variant.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_pf_weight_natural(
    x_prev: &DVector<f64>,
    x_new: &DVector<f64>,
    increments: &[DVector<f64>],
    sde: &SdeSpec,
    aux: &AuxiliaryOu,
    grid: &BridgeGrid,
    variant: NaturalDiffusionVariant,
    log_h: f64,
    log_evidence: f64,
) -> Result<f64> {
    let ladder = OuLadder::new(aux, grid)?;
    let path = build_guided_path_with(sde, &ladder, x_prev, x_new, increments)?;
    let sum_l = log_l_sum_with(sde, aux, &ladder, &path);
    Ok(match variant {
        NaturalDiffusionVariant::Bootstrap => log_h + sum_l,
        NaturalDiffusionVariant::GuidedOptimal => log_evidence + sum_l,
    })
}

// ---------------------------------------------------------------------------
// State-dependent diffusion correction
// ---------------------------------------------------------------------------

/// Endpoint proposal for state-dependent models: the auxiliary density with
/// the endpoint frozen at x_ref (sigma_tilde = sigma(x_ref)). Proposing
/// from it instead of the x'-dependent auxiliary density incurs the
/// correction term `log f_dyn(x' | x) - log f_frozen(x' | x)` in the
/// weights, with f_dyn built from sigma_tilde = sigma(x').
pub struct StatedepProposal {
    pub frozen_endpoint: OuStep,
    interval: f64,
}

impl StatedepProposal {
    pub fn new(aux_frozen: &AuxiliaryOu, interval: f64) -> Result<Self> {
        Ok(Self { frozen_endpoint: aux_frozen.transition(interval)?, interval })
    }

    /// Dynamic auxiliary process for a proposed endpoint, plus the extra
    /// log-weight term. Exactly zero when sigma is constant.
    pub fn correction(
        &self,
        sde: &SdeSpec,
        aux_frozen: &AuxiliaryOu,
        x_prev: &DVector<f64>,
        x_new: &DVector<f64>,
    ) -> Result<(AuxiliaryOu, f64)> {
        let aux_dyn = aux_frozen.with_tilde_sigma(sde.sigma(x_new))?;
        let dyn_endpoint = aux_dyn.transition(self.interval)?;
        let corr = dyn_endpoint.log_density(x_new, x_prev)
            - self.frozen_endpoint.log_density(x_new, x_prev);
        Ok((aux_dyn, corr))
    }
}

/// Free-function constructor: frozen endpoint sampler plus correction
/// machinery for one interval starting at x_prev.
pub fn statedep_proposal_correction(
    _sde: &SdeSpec,
    aux_frozen: &AuxiliaryOu,
    _x_prev: &DVector<f64>,
    interval: f64,
) -> Result<StatedepProposal> {
    StatedepProposal::new(aux_frozen, interval)
}
