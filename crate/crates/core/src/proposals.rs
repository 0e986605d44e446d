//! Proposals and weights for the four discrete-time filter variants:
//! bootstrap and optimal under the natural parameterization, and the
//! closed-form Gaussian optimal proposals under the low-noise (extended
//! manifold) and degenerate (reduced manifold) parameterizations.
//!
//! Conventions for the returned log-weights, per operation:
//!
//! - `bootstrap_natural`: the quadratic form `-(1/(2 delta)) r^T Sigma^{-1} r`
//!   with all particle-independent constants dropped.
//! - `optimal_natural`: the complete Gaussian evidence
//!   `log N(y; A f(x'), delta Sigma + A Omega A^T)`.
//! - `low_noise_optimal` / `degenerate_optimal`: the displayed closed forms
//!   `(1/2)(mu^T P mu - m^T C^{-1} m)`, with the parameterization-dependent
//!   normalizers dropped (they are shared by all particles at a given step,
//!   so filter normalization cancels them). The dropped constant is
//!   available from [`low_noise_dropped_log_const`] /
//!   [`degenerate_dropped_log_const`] when the exact marginal is needed.
//! - `low_noise_generic_log_weight`: the exact log ratio
//!   `log p + log f - log q` of the supplied densities.
//!
//! All evaluators are stateless over immutable model objects and safe to
//! call per particle from the engine's worker pool.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{AffineChart, ChartKind, ConstraintGeometry};
use crate::linalg::{standard_normal_vector, SpdFactor, LN_2PI};
use crate::ssm::{GaussianTransition, ObservationSpec};

/// Parameters of the low-noise optimal proposal N(mu_tilde, Omega_tilde) in
/// extended chart coordinates (dimension d_x), held in precision form.
pub struct LowNoiseProposalParams {
    pub mu_tilde: DVector<f64>,
    pub m_tilde: DVector<f64>,
    prec: Arc<SpdFactor>,
}

/// Parameters of the degenerate optimal proposal N(mu_star, Omega_star) in
/// reduced chart coordinates (dimension d_x - d_y).
pub struct DegenerateProposalParams {
    pub mu_star: DVector<f64>,
    pub m_star: DVector<f64>,
    prec: Arc<SpdFactor>,
}

macro_rules! conjugate_params_impl {
    ($ty:ty, $mean:ident) => {
        impl $ty {
            pub fn dim(&self) -> usize {
                self.$mean.len()
            }

            /// Precision matrix factor (Omega^{-1} in the respective
            /// parameterization).
            pub fn precision(&self) -> &SpdFactor {
                &self.prec
            }

            /// Materialized covariance (tests and diagnostics).
            pub fn covariance(&self) -> DMatrix<f64> {
                let d = self.dim();
                self.prec.solve_mat(&DMatrix::identity(d, d))
            }

            pub fn log_density(&self, z: &DVector<f64>) -> f64 {
                let d = z - &self.$mean;
                -0.5 * (self.prec.quad(&d) - self.prec.logdet() + self.dim() as f64 * LN_2PI)
            }

            /// Draw z = mean + L^{-T} eta with P = L L^T; the leading block
            /// of the draw depends only on the leading normals, which is
            /// what couples the low-noise and degenerate filters under a
            /// shared stream.
            pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
                let eta = standard_normal_vector(self.dim(), rng);
                Ok(&self.$mean + self.prec.inv_factor_t_solve(&eta)?)
            }
        }
    };
}

conjugate_params_impl!(LowNoiseProposalParams, mu_tilde);
conjugate_params_impl!(DegenerateProposalParams, mu_star);

// ---------------------------------------------------------------------------
// Natural parameterization
// ---------------------------------------------------------------------------

/// Bootstrap log-weight at a proposed state:
/// `-(1/(2 delta)) (y - A x)^T Sigma^{-1} (y - A x)`, constants dropped.
pub fn bootstrap_natural_log_weight(
    obs: &ObservationSpec,
    n: usize,
    y: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<f64> {
    if obs.delta <= 0.0 {
        return Err(Error::Unsupported(
            "bootstrap weight is undefined at delta = 0 (no Lebesgue observation density)".into(),
        ));
    }
    let r = y - obs.a_at(n) * x;
    Ok(-0.5 / obs.delta * obs.sigma().quad_inv(&r))
}

/// Bootstrap proposal: draw from the state transition, weigh by the
/// observation quadratic form.
pub fn bootstrap_natural<R: rand::Rng + ?Sized>(
    x_prev: &DVector<f64>,
    transition: &GaussianTransition,
    obs: &ObservationSpec,
    n: usize,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    if obs.delta <= 0.0 {
        return Err(Error::Unsupported(
            "bootstrap proposal is undefined at delta = 0".into(),
        ));
    }
    let x = transition.sample(x_prev, rng);
    let w = bootstrap_natural_log_weight(obs, n, y, &x)?;
    Ok((x, w))
}

/// Shared pieces of the natural optimal proposal for one (A, Sigma, Omega,
/// delta): the conjugate precision `Omega^{-1} + A^T Sigma^{-1} A / delta`
/// and the evidence covariance `delta Sigma + A Omega A^T` are
/// particle-independent.
pub struct NaturalOptimalCache {
    prec: Arc<SpdFactor>,
    omega_inv: DMatrix<f64>,
    a_t_sig_inv_over_delta: DMatrix<f64>,
    evidence_cov: SpdFactor,
    a: DMatrix<f64>,
}

impl NaturalOptimalCache {
    pub fn new(transition: &GaussianTransition, obs: &ObservationSpec, n: usize) -> Result<Self> {
        if obs.delta <= 0.0 {
            return Err(Error::Unsupported(
                "natural optimal proposal is undefined at delta = 0".into(),
            ));
        }
        let a = obs.a_at(n).clone();
        let d_x = transition.dim();
        let omega_inv = transition.cov().solve_mat(&DMatrix::identity(d_x, d_x));
        let sig_inv_a = obs.sigma().solve_mat(&a);
        let prec = &omega_inv + a.transpose() * &sig_inv_a / obs.delta;
        let a_t_sig_inv_over_delta = sig_inv_a.transpose() / obs.delta;
        let a_omega_at = &a * transition.cov().matrix() * a.transpose();
        let evidence_cov =
            SpdFactor::from_spd(obs.delta * obs.sigma().matrix() + a_omega_at)?;
        Ok(Self {
            prec: Arc::new(SpdFactor::from_spd(prec)?),
            omega_inv,
            a_t_sig_inv_over_delta,
            evidence_cov,
            a,
        })
    }

    /// Conjugate posterior N(m_c, C_c) at predicted mean f = f(x_prev), and
    /// the exact log marginal `log N(y; A f, delta Sigma + A Omega A^T)`.
    pub fn parts(&self, f: &DVector<f64>, y: &DVector<f64>) -> (ConjugateNatural, f64) {
        let lin = &self.omega_inv * f + &self.a_t_sig_inv_over_delta * y;
        let mean = self.prec.solve_vec(&lin);
        let resid = y - &self.a * f;
        let log_evidence = -0.5
            * (self.evidence_cov.quad_inv(&resid)
                + self.evidence_cov.logdet()
                + resid.len() as f64 * LN_2PI);
        (ConjugateNatural { mean, prec: Arc::clone(&self.prec) }, log_evidence)
    }
}

/// The conjugate posterior in natural coordinates.
pub struct ConjugateNatural {
    pub mean: DVector<f64>,
    prec: Arc<SpdFactor>,
}

impl ConjugateNatural {
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        -0.5 * (self.prec.quad(&d) - self.prec.logdet() + x.len() as f64 * LN_2PI)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        self.prec.solve_mat(&DMatrix::identity(d, d))
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let eta = standard_normal_vector(self.mean.len(), rng);
        Ok(&self.mean + self.prec.inv_factor_t_solve(&eta)?)
    }
}

/// Conjugate update of an arbitrary Gaussian predicted state
/// N(pred_mean, pred_cov) against the observation
/// `y = A x + sqrt(delta) eps`, `eps ~ N(0, sigma)`: returns the posterior
/// in precision form and the exact log marginal
/// `log N(y; A pred_mean, delta Sigma + A pred_cov A^T)`.
///
/// [`NaturalOptimalCache`] is the precomputed fast path for a fixed
/// transition; this standalone version serves per-particle predicted
/// covariances (the diffusion-bridge endpoint proposals).
pub fn gaussian_observation_conjugate(
    pred_mean: &DVector<f64>,
    pred_cov: &SpdFactor,
    a: &DMatrix<f64>,
    sigma: &SpdFactor,
    delta: f64,
    y: &DVector<f64>,
) -> Result<(crate::linalg::PrecisionGaussian, f64)> {
    if delta <= 0.0 {
        return Err(Error::Unsupported(
            "observation conjugate update requires delta > 0".into(),
        ));
    }
    let d = pred_mean.len();
    let cov_inv = pred_cov.solve_mat(&DMatrix::identity(d, d));
    let sig_inv_a = sigma.solve_mat(a);
    let prec = crate::linalg::symmetrize(&(&cov_inv + a.transpose() * &sig_inv_a / delta));
    let lin = &cov_inv * pred_mean + sig_inv_a.transpose() * y / delta;
    let prec = SpdFactor::from_spd(prec)?;
    let mean = prec.solve_vec(&lin);
    let evidence_cov =
        SpdFactor::from_spd(delta * sigma.matrix() + a * pred_cov.matrix() * a.transpose())?;
    let resid = y - a * pred_mean;
    let log_evidence = -0.5
        * (evidence_cov.quad_inv(&resid) + evidence_cov.logdet() + resid.len() as f64 * LN_2PI);
    Ok((crate::linalg::PrecisionGaussian { mean, prec }, log_evidence))
}

/// Optimal natural proposal: draw from the conjugate posterior of the
/// Gaussian observation against the Gaussian transition; the weight is the
/// exact log marginal (depends on x_prev only).
pub fn optimal_natural<R: rand::Rng + ?Sized>(
    x_prev: &DVector<f64>,
    transition: &GaussianTransition,
    obs: &ObservationSpec,
    n: usize,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let cache = NaturalOptimalCache::new(transition, obs, n)?;
    let (post, logw) = cache.parts(&transition.mean(x_prev), y);
    Ok((post.sample(rng)?, logw))
}

// ---------------------------------------------------------------------------
// Manifold parameterizations (Gaussian conjugate algebra in chart coordinates)
// ---------------------------------------------------------------------------

/// Step-independent pieces of the manifold conjugate algebra for a fixed
/// basis and covariances: the chart precision, the linear map
/// `b = Vx^T C^{-1} m`, and `C^{-1}` for the quadratic term. Shared across
/// steps and particles whenever A and delta are constant.
pub struct ManifoldConjugateCache {
    prec: Arc<SpdFactor>,
    bmat: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
}

impl ManifoldConjugateCache {
    /// Reduced chart: precision `V^T C^{-1} V`.
    pub fn reduced(v: &DMatrix<f64>, pred_cov: &SpdFactor) -> Result<Self> {
        let cov_inv = pred_cov.solve_mat(&DMatrix::identity(pred_cov.dim(), pred_cov.dim()));
        let bmat = v.transpose() * &cov_inv;
        let prec = &bmat * v;
        Ok(Self {
            prec: Arc::new(SpdFactor::from_spd(crate::linalg::symmetrize(&prec))?),
            bmat,
            cov_inv,
        })
    }

    /// Extended chart: precision
    /// `Ve^T Sigma^{-1} Ve + Vx^T C^{-1} Vx` for the basis split (Vx, Ve).
    pub fn extended(
        vx: &DMatrix<f64>,
        ve: &DMatrix<f64>,
        pred_cov: &SpdFactor,
        noise_cov: &SpdFactor,
    ) -> Result<Self> {
        let cov_inv = pred_cov.solve_mat(&DMatrix::identity(pred_cov.dim(), pred_cov.dim()));
        let bmat = vx.transpose() * &cov_inv;
        let prec = ve.transpose() * noise_cov.solve_mat(ve) + &bmat * vx;
        Ok(Self {
            prec: Arc::new(SpdFactor::from_spd(crate::linalg::symmetrize(&prec))?),
            bmat,
            cov_inv,
        })
    }

    pub fn precision(&self) -> &Arc<SpdFactor> {
        &self.prec
    }

    /// Conjugate mean, shift `m = pred_mean - x_star`, and the displayed
    /// log-weight `(1/2)(mu^T P mu - m^T C^{-1} m)`.
    pub fn conjugate(
        &self,
        pred_mean: &DVector<f64>,
        x_star: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, f64) {
        let m = pred_mean - x_star;
        let b = &self.bmat * &m;
        let mu = self.prec.solve_vec(&b);
        let logw = 0.5 * (mu.dot(&b) - m.dot(&(&self.cov_inv * &m)));
        (mu, m, logw)
    }
}

fn chart_state_base(chart: &AffineChart) -> DVector<f64> {
    chart.base_point().rows(0, chart.d_x()).into_owned()
}

/// Low-noise optimal proposal at an extended chart, against an arbitrary
/// Gaussian predicted state N(pred_mean, pred_cov) and Gaussian noise
/// density N(0, noise_cov). Returns the proposal parameters and the
/// displayed log-weight.
pub fn extended_conjugate(
    chart: &AffineChart,
    pred_mean: &DVector<f64>,
    pred_cov: &SpdFactor,
    noise_cov: &SpdFactor,
) -> Result<(LowNoiseProposalParams, f64)> {
    if chart.kind() != ChartKind::Extended {
        return Err(Error::Invalid("extended_conjugate requires an extended chart".into()));
    }
    let split = chart.split_basis();
    let cache =
        ManifoldConjugateCache::extended(&split.state_rows, &split.noise_rows, pred_cov, noise_cov)?;
    let (mu, m, logw) = cache.conjugate(pred_mean, &chart_state_base(chart));
    Ok((LowNoiseProposalParams { mu_tilde: mu, m_tilde: m, prec: Arc::clone(&cache.prec) }, logw))
}

/// Degenerate optimal proposal at a reduced chart against
/// N(pred_mean, pred_cov).
pub fn reduced_conjugate(
    chart: &AffineChart,
    pred_mean: &DVector<f64>,
    pred_cov: &SpdFactor,
) -> Result<(DegenerateProposalParams, f64)> {
    if chart.kind() != ChartKind::Reduced {
        return Err(Error::Invalid("reduced_conjugate requires a reduced chart".into()));
    }
    let cache = ManifoldConjugateCache::reduced(chart.basis(), pred_cov)?;
    let (mu, m, logw) = cache.conjugate(pred_mean, chart.base_point());
    Ok((DegenerateProposalParams { mu_star: mu, m_star: m, prec: Arc::clone(&cache.prec) }, logw))
}

/// Low-noise optimal proposal and displayed weight for the Gaussian model:
/// predicted state N(f(x_prev), Omega), noise N(0, Sigma).
pub fn low_noise_optimal(
    x_prev: &DVector<f64>,
    chart: &AffineChart,
    transition: &GaussianTransition,
    obs: &ObservationSpec,
) -> Result<(LowNoiseProposalParams, f64)> {
    extended_conjugate(chart, &transition.mean(x_prev), transition.cov(), obs.sigma())
}

/// Degenerate optimal proposal and displayed weight for the Gaussian model.
pub fn degenerate_optimal(
    x_prev: &DVector<f64>,
    chart: &AffineChart,
    transition: &GaussianTransition,
) -> Result<(DegenerateProposalParams, f64)> {
    reduced_conjugate(chart, &transition.mean(x_prev), transition.cov())
}

/// The constant dropped from the low-noise displayed weight: adding it
/// gives the exact log marginal `log int p(u(z, eps)) f(u(z, x) | x') dz`.
pub fn low_noise_dropped_log_const(
    params: &LowNoiseProposalParams,
    pred_cov: &SpdFactor,
    noise_cov: &SpdFactor,
) -> f64 {
    -0.5 * (noise_cov.dim() as f64 * LN_2PI
        + noise_cov.logdet()
        + pred_cov.logdet()
        + params.precision().logdet())
}

/// The constant dropped from the degenerate displayed weight: adding it
/// gives `log int f(u*(z) | x') dz`.
pub fn degenerate_dropped_log_const(
    params: &DegenerateProposalParams,
    pred_cov: &SpdFactor,
) -> f64 {
    let d_y = pred_cov.dim() - params.dim();
    -0.5 * (d_y as f64 * LN_2PI + pred_cov.logdet() + params.precision().logdet())
}

// ---------------------------------------------------------------------------
// Generic low-noise weight
// ---------------------------------------------------------------------------

/// Exact log of `p(u(z, eps)) f(u(z, x) | x_prev) / q(z | z_prev)` for
/// arbitrary positive densities, with the previous state already mapped to
/// ambient coordinates.
pub fn low_noise_generic_log_weight_from_ambient(
    x_prev: &DVector<f64>,
    z_new: &DVector<f64>,
    chart_new: &AffineChart,
    transition_log_density: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    noise_log_density: impl Fn(&DVector<f64>) -> f64,
    log_q: f64,
) -> Result<f64> {
    if log_q == f64::NEG_INFINITY {
        return Err(Error::Invalid(
            "generic low-noise weight: proposal density must be positive".into(),
        ));
    }
    let u_x = chart_new.map_state(z_new)?;
    let u_eps = chart_new.map_noise(z_new)?;
    Ok(noise_log_density(&u_eps) + transition_log_density(&u_x, x_prev) - log_q)
}

/// Wrapper of [`low_noise_generic_log_weight_from_ambient`] taking the
/// previous state in chart coordinates.
#[allow(clippy::too_many_arguments)]
pub fn low_noise_generic_log_weight(
    z_prev: &DVector<f64>,
    z_new: &DVector<f64>,
    chart_prev: &AffineChart,
    chart_new: &AffineChart,
    transition_log_density: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    noise_log_density: impl Fn(&DVector<f64>) -> f64,
    proposal_log_density: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
) -> Result<f64> {
    let x_prev = chart_prev.map_state(z_prev)?;
    let log_q = proposal_log_density(z_new, z_prev);
    low_noise_generic_log_weight_from_ambient(
        &x_prev,
        z_new,
        chart_new,
        transition_log_density,
        noise_log_density,
        log_q,
    )
}

// ---------------------------------------------------------------------------
// Weight limit check
// ---------------------------------------------------------------------------

/// One row of the weight-limit table.
#[derive(Clone, Copy, Debug)]
pub struct LimitRow {
    pub delta: f64,
    pub log_w_low_noise: f64,
    pub log_w_degenerate: f64,
    /// |w^{delta,opt} - w^{*,opt}| / w^{*,opt}, computed in the log domain.
    pub rel_gap: f64,
}

/// Evaluate the displayed low-noise optimal weight along a delta sequence
/// against the degenerate optimal weight at the coupled previous point
/// (the z-block of `z_tilde_prev`), for shared charts built from the same
/// data pair (y_prev, y_n).
pub fn weight_limit_check(
    geom: &ConstraintGeometry,
    y_prev: &DVector<f64>,
    y_n: &DVector<f64>,
    z_tilde_prev: &DVector<f64>,
    transition: &GaussianTransition,
    noise_cov: &SpdFactor,
    deltas: &[f64],
) -> Result<Vec<LimitRow>> {
    if z_tilde_prev.len() != geom.d_x() {
        return Err(Error::Invalid("weight_limit_check: z_tilde_prev must have length d_x".into()));
    }
    // Degenerate side, once.
    let chart_prev_star = geom.reduced_chart(y_prev)?;
    let chart_n_star = geom.reduced_chart(y_n)?;
    let z_prev = z_tilde_prev.rows(0, geom.d_x() - geom.d_y()).into_owned();
    let x_prev_star = chart_prev_star.map(&z_prev)?;
    let (_, log_w_star) =
        reduced_conjugate(&chart_n_star, &transition.mean(&x_prev_star), transition.cov())?;

    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let chart_prev = geom.extended_chart(y_prev, delta)?;
        let chart_n = geom.extended_chart(y_n, delta)?;
        let x_prev = chart_prev.map_state(z_tilde_prev)?;
        let (_, log_w) =
            extended_conjugate(&chart_n, &transition.mean(&x_prev), transition.cov(), noise_cov)?;
        let rel_gap = (log_w - log_w_star).exp_m1().abs();
        rows.push(LimitRow { delta, log_w_low_noise: log_w, log_w_degenerate: log_w_star, rel_gap });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::split_extended_vec;
    use crate::linalg::standard_normal_vector;
    use crate::ssm::{lgm_transition, ObsMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "a={a} b={b} |diff|={}", (a - b).abs());
    }

    fn obs_1of2(delta: f64) -> ObservationSpec {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        ObservationSpec::new(ObsMatrix::Constant(a), DMatrix::identity(1, 1), delta).unwrap()
    }

    #[test]
    fn bootstrap_weight_examples() {
        let obs = obs_1of2(1e-4);
        let x = DVector::from_row_slice(&[2.0, -1.0]);
        // Exact observation: zero residual, zero log-weight.
        let y = DVector::from_row_slice(&[2.0]);
        assert_eq!(bootstrap_natural_log_weight(&obs, 1, &y, &x).unwrap(), 0.0);

        // Doubling the residual quadruples the negative log-weight.
        let y1 = DVector::from_row_slice(&[2.0 + 0.3]);
        let y2 = DVector::from_row_slice(&[2.0 + 0.6]);
        let w1 = bootstrap_natural_log_weight(&obs, 1, &y1, &x).unwrap();
        let w2 = bootstrap_natural_log_weight(&obs, 1, &y2, &x).unwrap();
        assert_close(w2, 4.0 * w1, 1e-9 * w1.abs());

        // Sigma = I, delta = 1e-4: log-weight = -5000 |r|^2.
        assert_close(w1, -5000.0 * 0.3 * 0.3, 1e-9);

        // Degenerate noise is unsupported.
        let obs0 = obs_1of2(0.0);
        assert!(matches!(
            bootstrap_natural_log_weight(&obs0, 1, &y, &x),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn optimal_natural_pointwise_identity() {
        // h(y|x) f(x|x') = evidence * posterior(x), pointwise.
        let transition =
            lgm_transition(DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2)).unwrap();
        let obs = obs_1of2(0.07);
        let y = DVector::from_row_slice(&[0.4]);
        let x_prev = DVector::from_row_slice(&[1.0, -0.5]);
        let cache = NaturalOptimalCache::new(&transition, &obs, 1).unwrap();
        let (post, log_evidence) = cache.parts(&transition.mean(&x_prev), &y);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = standard_normal_vector(2, &mut rng) * 2.0;
            let lhs = obs.obs_log_density(1, &y, &x).unwrap() + transition.log_density(&x, &x_prev);
            let rhs = log_evidence + post.log_density(&x);
            assert_close(lhs, rhs, 1e-10);
        }
    }

    #[test]
    fn optimal_natural_large_delta_flattens_to_prior() {
        let transition =
            lgm_transition(DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2)).unwrap();
        let obs = obs_1of2(1e12);
        let y = DVector::from_row_slice(&[0.4]);
        let cache = NaturalOptimalCache::new(&transition, &obs, 1).unwrap();
        let xp1 = DVector::from_row_slice(&[1.0, 0.0]);
        let xp2 = DVector::from_row_slice(&[-2.0, 3.0]);
        let (post, w1) = cache.parts(&transition.mean(&xp1), &y);
        let (_, w2) = cache.parts(&transition.mean(&xp2), &y);
        // Proposal ~ prior N(f(x'), Omega).
        assert!((post.mean.clone() - transition.mean(&xp1)).norm() < 1e-10);
        assert!((post.covariance() - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        // Weight flat across particles (likelihood precision vanished).
        assert!((w1 - w2).abs() < 1e-10);
    }

    // Composite Simpson on [a, b] with an even number of panels.
    fn simpson(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let n = panels * 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn simpson2(
        f: impl Fn(f64, f64) -> f64,
        ax: (f64, f64),
        ay: (f64, f64),
        panels: usize,
    ) -> f64 {
        simpson(|x| simpson(|y| f(x, y), ay.0, ay.1, panels), ax.0, ax.1, panels)
    }

    #[test]
    fn optimal_natural_evidence_matches_quadrature() {
        let transition =
            lgm_transition(DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.2, 0.7]), {
                DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.1])
            })
            .unwrap();
        let obs = obs_1of2(0.05);
        let y = DVector::from_row_slice(&[0.3]);
        let x_prev = DVector::from_row_slice(&[0.5, -0.2]);
        let cache = NaturalOptimalCache::new(&transition, &obs, 1).unwrap();
        let (_, log_evidence) = cache.parts(&transition.mean(&x_prev), &y);
        let f = transition.mean(&x_prev);
        let integral = simpson2(
            |x1, x2| {
                let x = DVector::from_row_slice(&[x1, x2]);
                (obs.obs_log_density(1, &y, &x).unwrap() + transition.log_density(&x, &x_prev))
                    .exp()
            },
            (f[0] - 12.0, f[0] + 12.0),
            (f[1] - 12.0, f[1] + 12.0),
            240,
        );
        assert_close(integral.ln(), log_evidence, 1e-8);
    }

    fn lgm_2d() -> GaussianTransition {
        lgm_transition(DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn low_noise_optimal_constant_map_is_flat() {
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.8])).unwrap();
        let y = DVector::from_row_slice(&[0.7]);
        let chart = geom.extended_chart(&y, 1e-3).unwrap();
        let x_star = geom.min_norm_solution(&y).unwrap();
        let constant = crate::ssm::GaussianTransition::new(
            Arc::new(move |_: &DVector<f64>| x_star.clone()),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let obs = obs_1of2(1e-3);
        let (params, logw) =
            low_noise_optimal(&DVector::zeros(2), &chart, &constant, &obs).unwrap();
        assert!(params.m_tilde.norm() < 1e-14);
        assert!(params.mu_tilde.norm() < 1e-14);
        assert_eq!(logw, 0.0);
    }

    #[test]
    fn low_noise_optimal_pointwise_factorization_and_quadrature() {
        let transition = lgm_2d();
        let obs = obs_1of2(1e-2);
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let y = DVector::from_row_slice(&[0.25]);
        let chart = geom.extended_chart(&y, obs.delta).unwrap();
        let x_prev = DVector::from_row_slice(&[0.4, -0.7]);
        let (params, logw) = low_noise_optimal(&x_prev, &chart, &transition, &obs).unwrap();
        let full_logw =
            logw + low_noise_dropped_log_const(&params, transition.cov(), obs.sigma());

        // Pointwise: p(u(z, eps)) f(u(z, x)|x') = exp(full_logw) * N(z; mu, Omega_tilde).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let z = standard_normal_vector(2, &mut rng) * 2.0;
            let u = chart.map(&z).unwrap();
            let (ux, ue) = split_extended_vec(&u, 2).unwrap();
            let lhs = obs.noise_log_density(&ue) + transition.log_density(&ux, &x_prev);
            let rhs = full_logw + params.log_density(&z);
            assert_close(lhs, rhs, 1e-9);
        }

        // Normalizer matches 2-d quadrature of the numerator over z.
        let c = &params.mu_tilde;
        let integral = simpson2(
            |z1, z2| {
                let z = DVector::from_row_slice(&[z1, z2]);
                let u = chart.map(&z).unwrap();
                let (ux, ue) = split_extended_vec(&u, 2).unwrap();
                (obs.noise_log_density(&ue) + transition.log_density(&ux, &x_prev)).exp()
            },
            (c[0] - 12.0, c[0] + 12.0),
            (c[1] - 12.0, c[1] + 12.0),
            240,
        );
        assert_close(integral.ln(), full_logw, 1e-7);
    }

    #[test]
    fn degenerate_optimal_examples_and_quadrature() {
        let transition = lgm_2d();
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap();
        let y = DVector::from_row_slice(&[1.0]);
        let chart = geom.reduced_chart(&y).unwrap();

        // Omega = I: chart precision is V^T V = I.
        let x_prev = DVector::from_row_slice(&[0.6, 0.2]);
        let (params, logw) = degenerate_optimal(&x_prev, &chart, &transition).unwrap();
        assert!((params.covariance() - DMatrix::identity(1, 1)).abs().max() < 1e-12);

        // Full marginal matches 1-d quadrature of f(u*(z) | x_prev).
        let full_logw = logw + degenerate_dropped_log_const(&params, transition.cov());
        let c = params.mu_star[0];
        let integral = simpson(
            |z1| {
                let z = DVector::from_row_slice(&[z1]);
                let u = chart.map(&z).unwrap();
                transition.log_density(&u, &x_prev).exp()
            },
            c - 14.0,
            c + 14.0,
            400,
        );
        assert_close(integral.ln(), full_logw, 1e-7);

        // Constant map: mu* = 0, weight 1.
        let x_star = geom.min_norm_solution(&y).unwrap();
        let constant = crate::ssm::GaussianTransition::new(
            Arc::new(move |_: &DVector<f64>| x_star.clone()),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let (params, logw) = degenerate_optimal(&x_prev, &chart, &constant).unwrap();
        assert!(params.mu_star.norm() < 1e-14);
        assert_eq!(logw, 0.0);
    }

    #[test]
    fn generic_weight_matches_recomposition_and_flags_zero_proposal() {
        let transition = lgm_2d();
        let obs = obs_1of2(1e-3);
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[0.8, -0.6])).unwrap();
        let y_prev = DVector::from_row_slice(&[0.2]);
        let y_n = DVector::from_row_slice(&[-0.1]);
        let chart_prev = geom.extended_chart(&y_prev, obs.delta).unwrap();
        let chart_new = geom.extended_chart(&y_n, obs.delta).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_prev = standard_normal_vector(2, &mut rng);
        let z_new = standard_normal_vector(2, &mut rng);
        let log_q = -1.37;
        let got = low_noise_generic_log_weight(
            &z_prev,
            &z_new,
            &chart_prev,
            &chart_new,
            |x, xp| transition.log_density(x, xp),
            |e| obs.noise_log_density(e),
            |_, _| log_q,
        )
        .unwrap();
        // Independent recomposition.
        let u_prev = chart_prev.map(&z_prev).unwrap();
        let u_new = chart_new.map(&z_new).unwrap();
        let (xp, _) = split_extended_vec(&u_prev, 2).unwrap();
        let (xn, en) = split_extended_vec(&u_new, 2).unwrap();
        let expect = obs.noise_log_density(&en) + transition.log_density(&xn, &xp) - log_q;
        assert_close(got, expect, 1e-12);

        let err = low_noise_generic_log_weight(
            &z_prev,
            &z_new,
            &chart_prev,
            &chart_new,
            |x, xp| transition.log_density(x, xp),
            |e| obs.noise_log_density(e),
            |_, _| f64::NEG_INFINITY,
        );
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    #[test]
    fn generic_weight_optimal_proposal_gives_flat_weight() {
        // q equal to the normalized numerator: the weight is the marginal,
        // identical for every proposed z.
        let transition = lgm_2d();
        let obs = obs_1of2(1e-2);
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let y = DVector::from_row_slice(&[0.5]);
        let chart_prev = geom.extended_chart(&y, obs.delta).unwrap();
        let chart_new = geom.extended_chart(&y, obs.delta).unwrap();
        let z_prev = DVector::from_row_slice(&[0.3, -0.4]);
        let x_prev = chart_prev.map_state(&z_prev).unwrap();
        let (params, _) = low_noise_optimal(&x_prev, &chart_new, &transition, &obs).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut weights = Vec::new();
        for _ in 0..10 {
            let z = params.sample(&mut rng).unwrap();
            let w = low_noise_generic_log_weight(
                &z_prev,
                &z,
                &chart_prev,
                &chart_new,
                |x, xp| transition.log_density(x, xp),
                |e| obs.noise_log_density(e),
                |zn, _| params.log_density(zn),
            )
            .unwrap();
            weights.push(w);
        }
        for w in &weights {
            assert_close(*w, weights[0], 1e-9);
        }
    }

    #[test]
    fn generic_weight_noise_block_separates_in_the_limit() {
        // At tiny delta, perturbing the noise block of z changes the
        // noise-density factor by O(1) but the transition factor only by
        // O(sqrt(delta)).
        let transition = lgm_2d();
        let obs = obs_1of2(1e-14);
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.8])).unwrap();
        let y = DVector::from_row_slice(&[0.4]);
        let chart = geom.extended_chart(&y, obs.delta).unwrap();
        let x_prev = DVector::from_row_slice(&[0.2, 0.1]);
        let z1 = DVector::from_row_slice(&[0.5, 0.3]);
        let z2 = DVector::from_row_slice(&[0.5, 1.3]);

        let f_part = |z: &DVector<f64>| {
            transition.log_density(&chart.map_state(z).unwrap(), &x_prev)
        };
        let p_part = |z: &DVector<f64>| obs.noise_log_density(&chart.map_noise(z).unwrap());
        assert!((f_part(&z1) - f_part(&z2)).abs() < 1e-6);
        assert!((p_part(&z1) - p_part(&z2)).abs() > 0.1);
    }

    #[test]
    fn weight_limit_constant_map_gap_is_zero() {
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.8])).unwrap();
        let y = DVector::from_row_slice(&[0.3]);
        let x_star = geom.min_norm_solution(&y).unwrap();
        let constant = crate::ssm::GaussianTransition::new(
            Arc::new(move |_: &DVector<f64>| x_star.clone()),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let sigma = SpdFactor::from_spd(DMatrix::identity(1, 1)).unwrap();
        let z_prev = DVector::from_row_slice(&[0.9, -0.4]);
        let rows = weight_limit_check(
            &geom,
            &y,
            &y,
            &z_prev,
            &constant,
            &sigma,
            &[1e-2, 1e-6, 1e-12],
        )
        .unwrap();
        for row in rows {
            assert_eq!(row.rel_gap, 0.0, "constant map: both weights are 1 at every delta");
        }
    }

    #[test]
    fn weight_limit_gap_shrinks_with_delta() {
        let geom = ConstraintGeometry::new(DMatrix::from_row_slice(1, 2, &[0.8, 0.6])).unwrap();
        let transition = lgm_2d();
        let sigma = SpdFactor::from_spd(DMatrix::identity(1, 1)).unwrap();
        let y_prev = DVector::from_row_slice(&[0.2]);
        let y_n = DVector::from_row_slice(&[0.45]);
        let z_prev = DVector::from_row_slice(&[0.5, -0.3]);
        let deltas: Vec<f64> = (1..=6).map(|k| 10f64.powi(-2 * k)).collect();
        let rows =
            weight_limit_check(&geom, &y_prev, &y_n, &z_prev, &transition, &sigma, &deltas)
                .unwrap();
        for pair in rows.windows(2) {
            assert!(
                pair[1].rel_gap < pair[0].rel_gap,
                "gap must decrease: {} -> {}",
                pair[0].rel_gap,
                pair[1].rel_gap
            );
        }
        assert!(rows.last().unwrap().rel_gap <= 1e-6, "gap at delta=1e-12");
        // gap(1e-4) > gap(1e-8).
        assert!(rows[1].rel_gap > rows[3].rel_gap);
    }
}
