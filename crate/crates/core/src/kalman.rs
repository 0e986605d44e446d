//! Exact Gaussian filters for the linear Gaussian model, used as oracles
//! by the experiments and the acceptance suite.
//!
//! Updates are in Joseph form. At delta = 0 the observation is noiseless;
//! the innovation covariance `A P A^T` stays invertible as long as the
//! predictive covariance is (the transition noise re-inflates it each
//! step), and a pseudo-inverse handles the exactly singular corner. At
//! delta > 0 a singular innovation covariance is reported as a
//! conditioning error.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::ssm::ObservationSpec;

/// Filtering distribution N(mean, cov) at one step.
#[derive(Clone, Debug)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Solve S X = B for symmetric S, preferring Cholesky and falling back to
/// a spectral pseudo-inverse only where allowed.
fn solve_innovation(
    s: &DMatrix<f64>,
    b: &DMatrix<f64>,
    allow_pinv: bool,
) -> Result<DMatrix<f64>> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    if !allow_pinv {
        return Err(Error::Conditioning("innovation covariance is not SPD at delta > 0".into()));
    }
    let eig = symmetrize(s).symmetric_eigen();
    let lam_max = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut w = eig.eigenvectors.transpose() * b;
    for i in 0..w.nrows() {
        let lam = eig.eigenvalues[i];
        let inv = if lam > 1e-12 * lam_max { 1.0 / lam } else { 0.0 };
        w.row_mut(i).scale_mut(inv);
    }
    Ok(&eig.eigenvectors * w)
}

/// Run the exact filter for `x_n = B x_{n-1} + nu`, `y_n = A x_n +
/// sqrt(delta) eps`, starting from the deterministic x_0 (P_0 = 0).
/// Returns one filtered state per observation.
pub fn kalman_filter(
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    obs: &ObservationSpec,
    x0: &DVector<f64>,
    ys: &[DVector<f64>],
) -> Result<Vec<KalmanState>> {
    let d_x = b.nrows();
    if b.ncols() != d_x || omega.nrows() != d_x || x0.len() != d_x {
        return Err(Error::Invalid("kalman_filter: dimension mismatch".into()));
    }
    let delta = obs.delta;
    let eye = DMatrix::<f64>::identity(d_x, d_x);
    let mut mean = x0.clone();
    let mut cov = DMatrix::<f64>::zeros(d_x, d_x);
    let mut out = Vec::with_capacity(ys.len());

    for (idx, y) in ys.iter().enumerate() {
        let n = idx + 1;
        let a = obs.a_at(n);
        // Predict.
        let m_pred = b * &mean;
        let p_pred = symmetrize(&(b * &cov * b.transpose() + omega));

        // Update: S = A P A^T + delta Sigma.
        let pa_t = &p_pred * a.transpose();
        let s = a * &pa_t + delta * obs.sigma().matrix();
        let k = solve_innovation(&symmetrize(&s), &pa_t.transpose(), delta == 0.0)
            .map_err(|e| match e {
                Error::Conditioning(msg) => Error::Conditioning(format!("{msg} (time {n})")),
                other => other,
            })?
            .transpose();

        let innov = y - a * &m_pred;
        mean = &m_pred + &k * innov;
        let i_kh = &eye - &k * a;
        let mut p = &i_kh * &p_pred * i_kh.transpose();
        if delta > 0.0 {
            p += delta * (&k * obs.sigma().matrix() * k.transpose());
        }
        cov = symmetrize(&p);
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning(format!("kalman filter lost finiteness at time {n}")));
        }
        out.push(KalmanState { mean: mean.clone(), cov: cov.clone() });
    }
    Ok(out)
}

/// Joint posterior of (x_n, eps_n) given y_{1:n}: the exact filter in the
/// noise parameterization. Conditions the Gaussian pair on the exact
/// observation `y = A x + sqrt(delta) eps` (zero residual noise); at
/// delta = 0 the eps block simply stays at its prior.
pub fn kalman_filter_noise_augmented(
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    obs: &ObservationSpec,
    x0: &DVector<f64>,
    ys: &[DVector<f64>],
) -> Result<Vec<KalmanState>> {
    let d_x = b.nrows();
    let d_y = obs.d_y();
    let d = d_x + d_y;
    let delta = obs.delta;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut mean_x = x0.clone();
    let mut cov_x = DMatrix::<f64>::zeros(d_x, d_x);
    let mut out = Vec::with_capacity(ys.len());

    for (idx, y) in ys.iter().enumerate() {
        let n = idx + 1;
        let a = obs.a_at(n);
        // Augmented prior: x block predicted, eps block fresh N(0, Sigma).
        let mut mean = DVector::zeros(d);
        mean.rows_mut(0, d_x).copy_from(&(b * &mean_x));
        let mut cov = DMatrix::zeros(d, d);
        cov.view_mut((0, 0), (d_x, d_x))
            .copy_from(&symmetrize(&(b * &cov_x * b.transpose() + omega)));
        cov.view_mut((d_x, d_x), (d_y, d_y)).copy_from(obs.sigma().matrix());

        // Exact observation y = [A, sqrt(delta) I] (x, eps).
        let mut a_aug = DMatrix::zeros(d_y, d);
        a_aug.view_mut((0, 0), (d_y, d_x)).copy_from(a);
        for i in 0..d_y {
            a_aug[(i, d_x + i)] = delta.sqrt();
        }
        let ca_t = &cov * a_aug.transpose();
        let s = &a_aug * &ca_t;
        let k = solve_innovation(&symmetrize(&s), &ca_t.transpose(), true)
            .map_err(|e| match e {
                Error::Conditioning(msg) => Error::Conditioning(format!("{msg} (time {n})")),
                other => other,
            })?
            .transpose();
        let innov = y - &a_aug * &mean;
        mean += &k * innov;
        let i_kh = &eye - &k * &a_aug;
        cov = symmetrize(&(&i_kh * &cov * i_kh.transpose()));

        mean_x = mean.rows(0, d_x).into_owned();
        cov_x = cov.view((0, 0), (d_x, d_x)).into_owned();
        out.push(KalmanState { mean, cov });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ObsMatrix;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "a={a} b={b} |diff|={}", (a - b).abs());
    }

    fn obs_1of2(delta: f64) -> ObservationSpec {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        ObservationSpec::new(ObsMatrix::Constant(a), DMatrix::identity(1, 1), delta).unwrap()
    }

    #[test]
    fn matches_hand_two_step_recursion() {
        // d_x = 2, d_y = 1, A = [1, 0], B = 0.9 I, Omega = I, delta Sigma = r.
        let b = DMatrix::identity(2, 2) * 0.9;
        let omega = DMatrix::identity(2, 2);
        let delta = 0.1;
        let obs = obs_1of2(delta);
        let x0 = DVector::from_row_slice(&[0.3, -0.5]);
        let ys = vec![DVector::from_row_slice(&[0.4]), DVector::from_row_slice(&[0.1])];
        let got = kalman_filter(&b, &omega, &obs, &x0, &ys).unwrap();

        // Hand recursion with explicit scalars. P stays diagonal because A
        // picks the first component and B, Omega are scalar multiples of I.
        let mut m = [0.3f64, -0.5];
        let mut p = [0.0f64, 0.0];
        for (t, y) in [0.4f64, 0.1].iter().enumerate() {
            let mp = [0.9 * m[0], 0.9 * m[1]];
            let pp = [0.81 * p[0] + 1.0, 0.81 * p[1] + 1.0];
            let s = pp[0] + delta;
            let k = pp[0] / s;
            m = [mp[0] + k * (y - mp[0]), mp[1]];
            p = [(1.0 - k) * pp[0] * (1.0 - k) + k * delta * k, pp[1]];
            assert_close(got[t].mean[0], m[0], 1e-12);
            assert_close(got[t].mean[1], m[1], 1e-12);
            assert_close(got[t].cov[(0, 0)], p[0], 1e-12);
            assert_close(got[t].cov[(1, 1)], p[1], 1e-12);
            assert_close(got[t].cov[(0, 1)], 0.0, 1e-12);
        }
    }

    #[test]
    fn small_delta_approaches_exact_conditioning() {
        // B = 0: a single step is one conjugate update of N(0, Omega) on
        // A x ~ y. As delta -> 0 the posterior approaches the exact
        // conditioning formulas; at delta = 0 it attains them.
        let b = DMatrix::zeros(2, 2);
        let omega = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let a = DMatrix::from_row_slice(1, 2, &[0.7, -0.4]);
        let y = DVector::from_row_slice(&[0.5]);
        let s = (&a * &omega * a.transpose())[(0, 0)];
        let gain = &omega * a.transpose() / s;
        let mean_exact = &gain * &y;
        let cov_exact = &omega - &gain * (&a * &omega);

        for delta in [1e-12, 0.0] {
            let obs = ObservationSpec::new(
                ObsMatrix::Constant(a.clone()),
                DMatrix::identity(1, 1),
                delta,
            )
            .unwrap();
            let got = kalman_filter(&b, &omega, &obs, &DVector::zeros(2), &[y.clone()]).unwrap();
            assert!((got[0].mean.clone() - &mean_exact).norm() < 1e-9);
            assert!((got[0].cov.clone() - &cov_exact).abs().max() < 1e-9);
        }
    }

    #[test]
    fn degenerate_update_is_consistent_with_data() {
        // At delta = 0 the filtered mean must reproduce the observation
        // exactly and the covariance must vanish along A.
        let b = DMatrix::identity(3, 3) * 0.9;
        let omega = DMatrix::identity(3, 3);
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let obs =
            ObservationSpec::new(ObsMatrix::Constant(a.clone()), DMatrix::identity(1, 1), 0.0)
                .unwrap();
        let ys: Vec<DVector<f64>> =
            (0..5).map(|k| DVector::from_row_slice(&[0.1 * k as f64])).collect();
        let states = kalman_filter(&b, &omega, &obs, &DVector::zeros(3), &ys).unwrap();
        for (k, st) in states.iter().enumerate() {
            assert_close((&a * &st.mean)[0], 0.1 * k as f64, 1e-12);
            assert!((&a * &st.cov * a.transpose())[(0, 0)].abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_filter_marginal_matches_plain_filter() {
        let b = DMatrix::identity(2, 2) * 0.9;
        let omega = DMatrix::identity(2, 2);
        let obs = obs_1of2(1e-3);
        let x0 = DVector::from_row_slice(&[0.2, 0.1]);
        let ys: Vec<DVector<f64>> = (0..6)
            .map(|k| DVector::from_row_slice(&[(k as f64 * 0.7).sin()]))
            .collect();
        let plain = kalman_filter(&b, &omega, &obs, &x0, &ys).unwrap();
        let aug = kalman_filter_noise_augmented(&b, &omega, &obs, &x0, &ys).unwrap();
        for (p, a) in plain.iter().zip(aug.iter()) {
            assert!((a.mean.rows(0, 2).into_owned() - &p.mean).norm() < 1e-10);
            assert!(
                (a.cov.view((0, 0), (2, 2)).into_owned() - &p.cov).abs().max() < 1e-10
            );
        }
    }

    #[test]
    fn augmented_filter_noise_block_stays_prior_at_delta_zero() {
        let b = DMatrix::identity(2, 2) * 0.9;
        let omega = DMatrix::identity(2, 2);
        let obs = obs_1of2(0.0);
        let ys = vec![DVector::from_row_slice(&[0.3]); 3];
        let aug =
            kalman_filter_noise_augmented(&b, &omega, &obs, &DVector::zeros(2), &ys).unwrap();
        for st in &aug {
            assert_close(st.mean[2], 0.0, 1e-12);
            assert_close(st.cov[(2, 2)], 1.0, 1e-12);
        }
    }
}
