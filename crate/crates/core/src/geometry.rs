//! Affine reparameterizations of observation-constraint manifolds.
//!
//! A linear observation `y = A x + sqrt(delta) eps` with `A` of full row
//! rank confines the state (for delta = 0) to the affine set
//! `{x : A x = y}`, or the pair `(x, eps)` (for delta > 0) to
//! `{(x, eps) : [A, sqrt(delta) I] (x, eps) = y}`. Both sets are
//! parameterized here as `u(z) = base + V z` with `V` an orthonormal basis
//! of the constraint matrix's kernel.
//!
//! The extended basis is built so that it converges elementwise, as
//! delta -> 0, to the block matrix [[V, 0], [0, I]]: the degenerate chart in
//! the state block and the raw noise coordinate in the noise block. The
//! filters in [`crate::proposals`] rely on that limit to inherit the
//! degenerate filter's behaviour at small delta.
//!
//! Construction: with `P = A^T (A A^T)^{-1}` (the min-norm pseudo-inverse)
//! and `E = (I + delta P^T P)^{-1/2}` (symmetric inverse square root), the
//! extended basis is
//!
//! ```text
//! V_delta = [ V   -sqrt(delta) P E ]
//!           [ 0          E         ]
//! ```
//!
//! The right block columns are in the kernel because `A P = I`, mutually
//! orthonormal because `E (I + delta P^T P) E = I`, orthogonal to the left
//! block because `A V = 0`, and `E -> I` as delta -> 0. All pipelines are
//! fixed (Householder QR, symmetric eigendecompositions, sign convention),
//! so identical inputs produce bit-identical bases across runs.

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::{householder_qr_full, sym_inv_sqrt};

/// Rank tolerance, relative to the largest singular value.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Entries smaller than this (columns are unit norm) are treated as zero by
/// the sign convention.
const SIGN_TOL: f64 = 1e-9;

/// A linear observation constraint: matrix `A` (d_y x d_x), datum `y`, and
/// noise scale `delta >= 0`.
#[derive(Clone, Debug)]
pub struct LinearConstraint {
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    pub delta: f64,
}

impl LinearConstraint {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, delta: f64) -> Result<Self> {
        let (d_y, d_x) = a.shape();
        if d_y < 1 || d_y >= d_x {
            return Err(Error::Invalid(format!(
                "constraint requires 1 <= d_y < d_x, got d_y={d_y}, d_x={d_x}"
            )));
        }
        if y.len() != d_y {
            return Err(Error::Invalid("constraint: y length must equal d_y".into()));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Invalid("constraint: delta must be finite and >= 0".into()));
        }
        check_row_rank(&a)?;
        Ok(Self { a, y, delta })
    }

    pub fn d_x(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.a.nrows()
    }
}

fn check_row_rank(a: &DMatrix<f64>) -> Result<()> {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RANK_REL_TOL * smax) || smax == 0.0 {
        return Err(Error::RankDeficient(format!(
            "observation matrix is rank deficient (sigma_min={smin:.3e}, sigma_max={smax:.3e})"
        )));
    }
    Ok(())
}

/// Whether a chart parameterizes the reduced (state-only) or extended
/// (state + noise) constraint set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    Reduced,
    Extended,
}

/// Orthonormal affine chart `u(z) = base_point + basis z` of a constraint
/// set `{u : extended_matrix u = y}`. Immutable after construction.
#[derive(Clone, Debug)]
pub struct AffineChart {
    base_point: DVector<f64>,
    basis: DMatrix<f64>,
    extended_matrix: DMatrix<f64>,
    y: DVector<f64>,
    d_x: usize,
    d_y: usize,
    kind: ChartKind,
}

impl AffineChart {
    /// Chart dimension k (columns of the basis).
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Ambient dimension (d_x for reduced charts, d_x + d_y for extended).
    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn kind(&self) -> ChartKind {
        self.kind
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn base_point(&self) -> &DVector<f64> {
        &self.base_point
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn extended_matrix(&self) -> &DMatrix<f64> {
        &self.extended_matrix
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// u(z) = base_point + basis z.
    pub fn map(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Invalid(format!(
                "chart map: z has length {}, chart dimension is {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(&self.base_point + &self.basis * z)
    }

    /// State block of u(z): the whole image for a reduced chart, the first
    /// d_x rows for an extended chart.
    pub fn map_state(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.map(z)?;
        Ok(match self.kind {
            ChartKind::Reduced => u,
            ChartKind::Extended => u.rows(0, self.d_x).into_owned(),
        })
    }

    /// Noise block of u(z) for an extended chart.
    pub fn map_noise(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if self.kind != ChartKind::Extended {
            return Err(Error::Invalid("map_noise: chart is not extended".into()));
        }
        let u = self.map(z)?;
        Ok(u.rows(self.d_x, self.d_y).into_owned())
    }

    /// Row partition of the basis into its state and noise blocks.
    pub fn split_basis(&self) -> ChartSplit {
        split_extended_mat(&self.basis, self.d_x).expect("chart basis has d_x + d_y rows")
    }

    /// Chart coordinates of an ambient point: z = basis^T (u - base).
    /// Exact inverse of [`Self::map`] for points on the constraint set.
    pub fn coords(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.ambient_dim() {
            return Err(Error::Invalid("coords: ambient dimension mismatch".into()));
        }
        Ok(self.basis.transpose() * (u - &self.base_point))
    }

    /// Debug serialization (row-major nested arrays).
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        json!({
            "kind": match self.kind { ChartKind::Reduced => "reduced", ChartKind::Extended => "extended" },
            "d_x": self.d_x,
            "d_y": self.d_y,
            "base_point": self.base_point.iter().copied().collect::<Vec<f64>>(),
            "basis": mat(&self.basis),
            "extended_matrix": mat(&self.extended_matrix),
            "y": self.y.iter().copied().collect::<Vec<f64>>(),
        })
    }
}

/// Row partition of an extended-chart object into state and noise blocks.
#[derive(Clone, Debug)]
pub struct ChartSplit {
    pub state_rows: DMatrix<f64>,
    pub noise_rows: DMatrix<f64>,
}

impl ChartSplit {
    /// Stack the state block over the noise block, reconstructing the
    /// original matrix exactly.
    pub fn restack(&self) -> DMatrix<f64> {
        let d_x = self.state_rows.nrows();
        let d_y = self.noise_rows.nrows();
        let k = self.state_rows.ncols();
        let mut out = DMatrix::zeros(d_x + d_y, k);
        out.rows_mut(0, d_x).copy_from(&self.state_rows);
        out.rows_mut(d_x, d_y).copy_from(&self.noise_rows);
        out
    }
}

/// Split a (d_x + d_y) vector into its state and noise parts.
pub fn split_extended_vec(u: &DVector<f64>, d_x: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if u.len() <= d_x {
        return Err(Error::Invalid("split: vector shorter than d_x + 1".into()));
    }
    let d_y = u.len() - d_x;
    Ok((u.rows(0, d_x).into_owned(), u.rows(d_x, d_y).into_owned()))
}

/// Split a matrix with d_x + d_y rows into its state and noise row blocks.
pub fn split_extended_mat(m: &DMatrix<f64>, d_x: usize) -> Result<ChartSplit> {
    if m.nrows() <= d_x {
        return Err(Error::Invalid("split: matrix has fewer than d_x + 1 rows".into()));
    }
    let d_y = m.nrows() - d_x;
    Ok(ChartSplit {
        state_rows: m.rows(0, d_x).into_owned(),
        noise_rows: m.rows(d_x, d_y).into_owned(),
    })
}

/// Flip basis columns so the first entry larger than [`SIGN_TOL`] in
/// absolute value is positive. Removes the sign ambiguity of QR/SVD
/// pipelines so golden-file tests are stable.
fn sign_fix_columns(mut v: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..v.ncols() {
        let lead = v.column(j).iter().find(|e| e.abs() > SIGN_TOL).copied().unwrap_or(0.0);
        if lead < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    v
}

/// Cached factorizations for one observation matrix `A`; builds charts for
/// any datum and noise scale. Immutable and shareable across workers.
#[derive(Clone, Debug)]
pub struct ConstraintGeometry {
    a: DMatrix<f64>,
    d_x: usize,
    d_y: usize,
    /// Min-norm pseudo-inverse P = A^T (A A^T)^{-1}.
    pinv: DMatrix<f64>,
    /// P^T P = (A A^T)^{-1}.
    ptp: DMatrix<f64>,
    /// Orthonormal kernel basis of A, sign-fixed.
    v: DMatrix<f64>,
}

impl ConstraintGeometry {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let (d_y, d_x) = a.shape();
        if d_y < 1 || d_y >= d_x {
            return Err(Error::Invalid(format!(
                "geometry requires 1 <= d_y < d_x, got d_y={d_y}, d_x={d_x}"
            )));
        }
        check_row_rank(&a)?;
        let (q_full, r_full) = householder_qr_full(&a.transpose());
        let q1 = q_full.columns(0, d_y).into_owned();
        let v = sign_fix_columns(q_full.columns(d_y, d_x - d_y).into_owned());
        let r = r_full.rows(0, d_y).into_owned();
        // P = Q1 R^{-T}: solve R^T W = I columnwise (R^T is lower triangular).
        let w = r
            .transpose()
            .solve_lower_triangular(&DMatrix::identity(d_y, d_y))
            .ok_or_else(|| Error::RankDeficient("QR factor of A^T is singular".into()))?;
        let pinv = &q1 * &w;
        let ptp = pinv.transpose() * &pinv;
        Ok(Self { a, d_x, d_y, pinv, ptp, v })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    /// Minimum-norm solution x* of A x = y.
    pub fn min_norm_solution(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.d_y {
            return Err(Error::Invalid("min_norm_solution: y length must equal d_y".into()));
        }
        Ok(&self.pinv * y)
    }

    /// Orthonormal basis of ker(A), d_x x (d_x - d_y).
    pub fn kernel_basis(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Orthonormal basis of ker([A, sqrt(delta) I]), (d_x + d_y) x d_x,
    /// converging elementwise to [[V, 0], [0, I]] as delta -> 0.
    pub fn extended_kernel_basis(&self, delta: f64) -> Result<DMatrix<f64>> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Invalid(
                "extended_kernel_basis requires delta > 0; use kernel_basis at delta = 0".into(),
            ));
        }
        let m_delta = DMatrix::identity(self.d_y, self.d_y) + delta * &self.ptp;
        let e = sym_inv_sqrt(&m_delta)?;
        let top_right = -delta.sqrt() * (&self.pinv * &e);
        let mut basis = DMatrix::zeros(self.d_x + self.d_y, self.d_x);
        basis.view_mut((0, 0), (self.d_x, self.d_x - self.d_y)).copy_from(&self.v);
        basis.view_mut((0, self.d_x - self.d_y), (self.d_x, self.d_y)).copy_from(&top_right);
        basis.view_mut((self.d_x, self.d_x - self.d_y), (self.d_y, self.d_y)).copy_from(&e);
        Ok(basis)
    }

    /// Chart of the degenerate manifold {x : A x = y}: base x*, basis V.
    pub fn reduced_chart(&self, y: &DVector<f64>) -> Result<AffineChart> {
        let base = self.min_norm_solution(y)?;
        Ok(AffineChart {
            base_point: base,
            basis: self.v.clone(),
            extended_matrix: self.a.clone(),
            y: y.clone(),
            d_x: self.d_x,
            d_y: self.d_y,
            kind: ChartKind::Reduced,
        })
    }

    /// Chart for a validated constraint: reduced at delta = 0, extended
    /// otherwise.
    pub fn chart_for(&self, constraint: &LinearConstraint) -> Result<AffineChart> {
        if constraint.a != self.a {
            return Err(Error::Invalid(
                "chart_for: constraint matrix differs from this geometry's".into(),
            ));
        }
        if constraint.delta == 0.0 {
            self.reduced_chart(&constraint.y)
        } else {
            self.extended_chart(&constraint.y, constraint.delta)
        }
    }

    /// Chart of the extended manifold {(x, eps) : A x + sqrt(delta) eps = y}:
    /// base (x*, 0), basis the extended kernel basis.
    pub fn extended_chart(&self, y: &DVector<f64>, delta: f64) -> Result<AffineChart> {
        let basis = self.extended_kernel_basis(delta)?;
        let x_star = self.min_norm_solution(y)?;
        let mut base = DVector::zeros(self.d_x + self.d_y);
        base.rows_mut(0, self.d_x).copy_from(&x_star);
        let mut ext = DMatrix::zeros(self.d_y, self.d_x + self.d_y);
        ext.view_mut((0, 0), (self.d_y, self.d_x)).copy_from(&self.a);
        for i in 0..self.d_y {
            ext[(i, self.d_x + i)] = delta.sqrt();
        }
        Ok(AffineChart {
            base_point: base,
            basis,
            extended_matrix: ext,
            y: y.clone(),
            d_x: self.d_x,
            d_y: self.d_y,
            kind: ChartKind::Extended,
        })
    }
}

/// Minimum-norm solution x* = A^T (A A^T)^{-1} y of A x = y.
pub fn min_norm_solution(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    ConstraintGeometry::new(a.clone())?.min_norm_solution(y)
}

/// Orthonormal basis of ker(A) with the deterministic sign convention.
pub fn kernel_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(ConstraintGeometry::new(a.clone())?.kernel_basis().clone())
}

/// Orthonormal basis of ker([A, sqrt(delta) I]); see
/// [`ConstraintGeometry::extended_kernel_basis`].
pub fn extended_kernel_basis(a: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    ConstraintGeometry::new(a.clone())?.extended_kernel_basis(delta)
}

/// u(z) = chart.base + chart.basis z.
pub fn chart_map(chart: &AffineChart, z: &DVector<f64>) -> Result<DVector<f64>> {
    chart.map(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    fn random_full_rank(d_y: usize, d_x: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        loop {
            let a = DMatrix::from_fn(d_y, d_x, |_, _| rng.sample::<f64, _>(StandardNormal));
            let svd = a.clone().svd(false, false);
            if svd.singular_values.min() > 0.2 * svd.singular_values.max()
                && svd.singular_values.min() > 0.2
            {
                return a;
            }
        }
    }

    #[test]
    fn min_norm_symmetric_averaging_row() {
        let a = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let y = DVector::from_row_slice(&[1.0]);
        let x = min_norm_solution(&a, &y).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_norm_coordinate_projection() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let y = DVector::from_row_slice(&[3.0]);
        let x = min_norm_solution(&a, &y).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn min_norm_matches_svd_pseudoinverse_and_is_kernel_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let a = random_full_rank(2, 5, &mut rng);
            let y = standard_normal_vector(2, &mut rng);
            let x = min_norm_solution(&a, &y).unwrap();
            // Residual.
            assert!((&a * &x - &y).norm() <= 1e-10 * (1.0 + y.norm()));
            // Reference: SVD pseudo-inverse.
            let x_ref = a.clone().svd(true, true).pseudo_inverse(1e-12).unwrap() * &y;
            assert!((&x - &x_ref).norm() < 1e-10);
            // Orthogonal to the kernel.
            let v = kernel_basis(&a).unwrap();
            assert!((v.transpose() * &x).norm() < 1e-10);
        }
    }

    #[test]
    fn kernel_basis_known_cases_and_sign_convention() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let v = kernel_basis(&a).unwrap();
        assert!((v[(0, 0)]).abs() < 1e-14 && (v[(1, 0)] - 1.0).abs() < 1e-14);

        let a = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let v = kernel_basis(&a).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((v[(0, 0)] - s).abs() < 1e-12, "sign convention: first entry positive");
        assert!((v[(1, 0)] + s).abs() < 1e-12);
    }

    #[test]
    fn kernel_basis_random_orthonormal_annihilating() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let a = random_full_rank(3, 7, &mut rng);
            let v = kernel_basis(&a).unwrap();
            assert_eq!(v.shape(), (7, 4));
            assert!(max_abs(&(v.transpose() * &v - DMatrix::identity(4, 4))) <= 1e-10);
            assert!(max_abs(&(&a * &v)) <= 1e-10);
            // Reference nullspace oracle: V V^T must equal I - A^+ A.
            let pinv = a.clone().svd(true, true).pseudo_inverse(1e-12).unwrap();
            let proj_ref = DMatrix::identity(7, 7) - &pinv * &a;
            assert!(max_abs(&(&v * v.transpose() - proj_ref)) < 1e-9);
        }
    }

    #[test]
    fn extended_kernel_basis_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        // delta = 1: kernel of [1, 0, 1] in R^3.
        let v = extended_kernel_basis(&a, 1.0).unwrap();
        assert_eq!(v.shape(), (3, 2));
        assert!(max_abs(&(v.transpose() * &v - DMatrix::identity(2, 2))) <= 1e-12);
        let ext = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 1.0]);
        assert!(max_abs(&(&ext * &v)) <= 1e-12);

        // delta = 1e-16: essentially the block limit.
        let v = extended_kernel_basis(&a, 1e-16).unwrap();
        let limit = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(max_abs(&(&v - &limit)) < 1e-7);
    }

    #[test]
    fn extended_kernel_basis_random_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_full_rank(2, 6, &mut rng);
            let delta = 1e-4;
            let v = extended_kernel_basis(&a, delta).unwrap();
            let mut ext = DMatrix::zeros(2, 8);
            ext.view_mut((0, 0), (2, 6)).copy_from(&a);
            ext[(0, 6)] = delta.sqrt();
            ext[(1, 7)] = delta.sqrt();
            assert!(max_abs(&(&ext * &v)) <= 1e-10);
            assert!(max_abs(&(v.transpose() * &v - DMatrix::identity(6, 6))) <= 1e-10);
        }
    }

    #[test]
    fn extended_kernel_basis_rejects_degenerate_delta() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(extended_kernel_basis(&a, 0.0).is_err());
        assert!(extended_kernel_basis(&a, -1.0).is_err());
    }

    #[test]
    fn chart_map_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let geom = ConstraintGeometry::new(a).unwrap();
        let y = DVector::from_row_slice(&[3.0]);
        let chart = geom.reduced_chart(&y).unwrap();

        // z = 0 -> base point.
        let z0 = DVector::zeros(1);
        assert_eq!(chart.map(&z0).unwrap(), *chart.base_point());

        // u*(5) = (3, 5): base (3, 0) plus (0, 1) * 5.
        let z = DVector::from_row_slice(&[5.0]);
        let u = chart.map(&z).unwrap();
        assert!((u[0] - 3.0).abs() < 1e-12 && (u[1] - 5.0).abs() < 1e-12);

        // Dimension mismatch is a contract violation.
        assert!(chart.map(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn extended_chart_satisfies_constraint_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_full_rank(2, 5, &mut rng);
            let geom = ConstraintGeometry::new(a).unwrap();
            let y = standard_normal_vector(2, &mut rng);
            let delta = 10f64.powf(-rng.random::<f64>() * 8.0);
            let chart = geom.extended_chart(&y, delta).unwrap();
            let z = standard_normal_vector(chart.dim(), &mut rng);
            let u = chart.map(&z).unwrap();
            let resid = chart.extended_matrix() * &u - &y;
            assert!(resid.norm() <= 1e-9);

            // Split residual: A u(z, x) + sqrt(delta) u(z, eps) = y.
            let (ux, ue) = split_extended_vec(&u, 5).unwrap();
            let resid2 = geom.a() * &ux + delta.sqrt() * &ue - &y;
            assert!(resid2.norm() <= 1e-9);
        }
    }

    #[test]
    fn split_and_restack_are_exact() {
        let u = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let (x, e) = split_extended_vec(&u, 2).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        assert_eq!(e.as_slice(), &[3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_full_rank(2, 5, &mut rng);
        let v = extended_kernel_basis(&a, 1e-3).unwrap();
        let split = split_extended_mat(&v, 5).unwrap();
        assert_eq!(split.restack(), v);
    }

    #[test]
    fn extended_basis_limit_is_monotone_and_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_full_rank(2, 6, &mut rng);
        let geom = ConstraintGeometry::new(a).unwrap();
        let y = standard_normal_vector(2, &mut rng);
        let z = standard_normal_vector(6, &mut rng);

        // Degenerate target ((x* + V z_state), z_noise).
        let reduced = geom.reduced_chart(&y).unwrap();
        let z_state = z.rows(0, 4).into_owned();
        let z_noise = z.rows(4, 2).into_owned();
        let mut target = DVector::zeros(8);
        target.rows_mut(0, 6).copy_from(&reduced.map(&z_state).unwrap());
        target.rows_mut(6, 2).copy_from(&z_noise);

        let mut prev_gap = f64::INFINITY;
        let mut last_gap = f64::INFINITY;
        for k in 1..=6 {
            let delta = 10f64.powi(-2 * k);
            let chart = geom.extended_chart(&y, delta).unwrap();
            let gap = (chart.map(&z).unwrap() - &target).norm();
            assert!(gap < prev_gap, "gap not monotone at delta={delta}");
            prev_gap = gap;
            last_gap = gap;
        }
        assert!(last_gap <= 1e-5, "limit gap {last_gap} at delta=1e-12");
    }

    #[test]
    fn construction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = random_full_rank(3, 8, &mut rng);
        let v1 = kernel_basis(&a).unwrap();
        let v2 = kernel_basis(&a).unwrap();
        assert_eq!(v1, v2, "kernel basis must be bit-identical");
        let e1 = extended_kernel_basis(&a, 1e-6).unwrap();
        let e2 = extended_kernel_basis(&a, 1e-6).unwrap();
        assert_eq!(e1, e2, "extended basis must be bit-identical");
    }

    #[test]
    fn rank_deficient_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(ConstraintGeometry::new(a), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn linear_constraint_validation_and_chart_dispatch() {
        let a = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let y = DVector::from_row_slice(&[0.4]);
        // Square or flat matrices and bad deltas are contract violations.
        assert!(LinearConstraint::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.1).is_err());
        assert!(LinearConstraint::new(a.clone(), y.clone(), -1.0).is_err());
        assert!(LinearConstraint::new(a.clone(), DVector::zeros(2), 0.1).is_err());

        let geom = ConstraintGeometry::new(a.clone()).unwrap();
        let reduced = LinearConstraint::new(a.clone(), y.clone(), 0.0).unwrap();
        assert_eq!(geom.chart_for(&reduced).unwrap().kind(), ChartKind::Reduced);
        let extended = LinearConstraint::new(a, y, 1e-4).unwrap();
        assert_eq!(geom.chart_for(&extended).unwrap().kind(), ChartKind::Extended);
    }
}
