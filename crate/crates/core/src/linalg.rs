//! Dense linear-algebra primitives shared by the filters.
//!
//! Everything here is deterministic: identical inputs produce bit-identical
//! outputs across runs, which the experiment drivers rely on for
//! reproducible artifacts. Matrix dimensions in this crate are small
//! (d <= ~10), so dense `DMatrix<f64>` throughout.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

/// (M + M^T)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Kronecker product a (x) b.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column-major vectorization.
pub fn vec_cols(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows() * m.ncols(), m.iter().copied())
}

/// Inverse of [`vec_cols`] for a square matrix of dimension `n`.
pub fn unvec_cols(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(n, n, v.iter().copied())
}

/// Solve J X + X J^T = S for X via the Kronecker system
/// (I (x) J + J (x) I) vec(X) = vec(S).
///
/// Fails when J has an eigenvalue pair summing to zero.
pub fn solve_lyapunov_kron(j: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = j.nrows();
    if j.ncols() != n || s.nrows() != n || s.ncols() != n {
        return Err(Error::Invalid("lyapunov: J, S must be square of equal size".into()));
    }
    let eye = DMatrix::identity(n, n);
    let k = kron(&eye, j) + kron(j, &eye);
    let lu = k.lu();
    let x = lu
        .solve(&vec_cols(s))
        .ok_or_else(|| Error::Conditioning("lyapunov Kronecker system is singular".into()))?;
    Ok(symmetrize(&unvec_cols(&x, n)))
}

/// Draw a standard-normal vector, consuming `d` values from the stream in
/// index order (callers rely on this ordering to couple filters).
pub fn standard_normal_vector<R: rand::Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

// ---------------------------------------------------------------------------
// SPD factorization
// ---------------------------------------------------------------------------

enum Repr {
    Chol(Cholesky<f64, Dyn>),
    /// Eigen factorization with eigenvalues clamped away from zero; used for
    /// nearly singular OU covariances where Cholesky fails.
    Eig { u: DMatrix<f64>, vals: DVector<f64> },
}

/// Factorization of a symmetric positive-definite matrix, keeping the
/// original matrix for products and the factor for solves and sampling.
pub struct SpdFactor {
    m: DMatrix<f64>,
    repr: Repr,
    logdet: f64,
}

impl SpdFactor {
    /// Strict Cholesky. Errors if the matrix is not SPD.
    pub fn from_spd(m: DMatrix<f64>) -> Result<Self> {
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Conditioning("matrix is not positive definite".into()))?;
        let logdet = chol_logdet(&chol)?;
        Ok(Self { m, repr: Repr::Chol(chol), logdet })
    }

    /// Cholesky with an eigenvalue fallback for matrices that are SPD up to
    /// roundoff: the input is symmetrized, eigenvalues in [-1e-12, tiny) are
    /// clamped to 1e-14, and anything below -1e-12 is an error.
    pub fn from_spd_clamped(m: &DMatrix<f64>) -> Result<Self> {
        let sym = symmetrize(m);
        if let Some(chol) = sym.clone().cholesky() {
            let logdet = chol_logdet(&chol)?;
            return Ok(Self { m: sym, repr: Repr::Chol(chol), logdet });
        }
        let eig = sym.clone().symmetric_eigen();
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < -1e-12 {
                return Err(Error::Conditioning(format!(
                    "matrix has eigenvalue {v:.3e} below the -1e-12 tolerance"
                )));
            }
            if *v < 1e-14 {
                *v = 1e-14;
            }
        }
        let logdet = vals.iter().map(|v| v.ln()).sum();
        Ok(Self { m: sym, repr: Repr::Eig { u: eig.eigenvectors, vals }, logdet })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// The factored matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// M^{-1} b.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Chol(c) => c.solve(b),
            Repr::Eig { u, vals } => {
                let mut w = u.transpose() * b;
                for i in 0..w.len() {
                    w[i] /= vals[i];
                }
                u * w
            }
        }
    }

    /// M^{-1} B.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.repr {
            Repr::Chol(c) => c.solve(b),
            Repr::Eig { u, vals } => {
                let mut w = u.transpose() * b;
                for i in 0..w.nrows() {
                    let inv = 1.0 / vals[i];
                    w.row_mut(i).scale_mut(inv);
                }
                u * w
            }
        }
    }

    /// x^T M^{-1} x.
    pub fn quad_inv(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.solve_vec(x))
    }

    /// x^T M x.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.m * x))
    }

    /// F eta with F F^T = M (covariance sampling direction).
    pub fn factor_mul(&self, eta: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Chol(c) => c.l() * eta,
            Repr::Eig { u, vals } => {
                let mut w = eta.clone();
                for i in 0..w.len() {
                    w[i] *= vals[i].sqrt();
                }
                u * w
            }
        }
    }

    /// Solve L^T x = eta where M = L L^T is the strict Cholesky factor.
    ///
    /// Used to sample from a Gaussian given in precision form: if M is a
    /// precision matrix, `mean + inv_factor_t_solve(eta)` has covariance
    /// M^{-1}, and the leading block of the draw depends only on the leading
    /// entries of `eta` (lower-triangular structure; filters couple through
    /// this).
    pub fn inv_factor_t_solve(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.repr {
            Repr::Chol(c) => c
                .l()
                .transpose()
                .solve_upper_triangular(eta)
                .ok_or_else(|| Error::Conditioning("singular Cholesky factor".into())),
            Repr::Eig { .. } => Err(Error::Conditioning(
                "precision sampling requires a strict Cholesky factorization".into(),
            )),
        }
    }
}

fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> Result<f64> {
    let l = chol.l_dirty();
    let mut logdet = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Conditioning("invalid Cholesky diagonal".into()));
        }
        logdet += 2.0 * d.ln();
    }
    Ok(logdet)
}

// ---------------------------------------------------------------------------
// Gaussians
// ---------------------------------------------------------------------------

/// Multivariate normal in covariance form.
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: SpdFactor,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Invalid("gaussian: covariance/mean dimension mismatch".into()));
        }
        Ok(Self { mean, cov: SpdFactor::from_spd(cov)? })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        -0.5 * (self.cov.quad_inv(&d) + self.cov.logdet() + self.dim() as f64 * LN_2PI)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eta = standard_normal_vector(self.dim(), rng);
        &self.mean + self.cov.factor_mul(&eta)
    }
}

/// Multivariate normal in precision form N(mean, P^{-1}); the natural output
/// of conjugate-proposal algebra, sampled without ever inverting P.
pub struct PrecisionGaussian {
    pub mean: DVector<f64>,
    pub prec: SpdFactor,
}

impl PrecisionGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        -0.5 * (self.prec.quad(&d) - self.prec.logdet() + self.dim() as f64 * LN_2PI)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let eta = standard_normal_vector(self.dim(), rng);
        Ok(&self.mean + self.prec.inv_factor_t_solve(&eta)?)
    }

    /// Materialized covariance P^{-1} (tests and diagnostics only).
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.prec.solve_mat(&DMatrix::identity(d, d))
    }
}

// ---------------------------------------------------------------------------
// Householder QR with full Q
// ---------------------------------------------------------------------------

/// Full QR of an m x n matrix with m >= n: returns (Q m x m, R m x n).
///
/// nalgebra only exposes the thin factor; the trailing m-n columns of the
/// full Q are what the kernel-basis construction needs.
pub fn householder_qr_full(b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = b.shape();
    assert!(m >= n, "householder_qr_full requires m >= n");
    let mut r = b.clone();
    let mut q = DMatrix::<f64>::identity(m, m);
    for k in 0..n {
        let mut v = DVector::zeros(m - k);
        for i in k..m {
            v[i - k] = r[(i, k)];
        }
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm == 0.0 {
            continue;
        }
        v /= vnorm;
        // R[k.., k..] -= 2 v (v^T R[k.., k..])
        for j in k..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * r[(i, j)];
            }
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i - k] * dot;
            }
        }
        // Q[:, k..] -= 2 (Q[:, k..] v) v^T
        for i in 0..m {
            let mut dot = 0.0;
            for j in k..m {
                dot += q[(i, j)] * v[j - k];
            }
            for j in k..m {
                q[(i, j)] -= 2.0 * dot * v[j - k];
            }
        }
    }
    (q, r)
}

/// Symmetric inverse square root M^{-1/2} of an SPD matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v <= 0.0 {
            return Err(Error::Conditioning("sym_inv_sqrt: matrix is not SPD".into()));
        }
        *v = 1.0 / v.sqrt();
    }
    let mut w = eig.eigenvectors.clone();
    for j in 0..w.ncols() {
        let s = vals[j];
        w.column_mut(j).scale_mut(s);
    }
    Ok(&w * eig.eigenvectors.transpose())
}

// ---------------------------------------------------------------------------
// Matrix exponential (Higham scaling-and-squaring, Pade order up to 13)
// ---------------------------------------------------------------------------

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

fn norm_1(a: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

fn pade_uv(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    // Orders 3/5/7/9: U = A * sum b_{2k+1} A^{2k}, V = sum b_{2k} A^{2k}.
    let n = a.nrows();
    let a2 = a * a;
    let mut powers = vec![DMatrix::identity(n, n), a2.clone()];
    let half = b.len() / 2;
    while powers.len() < half {
        let next = powers.last().unwrap() * &a2;
        powers.push(next);
    }
    let mut u_inner = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for k in 0..half {
        u_inner += b[2 * k + 1] * &powers[k];
        v += b[2 * k] * &powers[k];
    }
    (a * u_inner, v)
}

fn pade_13_uv(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let n = a.nrows();
    let eye = DMatrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u = a * (&a6 * (B[13] * &a6 + B[11] * &a4 + B[9] * &a2)
        + B[7] * &a6
        + B[5] * &a4
        + B[3] * &a2
        + B[1] * &eye);
    let v = &a6 * (B[12] * &a6 + B[10] * &a4 + B[8] * &a2)
        + B[6] * &a6
        + B[4] * &a4
        + B[2] * &a2
        + B[0] * &eye;
    (u, v)
}

/// exp(A) for a square real matrix.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols(), "matrix_exp requires a square matrix");
    let nrm = norm_1(a);

    const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
    const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
    const B7: [f64; 8] =
        [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
    const B9: [f64; 10] = [
        17643225600.0,
        8821612800.0,
        2075673600.0,
        302702400.0,
        30270240.0,
        2162160.0,
        110880.0,
        3960.0,
        90.0,
        1.0,
    ];

    let (u, v, squarings) = if nrm <= THETA_3 {
        let (u, v) = pade_uv(a, &B3);
        (u, v, 0)
    } else if nrm <= THETA_5 {
        let (u, v) = pade_uv(a, &B5);
        (u, v, 0)
    } else if nrm <= THETA_7 {
        let (u, v) = pade_uv(a, &B7);
        (u, v, 0)
    } else if nrm <= THETA_9 {
        let (u, v) = pade_uv(a, &B9);
        (u, v, 0)
    } else {
        let s = ((nrm / THETA_13).log2().ceil()).max(0.0) as u32;
        let scaled = a * 2f64.powi(-(s as i32));
        let (u, v) = pade_13_uv(&scaled);
        (u, v, s)
    };

    let p = &v + &u;
    let q = &v - &u;
    let mut f = q.lu().solve(&p).expect("Pade denominator is singular");
    for _ in 0..squarings {
        f = &f * &f;
    }
    f
}
