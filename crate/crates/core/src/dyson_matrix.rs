//! Operator-valued (q x q) single-layer Dyson solvers for Kronecker skip
//! connections `A = A_q (x) I_p`.
//!
//! Because the Gaussian noise is isotropic in the p replica directions, the
//! self-energy is proportional to the q x q identity and the N = q p
//! spectral problem collapses to q x q. Three routes to the sector-resolved
//! resolvent `G^(B)` are implemented:
//!
//! * [`solve_ov_scalar_path`]: for a scalar argument `z`, the problem is a
//!   scalar subordination over the q eigenvalues of `A_q^T A_q`, after
//!   which `G^(B) = u (omega I - A_q^T A_q)^{-1}`.
//! * [`solve_ov_matrix_arg`]: for a full matrix argument `b` with positive
//!   definite imaginary part, a two-scalar Schur-complement fixed point in
//!   the self-energies `(g11, g22)` with adaptive damping.
//! * [`solve_matrix_dyson_newton`]: Newton in C^{q^2} on the sector
//!   resolvent itself, with the analytic rank-two-update Jacobian of the
//!   self-energy-dressed resolvent identity; the dressed order parameter
//!   `M = u^{-1} A_q G^(B)` is recovered at the solution. Cold calls walk
//!   a continuation ladder in an added broadening `b + i tau I` so the
//!   solver tracks the physical branch down to arguments near the real
//!   axis.
//!
//! The Newton route costs O(q^6) per step and never sees p.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dyson_scalar::{precompute_gram_eigs, solve_dyson_scalar, ScalarDysonProblem};
use crate::error::{Result, SpectralError};
use crate::numerics::{c64, newton_solve, GreenValue, Jacobian, NewtonConfig};

/// Structured-skip families with their defining constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwistFamily {
    Identity,
    Bistochastic,
    Orthogonal,
    Gaussian,
    Custom,
}

/// A q x q structured skip matrix with its family tag.
#[derive(Debug, Clone)]
pub struct TwistMatrix {
    pub a_q: DMatrix<f64>,
    pub q: usize,
    pub family: TwistFamily,
}

impl TwistMatrix {
    /// Wraps a matrix, validating the family constraint.
    pub fn new(a_q: DMatrix<f64>, family: TwistFamily) -> Result<Self> {
        let q = a_q.nrows();
        if q == 0 || a_q.ncols() != q {
            return Err(SpectralError::InvalidInput(format!(
                "twist matrix must be square and nonempty, got {}x{}",
                a_q.nrows(),
                a_q.ncols()
            )));
        }
        if a_q.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidInput(
                "twist matrix has non-finite entries".into(),
            ));
        }
        match family {
            TwistFamily::Identity => {
                if (&a_q - DMatrix::<f64>::identity(q, q)).abs().max() > 1e-12 {
                    return Err(SpectralError::InvalidInput(
                        "identity family requires A_q = I".into(),
                    ));
                }
            }
            TwistFamily::Bistochastic => {
                for i in 0..q {
                    let row: f64 = a_q.row(i).iter().sum();
                    let col: f64 = a_q.column(i).iter().sum();
                    if (row - 1.0).abs() > 1e-8 || (col - 1.0).abs() > 1e-8 {
                        return Err(SpectralError::InvalidInput(format!(
                            "bistochastic family requires unit row/col sums; row {i} sums {row}, col {i} sums {col}"
                        )));
                    }
                }
                if a_q.iter().any(|&v| v < -1e-12) {
                    return Err(SpectralError::InvalidInput(
                        "bistochastic family requires nonnegative entries".into(),
                    ));
                }
            }
            TwistFamily::Orthogonal => {
                let dev = (a_q.transpose() * &a_q - DMatrix::<f64>::identity(q, q))
                    .abs()
                    .max();
                if dev > 1e-8 {
                    return Err(SpectralError::InvalidInput(format!(
                        "orthogonal family requires A_q^T A_q = I, deviation {dev:.2e}"
                    )));
                }
            }
            TwistFamily::Gaussian | TwistFamily::Custom => {}
        }
        Ok(TwistMatrix { a_q, q, family })
    }

    /// Identity skip.
    pub fn identity(q: usize) -> Result<Self> {
        TwistMatrix::new(DMatrix::identity(q, q), TwistFamily::Identity)
    }

    /// Scalar (q = 1) skip with entry `a`.
    pub fn scalar(a: f64) -> Result<Self> {
        TwistMatrix::new(DMatrix::from_element(1, 1, a), TwistFamily::Custom)
    }

    /// Deterministic doubly stochastic skip: seeded Gaussian logits pushed
    /// through enough balancing rounds to meet the family tolerance.
    pub fn bistochastic_seeded(q: usize, seed: u64) -> Result<Self> {
        if q == 0 {
            return Err(SpectralError::InvalidInput("q must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = DMatrix::from_fn(q, q, |_, _| StandardNormal.sample(&mut rng));
        let p = crate::mixers::sinkhorn_rounds(&logits, 400);
        TwistMatrix::new(p, TwistFamily::Bistochastic)
    }

    /// Deterministic orthogonal skip: QR of a seeded Gaussian matrix with
    /// column signs fixed by the R diagonal.
    pub fn orthogonal_seeded(q: usize, seed: u64) -> Result<Self> {
        if q == 0 {
            return Err(SpectralError::InvalidInput("q must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: DMatrix<f64> = DMatrix::from_fn(q, q, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let r = qr.r();
        let mut qmat = qr.q();
        for j in 0..q {
            if r[(j, j)] < 0.0 {
                for i in 0..q {
                    qmat[(i, j)] = -qmat[(i, j)];
                }
            }
        }
        TwistMatrix::new(qmat, TwistFamily::Orthogonal)
    }

    /// Deterministic Gaussian skip with entries N(0, 1/q).
    pub fn gaussian_seeded(q: usize, seed: u64) -> Result<Self> {
        if q == 0 {
            return Err(SpectralError::InvalidInput("q must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / q as f64).sqrt();
        let g = DMatrix::from_fn(q, q, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            scale * x
        });
        TwistMatrix::new(g, TwistFamily::Gaussian)
    }

    /// Gram spectrum of the skip, the input to the scalar-path solver.
    pub fn gram(&self) -> Result<crate::dyson_scalar::GramSpectrum> {
        precompute_gram_eigs(&self.a_q)
    }

    /// How far the Gram matrix `A_q^T A_q` is from the identity, in max
    /// norm. Zero for orthogonal skips; routes that assume an isotropic
    /// sector resolvent are exact only when this vanishes.
    pub fn gram_isotropy_deviation(&self) -> f64 {
        (self.a_q.transpose() * &self.a_q - DMatrix::<f64>::identity(self.q, self.q))
            .abs()
            .max()
    }

    /// Gram matrix `A_q^T A_q` as a complex matrix.
    fn gram_matrix_c(&self) -> DMatrix<Complex64> {
        let g = self.a_q.transpose() * &self.a_q;
        g.map(|v| c64(v, 0.0))
    }

    fn a_q_c(&self) -> DMatrix<Complex64> {
        self.a_q.map(|v| c64(v, 0.0))
    }
}

/// Spectral argument of an operator-valued solve: either a scalar `z`
/// (meaning `z I_q`) or a full q x q matrix.
#[derive(Debug, Clone)]
pub enum SpectralArgument {
    Scalar(Complex64),
    Matrix(DMatrix<Complex64>),
}

impl SpectralArgument {
    pub fn to_matrix(&self, q: usize) -> DMatrix<Complex64> {
        match self {
            SpectralArgument::Scalar(z) => DMatrix::from_diagonal_element(q, q, *z),
            SpectralArgument::Matrix(b) => b.clone(),
        }
    }

    /// The scalar `z` if the argument is scalar, or if the matrix is a
    /// numerical multiple of the identity.
    pub fn as_scalar(&self) -> Option<Complex64> {
        match self {
            SpectralArgument::Scalar(z) => Some(*z),
            SpectralArgument::Matrix(b) => {
                let q = b.nrows();
                let z = b[(0, 0)];
                for i in 0..q {
                    for j in 0..q {
                        let want = if i == j { z } else { c64(0.0, 0.0) };
                        if (b[(i, j)] - want).norm() > 1e-13 * z.norm().max(1.0) {
                            return None;
                        }
                    }
                }
                Some(z)
            }
        }
    }
}

/// One operator-valued solve: sector-resolved resolvent plus metadata.
#[derive(Debug, Clone)]
pub struct OVGreenSample {
    /// Argument the solve was performed at.
    pub argument: SpectralArgument,
    /// Sector-resolved resolvent `G^(B)`.
    pub g_b: DMatrix<Complex64>,
    /// Normalized trace `(1/q) tr G^(B)`, equal by construction.
    pub g_scalar: Complex64,
    /// Order parameter `M` when the Newton route produced one.
    pub order_param_m: Option<DMatrix<Complex64>>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
    /// Which route produced the sample.
    pub method: &'static str,
    /// Free-form diagnostics, e.g. per-seed residuals when all seeds fail.
    pub diagnostics: Option<String>,
}

impl OVGreenSample {
    /// The scalar resolvent value as a [`GreenValue`], for density use.
    pub fn scalar_value(&self) -> GreenValue {
        GreenValue::Scalar(self.g_scalar)
    }
}

fn normalized_trace(m: &DMatrix<Complex64>) -> Complex64 {
    let q = m.nrows();
    let mut t = c64(0.0, 0.0);
    for i in 0..q {
        t += m[(i, i)];
    }
    t / q as f64
}

/// Smallest eigenvalue of the Hermitian imaginary part `(b - b^H) / 2i`,
/// or `None` if the eigensolve fails. (A complex Cholesky would not do
/// here: it happily takes complex square roots of negative pivots and so
/// cannot detect indefiniteness.)
fn imaginary_part_min_eig(b: &DMatrix<Complex64>) -> Option<f64> {
    let q = b.nrows();
    let mut h = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            h[(i, j)] = (b[(i, j)] - b[(j, i)].conj()) / c64(0.0, 2.0);
        }
    }
    let eig = nalgebra::SymmetricEigen::try_new(h, 1e-12, 10_000)?;
    eig.eigenvalues
        .iter()
        .cloned()
        .min_by(|a, b| a.partial_cmp(b).expect("hermitian eigenvalues are finite"))
}

/// Checks that the Hermitian imaginary part of `b` is positive definite.
fn imaginary_part_positive(b: &DMatrix<Complex64>) -> bool {
    matches!(imaginary_part_min_eig(b), Some(v) if v > 0.0)
}

/// Scalar-subordination route for a scalar argument `z`.
///
/// Delegates to the scalar Dyson solver over the Gram spectrum of the
/// skip, then assembles `G^(B) = u (omega I - A_q^T A_q)^{-1}`.
pub fn solve_ov_scalar_path(
    z: Complex64,
    twist: &TwistMatrix,
    sigma2: f64,
    seed: Option<Complex64>,
) -> Result<OVGreenSample> {
    let gram = twist.gram()?;
    let prob = ScalarDysonProblem::new(gram, sigma2)?;
    let sample = solve_dyson_scalar(z, &prob, seed)?;
    let g = sample.scalar()?;
    let u = c64(1.0, 0.0) - sigma2 * g;
    let omega = z * u * u;

    let q = twist.q;
    let mut shift = twist.gram_matrix_c().map(|v| -v);
    for i in 0..q {
        shift[(i, i)] += omega;
    }
    let inv = shift.lu().try_inverse().ok_or_else(|| {
        SpectralError::NumericalFailure("singular (omega I - gram) in scalar path".into())
    })?;
    let g_b = inv.map(|v| v * u);
    let g_scalar = normalized_trace(&g_b);
    Ok(OVGreenSample {
        argument: SpectralArgument::Scalar(z),
        g_b,
        g_scalar,
        order_param_m: None,
        converged: sample.converged,
        residual: sample.residual,
        iterations: sample.iterations,
        method: "ov-scalar-path",
        diagnostics: None,
    })
}

const MATRIX_ARG_TOL: f64 = 1e-12;
const MATRIX_ARG_MAX_ITER: usize = 500;

/// Two-scalar Schur-complement fixed point for a full matrix argument.
///
/// Iterates the self-energy pair
///
/// ```text
/// u = 1 - sigma^2 g11
/// G = (b - sigma^2 g22 I - u^{-1} A_q^T A_q)^{-1}
/// g11 <- (1/q) tr G,    g22 <- (1/q) tr(b G)
/// ```
///
/// with adaptive damping: the mixing factor halves whenever the update
/// residual grows and recovers after a few contracting steps. The `g22`
/// closure is the normalized trace of the lower-block resolvent `b G(b)`,
/// which at `b = z I` reduces to `z g11` and makes the route agree with
/// the scalar path.
pub fn solve_ov_matrix_arg(
    b: &DMatrix<Complex64>,
    twist: &TwistMatrix,
    sigma2: f64,
    hint: Option<(Complex64, Complex64)>,
) -> Result<OVGreenSample> {
    let q = twist.q;
    if b.nrows() != q || b.ncols() != q {
        return Err(SpectralError::InvalidInput(format!(
            "argument must be {q}x{q}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if !imaginary_part_positive(b) {
        return Err(SpectralError::InvalidInput(
            "matrix argument must have positive-definite imaginary part".into(),
        ));
    }
    if !sigma2.is_finite() || sigma2 < 0.0 {
        return Err(SpectralError::InvalidInput(format!(
            "noise strength must be nonnegative, got {sigma2}"
        )));
    }

    let gram = twist.gram_matrix_c();
    let resolvent = |g11: Complex64, g22: Complex64| -> Option<DMatrix<Complex64>> {
        let u = c64(1.0, 0.0) - sigma2 * g11;
        if u.norm() < 1e-14 {
            return None;
        }
        let mut c = b - gram.map(|v| v / u);
        for i in 0..q {
            c[(i, i)] -= sigma2 * g22;
        }
        c.lu().try_inverse()
    };

    let (mut g11, mut g22) = match hint {
        Some(h) => h,
        None => {
            // noise-free start: G0 = (b - gram)^{-1}
            match (b - &gram).lu().try_inverse() {
                Some(g0) => (normalized_trace(&g0), normalized_trace(&(b * &g0))),
                None => {
                    let z = normalized_trace(b);
                    (c64(1.0, 0.0) / z, c64(1.0, 0.0))
                }
            }
        }
    };

    let mut theta = 1.0_f64;
    let mut prev_res = f64::INFINITY;
    let mut streak = 0usize;
    let mut converged = false;
    let mut res = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..MATRIX_ARG_MAX_ITER {
        iterations = it + 1;
        let g = match resolvent(g11, g22) {
            Some(g) => g,
            None => break,
        };
        let g11_new = normalized_trace(&g);
        let g22_new = normalized_trace(&(b * &g));
        if !g11_new.is_finite() || !g22_new.is_finite() {
            break;
        }
        res = (g11_new - g11).norm() + (g22_new - g22).norm();
        if res <= MATRIX_ARG_TOL * g11.norm().max(1.0) {
            g11 = g11_new;
            g22 = g22_new;
            converged = true;
            break;
        }
        if res > prev_res {
            theta *= 0.5;
            streak = 0;
            if theta < 1e-3 {
                break;
            }
        } else {
            streak += 1;
            if streak >= 3 {
                theta = (theta * 1.5).min(1.0);
                streak = 0;
            }
        }
        prev_res = res;
        g11 += (g11_new - g11) * theta;
        g22 += (g22_new - g22) * theta;
    }

    let g_b = resolvent(g11, g22).ok_or_else(|| {
        SpectralError::NumericalFailure("singular resolvent at matrix-argument fixed point".into())
    })?;
    let g_scalar = normalized_trace(&g_b);
    let arg = SpectralArgument::Matrix(b.clone());
    // scalar-manifold arguments must land on the physical branch
    if converged {
        if let Some(z) = arg.as_scalar() {
            if z.im > 0.0 && g_scalar.im > 1e-10 {
                converged = false;
            }
        }
    }
    Ok(OVGreenSample {
        argument: arg,
        g_b,
        g_scalar,
        order_param_m: None,
        converged,
        residual: res,
        iterations,
        method: "ov-matrix-arg",
        diagnostics: None,
    })
}

/// Commutation matrix: `P vec(X) = vec(X^T)` in column-major vec layout.
pub fn commutation_matrix(q: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(q * q, q * q);
    for r in 0..q {
        for c in 0..q {
            // vec(X)[c q + r] = X[r, c]; vec(X^T)[c q + r] = X[c, r] = vec(X)[r q + c]
            p[(c * q + r, r * q + c)] = 1.0;
        }
    }
    p
}

fn unvec(v: &DVector<Complex64>, q: usize) -> DMatrix<Complex64> {
    DMatrix::from_column_slice(q, q, v.as_slice())
}

fn vec_of(m: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_column_slice(m.as_slice())
}

/// Dressed denominator `T(G) = b - sigma^2 g22 I - u^{-1} A_q^T A_q` of
/// the resolvent identity, with `g22 = tr(b G)/q` and
/// `u = 1 - sigma^2 tr(G)/q`. Returns `None` when `u` degenerates.
fn dressed_denominator(
    g: &DMatrix<Complex64>,
    gram: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
    sigma2: f64,
) -> Option<DMatrix<Complex64>> {
    let q = g.nrows();
    let u = c64(1.0, 0.0) - sigma2 * normalized_trace(g);
    if u.norm() < 1e-14 {
        return None;
    }
    let g22 = normalized_trace(&(b * g));
    let mut t = b - gram.map(|v| v / u);
    for i in 0..q {
        t[(i, i)] -= sigma2 * g22;
    }
    Some(t)
}

/// Analytic Jacobian of the resolvent residual `F(G) = T(G)^{-1} - G` at
/// `G`, where `T` is [`dressed_denominator`]. The two self-energy
/// closures are linear traces of `G`, so the Jacobian is a rank-two
/// update of the negated identity:
///
/// ```text
/// J = (sigma^2 / q)        vec(T^{-2})            vec(b^T)^T
///   + (sigma^2 / (q u^2))  vec(T^{-1} Gram T^{-1}) vec(I)^T  -  I
/// ```
///
/// in column-major vec layout.
fn matrix_dyson_jacobian(
    g: &DMatrix<Complex64>,
    a_q: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
    sigma2: f64,
) -> Option<DMatrix<Complex64>> {
    let q = g.nrows();
    let qf = q as f64;
    let gram = a_q.transpose() * a_q;
    let u = c64(1.0, 0.0) - sigma2 * normalized_trace(g);
    let t = dressed_denominator(g, &gram, b, sigma2)?;
    let t_inv = t.lu().try_inverse()?;
    let t_inv_sq = &t_inv * &t_inv;
    let sandwich = &t_inv * &gram * &t_inv;

    let left1 = vec_of(&t_inv_sq);
    let left2 = vec_of(&sandwich);
    let right1 = vec_of(&b.transpose());
    let right2 = vec_of(&DMatrix::<Complex64>::identity(q, q));
    let c1 = c64(sigma2 / qf, 0.0);
    let c2 = c64(sigma2 / qf, 0.0) / (u * u);

    let n2 = q * q;
    let mut jac = DMatrix::zeros(n2, n2);
    for r in 0..n2 {
        for c in 0..n2 {
            jac[(r, c)] = c1 * left1[r] * right1[c] + c2 * left2[r] * right2[c];
        }
    }
    for i in 0..n2 {
        jac[(i, i)] -= c64(1.0, 0.0);
    }
    Some(jac)
}

/// Newton solver for the sector resolvent with dressed order parameter.
///
/// Solves `G^(B) = T(G^(B))^{-1}` with
/// `T(G) = b - sigma^2 g22 I - u^{-1} A_q^T A_q`, `g22 = tr(b G)/q`,
/// `u = 1 - sigma^2 tr(G)/q`, by Newton iteration in C^{q^2} with the
/// analytic Jacobian; steps larger than `10 max(|G|_F, 1)` are rescaled
/// to that bound. The continuation hint is tried first, then the
/// noise-free resolvent `(b - A_q^T A_q)^{-1}`, `b^{-1}`, and a small
/// complex shift; the best-converging seed wins. At the solution the
/// dressed order parameter `M = u^{-1} A_q G^(B)` is reported, so that
/// the dressed skip is `A_q + sigma^2 M`. Cold calls (no hint,
/// `sigma2 > 0`) first walk a continuation ladder in an added broadening
/// `b + i tau I`, threading the solution down to the requested argument;
/// ladder iterations are included in the returned count.
pub fn solve_matrix_dyson_newton(
    arg: &SpectralArgument,
    twist: &TwistMatrix,
    sigma2: f64,
    hint: Option<&DMatrix<Complex64>>,
) -> Result<OVGreenSample> {
    let q = twist.q;
    let b = arg.to_matrix(q);
    if b.nrows() != q || b.ncols() != q {
        return Err(SpectralError::InvalidInput(format!(
            "argument must be {q}x{q}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let min_im = imaginary_part_min_eig(&b).unwrap_or(f64::NEG_INFINITY);
    if !(min_im > 0.0) {
        return Err(SpectralError::InvalidInput(
            "argument must have positive-definite imaginary part".into(),
        ));
    }
    if !sigma2.is_finite() || sigma2 < 0.0 {
        return Err(SpectralError::InvalidInput(format!(
            "noise strength must be nonnegative, got {sigma2}"
        )));
    }

    let valid_hint = hint.filter(|h| h.nrows() == q && h.ncols() == q);
    if valid_hint.is_some() || sigma2 == 0.0 {
        return newton_pointwise(arg, &b, twist, sigma2, valid_hint);
    }

    // continuation ladder: start far above the spectrum, where the
    // physical solution is the unique attractor, and thread it down
    let spectral_scale = twist.gram()?.max_eig() + sigma2;
    let mut carried: Option<DMatrix<Complex64>> = None;
    let mut ladder_iterations = 0;
    let mut tau = 4.0 * b.norm().max(spectral_scale).max(1.0);
    while tau > min_im {
        let mut b_tau = b.clone();
        for i in 0..q {
            b_tau[(i, i)] += c64(0.0, tau);
        }
        let rung_arg = SpectralArgument::Matrix(b_tau.clone());
        let rung = newton_pointwise(&rung_arg, &b_tau, twist, sigma2, carried.as_ref())?;
        if rung.converged {
            carried = Some(rung.g_b);
        }
        ladder_iterations += rung.iterations;
        tau *= 0.25;
    }
    let mut out = newton_pointwise(arg, &b, twist, sigma2, carried.as_ref())?;
    out.iterations += ladder_iterations;
    Ok(out)
}

/// Single Newton solve at `b` through the seed hierarchy, no continuation.
fn newton_pointwise(
    arg: &SpectralArgument,
    b: &DMatrix<Complex64>,
    twist: &TwistMatrix,
    sigma2: f64,
    hint: Option<&DMatrix<Complex64>>,
) -> Result<OVGreenSample> {
    let q = twist.q;
    let a_q = twist.a_q_c();
    let gram = twist.gram_matrix_c();

    let mut seeds: Vec<DMatrix<Complex64>> = Vec::with_capacity(4);
    if let Some(h) = hint {
        seeds.push(h.clone());
    }
    if let Some(free) = (b - &gram).lu().try_inverse() {
        seeds.push(free);
    }
    if let Some(binv) = b.clone().lu().try_inverse() {
        seeds.push(binv);
    }
    seeds.push(DMatrix::from_diagonal_element(q, q, c64(0.05, 0.05)));

    let config = NewtonConfig::default()
        .with_max_iterations(100)
        .with_max_step_ratio(10.0);

    let mut residual_fn = {
        let gram = gram.clone();
        let b = b.clone();
        move |x: &DVector<Complex64>| -> DVector<Complex64> {
            let g = unvec(x, q);
            match dressed_denominator(&g, &gram, &b, sigma2)
                .and_then(|t| t.lu().try_inverse())
            {
                Some(t_inv) => vec_of(&(t_inv - g)),
                None => DVector::from_element(q * q, c64(f64::NAN, f64::NAN)),
            }
        }
    };

    let mut best: Option<(crate::numerics::NewtonRecord, bool)> = None;
    let mut seed_residuals: Vec<f64> = Vec::new();
    for seed in &seeds {
        let mut jac_fn = {
            let a_q = a_q.clone();
            let b = b.clone();
            move |x: &DVector<Complex64>| -> DMatrix<Complex64> {
                let g = unvec(x, q);
                matrix_dyson_jacobian(&g, &a_q, &b, sigma2)
                    .unwrap_or_else(|| DMatrix::from_element(q * q, q * q, c64(f64::NAN, 0.0)))
            }
        };
        let rec = match newton_solve(
            vec_of(seed),
            &mut residual_fn,
            Jacobian::Analytic(&mut jac_fn),
            &config,
        ) {
            Ok(r) => r,
            Err(_) => continue,
        };
        seed_residuals.push(rec.residual_norm);
        // physical-branch check for scalar-manifold arguments
        let physical = if rec.converged {
            match arg.as_scalar() {
                Some(z) if z.im > 0.0 => normalized_trace(&unvec(&rec.x, q)).im <= 1e-10,
                _ => true,
            }
        } else {
            false
        };
        let ok = rec.converged && physical;
        let keep = match &best {
            None => true,
            Some((b_rec, b_ok)) => {
                (ok && !b_ok) || (ok == *b_ok && rec.residual_norm < b_rec.residual_norm)
            }
        };
        if keep {
            best = Some((rec, ok));
        }
        if matches!(&best, Some((_, true))) {
            break;
        }
    }

    let (rec, ok) = best.ok_or_else(|| {
        SpectralError::NumericalFailure("all newton seeds failed to start".into())
    })?;
    let g_b = unvec(&rec.x, q);
    let g_scalar = normalized_trace(&g_b);
    let u = c64(1.0, 0.0) - sigma2 * g_scalar;
    let order_param_m = if u.norm() < 1e-14 {
        None
    } else {
        Some(&a_q * g_b.map(|v| v / u))
    };
    let diagnostics = if ok {
        None
    } else {
        Some(format!("per-seed residuals: {seed_residuals:?}"))
    };
    Ok(OVGreenSample {
        argument: arg.clone(),
        g_b,
        g_scalar,
        order_param_m,
        converged: ok,
        residual: rec.residual_norm,
        iterations: rec.iterations,
        method: "matrix-newton",
        diagnostics,
    })
}

/// Finite-difference Jacobian of the resolvent residual, the oracle the
/// analytic Jacobian is tested against.
pub fn matrix_dyson_fd_jacobian(
    g: &DMatrix<Complex64>,
    twist: &TwistMatrix,
    b: &DMatrix<Complex64>,
    sigma2: f64,
    h: f64,
) -> Result<DMatrix<Complex64>> {
    let q = twist.q;
    let gram = twist.gram_matrix_c();
    let residual = |gg: &DMatrix<Complex64>| -> Result<DVector<Complex64>> {
        let t_inv = dressed_denominator(gg, &gram, b, sigma2)
            .and_then(|t| t.lu().try_inverse())
            .ok_or_else(|| {
                SpectralError::NumericalFailure("singular denominator in fd jacobian".into())
            })?;
        Ok(vec_of(&(t_inv - gg)))
    };
    let r0 = residual(g)?;
    let mut jac = DMatrix::zeros(q * q, q * q);
    for col in 0..q * q {
        let mut gp = g.clone();
        let (i, j) = (col % q, col / q);
        gp[(i, j)] += c64(h, 0.0);
        let rp = residual(&gp)?;
        for row in 0..q * q {
            jac[(row, col)] = (rp[row] - r0[row]) / h;
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyson_scalar::{solve_dressed_fixed_point, GramSpectrum};
    use proptest::prelude::*;
    use rand::Rng;

    fn z_test() -> Complex64 {
        c64(1.3, 0.05)
    }

    #[test]
    fn commutation_matrix_known_forms() {
        assert_eq!(commutation_matrix(1), DMatrix::from_element(1, 1, 1.0));
        let p2 = commutation_matrix(2);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(p2, expected);
    }

    #[test]
    fn commutation_matrix_transposes_vec_and_squares_to_identity() {
        let q = 3;
        let p = commutation_matrix(q);
        assert_eq!(&p * &p, DMatrix::identity(q * q, q * q));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(q, q, |_, _| rng.random::<f64>());
        let vx = DVector::from_column_slice(x.as_slice());
        let vxt = DVector::from_column_slice(x.transpose().as_slice());
        assert_eq!(&p * vx, vxt);
    }

    #[test]
    fn seeded_families_are_deterministic_and_valid() {
        let b1 = TwistMatrix::bistochastic_seeded(4, 42).unwrap();
        let b2 = TwistMatrix::bistochastic_seeded(4, 42).unwrap();
        assert_eq!(b1.a_q, b2.a_q);
        let o = TwistMatrix::orthogonal_seeded(4, 42).unwrap();
        assert_eq!(o.family, TwistFamily::Orthogonal);
        let g = TwistMatrix::gaussian_seeded(4, 42).unwrap();
        assert!(g.a_q.iter().all(|v| v.is_finite()));
        let b3 = TwistMatrix::bistochastic_seeded(4, 43).unwrap();
        assert_ne!(b1.a_q, b3.a_q);
    }

    #[test]
    fn family_validation_rejects_violations() {
        let m = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 1.0]);
        assert!(TwistMatrix::new(m.clone(), TwistFamily::Bistochastic).is_err());
        assert!(TwistMatrix::new(m.clone(), TwistFamily::Orthogonal).is_err());
        assert!(TwistMatrix::new(m, TwistFamily::Custom).is_ok());
    }

    #[test]
    fn scalar_path_q1_equals_scalar_solver() {
        let twist = TwistMatrix::scalar(0.8).unwrap();
        let prob = ScalarDysonProblem::new(GramSpectrum::point_mass(0.8, 1).unwrap(), 0.1).unwrap();
        let ov = solve_ov_scalar_path(z_test(), &twist, 0.1, None).unwrap();
        let sc = solve_dyson_scalar(z_test(), &prob, None).unwrap();
        assert!(ov.converged && sc.converged);
        assert!((ov.g_scalar - sc.scalar().unwrap()).norm() < 1e-10);
        assert_eq!(ov.g_b.nrows(), 1);
    }

    #[test]
    fn orthogonal_twist_behaves_like_identity() {
        let o = TwistMatrix::orthogonal_seeded(3, 5).unwrap();
        let i = TwistMatrix::identity(3).unwrap();
        let a = solve_ov_scalar_path(z_test(), &o, 0.08, None).unwrap();
        let b = solve_ov_scalar_path(z_test(), &i, 0.08, None).unwrap();
        assert!((a.g_scalar - b.g_scalar).norm() < 1e-10);
    }

    #[test]
    fn trace_identity_holds_exactly() {
        let t = TwistMatrix::bistochastic_seeded(4, 11).unwrap();
        let s = solve_ov_scalar_path(z_test(), &t, 0.05, None).unwrap();
        let mut tr = c64(0.0, 0.0);
        for i in 0..4 {
            tr += s.g_b[(i, i)];
        }
        assert!((s.g_scalar - tr / 4.0).norm() < 1e-14);
    }

    #[test]
    fn bistochastic_scalar_path_is_sector_mixture() {
        // with the shared subordination pair (u, omega), the scalar
        // resolvent is the equal-weight mixture of the q sector resolvents
        let t = TwistMatrix::bistochastic_seeded(4, 42).unwrap();
        let sigma2 = 0.05;
        let s = solve_ov_scalar_path(z_test(), &t, sigma2, None).unwrap();
        assert!(s.converged);
        let u = c64(1.0, 0.0) - sigma2 * s.g_scalar;
        let omega = z_test() * u * u;
        let gram = t.gram().unwrap();
        let mixture: Complex64 =
            gram.s.iter().map(|&si| u / (omega - si)).sum::<Complex64>() / 4.0;
        assert!((s.g_scalar - mixture).norm() < 1e-10);
    }

    #[test]
    fn matrix_arg_at_scalar_manifold_matches_scalar_path() {
        for (twist, sigma2) in [
            (TwistMatrix::identity(3).unwrap(), 0.1),
            (TwistMatrix::orthogonal_seeded(3, 2).unwrap(), 0.1),
            (TwistMatrix::bistochastic_seeded(4, 42).unwrap(), 0.05),
        ] {
            let z = z_test();
            let b = DMatrix::from_diagonal_element(twist.q, twist.q, z);
            let ma = solve_ov_matrix_arg(&b, &twist, sigma2, None).unwrap();
            let sp = solve_ov_scalar_path(z, &twist, sigma2, None).unwrap();
            assert!(ma.converged, "matrix-arg unconverged for {:?}", twist.family);
            assert!(
                (ma.g_scalar - sp.g_scalar).norm() < 1e-8,
                "{:?}: {} vs {}",
                twist.family,
                ma.g_scalar,
                sp.g_scalar
            );
        }
    }

    #[test]
    fn matrix_arg_noise_free_is_direct_inverse() {
        let t = TwistMatrix::identity(2).unwrap();
        let b = DMatrix::from_row_slice(
            2,
            2,
            &[c64(2.0, 0.3), c64(0.0, 0.0), c64(0.0, 0.0), c64(3.0, 0.2)],
        );
        let s = solve_ov_matrix_arg(&b, &t, 0.0, None).unwrap();
        let direct = (&b - t.gram_matrix_c()).lu().try_inverse().unwrap();
        assert!((&s.g_b - &direct).norm() < 1e-10);
    }

    #[test]
    fn matrix_arg_diagonal_twist_has_sector_resolvents_on_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.0, 0.6]);
        let t = TwistMatrix::new(a, TwistFamily::Custom).unwrap();
        let sigma2 = 0.06;
        let z = z_test();
        let b = DMatrix::from_diagonal_element(2, 2, z);
        let s = solve_ov_matrix_arg(&b, &t, sigma2, None).unwrap();
        assert!(s.converged);
        // off-diagonal must vanish, diagonal must be the shared-(u, omega)
        // sector resolvents
        assert!(s.g_b[(0, 1)].norm() < 1e-12);
        assert!(s.g_b[(1, 0)].norm() < 1e-12);
        let u = c64(1.0, 0.0) - sigma2 * s.g_scalar;
        let omega = z * u * u;
        for (i, &aii) in [1.1_f64, 0.6].iter().enumerate() {
            let sector = u / (omega - aii * aii);
            assert!(
                (s.g_b[(i, i)] - sector).norm() < 1e-8,
                "sector {i}: {} vs {}",
                s.g_b[(i, i)],
                sector
            );
        }
    }

    #[test]
    fn matrix_arg_rejects_bad_imaginary_part() {
        let t = TwistMatrix::identity(2).unwrap();
        let b = DMatrix::from_diagonal_element(2, 2, c64(1.0, -0.1));
        assert!(solve_ov_matrix_arg(&b, &t, 0.1, None).is_err());
    }

    #[test]
    fn newton_noise_free_solves_in_one_step() {
        let t = TwistMatrix::bistochastic_seeded(3, 9).unwrap();
        let arg = SpectralArgument::Scalar(z_test());
        let s = solve_matrix_dyson_newton(&arg, &t, 0.0, None).unwrap();
        assert!(s.converged);
        assert!(s.iterations <= 1);
        let b = arg.to_matrix(3);
        let expected = t.a_q_c() * (&b - t.gram_matrix_c()).lu().try_inverse().unwrap();
        assert!((s.order_param_m.as_ref().unwrap() - &expected).norm() < 1e-9);
    }

    #[test]
    fn newton_q1_matches_dressed_fixed_point() {
        let t = TwistMatrix::scalar(1.0).unwrap();
        let z = z_test();
        let s = solve_matrix_dyson_newton(&SpectralArgument::Scalar(z), &t, 0.2, None).unwrap();
        let d = solve_dressed_fixed_point(z, 1.0, 0.2, None).unwrap();
        assert!(s.converged && d.sample.converged);
        assert!((s.order_param_m.as_ref().unwrap()[(0, 0)] - d.m).norm() < 1e-8);
        assert!((s.g_scalar - d.sample.scalar().unwrap()).norm() < 1e-8);
    }

    #[test]
    fn newton_and_scalar_path_agree() {
        for (twist, sigma2) in [
            (TwistMatrix::identity(2).unwrap(), 0.1),
            (TwistMatrix::orthogonal_seeded(3, 21).unwrap(), 0.07),
        ] {
            let z = z_test();
            let n =
                solve_matrix_dyson_newton(&SpectralArgument::Scalar(z), &twist, sigma2, None)
                    .unwrap();
            let sp = solve_ov_scalar_path(z, &twist, sigma2, None).unwrap();
            assert!(n.converged && sp.converged);
            assert!(
                (n.g_scalar - sp.g_scalar).norm() < 1e-6,
                "{:?}: newton {} vs scalar path {}",
                twist.family,
                n.g_scalar,
                sp.g_scalar
            );
        }
    }

    #[test]
    fn newton_iteration_count_depends_only_on_q() {
        // the collapsed solver never sees p: the same problem solved twice
        // is bitwise identical, and its work is a function of q alone
        let t = TwistMatrix::bistochastic_seeded(4, 3).unwrap();
        let arg = SpectralArgument::Scalar(z_test());
        let a = solve_matrix_dyson_newton(&arg, &t, 0.05, None).unwrap();
        let b = solve_matrix_dyson_newton(&arg, &t, 0.05, None).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.g_b.nrows(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn analytic_jacobian_matches_finite_difference(
            q in 1_usize..5,
            seed in 0_u64..1000,
            sigma2 in 0.01_f64..0.3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(q, q, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x / (q as f64).sqrt()
            });
            let twist = TwistMatrix::new(a, TwistFamily::Custom).unwrap();
            let g = DMatrix::from_fn(q, q, |_, _| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                c64(0.2 * re, 0.2 * im)
            });
            let b = DMatrix::from_diagonal_element(q, q, c64(1.5, 0.4));
            let analytic =
                matrix_dyson_jacobian(&g, &twist.a_q_c(), &b, sigma2).unwrap();
            let fd = matrix_dyson_fd_jacobian(&g, &twist, &b, sigma2, 1e-7).unwrap();
            let denom = fd.norm().max(1.0);
            prop_assert!(
                (&analytic - &fd).norm() / denom <= 1e-5,
                "relative deviation {}",
                (&analytic - &fd).norm() / denom
            );
        }
    }
}
