//! Shared numerical machinery: damped Newton iteration, Anderson mixing,
//! continuation sweeps over spectral grids, and gap interpolation for
//! isolated unconverged points.
//!
//! All solvers in this crate work on resolvent-type quantities evaluated a
//! fixed distance `eta` above the real axis. A [`SpectralGrid`] holds the
//! complex evaluation points together with the order in which a continuation
//! sweep should visit them (descending modulus, where solvers are closest to
//! their asymptotic seed). [`newton_solve`] is the generic damped Newton core
//! used by the matrix-valued solvers; the scalar solvers use specialized
//! loops but share the same acceptance rule (first damping factor that
//! reduces the residual norm).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{PointDiagnostic, Result, SpectralError};

/// Shorthand constructor for a complex number.
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Complex evaluation grid for resolvent sampling.
///
/// Points are `x + i eta` with `x` real, nonnegative and strictly
/// increasing. `sweep_order` lists point indices in descending `|z|`, the
/// order a continuation sweep should visit them.
#[derive(Debug, Clone)]
pub struct SpectralGrid {
    pub points: Vec<Complex64>,
    pub sweep_order: Vec<usize>,
    pub eta: f64,
}

impl SpectralGrid {
    /// Builds a grid from real abscissas and a fixed imaginary offset.
    pub fn from_xs(xs: &[f64], eta: f64) -> Result<Self> {
        if xs.is_empty() {
            return Err(SpectralError::InvalidInput("empty grid".into()));
        }
        if !eta.is_finite() || eta <= 0.0 {
            return Err(SpectralError::InvalidInput(format!(
                "eta must be positive and finite, got {eta}"
            )));
        }
        if xs[0] < 0.0 {
            return Err(SpectralError::InvalidInput(format!(
                "grid abscissas must be nonnegative, got x[0] = {}",
                xs[0]
            )));
        }
        for w in xs.windows(2) {
            if !(w[1] > w[0]) {
                return Err(SpectralError::InvalidInput(format!(
                    "grid abscissas must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let points: Vec<Complex64> = xs.iter().map(|&x| c64(x, eta)).collect();
        let mut sweep_order: Vec<usize> = (0..points.len()).collect();
        sweep_order.sort_by(|&a, &b| {
            points[b]
                .norm()
                .partial_cmp(&points[a].norm())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        Ok(SpectralGrid {
            points,
            sweep_order,
            eta,
        })
    }

    /// Uniform grid of `n` points on `[x_min, x_max]`.
    pub fn uniform(x_min: f64, x_max: f64, n: usize, eta: f64) -> Result<Self> {
        if n < 2 {
            return Err(SpectralError::InvalidInput(format!(
                "uniform grid needs at least 2 points, got {n}"
            )));
        }
        if !(x_max > x_min) {
            return Err(SpectralError::InvalidInput(format!(
                "uniform grid needs x_max > x_min, got [{x_min}, {x_max}]"
            )));
        }
        let step = (x_max - x_min) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| x_min + step * i as f64).collect();
        Self::from_xs(&xs, eta)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Real parts of the evaluation points.
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|z| z.re).collect()
    }
}

/// Value of a resolvent-type quantity at one grid point: either the scalar
/// normalized trace or the full sector-resolved matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum GreenValue {
    Scalar(Complex64),
    Matrix(DMatrix<Complex64>),
}

impl GreenValue {
    pub fn as_scalar(&self) -> Result<Complex64> {
        match self {
            GreenValue::Scalar(g) => Ok(*g),
            GreenValue::Matrix(_) => Err(SpectralError::InvalidInput(
                "expected scalar resolvent value, got matrix".into(),
            )),
        }
    }

    pub fn as_matrix(&self) -> Result<&DMatrix<Complex64>> {
        match self {
            GreenValue::Matrix(m) => Ok(m),
            GreenValue::Scalar(_) => Err(SpectralError::InvalidInput(
                "expected matrix resolvent value, got scalar".into(),
            )),
        }
    }

    /// Linear interpolation between two values of the same shape.
    fn lerp(a: &GreenValue, b: &GreenValue, t: f64) -> Result<GreenValue> {
        let tc = c64(t, 0.0);
        let sc = c64(1.0 - t, 0.0);
        match (a, b) {
            (GreenValue::Scalar(x), GreenValue::Scalar(y)) => {
                Ok(GreenValue::Scalar(sc * x + tc * y))
            }
            (GreenValue::Matrix(x), GreenValue::Matrix(y)) => {
                if x.shape() != y.shape() {
                    return Err(SpectralError::InvalidInput(
                        "cannot interpolate matrices of different shapes".into(),
                    ));
                }
                Ok(GreenValue::Matrix(x.map(|v| v * sc) + y.map(|v| v * tc)))
            }
            _ => Err(SpectralError::InvalidInput(
                "cannot interpolate scalar with matrix resolvent values".into(),
            )),
        }
    }
}

/// One solved grid point.
#[derive(Debug, Clone)]
pub struct GreenSample {
    /// Evaluation point.
    pub z: Complex64,
    /// Resolvent value at `z`.
    pub value: GreenValue,
    /// True when the solver met its tolerance at this point.
    pub converged: bool,
    /// True when the value was filled in by gap interpolation rather than
    /// solved. Interpolated samples keep `converged = false`.
    pub interpolated: bool,
    /// Final residual norm reported by the solver.
    pub residual: f64,
    /// Iterations spent on this point.
    pub iterations: usize,
}

impl GreenSample {
    /// Samples that downstream density recovery may consume: either solved
    /// to tolerance or explicitly flagged as interpolated.
    pub fn usable(&self) -> bool {
        self.converged || self.interpolated
    }

    pub fn scalar(&self) -> Result<Complex64> {
        self.value.as_scalar()
    }
}

/// Tuning knobs for the damped Newton core.
#[derive(Debug, Clone)]
pub struct NewtonConfig {
    /// Residual norm below which the iteration stops.
    pub tolerance: f64,
    /// Hard cap on Newton steps.
    pub max_iterations: usize,
    /// Candidate damping factors, tried in order; the first one that
    /// strictly reduces the residual norm is accepted.
    pub damping_steps: Vec<f64>,
    /// Condition-number estimate above which Tikhonov regularization is
    /// applied to the Jacobian before solving.
    pub tikhonov_threshold: f64,
    /// Optional cap on the Newton step: `|dx| <= ratio * max(|x|, 1)`.
    pub max_step_ratio: Option<f64>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tolerance: 1e-12,
            max_iterations: 100,
            damping_steps: vec![1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01],
            tikhonov_threshold: 1e10,
            max_step_ratio: None,
        }
    }
}

impl NewtonConfig {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_damping_steps(mut self, steps: Vec<f64>) -> Self {
        self.damping_steps = steps;
        self
    }

    pub fn with_max_step_ratio(mut self, ratio: f64) -> Self {
        self.max_step_ratio = Some(ratio);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(SpectralError::InvalidInput(
                "newton tolerance must be positive".into(),
            ));
        }
        if self.damping_steps.is_empty()
            || self.damping_steps.iter().any(|&a| !(a > 0.0 && a <= 1.0))
        {
            return Err(SpectralError::InvalidInput(
                "damping steps must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// How the Jacobian of the residual map is obtained.
pub enum Jacobian<'a> {
    /// Caller supplies an analytic Jacobian.
    Analytic(&'a mut dyn FnMut(&DVector<Complex64>) -> DMatrix<Complex64>),
    /// Forward differences along real perturbations. Correct for residual
    /// maps that are holomorphic in their unknowns, which all solvers in
    /// this crate are.
    FiniteDifference,
}

/// Outcome of a Newton run.
#[derive(Debug, Clone)]
pub struct NewtonRecord {
    pub x: DVector<Complex64>,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    pub tikhonov_applied: bool,
    /// Residual norms after each accepted step, starting with the initial
    /// residual. Strictly decreasing by construction.
    pub residual_history: Vec<f64>,
}

fn finite(v: &DVector<Complex64>) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Forward-difference Jacobian along real coordinate perturbations.
fn fd_jacobian(
    residual: &mut dyn FnMut(&DVector<Complex64>) -> DVector<Complex64>,
    x: &DVector<Complex64>,
    r0: &DVector<Complex64>,
) -> DMatrix<Complex64> {
    let n = x.len();
    let m = r0.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = 1e-7 * x[j].norm().max(1.0);
        let mut xp = x.clone();
        xp[j] += c64(h, 0.0);
        let rp = residual(&xp);
        for i in 0..m {
            jac[(i, j)] = (rp[i] - r0[i]) / h;
        }
    }
    jac
}

/// Condition-number estimate of a square complex matrix from its singular
/// values. Returns infinity for (numerically) singular matrices.
pub fn condition_estimate(m: &DMatrix<Complex64>) -> f64 {
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 || !smin.is_finite() {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Damped Newton iteration on a complex residual map.
///
/// Each step solves `J dx = -r`, caps the step if `max_step_ratio` is set,
/// then walks the damping schedule and accepts the first factor that
/// strictly reduces the residual norm. If no factor reduces it the
/// iteration stops where it stands. The Jacobian is Tikhonov-regularized
/// (`J + lambda I`, `lambda = 1e-8 |J|_F`) when its estimated condition
/// number exceeds `tikhonov_threshold`, and as a last resort when the plain
/// LU solve fails.
///
/// Running out of iterations yields `converged = false` in the record, not
/// an error; only an unsalvageably singular Jacobian or a non-finite
/// starting residual is an error.
pub fn newton_solve(
    x0: DVector<Complex64>,
    residual: &mut dyn FnMut(&DVector<Complex64>) -> DVector<Complex64>,
    mut jacobian: Jacobian<'_>,
    config: &NewtonConfig,
) -> Result<NewtonRecord> {
    config.validate()?;
    let mut x = x0;
    let mut r = residual(&x);
    if !finite(&r) {
        return Err(SpectralError::NumericalFailure(
            "non-finite residual at newton starting point".into(),
        ));
    }
    let mut rn = r.norm();
    let mut history = vec![rn];
    let mut tikhonov_applied = false;
    let mut iterations = 0;

    while iterations < config.max_iterations && rn > config.tolerance {
        let mut jac = match jacobian {
            Jacobian::Analytic(ref mut f) => f(&x),
            Jacobian::FiniteDifference => fd_jacobian(residual, &x, &r),
        };
        if jac.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            break;
        }
        if condition_estimate(&jac) > config.tikhonov_threshold {
            let lambda = 1e-8 * jac.norm();
            for i in 0..jac.nrows().min(jac.ncols()) {
                jac[(i, i)] += c64(lambda, 0.0);
            }
            tikhonov_applied = true;
        }
        let neg_r = -&r;
        let mut delta = match jac.clone().lu().solve(&neg_r) {
            Some(d) => d,
            None => {
                // plain solve failed outright: regularize once and retry
                let lambda = 1e-8 * jac.norm().max(1.0);
                for i in 0..jac.nrows().min(jac.ncols()) {
                    jac[(i, i)] += c64(lambda, 0.0);
                }
                tikhonov_applied = true;
                match jac.lu().solve(&neg_r) {
                    Some(d) => d,
                    None => {
                        return Err(SpectralError::NumericalFailure(
                            "singular regularized jacobian in newton solve".into(),
                        ))
                    }
                }
            }
        };
        if let Some(ratio) = config.max_step_ratio {
            let cap = ratio * x.norm().max(1.0);
            let dn = delta.norm();
            if dn > cap {
                delta *= c64(cap / dn, 0.0);
            }
        }
        let mut accepted = false;
        for &alpha in &config.damping_steps {
            let xn = &x + delta.map(|d| d * c64(alpha, 0.0));
            let r_new = residual(&xn);
            if !finite(&r_new) {
                continue;
            }
            let rn_new = r_new.norm();
            if rn_new < rn {
                x = xn;
                r = r_new;
                rn = rn_new;
                history.push(rn);
                accepted = true;
                break;
            }
        }
        if !accepted {
            break;
        }
        iterations += 1;
    }

    Ok(NewtonRecord {
        converged: rn <= config.tolerance,
        residual_norm: rn,
        iterations,
        tikhonov_applied,
        residual_history: history,
        x,
    })
}

/// Result of one Anderson mixing step.
#[derive(Debug, Clone)]
pub struct AndersonUpdate {
    pub x: DVector<Complex64>,
    /// True when the mixing system was singular and the update fell back to
    /// the plain fixed-point step.
    pub used_fallback: bool,
}

/// Largest total coefficient mass accepted from the mixing solve; beyond
/// this the linearized model is dominated by rounding noise.
const ANDERSON_COEFF_CAP: f64 = 1e4;

/// Anderson (DIIS) extrapolation over a window of fixed-point iterates.
///
/// `history` holds `(x_i, r_i)` pairs where `r_i = f(x_i) - x_i` is the
/// fixed-point residual; at most the last `depth` pairs participate. The
/// mixing coefficients minimize `|sum c_i r_i|^2` subject to `sum c_i = 1`,
/// found by solving the bordered Lagrange system with Gram matrix
/// `B_ij = <r_i, r_j>`. The update is `sum c_i (x_i + r_i)`.
///
/// A near-dependent residual set makes the Gram block rank deficient and
/// the solved coefficients meaningless, so the window shrinks (oldest
/// pairs dropped first) until the system is well posed. If even the
/// two-pair system is singular, the update falls back to the plain
/// fixed-point step `x_last + r_last` and flags it in the record.
pub fn anderson_accelerate(
    history: &[(DVector<Complex64>, DVector<Complex64>)],
    depth: usize,
) -> Result<AndersonUpdate> {
    if history.is_empty() {
        return Err(SpectralError::InvalidInput(
            "anderson mixing needs at least one (x, r) pair".into(),
        ));
    }
    if depth == 0 {
        return Err(SpectralError::InvalidInput(
            "anderson depth must be at least 1".into(),
        ));
    }
    for (x, r) in history {
        if !finite(x) || !finite(r) {
            return Err(SpectralError::InvalidInput(
                "non-finite iterate in anderson history".into(),
            ));
        }
        if x.len() != r.len() {
            return Err(SpectralError::InvalidInput(
                "mismatched x/r lengths in anderson history".into(),
            ));
        }
    }
    let k = depth.min(history.len());
    let (x_last, r_last) = &history[history.len() - 1];
    if k == 1 {
        return Ok(AndersonUpdate {
            x: x_last + r_last,
            used_fallback: false,
        });
    }

    for kk in (2..=k).rev() {
        let window = &history[history.len() - kk..];
        let mut gram = DMatrix::zeros(kk, kk);
        for i in 0..kk {
            for j in 0..kk {
                gram[(i, j)] = window[i].1.dotc(&window[j].1);
            }
        }
        // scaling the Gram block leaves the coefficient solution unchanged
        // but keeps it comparable to the constraint border
        let gram_max = gram.iter().map(|v| v.norm()).fold(0.0_f64, f64::max);
        if gram_max <= 0.0 {
            break;
        }
        let inv_scale = c64(1.0 / gram_max, 0.0);

        // bordered system: [B 1; 1^T 0] [c; mu] = [0; 1]
        let mut sys = DMatrix::zeros(kk + 1, kk + 1);
        for i in 0..kk {
            for j in 0..kk {
                sys[(i, j)] = gram[(i, j)] * inv_scale;
            }
            sys[(i, kk)] = c64(1.0, 0.0);
            sys[(kk, i)] = c64(1.0, 0.0);
        }
        let mut rhs = DVector::zeros(kk + 1);
        rhs[kk] = c64(1.0, 0.0);

        let sol = match sys.clone().lu().solve(&rhs).filter(finite) {
            Some(s) => s,
            None => continue,
        };
        let coeff_mass: f64 = (0..kk).map(|i| sol[i].norm()).sum();
        let backsub_error = (&sys * &sol - &rhs).norm();
        if coeff_mass > ANDERSON_COEFF_CAP || backsub_error > 1e-8 * (kk as f64 + 1.0) {
            continue;
        }

        let mut x_next = DVector::zeros(x_last.len());
        for i in 0..kk {
            let (xi, ri) = &window[i];
            x_next += (xi + ri).map(|v| v * sol[i]);
        }
        return Ok(AndersonUpdate {
            x: x_next,
            used_fallback: false,
        });
    }

    Ok(AndersonUpdate {
        x: x_last + r_last,
        used_fallback: true,
    })
}

/// Fraction of unconverged points above which a sweep is abandoned.
pub const SWEEP_FAILURE_FRACTION: f64 = 0.10;

fn sweep_diagnostics(samples: &[GreenSample]) -> Vec<PointDiagnostic> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.converged)
        .map(|(i, s)| PointDiagnostic {
            index: i,
            z: s.z,
            residual: s.residual,
            iterations: s.iterations,
        })
        .collect()
}

/// Solves every grid point in sweep order, threading the previous converged
/// value to the solver as a continuation seed.
///
/// The solver receives `(z, seed)` where `seed` is the most recent
/// converged value along the sweep, and returns a [`GreenSample`] that may
/// be flagged unconverged. Results come back in grid order. If strictly
/// more than 10% of points are unconverged the whole sweep fails with
/// per-point diagnostics.
pub fn continuation_sweep<F>(grid: &SpectralGrid, mut solver: F) -> Result<Vec<GreenSample>>
where
    F: FnMut(Complex64, Option<&GreenValue>) -> Result<GreenSample>,
{
    let mut out: Vec<Option<GreenSample>> = vec![None; grid.len()];
    let mut seed: Option<GreenValue> = None;
    for &idx in &grid.sweep_order {
        let sample = solver(grid.points[idx], seed.as_ref())?;
        if sample.converged {
            seed = Some(sample.value.clone());
        }
        out[idx] = Some(sample);
    }
    let samples: Vec<GreenSample> = out.into_iter().map(|s| s.expect("all points visited")).collect();
    let failed = samples.iter().filter(|s| !s.converged).count();
    if (failed as f64) > SWEEP_FAILURE_FRACTION * samples.len() as f64 {
        return Err(SpectralError::SweepFailure {
            failed,
            total: samples.len(),
            details: sweep_diagnostics(&samples),
        });
    }
    Ok(samples)
}

/// Fills isolated unconverged interior points by linear interpolation of
/// the resolvent between their nearest converged neighbors.
///
/// Interpolated samples keep `converged = false` and gain
/// `interpolated = true` so downstream consumers can tell them apart. An
/// unconverged point on either grid boundary is an error (interpolation
/// would become extrapolation), and strictly more than 10% unconverged
/// points is a sweep failure.
pub fn interpolate_unconverged(samples: &[GreenSample]) -> Result<Vec<GreenSample>> {
    let n = samples.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let failed = samples.iter().filter(|s| !s.converged).count();
    if failed == 0 {
        return Ok(samples.to_vec());
    }
    if (failed as f64) > SWEEP_FAILURE_FRACTION * n as f64 {
        return Err(SpectralError::SweepFailure {
            failed,
            total: n,
            details: sweep_diagnostics(samples),
        });
    }
    for &edge in &[0, n - 1] {
        if !samples[edge].converged {
            return Err(SpectralError::BoundaryExtrapolation {
                index: edge,
                z: samples[edge].z,
            });
        }
    }
    let mut out = samples.to_vec();
    let mut i = 1;
    while i < n - 1 {
        if out[i].converged {
            i += 1;
            continue;
        }
        let run_start = i;
        let mut run_end = i;
        while !out[run_end + 1].converged {
            run_end += 1;
        }
        let left = out[run_start - 1].clone();
        let right = out[run_end + 1].clone();
        let x_left = left.z.re;
        let x_right = right.z.re;
        for j in run_start..=run_end {
            let t = if x_right > x_left {
                (out[j].z.re - x_left) / (x_right - x_left)
            } else {
                0.5
            };
            out[j].value = GreenValue::lerp(&left.value, &right.value, t)?;
            out[j].interpolated = true;
        }
        i = run_end + 2;
    }
    Ok(out)
}

/// Eigendecomposition of a general complex square matrix.
#[derive(Debug, Clone)]
pub struct ComplexEig {
    pub values: Vec<Complex64>,
    /// Eigenvectors as columns, each normalized to unit length.
    pub vectors: DMatrix<Complex64>,
    /// Condition estimate of the eigenvector matrix; large values signal a
    /// nearly defective matrix whose eigenbasis should not be inverted.
    pub vector_condition: f64,
}

/// Computes eigenvalues and eigenvectors of a complex matrix via its Schur
/// form: the triangular factor carries the eigenvalues on its diagonal and
/// each eigenvector follows from back-substitution in the triangular
/// system, rotated back by the unitary factor.
pub fn complex_eig(m: &DMatrix<Complex64>) -> Result<ComplexEig> {
    if m.nrows() != m.ncols() {
        return Err(SpectralError::InvalidInput(
            "eigendecomposition needs a square matrix".into(),
        ));
    }
    let n = m.nrows();
    let schur = nalgebra::Schur::try_new(m.clone(), 1e-14, 100_000).ok_or_else(|| {
        SpectralError::NumericalFailure("schur decomposition did not converge".into())
    })?;
    let (q, t) = schur.unpack();
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let lam = t[(i, i)];
        values.push(lam);
        // back-substitute (T - lam I) y = 0 with y[i] = 1, y[j>i] = 0
        let mut y = DVector::from_element(n, c64(0.0, 0.0));
        y[i] = c64(1.0, 0.0);
        for j in (0..i).rev() {
            let mut s = c64(0.0, 0.0);
            for k in (j + 1)..=i {
                s += t[(j, k)] * y[k];
            }
            let mut den = lam - t[(j, j)];
            if den.norm() < 1e-300 {
                den = c64(1e-300, 0.0);
            }
            y[j] = s / den;
        }
        let v = &q * y;
        let norm = v.norm();
        vectors.set_column(i, &v.map(|x| x / norm));
    }
    let vector_condition = condition_estimate(&vectors);
    Ok(ComplexEig {
        values,
        vectors,
        vector_condition,
    })
}
