//! Composition of layer resolvents into the deep-network spectrum.
//!
//! A depth-L product of free layer factors is handled by one of three
//! families of algorithms, each with a scalar and an operator-valued
//! variant:
//!
//! * identical layers: the depth map that pulls a depth-L evaluation
//!   point back to an equivalent one-layer point `z1` through
//!   `z_L = z1 (z1 - 1/G1(z1))^{L-1}` ([`z1_map_scalar`], [`z1_map_ov`]);
//! * distinct layers, scalar sectors: subordination in the moment
//!   variable `w = z G(z) - 1`, where the product's S-transform is the
//!   plain product of per-layer S-transforms ([`subordinate_hetero`]);
//! * distinct layers, matrix sectors: the twisted (non-commutative)
//!   S-transform fold with a matrix outer-consistency equation
//!   ([`solve_outer_consistency`]).
//!
//! [`select_solver`] picks the cheapest applicable route for a layer
//! stack and [`solve_green_grid`] drives whole spectral grids with
//! continuation, optional chunked parallelism, and gap repair.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::dyson_matrix::{
    solve_matrix_dyson_newton, solve_ov_scalar_path, OVGreenSample, SpectralArgument, TwistMatrix,
};
use crate::dyson_scalar::{
    scalar_green_derivative, solve_dyson_scalar, ScalarDysonProblem,
};
use crate::error::{PointDiagnostic, Result, SpectralError};
use crate::numerics::{
    c64, complex_eig, GreenSample, GreenValue, SpectralGrid, SWEEP_FAILURE_FRACTION,
};

/// Branch tolerance on the imaginary part of a physical resolvent.
const PHYS_TOL: f64 = 1e-10;
/// Looser branch tolerance for the triple-nested matrix pipeline.
const PHYS_TOL_OV: f64 = 1e-8;
/// Moment arguments closer to zero than this are rejected; `w -> 0`
/// corresponds to `z -> infinity` where the subordination chart breaks.
const W_MIN: f64 = 1e-8;

/// One layer of the product: its structured skip and noise strength.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub twist: TwistMatrix,
    pub sigma2: f64,
}

impl LayerSpec {
    pub fn new(twist: TwistMatrix, sigma2: f64) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(SpectralError::InvalidInput(format!(
                "noise strength must be nonnegative, got {sigma2}"
            )));
        }
        Ok(LayerSpec { twist, sigma2 })
    }

    /// Scalar layer with skip weight `a`.
    pub fn scalar(a: f64, sigma2: f64) -> Result<Self> {
        LayerSpec::new(TwistMatrix::scalar(a)?, sigma2)
    }

    pub fn q(&self) -> usize {
        self.twist.q
    }

    /// One-layer scalar problem over the Gram spectrum of the skip.
    pub fn scalar_problem(&self) -> Result<ScalarDysonProblem> {
        ScalarDysonProblem::new(self.twist.gram()?, self.sigma2)
    }

    /// First moment of this layer's squared-singular-value measure.
    fn first_moment(&self) -> f64 {
        let gram = self.twist.a_q.transpose() * &self.twist.a_q;
        gram.trace() / self.q() as f64 + self.sigma2
    }
}

/// True when every layer has the same skip matrix and noise strength.
pub fn layers_identical(layers: &[LayerSpec]) -> bool {
    layers.windows(2).all(|w| {
        w[0].sigma2 == w[1].sigma2
            && w[0].twist.q == w[1].twist.q
            && (&w[0].twist.a_q - &w[1].twist.a_q).abs().max() < 1e-14
    })
}

/// Validates a layer stack and returns its `(q, L)`.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<(usize, usize)> {
    if layers.is_empty() {
        return Err(SpectralError::InvalidInput("empty layer stack".into()));
    }
    let q = layers[0].q();
    if layers.iter().any(|l| l.q() != q) {
        return Err(SpectralError::InvalidInput(
            "all layers must share the same sector count".into(),
        ));
    }
    Ok((q, layers.len()))
}

fn lift_to_upper(z: Complex64) -> Complex64 {
    let floor = 0.05 * (1.0 + z.norm());
    if z.im < floor {
        c64(z.re, floor)
    } else {
        z
    }
}

/// Solution of the depth map at one evaluation point.
#[derive(Debug, Clone)]
pub struct Z1Solution {
    /// Pulled-back one-layer evaluation point.
    pub z1: Complex64,
    /// One-layer resolvent at `z1`.
    pub g1: Complex64,
    /// Depth-L resolvent at the requested point.
    pub g_l: Complex64,
    /// Forward-map residual `|z1 (z1 - 1/G1)^{L-1} - z|`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Z1Attempt {
    z1: Complex64,
    g1: Complex64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Depth above which the depth-map root solve runs in `log z1`.
const Z1_LOG_DEPTH: usize = 5;
const Z1_MAX_ITER: usize = 80;
const Z1_DAMPING: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// One Newton run of the depth map from a single starting point. Returns
/// `None` when the first resolvent evaluation already fails.
fn z1_newton_once(
    z_target: Complex64,
    prob: &ScalarDysonProblem,
    l: usize,
    z1_start: Complex64,
) -> Option<Z1Attempt> {
    let log_domain = l >= Z1_LOG_DEPTH;
    let lm1 = (l - 1) as f64;
    let tol = 1e-11 * z_target.norm().max(1.0);
    let log_tol = 1e-12;

    let mut iterations = 0usize;

    // evaluates the map residual and the quantities the update needs
    let eval = |z1: Complex64,
                    hint: Option<Complex64>|
     -> Option<(Complex64, Complex64, Complex64)> {
        if !(z1.im > 0.0) || !z1.re.is_finite() || !z1.im.is_finite() {
            return None;
        }
        let sample = solve_dyson_scalar(z1, prob, hint).ok()?;
        if !sample.converged {
            return None;
        }
        let g1 = sample.scalar().ok()?;
        if g1.norm() < 1e-14 {
            return None;
        }
        let omega = z1 - 1.0 / g1;
        let f = if log_domain {
            z1.ln() + lm1 * omega.ln() - z_target.ln()
        } else {
            z1 * omega.powf(lm1) - z_target
        };
        if !f.re.is_finite() || !f.im.is_finite() {
            return None;
        }
        Some((f, g1, omega))
    };

    let (mut f, mut g1, mut omega) = eval(z1_start, None)?;
    let mut z1 = z1_start;
    let mut converged = false;
    for _ in 0..Z1_MAX_ITER {
        let fnorm = f.norm();
        let done = if log_domain { fnorm <= log_tol } else { fnorm <= tol };
        if done {
            converged = true;
            break;
        }
        iterations += 1;

        let g1p = scalar_green_derivative(z1, g1, prob);
        let omega_p = c64(1.0, 0.0) + g1p / (g1 * g1);
        let step = if log_domain {
            // d f / d log z1
            let df = c64(1.0, 0.0) + lm1 * z1 * omega_p / omega;
            -f / df
        } else {
            let df = omega.powf(lm1) + lm1 * z1 * omega.powf(lm1 - 1.0) * omega_p;
            -f / df
        };
        if !step.re.is_finite() || !step.im.is_finite() {
            break;
        }
        // cap the raw step
        let cap = 10.0 * z1.norm().max(1.0);
        let step = if step.norm() > cap {
            step * (cap / step.norm())
        } else {
            step
        };

        let mut advanced = false;
        for &alpha in &Z1_DAMPING {
            let z1_new = if log_domain {
                (z1.ln() + step * alpha).exp()
            } else {
                z1 + step * alpha
            };
            if !(z1_new.im > 0.0) {
                continue;
            }
            if let Some((f_new, g_new, om_new)) = eval(z1_new, Some(g1)) {
                if f_new.norm() < fnorm {
                    z1 = z1_new;
                    f = f_new;
                    g1 = g_new;
                    omega = om_new;
                    advanced = true;
                    break;
                }
            }
        }
        if !advanced {
            break;
        }
    }

    // report the forward-map residual on the original scale for both
    // domains so attempts are comparable
    let forward = (z1 * omega.powf(lm1) - z_target).norm();
    Some(Z1Attempt {
        z1,
        g1,
        residual: forward,
        iterations,
        converged,
    })
}

fn z1_seed_list(z_target: Complex64, l: usize, seed: Option<Complex64>) -> Vec<Complex64> {
    let mut seeds = Vec::with_capacity(8);
    if let Some(s) = seed {
        seeds.push(s);
    }
    let log_z = z_target.ln();
    let inv_l = 1.0 / l as f64;
    for t in [0.0, 0.33, 0.66, 1.0] {
        let expo = inv_l + t * (1.0 - inv_l);
        seeds.push(lift_to_upper((log_z * expo).exp()));
    }
    seeds.push(c64(1.0, 0.8));
    seeds.push(c64(0.4, 0.4));
    seeds.push(c64(3.0, 0.5));
    seeds
}

/// Depth-L resolvent of a stack of identical scalar layers, computed by
/// pulling the evaluation point back through the one-layer depth map.
///
/// The root solve for `z1` runs in `log z1` from depth 5 on (where the
/// forward map spans many orders of magnitude) and multi-starts from the
/// continuation seed, a geometric ladder between `z^(1/L)` and `z`, and
/// fixed upper-half-plane points. Backtracking accepts only steps that
/// shrink the residual while keeping `Im z1 > 0`. Among the attempts,
/// physical converged roots win; otherwise the smallest residual is
/// reported unconverged.
pub fn z1_map_scalar(
    z_target: Complex64,
    prob: &ScalarDysonProblem,
    l: usize,
    seed: Option<Complex64>,
) -> Result<Z1Solution> {
    if l == 0 {
        return Err(SpectralError::InvalidInput(
            "depth must be at least 1".into(),
        ));
    }
    if !(z_target.im > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "evaluation point must have positive imaginary part, got {z_target}"
        )));
    }
    if l == 1 {
        let sample = solve_dyson_scalar(z_target, prob, seed)?;
        let g = sample.scalar()?;
        return Ok(Z1Solution {
            z1: z_target,
            g1: g,
            g_l: g,
            residual: sample.residual,
            iterations: sample.iterations,
            converged: sample.converged,
        });
    }

    let lm1 = (l - 1) as i32;
    let depth_green = |z1: Complex64, g1: Complex64| -> Option<Complex64> {
        let den = z1 * g1 - 1.0;
        if den.norm() < 1e-12 {
            return None;
        }
        Some(g1.powi(l as i32) / den.powi(lm1))
    };

    let mut best: Option<(Z1Attempt, Complex64)> = None;
    for start in z1_seed_list(z_target, l, seed) {
        let att = match z1_newton_once(z_target, prob, l, start) {
            Some(a) => a,
            None => continue,
        };
        let g_l = match depth_green(att.z1, att.g1) {
            Some(g) => g,
            None => continue,
        };
        let physical = g_l.im <= PHYS_TOL;
        let cand_ok = att.converged && physical;
        let keep = match &best {
            None => true,
            Some((b, bg)) => {
                let best_ok = b.converged && bg.im <= PHYS_TOL;
                (cand_ok && !best_ok) || (cand_ok == best_ok && att.residual < b.residual)
            }
        };
        if keep {
            let done = cand_ok;
            best = Some((att, g_l));
            if done {
                break;
            }
        }
    }

    let (att, g_l) = best.ok_or_else(|| {
        SpectralError::NumericalFailure(format!(
            "no depth-map start produced an evaluable resolvent at z = {z_target}"
        ))
    })?;
    let converged = att.converged && g_l.im <= PHYS_TOL;
    Ok(Z1Solution {
        z1: att.z1,
        g1: att.g1,
        g_l,
        residual: att.residual,
        iterations: att.iterations,
        converged,
    })
}

/// Computes `G^L (z1 G - I)^{-(L-1)}` for a matrix resolvent `G`.
///
/// The primary route diagonalizes `G` and applies the scalar ratio to
/// its eigenvalues. When the eigenvector basis is ill conditioned or an
/// eigenvalue sits on the pole of the ratio, the routine falls back to
/// repeated multiplication with an LU solve (the two factors commute, so
/// the ordering is immaterial); the returned flag reports the fallback.
pub fn matrix_power_ratio(
    g1: &DMatrix<Complex64>,
    z1: Complex64,
    l: usize,
) -> Result<(DMatrix<Complex64>, bool)> {
    let q = g1.nrows();
    if g1.ncols() != q || q == 0 {
        return Err(SpectralError::InvalidInput(
            "resolvent must be square and nonempty".into(),
        ));
    }
    if l == 0 {
        return Err(SpectralError::InvalidInput(
            "depth must be at least 1".into(),
        ));
    }
    if l == 1 {
        return Ok((g1.clone(), false));
    }
    let lm1 = (l - 1) as i32;

    let eigen_route = || -> Option<DMatrix<Complex64>> {
        let eig = complex_eig(g1).ok()?;
        if eig.vector_condition > 1e8 {
            return None;
        }
        let mut ratios = Vec::with_capacity(q);
        for &gamma in &eig.values {
            let den = z1 * gamma - 1.0;
            if den.norm() < 1e-10 {
                return None;
            }
            ratios.push(gamma.powi(l as i32) / den.powi(lm1));
        }
        let v = eig.vectors.clone();
        let v_inv = v.clone().lu().try_inverse()?;
        let mut vd = v;
        for (j, r) in ratios.iter().enumerate() {
            for i in 0..q {
                vd[(i, j)] *= r;
            }
        }
        Some(vd * v_inv)
    };

    if let Some(out) = eigen_route() {
        return Ok((out, false));
    }

    // commuting-factor fallback: num = G^L, den = (z1 G - I)^(L-1)
    let eye = DMatrix::<Complex64>::identity(q, q);
    let mut num = g1.clone();
    for _ in 1..l {
        num = &num * g1;
    }
    let base = g1.map(|v| v * z1) - &eye;
    let mut den = eye;
    for _ in 0..(l - 1) {
        den = &den * &base;
    }
    let out = den
        .lu()
        .solve(&num)
        .ok_or_else(|| SpectralError::NumericalFailure("singular depth-map denominator".into()))?;
    Ok((out, true))
}

/// Depth-map solution with the full sector resolvent.
#[derive(Debug, Clone)]
pub struct OVZ1Solution {
    /// Pulled-back one-layer point; equals the evaluation point when the
    /// solve was delegated to the layer-consistency pipeline.
    pub z1: Complex64,
    /// Depth-L sector resolvent.
    pub g_b: DMatrix<Complex64>,
    /// Its normalized trace.
    pub g_scalar: Complex64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// True when the matrix reconstruction used the repeated-multiplication
    /// fallback instead of an eigendecomposition.
    pub used_fallback: bool,
    /// True when the skip's Gram matrix is away from the identity and the
    /// result came from the layer-consistency pipeline instead of the
    /// scalar-manifold pull-back.
    pub off_manifold: bool,
}

/// Skips whose Gram matrix deviates from the identity by more than this
/// are off the scalar manifold and take the pipeline route in
/// [`z1_map_ov`].
pub const GRAM_ISOTROPY_TOL: f64 = 1e-8;

/// Depth map for identical operator-valued layers.
///
/// When the skip's Gram matrix is the identity (identity and orthogonal
/// families), the sector resolvent is a scalar multiple of I_q and the
/// depth-L solve collapses to the scalar pull-back: `z1` is found from
/// the scalar depth map applied to the normalized trace, then one
/// one-layer solve at `z1` and the matrix ratio
/// `G1^L (z1 G1 - I)^{-(L-1)}` reconstruct the sector resolvent.
///
/// Away from that manifold the factors are only free with amalgamation
/// over the sector algebra, the scalar pull-back has no justification,
/// and Monte Carlo contradicts its output. Such skips are delegated to
/// [`solve_outer_consistency`] on L identical layers and flagged
/// `off_manifold`; grid sweeps should drive the pipeline route directly
/// so its continuation state is threaded. At q = 1 the pull-back is
/// exact for any skip (the factors are free over the scalars) and no
/// delegation happens.
pub fn z1_map_ov(
    z_target: Complex64,
    twist: &TwistMatrix,
    sigma2: f64,
    l: usize,
    seed: Option<Complex64>,
) -> Result<OVZ1Solution> {
    if l >= 2 && twist.q > 1 && twist.gram_isotropy_deviation() > GRAM_ISOTROPY_TOL {
        let layer = LayerSpec::new(twist.clone(), sigma2)?;
        let layers = vec![layer; l];
        let (ov, _) = solve_outer_consistency(z_target, &layers, None)?;
        return Ok(OVZ1Solution {
            z1: z_target,
            g_b: ov.g_b,
            g_scalar: ov.g_scalar,
            residual: ov.residual,
            iterations: ov.iterations,
            converged: ov.converged,
            used_fallback: false,
            off_manifold: true,
        });
    }

    let prob = ScalarDysonProblem::new(twist.gram()?, sigma2)?;
    let scalar = z1_map_scalar(z_target, &prob, l, seed)?;

    let one_layer = solve_ov_scalar_path(scalar.z1, twist, sigma2, Some(scalar.g1))?;
    let (g_b, used_fallback) = matrix_power_ratio(&one_layer.g_b, scalar.z1, l)?;
    let q = twist.q;
    let g_scalar = g_b.trace() / q as f64;
    Ok(OVZ1Solution {
        z1: scalar.z1,
        g_b,
        g_scalar,
        residual: scalar.residual,
        iterations: scalar.iterations + one_layer.iterations,
        converged: scalar.converged && one_layer.converged,
        used_fallback,
        off_manifold: false,
    })
}

/// One S-transform evaluation produced by inverting the moment map.
#[derive(Debug, Clone)]
pub struct STransformSample {
    /// Moment argument `w`.
    pub w: Complex64,
    /// S-transform value at `w`.
    pub s: Complex64,
    /// The inverted evaluation point: `z G(z) - 1 = w` holds there.
    pub z_inner: Complex64,
    /// Resolvent at the inverted point.
    pub g_inner: Complex64,
    pub converged: bool,
    pub iterations: usize,
}

const PSI_MAX_ITER: usize = 80;
const PSI_DAMPING: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// Evaluates the S-transform of a one-layer measure at moment argument
/// `w` by Newton inversion of `z G(z) - 1 = w`, then `S = G(z)/w`.
///
/// The default starting point `m1 (w+1)/w` is exact for a point mass at
/// the first moment `m1` and lands in the right region for small `|w|`;
/// a continuation hint takes precedence. Arguments with `|w| < 1e-8` are
/// rejected.
pub fn s_transform_scalar(
    prob: &ScalarDysonProblem,
    w: Complex64,
    hint: Option<(Complex64, Complex64)>,
) -> Result<STransformSample> {
    if w.norm() < W_MIN {
        return Err(SpectralError::InvalidInput(format!(
            "moment argument too close to zero: |w| = {:.2e}",
            w.norm()
        )));
    }
    let m1 = prob.gram.s.iter().sum::<f64>() / prob.gram.p as f64 + prob.sigma2;
    let heavy = prob.gram.max_eig() + prob.sigma2 + 1.0;

    let mut seeds: Vec<(Complex64, Option<Complex64>)> = Vec::with_capacity(3);
    if let Some((zh, gh)) = hint {
        if zh.im > 0.0 {
            seeds.push((zh, Some(gh)));
        }
    }
    seeds.push((lift_to_upper(m1 * (w + 1.0) / w), None));
    seeds.push((lift_to_upper(heavy * (w + 1.0) / w), None));

    let tol = 1e-11 * w.norm().max(1.0);
    let mut best: Option<STransformSample> = None;

    for (z0, g0) in seeds {
        let mut z = z0;
        let mut g_hint = g0;
        let mut f = c64(f64::NAN, 0.0);
        let mut g = c64(0.0, 0.0);
        let mut iterations = 0usize;
        let mut valid = false;
        let mut converged = false;

        for _ in 0..PSI_MAX_ITER {
            if !valid {
                let sample = match solve_dyson_scalar(z, prob, g_hint) {
                    Ok(s) if s.converged => s,
                    _ => break,
                };
                g = sample.scalar()?;
                f = z * g - 1.0 - w;
                valid = true;
            }
            if f.norm() <= tol {
                converged = true;
                break;
            }
            iterations += 1;

            let gp = scalar_green_derivative(z, g, prob);
            let df = g + z * gp;
            if df.norm() < 1e-300 {
                break;
            }
            let mut step = -f / df;
            let cap = 10.0 * z.norm().max(1.0);
            if step.norm() > cap {
                step *= cap / step.norm();
            }

            let mut advanced = false;
            for &alpha in &PSI_DAMPING {
                let z_new = z + step * alpha;
                if !(z_new.im > 0.0) {
                    continue;
                }
                let sample = match solve_dyson_scalar(z_new, prob, Some(g)) {
                    Ok(s) if s.converged => s,
                    _ => continue,
                };
                let g_new = sample.scalar()?;
                let f_new = z_new * g_new - 1.0 - w;
                if f_new.norm() < f.norm() {
                    z = z_new;
                    g = g_new;
                    f = f_new;
                    g_hint = Some(g_new);
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }

        if !valid {
            continue;
        }
        let cand = STransformSample {
            w,
            s: g / w,
            z_inner: z,
            g_inner: g,
            converged,
            iterations,
        };
        let keep = match &best {
            None => true,
            Some(b) => {
                let cand_res = f.norm();
                let best_res = b.z_inner * b.g_inner - 1.0 - w;
                (cand.converged && !b.converged)
                    || (cand.converged == b.converged && cand_res < best_res.norm())
            }
        };
        if keep {
            let done = cand.converged;
            best = Some(cand);
            if done {
                break;
            }
        }
    }

    best.ok_or_else(|| {
        SpectralError::NumericalFailure(format!(
            "moment-map inversion produced no evaluable attempt at w = {w}"
        ))
    })
}

/// Which outer equation the scalar subordination solver iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeteroFormulation {
    /// `f(w) = (w+1)/(w S_prod(w)) - z`
    Rational,
    /// The cleared form `f(w) = z w S_prod(w) - w - 1`, better behaved
    /// when `S_prod` passes near zero along the Newton path.
    Polynomial,
}

/// Continuation state threaded through a heterogeneous scalar sweep.
#[derive(Debug, Clone)]
pub struct HeteroSeed {
    pub w: Complex64,
    /// Per-layer `(z, G)` pairs at the inverted points.
    pub inner: Vec<Option<(Complex64, Complex64)>>,
}

const HETERO_MAX_ITER: usize = 60;
const HETERO_DAMPING: [f64; 7] = [1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01];

struct ProdEval {
    s_prod: Complex64,
    inner: Vec<Option<(Complex64, Complex64)>>,
    all_converged: bool,
}

fn s_product(
    problems: &[ScalarDysonProblem],
    w: Complex64,
    hints: &[Option<(Complex64, Complex64)>],
) -> Option<ProdEval> {
    let mut s_prod = c64(1.0, 0.0);
    let mut inner = Vec::with_capacity(problems.len());
    let mut all_converged = true;
    for (prob, hint) in problems.iter().zip(hints.iter()) {
        let sample = s_transform_scalar(prob, w, *hint).ok()?;
        all_converged &= sample.converged;
        s_prod *= sample.s;
        inner.push(Some((sample.z_inner, sample.g_inner)));
    }
    Some(ProdEval {
        s_prod,
        inner,
        all_converged,
    })
}

/// Depth-L resolvent of a stack of distinct scalar layers via moment
/// subordination.
///
/// The outer unknown is `w = z G_L(z) - 1`; the defining equation uses
/// the product of per-layer S-transforms, each obtained by inverting its
/// own moment map (with continuation hints threaded between outer
/// iterations). The outer Newton uses a finite-difference derivative, a
/// step cap of `10 max(|w|, 1)`, and backtracking that additionally
/// requires every inner inversion on the candidate to converge.
pub fn subordinate_hetero(
    z_target: Complex64,
    problems: &[ScalarDysonProblem],
    seed: Option<&HeteroSeed>,
    formulation: HeteroFormulation,
) -> Result<(GreenSample, HeteroSeed)> {
    if problems.is_empty() {
        return Err(SpectralError::InvalidInput("empty layer stack".into()));
    }
    if !(z_target.im > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "evaluation point must have positive imaginary part, got {z_target}"
        )));
    }
    let l = problems.len();

    let f_of = |w: Complex64, s_prod: Complex64| -> Complex64 {
        match formulation {
            HeteroFormulation::Rational => (w + 1.0) / (w * s_prod) - z_target,
            HeteroFormulation::Polynomial => z_target * w * s_prod - w - 1.0,
        }
    };
    let tol = 1e-10 * z_target.norm().max(1.0);

    // starting points for the moment variable
    let mut w_seeds: Vec<Complex64> = Vec::with_capacity(3);
    if let Some(s) = seed {
        if s.w.norm() >= W_MIN {
            w_seeds.push(s.w);
        }
    }
    if let Ok(sample) = solve_dyson_scalar(z_target, &problems[0], None) {
        if sample.converged {
            if let Ok(g) = sample.scalar() {
                let w0 = z_target * g - 1.0;
                if w0.norm() >= W_MIN {
                    w_seeds.push(w0);
                }
            }
        }
    }
    let m1_total: f64 = problems
        .iter()
        .map(|p| p.gram.s.iter().sum::<f64>() / p.gram.p as f64 + p.sigma2)
        .product();
    let w_free = m1_total / z_target;
    if w_free.norm() >= W_MIN {
        w_seeds.push(w_free);
    }
    if w_seeds.is_empty() {
        w_seeds.push(c64(0.05, -0.05));
    }

    let hints0: Vec<Option<(Complex64, Complex64)>> = match seed {
        Some(s) if s.inner.len() == l => s.inner.clone(),
        _ => vec![None; l],
    };

    let mut best: Option<(Complex64, ProdEval, f64, usize, bool)> = None;
    for w0 in w_seeds {
        let mut w = w0;
        let mut hints = hints0.clone();
        let mut eval = match s_product(problems, w, &hints) {
            Some(e) => e,
            None => continue,
        };
        hints.clone_from(&eval.inner);
        let mut f = f_of(w, eval.s_prod);
        let mut iterations = 0usize;
        let mut converged = false;

        for _ in 0..HETERO_MAX_ITER {
            if f.norm() <= tol && eval.all_converged {
                converged = true;
                break;
            }
            iterations += 1;

            let h = 1e-7 * w.norm().max(1.0);
            let fd = match s_product(problems, w + h, &hints) {
                Some(e) => (f_of(w + h, e.s_prod) - f) / h,
                None => break,
            };
            if fd.norm() < 1e-300 {
                break;
            }
            let mut step = -f / fd;
            let cap = 10.0 * w.norm().max(1.0);
            if step.norm() > cap {
                step *= cap / step.norm();
            }

            let mut advanced = false;
            for &alpha in &HETERO_DAMPING {
                let w_new = w + step * alpha;
                if w_new.norm() < W_MIN {
                    continue;
                }
                if let Some(e_new) = s_product(problems, w_new, &hints) {
                    let f_new = f_of(w_new, e_new.s_prod);
                    if e_new.all_converged && f_new.norm() < f.norm() {
                        w = w_new;
                        f = f_new;
                        hints.clone_from(&e_new.inner);
                        eval = e_new;
                        advanced = true;
                        break;
                    }
                }
            }
            if !advanced {
                break;
            }
        }

        let g = (w + 1.0) / z_target;
        let physical = g.im <= PHYS_TOL;
        let cand_ok = converged && physical;
        let keep = match &best {
            None => true,
            Some((_, _, bres, _, bok)) => {
                (cand_ok && !bok) || (cand_ok == *bok && f.norm() < *bres)
            }
        };
        if keep {
            best = Some((w, eval, f.norm(), iterations, cand_ok));
            if cand_ok {
                break;
            }
        }
    }

    let (w, eval, residual, iterations, converged) = best.ok_or_else(|| {
        SpectralError::NumericalFailure(format!(
            "no subordination start produced an evaluable attempt at z = {z_target}"
        ))
    })?;
    let g = (w + 1.0) / z_target;
    let sample = GreenSample {
        z: z_target,
        value: GreenValue::Scalar(g),
        converged,
        interpolated: false,
        residual,
        iterations,
    };
    let new_seed = HeteroSeed {
        w,
        inner: eval.inner,
    };
    Ok((sample, new_seed))
}

/// One matrix moment-map inversion: `b G(b) - I = W` solved for `b`.
#[derive(Debug, Clone)]
pub struct PsiInversion {
    pub b: DMatrix<Complex64>,
    /// Sector resolvent at the inverted argument.
    pub g_b: DMatrix<Complex64>,
    /// Order parameter of the final one-layer solve.
    pub m: Option<DMatrix<Complex64>>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

const PSI_OV_MAX_ITER: usize = 50;

fn vec_of(m: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_iterator(m.nrows() * m.ncols(), m.iter().cloned())
}

fn unvec(v: &DVector<Complex64>, q: usize) -> DMatrix<Complex64> {
    DMatrix::from_iterator(q, q, v.iter().cloned())
}

/// Inverts the matrix moment map of one operator-valued layer: finds the
/// argument `b` with `b G^(B)(b) - I = W`.
///
/// Newton over the q^2 complex entries of `b` with a finite-difference
/// Jacobian; every residual evaluation runs the one-layer matrix solver
/// at the candidate `b`, threading its sector resolvent as a hint.
/// Starting points: the continuation hint, the point-mass heuristic
/// `m1 (W+I) W^{-1}`, and `W + I`, each lifted into validity if needed.
pub fn psi_invert_ov(
    layer: &LayerSpec,
    w: &DMatrix<Complex64>,
    b_hint: Option<&DMatrix<Complex64>>,
    g_hint: Option<&DMatrix<Complex64>>,
) -> Result<PsiInversion> {
    let q = layer.q();
    if w.nrows() != q || w.ncols() != q {
        return Err(SpectralError::InvalidInput(format!(
            "moment argument must be {q}x{q}, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let eye = DMatrix::<Complex64>::identity(q, q);
    let w_norm = w.norm().max(1.0);
    let tol = 1e-10 * w_norm;

    let mut seeds: Vec<DMatrix<Complex64>> = Vec::new();
    if let Some(b) = b_hint {
        if b.nrows() == q && b.ncols() == q {
            seeds.push(b.clone());
        }
    }
    let m1 = layer.first_moment();
    if let Some(w_inv) = w.clone().lu().try_inverse() {
        seeds.push((w + &eye) * w_inv * c64(m1, 0.0));
    }
    seeds.push(w + &eye);
    // lifted copies restore argument validity when a seed sits too close
    // to the real axis
    let lift = DMatrix::from_diagonal_element(q, q, c64(0.0, 0.3));
    for i in 0..seeds.len() {
        seeds.push(&seeds[i] + &lift);
    }

    let mut best: Option<PsiInversion> = None;
    for b0 in seeds {
        let mut b = b0;
        let mut hint_cur: Option<DMatrix<Complex64>> = g_hint.cloned();

        let eval = |b: &DMatrix<Complex64>,
                    g_in: Option<&DMatrix<Complex64>>|
         -> Option<(DMatrix<Complex64>, OVGreenSample)> {
            let sol = solve_matrix_dyson_newton(
                &SpectralArgument::Matrix(b.clone()),
                &layer.twist,
                layer.sigma2,
                g_in,
            )
            .ok()?;
            if !sol.converged {
                return None;
            }
            let res = b * &sol.g_b - &eye - w;
            Some((res, sol))
        };

        let (mut res, sol0) = match eval(&b, hint_cur.as_ref()) {
            Some(v) => v,
            None => continue,
        };
        let mut m_cur = sol0.order_param_m.clone();
        hint_cur = Some(sol0.g_b.clone());
        let mut g_cur: Option<DMatrix<Complex64>> = Some(sol0.g_b);
        let mut iterations = 0usize;
        let mut converged = false;

        for _ in 0..PSI_OV_MAX_ITER {
            if res.norm() <= tol {
                converged = true;
                break;
            }
            iterations += 1;

            // finite-difference Jacobian over the entries of b
            let n2 = q * q;
            let mut jac = DMatrix::<Complex64>::zeros(n2, n2);
            let r0 = vec_of(&res);
            let mut fd_failed = false;
            for col in 0..n2 {
                let (ci, cj) = (col % q, col / q);
                let h = 1e-7 * b[(ci, cj)].norm().max(1.0);
                let mut bp = b.clone();
                bp[(ci, cj)] += c64(h, 0.0);
                match eval(&bp, hint_cur.as_ref()) {
                    Some((rp, _)) => {
                        let col_vec = (vec_of(&rp) - &r0) / c64(h, 0.0);
                        jac.set_column(col, &col_vec);
                    }
                    None => {
                        fd_failed = true;
                        break;
                    }
                }
            }
            if fd_failed {
                break;
            }
            let delta = match jac.lu().solve(&-r0) {
                Some(d) => d,
                None => break,
            };
            let mut step = unvec(&delta, q);
            let cap = 10.0 * b.norm().max(1.0);
            if step.norm() > cap {
                let scale = cap / step.norm();
                step = step.map(|v| v * scale);
            }

            let mut advanced = false;
            for &alpha in &HETERO_DAMPING {
                let b_new = &b + step.map(|v| v * alpha);
                if let Some((res_new, sol_new)) = eval(&b_new, hint_cur.as_ref()) {
                    if res_new.norm() < res.norm() {
                        b = b_new;
                        res = res_new;
                        m_cur = sol_new.order_param_m.clone();
                        hint_cur = Some(sol_new.g_b.clone());
                        g_cur = Some(sol_new.g_b);
                        advanced = true;
                        break;
                    }
                }
            }
            if !advanced {
                break;
            }
        }

        let g_b = match g_cur {
            Some(g) => g,
            None => continue,
        };
        let cand = PsiInversion {
            b,
            g_b,
            m: m_cur,
            converged,
            residual: res.norm(),
            iterations,
        };
        let keep = match &best {
            None => true,
            Some(bst) => {
                (cand.converged && !bst.converged)
                    || (cand.converged == bst.converged && cand.residual < bst.residual)
            }
        };
        if keep {
            let done = cand.converged;
            best = Some(cand);
            if done {
                break;
            }
        }
    }

    best.ok_or_else(|| {
        SpectralError::NumericalFailure(
            "matrix moment-map inversion produced no evaluable attempt".into(),
        )
    })
}

/// Per-layer continuation hints for the twisted fold: the moment argument
/// `b` and the sector resolvent from the previous inversion of each layer.
#[derive(Debug, Clone, Default)]
pub struct FoldHints {
    pub b: Vec<Option<DMatrix<Complex64>>>,
    pub g: Vec<Option<DMatrix<Complex64>>>,
}

impl FoldHints {
    pub fn empty(l: usize) -> Self {
        FoldHints {
            b: vec![None; l],
            g: vec![None; l],
        }
    }
}

/// Result of folding the per-layer S-transforms at one matrix argument.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    /// Twisted product of the layer S-transforms at `W`.
    pub s_prod: DMatrix<Complex64>,
    pub all_converged: bool,
    pub iterations: usize,
}

/// Folds per-layer matrix S-transforms into the product's S-transform by
/// twisted multiplicativity.
///
/// For non-commuting factors the product rule acquires a conjugated
/// argument: starting from the last layer,
///
/// ```text
/// S := S_L(W);   for k = L-1 .. 1:   S := S * S_k(S^{-1} W S)
/// ```
///
/// Each S-transform evaluation is one matrix moment-map inversion,
/// `S_k(V) = G_k(b_k) V^{-1}`. At q = 1 every conjugation collapses and
/// the fold reduces to the plain scalar product.
pub fn twisted_fold(
    layers: &[LayerSpec],
    w: &DMatrix<Complex64>,
    hints: &mut FoldHints,
) -> Result<FoldOutcome> {
    let (q, l) = validate_layers(layers)?;
    if w.nrows() != q || w.ncols() != q {
        return Err(SpectralError::InvalidInput(format!(
            "moment argument must be {q}x{q}, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    if hints.b.len() != l {
        *hints = FoldHints::empty(l);
    }

    let s_of = |inv: &PsiInversion, arg: &DMatrix<Complex64>| -> Result<DMatrix<Complex64>> {
        let arg_inv = arg.clone().lu().try_inverse().ok_or_else(|| {
            SpectralError::NumericalFailure("singular moment argument in fold".into())
        })?;
        Ok(&inv.g_b * arg_inv)
    };

    let mut all_converged = true;
    let mut iterations = 0usize;

    let last = l - 1;
    let inv = psi_invert_ov(&layers[last], w, hints.b[last].as_ref(), hints.g[last].as_ref())?;
    all_converged &= inv.converged;
    iterations += inv.iterations;
    hints.b[last] = Some(inv.b.clone());
    hints.g[last] = Some(inv.g_b.clone());
    let mut s_cumul = s_of(&inv, w)?;

    for k in (0..last).rev() {
        let s_inv = s_cumul.clone().lu().try_inverse().ok_or_else(|| {
            SpectralError::NumericalFailure("singular partial S-transform in fold".into())
        })?;
        let arg = &s_inv * w * &s_cumul;
        let inv_k = psi_invert_ov(&layers[k], &arg, hints.b[k].as_ref(), hints.g[k].as_ref())?;
        all_converged &= inv_k.converged;
        iterations += inv_k.iterations;
        hints.b[k] = Some(inv_k.b.clone());
        hints.g[k] = Some(inv_k.g_b.clone());
        let s_k = s_of(&inv_k, &arg)?;
        s_cumul = &s_cumul * s_k;
    }

    Ok(FoldOutcome {
        s_prod: s_cumul,
        all_converged,
        iterations,
    })
}

/// Continuation state threaded through an operator-valued heterogeneous
/// sweep.
#[derive(Debug, Clone)]
pub struct OvOuterSeed {
    pub w: DMatrix<Complex64>,
    pub hints: FoldHints,
}

const OUTER_MAX_ITER: usize = 40;

/// Depth-L sector resolvent of distinct operator-valued layers.
///
/// The outer unknown is the matrix moment variable `W` at the requested
/// scalar point: the top-level moment map gives `z W = ... ` through the
/// consistency equation
///
/// ```text
/// F(W) = (W + I) (S_prod(W) W)^{-1} - z I = 0,
/// ```
///
/// where `S_prod` is the twisted fold of the layer S-transforms. Newton
/// runs over the q^2 complex entries of `W` with a finite-difference
/// Jacobian; backtracking accepts the largest step that both shrinks
/// `|F|` and keeps every inner inversion converged. At the solution the
/// sector resolvent is `G^(B) = (W + I)/z`. The route accepts q = 1,
/// where it reduces to scalar subordination.
pub fn solve_outer_consistency(
    z: Complex64,
    layers: &[LayerSpec],
    seed: Option<&OvOuterSeed>,
) -> Result<(OVGreenSample, OvOuterSeed)> {
    let (q, l) = validate_layers(layers)?;
    if !(z.im > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "evaluation point must have positive imaginary part, got {z}"
        )));
    }
    let eye = DMatrix::<Complex64>::identity(q, q);
    let tol = 1e-9 * z.norm().max(1.0) * q as f64;

    // starting points for the matrix moment variable
    let mut w_seeds: Vec<(DMatrix<Complex64>, FoldHints)> = Vec::new();
    if let Some(s) = seed {
        if s.w.nrows() == q {
            w_seeds.push((s.w.clone(), s.hints.clone()));
        }
    }
    let scalar_problems: Result<Vec<ScalarDysonProblem>> =
        layers.iter().map(|l| l.scalar_problem()).collect();
    if let Ok(probs) = scalar_problems {
        if let Ok((sample, hs)) =
            subordinate_hetero(z, &probs, None, HeteroFormulation::Rational)
        {
            if sample.converged {
                w_seeds.push((
                    DMatrix::from_diagonal_element(q, q, hs.w),
                    FoldHints::empty(l),
                ));
            }
        }
    }
    let m1_total: f64 = layers.iter().map(|l| l.first_moment()).product();
    let w_free = c64(m1_total, 0.0) / z;
    if w_free.norm() >= W_MIN {
        w_seeds.push((
            DMatrix::from_diagonal_element(q, q, w_free),
            FoldHints::empty(l),
        ));
    }
    if w_seeds.is_empty() {
        w_seeds.push((
            DMatrix::from_diagonal_element(q, q, c64(0.05, -0.05)),
            FoldHints::empty(l),
        ));
    }

    let f_of = |w: &DMatrix<Complex64>, s_prod: &DMatrix<Complex64>| -> Option<DMatrix<Complex64>> {
        let sw = s_prod * w;
        let sw_inv = sw.lu().try_inverse()?;
        Some((w + &eye) * sw_inv - eye.map(|v| v * z))
    };

    let mut best: Option<(DMatrix<Complex64>, FoldHints, f64, usize, bool)> = None;
    'seeds: for (w0, hints0) in w_seeds {
        let mut w = w0;
        let mut hints = hints0;
        let fold0 = match twisted_fold(layers, &w, &mut hints) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let mut f = match f_of(&w, &fold0.s_prod) {
            Some(f) => f,
            None => continue,
        };
        let mut all_conv = fold0.all_converged;
        let mut iterations = 0usize;
        let mut converged = false;

        for _ in 0..OUTER_MAX_ITER {
            if f.norm() <= tol && all_conv {
                converged = true;
                break;
            }
            iterations += 1;

            // finite-difference Jacobian over the entries of W
            let n2 = q * q;
            let r0 = vec_of(&f);
            let mut jac = DMatrix::<Complex64>::zeros(n2, n2);
            let mut fd_failed = false;
            for col in 0..n2 {
                let (ci, cj) = (col % q, col / q);
                let h = 1e-6 * w[(ci, cj)].norm().max(1.0);
                let mut wp = w.clone();
                wp[(ci, cj)] += c64(h, 0.0);
                let mut hints_fd = hints.clone();
                let ok = twisted_fold(layers, &wp, &mut hints_fd)
                    .ok()
                    .and_then(|fo| f_of(&wp, &fo.s_prod));
                match ok {
                    Some(rp) => {
                        let col_vec = (vec_of(&rp) - &r0) / c64(h, 0.0);
                        jac.set_column(col, &col_vec);
                    }
                    None => {
                        fd_failed = true;
                        break;
                    }
                }
            }
            if fd_failed {
                break;
            }
            let delta = match jac.lu().solve(&-r0) {
                Some(d) => d,
                None => break,
            };
            let mut step = unvec(&delta, q);
            let cap = 10.0 * w.norm().max(1.0);
            if step.norm() > cap {
                let scale = cap / step.norm();
                step = step.map(|v| v * scale);
            }

            let mut advanced = false;
            for &alpha in &HETERO_DAMPING {
                let w_new = &w + step.map(|v| v * alpha);
                let mut hints_new = hints.clone();
                let fold_new = match twisted_fold(layers, &w_new, &mut hints_new) {
                    Ok(fo) => fo,
                    Err(_) => continue,
                };
                if !fold_new.all_converged {
                    continue;
                }
                if let Some(f_new) = f_of(&w_new, &fold_new.s_prod) {
                    if f_new.norm() < f.norm() {
                        w = w_new;
                        f = f_new;
                        hints = hints_new;
                        all_conv = fold_new.all_converged;
                        advanced = true;
                        break;
                    }
                }
            }
            if !advanced {
                break;
            }
        }

        let g_scalar = (w.trace() / q as f64 + 1.0) / z;
        let cand_ok = converged && g_scalar.im <= PHYS_TOL_OV;
        let keep = match &best {
            None => true,
            Some((_, _, bres, _, bok)) => {
                (cand_ok && !bok) || (cand_ok == *bok && f.norm() < *bres)
            }
        };
        if keep {
            let done = cand_ok;
            best = Some((w, hints, f.norm(), iterations, cand_ok));
            if done {
                break 'seeds;
            }
        }
    }

    let (w, hints, residual, iterations, converged) = best.ok_or_else(|| {
        SpectralError::NumericalFailure(format!(
            "no outer-consistency start produced an evaluable attempt at z = {z}"
        ))
    })?;
    let g_b = (&w + &eye).map(|v| v / z);
    let g_scalar = g_b.trace() / q as f64;
    let sample = OVGreenSample {
        argument: SpectralArgument::Scalar(z),
        g_b,
        g_scalar,
        order_param_m: None,
        converged,
        residual,
        iterations,
        method: "ov-twisted-pipeline",
        diagnostics: None,
    };
    let new_seed = OvOuterSeed { w, hints };
    Ok((sample, new_seed))
}

/// The solver routes a layer stack can be dispatched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Pick automatically from the stack's shape.
    Auto,
    /// One scalar layer.
    Scalar,
    /// Identical scalar layers via the depth map.
    Z1Map,
    /// Distinct scalar layers via moment subordination.
    Subordination,
    /// One operator-valued layer.
    OvDyson,
    /// Identical operator-valued layers via the depth map.
    OvZ1Map,
    /// Distinct operator-valued layers via the twisted fold.
    OvPipeline,
}

impl std::fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SolverMethod::Auto => "auto",
            SolverMethod::Scalar => "scalar",
            SolverMethod::Z1Map => "z1_map",
            SolverMethod::Subordination => "subordination",
            SolverMethod::OvDyson => "ov_dyson",
            SolverMethod::OvZ1Map => "ov_z1_map",
            SolverMethod::OvPipeline => "ov_pipeline",
        };
        f.write_str(name)
    }
}

/// Picks the cheapest applicable route for a layer stack.
pub fn select_solver(layers: &[LayerSpec]) -> Result<SolverMethod> {
    let (q, l) = validate_layers(layers)?;
    let identical = layers_identical(layers);
    Ok(match (q, l, identical) {
        (1, 1, _) => SolverMethod::Scalar,
        (1, _, true) => SolverMethod::Z1Map,
        (1, _, false) => SolverMethod::Subordination,
        (_, 1, _) => SolverMethod::OvDyson,
        (_, _, true) => SolverMethod::OvZ1Map,
        (_, _, false) => SolverMethod::OvPipeline,
    })
}

/// Validates an explicitly requested route against the stack's shape and
/// resolves `Auto`. Depth-map routes refuse heterogeneous stacks; scalar
/// routes refuse matrix sectors.
pub fn resolve_method(requested: SolverMethod, layers: &[LayerSpec]) -> Result<SolverMethod> {
    let (q, l) = validate_layers(layers)?;
    let identical = layers_identical(layers);
    let reject = |why: &str| -> Result<SolverMethod> {
        Err(SpectralError::InvalidInput(format!(
            "method {requested} cannot handle this stack: {why} (q = {q}, depth = {l})"
        )))
    };
    match requested {
        SolverMethod::Auto => select_solver(layers),
        SolverMethod::Scalar => {
            if q != 1 {
                return reject("it is a single-sector solver");
            }
            if l != 1 {
                return reject("it is a one-layer solver");
            }
            Ok(requested)
        }
        SolverMethod::Z1Map => {
            if q != 1 {
                return reject("it is a single-sector solver");
            }
            if !identical {
                return reject("the depth map requires identical layers");
            }
            Ok(requested)
        }
        SolverMethod::Subordination => {
            if q != 1 {
                return reject("it is a single-sector solver");
            }
            Ok(requested)
        }
        SolverMethod::OvDyson => {
            if l != 1 {
                return reject("it is a one-layer solver");
            }
            Ok(requested)
        }
        SolverMethod::OvZ1Map => {
            if !identical {
                return reject("the depth map requires identical layers");
            }
            Ok(requested)
        }
        SolverMethod::OvPipeline => Ok(requested),
    }
}

/// Options for grid-level solving.
#[derive(Debug, Clone)]
pub struct ComposeOptions {
    pub method: SolverMethod,
    /// Number of parallel chunks for the sweep; 1 means fully sequential.
    pub jobs: usize,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions {
            method: SolverMethod::Auto,
            jobs: 1,
        }
    }
}

/// Bookkeeping from a grid solve.
#[derive(Debug, Clone)]
pub struct GridDiagnostics {
    /// Sum of per-point iteration counts.
    pub total_iterations: usize,
    /// Points rescued by the neighbor-seeded second pass.
    pub refined: usize,
    /// Outer formulation committed by the probe (scalar subordination
    /// grids only).
    pub formulation: Option<&'static str>,
}

/// A solved spectral grid.
#[derive(Debug, Clone)]
pub struct GreenGridResult {
    /// Samples in grid order.
    pub samples: Vec<GreenSample>,
    /// The concrete route that produced them.
    pub method: SolverMethod,
    pub diagnostics: GridDiagnostics,
}

/// One-point solver driven across a grid with continuation.
trait PointSolver: Sync {
    type Seed: Clone + Send + Sync;
    fn solve(&self, z: Complex64, seed: Option<&Self::Seed>) -> Result<(GreenSample, Self::Seed)>;
}

/// Converts hard numerical failures into unconverged samples so a single
/// bad point cannot abort a sweep; input errors still propagate.
fn soften<S>(
    z: Complex64,
    out: Result<(GreenSample, S)>,
) -> Result<(GreenSample, Option<S>)> {
    match out {
        Ok((sample, seed)) => Ok((sample, Some(seed))),
        Err(e) if e.is_input_error() => Err(e),
        Err(_) => Ok((
            GreenSample {
                z,
                value: GreenValue::Scalar(c64(f64::NAN, f64::NAN)),
                converged: false,
                interpolated: false,
                residual: f64::INFINITY,
                iterations: 0,
            },
            None,
        )),
    }
}

fn drive_grid<S: PointSolver>(
    grid: &SpectralGrid,
    solver: &S,
    jobs: usize,
) -> Result<(Vec<GreenSample>, usize)> {
    let n = grid.len();
    let order = &grid.sweep_order;
    let mut samples: Vec<Option<GreenSample>> = vec![None; n];
    let mut seeds: Vec<Option<S::Seed>> = vec![None; n];
    let jobs = jobs.max(1).min(order.len());

    if jobs <= 1 {
        let mut carry: Option<S::Seed> = None;
        for &gi in order {
            let z = grid.points[gi];
            let (sample, seed) = soften(z, solver.solve(z, carry.as_ref()))?;
            if sample.converged {
                carry.clone_from(&seed);
            }
            seeds[gi] = seed;
            samples[gi] = Some(sample);
        }
    } else {
        let chunk_len = order.len().div_ceil(jobs);
        let chunks: Vec<&[usize]> = order.chunks(chunk_len).collect();

        // sequential pre-sweep over chunk heads so every chunk starts from
        // a continuation-quality seed
        let mut head_seeds: Vec<Option<S::Seed>> = Vec::with_capacity(chunks.len());
        let mut carry: Option<S::Seed> = None;
        for ch in &chunks {
            let gi = ch[0];
            let z = grid.points[gi];
            let (sample, seed) = soften(z, solver.solve(z, carry.as_ref()))?;
            if sample.converged {
                carry.clone_from(&seed);
            }
            head_seeds.push(carry.clone());
            seeds[gi] = seed;
            samples[gi] = Some(sample);
        }

        let bodies: Vec<Result<Vec<(usize, GreenSample, Option<S::Seed>)>>> = chunks
            .par_iter()
            .enumerate()
            .map(|(ci, ch)| {
                let mut out = Vec::with_capacity(ch.len().saturating_sub(1));
                let mut carry = head_seeds[ci].clone();
                for &gi in &ch[1..] {
                    let z = grid.points[gi];
                    let (sample, seed) = soften(z, solver.solve(z, carry.as_ref()))?;
                    if sample.converged {
                        carry.clone_from(&seed);
                    }
                    out.push((gi, sample, seed));
                }
                Ok(out)
            })
            .collect();
        for body in bodies {
            for (gi, sample, seed) in body? {
                seeds[gi] = seed;
                samples[gi] = Some(sample);
            }
        }
    }

    let mut samples: Vec<GreenSample> = samples
        .into_iter()
        .map(|s| s.expect("all grid points visited"))
        .collect();

    // second pass: retry stragglers from their nearest converged neighbor
    let mut refined = 0usize;
    for i in 0..n {
        if samples[i].converged {
            continue;
        }
        let mut neighbor: Option<usize> = None;
        for d in 1..n {
            if i >= d && samples[i - d].converged && seeds[i - d].is_some() {
                neighbor = Some(i - d);
                break;
            }
            if i + d < n && samples[i + d].converged && seeds[i + d].is_some() {
                neighbor = Some(i + d);
                break;
            }
        }
        let Some(j) = neighbor else { break };
        let z = grid.points[i];
        let prior_iters = samples[i].iterations;
        let (mut sample, seed) = soften(z, solver.solve(z, seeds[j].as_ref()))?;
        sample.iterations += prior_iters;
        if sample.converged || sample.residual < samples[i].residual {
            if sample.converged {
                refined += 1;
            }
            seeds[i] = seed;
            samples[i] = sample;
        } else {
            samples[i].iterations += sample.iterations;
        }
    }

    let failed: Vec<&GreenSample> = samples.iter().filter(|s| !s.converged).collect();
    if failed.len() as f64 > SWEEP_FAILURE_FRACTION * n as f64 {
        let details = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.converged)
            .map(|(i, s)| PointDiagnostic {
                index: i,
                z: s.z,
                residual: s.residual,
                iterations: s.iterations,
            })
            .collect();
        return Err(SpectralError::SweepFailure {
            failed: failed.len(),
            total: n,
            details,
        });
    }
    Ok((samples, refined))
}

struct ScalarPoint {
    problem: ScalarDysonProblem,
}

impl PointSolver for ScalarPoint {
    type Seed = Complex64;
    fn solve(&self, z: Complex64, seed: Option<&Complex64>) -> Result<(GreenSample, Complex64)> {
        let sample = solve_dyson_scalar(z, &self.problem, seed.copied())?;
        let g = sample.scalar()?;
        Ok((sample, g))
    }
}

struct Z1Point {
    problem: ScalarDysonProblem,
    l: usize,
}

impl PointSolver for Z1Point {
    type Seed = Complex64;
    fn solve(&self, z: Complex64, seed: Option<&Complex64>) -> Result<(GreenSample, Complex64)> {
        let sol = z1_map_scalar(z, &self.problem, self.l, seed.copied())?;
        let sample = GreenSample {
            z,
            value: GreenValue::Scalar(sol.g_l),
            converged: sol.converged,
            interpolated: false,
            residual: sol.residual,
            iterations: sol.iterations,
        };
        Ok((sample, sol.z1))
    }
}

struct OvZ1Point {
    twist: TwistMatrix,
    sigma2: f64,
    l: usize,
}

impl PointSolver for OvZ1Point {
    type Seed = Complex64;
    fn solve(&self, z: Complex64, seed: Option<&Complex64>) -> Result<(GreenSample, Complex64)> {
        let sol = z1_map_ov(z, &self.twist, self.sigma2, self.l, seed.copied())?;
        let sample = GreenSample {
            z,
            value: GreenValue::Matrix(sol.g_b),
            converged: sol.converged,
            interpolated: false,
            residual: sol.residual,
            iterations: sol.iterations,
        };
        Ok((sample, sol.z1))
    }
}

struct OvDysonPoint {
    twist: TwistMatrix,
    sigma2: f64,
}

impl PointSolver for OvDysonPoint {
    type Seed = Complex64;
    fn solve(&self, z: Complex64, seed: Option<&Complex64>) -> Result<(GreenSample, Complex64)> {
        let sol = solve_ov_scalar_path(z, &self.twist, self.sigma2, seed.copied())?;
        let g_scalar = sol.g_scalar;
        let sample = GreenSample {
            z,
            value: GreenValue::Matrix(sol.g_b),
            converged: sol.converged,
            interpolated: false,
            residual: sol.residual,
            iterations: sol.iterations,
        };
        Ok((sample, g_scalar))
    }
}

struct HeteroPoint {
    problems: Vec<ScalarDysonProblem>,
    formulation: HeteroFormulation,
}

impl PointSolver for HeteroPoint {
    type Seed = HeteroSeed;
    fn solve(&self, z: Complex64, seed: Option<&HeteroSeed>) -> Result<(GreenSample, HeteroSeed)> {
        subordinate_hetero(z, &self.problems, seed, self.formulation)
    }
}

struct OvOuterPoint {
    layers: Vec<LayerSpec>,
}

impl PointSolver for OvOuterPoint {
    type Seed = OvOuterSeed;
    fn solve(&self, z: Complex64, seed: Option<&OvOuterSeed>) -> Result<(GreenSample, OvOuterSeed)> {
        let (sol, new_seed) = solve_outer_consistency(z, &self.layers, seed)?;
        let sample = GreenSample {
            z,
            value: GreenValue::Matrix(sol.g_b),
            converged: sol.converged,
            interpolated: false,
            residual: sol.residual,
            iterations: sol.iterations,
        };
        Ok((sample, new_seed))
    }
}

/// How many probe points the formulation chooser runs.
const PROBE_POINTS: usize = 10;
/// Fraction of probe points that must converge for the probed
/// formulation to be committed.
const PROBE_ACCEPT: f64 = 0.8;

fn probe_formulation(
    grid: &SpectralGrid,
    problems: &[ScalarDysonProblem],
) -> HeteroFormulation {
    let n = grid.len();
    let count = PROBE_POINTS.min(n);
    let mut converged = 0usize;
    for k in 0..count {
        let idx = grid.sweep_order[k * n / count];
        let z = grid.points[idx];
        if let Ok((sample, _)) =
            subordinate_hetero(z, problems, None, HeteroFormulation::Rational)
        {
            if sample.converged {
                converged += 1;
            }
        }
    }
    if (converged as f64) >= PROBE_ACCEPT * count as f64 {
        HeteroFormulation::Rational
    } else {
        HeteroFormulation::Polynomial
    }
}

/// Solves a whole spectral grid for a layer stack.
///
/// The route is resolved from `options.method`, the sweep runs from the
/// largest `|z|` inward with continuation seeds (optionally split into
/// `options.jobs` parallel chunks after a sequential pre-sweep over the
/// chunk heads), stragglers get a neighbor-seeded second pass, and a
/// sweep with more than 10% unconverged points is an error. Scalar
/// subordination grids first probe a few points to commit an outer
/// formulation. An operator-valued depth-map request on an anisotropic
/// skip is driven as the pipeline route (see [`z1_map_ov`]); the result
/// reports the route actually driven.
pub fn solve_green_grid(
    grid: &SpectralGrid,
    layers: &[LayerSpec],
    options: &ComposeOptions,
) -> Result<GreenGridResult> {
    let mut method = resolve_method(options.method, layers)?;
    let (_, l) = validate_layers(layers)?;
    let mut formulation: Option<&'static str> = None;

    let (samples, refined) = match method {
        SolverMethod::Scalar => {
            let solver = ScalarPoint {
                problem: layers[0].scalar_problem()?,
            };
            drive_grid(grid, &solver, options.jobs)?
        }
        SolverMethod::Z1Map => {
            let solver = Z1Point {
                problem: layers[0].scalar_problem()?,
                l,
            };
            drive_grid(grid, &solver, options.jobs)?
        }
        SolverMethod::Subordination => {
            let problems: Result<Vec<_>> =
                layers.iter().map(|l| l.scalar_problem()).collect();
            let problems = problems?;
            let chosen = probe_formulation(grid, &problems);
            formulation = Some(match chosen {
                HeteroFormulation::Rational => "rational",
                HeteroFormulation::Polynomial => "polynomial",
            });
            let solver = HeteroPoint {
                problems,
                formulation: chosen,
            };
            drive_grid(grid, &solver, options.jobs)?
        }
        SolverMethod::OvDyson => {
            let solver = OvDysonPoint {
                twist: layers[0].twist.clone(),
                sigma2: layers[0].sigma2,
            };
            drive_grid(grid, &solver, options.jobs)?
        }
        SolverMethod::OvZ1Map => {
            // the depth map is only exact for isotropic skips; anisotropic
            // identical layers run the pipeline so its continuation state
            // threads through the sweep
            if l >= 2
                && layers[0].twist.q > 1
                && layers[0].twist.gram_isotropy_deviation() > GRAM_ISOTROPY_TOL
            {
                method = SolverMethod::OvPipeline;
                let solver = OvOuterPoint {
                    layers: layers.to_vec(),
                };
                drive_grid(grid, &solver, options.jobs)?
            } else {
                let solver = OvZ1Point {
                    twist: layers[0].twist.clone(),
                    sigma2: layers[0].sigma2,
                    l,
                };
                drive_grid(grid, &solver, options.jobs)?
            }
        }
        SolverMethod::OvPipeline => {
            let solver = OvOuterPoint {
                layers: layers.to_vec(),
            };
            drive_grid(grid, &solver, options.jobs)?
        }
        SolverMethod::Auto => unreachable!("resolve_method never returns Auto"),
    };

    let total_iterations = samples.iter().map(|s| s.iterations).sum();
    Ok(GreenGridResult {
        samples,
        method,
        diagnostics: GridDiagnostics {
            total_iterations,
            refined,
            formulation,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyson_matrix::TwistFamily;

    fn scalar_prob(a: f64, sigma2: f64) -> ScalarDysonProblem {
        LayerSpec::scalar(a, sigma2).unwrap().scalar_problem().unwrap()
    }

    /// Closed-form resolvent of one pure-noise layer (zero skip), frozen
    /// from the quadratic it satisfies.
    fn pure_noise_green(z: Complex64, s2: f64) -> Complex64 {
        let disc = (z * z - 4.0 * s2 * z).sqrt();
        let r1 = (z - disc) / (2.0 * s2 * z);
        let r2 = (z + disc) / (2.0 * s2 * z);
        if r1.im <= 1e-12 {
            r1
        } else {
            r2
        }
    }

    #[test]
    fn depth_one_reduces_to_direct_solve() {
        let prob = scalar_prob(0.8, 0.3);
        let z = c64(1.7, 0.05);
        let direct = solve_dyson_scalar(z, &prob, None).unwrap();
        let via_map = z1_map_scalar(z, &prob, 1, None).unwrap();
        assert!(via_map.converged);
        assert!((via_map.g_l - direct.scalar().unwrap()).norm() < 1e-12);
    }

    #[test]
    fn depth_map_satisfies_forward_relation() {
        let prob = scalar_prob(0.9, 0.2);
        for l in [2usize, 3, 5, 10] {
            let z = c64(2.3, 0.04);
            let sol = z1_map_scalar(z, &prob, l, None).unwrap();
            assert!(sol.converged, "depth {l} did not converge");
            // forward map reproduces the target
            let fwd = sol.z1 * (sol.z1 - 1.0 / sol.g1).powi(l as i32 - 1);
            assert!(
                (fwd - z).norm() < 1e-8 * z.norm(),
                "depth {l}: forward residual {:.2e}",
                (fwd - z).norm()
            );
            // physical branch
            assert!(sol.g_l.im <= PHYS_TOL);
        }
    }

    #[test]
    fn depth_map_agrees_with_subordination_on_identical_layers() {
        // two independent algorithms for the same measure
        let layers = [
            scalar_prob(0.85, 0.15),
            scalar_prob(0.85, 0.15),
        ];
        let z = c64(1.4, 0.05);
        let via_map = z1_map_scalar(z, &layers[0], 2, None).unwrap();
        let (via_sub, _) =
            subordinate_hetero(z, &layers, None, HeteroFormulation::Rational).unwrap();
        assert!(via_map.converged && via_sub.converged);
        let diff = (via_map.g_l - via_sub.scalar().unwrap()).norm();
        assert!(diff < 1e-6, "routes disagree by {diff:.2e}");
    }

    #[test]
    fn depth_map_agrees_with_subordination_at_depth_ten() {
        let probs: Vec<ScalarDysonProblem> =
            (0..10).map(|_| scalar_prob(0.95, 0.01)).collect();
        let z = c64(1.1, 0.08);
        let via_map = z1_map_scalar(z, &probs[0], 10, None).unwrap();
        let (via_sub, _) =
            subordinate_hetero(z, &probs, None, HeteroFormulation::Rational).unwrap();
        assert!(via_map.converged && via_sub.converged);
        let diff = (via_map.g_l - via_sub.scalar().unwrap()).norm();
        assert!(diff < 1e-6, "routes disagree by {diff:.2e}");
    }

    #[test]
    fn s_transform_of_point_mass_is_inverse_gram() {
        // noise-free scalar layer: measure is a point mass at a^2, whose
        // S-transform is the constant 1/a^2
        let prob = scalar_prob(1.3, 0.0);
        for w in [c64(0.3, -0.2), c64(-0.4, -0.1), c64(1.0, -0.5)] {
            let s = s_transform_scalar(&prob, w, None).unwrap();
            assert!(s.converged);
            assert!(
                (s.s - 1.0 / 1.69).norm() < 1e-8,
                "S({w}) = {} should be {}",
                s.s,
                1.0 / 1.69
            );
        }
    }

    #[test]
    fn s_transform_of_pure_noise_matches_closed_form() {
        // for the squared singular values of a square noise matrix the
        // S-transform is 1/(sigma^2 (1 + w))
        let s2 = 0.7;
        let prob = scalar_prob(0.0, s2);
        let z = c64(5.0, 0.5);
        let g = pure_noise_green(z, s2);
        let w = z * g - 1.0;
        let s = s_transform_scalar(&prob, w, None).unwrap();
        assert!(s.converged);
        let expect = 1.0 / (s2 * (1.0 + w));
        assert!(
            (s.s - expect).norm() < 1e-8,
            "S({w}) = {}, closed form {expect}",
            s.s
        );
        // the inversion recovered the original evaluation point
        assert!((s.z_inner - z).norm() < 1e-6);
    }

    #[test]
    fn s_transform_rejects_tiny_arguments() {
        let prob = scalar_prob(1.0, 0.1);
        assert!(s_transform_scalar(&prob, c64(1e-9, 0.0), None).is_err());
    }

    #[test]
    fn hetero_product_has_multiplicative_first_moment() {
        // asymptotically z G - 1 ~ m1 / z with m1 the product of layer
        // first moments
        let probs = [scalar_prob(1.0, 0.1), scalar_prob(0.8, 0.25)];
        let m1 = (1.0 + 0.1) * (0.64 + 0.25);
        let z = c64(200.0, 2.0);
        let (sample, seed) =
            subordinate_hetero(z, &probs, None, HeteroFormulation::Rational).unwrap();
        assert!(sample.converged);
        let w = seed.w;
        let expect = m1 / z;
        assert!(
            (w - expect).norm() < 0.05 * expect.norm(),
            "w = {w}, leading term {expect}"
        );
        let g = sample.scalar().unwrap();
        assert!((g - (w + 1.0) / z).norm() < 1e-14);
    }

    #[test]
    fn hetero_polynomial_formulation_agrees_with_rational() {
        let probs = [scalar_prob(0.9, 0.2), scalar_prob(0.7, 0.3)];
        let z = c64(1.2, 0.06);
        let (a, _) = subordinate_hetero(z, &probs, None, HeteroFormulation::Rational).unwrap();
        let (b, _) =
            subordinate_hetero(z, &probs, None, HeteroFormulation::Polynomial).unwrap();
        assert!(a.converged && b.converged);
        let diff = (a.scalar().unwrap() - b.scalar().unwrap()).norm();
        assert!(diff < 1e-8, "formulations disagree by {diff:.2e}");
    }

    #[test]
    fn matrix_power_ratio_matches_direct_multiplication() {
        let z1 = c64(1.3, 0.4);
        let g = DMatrix::from_row_slice(
            3,
            3,
            &[
                c64(0.31, -0.12),
                c64(0.05, 0.01),
                c64(-0.02, 0.03),
                c64(0.05, 0.01),
                c64(0.27, -0.09),
                c64(0.04, -0.02),
                c64(-0.02, 0.03),
                c64(0.04, -0.02),
                c64(0.22, -0.15),
            ],
        );
        let (eig_route, fb) = matrix_power_ratio(&g, z1, 3).unwrap();
        assert!(!fb);
        // direct commuting-product evaluation
        let eye = DMatrix::<Complex64>::identity(3, 3);
        let num = &g * &g * &g;
        let base = g.map(|v| v * z1) - &eye;
        let den = (&base * &base).lu().try_inverse().unwrap();
        let direct = den * num;
        assert!((&eig_route - &direct).norm() < 1e-10 * direct.norm());
    }

    #[test]
    fn matrix_power_ratio_fallback_handles_defective_input() {
        // a Jordan block is defective: the eigenvector route must give way
        let g = DMatrix::from_row_slice(
            2,
            2,
            &[c64(0.4, -0.1), c64(1.0, 0.0), c64(0.0, 0.0), c64(0.4, -0.1)],
        );
        let z1 = c64(1.1, 0.3);
        let (out, used_fallback) = matrix_power_ratio(&g, z1, 2).unwrap();
        assert!(used_fallback);
        let eye = DMatrix::<Complex64>::identity(2, 2);
        let num = &g * &g;
        let den = (g.map(|v| v * z1) - &eye).lu().try_inverse().unwrap();
        let direct = den * num;
        assert!((&out - &direct).norm() < 1e-10 * direct.norm());
    }

    #[test]
    fn ov_depth_map_reduces_to_scalar_at_q1() {
        let twist = TwistMatrix::scalar(0.9).unwrap();
        let z = c64(1.8, 0.05);
        let ov = z1_map_ov(z, &twist, 0.2, 3, None).unwrap();
        assert!(ov.converged);
        let prob = scalar_prob(0.9, 0.2);
        let sc = z1_map_scalar(z, &prob, 3, None).unwrap();
        assert!((ov.g_scalar - sc.g_l).norm() < 1e-10);
        assert_eq!(ov.g_b.nrows(), 1);
    }

    #[test]
    fn ov_depth_map_on_orthogonal_twist_is_isotropic() {
        // an orthogonal skip has identity Gram, so every sector sees the
        // scalar a = 1 problem and the sector resolvent is scalar
        let twist = TwistMatrix::orthogonal_seeded(3, 11).unwrap();
        let z = c64(2.1, 0.05);
        let ov = z1_map_ov(z, &twist, 0.15, 4, None).unwrap();
        assert!(ov.converged);
        assert!(!ov.used_fallback);
        let prob = scalar_prob(1.0, 0.15);
        let sc = z1_map_scalar(z, &prob, 4, None).unwrap();
        assert!((ov.g_scalar - sc.g_l).norm() < 1e-8);
        let off = ov.g_b[(0, 1)].norm().max(ov.g_b[(1, 2)].norm());
        assert!(off < 1e-8, "sector resolvent not isotropic: {off:.2e}");
    }

    #[test]
    fn twisted_fold_reduces_to_plain_product_at_q1() {
        let layers = [
            LayerSpec::scalar(1.0, 0.1).unwrap(),
            LayerSpec::scalar(0.8, 0.3).unwrap(),
        ];
        let w = DMatrix::from_element(1, 1, c64(0.4, -0.3));
        let mut hints = FoldHints::empty(2);
        let fold = twisted_fold(&layers, &w, &mut hints).unwrap();
        assert!(fold.all_converged);
        let s1 = s_transform_scalar(&layers[0].scalar_problem().unwrap(), w[(0, 0)], None)
            .unwrap()
            .s;
        let s2 = s_transform_scalar(&layers[1].scalar_problem().unwrap(), w[(0, 0)], None)
            .unwrap()
            .s;
        assert!((fold.s_prod[(0, 0)] - s1 * s2).norm() < 1e-7);
    }

    #[test]
    fn outer_consistency_reduces_to_scalar_subordination_at_q1() {
        let layers = [
            LayerSpec::scalar(0.9, 0.2).unwrap(),
            LayerSpec::scalar(0.7, 0.35).unwrap(),
        ];
        let probs = [
            layers[0].scalar_problem().unwrap(),
            layers[1].scalar_problem().unwrap(),
        ];
        let z = c64(1.5, 0.08);
        let (ov, _) = solve_outer_consistency(z, &layers, None).unwrap();
        assert!(ov.converged, "residual {:.2e}", ov.residual);
        let (sc, _) = subordinate_hetero(z, &probs, None, HeteroFormulation::Rational).unwrap();
        assert!(sc.converged);
        let diff = (ov.g_scalar - sc.scalar().unwrap()).norm();
        assert!(diff < 1e-6, "routes disagree by {diff:.2e}");
    }

    #[test]
    fn outer_consistency_agrees_with_depth_map_on_isotropic_twist() {
        // identical layers solved by two unrelated matrix routes; the
        // orthogonal skip keeps the depth map on its exactness manifold
        let twist = TwistMatrix::orthogonal_seeded(3, 11).unwrap();
        let layers = [
            LayerSpec::new(twist.clone(), 0.2).unwrap(),
            LayerSpec::new(twist.clone(), 0.2).unwrap(),
        ];
        let z = c64(1.6, 0.1);
        let (pipe, _) = solve_outer_consistency(z, &layers, None).unwrap();
        assert!(pipe.converged, "pipeline residual {:.2e}", pipe.residual);
        let map = z1_map_ov(z, &twist, 0.2, 2, None).unwrap();
        assert!(map.converged);
        assert!(!map.off_manifold);
        let diff = (pipe.g_scalar - map.g_scalar).norm();
        assert!(diff < 1e-8, "routes disagree by {diff:.2e}");
    }

    #[test]
    fn anisotropic_depth_map_delegates_to_pipeline() {
        // a bistochastic skip is off the scalar manifold: the pull-back
        // formula would report g = 0.974 - 0.545i here, while Monte Carlo
        // of the depth-2 product sits at the pipeline's answer
        let twist = TwistMatrix::bistochastic_seeded(2, 5).unwrap();
        let z = c64(1.6, 0.1);
        let map = z1_map_ov(z, &twist, 0.2, 2, None).unwrap();
        assert!(map.converged);
        assert!(map.off_manifold);
        let mc_anchor = c64(0.5053, -0.5588);
        let diff = (map.g_scalar - mc_anchor).norm();
        assert!(diff < 5e-3, "delegated result {} vs anchor", map.g_scalar);

        let layers = [
            LayerSpec::new(twist.clone(), 0.2).unwrap(),
            LayerSpec::new(twist, 0.2).unwrap(),
        ];
        let (pipe, _) = solve_outer_consistency(z, &layers, None).unwrap();
        assert!((pipe.g_scalar - map.g_scalar).norm() < 1e-9);
    }

    #[test]
    fn dispatch_picks_the_cheapest_route() {
        let s = |a: f64, v: f64| LayerSpec::scalar(a, v).unwrap();
        let q2 = LayerSpec::new(TwistMatrix::identity(2).unwrap(), 0.1).unwrap();
        assert_eq!(select_solver(&[s(1.0, 0.1)]).unwrap(), SolverMethod::Scalar);
        assert_eq!(
            select_solver(&[s(1.0, 0.1), s(1.0, 0.1)]).unwrap(),
            SolverMethod::Z1Map
        );
        assert_eq!(
            select_solver(&[s(1.0, 0.1), s(0.9, 0.1)]).unwrap(),
            SolverMethod::Subordination
        );
        assert_eq!(select_solver(&[q2.clone()]).unwrap(), SolverMethod::OvDyson);
        assert_eq!(
            select_solver(&[q2.clone(), q2.clone()]).unwrap(),
            SolverMethod::OvZ1Map
        );
        let q2b = LayerSpec::new(TwistMatrix::identity(2).unwrap(), 0.3).unwrap();
        assert_eq!(
            select_solver(&[q2.clone(), q2b]).unwrap(),
            SolverMethod::OvPipeline
        );
    }

    #[test]
    fn explicit_method_requests_are_validated() {
        let s = |a: f64, v: f64| LayerSpec::scalar(a, v).unwrap();
        let hetero = [s(1.0, 0.1), s(0.9, 0.2)];
        // depth map refuses heterogeneous stacks
        assert!(resolve_method(SolverMethod::Z1Map, &hetero).is_err());
        // subordination accepts identical stacks
        let ident = [s(1.0, 0.1), s(1.0, 0.1)];
        assert_eq!(
            resolve_method(SolverMethod::Subordination, &ident).unwrap(),
            SolverMethod::Subordination
        );
        // matrix pipeline accepts q = 1
        assert_eq!(
            resolve_method(SolverMethod::OvPipeline, &hetero).unwrap(),
            SolverMethod::OvPipeline
        );
        // scalar routes refuse matrix sectors
        let q2 = LayerSpec::new(TwistMatrix::identity(2).unwrap(), 0.1).unwrap();
        assert!(resolve_method(SolverMethod::Scalar, &[q2]).is_err());
    }

    #[test]
    fn grid_solve_matches_pointwise_depth_map() {
        let layers = [
            LayerSpec::scalar(0.9, 0.1).unwrap(),
            LayerSpec::scalar(0.9, 0.1).unwrap(),
        ];
        let grid = SpectralGrid::uniform(0.2, 3.0, 25, 0.05).unwrap();
        let out = solve_green_grid(&grid, &layers, &ComposeOptions::default()).unwrap();
        assert_eq!(out.method, SolverMethod::Z1Map);
        let prob = layers[0].scalar_problem().unwrap();
        for sample in &out.samples {
            assert!(sample.converged);
            let sol = z1_map_scalar(sample.z, &prob, 2, None).unwrap();
            assert!((sample.scalar().unwrap() - sol.g_l).norm() < 1e-8);
        }
    }

    #[test]
    fn parallel_grid_agrees_with_sequential() {
        let layers = [
            LayerSpec::scalar(0.8, 0.2).unwrap(),
            LayerSpec::scalar(0.8, 0.2).unwrap(),
            LayerSpec::scalar(0.8, 0.2).unwrap(),
        ];
        let grid = SpectralGrid::uniform(0.1, 4.0, 40, 0.05).unwrap();
        let seq = solve_green_grid(&grid, &layers, &ComposeOptions::default()).unwrap();
        let par = solve_green_grid(
            &grid,
            &layers,
            &ComposeOptions {
                method: SolverMethod::Auto,
                jobs: 4,
            },
        )
        .unwrap();
        for (a, b) in seq.samples.iter().zip(par.samples.iter()) {
            assert!(a.converged && b.converged);
            let diff = (a.scalar().unwrap() - b.scalar().unwrap()).norm();
            assert!(diff < 1e-9, "parallel sweep diverged by {diff:.2e}");
        }
    }

    #[test]
    fn hetero_grid_commits_a_formulation_and_converges() {
        let layers = [
            LayerSpec::scalar(1.0, 0.1).unwrap(),
            LayerSpec::scalar(0.7, 0.3).unwrap(),
        ];
        let grid = SpectralGrid::uniform(0.1, 3.5, 30, 0.05).unwrap();
        let out = solve_green_grid(&grid, &layers, &ComposeOptions::default()).unwrap();
        assert_eq!(out.method, SolverMethod::Subordination);
        assert!(out.diagnostics.formulation.is_some());
        let ok = out.samples.iter().filter(|s| s.converged).count();
        assert!(ok == out.samples.len(), "{ok}/{} converged", out.samples.len());
        // physical branch everywhere
        for s in &out.samples {
            assert!(s.scalar().unwrap().im <= 1e-9);
        }
    }
}
