//! Scalar Dyson equation for one layer: the resolvent of `Y^T Y` with
//! `Y = A0 + sigma X`, where `A0` is a fixed structured matrix and `X` has
//! iid centered Gaussian entries of variance `sigma^2 / N`.
//!
//! The limiting normalized trace `G(z)` of `(z - Y^T Y)^{-1}` satisfies a
//! subordination identity: with
//!
//! ```text
//! u = 1 - sigma^2 G,    omega = z u^2,
//! G_free(omega) = (1/p) sum_i 1 / (omega - s_i)
//! ```
//!
//! over the eigenvalues `s_i` of `A0^T A0`, the solution obeys
//! `G = u * G_free(omega)`. [`solve_dyson_scalar`] finds the physical
//! (upper-half-plane) root of that one-dimensional fixed-point relation by
//! damped Newton with an analytic derivative. Without a caller-supplied
//! seed it first walks a continuation ladder in the broadening `Im z`,
//! starting high above the spectrum where the physical root is the unique
//! attractor and threading the solution down to the requested point; with
//! a seed it trusts the caller (grid sweeps thread neighboring solutions).
//!
//! [`solve_dressed_fixed_point`] solves the same model for a scalar
//! `A0 = a` through the independent dressed-skip parametrization
//! `m = a_h^2 / (a (z - a_h^2))` with `a_h = a + sigma^2 m`, and serves as
//! a cross-check on the subordination branch choice. The two
//! parametrizations are algebraically equivalent via `u = a / a_h`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Result, SpectralError};
use crate::numerics::{c64, GreenSample, GreenValue};

/// Tolerance below which a negative Gram eigenvalue is clipped to zero.
const EIG_CLIP: f64 = 1e-12;

/// Imaginary part above which a candidate resolvent value is rejected as
/// lying on the unphysical branch (the physical branch has `Im G <= 0` for
/// `Im z > 0`).
const BRANCH_TOL: f64 = 1e-10;

/// Eigenvalues of `A0^T A0` with their dimension, the only trace of the
/// structured matrix the scalar solver needs.
#[derive(Debug, Clone)]
pub struct GramSpectrum {
    /// Ascending, nonnegative eigenvalues.
    pub s: Vec<f64>,
    /// Dimension of the Gram matrix (number of eigenvalues).
    pub p: usize,
}

impl GramSpectrum {
    /// Validates, clips tiny negative values to zero, and sorts ascending.
    pub fn new(mut s: Vec<f64>) -> Result<Self> {
        if s.is_empty() {
            return Err(SpectralError::InvalidInput(
                "gram spectrum needs at least one eigenvalue".into(),
            ));
        }
        for v in s.iter_mut() {
            if !v.is_finite() {
                return Err(SpectralError::InvalidInput(
                    "non-finite gram eigenvalue".into(),
                ));
            }
            if *v < -EIG_CLIP {
                return Err(SpectralError::InvalidInput(format!(
                    "gram eigenvalue {v} is negative beyond roundoff"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p = s.len();
        Ok(GramSpectrum { s, p })
    }

    /// Spectrum of a scalar structured part `a` in dimension `p`: the
    /// single eigenvalue `a^2` repeated.
    pub fn point_mass(a: f64, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(SpectralError::InvalidInput(
                "point-mass spectrum needs p >= 1".into(),
            ));
        }
        GramSpectrum::new(vec![a * a; p])
    }

    /// Largest eigenvalue.
    pub fn max_eig(&self) -> f64 {
        *self.s.last().expect("non-empty by construction")
    }
}

/// Eigendecomposition of `A0^T A0` for an arbitrary real matrix `A0`.
pub fn precompute_gram_eigs(a0: &DMatrix<f64>) -> Result<GramSpectrum> {
    if a0.nrows() == 0 || a0.ncols() == 0 {
        return Err(SpectralError::InvalidInput("empty structured matrix".into()));
    }
    let gram = a0.transpose() * a0;
    let sym = (&gram + gram.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    GramSpectrum::new(eig.eigenvalues.iter().cloned().collect())
}

/// One-layer scalar problem: Gram spectrum of the structured part plus the
/// noise strength.
#[derive(Debug, Clone)]
pub struct ScalarDysonProblem {
    pub gram: GramSpectrum,
    pub sigma2: f64,
}

impl ScalarDysonProblem {
    pub fn new(gram: GramSpectrum, sigma2: f64) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(SpectralError::InvalidInput(format!(
                "noise strength must be nonnegative, got {sigma2}"
            )));
        }
        Ok(ScalarDysonProblem { gram, sigma2 })
    }

    /// Resolvent of the noise-free Gram spectrum.
    fn g_free(&self, omega: Complex64) -> Complex64 {
        let mut acc = c64(0.0, 0.0);
        for &s in &self.gram.s {
            acc += c64(1.0, 0.0) / (omega - s);
        }
        acc / self.gram.p as f64
    }

    /// `(1/p) sum (omega - s_i)^{-2}`, i.e. minus the derivative of the
    /// noise-free resolvent.
    fn g_free_sq(&self, omega: Complex64) -> Complex64 {
        let mut acc = c64(0.0, 0.0);
        for &s in &self.gram.s {
            let d = omega - s;
            acc += c64(1.0, 0.0) / (d * d);
        }
        acc / self.gram.p as f64
    }
}

const SCALAR_TOL: f64 = 1e-12;
const SCALAR_MAX_ITER: usize = 200;
/// Damping schedule of the scalar Newton loop.
const SCALAR_DAMPING: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

struct Attempt {
    g: Complex64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

fn subordination_residual(z: Complex64, g: Complex64, prob: &ScalarDysonProblem) -> Complex64 {
    let u = c64(1.0, 0.0) - prob.sigma2 * g;
    let omega = z * u * u;
    u * prob.g_free(omega) - g
}

fn attempt_from_seed(z: Complex64, g0: Complex64, prob: &ScalarDysonProblem) -> Attempt {
    let sigma2 = prob.sigma2;
    let mut g = g0;
    let mut f = subordination_residual(z, g, prob);
    let mut fn_norm = f.norm();
    let mut iterations = 0;
    while iterations < SCALAR_MAX_ITER && fn_norm > SCALAR_TOL {
        let u = c64(1.0, 0.0) - sigma2 * g;
        let omega = z * u * u;
        // dF/dG = -sigma^2 G_free(omega) + 2 sigma^2 z u^2 (1/p) sum (omega - s)^{-2} - 1
        let df = -sigma2 * prob.g_free(omega) + 2.0 * sigma2 * z * u * u * prob.g_free_sq(omega)
            - c64(1.0, 0.0);
        if df.norm() < 1e-300 {
            break;
        }
        let delta = -f / df;
        let mut accepted = false;
        for &alpha in &SCALAR_DAMPING {
            let g_new = g + delta * alpha;
            let f_new = subordination_residual(z, g_new, prob);
            let n_new = f_new.norm();
            if n_new.is_finite() && n_new < fn_norm {
                g = g_new;
                f = f_new;
                fn_norm = n_new;
                accepted = true;
                break;
            }
        }
        if !accepted {
            break;
        }
        iterations += 1;
    }
    Attempt {
        g,
        residual: fn_norm,
        iterations,
        converged: fn_norm <= SCALAR_TOL,
    }
}

fn physical(g: Complex64) -> bool {
    g.im <= BRANCH_TOL
}

/// Starting broadening of the cold-start continuation ladder, as a
/// multiple of the spectral scale.
const LADDER_START_FACTOR: f64 = 4.0;
/// Geometric shrink factor between ladder rungs.
const LADDER_SHRINK: f64 = 0.25;

/// Single-point Newton solve with the seed hierarchy, no continuation.
fn solve_scalar_pointwise(
    z: Complex64,
    prob: &ScalarDysonProblem,
    seed: Option<Complex64>,
) -> GreenSample {
    let mut seeds: Vec<Complex64> = Vec::with_capacity(3);
    if let Some(s) = seed {
        seeds.push(s);
    }
    seeds.push(c64(1.0, 0.0) / z);
    seeds.push(prob.g_free(z));

    let mut best: Option<Attempt> = None;
    for g0 in seeds {
        let att = attempt_from_seed(z, g0, prob);
        let keep = match &best {
            None => true,
            Some(b) => {
                // prefer converged-and-physical, then smaller residual
                let cand_ok = att.converged && physical(att.g);
                let best_ok = b.converged && physical(b.g);
                (cand_ok && !best_ok) || (cand_ok == best_ok && att.residual < b.residual)
            }
        };
        if keep {
            let done = att.converged && physical(att.g);
            best = Some(att);
            if done {
                break;
            }
        }
    }
    let att = best.expect("at least one seed attempted");
    let converged = att.converged && physical(att.g);
    GreenSample {
        z,
        value: GreenValue::Scalar(att.g),
        converged,
        interpolated: false,
        residual: att.residual,
        iterations: att.iterations,
    }
}

/// Broadening rungs walked before a cold solve at `z`: a geometric descent
/// from well above the spectrum down to (but excluding) `Im z`.
fn ladder_rungs(z: Complex64, spectral_scale: f64) -> Vec<f64> {
    let mut rungs = Vec::new();
    let mut eta = LADDER_START_FACTOR * z.norm().max(spectral_scale).max(1.0);
    while eta > z.im {
        rungs.push(eta);
        eta *= LADDER_SHRINK;
    }
    rungs
}

/// Solves the one-layer scalar Dyson equation at `z` (upper half plane).
///
/// `seed` is a continuation hint tried first; after that come `1/z` and
/// the noise-free resolvent. A converged root with `Im G > 0` is rejected
/// as the unphysical branch and the next seed is tried. Cold calls (no
/// seed, `sigma2 > 0`) are preceded by a continuation ladder in the
/// broadening: near the real axis the residual can have several roots
/// with `Im G <= 0` and a raw Newton start may land on a spurious one,
/// while high above the spectrum the physical root is the unique
/// attractor and can be tracked down safely. Ladder iterations are
/// included in the returned `iterations` count. If no attempt lands on
/// the physical branch the best attempt is returned with
/// `converged = false`; that is a diagnosis, not an error.
pub fn solve_dyson_scalar(
    z: Complex64,
    prob: &ScalarDysonProblem,
    seed: Option<Complex64>,
) -> Result<GreenSample> {
    if !(z.im > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "spectral argument must have positive imaginary part, got {z}"
        )));
    }
    if seed.is_some() || prob.sigma2 == 0.0 {
        // Noise-free the residual is linear in G with a single root, so
        // no continuation is needed there either.
        return Ok(solve_scalar_pointwise(z, prob, seed));
    }
    let mut carried: Option<Complex64> = None;
    let mut ladder_iterations = 0;
    for eta in ladder_rungs(z, prob.gram.max_eig() + prob.sigma2) {
        let rung = solve_scalar_pointwise(c64(z.re, eta), prob, carried);
        if rung.converged {
            carried = Some(rung.scalar()?);
        }
        ladder_iterations += rung.iterations;
    }
    let mut sample = solve_scalar_pointwise(z, prob, carried);
    sample.iterations += ladder_iterations;
    Ok(sample)
}

/// Derivative `dG/dz` of the converged scalar resolvent by implicit
/// differentiation of the subordination residual.
pub fn scalar_green_derivative(
    z: Complex64,
    g: Complex64,
    prob: &ScalarDysonProblem,
) -> Complex64 {
    let sigma2 = prob.sigma2;
    let u = c64(1.0, 0.0) - sigma2 * g;
    let omega = z * u * u;
    let gsq = prob.g_free_sq(omega);
    // F(G, z) = u G_free(z u^2) - G
    let df_dz = -u * u * u * gsq;
    let df_dg = -sigma2 * prob.g_free(omega) + 2.0 * sigma2 * z * u * u * gsq - c64(1.0, 0.0);
    -df_dz / df_dg
}

/// Number of refinement rounds pass 2 of the grid solver may spend.
const REFINE_ROUNDS: usize = 5;

/// Solves the scalar Dyson equation on a whole grid.
///
/// Pass 1 is a continuation sweep in descending `|z|`, threading each
/// converged value to the next point as a seed. Pass 2 revisits any point
/// still above tolerance with fresh Newton attempts seeded from both its
/// own last iterate and its converged neighbors; points already at
/// tolerance are untouched. If more than 10% of points remain unconverged
/// the sweep fails with per-point diagnostics.
pub fn solve_dyson_scalar_grid(
    grid: &crate::numerics::SpectralGrid,
    prob: &ScalarDysonProblem,
) -> Result<Vec<GreenSample>> {
    let mut out: Vec<Option<GreenSample>> = vec![None; grid.len()];
    let mut seed: Option<Complex64> = None;
    for &idx in &grid.sweep_order {
        let sample = solve_dyson_scalar(grid.points[idx], prob, seed)?;
        if sample.converged {
            seed = Some(sample.scalar()?);
        }
        out[idx] = Some(sample);
    }
    let mut samples: Vec<GreenSample> = out
        .into_iter()
        .map(|s| s.expect("all points visited"))
        .collect();

    for _ in 0..REFINE_ROUNDS {
        let unconverged: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.converged)
            .map(|(i, _)| i)
            .collect();
        if unconverged.is_empty() {
            break;
        }
        for i in unconverged {
            let mut seeds: Vec<Complex64> = vec![samples[i].scalar()?];
            if i > 0 && samples[i - 1].converged {
                seeds.push(samples[i - 1].scalar()?);
            }
            if i + 1 < samples.len() && samples[i + 1].converged {
                seeds.push(samples[i + 1].scalar()?);
            }
            for s in seeds {
                let retry = solve_dyson_scalar(grid.points[i], prob, Some(s))?;
                let improved = retry.converged || retry.residual < samples[i].residual;
                if improved {
                    let extra = retry.iterations;
                    let prior = samples[i].iterations;
                    samples[i] = retry;
                    samples[i].iterations = prior + extra;
                }
                if samples[i].converged {
                    break;
                }
            }
        }
    }

    let failed = samples.iter().filter(|s| !s.converged).count();
    if (failed as f64) > 0.10 * samples.len() as f64 {
        let details = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.converged)
            .map(|(i, s)| crate::error::PointDiagnostic {
                index: i,
                z: s.z,
                residual: s.residual,
                iterations: s.iterations,
            })
            .collect();
        return Err(SpectralError::SweepFailure {
            failed,
            total: samples.len(),
            details,
        });
    }
    Ok(samples)
}

/// Result of the dressed-skip scalar fixed point: the dressed order
/// parameter `m` alongside the resolvent sample it implies.
#[derive(Debug, Clone)]
pub struct DressedSample {
    /// Order parameter solving `m = a_h^2 / (a (z - a_h^2))` with
    /// `a_h = a + sigma^2 m`.
    pub m: Complex64,
    /// Resolvent `G = a_h / (a (z - a_h^2)) = m / a_h`.
    pub sample: GreenSample,
}

/// Solves the dressed-skip parametrization of the one-layer model with a
/// scalar structured part `a`: the order parameter
/// `m = lim (1/N) tr(Y (z - Y^T Y)^{-1})` satisfies
///
/// ```text
/// m = a_h^2 / (a (z - a_h^2)),    a_h = a + sigma^2 m,
/// ```
///
/// and the resolvent is recovered as `G = m / a_h`. Substituting
/// `u = a / a_h` turns this into the subordination identity, so the two
/// routes must agree wherever both converge; the dressed route is the
/// independent cross-check. (Dropping the `a / a_h` dressing of the
/// denominator, i.e. iterating `m = a_h / (z - a_h^2)`, produces a
/// different curve whose moments disagree with the model already at order
/// `z^{-2}`; Monte Carlo arbitration confirms the form used here.)
///
/// The case `a = 0` is rejected: the parametrization divides by `a` and
/// degenerates (the subordination path handles pure noise). Only
/// `Im z > 0` is accepted. Cold calls walk the same broadening ladder as
/// the subordination solver before the final solve.
pub fn solve_dressed_fixed_point(
    z: Complex64,
    a: f64,
    sigma2: f64,
    seed: Option<Complex64>,
) -> Result<DressedSample> {
    if !(z.im > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "spectral argument must have positive imaginary part, got {z}"
        )));
    }
    if !a.is_finite() || !sigma2.is_finite() || sigma2 < 0.0 {
        return Err(SpectralError::InvalidInput(
            "dressed fixed point needs finite a and nonnegative sigma2".into(),
        ));
    }
    if a == 0.0 {
        return Err(SpectralError::UnsupportedInput(
            "dressed parametrization is degenerate at a = 0 (the recovery of G \
             divides by a); use the subordination solver"
                .into(),
        ));
    }
    if seed.is_some() || sigma2 == 0.0 {
        return Ok(solve_dressed_pointwise(z, a, sigma2, seed));
    }
    let mut carried: Option<Complex64> = None;
    let mut ladder_iterations = 0;
    for eta in ladder_rungs(z, a * a + sigma2) {
        let rung = solve_dressed_pointwise(c64(z.re, eta), a, sigma2, carried);
        if rung.sample.converged {
            carried = Some(rung.m);
        }
        ladder_iterations += rung.sample.iterations;
    }
    let mut out = solve_dressed_pointwise(z, a, sigma2, carried);
    out.sample.iterations += ladder_iterations;
    Ok(out)
}

/// Single-point damped-Newton solve of the dressed fixed point.
fn solve_dressed_pointwise(
    z: Complex64,
    a: f64,
    sigma2: f64,
    seed: Option<Complex64>,
) -> DressedSample {
    let k_res = |m: Complex64| -> Complex64 {
        let ah = a + sigma2 * m;
        ah * ah / (a * (z - ah * ah)) - m
    };
    // dK/dm = 2 sigma^2 z a_h / (a (z - a_h^2)^2) - 1
    let k_deriv = |m: Complex64| -> Complex64 {
        let ah = a + sigma2 * m;
        let r = z - ah * ah;
        2.0 * sigma2 * z * ah / (a * r * r) - c64(1.0, 0.0)
    };
    let green = |m: Complex64| -> Complex64 {
        let ah = a + sigma2 * m;
        ah / (a * (z - ah * ah))
    };

    let mut seeds: Vec<Complex64> = Vec::with_capacity(4);
    if let Some(s) = seed {
        seeds.push(s);
    }
    seeds.push(a / (z - a * a));
    seeds.push(a / z);
    seeds.push(c64(0.01, -0.01));

    let mut best: Option<Attempt> = None;
    for m0 in seeds {
        let mut m = m0;
        let mut f = k_res(m);
        let mut norm = f.norm();
        let mut iterations = 0;
        if norm.is_finite() {
            while iterations < SCALAR_MAX_ITER && norm > SCALAR_TOL {
                let df = k_deriv(m);
                if df.norm() < 1e-300 {
                    break;
                }
                let delta = -f / df;
                let mut accepted = false;
                for &alpha in &SCALAR_DAMPING {
                    let m_new = m + delta * alpha;
                    let f_new = k_res(m_new);
                    let n_new = f_new.norm();
                    if n_new.is_finite() && n_new < norm {
                        m = m_new;
                        f = f_new;
                        norm = n_new;
                        accepted = true;
                        break;
                    }
                }
                if !accepted {
                    break;
                }
                iterations += 1;
            }
        }
        let att = Attempt {
            g: m,
            residual: norm,
            iterations,
            converged: norm <= SCALAR_TOL && physical(green(m)),
        };
        let keep = match &best {
            None => true,
            Some(b) => (att.converged && !b.converged)
                || (att.converged == b.converged && att.residual < b.residual),
        };
        if keep {
            let done = att.converged;
            best = Some(att);
            if done {
                break;
            }
        }
    }
    let att = best.expect("at least one seed attempted");
    DressedSample {
        m: att.g,
        sample: GreenSample {
            z,
            value: GreenValue::Scalar(green(att.g)),
            converged: att.converged,
            interpolated: false,
            residual: att.residual,
            iterations: att.iterations,
        },
    }
}
