//! Spectral densities from resolvent samples.
//!
//! The boundary-value inversion `rho(x) = -(1/pi) Im G(x + i eta)` turns
//! a solved grid into an eigenvalue density; a change of variables maps
//! it to the singular-value domain; Neville-tableau extrapolation over a
//! ladder of broadenings sharpens edges beyond any single `eta`. The
//! module also carries the normalization audit every emitted density
//! passes through and a sketched stochastic trace estimator for
//! large-dimension experiments.

use std::io::Write as IoWrite;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::compose::LayerSpec;
use crate::error::{Result, SpectralError};
use crate::numerics::{GreenSample, GreenValue, SpectralGrid};

/// Which variable the density is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Eigenvalue,
    SingularValue,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Eigenvalue => "eigenvalue",
            Domain::SingularValue => "singular_value",
        })
    }
}

/// A normalized spectral density on a strictly increasing grid.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpectralDensity {
    /// Grid of eigenvalue (or singular-value) points.
    pub x: Vec<f64>,
    /// Nonnegative density weights, normalized to unit trapezoid integral.
    pub rho: Vec<f64>,
    pub domain: Domain,
    /// Broadening the samples were taken at (the finest level for
    /// extrapolated densities).
    pub eta: f64,
    /// Trapezoid integral before renormalization.
    pub integral: f64,
    /// Mass removed by clipping negative weights before normalization.
    pub clipped_mass: f64,
}

/// Trapezoid quadrature on a (possibly non-uniform) grid.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

impl SpectralDensity {
    /// True when more than 1% of the recovered mass was negative and had
    /// to be clipped; a sign of a miscalibrated grid or branch trouble.
    pub fn clipped_mass_warning(&self) -> bool {
        self.clipped_mass > 0.01 * self.integral.abs().max(1e-300)
    }

    /// Writes the `x,rho,domain,eta` CSV schema.
    pub fn write_csv<W: IoWrite>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "rho", "domain", "eta"])?;
        let domain = self.domain.to_string();
        let eta = format!("{}", self.eta);
        for (x, r) in self.x.iter().zip(self.rho.iter()) {
            w.write_record([&format!("{x}"), &format!("{r}"), &domain, &eta])?;
        }
        w.flush().map_err(SpectralError::from)?;
        Ok(())
    }

    /// JSON form with the raw pre-normalization integral retained.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "x": self.x,
            "rho": self.rho,
            "domain": self.domain,
            "eta": self.eta,
            "integral_raw": self.integral,
        })
    }
}

/// Scalar resolvent value of a sample: the value itself for scalar
/// solves, the normalized trace for sector-resolved ones.
pub fn scalar_green(sample: &GreenSample) -> Complex64 {
    match &sample.value {
        GreenValue::Scalar(g) => *g,
        GreenValue::Matrix(m) => m.trace() / m.nrows() as f64,
    }
}

/// Clips, audits, and normalizes a raw inverted density.
fn density_from_raw(
    x: &[f64],
    raw: &[f64],
    eta: f64,
    domain: Domain,
    context: &str,
) -> Result<SpectralDensity> {
    let clipped: Vec<f64> = raw.iter().map(|&r| r.max(0.0)).collect();
    let negative: Vec<f64> = raw.iter().map(|&r| (-r).max(0.0)).collect();
    let integral = trapezoid(x, &clipped);
    let clipped_mass = trapezoid(x, &negative);
    if !(0.5..=1.5).contains(&integral) {
        return Err(SpectralError::SuspiciousDensity {
            integral,
            context: context.to_string(),
        });
    }
    let rho = clipped.iter().map(|&r| r / integral).collect();
    Ok(SpectralDensity {
        x: x.to_vec(),
        rho,
        domain,
        eta,
        integral,
        clipped_mass,
    })
}

/// Boundary-value inversion of solved resolvent samples into an
/// eigenvalue density.
///
/// `rho(x) = -(1/pi) Im G(x + i eta)`, clipped to nonnegative weights and
/// normalized to unit integral; the pre-normalization integral and the
/// clipped mass are recorded. A pre-normalization integral outside
/// `[0.5, 1.5]` is rejected as a wrong-branch symptom. Every sample must
/// be usable (converged or explicitly interpolated) and sit at the same
/// height `eta` over a strictly increasing real grid.
pub fn stieltjes_invert(samples: &[GreenSample], eta: f64) -> Result<SpectralDensity> {
    if samples.is_empty() {
        return Err(SpectralError::InvalidInput("no samples".into()));
    }
    if !(eta > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "broadening must be positive, got {eta}"
        )));
    }
    let mut x = Vec::with_capacity(samples.len());
    let mut raw = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if !s.usable() {
            return Err(SpectralError::InvalidInput(format!(
                "sample {i} at z = {} is unconverged; refine or interpolate first",
                s.z
            )));
        }
        if (s.z.im - eta).abs() > 1e-9 * eta.max(1.0) {
            return Err(SpectralError::InvalidInput(format!(
                "sample {i} sits at height {} instead of {eta}",
                s.z.im
            )));
        }
        if let Some(prev) = x.last() {
            if s.z.re <= *prev {
                return Err(SpectralError::InvalidInput(
                    "sample grid must be strictly increasing".into(),
                ));
            }
        }
        x.push(s.z.re);
        raw.push(-scalar_green(s).im / std::f64::consts::PI);
    }
    density_from_raw(&x, &raw, eta, Domain::Eigenvalue, "inversion")
}

/// Change of variables from the eigenvalue to the singular-value domain:
/// `sigma = sqrt(x)`, `rho_sv(sigma) = 2 sigma rho(sigma^2)`, then
/// renormalized on the new grid.
pub fn to_singular_density(d: &SpectralDensity) -> Result<SpectralDensity> {
    if d.domain != Domain::Eigenvalue {
        return Err(SpectralError::InvalidInput(
            "input density must be in the eigenvalue domain".into(),
        ));
    }
    if d.x.iter().any(|&x| x < 0.0) {
        return Err(SpectralError::InvalidInput(
            "eigenvalue grid must be nonnegative".into(),
        ));
    }
    let sigma: Vec<f64> = d.x.iter().map(|&x| x.sqrt()).collect();
    let raw: Vec<f64> = sigma
        .iter()
        .zip(d.rho.iter())
        .map(|(&s, &r)| 2.0 * s * r)
        .collect();
    density_from_raw(&sigma, &raw, d.eta, Domain::SingularValue, "change of variables")
}

/// Output of the broadening-ladder extrapolation.
#[derive(Debug, Clone)]
pub struct RichardsonOutcome {
    /// Extrapolated density.
    pub density: SpectralDensity,
    /// Per-level densities, coarsest broadening first, for diagnostics.
    pub per_level: Vec<SpectralDensity>,
    /// Broadenings used, aligned with `per_level`.
    pub etas: Vec<f64>,
}

/// Sharpens a density by extrapolating the broadening to zero.
///
/// Resolvents are solved at `levels` broadenings `eta_base * 2^k`
/// (k = 0 the finest) and combined pointwise on the raw pre-clip weights
/// through the Neville tableau
///
/// ```text
/// T[k][j] = (4^j T[k][j-1] - T[k-1][j-1]) / (4^j - 1),
/// ```
///
/// which cancels the even error expansion in `eta` order by order; the
/// deepest entry is then clipped and normalized like any other density.
/// With `levels = 1` the result is exactly the plain inversion at
/// `eta_base`. The level solves are independent and run in parallel.
pub fn richardson_refine<F>(
    solve_level: F,
    xs: &[f64],
    eta_base: f64,
    levels: usize,
) -> Result<RichardsonOutcome>
where
    F: Fn(&SpectralGrid) -> Result<Vec<GreenSample>> + Sync,
{
    if levels == 0 {
        return Err(SpectralError::InvalidInput(
            "at least one level is required".into(),
        ));
    }
    if !(eta_base > 0.0) {
        return Err(SpectralError::InvalidInput(format!(
            "base broadening must be positive, got {eta_base}"
        )));
    }
    // coarsest first so tableau rows refine downward
    let etas: Vec<f64> = (0..levels)
        .map(|k| eta_base * f64::powi(2.0, (levels - 1 - k) as i32))
        .collect();

    let rows: Vec<Result<(Vec<f64>, SpectralDensity)>> = etas
        .par_iter()
        .enumerate()
        .map(|(level, &eta)| {
            let grid = SpectralGrid::from_xs(xs, eta)?;
            let samples = solve_level(&grid)?;
            if samples.len() != xs.len() {
                return Err(SpectralError::InvalidInput(format!(
                    "level solver returned {} samples for {} grid points",
                    samples.len(),
                    xs.len()
                )));
            }
            let mut raw = Vec::with_capacity(xs.len());
            for (i, s) in samples.iter().enumerate() {
                if !s.usable() {
                    return Err(SpectralError::Unconverged(format!(
                        "level {level} (eta = {eta}): unusable sample at x = {}",
                        xs[i]
                    )));
                }
                raw.push(-scalar_green(s).im / std::f64::consts::PI);
            }
            let level_density = density_from_raw(
                xs,
                &raw,
                eta,
                Domain::Eigenvalue,
                &format!("refinement level {level}"),
            )?;
            Ok((raw, level_density))
        })
        .collect();

    let mut raws: Vec<Vec<f64>> = Vec::with_capacity(levels);
    let mut per_level: Vec<SpectralDensity> = Vec::with_capacity(levels);
    for row in rows {
        let (raw, d) = row?;
        raws.push(raw);
        per_level.push(d);
    }

    // Neville tableau, keeping only the previous row
    let mut prev: Vec<Vec<f64>> = Vec::with_capacity(levels);
    for (k, raw) in raws.iter().enumerate() {
        let mut row: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
        row.push(raw.clone());
        for j in 1..=k {
            let factor = f64::powi(4.0, j as i32);
            let combined: Vec<f64> = row[j - 1]
                .iter()
                .zip(prev[j - 1].iter())
                .map(|(&fine, &coarse)| (factor * fine - coarse) / (factor - 1.0))
                .collect();
            row.push(combined);
        }
        prev = row;
    }
    let extrapolated = prev.last().expect("at least one level");
    let density = density_from_raw(xs, extrapolated, eta_base, Domain::Eigenvalue, "extrapolated")?;
    Ok(RichardsonOutcome {
        density,
        per_level,
        etas,
    })
}

/// Default evaluation grid for theory-only runs (no empirical spectrum
/// to calibrate against): a heuristic support bound
/// `x_max = 1.5 (|A|_op^2 + (1 + sqrt(c))^2)` with `c` the total noise
/// budget, and the panel point-count rule
/// `points = max(400, floor(40 x_max))` on `[0.01, x_max]`.
pub fn default_theory_grid(layers: &[LayerSpec], eta: f64) -> Result<SpectralGrid> {
    if layers.is_empty() {
        return Err(SpectralError::InvalidInput("empty layer stack".into()));
    }
    let mut op2 = 1.0_f64;
    for layer in layers {
        op2 *= layer.twist.gram()?.max_eig().max(1e-12);
    }
    let c: f64 = layers.iter().map(|l| l.sigma2).sum();
    let x_max = 1.5 * (op2 + (1.0 + c.sqrt()).powi(2));
    let points = 400.max((40.0 * x_max).floor() as usize);
    SpectralGrid::uniform(0.01, x_max, points, eta)
}

/// Sketched stochastic trace estimate.
#[derive(Debug, Clone)]
pub struct HutchTrace {
    pub estimate: f64,
    /// Columns of the sketch actually kept.
    pub sketch_rank: usize,
    /// True when the sketch QR was rank deficient and columns were
    /// dropped.
    pub rank_deficient: bool,
}

/// Variance-reduced stochastic trace estimation.
///
/// A Gaussian sketch captures the dominant range: `Q = qr(A Omega)` with
/// `Omega` a `dim x k` Gaussian block, contributing the exact partial
/// trace `tr(Q^T A Q)`. The remainder is probed stochastically in the
/// complement: each Gaussian probe is projected by `I - Q Q^T`,
/// normalized to unit length, and the probe average is reweighted by the
/// residual dimension `dim - k`, which keeps the estimator unbiased and
/// makes it exact for `A = I`. With `s = 0` only the sketch term is
/// returned (exact once `k` reaches the rank of `A`).
pub fn hutchpp_trace(
    apply: &mut dyn FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    dim: usize,
    k: usize,
    s: usize,
    seed: u64,
) -> Result<HutchTrace> {
    if dim == 0 || k == 0 {
        return Err(SpectralError::InvalidInput(
            "dimension and sketch size must be positive".into(),
        ));
    }
    if dim < k + s {
        return Err(SpectralError::InvalidInput(format!(
            "need dim >= k + s, got dim = {dim}, k = {k}, s = {s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(dim, k, |_, _| StandardNormal.sample(&mut rng));
    let sketch = apply(&omega);
    let qr = sketch.qr();
    let r = qr.r();
    let q_full = qr.q();

    // rank audit on the triangular factor
    let r_max = (0..k).map(|j| r[(j, j)].abs()).fold(0.0_f64, f64::max);
    let rank = (0..k)
        .take_while(|&j| r[(j, j)].abs() > 1e-12 * r_max.max(1e-300))
        .count();
    let rank_deficient = rank < k;
    let rank = rank.max(1).min(k);
    let q = q_full.columns(0, rank).into_owned();

    let aq = apply(&q);
    let mut estimate = 0.0;
    for j in 0..rank {
        estimate += q.column(j).dot(&aq.column(j));
    }

    if s > 0 && dim > rank {
        let probes = DMatrix::from_fn(dim, s, |_, _| StandardNormal.sample(&mut rng));
        // project out the sketched range and renormalize each probe
        let mut residual = &probes - &q * (q.transpose() * &probes);
        let mut kept = 0usize;
        for j in 0..s {
            let n = residual.column(j).norm();
            if n > 1e-12 {
                for i in 0..dim {
                    residual[(i, j)] /= n;
                }
                kept += 1;
            } else {
                for i in 0..dim {
                    residual[(i, j)] = 0.0;
                }
            }
        }
        if kept > 0 {
            let applied = apply(&residual);
            let mut probe_sum = 0.0;
            for j in 0..s {
                probe_sum += residual.column(j).dot(&applied.column(j));
            }
            estimate += (dim - rank) as f64 / kept as f64 * probe_sum;
        }
    }

    Ok(HutchTrace {
        estimate,
        sketch_rank: rank,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::c64;

    fn lorentzian_samples(center: f64, xs: &[f64], eta: f64) -> Vec<GreenSample> {
        xs.iter()
            .map(|&x| {
                let z = c64(x, eta);
                GreenSample {
                    z,
                    value: GreenValue::Scalar(1.0 / (z - center)),
                    converged: true,
                    interpolated: false,
                    residual: 0.0,
                    iterations: 1,
                }
            })
            .collect()
    }

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn point_mass_inverts_to_lorentzian() {
        let eta = 0.02;
        let xs = linspace(0.0, 6.0, 1200);
        let samples = lorentzian_samples(1.0, &xs, eta);
        let d = stieltjes_invert(&samples, eta).unwrap();
        // pre-normalization integral close to 1, improving as the grid widens
        assert!((d.integral - 1.0).abs() < 0.02, "integral {}", d.integral);
        let xs_wide = linspace(0.0, 60.0, 6000);
        let wide = stieltjes_invert(&lorentzian_samples(1.0, &xs_wide, eta), eta).unwrap();
        assert!((wide.integral - 1.0).abs() < (d.integral - 1.0).abs());
        // shape check at the peak
        let peak_idx = d
            .rho
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((d.x[peak_idx] - 1.0).abs() < 0.01);
        // normalized
        assert!((trapezoid(&d.x, &d.rho) - 1.0).abs() < 1e-9);
        assert!(!d.clipped_mass_warning());
    }

    #[test]
    fn resolvent_of_zero_spikes_at_origin() {
        let eta = 0.2;
        // a grid starting exactly at the pole catches just under half
        // the mass, which the inversion flags instead of normalizing
        let xs_half = linspace(0.0, 10.0, 2000);
        let err = stieltjes_invert(&lorentzian_samples(0.0, &xs_half, eta), eta).unwrap_err();
        assert!(matches!(err, SpectralError::SuspiciousDensity { .. }));
        // widening a touch past the pole recovers an acceptable share
        let xs = linspace(-0.05, 10.0, 2000);
        let d = stieltjes_invert(&lorentzian_samples(0.0, &xs, eta), eta).unwrap();
        assert!(d.integral > 0.5 && d.integral < 0.7, "integral {}", d.integral);
        let peak_idx = d
            .rho
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(d.x[peak_idx].abs() < 0.02, "peak at {}", d.x[peak_idx]);
    }

    #[test]
    fn scaled_resolvent_is_rejected_as_suspicious() {
        let eta = 0.02;
        let xs = linspace(0.0, 6.0, 500);
        let mut samples = lorentzian_samples(1.0, &xs, eta);
        for s in &mut samples {
            if let GreenValue::Scalar(g) = &mut s.value {
                *g *= 0.3;
            }
        }
        match stieltjes_invert(&samples, eta) {
            Err(SpectralError::SuspiciousDensity { integral, .. }) => {
                assert!((integral - 0.3).abs() < 0.05);
            }
            other => panic!("expected suspicious-density error, got {other:?}"),
        }
    }

    #[test]
    fn unconverged_samples_are_rejected() {
        let eta = 0.02;
        let xs = linspace(0.0, 2.0, 50);
        let mut samples = lorentzian_samples(1.0, &xs, eta);
        samples[10].converged = false;
        assert!(stieltjes_invert(&samples, eta).is_err());
        samples[10].interpolated = true;
        assert!(stieltjes_invert(&samples, eta).is_ok());
    }

    #[test]
    fn matrix_samples_use_the_normalized_trace() {
        let eta = 0.05;
        let z = c64(1.0, eta);
        let g = 1.0 / (z - 0.5);
        let m = DMatrix::from_diagonal_element(3, 3, g);
        let sample = GreenSample {
            z,
            value: GreenValue::Matrix(m),
            converged: true,
            interpolated: false,
            residual: 0.0,
            iterations: 1,
        };
        assert!((scalar_green(&sample) - g).norm() < 1e-15);
    }

    #[test]
    fn uniform_density_maps_to_linear_singular_density() {
        let xs = linspace(0.0, 1.0, 800);
        let rho = vec![1.0; xs.len()];
        let integral = trapezoid(&xs, &rho);
        let d = SpectralDensity {
            x: xs.clone(),
            rho: rho.iter().map(|r| r / integral).collect(),
            domain: Domain::Eigenvalue,
            eta: 0.02,
            integral,
            clipped_mass: 0.0,
        };
        let sv = to_singular_density(&d).unwrap();
        assert_eq!(sv.domain, Domain::SingularValue);
        // rho_sv(sigma) = 2 sigma, up to the recorded renormalization
        for (s, r) in sv.x.iter().zip(sv.rho.iter()).skip(1) {
            assert!(
                (r - 2.0 * s / sv.integral).abs() < 1e-12,
                "at sigma = {s}: {r}"
            );
        }
        assert!((trapezoid(&sv.x, &sv.rho) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mp_law_maps_to_quarter_circle() {
        // analytic density of squared singular values at unit noise
        let xs: Vec<f64> = linspace(1e-4, 4.0, 4000);
        let rho: Vec<f64> = xs
            .iter()
            .map(|&x| ((4.0 - x) / x).sqrt() / (2.0 * std::f64::consts::PI))
            .collect();
        let integral = trapezoid(&xs, &rho);
        let d = SpectralDensity {
            x: xs,
            rho,
            domain: Domain::Eigenvalue,
            eta: 0.02,
            integral,
            clipped_mass: 0.0,
        };
        let sv = to_singular_density(&d).unwrap();
        // quarter circle sqrt(4 - sigma^2)/pi on (0, 2]
        for (s, r) in sv.x.iter().zip(sv.rho.iter()) {
            let expect = (4.0 - s * s).max(0.0).sqrt() / std::f64::consts::PI;
            assert!(
                (r * sv.integral - expect).abs() < 1e-10,
                "at sigma = {s}: {} vs {expect}",
                r * sv.integral
            );
        }
    }

    #[test]
    fn singular_map_round_trips_to_eigenvalue_density() {
        let xs = linspace(0.05, 4.0, 600);
        let rho_raw: Vec<f64> = xs.iter().map(|&x| (-x).exp()).collect();
        let integral = trapezoid(&xs, &rho_raw);
        let d = SpectralDensity {
            x: xs.clone(),
            rho: rho_raw.iter().map(|r| r / integral).collect(),
            domain: Domain::Eigenvalue,
            eta: 0.02,
            integral,
            clipped_mass: 0.0,
        };
        let sv = to_singular_density(&d).unwrap();
        // map back: rho_ev(x) = rho_sv(sqrt x) / (2 sqrt x), then renormalize
        let back_raw: Vec<f64> = sv
            .x
            .iter()
            .zip(sv.rho.iter())
            .map(|(&s, &r)| r / (2.0 * s))
            .collect();
        let back_int = trapezoid(&xs, &back_raw);
        for i in 5..xs.len() - 5 {
            let back = back_raw[i] / back_int;
            assert!(
                (back - d.rho[i]).abs() < 1e-6 * d.rho[i].max(1e-3),
                "round trip drifted at x = {}",
                xs[i]
            );
        }
    }

    #[test]
    fn negative_grid_rejected_for_singular_map() {
        let d = SpectralDensity {
            x: vec![-0.5, 0.5],
            rho: vec![0.5, 0.5],
            domain: Domain::Eigenvalue,
            eta: 0.02,
            integral: 1.0,
            clipped_mass: 0.0,
        };
        assert!(to_singular_density(&d).is_err());
    }

    #[test]
    fn single_level_refinement_equals_plain_inversion() {
        let eta = 0.02;
        let xs = linspace(0.0, 6.0, 500);
        let solver = |grid: &SpectralGrid| -> Result<Vec<GreenSample>> {
            Ok(lorentzian_samples(1.0, &grid.xs(), grid.eta))
        };
        let refined = richardson_refine(solver, &xs, eta, 1).unwrap();
        let plain = stieltjes_invert(&lorentzian_samples(1.0, &xs, eta), eta).unwrap();
        assert_eq!(refined.density.rho, plain.rho);
        assert_eq!(refined.density.integral, plain.integral);
        assert_eq!(refined.etas, vec![eta]);
    }

    #[test]
    fn quadratic_pollution_is_cancelled_exactly() {
        // synthetic data following exactly the error model rho + c eta^2
        let xs = linspace(0.0, 3.0, 300);
        let width2 = 0.09;
        let scale = 1.0 / (2.0 * std::f64::consts::PI * width2).sqrt();
        let truth: Vec<f64> = xs
            .iter()
            .map(|&x| scale * (-(x - 1.5).powi(2) / (2.0 * width2)).exp())
            .collect();
        let c_pollution = 7.0;
        let solver = |grid: &SpectralGrid| -> Result<Vec<GreenSample>> {
            let eta = grid.eta;
            Ok(grid
                .points
                .iter()
                .enumerate()
                .map(|(i, &z)| GreenSample {
                    z,
                    value: GreenValue::Scalar(c64(
                        0.0,
                        -std::f64::consts::PI * (truth[i] + c_pollution * eta * eta),
                    )),
                    converged: true,
                    interpolated: false,
                    residual: 0.0,
                    iterations: 1,
                })
                .collect())
        };
        let refined = richardson_refine(solver, &xs, 0.05, 2).unwrap();
        let norm = trapezoid(&xs, &truth);
        for (got, want) in refined.density.rho.iter().zip(truth.iter()) {
            assert!(
                (got - want / norm).abs() < 1e-12,
                "extrapolation missed: {got} vs {}",
                want / norm
            );
        }
        // the coarse level alone is visibly polluted
        assert!(refined.per_level[0].integral > refined.density.integral + 1e-4);
    }

    #[test]
    fn extrapolated_peak_is_sharper_than_single_level() {
        let xs = linspace(0.0, 6.0, 2000);
        let solver = |grid: &SpectralGrid| -> Result<Vec<GreenSample>> {
            Ok(lorentzian_samples(1.0, &grid.xs(), grid.eta))
        };
        let eta = 0.04;
        let refined = richardson_refine(&solver, &xs, eta, 3).unwrap();
        let single = richardson_refine(&solver, &xs, eta, 1).unwrap();
        let peak = |d: &SpectralDensity| d.rho.iter().cloned().fold(0.0_f64, f64::max);
        assert!(
            peak(&refined.density) > peak(&single.density),
            "extrapolation did not sharpen the peak: {} vs {}",
            peak(&refined.density),
            peak(&single.density)
        );
    }

    #[test]
    fn refinement_reports_the_offending_level() {
        let xs = linspace(0.0, 6.0, 200);
        // coarse levels fine, finest level broken
        let solver = |grid: &SpectralGrid| -> Result<Vec<GreenSample>> {
            let scale = if grid.eta < 0.03 { 0.1 } else { 1.0 };
            Ok(grid
                .points
                .iter()
                .map(|&z| GreenSample {
                    z,
                    value: GreenValue::Scalar(scale / (z - 1.0)),
                    converged: true,
                    interpolated: false,
                    residual: 0.0,
                    iterations: 1,
                })
                .collect())
        };
        let err = richardson_refine(solver, &xs, 0.02, 2).unwrap_err();
        match err {
            SpectralError::SuspiciousDensity { context, .. } => {
                assert!(context.contains("level 1"), "context: {context}");
            }
            other => panic!("expected suspicious-density error, got {other:?}"),
        }
    }

    #[test]
    fn csv_and_json_round_out_the_schema() {
        let d = SpectralDensity {
            x: vec![0.0, 1.0],
            rho: vec![0.25, 0.75],
            domain: Domain::SingularValue,
            eta: 0.02,
            integral: 0.98,
            clipped_mass: 0.0,
        };
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,rho,domain,eta");
        assert_eq!(lines.next().unwrap(), "0,0.25,singular_value,0.02");
        let j = d.to_json();
        assert_eq!(j["integral_raw"], 0.98);
        assert_eq!(j["domain"], "singular_value");
    }

    #[test]
    fn trace_of_identity_is_exact() {
        let dim = 20;
        let mut apply = |x: &DMatrix<f64>| x.clone();
        for (k, s) in [(3, 5), (1, 1), (10, 4)] {
            let t = hutchpp_trace(&mut apply, dim, k, s, 7).unwrap();
            assert!(
                (t.estimate - dim as f64).abs() < 1e-10,
                "k={k}, s={s}: {}",
                t.estimate
            );
            assert!(!t.rank_deficient);
        }
    }

    #[test]
    fn full_rank_sketch_recovers_small_traces_exactly() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            10,
            (1..=10).map(|v| v as f64),
        ));
        let mut apply = |x: &DMatrix<f64>| &a * x;
        let t = hutchpp_trace(&mut apply, 10, 10, 0, 3).unwrap();
        assert!((t.estimate - 55.0).abs() < 1e-10, "{}", t.estimate);
        assert_eq!(t.sketch_rank, 10);
    }

    #[test]
    fn rank_deficient_sketch_is_flagged_and_still_sound() {
        // rank-2 projector scaled by 3: trace is 6
        let mut u = DMatrix::zeros(12, 2);
        u[(0, 0)] = 1.0;
        u[(5, 1)] = 1.0;
        let a = 3.0 * &u * u.transpose();
        let mut apply = |x: &DMatrix<f64>| &a * x;
        let t = hutchpp_trace(&mut apply, 12, 6, 0, 11).unwrap();
        assert!(t.rank_deficient);
        assert!(t.sketch_rank <= 2);
        assert!((t.estimate - 6.0).abs() < 1e-8, "{}", t.estimate);
    }

    #[test]
    fn stochastic_estimate_is_accurate_for_random_symmetric_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let half = DMatrix::from_fn(50, 50, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let a = &half * half.transpose() / 50.0;
        let exact = a.trace();
        let mut errs: Vec<f64> = Vec::new();
        for seed in 0..100 {
            let mut apply = |x: &DMatrix<f64>| &a * x;
            let t = hutchpp_trace(&mut apply, 50, 10, 30, seed).unwrap();
            errs.push((t.estimate - exact).abs() / exact.abs());
        }
        errs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let median = errs[errs.len() / 2];
        assert!(median <= 0.05, "median relative error {median:.4}");
    }

    #[test]
    fn theory_grid_heuristic_follows_the_panel_rule() {
        let layers = [LayerSpec::scalar(1.0, 0.25).unwrap()];
        let grid = default_theory_grid(&layers, 0.02).unwrap();
        // x_max = 1.5 (1 + (1 + 0.5)^2) = 4.875 -> 400 points minimum
        let x_max = grid.points.last().unwrap().re;
        assert!((x_max - 4.875).abs() < 1e-12);
        assert_eq!(grid.len(), 400);
        assert!((grid.points[0].re - 0.01).abs() < 1e-12);
    }
}
