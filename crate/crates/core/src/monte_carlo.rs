//! Finite-size Monte Carlo validation.
//!
//! Samples random deep-network Jacobians `Y = prod_l (A_q (x) I_p +
//! sqrt(sigma2_l) W_l)`, collects the eigenvalues of `Y^T Y`, bins them,
//! and scores the empirical spectrum against a theory density with
//! transport and density distances. Sampling is reproducible: every
//! `(sample, layer)` pair owns its own counter-mode RNG stream derived
//! from the one user seed, so results are independent of thread
//! scheduling.

use std::io::Write as IoWrite;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::activation::ActivationFn;
use crate::compose::{validate_layers, LayerSpec};
use crate::density::{trapezoid, Domain, SpectralDensity};
use crate::error::{Result, SpectralError};
use crate::numerics::SpectralGrid;

/// Desk-scale guard on the total matrix dimension `N = q p`.
pub const MAX_DIMENSION: usize = 2000;
/// Fraction of failed samples above which the run is an error.
pub const SKIP_FAIL_FRACTION: f64 = 0.01;

/// Pointwise nonlinearity inserted into the sampled Jacobians.
///
/// Each layer factor becomes `A_q (x) I_p + sqrt(sigma_w2_l) D_l W_l`
/// with `D_l = diag(phi'(sqrt(q_l) z_i))`, `z_i` i.i.d. standard normal,
/// modeling the derivative of the activation at preactivations of
/// variance `q_l`. The default linear model instead uses the effective
/// per-layer noise strengths carried by the layer stack.
#[derive(Debug, Clone)]
pub struct NonlinearConfig {
    pub activation: ActivationFn,
    /// Raw weight variances per layer.
    pub sigma_w2: Vec<f64>,
    /// Preactivation variances per layer.
    pub q_signal: Vec<f64>,
}

/// Configuration of one Monte Carlo run.
#[derive(Debug, Clone)]
pub struct MCConfig {
    pub layers: Vec<LayerSpec>,
    /// Replication factor of each sector.
    pub p: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Activation model; `None` is the linear effective-noise model.
    pub nonlinear: Option<NonlinearConfig>,
}

impl MCConfig {
    pub fn new(layers: Vec<LayerSpec>, p: usize, n_samples: usize, seed: u64) -> Result<Self> {
        let (q, _) = validate_layers(&layers)?;
        if p == 0 {
            return Err(SpectralError::InvalidInput(
                "replication factor must be at least 1".into(),
            ));
        }
        if q * p > MAX_DIMENSION {
            return Err(SpectralError::InvalidInput(format!(
                "total dimension {} exceeds the {MAX_DIMENSION} guard",
                q * p
            )));
        }
        if n_samples == 0 {
            return Err(SpectralError::InvalidInput(
                "at least one sample is required".into(),
            ));
        }
        Ok(MCConfig {
            layers,
            p,
            n_samples,
            seed,
            nonlinear: None,
        })
    }

    pub fn with_nonlinear(mut self, nl: NonlinearConfig) -> Result<Self> {
        let l = self.layers.len();
        if nl.sigma_w2.len() != l || nl.q_signal.len() != l {
            return Err(SpectralError::InvalidInput(format!(
                "nonlinear model needs {l} weight variances and preactivation variances"
            )));
        }
        if nl.sigma_w2.iter().chain(nl.q_signal.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SpectralError::InvalidInput(
                "nonlinear variances must be nonnegative".into(),
            ));
        }
        self.nonlinear = Some(nl);
        Ok(self)
    }

    pub fn q(&self) -> usize {
        self.layers[0].q()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total matrix dimension `N = q p`.
    pub fn dimension(&self) -> usize {
        self.q() * self.p
    }
}

/// Binned empirical density.
#[derive(Debug, Clone)]
pub struct Histogram {
    /// Strictly increasing bin edges (one more than heights).
    pub edges: Vec<f64>,
    /// Heights normalized so that sum(height * width) = 1.
    pub heights: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges
            .windows(2)
            .map(|e| 0.5 * (e[0] + e[1]))
            .collect()
    }

    /// Piecewise-linear density curve through the bin centers, anchored
    /// at the outer edges with the boundary bin heights. The trapezoid
    /// mass of this curve equals the histogram mass exactly.
    pub fn curve(&self) -> (Vec<f64>, Vec<f64>) {
        let centers = self.centers();
        let mut xs = Vec::with_capacity(centers.len() + 2);
        let mut ys = Vec::with_capacity(centers.len() + 2);
        xs.push(self.edges[0]);
        ys.push(self.heights[0]);
        xs.extend(centers);
        ys.extend(self.heights.iter().cloned());
        xs.push(*self.edges.last().unwrap());
        ys.push(*self.heights.last().unwrap());
        (xs, ys)
    }
}

/// Pooled eigenvalue sample of a Monte Carlo run.
#[derive(Debug, Clone)]
pub struct EmpiricalSpectrum {
    /// All retained eigenvalues, sorted ascending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues per retained sample, each sorted ascending.
    pub by_sample: Vec<Vec<f64>>,
    /// Default binning (Freedman-Diaconis).
    pub histogram: Histogram,
    /// Samples dropped because their eigensolve failed.
    pub skipped: usize,
    /// Samples retained.
    pub n_samples: usize,
}

impl EmpiricalSpectrum {
    /// Wraps an existing pooled sample (testing and file reload paths).
    pub fn from_pooled(mut eigenvalues: Vec<f64>, n_samples: usize) -> Result<Self> {
        if eigenvalues.is_empty() || n_samples == 0 {
            return Err(SpectralError::InvalidInput(
                "empty eigenvalue pool".into(),
            ));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidInput(
                "non-finite eigenvalue in pool".into(),
            ));
        }
        eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let histogram = freedman_diaconis(&eigenvalues);
        Ok(EmpiricalSpectrum {
            eigenvalues,
            by_sample: Vec::new(),
            histogram,
            skipped: 0,
            n_samples,
        })
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty pool")
    }
}

fn quantile(sorted: &[f64], f: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = f * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let t = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - t) + sorted[lo + 1] * t
    }
}

/// Freedman-Diaconis binning of a sorted sample; degenerate samples
/// (zero interquartile range or a single point) collapse to one full bin.
fn freedman_diaconis(sorted: &[f64]) -> Histogram {
    let n = sorted.len();
    let lo = sorted[0];
    let hi = sorted[n - 1];
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let width = 2.0 * iqr / (n as f64).cbrt();
    if !(width > 0.0) || hi <= lo {
        let pad = 1e-6 * lo.abs().max(1.0);
        let edges = vec![lo - pad, hi + pad];
        let w = edges[1] - edges[0];
        return Histogram {
            edges,
            heights: vec![1.0 / w],
        };
    }
    let bins = (((hi - lo) / width).ceil() as usize).clamp(1, 10_000);
    // nudge the last edge outward so the maximum lands in the final bin
    let pad = 1e-9 * (hi - lo).max(1.0);
    let mut edges = Vec::with_capacity(bins + 1);
    for i in 0..=bins {
        edges.push(lo + (hi + pad - lo) * i as f64 / bins as f64);
    }
    let heights = bin_heights(sorted, &edges);
    Histogram { edges, heights }
}

fn bin_heights(sorted: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for i in 0..bins {
        let lo = sorted.partition_point(|&v| v < edges[i]);
        let hi = if i + 1 == bins {
            sorted.partition_point(|&v| v <= edges[i + 1])
        } else {
            sorted.partition_point(|&v| v < edges[i + 1])
        };
        counts[i] = hi - lo;
    }
    let total: usize = counts.iter().sum();
    let total = total.max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 / (total * (edges[i + 1] - edges[i])))
        .collect()
}

/// Draws the Jacobian spectra described by `cfg`.
///
/// For sample `s`, `Y = F_{L-1} ... F_1 F_0` with
/// `F_l = A_q (x) I_p + sqrt(sigma2_l) W_{s,l}` and `W` i.i.d.
/// `N(0, 1/N)`; the eigenvalues of the symmetrized `Y^T Y` are pooled
/// across samples. The RNG stream of `(s, l)` is `(s << 16) | l` on top
/// of the user seed, making the run exactly reproducible regardless of
/// parallel scheduling. A sample whose eigensolve fails (or produces an
/// eigenvalue below `-1e-8 lambda_max`) is skipped; more than 1% skips
/// fail the run. Negative eigenvalues within the tolerance clip to zero.
pub fn sample_jacobian_spectrum(cfg: &MCConfig) -> Result<EmpiricalSpectrum> {
    let (q, l_depth) = validate_layers(&cfg.layers)?;
    let n = q * cfg.p;
    if n > MAX_DIMENSION {
        return Err(SpectralError::InvalidInput(format!(
            "total dimension {n} exceeds the {MAX_DIMENSION} guard"
        )));
    }
    if let Some(nl) = &cfg.nonlinear {
        if nl.sigma_w2.len() != l_depth || nl.q_signal.len() != l_depth {
            return Err(SpectralError::InvalidInput(
                "nonlinear model length mismatch".into(),
            ));
        }
    }

    // skip structure A_q (x) I_p per layer
    let kron_skips: Vec<DMatrix<f64>> = cfg
        .layers
        .iter()
        .map(|layer| {
            let mut k = DMatrix::zeros(n, n);
            for bi in 0..q {
                for bj in 0..q {
                    let a = layer.twist.a_q[(bi, bj)];
                    if a != 0.0 {
                        for d in 0..cfg.p {
                            k[(bi * cfg.p + d, bj * cfg.p + d)] = a;
                        }
                    }
                }
            }
            k
        })
        .collect();

    let inv_sqrt_n = (1.0 / n as f64).sqrt();
    let results: Vec<Option<Vec<f64>>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut y: Option<DMatrix<f64>> = None;
            for (l, layer) in cfg.layers.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((s as u64) << 16) | l as u64);
                let mut w = DMatrix::from_fn(n, n, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * inv_sqrt_n
                });
                let scale = match &cfg.nonlinear {
                    None => layer.sigma2.sqrt(),
                    Some(nl) => {
                        // activation-derivative mask applied from the left
                        let amp = nl.q_signal[l].sqrt();
                        for i in 0..n {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            let d = nl.activation.derivative(amp * z);
                            for j in 0..n {
                                w[(i, j)] *= d;
                            }
                        }
                        nl.sigma_w2[l].sqrt()
                    }
                };
                let factor = &kron_skips[l] + w * scale;
                y = Some(match y {
                    None => factor,
                    Some(prev) => factor * prev,
                });
            }
            let y = y.expect("at least one layer");
            let gram = y.transpose() * &y;
            let sym = (&gram + gram.transpose()) * 0.5;
            let eig = SymmetricEigen::try_new(sym, 1e-12, 50_000)?;
            let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
            let lam_max = vals.iter().cloned().fold(0.0_f64, f64::max);
            if vals.iter().any(|&v| v < -1e-8 * lam_max.max(1e-300)) {
                return None;
            }
            for v in &mut vals {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some(vals)
        })
        .collect();

    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped as f64 > SKIP_FAIL_FRACTION * cfg.n_samples as f64 {
        return Err(SpectralError::NumericalFailure(format!(
            "{skipped}/{} samples failed their eigensolve",
            cfg.n_samples
        )));
    }
    let by_sample: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let mut pooled: Vec<f64> = by_sample.iter().flatten().cloned().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let histogram = freedman_diaconis(&pooled);
    Ok(EmpiricalSpectrum {
        eigenvalues: pooled,
        n_samples: by_sample.len(),
        by_sample,
        histogram,
        skipped,
    })
}

/// Bins the pooled eigenvalues on caller-provided edges, normalized so
/// the in-range mass integrates to one (values outside the edges are
/// dropped). The result is the edge-anchored histogram curve, whose
/// trapezoid integral is exactly the unit bin mass.
pub fn empirical_density(spec: &EmpiricalSpectrum, edges: &[f64]) -> Result<SpectralDensity> {
    if spec.eigenvalues.is_empty() {
        return Err(SpectralError::InvalidInput("empty eigenvalue pool".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|e| e[1] <= e[0]) {
        return Err(SpectralError::InvalidInput(
            "edges must be strictly increasing with at least two entries".into(),
        ));
    }
    let in_range = spec
        .eigenvalues
        .iter()
        .filter(|&&v| v >= edges[0] && v <= *edges.last().unwrap())
        .count();
    if in_range == 0 {
        return Err(SpectralError::InvalidInput(
            "no eigenvalues inside the requested edges".into(),
        ));
    }
    let heights = bin_heights(&spec.eigenvalues, edges);
    let (x, rho) = Histogram {
        edges: edges.to_vec(),
        heights,
    }
    .curve();
    Ok(SpectralDensity {
        x,
        rho,
        domain: Domain::Eigenvalue,
        eta: 0.0,
        integral: 1.0,
        clipped_mass: 0.0,
    })
}

/// Distances between a theory density and an empirical spectrum.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SpectrumDistance {
    pub w1: f64,
    pub ks: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

fn interp_curve(xs: &[f64], rho: &[f64], x: f64) -> f64 {
    if x < xs[0] || x > xs[xs.len() - 1] {
        return 0.0;
    }
    match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => rho[i],
        Err(i) => {
            let (x0, x1) = (xs[i - 1], xs[i]);
            let t = (x - x0) / (x1 - x0);
            rho[i - 1] * (1.0 - t) + rho[i] * t
        }
    }
}

/// Scores an empirical spectrum against a theory density.
///
/// Both sides are treated as density curves (piecewise linear on their
/// own grids, zero outside): the empirical side is its edge-anchored
/// histogram curve. Transport distances compare cumulative trapezoid
/// integrals on the union of the two grids, with sentinel points just
/// outside each support so boundary jumps do not smear mass across
/// empty regions; W1 is the integral of the CDF gap, KS its sup. The
/// L^p distances compare the curves pointwise on the theory grid.
/// Comparing the histogram curve against itself gives exactly zero on
/// every metric.
pub fn compare_metrics(
    theory: &SpectralDensity,
    emp: &EmpiricalSpectrum,
) -> Result<SpectrumDistance> {
    if theory.x.len() < 2 {
        return Err(SpectralError::InvalidInput(
            "theory density needs at least two grid points".into(),
        ));
    }
    let (ex, ey) = emp.histogram.curve();
    let span = (theory.x[theory.x.len() - 1] - theory.x[0])
        .max(ex[ex.len() - 1] - ex[0])
        .max(1.0);
    let eps = 1e-9 * span;
    let mut union: Vec<f64> = theory.x.iter().chain(ex.iter()).cloned().collect();
    for side in [&theory.x, &ex] {
        union.push(side[0] - eps);
        union.push(side[side.len() - 1] + eps);
    }
    union.sort_by(|a, b| a.partial_cmp(b).unwrap());
    union.dedup();

    let th: Vec<f64> = union
        .iter()
        .map(|&x| interp_curve(&theory.x, &theory.rho, x))
        .collect();
    let em: Vec<f64> = union.iter().map(|&x| interp_curve(&ex, &ey, x)).collect();

    // cumulative trapezoid CDFs on the union grid
    let mut cdf_gap = Vec::with_capacity(union.len());
    let mut acc_th = 0.0;
    let mut acc_em = 0.0;
    cdf_gap.push(0.0_f64);
    for i in 1..union.len() {
        let dx = union[i] - union[i - 1];
        acc_th += 0.5 * dx * (th[i - 1] + th[i]);
        acc_em += 0.5 * dx * (em[i - 1] + em[i]);
        cdf_gap.push((acc_th - acc_em).abs());
    }
    let w1 = trapezoid(&union, &cdf_gap);
    let ks = cdf_gap.iter().cloned().fold(0.0_f64, f64::max);

    let diffs: Vec<f64> = theory
        .x
        .iter()
        .zip(theory.rho.iter())
        .map(|(&x, &r)| (r - interp_curve(&ex, &ey, x)).abs())
        .collect();
    let l1 = trapezoid(&theory.x, &diffs);
    let sq: Vec<f64> = diffs.iter().map(|d| d * d).collect();
    let l2 = trapezoid(&theory.x, &sq).sqrt();
    let linf = diffs.iter().cloned().fold(0.0_f64, f64::max);

    Ok(SpectrumDistance {
        w1,
        ks,
        l1,
        l2,
        linf,
    })
}

/// Evaluation grid calibrated to an empirical spectrum:
/// `x_max = max(1.5 max_eig, 10)` on `[0.01, x_max]` with
/// `max(400, floor(40 x_max))` points.
pub fn calibrate_grid(spec: &EmpiricalSpectrum, eta: f64) -> Result<SpectralGrid> {
    if spec.eigenvalues.is_empty() {
        return Err(SpectralError::InvalidInput("empty eigenvalue pool".into()));
    }
    let x_max = (1.5 * spec.max_eigenvalue()).max(10.0);
    let points = 400.max((40.0 * x_max).floor() as usize);
    SpectralGrid::uniform(0.01, x_max, points, eta)
}

/// Writes the `sample,layer_count,eigenvalue` CSV dump.
pub fn write_eigenvalue_csv<W: IoWrite>(
    spec: &EmpiricalSpectrum,
    layer_count: usize,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "layer_count", "eigenvalue"])?;
    for (s, vals) in spec.by_sample.iter().enumerate() {
        for v in vals {
            w.write_record([&format!("{s}"), &format!("{layer_count}"), &format!("{v}")])?;
        }
    }
    w.flush().map_err(SpectralError::from)?;
    Ok(())
}

/// Metrics JSON with run provenance.
pub fn metrics_json(d: &SpectrumDistance, n_samples: usize, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "W1": d.w1,
        "KS": d.ks,
        "L1": d.l1,
        "L2": d.l2,
        "Linf": d.linf,
        "n_samples": n_samples,
        "seed": seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyson_matrix::TwistMatrix;

    fn identity_layers(q: usize, l: usize, sigma2: f64) -> Vec<LayerSpec> {
        (0..l)
            .map(|_| LayerSpec::new(TwistMatrix::identity(q).unwrap(), sigma2).unwrap())
            .collect()
    }

    #[test]
    fn noiseless_identity_product_has_unit_spectrum() {
        let cfg = MCConfig::new(identity_layers(2, 4, 0.0), 3, 5, 1).unwrap();
        let spec = sample_jacobian_spectrum(&cfg).unwrap();
        assert_eq!(spec.eigenvalues.len(), 5 * 6);
        for &v in &spec.eigenvalues {
            assert!((v - 1.0).abs() < 1e-10, "eigenvalue {v}");
        }
        // all-equal pool collapses to a single full bin
        assert_eq!(spec.histogram.heights.len(), 1);
        let w = spec.histogram.edges[1] - spec.histogram.edges[0];
        assert!((spec.histogram.heights[0] * w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_diagonal_skip_gives_gram_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let twist = TwistMatrix::new(a, crate::dyson_matrix::TwistFamily::Custom).unwrap();
        let layers = vec![LayerSpec::new(twist, 0.0).unwrap()];
        let cfg = MCConfig::new(layers, 2, 3, 9).unwrap();
        let spec = sample_jacobian_spectrum(&cfg).unwrap();
        for vals in &spec.by_sample {
            assert_eq!(vals.len(), 4);
            assert!((vals[0] - 1.0).abs() < 1e-10);
            assert!((vals[1] - 1.0).abs() < 1e-10);
            assert!((vals[2] - 4.0).abs() < 1e-10);
            assert!((vals[3] - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let cfg = MCConfig::new(identity_layers(2, 2, 0.1), 5, 8, 42).unwrap();
        let a = sample_jacobian_spectrum(&cfg).unwrap();
        let b = sample_jacobian_spectrum(&cfg).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = sample_jacobian_spectrum(&cfg2).unwrap();
        assert_ne!(a.eigenvalues, c.eigenvalues);
    }

    #[test]
    fn linear_activation_mask_reproduces_linear_model() {
        // a linear activation has unit derivative, so the masked factor
        // equals the plain noise factor drawn from the same stream
        let layers = identity_layers(2, 2, 0.3);
        let cfg_lin = MCConfig::new(layers.clone(), 4, 4, 7).unwrap();
        let nl = NonlinearConfig {
            activation: ActivationFn::Linear,
            sigma_w2: vec![0.3, 0.3],
            q_signal: vec![1.0, 1.0],
        };
        let cfg_nl = MCConfig::new(layers, 4, 4, 7)
            .unwrap()
            .with_nonlinear(nl)
            .unwrap();
        let a = sample_jacobian_spectrum(&cfg_lin).unwrap();
        let b = sample_jacobian_spectrum(&cfg_nl).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
    }

    #[test]
    fn relu_mask_thins_the_noise() {
        let layers = identity_layers(1, 1, 0.4);
        let nl = NonlinearConfig {
            activation: ActivationFn::Relu,
            sigma_w2: vec![0.8],
            q_signal: vec![1.0],
        };
        // relu keeps roughly half the rows, so sigma_w2 * psi = 0.4
        // matches the linear model's effective strength in distribution
        let cfg = MCConfig::new(layers, 60, 6, 3)
            .unwrap()
            .with_nonlinear(nl)
            .unwrap();
        let spec = sample_jacobian_spectrum(&cfg).unwrap();
        assert!(spec.eigenvalues.iter().all(|v| v.is_finite()));
        // about half the rows are zeroed, so a good fraction of
        // eigenvalues collapse toward the deterministic part
        assert!(spec.max_eigenvalue() < 20.0);
    }

    #[test]
    fn histogram_is_a_unit_mass_density() {
        let cfg = MCConfig::new(identity_layers(1, 1, 1.0), 80, 4, 5).unwrap();
        let spec = sample_jacobian_spectrum(&cfg).unwrap();
        let h = &spec.histogram;
        let mass: f64 = h
            .heights
            .iter()
            .enumerate()
            .map(|(i, &ht)| ht * (h.edges[i + 1] - h.edges[i]))
            .sum();
        assert!((mass - 1.0).abs() < 1e-12, "mass {mass}");
        assert!(h.heights.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn custom_edges_bin_all_in_range_mass() {
        let spec = EmpiricalSpectrum::from_pooled(vec![0.5, 1.5, 2.5, 3.5], 1).unwrap();
        let d = empirical_density(&spec, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.x, vec![0.0, 0.5, 1.5, 2.5, 3.5, 4.0]);
        for &r in &d.rho {
            assert!((r - 0.25).abs() < 1e-12);
        }
        assert!((trapezoid(&d.x, &d.rho) - 1.0).abs() < 1e-12);
        assert!(empirical_density(&spec, &[5.0, 6.0]).is_err());
        assert!(empirical_density(&spec, &[1.0, 1.0]).is_err());
    }

    fn mp_theory_density() -> SpectralDensity {
        let n = 4000;
        let xs: Vec<f64> = (0..n)
            .map(|i| 1e-4 + (4.0 - 2e-4) * i as f64 / (n - 1) as f64)
            .collect();
        let rho: Vec<f64> = xs
            .iter()
            .map(|&x| ((4.0 - x) / x).max(0.0).sqrt() / (2.0 * std::f64::consts::PI))
            .collect();
        let integral = trapezoid(&xs, &rho);
        SpectralDensity {
            x: xs,
            rho: rho.iter().map(|r| r / integral).collect(),
            domain: Domain::Eigenvalue,
            eta: 0.0,
            integral,
            clipped_mass: 0.0,
        }
    }

    #[test]
    fn unit_noise_spectrum_matches_the_quarter_law() {
        // eigenvalue density of pure unit noise follows the closed form
        // sqrt((4 - x)/x)/(2 pi) on (0, 4]
        let layers = vec![LayerSpec::scalar(0.0, 1.0).unwrap()];
        let cfg = MCConfig::new(layers, 400, 3, 11).unwrap();
        let spec = sample_jacobian_spectrum(&cfg).unwrap();
        let theory = mp_theory_density();
        let d = compare_metrics(&theory, &spec).unwrap();
        let bound = 3.0 / (spec.eigenvalues.len() as f64).sqrt();
        assert!(d.ks <= bound, "KS {} above {bound}", d.ks);
        assert!(d.w1 < 0.05, "W1 {}", d.w1);
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let spec =
            EmpiricalSpectrum::from_pooled(vec![0.1, 0.4, 0.4, 0.7, 1.1, 1.4, 2.0, 2.2], 2)
                .unwrap();
        let theory = empirical_density(&spec, &spec.histogram.edges).unwrap();
        let d = compare_metrics(&theory, &spec).unwrap();
        assert_eq!(d.w1, 0.0);
        assert_eq!(d.ks, 0.0);
        assert_eq!(d.l1, 0.0);
        assert_eq!(d.l2, 0.0);
        assert_eq!(d.linf, 0.0);
    }

    #[test]
    fn transport_distance_between_separated_masses_is_their_gap() {
        let gap = 3.0;
        let spread = 1e-3;
        let near_zero = EmpiricalSpectrum::from_pooled(
            vec![0.0, spread / 2.0, spread],
            1,
        )
        .unwrap();
        let theory = empirical_density(&near_zero, &near_zero.histogram.edges).unwrap();
        let shifted = EmpiricalSpectrum::from_pooled(
            vec![gap, gap + spread / 2.0, gap + spread],
            1,
        )
        .unwrap();
        let d = compare_metrics(&theory, &shifted).unwrap();
        assert!((d.w1 - gap).abs() < 0.01, "W1 {}", d.w1);
    }

    #[test]
    fn wasserstein_improves_as_replication_doubles() {
        let theory = mp_theory_density();
        let mut medians = Vec::new();
        for p in [50usize, 100] {
            let mut w1s: Vec<f64> = (0..5)
                .map(|seed| {
                    let layers = vec![LayerSpec::scalar(0.0, 1.0).unwrap()];
                    let cfg = MCConfig::new(layers, p, 12, seed).unwrap();
                    let spec = sample_jacobian_spectrum(&cfg).unwrap();
                    compare_metrics(&theory, &spec).unwrap().w1
                })
                .collect();
            w1s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(w1s[2]);
        }
        assert!(
            medians[1] < medians[0],
            "W1 medians did not improve: {medians:?}"
        );
    }

    #[test]
    fn grid_calibration_follows_the_panel_rule() {
        let cases = [
            (2.0, 10.0, 400usize),
            (20.0, 30.0, 1200),
            (6.8, 10.2, 408),
        ];
        for (max_eig, x_max, points) in cases {
            let spec = EmpiricalSpectrum::from_pooled(vec![0.5, max_eig], 1).unwrap();
            let grid = calibrate_grid(&spec, 0.02).unwrap();
            let got_max = grid.points.last().unwrap().re;
            assert!(
                (got_max - x_max).abs() < 1e-9,
                "max eig {max_eig}: x_max {got_max}"
            );
            assert_eq!(grid.len(), points, "max eig {max_eig}");
            assert!((grid.points[0].re - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn eigenvalue_dump_schema_is_stable() {
        let cfg = MCConfig::new(identity_layers(1, 2, 0.0), 2, 2, 0).unwrap();
        let spec = sample_jacobian_spectrum(&cfg).unwrap();
        let mut buf = Vec::new();
        write_eigenvalue_csv(&spec, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sample,layer_count,eigenvalue");
        assert_eq!(lines.next().unwrap(), "0,2,1");
        assert_eq!(text.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn config_guards_reject_bad_shapes() {
        assert!(MCConfig::new(identity_layers(2, 1, 0.1), 1001, 1, 0).is_err());
        assert!(MCConfig::new(identity_layers(2, 1, 0.1), 0, 1, 0).is_err());
        assert!(MCConfig::new(identity_layers(2, 1, 0.1), 5, 0, 0).is_err());
        assert!(MCConfig::new(vec![], 5, 1, 0).is_err());
        let nl = NonlinearConfig {
            activation: ActivationFn::Relu,
            sigma_w2: vec![0.1],
            q_signal: vec![1.0, 1.0],
        };
        assert!(MCConfig::new(identity_layers(1, 2, 0.1), 5, 1, 0)
            .unwrap()
            .with_nonlinear(nl)
            .is_err());
    }

    #[test]
    fn metrics_json_has_the_pinned_keys() {
        let d = SpectrumDistance {
            w1: 0.01,
            ks: 0.02,
            l1: 0.03,
            l2: 0.04,
            linf: 0.05,
        };
        let j = metrics_json(&d, 300, 42);
        for key in ["W1", "KS", "L1", "L2", "Linf", "n_samples", "seed"] {
            assert!(j.get(key).is_some(), "missing {key}");
        }
        assert_eq!(j["n_samples"], 300);
    }
}
