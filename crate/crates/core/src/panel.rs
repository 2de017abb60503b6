//! The reference validation panel: a 3 x 4 grid of depth x skip-family
//! cells, each scored theory against Monte Carlo.
//!
//! Every cell fixes `q = 4` sectors of width `p = 25` and a total noise
//! budget split evenly across the stack, then varies the skip family
//! (identity, doubly stochastic, orthogonal, Gaussian) and the depth
//! (1, 2, 10). A cell run samples finite-size Jacobian spectra,
//! calibrates the evaluation grid to what was sampled, solves the theory
//! resolvent on that grid, inverts it into a density, and scores the two
//! sides with transport and pointwise metrics. Cells are independent and
//! failures stay contained: the panel always reports all twelve slots.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{solve_green_grid, ComposeOptions, LayerSpec, SolverMethod};
use crate::density::{stieltjes_invert, to_singular_density, SpectralDensity};
use crate::dyson_matrix::{TwistFamily, TwistMatrix};
use crate::error::{Result, SpectralError};
use crate::monte_carlo::{
    calibrate_grid, compare_metrics, sample_jacobian_spectrum, EmpiricalSpectrum, MCConfig,
    SpectrumDistance,
};
use crate::numerics::interpolate_unconverged;
use crate::stalling::stall_fraction;

/// Sector count of the reference panel.
pub const PANEL_Q: usize = 4;
/// Sector width of the reference panel.
pub const PANEL_P: usize = 25;
/// Total noise budget of a panel stack; each layer gets `budget / depth`.
pub const PANEL_BUDGET: f64 = 0.05;
/// Broadening height of the panel's theory grids.
pub const PANEL_ETA: f64 = 0.02;
/// Depths of the panel rows.
pub const PANEL_DEPTHS: [usize; 3] = [1, 2, 10];
/// Skip families of the panel columns.
pub const PANEL_FAMILIES: [TwistFamily; 4] = [
    TwistFamily::Identity,
    TwistFamily::Bistochastic,
    TwistFamily::Orthogonal,
    TwistFamily::Gaussian,
];

/// Monte Carlo replication presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplesPreset {
    /// Depth-graded counts: 300 at depth 1, 200 at depth 2, 100 deeper.
    Fast,
    /// Flat 500 replications per cell.
    Figure,
}

impl SamplesPreset {
    /// Replication count for a cell at the given depth.
    pub fn samples(&self, depth: usize) -> usize {
        match self {
            SamplesPreset::Fast => match depth {
                1 => 300,
                2 => 200,
                _ => 100,
            },
            SamplesPreset::Figure => 500,
        }
    }
}

/// Deterministic skip matrix for a family preset.
///
/// The doubly stochastic preset balances seeded Gaussian logits, the
/// orthogonal preset orthonormalizes a seeded Gaussian matrix, and the
/// Gaussian preset draws entries at the `1/q` variance scale; custom
/// twists have no preset and must be supplied directly.
pub fn preset_twist(family: TwistFamily, q: usize, seed: u64) -> Result<TwistMatrix> {
    match family {
        TwistFamily::Identity => TwistMatrix::identity(q),
        TwistFamily::Bistochastic => TwistMatrix::bistochastic_seeded(q, seed),
        TwistFamily::Orthogonal => TwistMatrix::orthogonal_seeded(q, seed),
        TwistFamily::Gaussian => TwistMatrix::gaussian_seeded(q, seed),
        TwistFamily::Custom => Err(SpectralError::InvalidInput(
            "the custom family has no preset; construct the twist matrix directly".into(),
        )),
    }
}

/// Parameters of one panel cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelCellSpec {
    pub family: TwistFamily,
    pub depth: usize,
    pub q: usize,
    pub p: usize,
    /// Total noise budget; each layer receives `budget / depth`.
    pub budget: f64,
    pub eta: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl PanelCellSpec {
    /// A cell of the reference panel at the given slot.
    pub fn panel_default(
        family: TwistFamily,
        depth: usize,
        preset: SamplesPreset,
        seed: u64,
    ) -> Self {
        PanelCellSpec {
            family,
            depth,
            q: PANEL_Q,
            p: PANEL_P,
            budget: PANEL_BUDGET,
            eta: PANEL_ETA,
            n_samples: preset.samples(depth),
            seed,
        }
    }

    /// Per-layer noise variance.
    pub fn sigma2(&self) -> f64 {
        self.budget / self.depth as f64
    }

    /// The cell's layer stack: `depth` copies of one seeded layer.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.depth == 0 {
            return Err(SpectralError::InvalidInput(
                "panel cell depth must be at least 1".into(),
            ));
        }
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(SpectralError::InvalidInput(format!(
                "noise budget must be positive and finite, got {}",
                self.budget
            )));
        }
        let twist = preset_twist(self.family, self.q, self.seed)?;
        let layer = LayerSpec::new(twist, self.sigma2())?;
        Ok(vec![layer; self.depth])
    }

    /// Short slot name, e.g. `orthogonal-L10`.
    pub fn label(&self) -> String {
        let family = match self.family {
            TwistFamily::Identity => "identity",
            TwistFamily::Bistochastic => "bistochastic",
            TwistFamily::Orthogonal => "orthogonal",
            TwistFamily::Gaussian => "gaussian",
            TwistFamily::Custom => "custom",
        };
        format!("{family}-L{}", self.depth)
    }
}

/// A solved and scored panel cell.
#[derive(Debug, Clone)]
pub struct PanelCell {
    pub family: TwistFamily,
    pub depth: usize,
    /// Theory density in the eigenvalue domain, on the calibrated grid.
    pub theory: SpectralDensity,
    /// The same density pushed to the singular-value domain.
    pub theory_sv: SpectralDensity,
    /// Pooled finite-size spectrum the theory is scored against.
    pub mc: EmpiricalSpectrum,
    /// Theory-vs-sampled distances in the eigenvalue domain.
    pub metrics: SpectrumDistance,
    /// The solver route that produced the theory curve.
    pub method: SolverMethod,
    /// Mean solver iterations per grid point.
    pub avg_iterations: f64,
    /// Grid points filled by interpolation instead of a converged solve.
    pub interpolated: usize,
}

impl PanelCell {
    /// Mass of the singular-value theory density below `cut`, the
    /// fraction of directions an optimizer with that resolution misses.
    pub fn singular_mass_below(&self, cut: f64) -> Result<f64> {
        Ok(stall_fraction(&self.theory_sv, cut)?.fraction)
    }
}

/// Runs one cell end to end: sample, calibrate, solve, invert, score.
pub fn run_panel_cell(spec: &PanelCellSpec, jobs: usize) -> Result<PanelCell> {
    let layers = spec.layers()?;
    let mc_cfg = MCConfig::new(layers.clone(), spec.p, spec.n_samples, spec.seed)?;
    let mc = sample_jacobian_spectrum(&mc_cfg)?;
    let grid = calibrate_grid(&mc, spec.eta)?;
    let solved = solve_green_grid(
        &grid,
        &layers,
        &ComposeOptions {
            method: SolverMethod::Auto,
            jobs,
        },
    )?;
    let samples = interpolate_unconverged(&solved.samples)?;
    let interpolated = samples.iter().filter(|s| s.interpolated).count();
    let theory = stieltjes_invert(&samples, spec.eta)?;
    let theory_sv = to_singular_density(&theory)?;
    let metrics = compare_metrics(&theory, &mc)?;
    let avg_iterations = solved.diagnostics.total_iterations as f64 / grid.len().max(1) as f64;
    Ok(PanelCell {
        family: spec.family,
        depth: spec.depth,
        theory,
        theory_sv,
        mc,
        metrics,
        method: solved.method,
        avg_iterations,
        interpolated,
    })
}

/// One slot of a panel run: its parameters and either the solved cell or
/// the error that stopped it.
#[derive(Debug)]
pub struct PanelOutcome {
    pub spec: PanelCellSpec,
    pub result: Result<PanelCell>,
}

/// All twelve slot parameter sets of the reference panel, family-major.
pub fn panel_specs(preset: SamplesPreset, seed: u64) -> Vec<PanelCellSpec> {
    PANEL_FAMILIES
        .iter()
        .flat_map(|&family| {
            PANEL_DEPTHS
                .iter()
                .map(move |&depth| PanelCellSpec::panel_default(family, depth, preset, seed))
        })
        .collect()
}

/// Runs the full 3 x 4 panel, isolating per-cell failures.
///
/// With `jobs > 1` the cells themselves run in parallel and each cell
/// solves sequentially; the twelve slots are always reported in
/// family-major order regardless of completion order.
pub fn run_panel(preset: SamplesPreset, seed: u64, jobs: usize) -> Vec<PanelOutcome> {
    let specs = panel_specs(preset, seed);
    if jobs > 1 {
        specs
            .into_par_iter()
            .map(|spec| PanelOutcome {
                result: run_panel_cell(&spec, 1),
                spec,
            })
            .collect()
    } else {
        specs
            .into_iter()
            .map(|spec| PanelOutcome {
                result: run_panel_cell(&spec, 1),
                spec,
            })
            .collect()
    }
}
