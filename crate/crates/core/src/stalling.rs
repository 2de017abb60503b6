//! Optimizer and precision cutoffs on the singular-value spectrum.
//!
//! Four independent mechanisms impose a hard floor `sigma*` below which
//! a singular direction receives no useful gradient update: the finite
//! training horizon, Adam's epsilon regularizer, bf16 swamping of small
//! weight updates, and the stochastic-gradient noise floor. The binding
//! cutoff is the largest of the four, and the stalled mass is the
//! fraction of the singular-value density sitting below it.

use serde::{Deserialize, Serialize};

use crate::density::{Domain, SpectralDensity};
use crate::error::{Result, SpectralError};

/// bf16 relative precision, `2^-8`.
pub const U_BF16: f64 = 1.0 / 256.0;

/// Inputs of the four cutoff formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StallParams {
    /// Training steps `T`.
    pub t_steps: f64,
    /// Learning rate `eta`.
    pub eta_lr: f64,
    /// Largest singular value of the Jacobian.
    pub sigma_max: f64,
    /// Curvature constant `C` of the time cutoff.
    pub c_curv: f64,
    /// Adam epsilon.
    pub eps_adam: f64,
    /// Typical loss-gradient component magnitude.
    pub alpha_bar: f64,
    /// Relative precision of the accumulation format.
    pub u_bf16: f64,
    /// Typical weight magnitude.
    pub w_mag: f64,
    /// Largest useful signal-to-noise ratio.
    pub snr_max: f64,
    /// Batch size.
    pub batch_b: f64,
}

impl Default for StallParams {
    fn default() -> Self {
        StallParams {
            t_steps: 1e5,
            eta_lr: 1e-4,
            sigma_max: 1.0,
            c_curv: 1.0,
            eps_adam: 1e-8,
            alpha_bar: 1.0,
            u_bf16: U_BF16,
            w_mag: 1.0,
            snr_max: 1.0,
            batch_b: 256.0,
        }
    }
}

impl StallParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_steps", self.t_steps),
            ("eta_lr", self.eta_lr),
            ("sigma_max", self.sigma_max),
            ("c_curv", self.c_curv),
            ("eps_adam", self.eps_adam),
            ("alpha_bar", self.alpha_bar),
            ("u_bf16", self.u_bf16),
            ("w_mag", self.w_mag),
            ("snr_max", self.snr_max),
            ("batch_b", self.batch_b),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(SpectralError::InvalidInput(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which of the four floors binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffKind {
    Time,
    Adam,
    Bf16,
    Noise,
}

impl std::fmt::Display for CutoffKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CutoffKind::Time => "time",
            CutoffKind::Adam => "adam",
            CutoffKind::Bf16 => "bf16",
            CutoffKind::Noise => "noise",
        };
        f.write_str(s)
    }
}

/// The four cutoffs and their maximum.
#[derive(Debug, Clone, Serialize)]
pub struct Cutoffs {
    pub time: f64,
    pub adam: f64,
    pub bf16: f64,
    pub noise: f64,
    pub binding: f64,
    pub binding_kind: CutoffKind,
}

/// Evaluates the four cutoff formulas:
/// `time = C/(T eta sigma_max)`, `adam = eps/|alpha|`,
/// `bf16 = u |w|/(eta |alpha|)`, `noise = sigma_max/(SNR sqrt(B))`.
pub fn cutoffs(p: &StallParams) -> Result<Cutoffs> {
    p.validate()?;
    let time = p.c_curv / (p.t_steps * p.eta_lr * p.sigma_max);
    let adam = p.eps_adam / p.alpha_bar;
    let bf16 = p.u_bf16 * p.w_mag / (p.eta_lr * p.alpha_bar);
    let noise = p.sigma_max / (p.snr_max * p.batch_b.sqrt());
    let candidates = [
        (CutoffKind::Time, time),
        (CutoffKind::Adam, adam),
        (CutoffKind::Bf16, bf16),
        (CutoffKind::Noise, noise),
    ];
    let (binding_kind, binding) = candidates
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    Ok(Cutoffs {
        time,
        adam,
        bf16,
        noise,
        binding,
        binding_kind,
    })
}

/// Stalled-mass estimate of a singular-value density.
#[derive(Debug, Clone, Serialize)]
pub struct StallFraction {
    /// Mass of the density below the cutoff, clamped to [0, 1].
    pub fraction: f64,
    /// The cutoff fell below the first grid point; the true mass under
    /// it is unresolved and reported as zero.
    pub below_grid: bool,
}

/// Trapezoid mass of `d` on `[grid start, sigma_star]`.
///
/// A cutoff below the grid returns zero with the `below_grid` warning
/// set; a cutoff above the support returns the full (unit) mass.
pub fn stall_fraction(d: &SpectralDensity, sigma_star: f64) -> Result<StallFraction> {
    if d.domain != Domain::SingularValue {
        return Err(SpectralError::InvalidInput(format!(
            "stalled mass needs a singular-value density, got domain {}",
            d.domain
        )));
    }
    if !sigma_star.is_finite() {
        return Err(SpectralError::InvalidInput(format!(
            "cutoff must be finite, got {sigma_star}"
        )));
    }
    if d.x.len() < 2 || d.x.len() != d.rho.len() {
        return Err(SpectralError::InvalidInput(
            "density needs matching grids with at least two points".into(),
        ));
    }
    if d.x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpectralError::InvalidInput(
            "density grid must be strictly increasing".into(),
        ));
    }
    if sigma_star < d.x[0] {
        return Ok(StallFraction {
            fraction: 0.0,
            below_grid: true,
        });
    }
    let mut mass = 0.0;
    for i in 1..d.x.len() {
        let (x0, x1) = (d.x[i - 1], d.x[i]);
        if sigma_star >= x1 {
            mass += 0.5 * (x1 - x0) * (d.rho[i - 1] + d.rho[i]);
        } else {
            // partial cell up to the cutoff
            let t = (sigma_star - x0) / (x1 - x0);
            let rho_cut = d.rho[i - 1] * (1.0 - t) + d.rho[i] * t;
            mass += 0.5 * (sigma_star - x0) * (d.rho[i - 1] + rho_cut);
            break;
        }
    }
    Ok(StallFraction {
        fraction: mass.clamp(0.0, 1.0),
        below_grid: false,
    })
}

/// Full report of the `stall` analysis: the four cutoffs, the binding
/// one, and the stalled mass of the supplied density under it.
pub fn stall_report(p: &StallParams, d: &SpectralDensity) -> Result<serde_json::Value> {
    let c = cutoffs(p)?;
    let f = stall_fraction(d, c.binding)?;
    Ok(serde_json::json!({
        "cutoffs": {
            "time": c.time,
            "adam": c.adam,
            "bf16": c.bf16,
            "noise": c.noise,
        },
        "binding": c.binding,
        "binding_kind": c.binding_kind.to_string(),
        "stall_fraction": f.fraction,
        "below_grid": f.below_grid,
    }))
}
