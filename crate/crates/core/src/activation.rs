//! Activation statistics and depthwise signal propagation.
//!
//! For a pre-activation variance `v`, the three Gaussian moments
//!
//! * `psi(v)  = E[phi'(sqrt(v) Z)^2]`
//! * `kappa(v) = E[phi(sqrt(v) Z)^2]`
//! * `phi_mean(v) = E[phi(sqrt(v) Z)]`
//!
//! with `Z ~ N(0,1)` drive the layerwise recursion
//!
//! ```text
//! q^l = sigma_w2[l] * (v^{l-1} + e^{l-1})
//! e^l = psi(q^l)
//! v^l = kappa(q^l) + (|A_q^l|_F^2 / q) * v^{l-1}
//! ```
//!
//! initialized with `e^0 = psi(sigma_w2[0] * v0)`. The per-layer noise
//! strength fed to the spectral solvers is `sigma2[l] = sigma_w2[l] *
//! psi(q^l)`; the linearized Jacobian of the network sees exactly that
//! gain. Moments are computed with probabilists' Gauss-Hermite quadrature
//! (default 100 nodes), which is exact for polynomial activations. For the
//! saturating activations the accuracy is set by the distance of the
//! integrand's complex poles from the real axis, `pi/(2 sqrt(v))` for
//! tanh: near machine precision for `v <~ 1`, degrading to roughly 1e-4
//! by `v = 5`. The recursion operates at `v` well below 1 in the regimes
//! this library targets.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectralError};

/// Pointwise activation functions with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    LeakyRelu { slope: f64 },
}

impl ActivationFn {
    /// phi(x)
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ActivationFn::Linear => x,
            ActivationFn::Relu => x.max(0.0),
            ActivationFn::Tanh => x.tanh(),
            ActivationFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationFn::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// phi'(x). The kink of the rectifiers is assigned its right limit,
    /// so `phi'(0)` is deterministic.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ActivationFn::Linear => 1.0,
            ActivationFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationFn::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationFn::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            ActivationFn::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let ActivationFn::LeakyRelu { slope } = self {
            if !slope.is_finite() {
                return Err(SpectralError::InvalidInput(
                    "leaky relu slope must be finite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Gaussian moments of an activation at pre-activation variance `v`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Moments {
    /// E[phi'(sqrt(v) Z)^2]
    pub psi: f64,
    /// E[phi(sqrt(v) Z)^2]
    pub kappa: f64,
    /// E[phi(sqrt(v) Z)]
    pub phi_mean: f64,
}

/// Probabilists' Gauss-Hermite rule: nodes and probability weights such
/// that `E[f(Z)] = sum w_i f(x_i)` for `Z ~ N(0,1)`.
///
/// Built by the Golub-Welsch construction: the nodes are the eigenvalues
/// of the symmetric tridiagonal Jacobi matrix with zero diagonal and
/// off-diagonal `sqrt(k)`, and each weight is the squared first component
/// of the corresponding normalized eigenvector. Weights sum to 1 exactly
/// because the eigenvector matrix is orthogonal.
pub fn gauss_hermite_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(SpectralError::InvalidInput(
            "quadrature rule needs at least one node".into(),
        ));
    }
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], w * w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(pairs.into_iter().unzip())
}

/// Number of quadrature nodes used unless a caller overrides it.
pub const DEFAULT_GH_NODES: usize = 100;

/// Computes the three Gaussian moments of `act` at variance `v` with an
/// `n`-node Gauss-Hermite rule.
pub fn gauss_hermite_moments(act: ActivationFn, v: f64, n: usize) -> Result<Moments> {
    act.validate()?;
    if !v.is_finite() || v < 0.0 {
        return Err(SpectralError::InvalidInput(format!(
            "pre-activation variance must be nonnegative, got {v}"
        )));
    }
    let (nodes, weights) = gauss_hermite_rule(n)?;
    let sv = v.sqrt();
    let mut psi = 0.0;
    let mut kappa = 0.0;
    let mut phi_mean = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        let arg = sv * x;
        let d = act.derivative(arg);
        let f = act.apply(arg);
        psi += w * d * d;
        kappa += w * f * f;
        phi_mean += w * f;
    }
    Ok(Moments {
        psi,
        kappa,
        phi_mean,
    })
}

/// Per-layer signal statistics produced by [`propagate_signal`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalState {
    /// Pre-activation variances `q^l`, one per layer.
    pub q_l: Vec<f64>,
    /// Unscaled derivative moments `psi(q^l)`, one per layer.
    pub sigma2_l: Vec<f64>,
    /// Post-layer signal variances `v^l`, one per layer.
    pub v_l: Vec<f64>,
    /// Effective per-layer noise strengths `sigma_w2[l] * psi(q^l)` that
    /// parameterize the Jacobian spectrum.
    pub c2: Vec<f64>,
}

impl SignalState {
    /// Total effective noise budget `sum_l c2[l]`.
    pub fn total_c2(&self) -> f64 {
        self.c2.iter().sum()
    }

    /// Distance from the dynamical-isometry point `sum_l c2[l] = 1/2`.
    pub fn criticality_gap(&self) -> f64 {
        (self.total_c2() - 0.5).abs()
    }
}

/// Variance threshold treated as a blow-up of the recursion.
const DIVERGENCE_GUARD: f64 = 1e12;

fn per_layer<'a, T>(values: &'a [T], l: usize, name: &str) -> Result<impl Fn(usize) -> &'a T> {
    if values.len() != l && values.len() != 1 {
        return Err(SpectralError::InvalidInput(format!(
            "{name} must have length {l} or 1, got {}",
            values.len()
        )));
    }
    let broadcast = values.len() == 1;
    Ok(move |i: usize| if broadcast { &values[0] } else { &values[i] })
}

/// Runs the layerwise variance recursion for `l` layers.
///
/// `sigma_w2` and `a_q` give per-layer weight variances and skip matrices;
/// either may have length 1 to mean "same for every layer". The skip term
/// enters only through `|A_q|_F^2 / q`, the average squared singular value
/// of the structured skip.
pub fn propagate_signal(
    l: usize,
    sigma_w2: &[f64],
    a_q: &[DMatrix<f64>],
    v0: f64,
    act: ActivationFn,
) -> Result<SignalState> {
    act.validate()?;
    if l == 0 {
        return Err(SpectralError::InvalidInput("depth must be at least 1".into()));
    }
    if !v0.is_finite() || v0 < 0.0 {
        return Err(SpectralError::InvalidInput(format!(
            "initial variance must be nonnegative, got {v0}"
        )));
    }
    let sw = per_layer(sigma_w2, l, "sigma_w2")?;
    let aq = per_layer(a_q, l, "a_q")?;
    for i in 0..l {
        let s = *sw(i);
        if !s.is_finite() || s < 0.0 {
            return Err(SpectralError::InvalidInput(format!(
                "sigma_w2[{i}] must be nonnegative, got {s}"
            )));
        }
        let m = aq(i);
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(SpectralError::InvalidInput(format!(
                "a_q[{i}] must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }

    let mut q_l = Vec::with_capacity(l);
    let mut sigma2_l = Vec::with_capacity(l);
    let mut v_l = Vec::with_capacity(l);
    let mut c2 = Vec::with_capacity(l);

    let mut v_prev = v0;
    let mut e_prev = gauss_hermite_moments(act, sw(0) * v0, DEFAULT_GH_NODES)?.psi;
    for i in 0..l {
        let q = sw(i) * (v_prev + e_prev);
        if !q.is_finite() || q > DIVERGENCE_GUARD {
            return Err(SpectralError::Divergence {
                layer: i + 1,
                value: q,
            });
        }
        let m = gauss_hermite_moments(act, q, DEFAULT_GH_NODES)?;
        let a = aq(i);
        let skip_gain = a.norm_squared() / a.nrows() as f64;
        let v = m.kappa + skip_gain * v_prev;
        if !v.is_finite() || v > DIVERGENCE_GUARD {
            return Err(SpectralError::Divergence {
                layer: i + 1,
                value: v,
            });
        }
        q_l.push(q);
        sigma2_l.push(m.psi);
        c2.push(sw(i) * m.psi);
        v_l.push(v);
        v_prev = v;
        e_prev = m.psi;
    }

    Ok(SignalState {
        q_l,
        sigma2_l,
        v_l,
        c2,
    })
}

/// Fixed-budget preset: splits a total effective noise budget evenly over
/// `l` layers, bypassing the activation recursion. This is the
/// configuration the validation panel uses.
pub fn fixed_budget(c2_total: f64, l: usize) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(SpectralError::InvalidInput("depth must be at least 1".into()));
    }
    if !c2_total.is_finite() || c2_total < 0.0 {
        return Err(SpectralError::InvalidInput(format!(
            "noise budget must be nonnegative, got {c2_total}"
        )));
    }
    Ok(vec![c2_total / l as f64; l])
}
