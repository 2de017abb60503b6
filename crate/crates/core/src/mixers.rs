//! Constrained mixing kernels and their manifold-aware gradients.
//!
//! Three constraint families are supported for the stream-mixing matrices
//! of a residual block:
//!
//! * doubly stochastic, via Sinkhorn balancing in log space with an
//!   implicit-function-theorem backward pass;
//! * orthogonal, via a truncated Cayley iteration on the skew part;
//! * Grassmann projectors `U U^T`, maintained by a momentum descent with
//!   Cayley-style retraction and a QR orthonormality restoration.
//!
//! The module also hosts the residual stream mixer itself
//! ([`mix_forward`]), the deterministic permutation basis used for
//! discrete mixing, and an exhaustive spectral-gap search over
//! permutation-set random walks.

use std::collections::{HashSet, VecDeque};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SpectralError};

/// Which manifold a batch of mixing matrices lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerConstraint {
    DoublyStochastic,
    Orthogonal,
    GrassmannProjector,
}

/// A batch of constrained mixing matrices with per-matrix constraint
/// deviations (max-norm distance from the exact manifold).
#[derive(Debug, Clone)]
pub struct MixerTensors {
    pub matrices: Vec<DMatrix<f64>>,
    pub constraint: MixerConstraint,
    pub deviation: Vec<f64>,
}

/// Logit clamp applied before Sinkhorn balancing.
const LOGIT_CLAMP: f64 = 10.0;

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-space Sinkhorn balancing of one logit matrix for `t` full rounds
/// (one row normalization plus one column normalization per round).
/// Entries are clamped to `[-10, 10]` first.
pub fn sinkhorn_rounds(logits: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let n = logits.nrows();
    let mut lm = logits.map(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
    let mut buf = vec![0.0_f64; lm.ncols().max(n)];
    for _ in 0..t {
        for i in 0..n {
            for (j, b) in buf.iter_mut().enumerate().take(lm.ncols()) {
                *b = lm[(i, j)];
            }
            let lse = log_sum_exp(&buf[..lm.ncols()]);
            for j in 0..lm.ncols() {
                lm[(i, j)] -= lse;
            }
        }
        for j in 0..lm.ncols() {
            for (i, b) in buf.iter_mut().enumerate().take(n) {
                *b = lm[(i, j)];
            }
            let lse = log_sum_exp(&buf[..n]);
            for i in 0..n {
                lm[(i, j)] -= lse;
            }
        }
    }
    lm.map(f64::exp)
}

fn doubly_stochastic_deviation(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        let row: f64 = p.row(i).iter().sum();
        dev = dev.max((row - 1.0).abs());
    }
    for j in 0..p.ncols() {
        let col: f64 = p.column(j).iter().sum();
        dev = dev.max((col - 1.0).abs());
    }
    dev
}

/// Default number of Sinkhorn rounds in the forward pass.
pub const SINKHORN_ROUNDS: usize = 20;

/// Projects a batch of logit matrices onto the doubly stochastic manifold
/// with `t` Sinkhorn rounds each.
pub fn sinkhorn_project(logits: &[DMatrix<f64>], t: usize) -> Result<MixerTensors> {
    if logits.is_empty() {
        return Err(SpectralError::InvalidInput("empty batch".into()));
    }
    let mut matrices = Vec::with_capacity(logits.len());
    let mut deviation = Vec::with_capacity(logits.len());
    for x in logits {
        if x.nrows() != x.ncols() || x.nrows() == 0 {
            return Err(SpectralError::InvalidInput(format!(
                "logit matrices must be square and nonempty, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidInput(
                "non-finite logit entry".into(),
            ));
        }
        let p = sinkhorn_rounds(x, t);
        deviation.push(doubly_stochastic_deviation(&p));
        matrices.push(p);
    }
    Ok(MixerTensors {
        matrices,
        constraint: MixerConstraint::DoublyStochastic,
        deviation,
    })
}

/// Published backward-iteration schedule at tolerance 0.01, indexed by n.
const GS_SCHEDULE: [(usize, usize); 6] = [(2, 7), (3, 12), (4, 16), (5, 21), (6, 26), (8, 37)];

/// Number of backward Gauss-Seidel rounds needed to reach relative
/// residual `eps` for an n x n doubly stochastic matrix.
///
/// At the reference tolerance 0.01 the published per-size schedule is
/// returned verbatim; away from it the contraction-rate estimate
/// `ceil(ln eps / ln(1 - 1/n))` is used. Either way the result is clamped
/// to `[10, 50]`.
pub fn gs_iterations(n: usize, eps: f64) -> Result<usize> {
    if n < 2 {
        return Err(SpectralError::InvalidInput(format!(
            "backward schedule needs n >= 2, got {n}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SpectralError::InvalidInput(format!(
            "tolerance must lie in (0, 1), got {eps}"
        )));
    }
    let raw = if (eps - 0.01).abs() < 1e-15 {
        match GS_SCHEDULE.iter().find(|(nn, _)| *nn == n) {
            Some((_, k)) => *k,
            None => (eps.ln() / (1.0 - 1.0 / n as f64).ln()).ceil() as usize,
        }
    } else {
        (eps.ln() / (1.0 - 1.0 / n as f64).ln()).ceil() as usize
    };
    Ok(raw.clamp(10, 50))
}

/// Implicit-function-theorem backward pass through the Sinkhorn
/// projection.
///
/// Given the projected matrix `P` and the upstream gradient `G = dL/dP`,
/// the gradient with respect to the pre-projection logits is
/// `P o (G - u 1^T - 1 v^T)` where `(u, v)` solve the coupled system
/// `u + P v = (P o G) 1`, `P^T u + v = (P o G)^T 1`. The solve runs `k`
/// rounds of Gauss-Seidel; [`gs_iterations`] supplies an adequate `k`.
/// Entries of `P` are never clamped: wherever `P_ij` is tiny the factor
/// `P_ij` itself drives the gradient entry to zero.
pub fn sinkhorn_backward_implicit(
    p: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
    k: usize,
) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if p.ncols() != n || upstream.shape() != p.shape() {
        return Err(SpectralError::InvalidInput(format!(
            "P must be square and match the upstream gradient; got {:?} vs {:?}",
            p.shape(),
            upstream.shape()
        )));
    }
    if k == 0 {
        return Err(SpectralError::InvalidInput(
            "backward pass needs at least one round".into(),
        ));
    }
    let dev = doubly_stochastic_deviation(p);
    if dev > 1e-4 {
        return Err(SpectralError::InvalidInput(format!(
            "P is not doubly stochastic (deviation {dev:.2e} > 1e-4)"
        )));
    }

    let h = p.component_mul(upstream);
    let h_row = DVector::from_fn(n, |i, _| h.row(i).iter().sum::<f64>());
    let h_col = DVector::from_fn(n, |j, _| h.column(j).iter().sum::<f64>());

    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    for _ in 0..k {
        u = &h_row - p * &v;
        v = &h_col - p.transpose() * &u;
    }

    let mut grad = h;
    for i in 0..n {
        for j in 0..n {
            grad[(i, j)] -= (u[i] + v[j]) * p[(i, j)];
        }
    }
    Ok(grad)
}

/// Exact implicit gradient via a minimal-norm linear solve of the coupled
/// system, used as an oracle for the iterative backward pass. The system
/// is singular along the gauge direction `(u + c, v - c)`, which leaves
/// the gradient unchanged, so the least-squares solution is adequate.
pub fn sinkhorn_backward_exact(
    p: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if p.ncols() != n || upstream.shape() != p.shape() {
        return Err(SpectralError::InvalidInput(
            "P must be square and match the upstream gradient".into(),
        ));
    }
    let h = p.component_mul(upstream);
    let h_row = DVector::from_fn(n, |i, _| h.row(i).iter().sum::<f64>());
    let h_col = DVector::from_fn(n, |j, _| h.column(j).iter().sum::<f64>());

    let mut sys = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        sys[(i, i)] = 1.0;
        sys[(n + i, n + i)] = 1.0;
        for j in 0..n {
            sys[(i, n + j)] = p[(i, j)];
            sys[(n + j, i)] = p[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(2 * n);
    for i in 0..n {
        rhs[i] = h_row[i];
        rhs[n + i] = h_col[i];
    }
    let svd = sys.svd(true, true);
    let uv = svd
        .solve(&rhs, 1e-10)
        .map_err(|e| SpectralError::NumericalFailure(format!("least-squares solve failed: {e}")))?;

    let mut grad = h;
    for i in 0..n {
        for j in 0..n {
            grad[(i, j)] -= (uv[i] + uv[n + j]) * p[(i, j)];
        }
    }
    Ok(grad)
}

/// Finite-difference gradient of `L(X) = sum upstream o sinkhorn(X)`
/// through the truncated forward pass, central differences with step `h`.
pub fn sinkhorn_fd_gradient(
    logits: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
    t: usize,
    h: f64,
) -> DMatrix<f64> {
    let loss = |x: &DMatrix<f64>| -> f64 {
        sinkhorn_rounds(x, t).component_mul(upstream).sum()
    };
    let n = logits.nrows();
    let m = logits.ncols();
    let mut grad = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut xp = logits.clone();
            let mut xm = logits.clone();
            xp[(i, j)] += h;
            xm[(i, j)] -= h;
            grad[(i, j)] = (loss(&xp) - loss(&xm)) / (2.0 * h);
        }
    }
    grad
}

/// Default Cayley step size and iteration count.
pub const CAYLEY_ALPHA: f64 = 0.1;
pub const CAYLEY_ROUNDS: usize = 2;

fn cayley_iterate(h: &DMatrix<f64>, alpha: f64, s: usize) -> DMatrix<f64> {
    let n = h.nrows();
    let w = h - h.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut y = &eye + &w * alpha;
    for _ in 0..s {
        y = &eye + (&w * (alpha / 2.0)) * (&eye + &y);
    }
    y
}

/// Projects a batch of parameter matrices onto (near-)orthogonal mixers
/// with `s` rounds of the truncated Cayley iteration at step `alpha`.
pub fn cayley_project(params: &[DMatrix<f64>], alpha: f64, s: usize) -> Result<MixerTensors> {
    if params.is_empty() {
        return Err(SpectralError::InvalidInput("empty batch".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SpectralError::InvalidInput(format!(
            "cayley step must be positive, got {alpha}"
        )));
    }
    let mut matrices = Vec::with_capacity(params.len());
    let mut deviation = Vec::with_capacity(params.len());
    for h in params {
        if h.nrows() != h.ncols() || h.nrows() == 0 {
            return Err(SpectralError::InvalidInput(
                "cayley parameters must be square and nonempty".into(),
            ));
        }
        let y = cayley_iterate(h, alpha, s);
        let n = y.nrows();
        let dev = (y.transpose() * &y - DMatrix::<f64>::identity(n, n))
            .abs()
            .max();
        matrices.push(y);
        deviation.push(dev);
    }
    Ok(MixerTensors {
        matrices,
        constraint: MixerConstraint::Orthogonal,
        deviation,
    })
}

/// Fixed point of the truncated Cayley iteration:
/// `Y = (I - (alpha/2) W)^{-1} (I + (alpha/2) W)` with `W = H - H^T`,
/// an exactly orthogonal matrix. This is what the iteration converges to
/// as `s` grows.
pub fn cayley_closed_form(h: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n || n == 0 {
        return Err(SpectralError::InvalidInput(
            "cayley parameters must be square and nonempty".into(),
        ));
    }
    let w = h - h.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = &eye - &w * (alpha / 2.0);
    let rhs = &eye + &w * (alpha / 2.0);
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| SpectralError::NumericalFailure("singular cayley system".into()))
}

/// Hyperparameters of the Grassmann momentum descent.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GrassmannHyper {
    /// Retraction step size.
    pub alpha: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator floor of the adaptive rescaling.
    pub eps: f64,
    /// Cayley refinement rounds inside the retraction.
    pub s: usize,
    /// Whether to apply the bias-corrected adaptive rescaling.
    pub adaptive: bool,
}

impl Default for GrassmannHyper {
    fn default() -> Self {
        GrassmannHyper {
            alpha: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            s: 2,
            adaptive: false,
        }
    }
}

/// State of the Grassmann descent: the orthonormal frame plus moment
/// accumulators.
#[derive(Debug, Clone)]
pub struct GrassmannState {
    /// n x p orthonormal frame; the mixer is the projector `U U^T`.
    pub u: DMatrix<f64>,
    /// First moment.
    pub m: DMatrix<f64>,
    /// Second moment (elementwise).
    pub v: DMatrix<f64>,
    /// Step counter.
    pub t: u64,
    pub hyper: GrassmannHyper,
}

fn orthonormality_deviation(u: &DMatrix<f64>) -> f64 {
    let p = u.ncols();
    (u.transpose() * u - DMatrix::<f64>::identity(p, p))
        .abs()
        .max()
}

impl GrassmannState {
    /// Wraps an existing orthonormal frame.
    pub fn new(u: DMatrix<f64>, hyper: GrassmannHyper) -> Result<Self> {
        let (n, p) = u.shape();
        if p == 0 || p > n {
            return Err(SpectralError::InvalidInput(format!(
                "frame must be n x p with 1 <= p <= n, got {n}x{p}"
            )));
        }
        let dev = orthonormality_deviation(&u);
        if dev > 1e-8 {
            return Err(SpectralError::InvalidInput(format!(
                "frame is not orthonormal (deviation {dev:.2e})"
            )));
        }
        let m = DMatrix::zeros(n, p);
        let v = DMatrix::zeros(n, p);
        Ok(GrassmannState {
            u,
            m,
            v,
            t: 0,
            hyper,
        })
    }

    /// Random orthonormal frame from a seeded Gaussian and QR.
    pub fn from_seed(n: usize, p: usize, seed: u64, hyper: GrassmannHyper) -> Result<Self> {
        if p == 0 || p > n {
            return Err(SpectralError::InvalidInput(format!(
                "frame must be n x p with 1 <= p <= n, got {n}x{p}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let r = qr.r();
        let mut q = qr.q();
        for j in 0..p {
            if r[(j, j)] < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        GrassmannState::new(q, hyper)
    }

    /// The mixing matrix this state represents.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.u * self.u.transpose()
    }
}

/// One momentum step on the Grassmann manifold.
///
/// The supplied direction is first projected onto the horizontal space
/// (`grad - U U^T grad`), accumulated into Adam-style moments, optionally
/// rescaled with bias correction, then applied through a Cayley-style
/// retraction `Y <- U + (alpha/2) W (U + Y)` with
/// `W = Mhat U^T - U Mhat^T`, and finally re-orthonormalized by QR with
/// the column signs fixed from the R diagonal. Orthonormality after the
/// step is enforced to 1e-10.
///
/// The frame moves along `+grad`: to descend a loss, pass the negative
/// of its Euclidean gradient.
pub fn grassmann_step(state: &mut GrassmannState, grad: &DMatrix<f64>) -> Result<()> {
    let (n, p) = state.u.shape();
    if grad.shape() != (n, p) {
        return Err(SpectralError::InvalidInput(format!(
            "gradient must be {n}x{p}, got {}x{}",
            grad.nrows(),
            grad.ncols()
        )));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidInput("non-finite gradient".into()));
    }
    let h = &state.hyper;
    state.t += 1;

    let horizontal = grad - &state.u * (state.u.transpose() * grad);
    state.m = &state.m * h.beta1 + &horizontal * (1.0 - h.beta1);
    state.v = &state.v * h.beta2 + horizontal.component_mul(&horizontal) * (1.0 - h.beta2);

    let mhat = if h.adaptive {
        let bc1 = 1.0 - h.beta1.powi(state.t as i32);
        let bc2 = 1.0 - h.beta2.powi(state.t as i32);
        let mut out = state.m.clone();
        for i in 0..n {
            for j in 0..p {
                out[(i, j)] = (state.m[(i, j)] / bc1)
                    / ((state.v[(i, j)] / bc2).sqrt() + h.eps);
            }
        }
        out
    } else {
        state.m.clone()
    };

    let w = &mhat * state.u.transpose() - &state.u * mhat.transpose();
    let mut y = &state.u + &mhat * h.alpha;
    for _ in 0..h.s {
        y = &state.u + (&w * (h.alpha / 2.0)) * (&state.u + &y);
    }

    let qr = y.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let dev = orthonormality_deviation(&q);
    if dev > 1e-10 {
        return Err(SpectralError::NumericalFailure(format!(
            "frame drifted off the manifold (deviation {dev:.2e})"
        )));
    }
    state.u = q;
    Ok(())
}

/// Post-mixing weights: either a full matrix (its row sums weight the
/// shared update) or an explicit per-stream weight vector.
pub enum PostMix<'a> {
    Matrix(&'a DMatrix<f64>),
    Vector(&'a DVector<f64>),
}

/// Forward pass of the mixed residual block.
///
/// `x` holds n parallel streams as rows (n x d). The pre-mixer combines
/// streams, the sublayer `f` runs once on the stream average, and its
/// output is broadcast back, weighted per stream by the post-mixing
/// weights, on top of the residual path `H_res x`:
///
/// ```text
/// out = H_res x + w y^T,   y = f(mean_rows(H_pre x)),   w_i = post weight
/// ```
pub fn mix_forward(
    x: &DMatrix<f64>,
    h_pre: &DMatrix<f64>,
    h_post: PostMix<'_>,
    h_res: &DMatrix<f64>,
    f: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(SpectralError::InvalidInput("empty stream matrix".into()));
    }
    if h_pre.shape() != (n, n) || h_res.shape() != (n, n) {
        return Err(SpectralError::InvalidInput(format!(
            "mixers must be {n}x{n}; got pre {:?}, res {:?}",
            h_pre.shape(),
            h_res.shape()
        )));
    }
    let weights: DVector<f64> = match h_post {
        PostMix::Matrix(m) => {
            if m.shape() != (n, n) {
                return Err(SpectralError::InvalidInput(format!(
                    "post mixer must be {n}x{n}, got {:?}",
                    m.shape()
                )));
            }
            DVector::from_fn(n, |i, _| m.row(i).iter().sum::<f64>())
        }
        PostMix::Vector(v) => {
            if v.len() != n {
                return Err(SpectralError::InvalidInput(format!(
                    "post weights must have length {n}, got {}",
                    v.len()
                )));
            }
            v.clone()
        }
    };

    let x_pre = h_pre * x;
    let x_in = DVector::from_fn(d, |j, _| x_pre.column(j).sum() / n as f64);
    let y = f(&x_in);
    if y.len() != d {
        return Err(SpectralError::InvalidInput(format!(
            "sublayer must preserve feature dimension {d}, returned {}",
            y.len()
        )));
    }

    let mut out = h_res * x;
    for i in 0..n {
        for j in 0..d {
            out[(i, j)] += weights[i] * y[j];
        }
    }
    Ok(out)
}

fn factorial_u128(n: usize) -> Option<u128> {
    let mut acc: u128 = 1;
    for k in 2..=n {
        acc = acc.checked_mul(k as u128)?;
    }
    Some(acc)
}

/// Deterministic permutation basis for the discrete mixer.
///
/// The fixed head of the list is: identity, the two boundary adjacent
/// transpositions, and the two cyclic shifts (deduplicated in that order).
/// If `k` exceeds the head, seeded random permutations fill the rest,
/// skipping duplicates. All returned permutations are distinct.
pub fn permutation_basis(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || k == 0 {
        return Err(SpectralError::InvalidInput(
            "permutation basis needs n >= 1 and k >= 1".into(),
        ));
    }
    if let Some(total) = factorial_u128(n) {
        if (k as u128) > total {
            return Err(SpectralError::InvalidInput(format!(
                "requested {k} distinct permutations of {n} elements but only {total} exist"
            )));
        }
    }

    let identity: Vec<usize> = (0..n).collect();
    let mut fixed: Vec<Vec<usize>> = vec![identity.clone()];
    if n >= 2 {
        let mut first_swap = identity.clone();
        first_swap.swap(0, 1);
        fixed.push(first_swap);
        let mut last_swap = identity.clone();
        last_swap.swap(n - 2, n - 1);
        fixed.push(last_swap);
        let shift_left: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        fixed.push(shift_left);
        let shift_right: Vec<usize> = (0..n).map(|i| (i + n - 1) % n).collect();
        fixed.push(shift_right);
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut basis: Vec<Vec<usize>> = Vec::with_capacity(k);
    for p in fixed {
        if basis.len() == k {
            break;
        }
        if seen.insert(p.clone()) {
            basis.push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while basis.len() < k {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            basis.push(p);
        }
    }
    Ok(basis)
}

fn compose(g: &[usize], s: &[usize]) -> Vec<usize> {
    s.iter().map(|&i| g[i]).collect()
}

/// True when the given permutations generate the full symmetric group on
/// `n` elements, decided by breadth-first closure.
pub fn generates_symmetric_group(perms: &[Vec<usize>], n: usize) -> bool {
    let total = match factorial_u128(n) {
        Some(t) if t <= 1_000_000 => t as usize,
        _ => return false,
    };
    let identity: Vec<usize> = (0..n).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(identity.clone());
    let mut queue: VecDeque<Vec<usize>> = VecDeque::new();
    queue.push_back(identity);
    while let Some(g) = queue.pop_front() {
        for s in perms {
            let h = compose(&g, s);
            if seen.insert(h.clone()) {
                if seen.len() == total {
                    return true;
                }
                queue.push_back(h);
            }
        }
    }
    seen.len() == total
}

/// Outcome of the exhaustive spectral-gap search.
#[derive(Debug, Clone)]
pub struct SpectralGapResult {
    /// Generating set with the widest gap.
    pub best_set: Vec<Vec<usize>>,
    /// Gap `|lambda_1| - |lambda_2|` of the best set's walk.
    pub gap: f64,
    /// Second-largest eigenvalue modulus of the best walk.
    pub second_modulus: f64,
    /// Number of k-subsets examined.
    pub n_checked: usize,
    /// How many of them generate the symmetric group.
    pub n_generating: usize,
    /// Worst deviation of any examined walk matrix from doubly stochastic.
    pub worst_stochastic_dev: f64,
    /// Worst deviation of any leading eigenvalue modulus from 1.
    pub worst_perron_dev: f64,
}

/// Exhaustively searches k-subsets of the symmetric group on `n` elements
/// for the random-walk transition matrix with the widest spectral gap.
///
/// For each generating subset S the walk matrix is
/// `T[g, g s] = 1/|S|` for `s in S`; non-generating subsets are skipped.
/// Restricted to `n <= 4`, where the walk matrices are at most 24 x 24
/// and the subset enumeration stays small.
pub fn spectral_gap_search(n: usize, k: usize) -> Result<SpectralGapResult> {
    if !(2..=4).contains(&n) {
        return Err(SpectralError::InvalidInput(format!(
            "exhaustive search supports 2 <= n <= 4, got {n}"
        )));
    }
    let total = factorial_u128(n).expect("small n") as usize;
    if k == 0 || k > total {
        return Err(SpectralError::InvalidInput(format!(
            "subset size must lie in 1..={total}, got {k}"
        )));
    }

    let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
    let index: std::collections::HashMap<Vec<usize>, usize> = perms
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i))
        .collect();

    let mut best: Option<(Vec<usize>, f64, f64)> = None;
    let mut n_checked = 0usize;
    let mut n_generating = 0usize;
    let mut worst_stochastic_dev = 0.0_f64;
    let mut worst_perron_dev = 0.0_f64;

    for subset in (0..total).combinations(k) {
        n_checked += 1;
        let gens: Vec<Vec<usize>> = subset.iter().map(|&i| perms[i].clone()).collect();
        if !generates_symmetric_group(&gens, n) {
            continue;
        }
        n_generating += 1;

        let mut t = DMatrix::<f64>::zeros(total, total);
        for (g_idx, g) in perms.iter().enumerate() {
            for s in &gens {
                let h_idx = index[&compose(g, s)];
                t[(g_idx, h_idx)] += 1.0 / k as f64;
            }
        }
        worst_stochastic_dev = worst_stochastic_dev.max(doubly_stochastic_deviation(&t));

        let eigs = t.complex_eigenvalues();
        let mut mods: Vec<f64> = eigs.iter().map(|e| e.norm()).collect();
        mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
        worst_perron_dev = worst_perron_dev.max((mods[0] - 1.0).abs());
        let gap = mods[0] - mods[1];
        let better = match &best {
            None => true,
            Some((_, best_gap, _)) => gap > *best_gap,
        };
        if better {
            best = Some((subset.clone(), gap, mods[1]));
        }
    }

    let (subset, gap, second_modulus) = best.ok_or_else(|| {
        SpectralError::Unconverged(format!(
            "no generating subset of size {k} exists for n = {n}"
        ))
    })?;
    Ok(SpectralGapResult {
        best_set: subset.into_iter().map(|i| perms[i].clone()).collect(),
        gap,
        second_modulus,
        n_checked,
        n_generating,
        worst_stochastic_dev,
        worst_perron_dev,
    })
}
