//! The gated mask: landmark gate `l_j`, query gate `g_i`, head amplitude Γ,
//! the distance-penalty form `M̂`, the FlashAttention-compatible form `M`,
//! and the rank-2 query/key augmentation that realises `M` inside a plain
//! scaled dot product.

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, softplus, Matrix};

pub const INIT_B_G: f64 = -3.0;
pub const INIT_B_L: f64 = 0.0;
/// softplus(0.5413) ≈ 1, so Γ starts at unit amplitude.
pub const INIT_GAMMA: f64 = 0.5413;
pub const DEFAULT_LANDMARK_THRESHOLD: f64 = 0.9;

/// Learnable per-head gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w_l: Vec<f64>,
    pub b_l: f64,
    pub w_g: Vec<f64>,
    pub b_g: f64,
    pub gamma_raw: f64,
}

impl GateParams {
    /// Zero projections with the standard bias and amplitude initialisation.
    pub fn init(d_sem: usize) -> Self {
        Self { w_l: vec![0.0; d_sem], b_l: INIT_B_L, w_g: vec![0.0; d_sem], b_g: INIT_B_G, gamma_raw: INIT_GAMMA }
    }

    pub fn d_sem(&self) -> usize {
        self.w_l.len()
    }

    pub fn amplitude(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_l.len() != self.w_g.len() {
            return Err(Error::DimensionMismatch(format!(
                "w_l has {} entries, w_g has {}",
                self.w_l.len(),
                self.w_g.len()
            )));
        }
        let finite = self.w_l.iter().chain(&self.w_g).chain([&self.b_l, &self.b_g, &self.gamma_raw]).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("gate parameters".into()));
        }
        Ok(())
    }
}

/// Evaluated gates for one head over one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GateValues {
    /// Landmark gate per key, in `[0, 1]`.
    pub l: Vec<f64>,
    /// Query gate per query, non-negative.
    pub g: Vec<f64>,
    pub gamma: f64,
    /// Training-context normaliser.
    pub t: f64,
}

impl GateValues {
    pub fn new(l: Vec<f64>, g: Vec<f64>, gamma: f64, t: f64) -> Result<Self> {
        if l.len() != g.len() {
            return Err(Error::DimensionMismatch(format!("{} landmarks vs {} query gates", l.len(), g.len())));
        }
        if l.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("landmark gate outside [0, 1]".into()));
        }
        if g.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("query gate must be finite and non-negative".into()));
        }
        if !(gamma > 0.0) || !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} and T {t} must be positive")));
        }
        Ok(Self { l, g, gamma, t })
    }

    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    /// Contraction rate `Γ g_i / T` of query `i`.
    pub fn rate(&self, i: usize) -> f64 {
        self.gamma * self.g[i] / self.t
    }
}

/// Protected / unprotected split of the causal context of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSets {
    pub protected: Vec<usize>,
    pub unprotected: Vec<usize>,
    pub landmark_threshold: f64,
}

/// `l_j = σ(w_l·k_j + b_l)`, `g_i = softplus(w_g·q_i + b_g)`, `Γ = softplus(γ)`.
pub fn compute_gates(q: &Matrix, k: &Matrix, params: &GateParams, t: f64) -> Result<GateValues> {
    params.validate()?;
    if q.shape() != k.shape() || q.cols() != params.d_sem() {
        return Err(Error::DimensionMismatch(format!(
            "q {:?}, k {:?}, gate width {}",
            q.shape(),
            k.shape(),
            params.d_sem()
        )));
    }
    if !q.is_finite() || !k.is_finite() {
        return Err(Error::NonFinite("gate inputs".into()));
    }
    let l = (0..k.rows()).map(|j| sigmoid(dot(&params.w_l, k.row(j)) + params.b_l)).collect();
    let g = (0..q.rows()).map(|i| softplus(dot(&params.w_g, q.row(i)) + params.b_g)).collect();
    GateValues::new(l, g, params.amplitude(), t)
}

/// `M̂` at explicit positions: `-Γ g (1 - l)(pos_i - pos_j) / T`.
#[inline]
pub fn mask_hat_at(pos_i: f64, pos_j: f64, g_i: f64, l_j: f64, gamma: f64, t: f64) -> f64 {
    -gamma * g_i * (1.0 - l_j) * (pos_i - pos_j) / t
}

/// `M` at explicit positions: `(Γ g / T) [pos_j (1 - l) + pos_i l]`.
#[inline]
pub fn mask_gape_at(pos_i: f64, pos_j: f64, g_i: f64, l_j: f64, gamma: f64, t: f64) -> f64 {
    gamma * g_i / t * (pos_j * (1.0 - l_j) + pos_i * l_j)
}

fn check_causal(i: usize, j: usize, gv: &GateValues) -> Result<()> {
    if j > i {
        return Err(Error::Causality { i, j });
    }
    if i >= gv.len() {
        return Err(Error::InvalidArgument(format!("index {i} outside {} gate values", gv.len())));
    }
    Ok(())
}

/// Distance-penalty mask between query `i` and key `j` (positions = indices).
pub fn mask_hat(i: usize, j: usize, gv: &GateValues) -> Result<f64> {
    check_causal(i, j, gv)?;
    Ok(mask_hat_at(i as f64, j as f64, gv.g[i], gv.l[j], gv.gamma, gv.t))
}

/// The adopted mask between query `i` and key `j` (positions = indices).
pub fn mask_gape(i: usize, j: usize, gv: &GateValues) -> Result<f64> {
    check_causal(i, j, gv)?;
    Ok(mask_gape_at(i as f64, j as f64, gv.g[i], gv.l[j], gv.gamma, gv.t))
}

/// Appends the two routing coordinates:
/// `q̃_i = [q_i; Γg_i√d; Γg_i(p_i/T)√d]`, `k̃_j = [k_j; p_j(1-l_j)/T; l_j]`
/// with `d = q.cols() + 2`, so that `q̃_i·k̃_j/√d = q_i·k_j/√d + M_ij`.
pub fn augment_qk(q: &Matrix, k: &Matrix, gv: &GateValues, positions: &[usize]) -> Result<(Matrix, Matrix)> {
    let d = q.cols() + 2;
    if d < 4 {
        return Err(Error::InvalidArgument(format!("augmented head dim {d} must be at least 4")));
    }
    if q.shape() != k.shape() || positions.len() != q.rows() || gv.len() != q.rows() {
        return Err(Error::DimensionMismatch(format!(
            "q {:?}, k {:?}, {} positions, {} gates",
            q.shape(),
            k.shape(),
            positions.len(),
            gv.len()
        )));
    }
    let root_d = (d as f64).sqrt();
    let qa = Matrix::from_fn(q.rows(), d, |i, c| match c {
        c if c < d - 2 => q.get(i, c),
        c if c == d - 2 => gv.gamma * gv.g[i] * root_d,
        _ => gv.gamma * gv.g[i] * (positions[i] as f64 / gv.t) * root_d,
    });
    let ka = Matrix::from_fn(k.rows(), d, |j, c| match c {
        c if c < d - 2 => k.get(j, c),
        c if c == d - 2 => positions[j] as f64 * (1.0 - gv.l[j]) / gv.t,
        _ => gv.l[j],
    });
    Ok((qa, ka))
}

/// Splits keys `0..=i` by landmark threshold; `i` itself is always protected.
pub fn partition_context(gv: &GateValues, i: usize, tau: f64) -> Result<PartitionSets> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("landmark threshold {tau} outside (0, 1)")));
    }
    if i >= gv.len() {
        return Err(Error::InvalidArgument(format!("query {i} outside {} positions", gv.len())));
    }
    let (mut protected, unprotected): (Vec<usize>, Vec<usize>) = (0..i).partition(|&j| gv.l[j] >= tau);
    protected.push(i);
    Ok(PartitionSets { protected, unprotected, landmark_threshold: tau })
}

/// Smallest landmark value `l_a*` above which an older key `a` outranks a
/// newer key `b` under the adopted mask: `((i-b) l_b + (b-a)) / (i-a)`.
pub fn landmark_dominance_threshold(i: usize, a: usize, b: usize, l_b: f64) -> Result<f64> {
    if !(a < b && b < i) {
        return Err(Error::InvalidArgument(format!("need a < b < i, got a={a}, b={b}, i={i}")));
    }
    if !(0.0..1.0).contains(&l_b) {
        return Err(Error::InvalidArgument(format!("l_b {l_b} must lie in [0, 1)")));
    }
    Ok(((i - b) as f64 * l_b + (b - a) as f64) / (i - a) as f64)
}
