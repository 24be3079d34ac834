//! Causal single-head attention assembling `a_ij = s_ij + M_ij` for any
//! positional scheme, with the gated mask realised through one of three
//! post-softmax-equivalent paths.

use crate::error::{Error, Result};
use crate::gape::{augment_qk, compute_gates, mask_gape_at, mask_hat_at, GateParams, GateValues};
use crate::numerics::{causal_softmax_row, dot, Matrix};
use crate::posenc::{rotate_pair, semantic_logits_scaled, EncodingKind};

/// Which vectors feed the gate projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateSource {
    /// Gates read the semantic q/k before any rotary map.
    #[default]
    PreRotation,
    /// Gates read the rotated q/k.
    PostRotation,
}

impl GateSource {
    pub fn tag(self) -> &'static str {
        match self {
            Self::PreRotation => "pre",
            Self::PostRotation => "post",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::PreRotation),
            "post" => Ok(Self::PostRotation),
            other => Err(Error::InvalidArgument(format!("unknown gate source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GapeSetup {
    pub params: GateParams,
    pub t: f64,
    pub source: GateSource,
}

/// Per-head attention inputs. With the gated mask enabled, `q` and `k` hold
/// the `d - 2` semantic coordinates and logits are scaled by `1/√d`.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub positions: Vec<usize>,
    pub kind: EncodingKind,
    /// Head index, used to pick the ALiBi slope.
    pub head: usize,
    pub gape: Option<GapeSetup>,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub context: Matrix,
    pub weights: Matrix,
    pub logits: Matrix,
    pub gates: Option<GateValues>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPath {
    ExplicitM,
    ExplicitMHat,
    FusedAugmented,
}

impl MaskPath {
    pub const ALL: [MaskPath; 3] = [MaskPath::ExplicitM, MaskPath::ExplicitMHat, MaskPath::FusedAugmented];
}

/// Causal attention. Entries above the diagonal of `logits` are left at 0
/// and carry zero weight.
pub fn attend(inputs: &AttentionInputs, path: MaskPath) -> Result<AttentionOutput> {
    let AttentionInputs { q, k, v, positions, kind, head, gape } = inputs;
    let len = q.rows();
    if len == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if q.shape() != k.shape() || v.rows() != len || positions.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "q {:?}, k {:?}, v {:?}, {} positions",
            q.shape(),
            k.shape(),
            v.shape(),
            positions.len()
        )));
    }
    if !q.is_finite() || !k.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite("attention inputs".into()));
    }
    kind.validate()?;

    let mut logits = Matrix::zeros(len, len);
    let mut gates = None;
    match gape {
        None => {
            let scale = 1.0 / (q.cols() as f64).sqrt();
            let s = semantic_logits_scaled(q, k, positions, kind, scale)?;
            let slope = kind.alibi_slope(*head);
            for i in 0..len {
                for j in 0..=i {
                    let bias = slope.map_or(0.0, |m| -m * (positions[i] as f64 - positions[j] as f64));
                    logits.set(i, j, s.get(i, j) + bias);
                }
            }
        }
        Some(setup) => {
            if matches!(kind, EncodingKind::ALiBi { .. }) {
                return Err(Error::InvalidArgument("the gated mask is not combined with ALiBi".into()));
            }
            let d = q.cols() + 2;
            let scale = 1.0 / (d as f64).sqrt();
            let (qr, kr) = rotate_pair(q, k, positions, kind)?;
            let gv = match setup.source {
                GateSource::PreRotation => compute_gates(q, k, &setup.params, setup.t)?,
                GateSource::PostRotation => compute_gates(&qr, &kr, &setup.params, setup.t)?,
            };
            match path {
                MaskPath::ExplicitM | MaskPath::ExplicitMHat => {
                    for i in 0..len {
                        let pi = positions[i] as f64;
                        for j in 0..=i {
                            let pj = positions[j] as f64;
                            let s = scale * dot(qr.row(i), kr.row(j));
                            let m = if path == MaskPath::ExplicitM {
                                mask_gape_at(pi, pj, gv.g[i], gv.l[j], gv.gamma, gv.t)
                            } else {
                                mask_hat_at(pi, pj, gv.g[i], gv.l[j], gv.gamma, gv.t)
                            };
                            logits.set(i, j, s + m);
                        }
                    }
                }
                MaskPath::FusedAugmented => {
                    // rotation acts on the semantic block only; routing coordinates are appended after
                    let (qa, ka) = augment_qk(&qr, &kr, &gv, positions)?;
                    for i in 0..len {
                        for j in 0..=i {
                            logits.set(i, j, scale * dot(qa.row(i), ka.row(j)));
                        }
                    }
                }
            }
            gates = Some(gv);
        }
    }

    let mut weights = Matrix::zeros(len, len);
    let mut context = Matrix::zeros(len, v.cols());
    for i in 0..len {
        let row = causal_softmax_row(logits.row(i), i)?;
        weights.row_mut(i).copy_from_slice(&row);
        let out = context.row_mut(i);
        for (j, &w) in row.iter().enumerate().take(i + 1) {
            for (o, &x) in out.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    Ok(AttentionOutput { context, weights, logits, gates })
}

/// Shapes of the per-layer key and value caches, `[B, H, L_ctx, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvCacheShape {
    pub k: [usize; 4],
    pub v: [usize; 4],
}

impl KvCacheShape {
    pub fn elements(&self) -> usize {
        self.k.iter().product::<usize>() + self.v.iter().product::<usize>()
    }
}

/// The gated mask lives inside the cached key's last two coordinates, so a
/// gated configuration caches exactly what the rotary one does.
pub fn kv_cache_shapes(
    kind: &EncodingKind,
    with_gape: bool,
    batch: usize,
    ctx_len: usize,
    n_heads: usize,
    head_dim: usize,
) -> Result<KvCacheShape> {
    if with_gape && head_dim < 4 {
        return Err(Error::InvalidArgument(format!("gated head dim {head_dim} must be at least 4")));
    }
    if with_gape && matches!(kind, EncodingKind::ALiBi { .. }) {
        return Err(Error::InvalidArgument("the gated mask is not combined with ALiBi".into()));
    }
    let shape = [batch, n_heads, ctx_len, head_dim];
    Ok(KvCacheShape { k: shape, v: shape })
}
