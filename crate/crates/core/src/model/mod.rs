//! Small pre-norm decoder-only transformer with pluggable positional
//! encoding and the gated mask, hand-written reverse mode, and checkpoints.

pub mod checkpoint;
pub mod float;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use float::Scalar;
use float::{gelu, gelu_grad, gemm, linear, linear_backward, sigmoid, softplus, View};

use crate::attention::GateSource;
use crate::gape::{INIT_B_G, INIT_B_L, INIT_GAMMA};
use crate::niah::{NiahSample, NiahVocab};
use crate::numerics::{entropy_unchecked, Matrix, Rng};
use crate::posenc::EncodingKind;
use crate::{Error, Result};

pub const MAX_SEQ_LEN: usize = 1 << 16;
pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const N_DIGITS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub kind: EncodingKind,
    pub gape: bool,
    /// Query/key width per head. Attention is always scaled by `1/√head_dim`,
    /// so with the gate the semantic block is `head_dim - 2` wide and the two
    /// routing coordinates complete the head.
    pub qk_dim: usize,
    /// Length scale `T` of the mask, fixed at the training length.
    pub t_train: usize,
    pub dropout: f64,
    pub gate_source: GateSource,
}

impl ModelConfig {
    pub fn new(n_layer: usize, n_head: usize, d_model: usize, kind: EncodingKind, gape: bool, t_train: usize) -> Self {
        let kind = match kind {
            EncodingKind::ALiBi { slopes } if slopes.is_empty() => EncodingKind::alibi(n_head),
            k => k,
        };
        let head_dim = d_model / n_head.max(1);
        ModelConfig {
            n_layer,
            n_head,
            d_model,
            vocab_size: NiahVocab::SIZE,
            kind,
            gape,
            qk_dim: if gape { head_dim.saturating_sub(2) } else { head_dim },
            t_train,
            dropout: 0.0,
            gate_source: GateSource::PreRotation,
        }
    }

    /// Two layers, two heads, width 64 over the 27-token vocabulary.
    pub fn niah(kind: EncodingKind, gape: bool, t_train: usize) -> Self {
        Self::new(2, 2, 64, kind, gape, t_train)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return bad("layer, head, width and vocabulary counts must be positive".into());
        }
        if self.d_model % self.n_head != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_head));
        }
        if self.gape && self.head_dim() < 4 {
            return bad(format!("the gated mask needs head dim ≥ 4, got {}", self.head_dim()));
        }
        if self.qk_dim == 0 || self.qk_dim > self.head_dim() {
            return bad(format!("qk_dim {} outside 1..={}", self.qk_dim, self.head_dim()));
        }
        if self.gape && self.qk_dim + 2 != self.head_dim() {
            return bad(format!("with the gate qk_dim must be head_dim - 2 = {}", self.head_dim() - 2));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported".into());
        }
        if self.t_train == 0 {
            return bad("t_train must be positive".into());
        }
        if self.gape && matches!(self.kind, EncodingKind::ALiBi { .. }) {
            return bad("the gated mask is not combined with ALiBi".into());
        }
        if let EncodingKind::ALiBi { slopes } = &self.kind {
            if slopes.len() != self.n_head {
                return bad(format!("{} ALiBi slopes for {} heads", slopes.len(), self.n_head));
            }
        }
        self.kind.validate()
    }

    /// Short label such as `nope+gape` or `alibi`.
    pub fn label(&self) -> String {
        if self.gape {
            format!("{}+gape", self.kind.tag())
        } else {
            self.kind.tag().to_string()
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, v, hq, h) = (cfg.d_model, cfg.vocab_size, cfg.n_head * cfg.qk_dim, cfg.n_head);
    let mut out = vec![("wte".to_string(), vec![v, d], Init::Normal)];
    for l in 0..cfg.n_layer {
        let p = |s: &str| format!("h.{l}.{s}");
        out.push((p("ln1.weight"), vec![d], Init::Ones));
        out.push((p("ln1.bias"), vec![d], Init::Zeros));
        out.push((p("attn.wq"), vec![d, hq], Init::Normal));
        out.push((p("attn.bq"), vec![hq], Init::Zeros));
        out.push((p("attn.wk"), vec![d, hq], Init::Normal));
        out.push((p("attn.bk"), vec![hq], Init::Zeros));
        out.push((p("attn.wv"), vec![d, d], Init::Normal));
        out.push((p("attn.bv"), vec![d], Init::Zeros));
        out.push((p("attn.wo"), vec![d, d], Init::Normal));
        out.push((p("attn.bo"), vec![d], Init::Zeros));
        if cfg.gape {
            out.push((p("gape.w_l"), vec![h, cfg.qk_dim], Init::Zeros));
            out.push((p("gape.b_l"), vec![h], Init::Const(INIT_B_L)));
            out.push((p("gape.w_g"), vec![h, cfg.qk_dim], Init::Zeros));
            out.push((p("gape.b_g"), vec![h], Init::Const(INIT_B_G)));
            out.push((p("gape.gamma"), vec![h], Init::Const(INIT_GAMMA)));
        }
        out.push((p("ln2.weight"), vec![d], Init::Ones));
        out.push((p("ln2.bias"), vec![d], Init::Zeros));
        out.push((p("mlp.w_fc"), vec![d, 4 * d], Init::Normal));
        out.push((p("mlp.b_fc"), vec![4 * d], Init::Zeros));
        out.push((p("mlp.w_proj"), vec![4 * d, d], Init::Normal));
        out.push((p("mlp.b_proj"), vec![d], Init::Zeros));
    }
    out.push(("ln_f.weight".into(), vec![d], Init::Ones));
    out.push(("ln_f.bias".into(), vec![d], Init::Zeros));
    out.push(("lm_head".into(), vec![d, v], Init::Normal));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Param {
    pub fn is_gape(&self) -> bool {
        self.name.contains(".gape.")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    /// GPT-2 style init: N(0, 0.02) matrices, zero biases, unit norms, and
    /// gate projections at zero with the fixed gate biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let params = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| INIT_STD * rng.normal()).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Const(c) => vec![c; n],
                };
                Param { name, shape, data, requires_grad: true }
            })
            .collect();
        Ok(ParamStore { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Verifies names, order and shapes against the layout of `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let want = layout(cfg);
        for (i, (name, shape, _)) in want.iter().enumerate() {
            match self.params.get(i) {
                None => return Err(Error::Checkpoint(format!("missing entry `{name}`"))),
                Some(p) if &p.name != name => {
                    return Err(Error::Checkpoint(format!("entry `{}` where `{name}` was expected", p.name)))
                }
                Some(p) if &p.shape != shape || p.data.len() != shape.iter().product::<usize>() => {
                    return Err(Error::Checkpoint(format!(
                        "entry `{name}` has shape {:?}, config needs {shape:?}",
                        p.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.get(want.len()) {
            return Err(Error::Checkpoint(format!("unexpected entry `{}`", extra.name)));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    /// Drives every query gate to zero: `w_g = 0`, `b_g = -1e6`.
    pub fn force_gates_off(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.ends_with("gape.w_g") {
                p.data.fill(0.0);
            } else if p.name.ends_with("gape.b_g") {
                p.data.fill(-1e6);
            }
        }
    }

    /// The same weights without gate entries, for a config with the gate off
    /// and an identical `qk_dim`.
    pub fn without_gates(&self) -> ParamStore {
        ParamStore { params: self.params.iter().filter(|p| !p.is_gape()).cloned().collect() }
    }

    fn typed<F: Scalar>(&self) -> Vec<Vec<F>> {
        self.params.iter().map(|p| p.data.iter().map(|&x| F::of(x)).collect()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct GateIdx {
    w_l: usize,
    b_l: usize,
    w_g: usize,
    b_g: usize,
    gamma: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    ln1_w: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    gate: Option<GateIdx>,
    ln2_w: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Clone, Debug)]
struct Index {
    wte: usize,
    layers: Vec<LayerIdx>,
    lnf_w: usize,
    lnf_b: usize,
    head: usize,
}

impl Index {
    fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let wte = take();
        let layers = (0..cfg.n_layer)
            .map(|_| {
                let (ln1_w, ln1_b) = (take(), take());
                let (wq, bq, wk, bk, wv, bv, wo, bo) = (take(), take(), take(), take(), take(), take(), take(), take());
                let gate = cfg
                    .gape
                    .then(|| GateIdx { w_l: take(), b_l: take(), w_g: take(), b_g: take(), gamma: take() });
                let (ln2_w, ln2_b) = (take(), take());
                let (w_fc, b_fc, w_proj, b_proj) = (take(), take(), take(), take());
                LayerIdx { ln1_w, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, gate, ln2_w, ln2_b, w_fc, b_fc, w_proj, b_proj }
            })
            .collect();
        let (lnf_w, lnf_b, head) = (take(), take(), take());
        Index { wte, layers, lnf_w, lnf_b, head }
    }
}

/// What [`Network::forward`] records per layer and head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    /// Full attention matrices.
    pub weights: bool,
    /// Pre-rotation query/key rows.
    pub qk: bool,
}

impl Capture {
    pub const NONE: Capture = Capture { weights: false, qk: false };
    pub const ALL: Capture = Capture { weights: true, qk: true };
}

#[derive(Clone, Debug)]
pub struct GateTrace {
    pub l: Vec<f64>,
    pub g: Vec<f64>,
    pub gamma: f64,
    /// Mean of `M_ij` over the causal entries.
    pub mask_mean: f64,
}

#[derive(Clone, Debug)]
pub struct HeadTrace {
    /// Shannon entropy of each query row.
    pub entropy: Vec<f64>,
    pub weights: Option<Matrix>,
    pub gates: Option<GateTrace>,
    pub q: Option<Matrix>,
    pub k: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Trace {
    /// `layers[l][h]`.
    pub layers: Vec<Vec<HeadTrace>>,
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(x: &[F], w: &[F], b: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = xh * w[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(dy: &[F], cache: &LnCache<F>, w: &[F], dw: &mut [F], db: &mut [F], d: usize) -> Vec<F> {
    let rows = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let (mut s1, mut s2) = (F::zero(), F::zero());
        for c in 0..d {
            let g = dy[r * d + c];
            let xh = cache.xhat[r * d + c];
            dw[c] += g * xh;
            db[c] += g;
            dxhat[c] = g * w[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * xh;
        }
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - s1 * inv_d - cache.xhat[r * d + c] * s2 * inv_d);
        }
    }
    dx
}

struct RotTable<F> {
    n_chunks: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> RotTable<F> {
    fn new(kind: &EncodingKind, qk_dim: usize, len: usize) -> Result<Option<Self>> {
        let Some((spectrum, dims)) = kind.rotation(qk_dim)? else { return Ok(None) };
        let freqs = &spectrum.freqs()[..dims / 2];
        let n = freqs.len();
        let mut cos = Vec::with_capacity(len * n);
        let mut sin = Vec::with_capacity(len * n);
        for pos in 0..len {
            for &f in freqs {
                let (s, c) = (pos as f64 * f).sin_cos();
                cos.push(F::of(c));
                sin.push(F::of(s));
            }
        }
        Ok(Some(RotTable { n_chunks: n, cos, sin }))
    }

    /// Rotates every head block of `rows` rows (row `r` at position
    /// `pos0 + r`); `inverse` applies the transpose.
    fn apply(&self, buf: &mut [F], pos0: usize, width: usize, dq: usize, inverse: bool) {
        let heads = width / dq;
        for (r, row) in buf.chunks_exact_mut(width).enumerate() {
            let base = (pos0 + r) * self.n_chunks;
            for h in 0..heads {
                let blk = &mut row[h * dq..];
                for c in 0..self.n_chunks {
                    let (cs, mut sn) = (self.cos[base + c], self.sin[base + c]);
                    if inverse {
                        sn = -sn;
                    }
                    let (x, y) = (blk[2 * c], blk[2 * c + 1]);
                    blk[2 * c] = x * cs - y * sn;
                    blk[2 * c + 1] = x * sn + y * cs;
                }
            }
        }
    }
}

struct HeadGates<F> {
    l: Vec<F>,
    g: Vec<F>,
    zg: Vec<F>,
    gamma: F,
}

struct LayerCache<F> {
    q0: usize,
    ln1: LnCache<F>,
    h: Vec<F>,
    q_pre: Vec<F>,
    k_pre: Vec<F>,
    q_rot: Vec<F>,
    k_rot: Vec<F>,
    v: Vec<F>,
    gates: Vec<HeadGates<F>>,
    probs: Vec<Vec<F>>,
    o: Vec<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    u: Vec<F>,
    act: Vec<F>,
}

/// Parameters converted to the working precision together with the index
/// of each tensor. Cheap to rebuild after every optimizer step.
pub struct Network<F: Scalar> {
    pub cfg: ModelConfig,
    idx: Index,
    w: Vec<Vec<F>>,
}

/// Digit logits and per-sample loss at the query position.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub digit_logits: [f64; N_DIGITS],
    pub loss: f64,
}

impl<F: Scalar> Network<F> {
    pub fn new(cfg: &ModelConfig, params: &ParamStore) -> Result<Self> {
        params.check_config(cfg)?;
        Ok(Network { cfg: cfg.clone(), idx: Index::new(cfg), w: params.typed() })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > MAX_SEQ_LEN {
            return Err(Error::InvalidArgument(format!("sequence length {} outside 1..={MAX_SEQ_LEN}", tokens.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Vec<F> {
        let d = self.cfg.d_model;
        let wte = &self.w[self.idx.wte];
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            x.extend_from_slice(&wte[t as usize * d..(t as usize + 1) * d]);
        }
        x
    }

    /// One block over all `len` rows of `x`, producing outputs only for query
    /// rows `q0..len`.
    fn layer_forward(
        &self,
        li: usize,
        x: &[F],
        q0: usize,
        rot: Option<&RotTable<F>>,
        trace: Option<(&mut Vec<HeadTrace>, Capture)>,
    ) -> (Vec<F>, LayerCache<F>) {
        let cfg = &self.cfg;
        let ix = self.idx.layers[li];
        let w = &self.w;
        let (d, nh, dq, hd) = (cfg.d_model, cfg.n_head, cfg.qk_dim, cfg.head_dim());
        let hq = nh * dq;
        let len = x.len() / d;
        let nq = len - q0;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let t = F::of(cfg.t_train as f64);

        let (h, ln1) = layer_norm(x, &w[ix.ln1_w], &w[ix.ln1_b], d);
        let q_pre = linear(&h[q0 * d..], &w[ix.wq], Some(&w[ix.bq]), nq, d, hq);
        let k_pre = linear(&h, &w[ix.wk], Some(&w[ix.bk]), len, d, hq);
        let v = linear(&h, &w[ix.wv], Some(&w[ix.bv]), len, d, d);
        let (mut q_rot, mut k_rot) = (q_pre.clone(), k_pre.clone());
        if let Some(r) = rot {
            r.apply(&mut q_rot, q0, hq, dq, false);
            r.apply(&mut k_rot, 0, hq, dq, false);
        }

        let mut gates = Vec::with_capacity(nh);
        let mut probs = Vec::with_capacity(nh);
        let mut o = vec![F::zero(); nq * d];
        let mut head_traces = Vec::new();
        for head in 0..nh {
            let hg = ix.gate.map(|gi| {
                let (src_q, src_k) = match cfg.gate_source {
                    GateSource::PreRotation => (&q_pre, &k_pre),
                    GateSource::PostRotation => (&q_rot, &k_rot),
                };
                let w_l = &w[gi.w_l][head * dq..(head + 1) * dq];
                let w_g = &w[gi.w_g][head * dq..(head + 1) * dq];
                let (b_l, b_g) = (w[gi.b_l][head], w[gi.b_g][head]);
                let dotw = |wv: &[F], row: &[F]| wv.iter().zip(row).fold(F::zero(), |a, (&p, &q)| a + p * q);
                let l: Vec<F> =
                    (0..len).map(|j| sigmoid(dotw(w_l, &src_k[j * hq + head * dq..]) + b_l)).collect();
                let zg: Vec<F> = (0..nq).map(|r| dotw(w_g, &src_q[r * hq + head * dq..]) + b_g).collect();
                let g = zg.iter().map(|&z| softplus(z)).collect();
                HeadGates { l, g, zg, gamma: softplus(w[gi.gamma][head]) }
            });

            let mut p = vec![F::zero(); nq * len];
            gemm(
                nq,
                dq,
                len,
                &q_rot,
                View::rm(head * dq, hq),
                &k_rot,
                View::tr(head * dq, hq),
                F::zero(),
                &mut p,
                View::rm(0, len),
            );
            let slope = cfg.kind.alibi_slope(head).map(F::of);
            let mut mask_sum = 0.0;
            for r in 0..nq {
                let i = q0 + r;
                let row = &mut p[r * len..(r + 1) * len];
                let fi = F::of(i as f64);
                for j in 0..=i {
                    let mut a = row[j] * scale;
                    if let Some(s) = slope {
                        a -= s * F::of((i - j) as f64);
                    }
                    if let Some(hg) = &hg {
                        let lj = hg.l[j];
                        let fj = F::of(j as f64);
                        let m = hg.gamma * hg.g[r] / t * (fj * (F::one() - lj) + fi * lj);
                        if trace.is_some() {
                            mask_sum += m.f64();
                        }
                        a += m;
                    }
                    row[j] = a;
                }
                let max = row[..=i].iter().fold(F::neg_infinity(), |m, &a| m.max(a));
                let mut z = F::zero();
                for a in row[..=i].iter_mut() {
                    *a = (*a - max).exp();
                    z += *a;
                }
                let inv = F::one() / z;
                row[..=i].iter_mut().for_each(|a| *a *= inv);
                row[i + 1..].iter_mut().for_each(|a| *a = F::zero());
            }
            gemm(nq, len, hd, &p, View::rm(0, len), &v, View::rm(head * hd, d), F::zero(), &mut o, View::rm(head * hd, d));

            if let Some((_, cap)) = &trace {
                let entropy = (0..nq)
                    .map(|r| {
                        let row: Vec<f64> = p[r * len..r * len + q0 + r + 1].iter().map(|x| x.f64()).collect();
                        entropy_unchecked(&row)
                    })
                    .collect();
                let weights = cap.weights.then(|| {
                    Matrix::from_fn(nq, len, |r, c| p[r * len + c].f64())
                });
                let block = |buf: &[F], rows: usize| Matrix::from_fn(rows, dq, |r, c| buf[r * hq + head * dq + c].f64());
                let n_causal = (0..nq).map(|r| q0 + r + 1).sum::<usize>() as f64;
                head_traces.push(HeadTrace {
                    entropy,
                    weights,
                    gates: hg.as_ref().map(|hg| GateTrace {
                        l: hg.l.iter().map(|x| x.f64()).collect(),
                        g: hg.g.iter().map(|x| x.f64()).collect(),
                        gamma: hg.gamma.f64(),
                        mask_mean: mask_sum / n_causal,
                    }),
                    q: cap.qk.then(|| block(&q_pre, nq)),
                    k: cap.qk.then(|| block(&k_pre, len)),
                });
            }
            if let Some(hg) = hg {
                gates.push(hg);
            }
            probs.push(p);
        }
        if let Some((out, _)) = trace {
            *out = head_traces;
        }

        let att = linear(&o, &w[ix.wo], Some(&w[ix.bo]), nq, d, d);
        let mut x1: Vec<F> = x[q0 * d..].to_vec();
        x1.iter_mut().zip(&att).for_each(|(a, &b)| *a += b);
        let (h2, ln2) = layer_norm(&x1, &w[ix.ln2_w], &w[ix.ln2_b], d);
        let u = linear(&h2, &w[ix.w_fc], Some(&w[ix.b_fc]), nq, d, 4 * d);
        let act: Vec<F> = u.iter().map(|&z| gelu(z)).collect();
        let mlp = linear(&act, &w[ix.w_proj], Some(&w[ix.b_proj]), nq, 4 * d, d);
        let mut x2 = x1;
        x2.iter_mut().zip(&mlp).for_each(|(a, &b)| *a += b);
        let cache = LayerCache { q0, ln1, h, q_pre, k_pre, q_rot, k_rot, v, gates, probs, o, ln2, h2, u, act };
        (x2, cache)
    }

    /// Backward of [`Self::layer_forward`]; returns the gradient for all
    /// `len` input rows.
    fn layer_backward(&self, li: usize, cache: &LayerCache<F>, dx2: &[F], rot: Option<&RotTable<F>>, grads: &mut [Vec<F>]) -> Vec<F> {
        let cfg = &self.cfg;
        let ix = self.idx.layers[li];
        let w = &self.w;
        let (d, nh, dq, hd) = (cfg.d_model, cfg.n_head, cfg.qk_dim, cfg.head_dim());
        let hq = nh * dq;
        let q0 = cache.q0;
        let len = cache.h.len() / d;
        let nq = len - q0;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let t = F::of(cfg.t_train as f64);

        // MLP
        let da = {
            let (dw, rest) = split2(grads, ix.w_proj, ix.b_proj);
            linear_backward(&cache.act, &w[ix.w_proj], dx2, dw, Some(rest), nq, 4 * d, d)
        };
        let du: Vec<F> = da.iter().zip(&cache.u).map(|(&g, &z)| g * gelu_grad(z)).collect();
        let dh2 = {
            let (dw, db) = split2(grads, ix.w_fc, ix.b_fc);
            linear_backward(&cache.h2, &w[ix.w_fc], &du, dw, Some(db), nq, d, 4 * d)
        };
        let dln2 = {
            let (dw, db) = split2(grads, ix.ln2_w, ix.ln2_b);
            layer_norm_backward(&dh2, &cache.ln2, &w[ix.ln2_w], dw, db, d)
        };
        let mut dx1 = dx2.to_vec();
        dx1.iter_mut().zip(&dln2).for_each(|(a, &b)| *a += b);

        // attention output projection
        let d_o = {
            let (dw, db) = split2(grads, ix.wo, ix.bo);
            linear_backward(&cache.o, &w[ix.wo], &dx1, dw, Some(db), nq, d, d)
        };

        let mut dq_rot = vec![F::zero(); nq * hq];
        let mut dk_rot = vec![F::zero(); len * hq];
        let mut dv = vec![F::zero(); len * d];
        let mut dgate_q: Vec<(usize, Vec<F>)> = Vec::new();
        let mut dgate_k: Vec<(usize, Vec<F>)> = Vec::new();
        for head in 0..nh {
            let p = &cache.probs[head];
            let mut ds = vec![F::zero(); nq * len];
            gemm(nq, hd, len, &d_o, View::rm(head * hd, d), &cache.v, View::tr(head * hd, d), F::zero(), &mut ds, View::rm(0, len));
            gemm(len, nq, hd, p, View::tr(0, len), &d_o, View::rm(head * hd, d), F::zero(), &mut dv, View::rm(head * hd, d));
            for r in 0..nq {
                let i = q0 + r;
                let (prow, drow) = (&p[r * len..r * len + i + 1], &mut ds[r * len..r * len + i + 1]);
                let dot = prow.iter().zip(drow.iter()).fold(F::zero(), |a, (&x, &y)| a + x * y);
                for (g, &pr) in drow.iter_mut().zip(prow) {
                    *g = pr * (*g - dot);
                }
                ds[r * len + i + 1..(r + 1) * len].iter_mut().for_each(|g| *g = F::zero());
            }
            // ds now holds dL/da; gate gradients read it before scaling
            if let (Some(gi), Some(hg)) = (ix.gate, cache.gates.get(head)) {
                let mut dl = vec![F::zero(); len];
                let mut dgamma = F::zero();
                let mut dzg = vec![F::zero(); nq];
                for r in 0..nq {
                    let i = q0 + r;
                    let fi = F::of(i as f64);
                    let rate = hg.gamma * hg.g[r] / t;
                    let mut dr = F::zero();
                    for j in 0..=i {
                        let da = ds[r * len + j];
                        let lj = hg.l[j];
                        let fj = F::of(j as f64);
                        dr += da * (fj * (F::one() - lj) + fi * lj);
                        dl[j] += da * rate * (fi - fj);
                    }
                    dgamma += dr * hg.g[r] / t;
                    dzg[r] = dr * hg.gamma / t * sigmoid(hg.zg[r]);
                }
                grads[gi.gamma][head] += dgamma * sigmoid(w[gi.gamma][head]);
                let dyl: Vec<F> = dl.iter().zip(&hg.l).map(|(&g, &l)| g * l * (F::one() - l)).collect();
                let (src_q, src_k) = match cfg.gate_source {
                    GateSource::PreRotation => (&cache.q_pre, &cache.k_pre),
                    GateSource::PostRotation => (&cache.q_rot, &cache.k_rot),
                };
                for (r, &z) in dzg.iter().enumerate() {
                    grads[gi.b_g][head] += z;
                    for c in 0..dq {
                        grads[gi.w_g][head * dq + c] += z * src_q[r * hq + head * dq + c];
                    }
                }
                for (j, &y) in dyl.iter().enumerate() {
                    grads[gi.b_l][head] += y;
                    for c in 0..dq {
                        grads[gi.w_l][head * dq + c] += y * src_k[j * hq + head * dq + c];
                    }
                }
                dgate_q.push((head, dzg));
                dgate_k.push((head, dyl));
            }
            ds.iter_mut().for_each(|g| *g *= scale);
            gemm(nq, len, dq, &ds, View::rm(0, len), &cache.k_rot, View::rm(head * dq, hq), F::zero(), &mut dq_rot, View::rm(head * dq, hq));
            gemm(len, nq, dq, &ds, View::tr(0, len), &cache.q_rot, View::rm(head * dq, hq), F::zero(), &mut dk_rot, View::rm(head * dq, hq));
        }

        let add_gate_terms = |dq_buf: &mut [F], dk_buf: &mut [F]| {
            if let Some(gi) = ix.gate {
                for (head, dz) in &dgate_q {
                    let wg = &w[gi.w_g][head * dq..(head + 1) * dq];
                    for (r, &z) in dz.iter().enumerate() {
                        for c in 0..dq {
                            dq_buf[r * hq + head * dq + c] += z * wg[c];
                        }
                    }
                }
                for (head, dy) in &dgate_k {
                    let wl = &w[gi.w_l][head * dq..(head + 1) * dq];
                    for (j, &y) in dy.iter().enumerate() {
                        for c in 0..dq {
                            dk_buf[j * hq + head * dq + c] += y * wl[c];
                        }
                    }
                }
            }
        };
        if cfg.gate_source == GateSource::PostRotation {
            add_gate_terms(&mut dq_rot, &mut dk_rot);
        }
        if let Some(r) = rot {
            r.apply(&mut dq_rot, q0, hq, dq, true);
            r.apply(&mut dk_rot, 0, hq, dq, true);
        }
        let (mut dq_pre, mut dk_pre) = (dq_rot, dk_rot);
        if cfg.gate_source == GateSource::PreRotation {
            add_gate_terms(&mut dq_pre, &mut dk_pre);
        }

        let dh_q = {
            let (dw, db) = split2(grads, ix.wq, ix.bq);
            linear_backward(&cache.h[q0 * d..], &w[ix.wq], &dq_pre, dw, Some(db), nq, d, hq)
        };
        let mut dh = {
            let (dw, db) = split2(grads, ix.wk, ix.bk);
            linear_backward(&cache.h, &w[ix.wk], &dk_pre, dw, Some(db), len, d, hq)
        };
        let dh_v = {
            let (dw, db) = split2(grads, ix.wv, ix.bv);
            linear_backward(&cache.h, &w[ix.wv], &dv, dw, Some(db), len, d, d)
        };
        dh.iter_mut().zip(&dh_v).for_each(|(a, &b)| *a += b);
        dh[q0 * d..].iter_mut().zip(&dh_q).for_each(|(a, &b)| *a += b);
        let mut dx = {
            let (dw, db) = split2(grads, ix.ln1_w, ix.ln1_b);
            layer_norm_backward(&dh, &cache.ln1, &w[ix.ln1_w], dw, db, d)
        };
        dx[q0 * d..].iter_mut().zip(&dx1).for_each(|(a, &b)| *a += b);
        dx
    }

    /// Runs all blocks; the last block computes only rows `last_q0..`.
    fn trunk(
        &self,
        tokens: &[u32],
        last_q0: usize,
        mut trace: Option<(&mut Trace, Capture)>,
        keep: bool,
    ) -> Result<(Vec<F>, Vec<LayerCache<F>>, Option<RotTable<F>>)> {
        self.check_tokens(tokens)?;
        let rot = RotTable::new(&self.cfg.kind, self.cfg.qk_dim, tokens.len())?;
        let mut x = self.embed(tokens);
        let mut caches = Vec::new();
        for li in 0..self.cfg.n_layer {
            let q0 = if li + 1 == self.cfg.n_layer { last_q0 } else { 0 };
            let mut heads = Vec::new();
            let tr = trace.as_mut().map(|(_, cap)| (&mut heads, *cap));
            let (next, cache) = self.layer_forward(li, &x, q0, rot.as_ref(), tr);
            if let Some((t, _)) = trace.as_mut() {
                t.layers.push(heads);
            }
            if keep {
                caches.push(cache);
            }
            x = next;
        }
        Ok((x, caches, rot))
    }

    /// Logits at every position (`L × V`) and an optional trace.
    pub fn forward(&self, tokens: &[u32], capture: Option<Capture>) -> Result<(Matrix, Option<Trace>)> {
        let mut trace = Trace { layers: Vec::new() };
        let (x, _, _) = self.trunk(tokens, 0, capture.map(|c| (&mut trace, c)), false)?;
        let logits = self.head_logits(&x);
        let v = self.cfg.vocab_size;
        let m = Matrix::from_fn(tokens.len(), v, |r, c| logits[r * v + c].f64());
        Ok((m, capture.map(|_| trace)))
    }

    fn head_logits(&self, x: &[F]) -> Vec<F> {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let (hf, _) = layer_norm(x, &self.w[self.idx.lnf_w], &self.w[self.idx.lnf_b], d);
        linear(&hf, &self.w[self.idx.head], None, x.len() / d, d, v)
    }

    /// Digit logits at the final position, computing only what that row needs.
    pub fn predict(&self, tokens: &[u32]) -> Result<[f64; N_DIGITS]> {
        let (x, _, _) = self.trunk(tokens, tokens.len() - tokens.len().min(1), None, false)?;
        let logits = self.head_logits(&x);
        Ok(std::array::from_fn(|c| logits[c].f64()))
    }

    /// Cross-entropy over the ten digit logits at the last position and its
    /// gradient with respect to every parameter, for one sequence.
    pub fn sample_loss_grad(&self, tokens: &[u32], target: u8) -> Result<(Prediction, Vec<Vec<F>>)> {
        if target as usize >= N_DIGITS {
            return Err(Error::InvalidArgument(format!("target digit {target}")));
        }
        let len = tokens.len();
        let (x, caches, rot) = self.trunk(tokens, len.saturating_sub(1), None, true)?;
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let (hf, lnf) = layer_norm(&x, &self.w[self.idx.lnf_w], &self.w[self.idx.lnf_b], d);
        let logits = linear(&hf, &self.w[self.idx.head], None, 1, d, v);
        let digit_logits: [f64; N_DIGITS] = std::array::from_fn(|c| logits[c].f64());
        let max = logits[..N_DIGITS].iter().fold(F::neg_infinity(), |m, &a| m.max(a));
        let z = logits[..N_DIGITS].iter().fold(F::zero(), |a, &l| a + (l - max).exp());
        let loss = (z.ln() + max - logits[target as usize]).f64();

        let mut grads: Vec<Vec<F>> = self.w.iter().map(|p| vec![F::zero(); p.len()]).collect();
        let mut dlogits = vec![F::zero(); v];
        for c in 0..N_DIGITS {
            dlogits[c] = (logits[c] - max).exp() / z;
        }
        dlogits[target as usize] -= F::one();
        let dhf = linear_backward(&hf, &self.w[self.idx.head], &dlogits, &mut grads[self.idx.head], None, 1, d, v);
        let mut dx = {
            let (dw, db) = split2(&mut grads, self.idx.lnf_w, self.idx.lnf_b);
            layer_norm_backward(&dhf, &lnf, &self.w[self.idx.lnf_w], dw, db, d)
        };
        for li in (0..self.cfg.n_layer).rev() {
            dx = self.layer_backward(li, &caches[li], &dx, rot.as_ref(), &mut grads);
        }
        let wte = &mut grads[self.idx.wte];
        for (r, &tok) in tokens.iter().enumerate() {
            let row = &mut wte[tok as usize * d..(tok as usize + 1) * d];
            row.iter_mut().zip(&dx[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
        }
        Ok((Prediction { digit_logits, loss }, grads))
    }

    /// Mean loss and gradient over a batch; per-sample gradients are summed
    /// in sample order so the result does not depend on the thread count.
    pub fn batch_loss_grad(&self, batch: &[NiahSample]) -> Result<(f64, Vec<Vec<f64>>, Vec<Prediction>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per: Vec<(Prediction, Vec<Vec<F>>)> =
            batch.par_iter().map(|s| self.sample_loss_grad(&s.tokens, s.target)).collect::<Result<_>>()?;
        let mut total: Vec<Vec<f64>> = self.w.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(per.len());
        for (pred, g) in per {
            loss += pred.loss;
            for (acc, part) in total.iter_mut().zip(&g) {
                acc.iter_mut().zip(part).for_each(|(a, &b)| *a += b.f64());
            }
            preds.push(pred);
        }
        let inv = 1.0 / batch.len() as f64;
        total.iter_mut().flatten().for_each(|g| *g *= inv);
        Ok((loss * inv, total, preds))
    }
}

fn split2<F>(grads: &mut [Vec<F>], a: usize, b: usize) -> (&mut [F], &mut [F]) {
    assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Mean loss and gradient in the requested precision over a batch of samples.
pub fn loss_and_grad<F: Scalar>(params: &ParamStore, cfg: &ModelConfig, batch: &[NiahSample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let net = Network::<F>::new(cfg, params)?;
    let (loss, grads, _) = net.batch_loss_grad(batch)?;
    Ok((loss, grads))
}

/// Logits over all positions plus an optional trace.
pub fn forward<F: Scalar>(
    params: &ParamStore,
    cfg: &ModelConfig,
    tokens: &[u32],
    capture: Option<Capture>,
) -> Result<(Matrix, Option<Trace>)> {
    Network::<F>::new(cfg, params)?.forward(tokens, capture)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Floor of the relative-error denominator so that coordinates with
/// vanishing gradient are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences in f64 against the analytic gradient at the
/// given `(param, element)` coordinates.
pub fn gradient_check(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[NiahSample],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<Vec<GradCheckEntry>> {
    let (_, grads) = loss_and_grad::<f64>(params, cfg, batch)?;
    let loss_at = |p: &ParamStore| -> Result<f64> {
        let net = Network::<f64>::new(cfg, p)?;
        let mut total = 0.0;
        for s in batch {
            total += net.sample_loss_grad(&s.tokens, s.target)?.0.loss;
        }
        Ok(total / batch.len() as f64)
    };
    coords
        .iter()
        .map(|&(pi, ei)| {
            let mut p = params.clone();
            let x0 = p.params[pi].data[ei];
            p.params[pi].data[ei] = x0 + h;
            let up = loss_at(&p)?;
            p.params[pi].data[ei] = x0 - h;
            let down = loss_at(&p)?;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi][ei];
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            Ok(GradCheckEntry { name: params.params[pi].name.clone(), index: ei, analytic, numeric, rel_error })
        })
        .collect()
}

/// Per-layer means of the gate values over a batch (`ḡ`, `l̄`, `Γ`), used by
/// the training log. Empty without the gate.
pub fn gate_means<F: Scalar>(net: &Network<F>, batch: &[NiahSample]) -> Result<Vec<(f64, f64, f64)>> {
    if !net.cfg.gape || batch.is_empty() {
        return Ok(Vec::new());
    }
    let traces: Vec<Trace> = batch
        .par_iter()
        .map(|s| net.forward(&s.tokens, Some(Capture::NONE)).map(|(_, t)| t.expect("trace requested")))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(net.cfg.n_layer);
    for li in 0..net.cfg.n_layer {
        let (mut g, mut l, mut gamma, mut ng, mut nl, mut nh) = (0.0, 0.0, 0.0, 0usize, 0usize, 0usize);
        for t in &traces {
            for head in &t.layers[li] {
                let gt = head.gates.as_ref().expect("gated model");
                g += gt.g.iter().sum::<f64>();
                ng += gt.g.len();
                l += gt.l.iter().sum::<f64>();
                nl += gt.l.len();
                gamma += gt.gamma;
                nh += 1;
            }
        }
        out.push((g / ng as f64, l / nl as f64, gamma / nh as f64));
    }
    Ok(out)
}

/// Extra key=value metadata carried in checkpoints (regime, seed, ...).
pub type Metadata = BTreeMap<String, String>;
