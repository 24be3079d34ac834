//! Baseline positional schemes: NoPE, RoPE, partial RoPE and ALiBi.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_PROPE_FRACTION: f64 = 0.75;

/// Rotary frequencies `base^(-2k/d)` for `k = 0..d/2`, highest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySpectrum {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl FrequencySpectrum {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("rotary dim {head_dim} must be even and positive")));
        }
        if !(base > 1.0) {
            return Err(Error::InvalidArgument(format!("rotary base {base} must exceed 1")));
        }
        let freqs = (0..head_dim / 2)
            .map(|k| base.powf(-(2.0 * k as f64) / head_dim as f64))
            .collect();
        Ok(Self { head_dim, base, freqs })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn n_chunks(&self) -> usize {
        self.freqs.len()
    }
}

/// Positional scheme governing the semantic logits.
#[derive(Clone, Debug, PartialEq)]
pub enum EncodingKind {
    NoPE,
    RoPE { base: f64 },
    /// Rotates only the highest-frequency `fraction` of 2-D chunks.
    PRoPE { base: f64, fraction: f64 },
    /// Additive bias `-slope_h (i - j)`, one slope per head.
    ALiBi { slopes: Vec<f64> },
}

impl EncodingKind {
    pub fn rope() -> Self {
        Self::RoPE { base: DEFAULT_ROPE_BASE }
    }

    pub fn prope() -> Self {
        Self::PRoPE { base: DEFAULT_ROPE_BASE, fraction: DEFAULT_PROPE_FRACTION }
    }

    pub fn alibi(n_heads: usize) -> Self {
        Self::ALiBi { slopes: alibi_slopes(n_heads) }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::NoPE => Ok(()),
            Self::RoPE { base } => check_base(*base),
            Self::PRoPE { base, fraction } => {
                check_base(*base)?;
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::InvalidArgument(format!("p-RoPE fraction {fraction} outside [0, 1]")));
                }
                Ok(())
            }
            Self::ALiBi { slopes } => {
                if slopes.is_empty() || slopes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                    return Err(Error::InvalidArgument("ALiBi slopes must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn is_rotary(&self) -> bool {
        matches!(self, Self::RoPE { .. } | Self::PRoPE { .. })
    }

    /// Short name used on the command line and in checkpoints.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::NoPE => "nope",
            Self::RoPE { .. } => "rope",
            Self::PRoPE { .. } => "prope",
            Self::ALiBi { .. } => "alibi",
        }
    }

    /// Rotation plan for vectors with `dim` semantic coordinates, if rotary.
    pub fn rotation(&self, dim: usize) -> Result<Option<(FrequencySpectrum, usize)>> {
        let (base, fraction) = match self {
            Self::RoPE { base } => (*base, 1.0),
            Self::PRoPE { base, fraction } => (*base, *fraction),
            _ => return Ok(None),
        };
        // odd semantic widths leave the trailing coordinate unrotated
        let even = dim - dim % 2;
        if even == 0 {
            return Ok(None);
        }
        let spectrum = FrequencySpectrum::new(even, base)?;
        let chunks = (fraction * spectrum.n_chunks() as f64).round() as usize;
        Ok(Some((spectrum, 2 * chunks)))
    }

    pub fn alibi_slope(&self, head: usize) -> Option<f64> {
        match self {
            Self::ALiBi { slopes } => Some(slopes[head % slopes.len()]),
            _ => None,
        }
    }
}

fn check_base(base: f64) -> Result<()> {
    if base > 1.0 && base.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rotary base {base} must exceed 1")))
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Parses `nope`, `rope`, `prope` (default base and fraction) or `alibi`
/// (slopes filled in later from the head count; see [`alibi_slopes`]).
impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nope" => Ok(Self::NoPE),
            "rope" => Ok(Self::rope()),
            "prope" | "p-rope" => Ok(Self::prope()),
            "alibi" => Ok(Self::ALiBi { slopes: Vec::new() }),
            other => Err(Error::InvalidArgument(format!("unknown positional encoding `{other}`"))),
        }
    }
}

/// Geometric ALiBi slopes `2^(-8h/H)` for heads `h = 1..=H`.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads).map(|h| 2f64.powf(-8.0 * h as f64 / n_heads as f64)).collect()
}

/// Rotates the first `rotated_dims` coordinates of every row in adjacent
/// pairs `(2c, 2c+1)` by angle `position · freq[c]`; the rest pass through.
pub fn apply_rotary(
    vecs: &Matrix,
    positions: &[usize],
    spectrum: &FrequencySpectrum,
    rotated_dims: usize,
) -> Result<Matrix> {
    if rotated_dims % 2 != 0 {
        return Err(Error::InvalidArgument(format!("rotated_dims {rotated_dims} is odd")));
    }
    if rotated_dims > vecs.cols() || rotated_dims / 2 > spectrum.n_chunks() {
        return Err(Error::DimensionMismatch(format!(
            "rotating {rotated_dims} of {} coordinates with {} chunks",
            vecs.cols(),
            spectrum.n_chunks()
        )));
    }
    if positions.len() != vecs.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} positions for {} rows",
            positions.len(),
            vecs.rows()
        )));
    }
    let mut out = vecs.clone();
    for (r, &pos) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), pos as f64, &spectrum.freqs()[..rotated_dims / 2], 1.0);
    }
    Ok(out)
}

/// In-place rotation of pairs by `sign · pos · freq`. `sign = -1` inverts.
pub(crate) fn rotate_row(row: &mut [f64], pos: f64, freqs: &[f64], sign: f64) {
    for (c, &freq) in freqs.iter().enumerate() {
        let (sin, cos) = (sign * pos * freq).sin_cos();
        let (x, y) = (row[2 * c], row[2 * c + 1]);
        row[2 * c] = x * cos - y * sin;
        row[2 * c + 1] = x * sin + y * cos;
    }
}

/// Rotates `q` and `k` copies if the encoding is rotary; otherwise clones.
pub fn rotate_pair(q: &Matrix, k: &Matrix, positions: &[usize], kind: &EncodingKind) -> Result<(Matrix, Matrix)> {
    match kind.rotation(q.cols())? {
        Some((spectrum, dims)) => Ok((
            apply_rotary(q, positions, &spectrum, dims)?,
            apply_rotary(k, positions, &spectrum, dims)?,
        )),
        None => Ok((q.clone(), k.clone())),
    }
}

/// `s_ij = scale · rot(q_i) · rot(k_j)` for all pairs (causality is applied
/// by the caller). ALiBi and NoPE use the plain scaled dot product.
pub fn semantic_logits_scaled(
    q: &Matrix,
    k: &Matrix,
    positions: &[usize],
    kind: &EncodingKind,
    scale: f64,
) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::DimensionMismatch(format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    kind.validate()?;
    let (qr, kr) = rotate_pair(q, k, positions, kind)?;
    Ok(Matrix::from_fn(q.rows(), k.rows(), |i, j| scale * dot(qr.row(i), kr.row(j))))
}

/// Semantic logits with the standard `1/√d` scaling over the vector width.
pub fn semantic_logits(q: &Matrix, k: &Matrix, positions: &[usize], kind: &EncodingKind) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    semantic_logits_scaled(q, k, positions, kind, scale)
}

/// `bias[i][j] = -slope · (i - j)` on and below the diagonal, zero above.
pub fn alibi_bias(len: usize, slope: f64) -> Result<Matrix> {
    if !(slope > 0.0) {
        return Err(Error::InvalidArgument(format!("ALiBi slope {slope} must be positive")));
    }
    Ok(Matrix::from_fn(len, len, |i, j| if j <= i { -slope * (i - j) as f64 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm2, Rng};
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn spectrum_shape() {
        let s = FrequencySpectrum::new(64, 10_000.0).unwrap();
        assert_eq!(s.freqs()[0], 1.0);
        assert!(s.freqs().windows(2).all(|w| w[1] < w[0]));
        let last = *s.freqs().last().unwrap();
        assert!((last - 10_000f64.powf(-62.0 / 64.0)).abs() < 1e-15);
        assert!(last < 2.0 / 10_000.0 && last > 0.5 / 10_000.0);
        assert!(FrequencySpectrum::new(5, 10_000.0).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let mut rng = Rng::new(1);
        let v = random(3, 8, &mut rng);
        let s = FrequencySpectrum::new(8, 10_000.0).unwrap();
        assert_eq!(apply_rotary(&v, &[0, 0, 0], &s, 8).unwrap(), v);
    }

    #[test]
    fn quarter_turn() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = FrequencySpectrum::new(2, 10_000.0).unwrap();
        // freq 1 at chunk 0; emulate position π/2 through a scaled spectrum
        let mut row = v.row(0).to_vec();
        rotate_row(&mut row, std::f64::consts::FRAC_PI_2, s.freqs(), 1.0);
        assert!(row[0].abs() < 1e-15 && (row[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn odd_rotated_dims_rejected() {
        let s = FrequencySpectrum::new(4, 10_000.0).unwrap();
        assert!(apply_rotary(&Matrix::zeros(1, 4), &[1], &s, 3).is_err());
    }

    #[test]
    fn prope_boundaries() {
        let mut rng = Rng::new(2);
        let q = random(6, 8, &mut rng);
        let k = random(6, 8, &mut rng);
        let pos: Vec<usize> = (0..6).map(|p| p * 7 + 3).collect();
        let full = semantic_logits(&q, &k, &pos, &EncodingKind::rope()).unwrap();
        let one = semantic_logits(&q, &k, &pos, &EncodingKind::PRoPE { base: 1e4, fraction: 1.0 }).unwrap();
        assert_eq!(full, one);
        let none = semantic_logits(&q, &k, &pos, &EncodingKind::NoPE).unwrap();
        let zero = semantic_logits(&q, &k, &pos, &EncodingKind::PRoPE { base: 1e4, fraction: 0.0 }).unwrap();
        assert_eq!(none, zero);
    }

    #[test]
    fn prope_keeps_low_frequencies_unrotated() {
        let (spectrum, dims) = EncodingKind::prope().rotation(32).unwrap().unwrap();
        assert_eq!(spectrum.n_chunks(), 16);
        assert_eq!(dims, 24);
    }

    #[test]
    fn nope_constant_rows() {
        let e1 = Matrix::from_fn(5, 4, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let pos: Vec<usize> = (0..5).collect();
        let s = semantic_logits(&e1, &e1, &pos, &EncodingKind::NoPE).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.5));
        // ALiBi has no semantic contribution of its own
        let a = semantic_logits(&e1, &e1, &pos, &EncodingKind::alibi(1)).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn rope_depends_on_offset_only() {
        let mut rng = Rng::new(3);
        let qrow = rng.normal_vec(8);
        let krow = rng.normal_vec(8);
        let q = Matrix::from_fn(10, 8, |_, c| qrow[c]);
        let k = Matrix::from_fn(10, 8, |_, c| krow[c]);
        let pos: Vec<usize> = (0..10).collect();
        let s = semantic_logits(&q, &k, &pos, &EncodingKind::rope()).unwrap();
        assert!((s.get(5, 3) - s.get(9, 7)).abs() < 1e-12);
    }

    #[test]
    fn alibi_values() {
        let b = alibi_bias(6, 0.5).unwrap();
        assert_eq!(b.get(3, 3), 0.0);
        assert_eq!(b.get(5, 1), -2.0);
        for j in 1..=5 {
            assert!(b.get(5, j - 1) < b.get(5, j));
        }
        assert!(alibi_bias(4, 0.0).is_err());
        assert_eq!(alibi_slopes(2), vec![1.0 / 16.0, 1.0 / 256.0]);
    }

    proptest! {
        #[test]
        fn relative_phase(seed in 0u64..1000, i in 0usize..500, j in 0usize..500, shift in 0usize..5000) {
            let mut rng = Rng::new(seed);
            let q = Matrix::new(1, 8, rng.normal_vec(8)).unwrap();
            let k = Matrix::new(1, 8, rng.normal_vec(8)).unwrap();
            let (spec, dims) = EncodingKind::rope().rotation(8).unwrap().unwrap();
            let at = |pi: usize, pj: usize| {
                let qr = apply_rotary(&q, &[pi], &spec, dims).unwrap();
                let kr = apply_rotary(&k, &[pj], &spec, dims).unwrap();
                dot(qr.row(0), kr.row(0))
            };
            prop_assert!((at(i, j) - at(i + shift, j + shift)).abs() < 1e-10);
        }

        #[test]
        fn rotation_isometry(seed in 0u64..1000, pos in 0usize..100_000) {
            let mut rng = Rng::new(seed);
            let v = Matrix::new(1, 16, rng.normal_vec(16)).unwrap();
            let spec = FrequencySpectrum::new(16, 10_000.0).unwrap();
            let r = apply_rotary(&v, &[pos], &spec, 16).unwrap();
            prop_assert!((norm2(r.row(0)) - norm2(v.row(0))).abs() < 1e-12);
            for c in 0..8 {
                let a = norm2(&v.row(0)[2 * c..2 * c + 2]);
                let b = norm2(&r.row(0)[2 * c..2 * c + 2]);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
