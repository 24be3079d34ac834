//! Synthetic needle-in-a-haystack data: sequences of filler tokens with
//! `KEY = d` triples, ending in a `?` query whose label is one needle's digit.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::numerics::Rng;
use crate::{Error, Result};

pub const NEEDLE_LEN: usize = 3;
pub const TOKENS_PER_NEEDLE: usize = 64;
pub const MAX_PLACEMENT_RETRIES: usize = 100;

/// Fixed token ids: digits 0..=9, then `KEY`, `=`, `?`, then 14 fillers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiahVocab {
    pub digits: [u32; 10],
    pub key_tok: u32,
    pub eq_tok: u32,
    pub query_tok: u32,
    pub fillers: [u32; 14],
}

impl NiahVocab {
    pub const SIZE: usize = 27;

    pub fn standard() -> Self {
        NiahVocab {
            digits: std::array::from_fn(|d| d as u32),
            key_tok: 10,
            eq_tok: 11,
            query_tok: 12,
            fillers: std::array::from_fn(|f| 13 + f as u32),
        }
    }

    pub fn is_digit(&self, tok: u32) -> bool {
        self.digit_of(tok).is_some()
    }

    pub fn digit_of(&self, tok: u32) -> Option<u8> {
        self.digits.iter().position(|&d| d == tok).map(|d| d as u8)
    }

    pub fn is_filler(&self, tok: u32) -> bool {
        self.fillers.contains(&tok)
    }
}

impl Default for NiahVocab {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    First,
    Last,
    Middle,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::First => "first",
            Regime::Last => "last",
            Regime::Middle => "middle",
        }
    }

    /// Index of the target needle among `n`.
    pub fn target_index(self, n: usize) -> usize {
        match self {
            Regime::First => 0,
            Regime::Last => n - 1,
            Regime::Middle => n / 2,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "needle-first" | "far" => Ok(Regime::First),
            "last" | "needle-last" | "close" => Ok(Regime::Last),
            "middle" | "needle-middle" => Ok(Regime::Middle),
            _ => Err(Error::InvalidArgument(format!("unknown regime `{s}` (first|last|middle)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiahSample {
    pub tokens: Vec<u32>,
    /// Start index of each `KEY` token, increasing.
    pub needle_positions: Vec<usize>,
    pub needle_digits: Vec<u8>,
    pub target: u8,
    pub regime: Regime,
}

impl NiahSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_position(&self) -> usize {
        self.needle_positions[self.regime.target_index(self.needle_positions.len())]
    }

    /// Recovers the needles by scanning for `KEY`.
    pub fn parse_needles(&self, vocab: &NiahVocab) -> Vec<(usize, u8)> {
        let t = &self.tokens;
        (0..t.len().saturating_sub(2))
            .filter(|&p| t[p] == vocab.key_tok && t[p + 1] == vocab.eq_tok)
            .filter_map(|p| vocab.digit_of(t[p + 2]).map(|d| (p, d)))
            .collect()
    }
}

pub fn needle_count(len: usize) -> usize {
    len / TOKENS_PER_NEEDLE
}

/// `[lo, hi)` bounds of chunk `c` of `n` over the prefix `0..len-1`.
pub fn chunk_bounds(len: usize, n: usize, c: usize) -> (usize, usize) {
    let prefix = len - 1;
    (c * prefix / n, (c + 1) * prefix / n)
}

pub fn generate(len: usize, regime: Regime, rng: &mut Rng, n_override: Option<usize>) -> Result<NiahSample> {
    let vocab = NiahVocab::standard();
    let n = n_override.unwrap_or_else(|| needle_count(len));
    if n == 0 {
        return Err(Error::InfeasiblePacking(format!("L={len} yields no needles; need L ≥ 64 or an explicit count")));
    }
    if NEEDLE_LEN * n + 1 > len {
        return Err(Error::InfeasiblePacking(format!("{n} needles do not fit in L={len}")));
    }
    let prefix = len - 1;
    let last_start = prefix - NEEDLE_LEN;
    let mut starts = Vec::with_capacity(n);
    let mut occupied_until = 0usize;
    for c in 0..n {
        let (lo, hi) = chunk_bounds(len, n, c);
        let top = (hi - 1).min(last_start);
        if lo > top {
            return Err(Error::InfeasiblePacking(format!("chunk {c} of L={len} cannot hold a needle")));
        }
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let s = rng.int_in(lo, top);
            if s >= occupied_until {
                placed = Some(s);
                break;
            }
        }
        let s = placed.ok_or_else(|| {
            Error::InfeasiblePacking(format!(
                "chunk {c} of L={len}: no overlap-free start after {MAX_PLACEMENT_RETRIES} draws"
            ))
        })?;
        occupied_until = s + NEEDLE_LEN;
        starts.push(s);
    }
    let digits: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
    let mut tokens = vec![u32::MAX; len];
    for (&s, &d) in starts.iter().zip(&digits) {
        tokens[s] = vocab.key_tok;
        tokens[s + 1] = vocab.eq_tok;
        tokens[s + 2] = vocab.digits[d as usize];
    }
    tokens[len - 1] = vocab.query_tok;
    for tok in tokens.iter_mut().filter(|t| **t == u32::MAX) {
        *tok = vocab.fillers[rng.below(vocab.fillers.len())];
    }
    let target = digits[regime.target_index(n)];
    Ok(NiahSample { tokens, needle_positions: starts, needle_digits: digits, target, regime })
}

/// `count` samples where sample `s` uses generator `Rng::new(seed).derive(s)`.
pub fn generate_batch(len: usize, regime: Regime, seed: u64, offset: u64, count: usize) -> Result<Vec<NiahSample>> {
    let base = Rng::new(seed);
    (0..count as u64)
        .into_par_iter()
        .map(|s| generate(len, regime, &mut base.derive(offset + s), None))
        .collect()
}

/// Argmax over the ten digit logits, ties to the lowest digit.
pub fn decode_target(sample: &NiahSample, logits_at_query: &[f64]) -> Result<(u8, bool)> {
    if logits_at_query.len() != 10 {
        return Err(Error::DimensionMismatch(format!("expected 10 digit logits, got {}", logits_at_query.len())));
    }
    let mut best = 0;
    for (d, &x) in logits_at_query.iter().enumerate() {
        if x > logits_at_query[best] {
            best = d;
        }
    }
    Ok((best as u8, best as u8 == sample.target))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub len: usize,
    pub n: usize,
    pub regime: Regime,
    pub seed: u64,
    pub count: usize,
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

/// Line format: `niah L=<len> n=<n> regime=<r> seed=<s> count=<c>`, then one
/// line per sample: `tokens | positions | digits | target`.
pub fn write_dataset<W: Write>(mut out: W, header: &DatasetHeader, samples: &[NiahSample]) -> Result<()> {
    writeln!(
        out,
        "niah L={} n={} regime={} seed={} count={}",
        header.len, header.n, header.regime, header.seed, header.count
    )?;
    for s in samples {
        writeln!(
            out,
            "{} | {} | {} | {}",
            join(&s.tokens, " "),
            join(&s.needle_positions, " "),
            join(&s.needle_digits, " "),
            s.target
        )?;
    }
    Ok(())
}

fn parse_list<T: FromStr>(field: &str, what: &str) -> Result<Vec<T>> {
    field
        .split_whitespace()
        .map(|x| x.parse::<T>().map_err(|_| Error::Config(format!("bad {what} entry `{x}`"))))
        .collect()
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<NiahSample>)> {
    let mut lines = input.lines();
    let head = lines.next().ok_or_else(|| Error::Config("empty dataset file".into()))??;
    let mut fields = head.split_whitespace();
    if fields.next() != Some("niah") {
        return Err(Error::Config("missing `niah` header".into()));
    }
    let mut get = |key: &str| -> Result<String> {
        let f = fields.next().ok_or_else(|| Error::Config(format!("header lacks `{key}`")))?;
        f.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("expected `{key}=`, found `{f}`")))
    };
    let num = |s: String, key: &str| s.parse::<u64>().map_err(|_| Error::Config(format!("bad header value for {key}")));
    let len = num(get("L")?, "L")? as usize;
    let n = num(get("n")?, "n")? as usize;
    let regime: Regime = get("regime")?.parse()?;
    let seed = num(get("seed")?, "seed")?;
    let count = num(get("count")?, "count")? as usize;
    let header = DatasetHeader { len, n, regime, seed, count };
    let mut samples = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("record {} has {} fields", samples.len(), parts.len())));
        }
        let tokens: Vec<u32> = parse_list(parts[0], "token")?;
        if tokens.len() != len {
            return Err(Error::Config(format!("record {} has length {}", samples.len(), tokens.len())));
        }
        let target = parts[3].trim().parse::<u8>().map_err(|_| Error::Config("bad target".into()))?;
        samples.push(NiahSample {
            tokens,
            needle_positions: parse_list(parts[1], "position")?,
            needle_digits: parse_list(parts[2], "digit")?,
            target,
            regime,
        });
    }
    if samples.len() != count {
        return Err(Error::Config(format!("header says {count} samples, found {}", samples.len())));
    }
    Ok((header, samples))
}
