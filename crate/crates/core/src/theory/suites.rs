//! Brute-force verification suites. Each trial draws an explicit attention
//! instance from its own derived generator, computes softmax weights
//! directly, and compares them with the closed forms in the parent module.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::*;
use crate::attention::{attend, AttentionInputs, GapeSetup, GateSource, MaskPath};
use crate::gape::{landmark_dominance_threshold, mask_gape, mask_gape_at, GateParams, GateValues};
use crate::numerics::{dot, log_sum_exp, Matrix, Rng};
use crate::posenc::{rotate_row, EncodingKind, FrequencySpectrum};

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const TRANSLATION_TOL: f64 = 1e-10;
pub const BOUND_TOL: f64 = 1e-12;
pub const COLLAPSE_GRID: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Thm1,
    Thm2,
    Thm3,
    LemmaGrowth,
    EntropyCollapse,
    Translation,
    Equivalence,
    NiahThreshold,
}

impl Suite {
    pub const INDIVIDUAL: [Suite; 8] = [
        Suite::Thm1,
        Suite::Thm2,
        Suite::Thm3,
        Suite::LemmaGrowth,
        Suite::EntropyCollapse,
        Suite::Translation,
        Suite::Equivalence,
        Suite::NiahThreshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Thm1 => "thm1",
            Suite::Thm2 => "thm2",
            Suite::Thm3 => "thm3",
            Suite::LemmaGrowth => "lemma-growth",
            Suite::EntropyCollapse => "entropy-collapse",
            Suite::Translation => "translation",
            Suite::Equivalence => "equivalence",
            Suite::NiahThreshold => "niah-threshold",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Suite::All)
            .chain(Suite::INDIVIDUAL)
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}`")))
    }
}

/// Runs `trials` seeded trials of a suite (every suite for [`Suite::All`]).
/// Output is independent of the rayon pool size.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<Vec<BoundReport>> {
    if suite == Suite::All {
        let mut out = Vec::new();
        for (n, s) in Suite::INDIVIDUAL.iter().enumerate() {
            out.extend(run_suite(*s, trials, Rng::child_seed(seed, n as u64))?);
        }
        return Ok(out);
    }
    let trial: fn(&mut Rng) -> Result<Vec<BoundReport>> = match suite {
        Suite::Thm1 => thm1_trial,
        Suite::Thm2 => thm2_trial,
        Suite::Thm3 => thm3_trial,
        Suite::LemmaGrowth => lemma_growth_trial,
        Suite::EntropyCollapse => entropy_collapse_trial,
        Suite::Translation => translation_trial,
        Suite::Equivalence => equivalence_trial,
        Suite::NiahThreshold => niah_threshold_trial,
        Suite::All => unreachable!(),
    };
    let base = Rng::new(seed);
    let per_trial: Vec<Vec<BoundReport>> =
        (0..trials as u64).into_par_iter().map(|t| trial(&mut base.derive(t))).collect::<Result<_>>()?;
    let mut merged: Vec<BoundReport> = Vec::new();
    for reports in per_trial {
        if merged.is_empty() {
            merged = reports.iter().map(|r| BoundReport::new(r.name.clone(), r.tolerance)).collect();
        }
        for (acc, r) in merged.iter_mut().zip(&reports) {
            acc.merge(r);
        }
    }
    Ok(merged)
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.uniform()).exp()
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(d);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Scores `s_m = rot(q)·rot(k_m)` for keys `0..n` against a query at
/// position `n - 1`, with `‖q‖‖k_m‖ ≤ s_max` by construction. A quarter of
/// the keys are aligned and a quarter anti-aligned with the query so the
/// extreme values ±s_max are exercised.
fn bounded_scores(rng: &mut Rng, n: usize, s_max: f64) -> Vec<f64> {
    let d = 2 * rng.int_in(1, 4);
    let rotary = rng.bernoulli(0.5);
    let spectrum = FrequencySpectrum::new(d, 10_000.0).expect("even width");
    let q_norm = rng.uniform_range(0.2, 2.0);
    let q_dir = unit_vector(rng, d);
    let mut q: Vec<f64> = q_dir.iter().map(|x| x * q_norm).collect();
    if rotary {
        rotate_row(&mut q, (n - 1) as f64, spectrum.freqs(), 1.0);
    }
    (0..n)
        .map(|m| {
            let full = rng.bernoulli(0.3);
            let k_norm = s_max / q_norm * if full { 1.0 } else { rng.uniform() };
            let mut k: Vec<f64> = match rng.below(4) {
                0 => q_dir.iter().map(|x| x * k_norm).collect(),
                1 => q_dir.iter().map(|x| -x * k_norm).collect(),
                _ => unit_vector(rng, d).into_iter().map(|x| x * k_norm).collect(),
            };
            if rotary {
                rotate_row(&mut k, m as f64, spectrum.freqs(), 1.0);
            }
            dot(&q, &k)
        })
        .collect()
}

fn thm1_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut equality = BoundReport::new("thm1_protected_equality", BOUND_TOL);
    let mut near = BoundReport::new("thm1_near_saturated", BOUND_TOL);
    let mut above = BoundReport::new("thm1_dominance_above", 0.0);
    let mut below = BoundReport::new("thm1_failure_below", 0.0);

    let i = rng.int_in(2, 4096);
    let a = rng.below(i - 1);
    let b = rng.int_in(a + 1, i - 1);
    let l_b = if rng.bernoulli(0.2) { 0.0 } else { rng.uniform() };
    let gamma = rng.uniform_range(0.1, 3.0);
    let g = log_uniform(rng, 1e-3, 1e2);
    let t = rng.int_in(16, 4096) as f64;
    let mut l: Vec<f64> = (0..=i).map(|_| rng.uniform()).collect();
    let mut gv = GateValues::new(l.clone(), vec![g; i + 1], gamma, t)?;

    let level = mask_gape(i, i, &gv)?;
    let j = rng.below(i);
    gv.l[j] = 1.0;
    let diff = (mask_gape(i, j, &gv)? - level).abs();
    equality.record(BOUND_TOL * level.abs().max(1.0) - diff);
    gv.l[j] = 1.0 - 1e-6;
    let residual = gv.rate(i) * (i - j) as f64 * 1e-6;
    let diff = (mask_gape(i, j, &gv)? - level).abs();
    near.record(residual * (1.0 + 1e-6) + BOUND_TOL * level.abs().max(1.0) - diff);

    let star = landmark_dominance_threshold(i, a, b, l_b)?;
    let in_range = star > 0.0 && star < 1.0;
    l[b] = l_b;
    let mut probe = |l_a: f64| -> Result<f64> {
        l[a] = l_a;
        let gv = GateValues::new(l.clone(), vec![g; i + 1], gamma, t)?;
        Ok(mask_gape(i, a, &gv)? - mask_gape(i, b, &gv)?)
    };
    if star + 0.01 <= 1.0 {
        let margin = probe(star + 0.01)?;
        above.record_with(margin, in_range && margin > 0.0);
    }
    let upper = probe(1.0)?;
    above.record_with(upper, in_range && upper > 0.0);
    if star - 0.01 >= 0.0 {
        let margin = probe(star - 0.01)?;
        below.record_with(-margin, in_range && margin < 0.0);
    }
    Ok(vec![equality, near, above, below])
}

fn thm2_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut full = BoundReport::new("thm2_mass_bound", BOUND_TOL);
    let mut uniform = BoundReport::new("thm2_uniform_gap_bound", BOUND_TOL);
    let mut horizon = BoundReport::new("effective_context_length", BOUND_TOL);

    let n = rng.int_in(2, 128);
    let i = n - 1;
    let s_max = rng.uniform_range(0.05, 3.0);
    let scores = bounded_scores(rng, n, s_max);
    let p_protect = rng.uniform();
    let protected: Vec<bool> = (0..n).map(|j| j == i || rng.bernoulli(p_protect)).collect();
    let gamma = rng.uniform_range(0.2, 3.0);
    let t = rng.int_in(16, 2048) as f64;
    let rate = log_uniform(rng, 1e-3, 3.0);
    let g = rate * t / gamma;
    let p = log_uniform(rng, 1e-3, 0.5);

    let logits: Vec<f64> = (0..n)
        .map(|j| {
            let l = if protected[j] { 1.0 } else { 0.0 };
            scores[j] + mask_gape_at(i as f64, j as f64, g, l, gamma, t)
        })
        .collect();
    let alpha = crate::numerics::stable_softmax_row(&logits, &vec![true; n])?;
    let unprotected: Vec<usize> = (0..i).filter(|&j| !protected[j]).collect();
    let gaps: Vec<usize> = unprotected.iter().map(|&k| i - k).collect();
    let mass: f64 = unprotected.iter().map(|&k| alpha[k]).sum();

    let mut cfg = TheoremConfig { s_max, gamma, g, t, p, u_size: unprotected.len(), ..Default::default() };
    full.record(unprotected_mass_bound(&cfg, &gaps) - mass);
    if let Some(&delta_min) = gaps.iter().min() {
        cfg.delta_min = delta_min;
        uniform.record(unprotected_mass_bound_uniform(&cfg) - mass);
        let horizon_len = effective_context_length(&cfg)?;
        let far_mass: f64 =
            unprotected.iter().filter(|&&k| (i - k) as f64 > horizon_len).map(|&k| alpha[k]).sum();
        horizon.record(p - far_mass);
    }
    Ok(vec![full, uniform, horizon])
}

fn lemma_growth_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut report = BoundReport::new("lemma_partition_growth", BOUND_TOL);
    let n = rng.int_in(1, 512);
    let i = n - 1;
    let s_max = rng.uniform_range(0.0, 3.0);
    let scores: Vec<f64> = (0..n).map(|_| rng.uniform_range(-s_max, s_max)).collect();
    let gamma = rng.uniform_range(0.2, 3.0);
    let t = rng.int_in(16, 2048) as f64;
    let c_min = log_uniform(rng, 1e-3, 2.0);
    let epsilon = c_min * t / gamma;
    let g = epsilon * rng.uniform_range(1.0, 4.0);
    let p_max = rng.int_in(1, 10);
    // at most p_max - 1 earlier keys are protected, plus the query itself
    let mut protected = vec![false; n];
    protected[i] = true;
    for _ in 0..rng.below(p_max) {
        if i > 0 {
            protected[rng.below(i)] = true;
        }
    }
    let logits: Vec<f64> = (0..n)
        .map(|j| {
            let l = if protected[j] { 1.0 } else { 0.0 };
            scores[j] + mask_gape_at(i as f64, j as f64, g, l, gamma, t)
        })
        .collect();
    let cfg = TheoremConfig { s_max, gamma, g, t, epsilon, p_max, ..Default::default() };
    let log_z = log_sum_exp(&logits);
    let log_bound = log_partition_growth_bound(&cfg, i)?;
    report.record((log_bound - log_z) / log_bound.abs().max(1.0));
    Ok(vec![report])
}

fn thm3_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut grid = BoundReport::new("thm3_adversarial_grid", 0.0);
    let mut lower = BoundReport::new("thm3_gap_lower_bound", BOUND_TOL);
    let mut limit = BoundReport::new("thm3_min_gate_decreasing", 0.0);

    let s_max = rng.uniform_range(0.05, 5.0);
    let t = rng.int_in(16, 4096) as f64;
    let gamma = rng.uniform_range(0.1, 3.0);
    let delta = rng.int_in(1, 4 * t as usize);
    let i = delta + rng.below(1024);
    let j = i - delta;
    let cfg = TheoremConfig { s_max, gamma, t, ..Default::default() };
    let g_min = hallucination_min_gate(&cfg, delta)?;

    for factor in [0.5, 0.99, 1.01, 2.0] {
        let g = factor * g_min;
        // worst case: the hallucinated key scores +S_max, the current token -S_max
        let a_ii = -s_max + mask_gape_at(i as f64, i as f64, g, 1.0, gamma, t);
        let a_ij = s_max + mask_gape_at(i as f64, j as f64, g, 0.0, gamma, t);
        let gap = a_ii - a_ij;
        let expect_positive = factor > 1.0;
        let slack = if expect_positive { gap } else { -gap };
        grid.record_with(slack, (gap > 0.0) == expect_positive);
    }

    let g = g_min * log_uniform(rng, 1e-2, 1e2);
    let s_ii = rng.uniform_range(-s_max, s_max);
    let s_ij = rng.uniform_range(-s_max, s_max);
    let gap = (s_ii + mask_gape_at(i as f64, i as f64, g, 1.0, gamma, t))
        - (s_ij + mask_gape_at(i as f64, j as f64, g, 0.0, gamma, t));
    let bound = -2.0 * s_max + gamma * g / t * delta as f64;
    lower.record((gap - bound) / bound.abs().max(1.0));

    let next = hallucination_min_gate(&cfg, delta + 1)?;
    limit.record_with(g_min - next, next < g_min);
    Ok(vec![grid, lower, limit])
}

fn entropy_collapse_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut conditional = BoundReport::new("collapse_conditional_invariance", COLLAPSE_CONDITIONAL_TOL);
    let n = rng.int_in(2, 64);
    let s_max = rng.uniform_range(0.05, 1.5);
    let scores = bounded_scores(rng, n, s_max);
    let all = rng.bernoulli(0.1);
    let p_protect = rng.uniform_range(0.0, 0.5);
    let protected: Vec<bool> = (0..n).map(|j| all || j == n - 1 || rng.bernoulli(p_protect)).collect();
    let inst = CollapseInstance { scores, protected, gamma: rng.uniform_range(1.0, 2.0), t: rng.int_in(8, 32) as f64 };
    let report = entropy_collapse_check(&inst, &COLLAPSE_GRID, crate::gape::DEFAULT_LANDMARK_THRESHOLD)?;
    for p in collapse_trace(&inst, &COLLAPSE_GRID)?.points {
        conditional.record(-p.conditional_drift);
    }
    Ok(vec![report, conditional])
}

fn random_gate_params(rng: &mut Rng, d_sem: usize) -> GateParams {
    let scale = 1.0 / (d_sem as f64).sqrt();
    GateParams {
        w_l: rng.normal_vec(d_sem).into_iter().map(|x| x * scale * 2.0).collect(),
        b_l: rng.normal(),
        w_g: rng.normal_vec(d_sem).into_iter().map(|x| x * scale * 2.0).collect(),
        b_g: rng.uniform_range(-3.0, 2.0),
        gamma_raw: rng.uniform_range(-1.0, 2.0),
    }
}

/// Random attention inputs with the gated mask: `d ∈ {4, 8, 16}`, up to
/// `max_len` tokens, NoPE / RoPE / p-RoPE semantics.
pub fn random_gated_inputs(rng: &mut Rng, max_len: usize) -> AttentionInputs {
    let len = rng.int_in(1, max_len);
    let d = [4, 8, 16][rng.below(3)];
    let kind = match rng.below(3) {
        0 => EncodingKind::NoPE,
        1 => EncodingKind::rope(),
        _ => EncodingKind::prope(),
    };
    let q = Matrix::from_fn(len, d - 2, |_, _| rng.normal());
    let k = Matrix::from_fn(len, d - 2, |_, _| rng.normal());
    let v = Matrix::from_fn(len, d, |_, _| rng.normal());
    let params = random_gate_params(rng, d - 2);
    let t = rng.int_in(8, 256) as f64;
    AttentionInputs {
        q,
        k,
        v,
        positions: (0..len).collect(),
        kind,
        head: 0,
        gape: Some(GapeSetup { params, t, source: GateSource::PreRotation }),
    }
}

fn equivalence_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut report = BoundReport::new("prop1_three_path_equivalence", EQUIVALENCE_TOL);
    let inputs = random_gated_inputs(rng, 64);
    let m = attend(&inputs, MaskPath::ExplicitM)?;
    let hat = attend(&inputs, MaskPath::ExplicitMHat)?;
    let fused = attend(&inputs, MaskPath::FusedAugmented)?;
    let worst = m.weights.max_abs_diff(&hat.weights)?.max(m.weights.max_abs_diff(&fused.weights)?);
    report.record(-worst);
    Ok(vec![report])
}

fn translation_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut report = BoundReport::new("translation_invariance", TRANSLATION_TOL);
    let inputs = random_gated_inputs(rng, 48);
    let shift = rng.int_in(1, 5000);
    let mut moved = inputs.clone();
    moved.positions.iter_mut().for_each(|p| *p += shift);
    let mut worst: f64 = 0.0;
    for path in [MaskPath::ExplicitM, MaskPath::FusedAugmented] {
        let a = attend(&inputs, path)?;
        let b = attend(&moved, path)?;
        worst = worst.max(a.weights.max_abs_diff(&b.weights)?);
    }
    report.record(-worst);
    Ok(vec![report])
}

fn niah_threshold_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let mut flip = BoundReport::new("niah_threshold_flip", 0.0);
    let mut elim = BoundReport::new("niah_elimination_horizon", 0.0);
    let mut landmark = BoundReport::new("niah_landmark_threshold", 0.0);

    let i = rng.int_in(2, 8192);
    let k = rng.int_in(1, i - 1);
    let rho = k as f64 / i as f64;
    let gamma = rng.uniform_range(0.2, 3.0);
    let t = rng.int_in(64, 4096) as f64;
    let g = log_uniform(rng, 1e-3, 1.0) * t / (gamma * i as f64) * 50.0;
    let l_k = match rng.below(4) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.uniform(),
    };
    let s_max = rng.uniform_range(0.1, 3.0);
    let cfg = TheoremConfig { s_max, gamma, g, t, rho, ..Default::default() };
    let penalty = niah_retrieval_threshold(&cfg, i, l_k)?;

    // scores realised through explicit one-dimensional query/key vectors
    let gv_for = |at: usize, l_needle: f64, gate: f64| -> Result<GateValues> {
        let mut l = vec![0.0; i + 1];
        l[at] = l_needle;
        GateValues::new(l, vec![gate; i + 1], gamma, t)
    };
    let logit_gap = |s_needle: f64, s_self: f64, gv: &GateValues, key: usize| -> Result<f64> {
        let q = [1.0, 0.0];
        let (kn, ks) = ([s_needle, 0.0], [s_self, 0.0]);
        Ok((dot(&q, &kn) + mask_gape(i, key, gv)?) - (dot(&q, &ks) + mask_gape(i, i, gv)?))
    };
    let gv = gv_for(k, l_k, g)?;
    let s_self = rng.uniform_range(-1.0, 1.0);
    for delta in [0.01, -0.01] {
        let gap = logit_gap(s_self + penalty + delta, s_self, &gv, k)?;
        let slack = if delta > 0.0 { gap } else { -gap };
        flip.record_with(slack, (gap > 0.0) == (delta > 0.0));
    }

    // elimination horizon at the gate floor, best-case score differential 2 S_max
    let epsilon = g;
    let l_e = if rng.bernoulli(0.5) { 0.0 } else { rng.uniform_range(0.0, 0.9) };
    let cfg_e = TheoremConfig { epsilon, ..cfg.clone() };
    let horizons = eviction_horizons(&cfg_e, i, l_e)?;
    let far = (horizons.delta_elim * 1.01).ceil() as usize + 1;
    let near = (horizons.delta_elim * 0.99).floor() as usize;
    for (dist, expect) in [(far, false), (near, true)] {
        if dist >= 1 && dist <= i {
            let key = i - dist;
            let gv = gv_for(key, l_e, epsilon)?;
            let gap = logit_gap(s_max, -s_max, &gv, key)?;
            let slack = if expect { gap } else { -gap };
            elim.record_with(slack, (gap > 0.0) == expect);
        }
    }

    // beyond the failure horizon retrieval needs l_k above l*
    let lk = eviction_horizons(&cfg, i, 0.0)?;
    if lk.needs_landmark() {
        for (l_try, expect) in [(lk.l_star + 0.01, true), (lk.l_star - 0.01, false)] {
            if (0.0..=1.0).contains(&l_try) {
                let gv = gv_for(k, l_try, g)?;
                let gap = logit_gap(s_max, -s_max, &gv, k)?;
                let slack = if expect { gap } else { -gap };
                landmark.record_with(slack, (gap > 0.0) == expect);
            }
        }
        let gv = gv_for(k, 0.0, g)?;
        let gap = logit_gap(s_max, -s_max, &gv, k)?;
        landmark.record_with(-gap, gap <= 0.0);
    }
    Ok(vec![flip, elim, landmark])
}
