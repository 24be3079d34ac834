//! Closed-form bounds and thresholds for the gated mask, plus the
//! brute-force suites in [`suites`] that check them on constructed
//! attention instances.

pub mod suites;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{entropy_unchecked, stable_softmax_row, total_variation};

/// Outcome of one bound check over many trials.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Minimum of `bound - observed` over all trials.
    pub worst_slack: f64,
    pub tolerance: f64,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self { name: name.into(), trials: 0, violations: 0, worst_slack: f64::INFINITY, tolerance }
    }

    /// Records one trial; it fails when `slack < -tolerance`.
    pub fn record(&mut self, slack: f64) {
        self.record_with(slack, slack >= -self.tolerance);
    }

    /// Records one trial with an explicit pass/fail verdict.
    pub fn record_with(&mut self, slack: f64, passed: bool) {
        self.trials += 1;
        if !passed || slack.is_nan() {
            self.violations += 1;
        }
        if slack < self.worst_slack || slack.is_nan() {
            self.worst_slack = slack;
        }
    }

    pub fn merge(&mut self, other: &BoundReport) {
        self.trials += other.trials;
        self.violations += other.violations;
        if other.worst_slack < self.worst_slack || other.worst_slack.is_nan() {
            self.worst_slack = other.worst_slack;
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.trials > 0
    }

    pub const CSV_HEADER: &'static str = "name,trials,violations,worst_slack,tolerance";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.6e},{:.1e}", self.name, self.trials, self.violations, self.worst_slack, self.tolerance)
    }
}

pub fn reports_to_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from(BoundReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Parameters shared by the closed forms.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremConfig {
    /// Bound on |s_ij|.
    pub s_max: f64,
    pub gamma: f64,
    pub g: f64,
    pub t: f64,
    pub delta_min: usize,
    /// Number of unprotected keys.
    pub u_size: usize,
    /// Mass tolerance for the effective context length.
    pub p: f64,
    /// Floor on the query gate.
    pub epsilon: f64,
    pub p_max: usize,
    /// Relative needle depth `k / i`.
    pub rho: f64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            s_max: 1.0,
            gamma: 1.0,
            g: 1.0,
            t: 1024.0,
            delta_min: 1,
            u_size: 1,
            p: 0.05,
            epsilon: 1.0,
            p_max: 1,
            rho: 0.5,
        }
    }
}

impl TheoremConfig {
    /// Contraction rate `Γ g / T`.
    pub fn rate(&self) -> f64 {
        self.gamma * self.g / self.t
    }

    fn check_positive(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.t > 0.0 && self.s_max >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need Γ > 0, T > 0, S_max ≥ 0 (got {}, {}, {})",
                self.gamma, self.t, self.s_max
            )));
        }
        Ok(())
    }
}

/// `e^{2 S_max} Σ_k exp(-Γ g gap_k / T)` over the unprotected gaps.
pub fn unprotected_mass_bound(cfg: &TheoremConfig, gaps: &[usize]) -> f64 {
    let c = cfg.rate();
    let tail: f64 = gaps.iter().map(|&gap| (-c * gap as f64).exp()).sum();
    (2.0 * cfg.s_max).exp() * tail
}

/// `|U| exp(2 S_max - Γ g Δ_min / T)`, valid when every gap is at least Δ_min.
pub fn unprotected_mass_bound_uniform(cfg: &TheoremConfig) -> f64 {
    cfg.u_size as f64 * (2.0 * cfg.s_max - cfg.rate() * cfg.delta_min as f64).exp()
}

/// Distance beyond which unprotected keys jointly carry at most `p` mass:
/// `(T / Γg) (2 S_max + ln(|U| / p))`.
pub fn effective_context_length(cfg: &TheoremConfig) -> Result<f64> {
    cfg.check_positive()?;
    if !(cfg.p > 0.0 && cfg.p < 1.0) || cfg.u_size == 0 {
        return Err(Error::InvalidArgument(format!("need p in (0, 1) and |U| ≥ 1 (got {}, {})", cfg.p, cfg.u_size)));
    }
    if !(cfg.g > 0.0) {
        return Err(Error::InvalidArgument("query gate must be positive".into()));
    }
    Ok((2.0 * cfg.s_max + (cfg.u_size as f64 / cfg.p).ln()) / cfg.rate())
}

/// Natural log of the partition-function bound, usable where the bound
/// itself would overflow.
pub fn log_partition_growth_bound(cfg: &TheoremConfig, i: usize) -> Result<f64> {
    cfg.check_positive()?;
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("gate floor ε = {} must be positive", cfg.epsilon)));
    }
    let c_min = cfg.gamma * cfg.epsilon / cfg.t;
    let tail = 1.0 / c_min.exp_m1();
    Ok(cfg.s_max + cfg.rate() * i as f64 + (cfg.p_max as f64 + tail).ln())
}

/// `Z_i ≤ e^{S_max + C_i i} (P_max + 1/(e^{C_min} - 1))` with
/// `C_i = Γ g / T`, `C_min = Γ ε / T`.
pub fn partition_growth_bound(cfg: &TheoremConfig, i: usize) -> Result<f64> {
    log_partition_growth_bound(cfg, i).map(f64::exp)
}

/// Smallest query gate that lets the current token beat an unprotected key
/// at distance Δ for every score pattern with |s| ≤ S_max: `2 S_max T / (Γ Δ)`.
pub fn hallucination_min_gate(cfg: &TheoremConfig, delta: usize) -> Result<f64> {
    cfg.check_positive()?;
    if delta == 0 {
        return Err(Error::InvalidArgument("distance must be at least 1".into()));
    }
    Ok(2.0 * cfg.s_max * cfg.t / (cfg.gamma * delta as f64))
}

/// Structural penalty a needle at depth ρ must overcome to outrank the
/// current token: `(Γ g / T) i (1 - ρ)(1 - l_k)`.
pub fn niah_retrieval_threshold(cfg: &TheoremConfig, i: usize, l_k: f64) -> Result<f64> {
    cfg.check_positive()?;
    if !(cfg.rho > 0.0 && cfg.rho < 1.0) {
        return Err(Error::InvalidArgument(format!("depth ρ = {} outside (0, 1)", cfg.rho)));
    }
    if !(0.0..=1.0).contains(&l_k) {
        return Err(Error::InvalidArgument(format!("landmark {l_k} outside [0, 1]")));
    }
    Ok(cfg.rate() * i as f64 * (1.0 - cfg.rho) * (1.0 - l_k))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvictionHorizons {
    /// Distance beyond which a key with landmark `l_k` cannot win at gate floor ε.
    pub delta_elim: f64,
    /// Sequence length beyond which an unprotected needle at depth ρ is lost.
    pub i_fail: f64,
    /// Landmark level needed for retrieval at length `i`; negative means
    /// retrieval is possible without protection.
    pub l_star: f64,
}

impl EvictionHorizons {
    pub fn l_star_clamped(&self) -> f64 {
        self.l_star.max(0.0)
    }

    pub fn needs_landmark(&self) -> bool {
        self.l_star > 0.0
    }
}

pub fn eviction_horizons(cfg: &TheoremConfig, i: usize, l_k: f64) -> Result<EvictionHorizons> {
    cfg.check_positive()?;
    if !(cfg.rho >= 0.0 && cfg.rho < 1.0) {
        return Err(Error::InvalidArgument(format!("depth ρ = {} outside [0, 1)", cfg.rho)));
    }
    if !(0.0..1.0).contains(&l_k) {
        return Err(Error::InvalidArgument(format!("landmark {l_k} must lie in [0, 1)")));
    }
    if !(cfg.epsilon > 0.0) || !(cfg.g > 0.0) || i == 0 {
        return Err(Error::InvalidArgument("gate floor, gate and length must be positive".into()));
    }
    let budget = 2.0 * cfg.s_max * cfg.t;
    let delta_elim = budget / (cfg.gamma * cfg.epsilon * (1.0 - l_k));
    let i_fail = budget / (cfg.gamma * cfg.g * (1.0 - cfg.rho));
    let l_star = 1.0 - budget / (cfg.gamma * cfg.g * i as f64 * (1.0 - cfg.rho));
    Ok(EvictionHorizons { delta_elim, i_fail, l_star })
}

/// One query row with injected protection: `protected[j]` means `l_j = 1`,
/// otherwise `l_j = 0`. The last entry is the query itself.
#[derive(Clone, Debug)]
pub struct CollapseInstance {
    pub scores: Vec<f64>,
    pub protected: Vec<bool>,
    pub gamma: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapsePoint {
    pub g: f64,
    pub tv: f64,
    pub entropy: f64,
    pub unprotected_mass: f64,
    /// Largest deviation of the within-protected conditional from α*.
    pub conditional_drift: f64,
}

#[derive(Clone, Debug)]
pub struct CollapseTrace {
    pub points: Vec<CollapsePoint>,
    pub limit_entropy: f64,
}

pub const COLLAPSE_FINAL_TV: f64 = 1e-3;
pub const COLLAPSE_ENTROPY_TOL: f64 = 1e-4;
pub const COLLAPSE_CONDITIONAL_TOL: f64 = 1e-10;

/// Attention row of the query over its causal prefix under the adopted mask.
pub(crate) fn masked_row(inst: &CollapseInstance, g: f64) -> Result<Vec<f64>> {
    let i = inst.scores.len() - 1;
    let c = inst.gamma * g / inst.t;
    let logits: Vec<f64> = inst
        .scores
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let l = if inst.protected[j] || j == i { 1.0 } else { 0.0 };
            s + c * (j as f64 * (1.0 - l) + i as f64 * l)
        })
        .collect();
    stable_softmax_row(&logits, &vec![true; logits.len()])
}

/// Traces the attention row along `g_grid` and compares it with the
/// protected-set distribution α* (softmax of the protected scores alone,
/// extended by zeros).
pub fn collapse_trace(inst: &CollapseInstance, g_grid: &[f64]) -> Result<CollapseTrace> {
    let n = inst.scores.len();
    if n == 0 || inst.protected.len() != n {
        return Err(Error::DimensionMismatch("scores and protection flags differ in length".into()));
    }
    let i = n - 1;
    let in_p: Vec<bool> = (0..n).map(|j| j == i || inst.protected[j]).collect();
    let limit = stable_softmax_row(&inst.scores, &in_p)?;
    let limit_entropy = entropy_unchecked(&limit);
    let mut points = Vec::with_capacity(g_grid.len());
    for &g in g_grid {
        let alpha = masked_row(inst, g)?;
        let p_mass: f64 = (0..n).filter(|&j| in_p[j]).map(|j| alpha[j]).sum();
        let u_mass: f64 = (0..n).filter(|&j| !in_p[j]).map(|j| alpha[j]).sum();
        let conditional_drift = (0..n)
            .filter(|&j| in_p[j])
            .map(|j| (alpha[j] / p_mass - limit[j]).abs())
            .fold(0.0, f64::max);
        points.push(CollapsePoint {
            g,
            tv: total_variation(&alpha, &limit),
            entropy: entropy_unchecked(&alpha),
            unprotected_mass: u_mass,
            conditional_drift,
        });
    }
    Ok(CollapseTrace { points, limit_entropy })
}

/// Checks the total-variation collapse onto the protected set: TV strictly
/// decreasing along the grid until it vanishes, final TV below 1e-3, final
/// entropy within 1e-4 of H(α*), and the protected conditional unchanged.
/// `tau` is the landmark threshold used to read protection off the gates.
pub fn entropy_collapse_check(inst: &CollapseInstance, g_grid: &[f64], tau: f64) -> Result<BoundReport> {
    if g_grid.windows(2).any(|w| w[1] <= w[0]) || g_grid.is_empty() {
        return Err(Error::InvalidArgument("g grid must be non-empty and increasing".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("landmark threshold {tau} outside (0, 1)")));
    }
    let trace = collapse_trace(inst, g_grid)?;
    let mut report = BoundReport::new("entropy_collapse", COLLAPSE_FINAL_TV);
    let pts = &trace.points;
    let last = pts.last().expect("non-empty grid");
    let mut ok = last.tv < COLLAPSE_FINAL_TV
        && (last.entropy - trace.limit_entropy).abs() < COLLAPSE_ENTROPY_TOL
        && pts.iter().all(|p| p.conditional_drift < COLLAPSE_CONDITIONAL_TOL);
    for w in pts.windows(2) {
        // off-support mass equals TV exactly and is free of rounding noise
        let (a, b) = (w[0].unprotected_mass, w[1].unprotected_mass);
        let decreasing = b < a || (a == 0.0 && b == 0.0);
        ok &= decreasing;
    }
    report.record_with(COLLAPSE_FINAL_TV - last.tv, ok);
    Ok(report)
}
