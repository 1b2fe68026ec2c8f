//! Sensitivity analysis for 1:(J-1) matched sets.
//!
//! Within a set, a bias of at most Γ lets the odds that member `j` rather than
//! member `m` is the treated one vary by a factor in `[1/Γ, Γ]`. For a sum
//! statistic `T = Σ_i q_{i,treated}` the largest null expectation in set `i`
//! is reached by giving weight `Γ` to the `a` largest scores and weight 1 to
//! the rest, for some `a` in `0..=J`. Sets are maximized separately and
//! combined with a normal approximation.
//!
//! Effects are inverted by testing adjusted outcomes: the Tobit effect
//! `r_T = max(0, r_C - τ)` by lowering each control to `max(0, R - τ0)`, the
//! proportional effect by testing `R - β0 D`.

use std::collections::BTreeMap;

use num_traits::Num;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::matching::MatchDesign;
use crate::model::Cohort;

/// Sensitivity parameter `Γ = exp(γ) >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GammaLevel(f64);

impl GammaLevel {
    pub const ONE: GammaLevel = GammaLevel(1.0);

    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma >= 1.0 {
            Ok(Self(gamma))
        } else {
            Err(Error::Domain(format!("Γ must be finite and >= 1, got {gamma}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GammaLevel {
    type Error = Error;

    fn try_from(g: f64) -> Result<Self> {
        Self::new(g)
    }
}

impl From<GammaLevel> for f64 {
    fn from(g: GammaLevel) -> f64 {
        g.0
    }
}

/// Scores for one matched set: `q[j]` is the statistic's contribution were
/// member `j` the treated unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SetScore {
    pub set_id: u64,
    pub q: Vec<f64>,
    /// Index of the member actually treated.
    pub treated: usize,
}

impl SetScore {
    pub fn new(set_id: u64, q: Vec<f64>, treated: usize) -> Result<Self> {
        if q.len() < 2 {
            return Err(Error::Domain(format!("set {set_id} needs at least two scores")));
        }
        if treated >= q.len() {
            return Err(Error::Domain(format!("set {set_id}: treated index out of range")));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("set {set_id} has a non-finite score")));
        }
        Ok(Self { set_id, q, treated })
    }

    pub fn observed(&self) -> f64 {
        self.q[self.treated]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    MeanDifference,
    HuberM,
}

/// Which tail of the statistic counts as evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Treated outcomes larger than expected.
    Greater,
    /// Treated outcomes smaller than expected; scores are negated.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticSpec {
    pub kind: StatisticKind,
    /// Trimming point for ψ in units of the scale.
    pub huber_cutoff: f64,
    /// Scale for the Huber kind. `None` computes it from the outcomes scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl StatisticSpec {
    pub fn mean_difference() -> Self {
        Self {
            kind: StatisticKind::MeanDifference,
            huber_cutoff: 2.0,
            scale: None,
        }
    }

    pub fn huber(cutoff: f64) -> Self {
        Self {
            kind: StatisticKind::HuberM,
            huber_cutoff: cutoff,
            scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.huber_cutoff > 0.0 && self.huber_cutoff.is_finite()) {
            return Err(Error::Config(format!(
                "huber cutoff must be positive, got {}",
                self.huber_cutoff
            )));
        }
        if let Some(s) = self.scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median of `|y_treated - y_control|` over every treated-control pair in
/// every set. Outcome rows hold the treated member first.
pub fn huber_scale(outcomes: &[Vec<f64>]) -> f64 {
    let diffs = outcomes
        .iter()
        .flat_map(|y| y[1..].iter().map(move |c| (y[0] - c).abs()))
        .collect();
    median(diffs)
}

fn psi(u: f64, cutoff: f64) -> f64 {
    u.clamp(-cutoff, cutoff)
}

/// Scores for every set from outcome rows (treated first), oriented so that
/// large values favour `direction`.
pub fn scores_from_outcomes(
    set_ids: &[u64],
    outcomes: &[Vec<f64>],
    spec: &StatisticSpec,
    direction: Direction,
) -> Result<Vec<SetScore>> {
    spec.validate()?;
    if set_ids.len() != outcomes.len() {
        return Err(Error::Domain("one outcome row per set is required".into()));
    }
    let mut kind = spec.kind;
    let mut scale = 1.0;
    if kind == StatisticKind::HuberM {
        scale = spec.scale.unwrap_or_else(|| huber_scale(outcomes));
        if scale == 0.0 {
            log::warn!("Huber scale is zero; falling back to the mean difference");
            kind = StatisticKind::MeanDifference;
        }
    }
    let sign = match direction {
        Direction::Greater => 1.0,
        Direction::Less => -1.0,
    };
    set_ids
        .iter()
        .zip(outcomes)
        .map(|(&id, y)| {
            let j = y.len();
            if j < 2 {
                return Err(Error::Domain(format!("set {id} has fewer than two members")));
            }
            let others = (j - 1) as f64;
            let total: f64 = y.iter().sum();
            let q = (0..j)
                .map(|a| {
                    let raw = match kind {
                        StatisticKind::MeanDifference => y[a] - (total - y[a]) / others,
                        StatisticKind::HuberM => {
                            (0..j)
                                .filter(|&m| m != a)
                                .map(|m| psi((y[a] - y[m]) / scale, spec.huber_cutoff))
                                .sum::<f64>()
                                / others
                        }
                    };
                    sign * raw
                })
                .collect();
            SetScore::new(id, q, 0)
        })
        .collect()
}

/// Outcome rows for a design, treated member first. Negative zero is
/// normalized so that equal inputs give bit-equal statistics.
pub fn member_outcomes(design: &MatchDesign, cohort: &Cohort, name: &str) -> Result<Vec<Vec<f64>>> {
    design
        .sets
        .iter()
        .map(|s| {
            s.members()
                .map(|id| Ok(cohort.require(id)?.outcome(name)? + 0.0))
                .collect()
        })
        .collect()
}

/// Scores for a design using the named outcome.
pub fn set_scores(
    design: &MatchDesign,
    cohort: &Cohort,
    outcome: &str,
    spec: &StatisticSpec,
    direction: Direction,
) -> Result<Vec<SetScore>> {
    let ids: Vec<u64> = design.sets.iter().map(|s| s.set_id).collect();
    scores_from_outcomes(&ids, &member_outcomes(design, cohort, outcome)?, spec, direction)
}

fn count<T: Num + Clone>(n: usize) -> T {
    (0..n).fold(T::zero(), |acc, _| acc + T::one())
}

/// Candidate `(mean, variance, a)` for each split: the `a` largest scores
/// get weight `Γ`, the rest weight 1.
fn split_moments<T>(q: &[T], gamma: &T) -> Vec<(T, T, usize)>
where
    T: Num + Clone + PartialOrd,
{
    let mut sorted = q.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores are ordered"));
    let j = sorted.len();
    (0..=j)
        .map(|a| {
            let denom = count::<T>(a) * gamma.clone() + count::<T>(j - a);
            let weight = |i: usize| if i < a { gamma.clone() } else { T::one() };
            let mean = sorted
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (i, x)| acc + weight(i) * x.clone())
                / denom.clone();
            let var = sorted.iter().enumerate().fold(T::zero(), |acc, (i, x)| {
                let d = x.clone() - mean.clone();
                acc + weight(i) * d.clone() * d
            }) / denom;
            (mean, var, a)
        })
        .collect()
}

/// Worst-case `(expectation, variance)` of one set's score over binary `u`,
/// in an exact field. Returns the number of members given the larger weight
/// as well.
pub fn worst_case_moments_exact<T>(q: &[T], gamma: &T) -> (T, T, usize)
where
    T: Num + Clone + PartialOrd,
{
    let mut best: Option<(T, T, usize)> = None;
    for (mean, var, a) in split_moments(q, gamma) {
        let better = match &best {
            None => true,
            Some((m, v, _)) => mean > *m || (mean == *m && var > *v),
        };
        if better {
            best = Some((mean, var, a));
        }
    }
    best.expect("at least one candidate")
}

/// Floating-point counterpart of [`worst_case_moments_exact`]. Means within
/// rounding error of each other count as tied, so a tie that is exact in
/// the rationals still resolves to the larger variance.
fn worst_case_split(q: &[f64], gamma: f64) -> (f64, f64, usize) {
    let scale = q.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale;
    let mut best: Option<(f64, f64, usize)> = None;
    for (mean, var, a) in split_moments(q, &gamma) {
        let better = match best {
            None => true,
            Some((m, v, _)) => mean > m + tol || (mean >= m - tol && var > v),
        };
        if better {
            best = Some((mean, var, a));
        }
    }
    best.expect("at least one candidate")
}

/// Largest null expectation of the set's score under bias `Γ`, and the
/// largest variance among distributions attaining it.
pub fn worst_case_moments(score: &SetScore, gamma: GammaLevel) -> (f64, f64) {
    let (mu, nu, _) = worst_case_split(&score.q, gamma.value());
    (mu, nu.max(0.0))
}

/// Smallest null expectation of the set's score under bias `Γ`.
pub fn best_case_mean(score: &SetScore, gamma: GammaLevel) -> f64 {
    let neg: Vec<f64> = score.q.iter().map(|x| -x).collect();
    -worst_case_moments_exact(&neg, &gamma.value()).0
}

/// Null distribution of one set's score attaining the worst-case moments.
pub fn worst_case_distribution(score: &SetScore, gamma: GammaLevel) -> Vec<(f64, f64)> {
    let g = gamma.value();
    let (_, _, a) = worst_case_split(&score.q, g);
    let mut sorted = score.q.clone();
    sorted.sort_by(|x, y| y.total_cmp(x));
    let j = sorted.len();
    let denom = a as f64 * g + (j - a) as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, x)| (x, if i < a { g / denom } else { 1.0 / denom }))
        .collect()
}

/// Observed sum statistic `T = Σ_i q_{i,treated}`.
pub fn observed_statistic(scores: &[SetScore]) -> f64 {
    scores.iter().map(SetScore::observed).sum()
}

/// Summed worst-case moments and the standardized deviate of `observed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviate {
    pub expectation: f64,
    pub variance: f64,
    pub value: f64,
}

pub fn deviate(scores: &[SetScore], gamma: GammaLevel, observed: f64) -> Result<Deviate> {
    if scores.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let (expectation, variance) = scores
        .iter()
        .map(|s| worst_case_moments(s, gamma))
        .fold((0.0, 0.0), |(m, v), (a, b)| (m + a, v + b));
    let value = if variance > 0.0 {
        (observed - expectation) / variance.sqrt()
    } else if observed > expectation + zero_tolerance(expectation) {
        f64::INFINITY
    } else if observed < expectation - zero_tolerance(expectation) {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    Ok(Deviate {
        expectation,
        variance,
        value,
    })
}

fn zero_tolerance(x: f64) -> f64 {
    1e-12 * (1.0 + x.abs())
}

fn upper_normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Large-sample upper bound on the one-sided p-value under bias `Γ`.
pub fn max_pvalue(scores: &[SetScore], gamma: GammaLevel, observed: f64) -> Result<f64> {
    let d = deviate(scores, gamma, observed)?;
    if d.variance > 0.0 {
        Ok(upper_normal_tail(d.value))
    } else if d.value > 0.0 {
        Ok(0.0)
    } else {
        Ok(1.0)
    }
}

/// Two-sided bound: twice the smaller one-sided bound, capped at 1.
/// Conservative by construction.
pub fn max_pvalue_two_sided(scores: &[SetScore], gamma: GammaLevel) -> Result<f64> {
    let upper = max_pvalue(scores, gamma, observed_statistic(scores))?;
    let flipped: Vec<SetScore> = scores
        .iter()
        .map(|s| SetScore {
            set_id: s.set_id,
            q: s.q.iter().map(|x| -x).collect(),
            treated: s.treated,
        })
        .collect();
    let lower = max_pvalue(&flipped, gamma, observed_statistic(&flipped))?;
    Ok((2.0 * upper.min(lower)).min(1.0))
}

pub const EXACT_MAX_SETS: usize = 14;
pub const EXACT_MAX_ATOMS: usize = 1_000_000;
const ATOM_SCALE: f64 = 1e9;

/// Exact upper tail of `observed` under the convolution of the per-set
/// worst-case distributions. Values are merged on a grid of `1e-9`, so ties
/// closer than that count as equal.
///
/// This is the tail of the specific distribution attaining the separable
/// bound, which is what the normal approximation approximates; it is not a
/// maximum over all biased distributions.
pub fn exact_max_pvalue(scores: &[SetScore], gamma: GammaLevel, observed: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyDesign);
    }
    if scores.len() > EXACT_MAX_SETS {
        return Err(Error::TooLarge(format!(
            "exact convolution supports at most {EXACT_MAX_SETS} sets, got {}",
            scores.len()
        )));
    }
    let mut atoms: BTreeMap<i64, f64> = BTreeMap::from([(0, 1.0)]);
    for s in scores {
        let mut set_atoms: BTreeMap<i64, f64> = BTreeMap::new();
        for (x, p) in worst_case_distribution(s, gamma) {
            *set_atoms.entry((x * ATOM_SCALE).round() as i64).or_default() += p;
        }
        let mut next: BTreeMap<i64, f64> = BTreeMap::new();
        for (&a, &pa) in &atoms {
            for (&b, &pb) in &set_atoms {
                *next.entry(a + b).or_default() += pa * pb;
            }
        }
        if next.len() > EXACT_MAX_ATOMS {
            return Err(Error::TooLarge(format!(
                "convolution exceeds {EXACT_MAX_ATOMS} atoms"
            )));
        }
        atoms = next;
    }
    // Per-set rounding can shift a sum by at most one unit per set.
    let threshold = (observed * ATOM_SCALE).round() as i64 - scores.len() as i64;
    let p: f64 = atoms.range(threshold..).map(|(_, p)| p).sum();
    Ok(p.min(1.0))
}

/// Root of a monotone step-like function by bisection, after widening the
/// bracket by doubling. `f` must change sign between the bracket ends.
pub fn bisect(
    what: &str,
    mut f: impl FnMut(f64) -> Result<f64>,
    bracket: (f64, f64),
    tolerance: f64,
    max_doublings: u32,
) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    let mut flo = f(lo)?;
    let mut fhi = f(hi)?;
    let mut doublings = 0;
    while flo.signum() == fhi.signum() && flo != 0.0 && fhi != 0.0 {
        if doublings == max_doublings {
            return Err(Error::BracketFailure {
                what: what.to_string(),
                lo,
                hi,
            });
        }
        let width = hi - lo;
        lo -= width / 2.0;
        hi += width / 2.0;
        flo = f(lo)?;
        fhi = f(hi)?;
        doublings += 1;
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Adjusted outcome under the Tobit null `τ = τ0`: controls become
/// `max(0, R - τ0)`, the treated outcome is left alone.
pub fn tobit_transform(r: f64, treated: bool, tau0: f64) -> f64 {
    if treated {
        r
    } else {
        let x = r - tau0;
        if x > 0.0 {
            x
        } else {
            0.0
        }
    }
}

/// Adjusted outcome under the proportional null `β = β0`.
pub fn proportional_transform(r: f64, d: f64, beta0: f64) -> f64 {
    r - beta0 * d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub gammas: Vec<GammaLevel>,
    /// One-sided level of the confidence bound.
    pub alpha: f64,
    pub direction: Direction,
    pub statistic: StatisticSpec,
    /// Starting bracket for root finding, widened by doubling when needed.
    pub bracket: (f64, f64),
    pub tolerance: f64,
    pub max_doublings: u32,
    /// Compute the exact convolution p-value when the design has at most
    /// this many sets.
    pub exact_max_sets: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            gammas: vec![GammaLevel::ONE],
            alpha: 0.05,
            direction: Direction::Less,
            statistic: StatisticSpec::mean_difference(),
            bracket: (-1.0, 1.0),
            tolerance: 1e-6,
            max_doublings: 30,
            exact_max_sets: EXACT_MAX_SETS,
        }
    }
}

impl InferenceOptions {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::Config("at least one Γ is required".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.bracket.0 < self.bracket.1) || !self.bracket.0.is_finite() || !self.bracket.1.is_finite() {
            return Err(Error::Config("bracket must be an increasing finite pair".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        self.statistic.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectModel {
    Tobit,
    Ratio,
}

/// Which side of the parameter line the confidence set covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiSide {
    /// `parameter >= ci_bound`
    Lower,
    /// `parameter <= ci_bound`
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    /// Upper bound on the one-sided p-value for the null of no effect.
    pub max_pvalue: f64,
    /// Exact convolution counterpart, present for small designs.
    pub exact_max_pvalue: Option<f64>,
    pub deviate: f64,
    pub ci_bound: f64,
    /// Estimate with the bias pushing hardest against the effect: the
    /// minimum possible point estimate, nearest the null.
    pub estimate_min: f64,
    /// Estimate with the bias pushing the other way.
    pub estimate_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub model: EffectModel,
    pub parameter: String,
    pub outcome: String,
    pub dose: Option<String>,
    pub direction: Direction,
    pub alpha: f64,
    pub ci_side: CiSide,
    pub n_sets: usize,
    pub set_size: usize,
    pub statistic: StatisticSpec,
    pub rows: Vec<GammaRow>,
}

/// Everything needed to rescore a design at a hypothesized parameter.
struct Problem {
    set_ids: Vec<u64>,
    r: Vec<Vec<f64>>,
    d: Option<Vec<Vec<f64>>>,
    model: EffectModel,
    spec: StatisticSpec,
    direction: Direction,
}

impl Problem {
    fn adjusted(&self, theta: f64) -> Vec<Vec<f64>> {
        match (self.model, &self.d) {
            (EffectModel::Tobit, _) => self
                .r
                .iter()
                .map(|y| {
                    y.iter()
                        .enumerate()
                        .map(|(j, &v)| tobit_transform(v, j == 0, theta))
                        .collect()
                })
                .collect(),
            (EffectModel::Ratio, Some(d)) => self
                .r
                .iter()
                .zip(d)
                .map(|(y, dose)| {
                    y.iter()
                        .zip(dose)
                        .map(|(&v, &x)| proportional_transform(v, x, theta))
                        .collect()
                })
                .collect(),
            (EffectModel::Ratio, None) => unreachable!("ratio model always carries a dose"),
        }
    }

    fn scores(&self, theta: f64) -> Result<Vec<SetScore>> {
        scores_from_outcomes(&self.set_ids, &self.adjusted(theta), &self.spec, self.direction)
    }
}

fn solve_row(problem: &Problem, gamma: GammaLevel, opts: &InferenceOptions) -> Result<GammaRow> {
    let null = problem.scores(0.0)?;
    let observed = observed_statistic(&null);
    let dev = deviate(&null, gamma, observed)?;
    let max_p = max_pvalue(&null, gamma, observed)?;
    let exact = if null.len() <= opts.exact_max_sets {
        match exact_max_pvalue(&null, gamma, observed) {
            Ok(p) => Some(p),
            Err(Error::TooLarge(msg)) => {
                log::info!("exact p-value skipped: {msg}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let root = |what: &str, f: &dyn Fn(&[SetScore]) -> Result<f64>| {
        bisect(
            what,
            |theta| f(&problem.scores(theta)?),
            opts.bracket,
            opts.tolerance,
            opts.max_doublings,
        )
    };
    let estimate_min = root("estimate_min", &|s| {
        let mu: f64 = s.iter().map(|x| worst_case_moments(x, gamma).0).sum();
        Ok(observed_statistic(s) - mu)
    })?;
    let estimate_max = root("estimate_max", &|s| {
        let mu: f64 = s.iter().map(|x| best_case_mean(x, gamma)).sum();
        Ok(observed_statistic(s) - mu)
    })?;
    let z = Normal::standard().inverse_cdf(1.0 - opts.alpha);
    let ci_bound = root("ci_bound", &|s| {
        let d = deviate(s, gamma, observed_statistic(s))?;
        Ok(d.value - z)
    })?;
    Ok(GammaRow {
        gamma: gamma.value(),
        max_pvalue: max_p,
        exact_max_pvalue: exact,
        deviate: dev.value,
        ci_bound,
        estimate_min,
        estimate_max,
    })
}

fn ci_side(model: EffectModel, direction: Direction) -> CiSide {
    // Raising τ0 lowers the adjusted controls and so raises the treated-minus-
    // control statistic; raising β0 lowers outcomes in proportion to dose.
    // Under `Less`, large statistic values are what the test rejects.
    match (model, direction) {
        (EffectModel::Tobit, Direction::Less) => CiSide::Lower,
        (EffectModel::Tobit, Direction::Greater) => CiSide::Upper,
        (EffectModel::Ratio, Direction::Less) => CiSide::Upper,
        (EffectModel::Ratio, Direction::Greater) => CiSide::Lower,
    }
}

fn run(problem: Problem, opts: &InferenceOptions, outcome: &str, dose: Option<&str>) -> Result<SensitivityReport> {
    let n_sets = problem.r.len();
    if n_sets == 0 {
        return Err(Error::EmptyDesign);
    }
    let set_size = problem.r[0].len();
    let rows = opts
        .gammas
        .par_iter()
        .map(|&g| solve_row(&problem, g, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport {
        model: problem.model,
        parameter: match problem.model {
            EffectModel::Tobit => "tau".into(),
            EffectModel::Ratio => "beta".into(),
        },
        outcome: outcome.to_string(),
        dose: dose.map(str::to_string),
        direction: opts.direction,
        alpha: opts.alpha,
        ci_side: ci_side(problem.model, opts.direction),
        n_sets,
        set_size,
        statistic: problem.spec.clone(),
        rows,
    })
}

/// Freezes the Huber scale at the unadjusted outcomes so the estimating
/// function stays monotone in the parameter.
fn frozen_spec(spec: &StatisticSpec, r: &[Vec<f64>]) -> StatisticSpec {
    let mut spec = spec.clone();
    if spec.kind == StatisticKind::HuberM && spec.scale.is_none() {
        spec.scale = Some(huber_scale(r));
    }
    spec
}

/// Sensitivity analysis for the Tobit effect `r_T = max(0, r_C - τ)`.
pub fn infer_tobit(
    design: &MatchDesign,
    cohort: &Cohort,
    outcome: &str,
    opts: &InferenceOptions,
) -> Result<SensitivityReport> {
    opts.validate()?;
    let r = member_outcomes(design, cohort, outcome)?;
    if let Some(bad) = r.iter().flatten().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!("Tobit outcomes must be >= 0, found {bad}")));
    }
    let problem = Problem {
        set_ids: design.sets.iter().map(|s| s.set_id).collect(),
        spec: frozen_spec(&opts.statistic, &r),
        r,
        d: None,
        model: EffectModel::Tobit,
        direction: opts.direction,
    };
    run(problem, opts, outcome, None)
}

/// Sensitivity analysis for the proportional effect
/// `r_T - r_C = β (d_T - d_C)`.
pub fn infer_proportional(
    design: &MatchDesign,
    cohort: &Cohort,
    outcome: &str,
    dose: &str,
    opts: &InferenceOptions,
) -> Result<SensitivityReport> {
    opts.validate()?;
    let r = member_outcomes(design, cohort, outcome)?;
    let d = member_outcomes(design, cohort, dose)?;
    if d.iter().all(|set| set.iter().all(|&x| x == set[0])) {
        return Err(Error::ZeroDoseEffect(format!(
            "`{dose}` is constant within every matched set"
        )));
    }
    let problem = Problem {
        set_ids: design.sets.iter().map(|s| s.set_id).collect(),
        spec: frozen_spec(&opts.statistic, &r),
        r,
        d: Some(d),
        model: EffectModel::Ratio,
        direction: opts.direction,
    };
    // A point estimate with no root means the dose differences cannot
    // offset the outcome differences. A missing confidence bound is only an
    // unbounded interval and stays a bracket failure.
    run(problem, opts, outcome, Some(dose)).map_err(|e| match e {
        Error::BracketFailure { what, lo, hi } if what.starts_with("estimate") => Error::ZeroDoseEffect(
            format!("{what}: no root on [{lo}, {hi}]; the dose barely responds to treatment"),
        ),
        e => e,
    })
}

/// Sample effect ratio: summed treated-minus-mean-control outcome differences
/// over summed dose differences.
pub fn effect_ratio(r: &[Vec<f64>], d: &[Vec<f64>]) -> Result<f64> {
    let diff = |y: &Vec<f64>| y[0] - y[1..].iter().sum::<f64>() / (y.len() - 1) as f64;
    let num: f64 = r.iter().map(diff).sum();
    let den: f64 = d.iter().map(diff).sum();
    if den == 0.0 {
        return Err(Error::ZeroDoseEffect("dose differences sum to zero".into()));
    }
    Ok(num / den)
}

/// A point `(Δ, Λ)` on the amplification curve of some `Γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationPoint {
    pub delta: f64,
    pub lambda: f64,
}

impl AmplificationPoint {
    /// The `Γ` this point amplifies: `(ΔΛ + 1) / (Δ + Λ)`.
    pub fn gamma(&self) -> f64 {
        (self.delta * self.lambda + 1.0) / (self.delta + self.lambda)
    }
}

/// Amplification curve `Γ = (ΔΛ + 1) / (Δ + Λ)` for a fixed `Γ > 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplification {
    gamma: f64,
}

/// Default Δ grid, filtered to values above Γ.
pub const DEFAULT_DELTAS: [f64; 10] = [1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 7.5, 10.0, 20.0, 50.0];

pub fn amplify(gamma: f64) -> Result<Amplification> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("amplification needs Γ > 1, got {gamma}")));
    }
    Ok(Amplification { gamma })
}

impl Amplification {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `Λ = (ΔΓ - 1) / (Δ - Γ)` for `Δ > Γ`.
    pub fn point(&self, delta: f64) -> Result<AmplificationPoint> {
        if !(delta > self.gamma && delta.is_finite()) {
            return Err(Error::Domain(format!(
                "Δ must exceed Γ = {}, got {delta}",
                self.gamma
            )));
        }
        Ok(AmplificationPoint {
            delta,
            lambda: (delta * self.gamma - 1.0) / (delta - self.gamma),
        })
    }

    pub fn curve(&self, deltas: &[f64]) -> Result<Vec<AmplificationPoint>> {
        deltas.iter().map(|&d| self.point(d)).collect()
    }

    /// Points on [`DEFAULT_DELTAS`] above `Γ`.
    pub fn default_curve(&self) -> Vec<AmplificationPoint> {
        DEFAULT_DELTAS
            .iter()
            .filter(|&&d| d > self.gamma)
            .map(|&d| self.point(d).expect("filtered to Δ > Γ"))
            .collect()
    }
}
