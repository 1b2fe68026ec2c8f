//! Risk-set matching: roll forward over event indices, form exact strata, and
//! solve an optimal 1:(J-1) assignment inside each stratum.

mod brute_force;
pub mod flow;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rayon::prelude::*;

use crate::distance::{robust_mahalanobis, DistanceMatrix, DistanceSpec, Entry};
use crate::error::{Error, Result};
use crate::io::format_number;
use crate::model::{history_view, Cohort, HistoryRef, HistoryView, MatchedSet, StratumKey, SubjectId};

pub use brute_force::brute_force_stratum_match;
use flow::MinCostFlow;

/// Distances are multiplied by this and rounded half-to-even before entering
/// the integer flow solver.
pub const COST_SCALE: f64 = 1e6;

/// Largest number of treated subsets tried exactly when a stratum cannot
/// match every treated unit.
const SUBSET_LIMIT: u64 = 200;

pub fn scaled_cost(d: f64) -> i64 {
    (d * COST_SCALE).round_ties_even() as i64
}

/// Rule selecting subjects by their state at event `k` and, optionally, by
/// states seen anywhere in events `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateRule {
    pub at_event: BTreeSet<u16>,
    /// Each set must be hit by at least one event in `1..=k`.
    pub ever_by_k: Vec<BTreeSet<u16>>,
}

impl StateRule {
    pub fn states(codes: impl IntoIterator<Item = u16>) -> Self {
        Self {
            at_event: codes.into_iter().collect(),
            ever_by_k: Vec::new(),
        }
    }

    pub fn matches(&self, view: &HistoryView<'_>) -> bool {
        self.at_event.contains(&view.state())
            && self
                .ever_by_k
                .iter()
                .all(|set| view.events().iter().any(|e| set.contains(&e.state)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExactSource {
    Fixed(String),
    History(HistoryRef),
}

/// An exact-match variable. History values may be binned by `cuts`
/// (bin `i` holds `cuts[i-1] <= x < cuts[i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExactVariable {
    pub label: String,
    pub source: ExactSource,
    pub cuts: Vec<f64>,
}

impl ExactVariable {
    pub fn fixed(name: &str) -> Self {
        Self {
            label: name.to_string(),
            source: ExactSource::Fixed(name.to_string()),
            cuts: Vec::new(),
        }
    }

    pub fn history(label: &str, r: HistoryRef, cuts: Vec<f64>) -> Self {
        Self {
            label: label.to_string(),
            source: ExactSource::History(r),
            cuts,
        }
    }

    pub fn value(&self, view: &HistoryView<'_>) -> Result<String> {
        let unresolved = |name: String| Error::UnresolvableCovariate {
            name,
            subject: view.subject_id().to_string(),
        };
        match &self.source {
            ExactSource::Fixed(name) => view
                .fixed(name)
                .map(str::to_string)
                .ok_or_else(|| unresolved(name.clone())),
            ExactSource::History(r) => {
                let x = view.value(r).ok_or_else(|| unresolved(r.to_string()))?;
                Ok(self.bin_label(x))
            }
        }
    }

    fn bin_label(&self, x: f64) -> String {
        if self.cuts.is_empty() {
            return format_number(x);
        }
        let bin = self.cuts.iter().take_while(|&&c| c <= x).count();
        match bin {
            0 => format!("lt{}", format_number(self.cuts[0])),
            b if b == self.cuts.len() => format!("ge{}", format_number(self.cuts[b - 1])),
            b => format!(
                "{}-{}",
                format_number(self.cuts[b - 1]),
                format_number(self.cuts[b])
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EligibilitySpec {
    pub treated: StateRule,
    pub control: StateRule,
    pub exact: Vec<ExactVariable>,
    /// Matched set size `J`: one treated plus `J - 1` controls.
    pub set_size: usize,
    pub k_range: Vec<u32>,
}

impl EligibilitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.set_size < 2 {
            return Err(Error::Config(format!(
                "set size J must be at least 2, got {}",
                self.set_size
            )));
        }
        if self.k_range.is_empty() || self.k_range[0] == 0 {
            return Err(Error::Config("k_range must list event indices >= 1".into()));
        }
        if self.k_range.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("k_range must be strictly ascending".into()));
        }
        if self.treated.at_event.is_empty() || self.control.at_event.is_empty() {
            return Err(Error::Config("treated and control rules need states".into()));
        }
        if self.treated.at_event.contains(&0) || self.control.at_event.contains(&0) {
            return Err(Error::Config("state 0 never occurs at an event".into()));
        }
        if let Some(s) = self.treated.at_event.intersection(&self.control.at_event).next() {
            return Err(Error::Config(format!(
                "treated and control rules overlap on state {s}"
            )));
        }
        let mut labels = HashSet::new();
        for v in &self.exact {
            if v.label.is_empty() || v.label.contains(['=', '|']) {
                return Err(Error::Config(format!("bad exact variable label `{}`", v.label)));
            }
            if !labels.insert(v.label.as_str()) {
                return Err(Error::Config(format!("exact label `{}` repeated", v.label)));
            }
            if v.cuts.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Config(format!("cuts for `{}` must increase", v.label)));
            }
        }
        Ok(())
    }

    pub fn stratum_key(&self, view: &HistoryView<'_>) -> Result<StratumKey> {
        let exact = self
            .exact
            .iter()
            .map(|v| {
                let value = v.value(view)?;
                if value.contains('|') {
                    return Err(Error::Schema(format!(
                        "exact value `{value}` for `{}` contains `|`",
                        v.label
                    )));
                }
                Ok((v.label.clone(), value))
            })
            .collect::<Result<_>>()?;
        Ok(StratumKey { k: view.k(), exact })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnmatchedReason {
    /// The stratum did not hold enough usable controls.
    InsufficientControls,
}

impl fmt::Display for UnmatchedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnmatchedReason::InsufficientControls => f.write_str("insufficient controls"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unmatched {
    pub subject_id: SubjectId,
    pub k: u32,
    pub stratum: StratumKey,
    pub reason: UnmatchedReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchDesign {
    pub sets: Vec<MatchedSet>,
    pub unmatched_treated: Vec<Unmatched>,
    /// Present when the design was built here rather than read from disk.
    pub config_echo: Option<(EligibilitySpec, DistanceSpec)>,
}

impl MatchDesign {
    pub fn set_size(&self) -> Option<usize> {
        self.sets.first().map(MatchedSet::size)
    }

    /// Checks the structural invariants: fixed set size and no reused subject.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let size = self.set_size();
        for s in &self.sets {
            if Some(s.size()) != size || s.size() < 2 {
                return Err(Error::Schema(format!(
                    "set {} has {} members; every set must have the same size >= 2",
                    s.set_id,
                    s.size()
                )));
            }
            for m in s.members() {
                if !seen.insert(m) {
                    return Err(Error::Schema(format!(
                        "subject {m} appears in more than one matched set"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One treated unit and its controls inside a stratum solution.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumSet {
    pub treated: SubjectId,
    pub controls: Vec<SubjectId>,
    pub distances: Vec<f64>,
}

impl StratumSet {
    pub fn total_distance(&self) -> f64 {
        self.distances.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumSolution {
    pub sets: Vec<StratumSet>,
    pub unmatched_treated: Vec<SubjectId>,
    /// Objective in scaled integer units (see [`COST_SCALE`]).
    pub objective: i64,
    pub total_distance: f64,
}

impl StratumSolution {
    fn from_sets(d: &DistanceMatrix, picks: Vec<(usize, Vec<usize>)>) -> Self {
        let mut matched = vec![false; d.n_treated()];
        let mut objective = 0;
        let mut sets = Vec::with_capacity(picks.len());
        for (t, mut cs) in picks {
            matched[t] = true;
            cs.sort_unstable();
            let distances: Vec<f64> = cs
                .iter()
                .map(|&c| d.get(t, c).finite().expect("only allowed arcs are used"))
                .collect();
            objective += distances.iter().map(|&x| scaled_cost(x)).sum::<i64>();
            sets.push(StratumSet {
                treated: d.treated_ids()[t].clone(),
                controls: cs.iter().map(|&c| d.control_ids()[c].clone()).collect(),
                distances,
            });
        }
        sets.sort_by(|a, b| a.treated.cmp(&b.treated));
        let total_distance = sets.iter().map(StratumSet::total_distance).sum();
        let unmatched_treated = d
            .treated_ids()
            .iter()
            .zip(&matched)
            .filter(|(_, &m)| !m)
            .map(|(id, _)| id.clone())
            .collect();
        Self {
            sets,
            unmatched_treated,
            objective,
            total_distance,
        }
    }
}

/// Builds the flow network for the treated subset `active` and solves it.
/// Returns the control picks per treated index, the flow and the cost.
fn flow_for_subset(
    d: &DistanceMatrix,
    active: &[usize],
    per_set: usize,
) -> (Vec<(usize, Vec<usize>)>, i64, i64) {
    let nt = active.len();
    let nc = d.n_controls();
    let source = nt + nc;
    let sink = source + 1;
    let mut g = MinCostFlow::new(nt + nc + 2);
    for (slot, _) in active.iter().enumerate() {
        g.add_arc(source, slot, per_set as i64, 0);
    }
    let mut pair_arcs = Vec::new();
    for (slot, &t) in active.iter().enumerate() {
        for c in 0..nc {
            if let Entry::Finite(x) = d.get(t, c) {
                let h = g.add_arc(slot, nt + c, 1, scaled_cost(x));
                pair_arcs.push((h, t, c));
            }
        }
    }
    for c in 0..nc {
        g.add_arc(nt + c, sink, 1, 0);
    }
    let want = (nt * per_set) as i64;
    let (flow, cost) = g.run(source, sink, want);
    let mut picks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (h, t, c) in pair_arcs {
        if g.flow_on(h) > 0 {
            picks.entry(t).or_default().push(c);
        }
    }
    (picks.into_iter().collect(), flow, cost)
}

fn n_choose_k(n: u64, k: u64) -> u64 {
    let k = k.min(n - k.min(n));
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Optimal nonoverlapping 1:(J-1) sets inside one stratum.
///
/// Solved as min-cost flow: source -> treated (capacity `J-1`) -> control
/// (capacity 1) -> sink, on integer costs `round_half_even(d * 1e6)`. When
/// the stratum cannot fill a set for every treated unit, the largest number
/// of full sets is formed at minimum cost; treated subsets are enumerated
/// exactly when there are at most 200 of them, otherwise the unit
/// with the smallest allocation is dropped repeatedly.
///
/// Treated and control order in `d` fixes tie-breaking; callers pass ids in
/// lexicographic order.
pub fn optimal_stratum_match(d: &DistanceMatrix, set_size: usize) -> Result<StratumSolution> {
    if set_size < 2 {
        return Err(Error::Config("set size J must be at least 2".into()));
    }
    let per_set = set_size - 1;
    let m = d.n_treated();
    if m == 0 {
        return Ok(StratumSolution::from_sets(d, Vec::new()));
    }
    let all: Vec<usize> = (0..m).collect();
    let (picks, flow, _) = flow_for_subset(d, &all, per_set);
    if flow == (m * per_set) as i64 {
        return Ok(StratumSolution::from_sets(d, picks));
    }

    let upper = m.min(d.n_controls() / per_set);
    for size in (1..=upper).rev() {
        if n_choose_k(m as u64, size as u64) <= SUBSET_LIMIT {
            let mut best: Option<(i64, Vec<(usize, Vec<usize>)>)> = None;
            for_each_subset(m, size, &mut |subset| {
                let (picks, flow, cost) = flow_for_subset(d, subset, per_set);
                if flow == (size * per_set) as i64 && best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    best = Some((cost, picks));
                }
            });
            if let Some((_, picks)) = best {
                return Ok(StratumSolution::from_sets(d, picks));
            }
        } else {
            let mut active = all.clone();
            while active.len() > size {
                let (picks, _, _) = flow_for_subset(d, &active, per_set);
                let alloc = |t: usize| picks.iter().find(|(x, _)| *x == t).map_or(0, |(_, c)| c.len());
                let drop = *active
                    .iter()
                    .min_by_key(|&&t| (alloc(t), std::cmp::Reverse(t)))
                    .expect("active is nonempty");
                active.retain(|&t| t != drop);
            }
            let (picks, flow, _) = flow_for_subset(d, &active, per_set);
            if flow == (size * per_set) as i64 {
                return Ok(StratumSolution::from_sets(d, picks));
            }
        }
    }
    Err(Error::InfeasibleStratum)
}

/// Builds the risk-set matched design.
///
/// Event indices are processed in ascending order. At each `k` every
/// not-yet-matched subject with a `k`-th event is classified by the treated
/// and control rules, grouped into exact strata, and each stratum is solved
/// independently (strata are disjoint, so this is globally optimal for `k`).
/// Everyone placed in a set, treated or control, leaves all later risk sets.
pub fn build_risk_set_match(
    cohort: &Cohort,
    elig: &EligibilitySpec,
    dist: &DistanceSpec,
) -> Result<MatchDesign> {
    elig.validate()?;
    let mut used: HashSet<&str> = HashSet::new();
    let mut sets = Vec::new();
    let mut unmatched_treated = Vec::new();

    for &k in &elig.k_range {
        let mut strata: BTreeMap<StratumKey, (Vec<HistoryView<'_>>, Vec<HistoryView<'_>>)> =
            BTreeMap::new();
        for subject in cohort.subjects() {
            if used.contains(subject.id()) || subject.n_events() < k {
                continue;
            }
            let view = history_view(subject, k)?;
            let is_treated = elig.treated.matches(&view);
            let is_control = elig.control.matches(&view);
            if is_treated && is_control {
                return Err(Error::Config(format!(
                    "subject {} satisfies both treated and control rules",
                    subject.id()
                )));
            }
            if !is_treated && !is_control {
                continue;
            }
            let entry = strata.entry(elig.stratum_key(&view)?).or_default();
            if is_treated {
                entry.0.push(view);
            } else {
                entry.1.push(view);
            }
        }

        let work: Vec<(StratumKey, Vec<HistoryView<'_>>, Vec<HistoryView<'_>>)> = strata
            .into_iter()
            .filter(|(_, (t, _))| !t.is_empty())
            .map(|(key, (mut t, mut c))| {
                t.sort_by(|a, b| a.subject_id().cmp(b.subject_id()));
                c.sort_by(|a, b| a.subject_id().cmp(b.subject_id()));
                (key, t, c)
            })
            .collect();

        let solved: Vec<Result<(StratumKey, StratumSolution)>> = work
            .par_iter()
            .map(|(key, t, c)| {
                if c.len() < elig.set_size - 1 {
                    let ids = t.iter().map(|v| v.subject_id().to_string()).collect();
                    return Ok((
                        key.clone(),
                        StratumSolution {
                            sets: Vec::new(),
                            unmatched_treated: ids,
                            objective: 0,
                            total_distance: 0.0,
                        },
                    ));
                }
                let d = robust_mahalanobis(t, c, dist)?;
                let sol = match optimal_stratum_match(&d, elig.set_size) {
                    Ok(sol) => sol,
                    Err(Error::InfeasibleStratum) => StratumSolution {
                        sets: Vec::new(),
                        unmatched_treated: d.treated_ids().to_vec(),
                        objective: 0,
                        total_distance: 0.0,
                    },
                    Err(e) => return Err(e),
                };
                Ok((key.clone(), sol))
            })
            .collect();

        for result in solved {
            let (key, sol) = result?;
            for id in sol.unmatched_treated {
                unmatched_treated.push(Unmatched {
                    subject_id: id,
                    k,
                    stratum: key.clone(),
                    reason: UnmatchedReason::InsufficientControls,
                });
            }
            for s in sol.sets {
                let treated_id = cohort.require(&s.treated)?.id();
                used.insert(treated_id);
                for c in &s.controls {
                    used.insert(cohort.require(c)?.id());
                }
                let total_distance = s.total_distance();
                sets.push(MatchedSet {
                    set_id: sets.len() as u64 + 1,
                    k,
                    stratum: key.clone(),
                    treated: s.treated,
                    controls: s.controls,
                    control_distances: s.distances,
                    total_distance,
                });
            }
        }
    }

    let design = MatchDesign {
        sets,
        unmatched_treated,
        config_echo: Some((elig.clone(), dist.clone())),
    };
    design.validate()?;
    Ok(design)
}

#[cfg(test)]
pub(crate) mod tests;
