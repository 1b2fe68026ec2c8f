//! Longitudinal data model: subjects, their event histories, and matched sets.
//!
//! A subject moves through an interval state (code 0) punctuated by point
//! events (codes 1..=K). Matching at event index `k` may only look at a
//! [`HistoryView`], which exposes the first `k` events and the fixed
//! covariates but never the outcomes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved name for the time of an event in covariate references.
pub const EVENT_TIME: &str = "event_time";
/// Reserved name for the state code of an event in covariate references.
pub const STATE: &str = "state";

pub type SubjectId = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventState {
    pub code: u16,
    pub display_name: String,
}

/// Dense set of states `0..=K`, with 0 the interval state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    states: Vec<EventState>,
}

impl StateSpace {
    pub fn new(states: Vec<EventState>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Config(
                "a state space needs the interval state and at least one point state".into(),
            ));
        }
        for (i, s) in states.iter().enumerate() {
            if usize::from(s.code) != i {
                return Err(Error::Config(format!(
                    "state codes must be dense 0..=K; found {} at position {i}",
                    s.code
                )));
            }
        }
        Ok(Self { states })
    }

    /// Point states only (codes 1..=K).
    pub fn point_states(&self) -> &[EventState] {
        &self.states[1..]
    }

    pub fn max_code(&self) -> u16 {
        (self.states.len() - 1) as u16
    }

    pub fn name(&self, code: u16) -> Option<&str> {
        self.states
            .get(usize::from(code))
            .map(|s| s.display_name.as_str())
    }

    pub fn contains_point(&self, code: u16) -> bool {
        code >= 1 && code <= self.max_code()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_index: u32,
    pub event_time: f64,
    pub state: u16,
    /// Covariates measured just before this event.
    pub tv_covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectHistory {
    id: SubjectId,
    fixed: BTreeMap<String, String>,
    events: Vec<EventRecord>,
    outcomes: BTreeMap<String, f64>,
}

impl SubjectHistory {
    pub fn new(
        id: impl Into<SubjectId>,
        fixed: BTreeMap<String, String>,
        events: Vec<EventRecord>,
        outcomes: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let id = id.into();
        let mut prev_time = f64::NEG_INFINITY;
        for (pos, ev) in events.iter().enumerate() {
            let expected = pos as u32 + 1;
            if ev.event_index != expected {
                return Err(Error::Schema(format!(
                    "subject {id}: event index {} where {expected} was expected",
                    ev.event_index
                )));
            }
            if ev.state == 0 {
                return Err(Error::Schema(format!(
                    "subject {id}: event {} uses the reserved interval state 0",
                    ev.event_index
                )));
            }
            if !ev.event_time.is_finite() || ev.event_time <= prev_time {
                return Err(Error::Schema(format!(
                    "subject {id}: event times must be finite and strictly increasing (event {})",
                    ev.event_index
                )));
            }
            if let Some((name, _)) = ev.tv_covariates.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "subject {id}: covariate `{name}` at event {} is not finite",
                    ev.event_index
                )));
            }
            prev_time = ev.event_time;
        }
        Ok(Self {
            id,
            fixed,
            events,
            outcomes,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn fixed_covariates(&self) -> &BTreeMap<String, String> {
        &self.fixed
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn n_events(&self) -> u32 {
        self.events.len() as u32
    }

    pub fn outcomes(&self) -> &BTreeMap<String, f64> {
        &self.outcomes
    }

    pub fn outcome(&self, name: &str) -> Result<f64> {
        self.outcomes
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingOutcome {
                outcome: name.to_string(),
                subject: self.id.clone(),
            })
    }

    /// Copy of this subject with all events after `k` removed.
    pub fn truncated(&self, k: u32) -> Self {
        let mut out = self.clone();
        out.events.truncate(k as usize);
        out
    }
}

/// Outcome-free, future-free view of a subject as of its `k`-th event.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    subject: &'a SubjectHistory,
    k: u32,
}

impl PartialEq for HistoryView<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.subject.id == other.subject.id
            && self.subject.fixed == other.subject.fixed
            && self.events() == other.events()
    }
}

pub fn history_view(subject: &SubjectHistory, k: u32) -> Result<HistoryView<'_>> {
    if k == 0 || k > subject.n_events() {
        return Err(Error::MissingEvent {
            subject: subject.id.clone(),
            k,
        });
    }
    Ok(HistoryView { subject, k })
}

impl<'a> HistoryView<'a> {
    pub fn subject_id(&self) -> &'a str {
        &self.subject.id
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn fixed(&self, name: &str) -> Option<&'a str> {
        self.subject.fixed.get(name).map(String::as_str)
    }

    pub fn fixed_covariates(&self) -> &'a BTreeMap<String, String> {
        &self.subject.fixed
    }

    pub fn events(&self) -> &'a [EventRecord] {
        &self.subject.events[..self.k as usize]
    }

    pub fn event(&self, j: u32) -> Result<&'a EventRecord> {
        if j == 0 || j > self.k {
            return Err(Error::MissingEvent {
                subject: self.subject.id.clone(),
                k: j,
            });
        }
        Ok(&self.subject.events[j as usize - 1])
    }

    /// State entered at event `k`.
    pub fn state(&self) -> u16 {
        self.subject.events[self.k as usize - 1].state
    }

    /// Narrower view at `j <= k`.
    pub fn at(&self, j: u32) -> Result<HistoryView<'a>> {
        if j == 0 || j > self.k {
            return Err(Error::MissingEvent {
                subject: self.subject.id.clone(),
                k: j,
            });
        }
        Ok(HistoryView {
            subject: self.subject,
            k: j,
        })
    }

    /// Numeric value of a single-index reference, if it resolves on this view.
    pub fn value(&self, r: &HistoryRef) -> Option<f64> {
        let j = r.index.resolve(self.k)?;
        let ev = self.event(j).ok()?;
        match r.name.as_str() {
            EVENT_TIME => Some(ev.event_time),
            STATE => Some(f64::from(ev.state)),
            name => ev.tv_covariates.get(name).copied(),
        }
    }
}

/// Which event a covariate reference points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndexRef {
    /// A fixed event index.
    At(u32),
    /// The current event index minus an offset (`k`, `k-1`, ...).
    Current(u32),
    /// Every event `1..=k`; expanded before use.
    All,
}

impl IndexRef {
    pub fn resolve(self, k: u32) -> Option<u32> {
        match self {
            IndexRef::At(j) => (j >= 1 && j <= k).then_some(j),
            IndexRef::Current(off) => (off < k).then(|| k - off),
            IndexRef::All => None,
        }
    }
}

/// Reference to a numeric history covariate, written `name[j]`, `name[k]`,
/// `name[k-1]` or `name[*]`. `event_time` and `state` are built in; any other
/// name is looked up among the time-varying covariates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HistoryRef {
    pub name: String,
    pub index: IndexRef,
}

impl HistoryRef {
    pub fn new(name: impl Into<String>, index: IndexRef) -> Self {
        Self {
            name: name.into(),
            index,
        }
    }

    /// Concrete references for event index `k`; `[*]` becomes `1..=k`.
    pub fn expand(&self, k: u32) -> Vec<HistoryRef> {
        match self.index {
            IndexRef::All => (1..=k)
                .map(|j| HistoryRef::new(self.name.clone(), IndexRef::At(j)))
                .collect(),
            other => vec![HistoryRef::new(
                self.name.clone(),
                other.resolve(k).map_or(other, IndexRef::At),
            )],
        }
    }
}

impl fmt::Display for HistoryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            IndexRef::At(j) => write!(f, "{}[{j}]", self.name),
            IndexRef::Current(0) => write!(f, "{}[k]", self.name),
            IndexRef::Current(off) => write!(f, "{}[k-{off}]", self.name),
            IndexRef::All => write!(f, "{}[*]", self.name),
        }
    }
}

impl FromStr for HistoryRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("`{s}` is not a history reference like name[2] or name[k]"));
        let s = s.trim();
        let open = s.find('[').ok_or_else(bad)?;
        let inner = s[open..]
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(bad)?
            .trim();
        let name = s[..open].trim();
        if name.is_empty() {
            return Err(bad());
        }
        let index = if inner == "*" {
            IndexRef::All
        } else if inner == "k" {
            IndexRef::Current(0)
        } else if let Some(off) = inner.strip_prefix("k-") {
            IndexRef::Current(off.trim().parse().map_err(|_| bad())?)
        } else {
            let j: u32 = inner.parse().map_err(|_| bad())?;
            if j == 0 {
                return Err(bad());
            }
            IndexRef::At(j)
        };
        Ok(HistoryRef::new(name, index))
    }
}

/// A validated collection of subjects with unique ids.
#[derive(Debug, Clone, Default)]
pub struct Cohort {
    subjects: Vec<SubjectHistory>,
    index: HashMap<SubjectId, usize>,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectHistory>) -> Result<Self> {
        let mut index = HashMap::with_capacity(subjects.len());
        let mut tv_keys: Option<BTreeSet<&str>> = None;
        for (i, s) in subjects.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate subject_id {}", s.id)));
            }
            for ev in &s.events {
                let keys: BTreeSet<&str> = ev.tv_covariates.keys().map(String::as_str).collect();
                match &tv_keys {
                    None => tv_keys = Some(keys),
                    Some(expected) if *expected != keys => {
                        return Err(Error::Schema(format!(
                            "subject {}: event {} does not carry the cohort's time-varying covariates",
                            s.id, ev.event_index
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self { subjects, index })
    }

    pub fn subjects(&self) -> &[SubjectHistory] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SubjectHistory> {
        self.index.get(id).map(|&i| &self.subjects[i])
    }

    pub fn require(&self, id: &str) -> Result<&SubjectHistory> {
        self.get(id)
            .ok_or_else(|| Error::Schema(format!("subject {id} is not in the cohort")))
    }

    /// Every subject truncated to at most `k` events.
    pub fn truncated(&self, k: u32) -> Self {
        let subjects = self.subjects.iter().map(|s| s.truncated(k)).collect();
        Self {
            subjects,
            index: self.index.clone(),
        }
    }

    pub fn check_states(&self, space: &StateSpace) -> Result<()> {
        for s in &self.subjects {
            for ev in &s.events {
                if !space.contains_point(ev.state) {
                    return Err(Error::Schema(format!(
                        "subject {}: state {} at event {} is not a configured point state",
                        s.id, ev.state, ev.event_index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Exact-match cell: event index plus the labelled values of every exact variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StratumKey {
    pub k: u32,
    pub exact: Vec<(String, String)>,
}

impl StratumKey {
    pub fn value(&self, label: &str) -> Option<&str> {
        self.exact
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v.as_str())
    }

    /// `label=value|label=value`; the event index is carried separately.
    pub fn encode(&self) -> String {
        self.exact
            .iter()
            .map(|(l, v)| format!("{l}={v}"))
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn decode(k: u32, s: &str) -> Result<Self> {
        let exact = if s.is_empty() {
            Vec::new()
        } else {
            s.split('|')
                .map(|part| {
                    part.split_once('=')
                        .map(|(l, v)| (l.to_string(), v.to_string()))
                        .ok_or_else(|| Error::Schema(format!("malformed stratum `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { k, exact })
    }
}

/// Role of a member inside a matched set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treated,
    Control,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Treated => "treated",
            Arm::Control => "control",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treated" => Ok(Arm::Treated),
            "control" => Ok(Arm::Control),
            other => Err(Error::Schema(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub set_id: u64,
    pub k: u32,
    pub stratum: StratumKey,
    pub treated: SubjectId,
    pub controls: Vec<SubjectId>,
    /// Distance from the treated unit to each control, aligned with `controls`.
    pub control_distances: Vec<f64>,
    pub total_distance: f64,
}

impl MatchedSet {
    pub fn size(&self) -> usize {
        self.controls.len() + 1
    }

    /// Treated id first, then controls.
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.treated.as_str()).chain(self.controls.iter().map(String::as_str))
    }
}

/// Years of schooling credited at an event: `min(E, A - 6)`.
pub fn impute_education_at_event(total_education: f64, age_at_event: f64) -> Result<f64> {
    if !(total_education >= 0.0) {
        return Err(Error::Domain(format!(
            "total education must be nonnegative, got {total_education}"
        )));
    }
    if !(age_at_event > 6.0) {
        return Err(Error::Domain(format!(
            "age at event must exceed 6, got {age_at_event}"
        )));
    }
    Ok(total_education.min(age_at_event - 6.0))
}

/// `min(hours, 40) * weeks / (40 * 52)`, in `[0, 1]`.
pub fn work_fraction(hours_last_week: f64, weeks_last_year: f64) -> Result<f64> {
    if !(hours_last_week >= 0.0) || !(weeks_last_year >= 0.0) || weeks_last_year > 52.0 {
        return Err(Error::Domain(format!(
            "need hours >= 0 and 0 <= weeks <= 52, got ({hours_last_week}, {weeks_last_year})"
        )));
    }
    Ok((hours_last_week.min(40.0) * weeks_last_year / (40.0 * 52.0)).clamp(0.0, 1.0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn subject(id: &str, times: &[f64], outcome: Option<f64>) -> SubjectHistory {
        let events = times
            .iter()
            .enumerate()
            .map(|(i, &t)| EventRecord {
                event_index: i as u32 + 1,
                event_time: t,
                state: 1,
                tv_covariates: BTreeMap::from([("education".to_string(), 12.0)]),
            })
            .collect();
        let outcomes = outcome
            .map(|y| BTreeMap::from([("work".to_string(), y)]))
            .unwrap_or_default();
        SubjectHistory::new(id, BTreeMap::new(), events, outcomes).unwrap()
    }

    #[test]
    fn view_truncates() {
        let s = subject("a", &[18.0, 22.0, 25.0], Some(0.5));
        let v = history_view(&s, 2).unwrap();
        assert_eq!(v.events().len(), 2);
        assert!(v.event(2).is_ok());
        assert!(matches!(v.event(3), Err(Error::MissingEvent { k: 3, .. })));
    }

    #[test]
    fn view_missing_event() {
        let s = subject("a", &[18.0, 22.0], None);
        assert!(matches!(
            history_view(&s, 3),
            Err(Error::MissingEvent { k: 3, .. })
        ));
        assert!(history_view(&s, 0).is_err());
    }

    #[test]
    fn view_idempotent() {
        let s = subject("a", &[18.0, 22.0, 25.0], None);
        let v = history_view(&s, 2).unwrap();
        assert_eq!(v.at(2).unwrap(), v);
        assert_eq!(history_view(&s, 2).unwrap(), v);
        assert!(v.at(3).is_err());
    }

    #[test]
    fn rejects_bad_histories() {
        let ev = |j, t, state| EventRecord {
            event_index: j,
            event_time: t,
            state,
            tv_covariates: BTreeMap::new(),
        };
        let new = |events| SubjectHistory::new("x", BTreeMap::new(), events, BTreeMap::new());
        assert!(new(vec![ev(1, 20.0, 1), ev(2, 20.0, 1)]).is_err());
        assert!(new(vec![ev(1, 20.0, 1), ev(3, 21.0, 1)]).is_err());
        assert!(new(vec![ev(1, 20.0, 0)]).is_err());
        assert!(new(vec![ev(1, 20.0, 2), ev(2, 21.0, 1)]).is_ok());
    }

    #[test]
    fn cohort_rejects_duplicates_and_ragged_covariates() {
        let a = subject("a", &[18.0], None);
        assert!(Cohort::new(vec![a.clone(), a.clone()]).is_err());

        let mut b = subject("b", &[19.0], None);
        b.events[0].tv_covariates.clear();
        assert!(Cohort::new(vec![a, b]).is_err());
    }

    #[test]
    fn state_space_is_dense() {
        let st = |code, name: &str| EventState {
            code,
            display_name: name.into(),
        };
        assert!(StateSpace::new(vec![st(0, "none"), st(1, "girl"), st(2, "boy")]).is_ok());
        assert!(StateSpace::new(vec![st(0, "none"), st(2, "boy")]).is_err());
        assert!(StateSpace::new(vec![st(0, "none")]).is_err());
    }

    #[test]
    fn history_refs_parse_and_print() {
        for text in ["event_time[2]", "education[k]", "education[k-1]", "state[*]"] {
            let r: HistoryRef = text.parse().unwrap();
            assert_eq!(r.to_string(), text);
        }
        assert!("education".parse::<HistoryRef>().is_err());
        assert!("education[0]".parse::<HistoryRef>().is_err());
        assert!("[2]".parse::<HistoryRef>().is_err());

        let r: HistoryRef = "event_time[*]".parse().unwrap();
        assert_eq!(r.expand(3).len(), 3);
        let r: HistoryRef = "event_time[k-1]".parse().unwrap();
        assert_eq!(r.expand(3), vec![HistoryRef::new("event_time", IndexRef::At(2))]);
    }

    #[test]
    fn values_resolve_on_views() {
        let s = subject("a", &[18.0, 22.0, 25.0], None);
        let v = history_view(&s, 2).unwrap();
        let at = |t: &str| v.value(&t.parse().unwrap());
        assert_eq!(at("event_time[k]"), Some(22.0));
        assert_eq!(at("event_time[1]"), Some(18.0));
        assert_eq!(at("event_time[3]"), None);
        assert_eq!(at("education[2]"), Some(12.0));
        assert_eq!(at("income[2]"), None);
        assert_eq!(at("state[k]"), Some(1.0));
    }

    #[test]
    fn stratum_round_trip() {
        let key = StratumKey {
            k: 2,
            exact: vec![("race".into(), "White".into()), ("region".into(), "South".into())],
        };
        assert_eq!(key.encode(), "race=White|region=South");
        assert_eq!(StratumKey::decode(2, &key.encode()).unwrap(), key);
        assert_eq!(StratumKey::decode(3, "").unwrap().exact.len(), 0);
    }

    #[test]
    fn education_examples() {
        assert_eq!(impute_education_at_event(16.0, 26.0).unwrap(), 16.0);
        assert_eq!(impute_education_at_event(12.0, 16.0).unwrap(), 10.0);
        assert_eq!(impute_education_at_event(12.0, 18.0).unwrap(), 12.0);
        assert!(impute_education_at_event(12.0, 6.0).is_err());
        assert!(impute_education_at_event(-1.0, 20.0).is_err());
    }

    #[test]
    fn work_fraction_examples() {
        assert!((work_fraction(40.0, 20.0).unwrap() - 20.0 / 52.0).abs() < 1e-15);
        assert_eq!(work_fraction(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(work_fraction(60.0, 52.0).unwrap(), 1.0);
        assert!(work_fraction(-1.0, 10.0).is_err());
        assert!(work_fraction(10.0, 53.0).is_err());
    }

    proptest! {
        #[test]
        fn truncation_never_leaks_future(n in 1usize..8, k in 1u32..8) {
            let times: Vec<f64> = (0..n).map(|i| 15.0 + i as f64).collect();
            let s = subject("p", &times, Some(1.0));
            match history_view(&s, k) {
                Ok(v) => {
                    prop_assert!(k as usize <= n);
                    prop_assert!(v.events().iter().all(|e| e.event_index <= k));
                    prop_assert!(v.event(k + 1).is_err());
                }
                Err(_) => prop_assert!(k as usize > n),
            }
        }

        #[test]
        fn work_fraction_bounded_monotone(h in 0.0f64..100.0, w in 0.0f64..52.0, dh in 0.0f64..10.0, dw in 0.0f64..1.0) {
            let base = work_fraction(h, w).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!(work_fraction(h + dh, w).unwrap() >= base);
            prop_assert!(work_fraction(h, (w + dw).min(52.0)).unwrap() >= base);
        }

        #[test]
        fn education_bounded(e in 0.0f64..25.0, a in 6.01f64..60.0) {
            let x = impute_education_at_event(e, a).unwrap();
            prop_assert!(x <= e && x <= a - 6.0);
            prop_assert!(x == e || x == a - 6.0);
        }
    }
}
