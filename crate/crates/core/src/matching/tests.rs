use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::model::{EventRecord, IndexRef, SubjectHistory};

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn matrix(rows: &[Vec<f64>]) -> DistanceMatrix {
    DistanceMatrix::from_rows(ids("t", rows.len()), ids("c", rows[0].len()), rows).unwrap()
}

#[test]
fn forced_single_set() {
    let d = matrix(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
    let sol = optimal_stratum_match(&d, 6).unwrap();
    assert_eq!(sol.sets.len(), 1);
    assert_eq!(sol.sets[0].controls.len(), 5);
    assert_eq!(sol.total_distance, 15.0);
}

#[test]
fn anti_diagonal_pairs() {
    let d = matrix(&[vec![1.0, 10.0], vec![10.0, 1.0]]);
    let sol = optimal_stratum_match(&d, 2).unwrap();
    assert_eq!(sol.total_distance, 2.0);
    assert_eq!(sol.sets[0].controls, vec!["c0"]);
    assert_eq!(sol.sets[1].controls, vec!["c1"]);
}

#[test]
fn two_by_four_against_all_splits() {
    let rows = vec![vec![3.0, 7.0, 1.0, 9.0], vec![2.0, 8.0, 6.0, 4.0]];
    let d = matrix(&rows);
    let sol = optimal_stratum_match(&d, 3).unwrap();
    // every way to give t0 two controls and t1 the other two
    let mut best = f64::INFINITY;
    for a in 0..4 {
        for b in a + 1..4 {
            let rest: Vec<usize> = (0..4).filter(|&c| c != a && c != b).collect();
            let cost = rows[0][a] + rows[0][b] + rows[1][rest[0]] + rows[1][rest[1]];
            best = best.min(cost);
        }
    }
    assert_eq!(sol.total_distance, best);
    assert_eq!(
        brute_force_stratum_match(&d, 3).unwrap().objective,
        sol.objective
    );
}

#[test]
fn deficient_stratum_keeps_cheapest_subset() {
    // three treated compete for four controls with J = 3: only two sets fit
    let d = matrix(&[
        vec![1.0, 1.0, 5.0, 5.0],
        vec![9.0, 9.0, 9.0, 9.0],
        vec![5.0, 5.0, 1.0, 1.0],
    ]);
    let sol = optimal_stratum_match(&d, 3).unwrap();
    assert_eq!(sol.sets.len(), 2);
    assert_eq!(sol.unmatched_treated, vec!["t1"]);
    assert_eq!(sol.total_distance, 4.0);
    assert_eq!(brute_force_stratum_match(&d, 3).unwrap(), sol);
}

#[test]
fn forbidden_pairs_are_avoided() {
    let entries = vec![
        Entry::Forbidden,
        Entry::Finite(3.0),
        Entry::Finite(1.0),
        Entry::Forbidden,
    ];
    let d = DistanceMatrix::new(ids("t", 2), ids("c", 2), entries).unwrap();
    let sol = optimal_stratum_match(&d, 2).unwrap();
    assert_eq!(sol.total_distance, 4.0);
    assert_eq!(sol.sets[0].controls, vec!["c1"]);
}

#[test]
fn infeasible_and_trivial_strata() {
    let d = DistanceMatrix::new(ids("t", 1), ids("c", 1), vec![Entry::Forbidden]).unwrap();
    assert!(matches!(
        optimal_stratum_match(&d, 2),
        Err(Error::InfeasibleStratum)
    ));
    assert!(matches!(
        brute_force_stratum_match(&d, 2),
        Err(Error::InfeasibleStratum)
    ));

    let single = matrix(&[vec![0.5]]);
    let sol = brute_force_stratum_match(&single, 2).unwrap();
    assert_eq!(sol.sets.len(), 1);
    assert_eq!(sol.total_distance, 0.5);

    let empty = DistanceMatrix::new(vec![], ids("c", 3), vec![]).unwrap();
    assert!(optimal_stratum_match(&empty, 2).unwrap().sets.is_empty());
    assert!(brute_force_stratum_match(&empty, 2).unwrap().sets.is_empty());
}

#[test]
fn brute_force_refuses_large_problems() {
    let d = matrix(&vec![vec![1.0; 20]; 6]);
    assert!(matches!(
        brute_force_stratum_match(&d, 4),
        Err(Error::TooLarge(_))
    ));
}

#[test]
fn greedy_path_for_many_treated() {
    // 16 treated, 3 controls, pairs: C(16, 3) exceeds the enumeration limit
    let rows: Vec<Vec<f64>> = (0..16)
        .map(|t| (0..3).map(|c| ((t * 7 + c * 3) % 11) as f64).collect())
        .collect();
    let d = matrix(&rows);
    let sol = optimal_stratum_match(&d, 2).unwrap();
    assert_eq!(sol.sets.len(), 3);
    assert_eq!(sol.unmatched_treated.len(), 13);
}

#[test]
fn bin_labels() {
    let v = ExactVariable::history("age", "event_time[k]".parse().unwrap(), vec![18.5, 22.5, 25.5]);
    assert_eq!(v.bin_label(17.0), "lt18.5");
    assert_eq!(v.bin_label(18.5), "18.5-22.5");
    assert_eq!(v.bin_label(24.0), "22.5-25.5");
    assert_eq!(v.bin_label(25.5), "ge25.5");
    let raw = ExactVariable::history("n", "state[1]".parse().unwrap(), vec![]);
    assert_eq!(raw.bin_label(2.0), "2");
}

fn person(id: &str, region: &str, events: &[(f64, u16)]) -> SubjectHistory {
    let events = events
        .iter()
        .enumerate()
        .map(|(i, &(t, s))| EventRecord {
            event_index: i as u32 + 1,
            event_time: t,
            state: s,
            tv_covariates: BTreeMap::new(),
        })
        .collect();
    let fixed = BTreeMap::from([("region".to_string(), region.to_string())]);
    SubjectHistory::new(id, fixed, events, BTreeMap::new()).unwrap()
}

pub(crate) fn twelve_subjects() -> Cohort {
    Cohort::new(vec![
        person("a1", "A", &[(20.0, 1), (24.0, 2)]),
        person("a2", "A", &[(19.0, 1), (23.0, 1)]),
        person("a3", "A", &[(21.0, 1), (25.0, 1)]),
        person("a4", "A", &[(18.0, 1), (30.0, 1), (33.0, 2)]),
        person("a5", "A", &[(20.0, 1), (26.0, 1), (28.0, 1)]),
        person("a6", "A", &[(20.0, 1), (27.0, 1), (32.0, 1)]),
        person("b1", "B", &[(20.0, 1), (22.0, 2)]),
        person("b2", "B", &[(19.0, 1), (21.0, 1)]),
        person("b3", "B", &[(25.0, 2)]),
        person("b4", "B", &[(18.0, 1), (20.0, 2)]),
        person("b5", "B", &[(21.0, 3), (29.0, 1)]),
        person("b6", "B", &[(17.0, 1)]),
    ])
    .unwrap()
}

pub(crate) fn twelve_specs() -> (EligibilitySpec, DistanceSpec) {
    let elig = EligibilitySpec {
        treated: StateRule::states([2]),
        control: StateRule::states([1]),
        exact: vec![ExactVariable::fixed("region")],
        set_size: 3,
        k_range: vec![2, 3],
    };
    let dist = DistanceSpec::new(
        vec![HistoryRef::new("event_time", IndexRef::Current(0))],
        false,
    )
    .unwrap();
    (elig, dist)
}

#[test]
fn twelve_subject_sequential_match() {
    // Worked by hand. k = 2, region A: a1 (t=24) against a2..a6 with ranks
    // 23,24,25,26,27,30 -> 1..6; a2 and a3 sit one rank away, distance
    // 1 / 3.5 each. Region B: b1 and b4 treated, only b2 and b5 as
    // controls; b1 costs 0.6 + 0.6, b4 costs 0.6 + 5.4, so b4 goes unmatched.
    // k = 3, region A: a4 (passed over as a control at k = 2) is now treated
    // against a5 and a6 with ranks 3 vs 1 and 2, distances 4 and 1.
    let cohort = twelve_subjects();
    let (elig, dist) = twelve_specs();
    let design = build_risk_set_match(&cohort, &elig, &dist).unwrap();

    let summary: Vec<(u64, u32, &str, Vec<&str>)> = design
        .sets
        .iter()
        .map(|s| {
            (
                s.set_id,
                s.k,
                s.treated.as_str(),
                s.controls.iter().map(String::as_str).collect(),
            )
        })
        .collect();
    assert_eq!(
        summary,
        vec![
            (1, 2, "a1", vec!["a2", "a3"]),
            (2, 2, "b1", vec!["b2", "b5"]),
            (3, 3, "a4", vec!["a5", "a6"]),
        ]
    );
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(design.sets[0].total_distance, 2.0 / 3.5));
    assert!(close(design.sets[1].total_distance, 1.2));
    assert!(close(design.sets[2].control_distances[0], 4.0));
    assert!(close(design.sets[2].control_distances[1], 1.0));

    assert_eq!(design.unmatched_treated.len(), 1);
    let u = &design.unmatched_treated[0];
    assert_eq!((u.subject_id.as_str(), u.k), ("b4", 2));
    assert_eq!(u.reason, UnmatchedReason::InsufficientControls);
    assert_eq!(u.stratum.value("region"), Some("B"));
}

#[test]
fn short_stratum_is_logged() {
    let cohort = Cohort::new(vec![
        person("t", "A", &[(20.0, 2)]),
        person("c", "A", &[(21.0, 1)]),
    ])
    .unwrap();
    let (mut elig, dist) = twelve_specs();
    elig.k_range = vec![1];
    let design = build_risk_set_match(&cohort, &elig, &dist).unwrap();
    assert!(design.sets.is_empty());
    assert_eq!(design.unmatched_treated[0].subject_id, "t");
}

#[test]
fn overlapping_rules_rejected() {
    let (mut elig, dist) = twelve_specs();
    elig.control = StateRule::states([1, 2]);
    assert!(matches!(
        build_risk_set_match(&twelve_subjects(), &elig, &dist),
        Err(Error::Config(_))
    ));
}

#[test]
fn ever_rule_filters_history() {
    let rule = StateRule {
        at_event: [1].into(),
        ever_by_k: vec![[3].into()],
    };
    let cohort = twelve_subjects();
    let b5 = history_view(cohort.get("b5").unwrap(), 2).unwrap();
    let b2 = history_view(cohort.get("b2").unwrap(), 2).unwrap();
    assert!(rule.matches(&b5));
    assert!(!rule.matches(&b2));
}

fn arb_stratum() -> impl Strategy<Value = (DistanceMatrix, usize)> {
    (1usize..=3, 1usize..=9, 2usize..=3).prop_flat_map(|(nt, nc, j)| {
        proptest::collection::vec(prop_oneof![1 => Just(None), 6 => (0u32..1000).prop_map(Some)], nt * nc)
            .prop_map(move |cells| {
                let entries = cells
                    .into_iter()
                    .map(|c| c.map_or(Entry::Forbidden, |x| Entry::Finite(f64::from(x) / 100.0)))
                    .collect();
                (DistanceMatrix::new(ids("t", nt), ids("c", nc), entries).unwrap(), j)
            })
    })
}

proptest! {
    #[test]
    fn flow_agrees_with_brute_force((d, j) in arb_stratum()) {
        let flow = optimal_stratum_match(&d, j);
        let brute = brute_force_stratum_match(&d, j);
        match (flow, brute) {
            (Ok(f), Ok(b)) => {
                prop_assert_eq!(f.sets.len(), b.sets.len());
                prop_assert_eq!(f.objective, b.objective);
            }
            (Err(Error::InfeasibleStratum), Err(Error::InfeasibleStratum)) => {}
            (f, b) => prop_assert!(false, "solvers disagree: {:?} vs {:?}", f, b),
        }
    }

    #[test]
    fn sets_never_share_controls((d, j) in arb_stratum()) {
        if let Ok(sol) = optimal_stratum_match(&d, j) {
            let mut seen = HashSet::new();
            for s in &sol.sets {
                prop_assert_eq!(s.controls.len(), j - 1);
                for c in &s.controls {
                    prop_assert!(seen.insert(c.clone()));
                }
            }
        }
    }
}
