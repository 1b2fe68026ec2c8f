use std::collections::HashMap;
use std::path::Path;

use isolate_core::inference::{infer_tobit, InferenceOptions};
use isolate_core::io::RunConfig;
use isolate_core::matching::build_risk_set_match;
use isolate_core::simulate::{simulate_cohort, EffectSpec, Latent, SimOutput, SimSpec};

fn simulation_config() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/simulation.toml")).unwrap()
}

fn latent(out: &SimOutput) -> HashMap<&str, f64> {
    out.truth.subjects.iter().map(|t| (t.subject_id.as_str(), t.u)).collect()
}

#[test]
fn without_differential_bias_the_treated_rank_of_u_is_uniform() {
    let spec = SimSpec::new(60_000, 101, EffectSpec::Tobit { tau: 0.08 });
    let out = simulate_cohort(&spec).unwrap();
    let cfg = simulation_config();
    let design = build_risk_set_match(&out.cohort, &cfg.eligibility().unwrap(), &cfg.distance().unwrap()).unwrap();
    assert!(design.sets.len() >= 5000, "{} sets", design.sets.len());

    let u = latent(&out);
    let j = design.set_size().unwrap();
    let mut counts = vec![0usize; j];
    for s in &design.sets {
        let ut = u[s.treated.as_str()];
        let below = s.controls.iter().filter(|c| u[c.as_str()] < ut).count();
        counts[below] += 1;
    }
    let n = design.sets.len() as f64;
    let expected = n / j as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-squared with 5 degrees of freedom.
    assert!(chi2 < 15.086, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn differential_bias_of_log_two_doubles_the_odds() {
    let mut spec = SimSpec::new(50_000, 202, EffectSpec::Tobit { tau: 0.08 });
    spec.latent = Latent::Binary { p: 0.5 };
    spec.gamma_true = 2f64.ln();
    let out = simulate_cohort(&spec).unwrap();
    let u = latent(&out);

    // [u][treated state?]
    let mut table = [[0f64; 2]; 2];
    for s in out.cohort.subjects() {
        let row = u[s.id()] as usize;
        for e in s.events() {
            table[row][usize::from(e.state == spec.point_states)] += 1.0;
        }
    }
    let odds = |r: [f64; 2]| r[1] / r[0];
    let ratio = odds(table[1]) / odds(table[0]);
    assert!((ratio / 2.0 - 1.0).abs() <= 0.1, "odds ratio {ratio}, table {table:?}");
}

#[test]
fn no_effect_gives_an_estimate_near_zero() {
    let spec = SimSpec::new(60_000, 303, EffectSpec::Tobit { tau: 0.0 });
    let out = simulate_cohort(&spec).unwrap();
    let cfg = simulation_config();
    let design = build_risk_set_match(&out.cohort, &cfg.eligibility().unwrap(), &cfg.distance().unwrap()).unwrap();
    let report = infer_tobit(&design, &out.cohort, "work", &InferenceOptions::default()).unwrap();
    let est = report.rows[0].estimate_min;
    assert!(est.abs() <= 0.01, "estimate {est} from {} sets", design.sets.len());
}

#[test]
fn truth_agrees_with_the_observed_outcomes() {
    let spec = SimSpec::new(2_000, 404, EffectSpec::Proportional { beta: -0.05 });
    let out = simulate_cohort(&spec).unwrap();
    for t in &out.truth.subjects {
        let s = out.cohort.get(&t.subject_id).unwrap();
        let (r, d) = (s.outcome("work").unwrap(), s.outcome("children").unwrap());
        match t.last_event_treated {
            Some(true) => assert_eq!((r, d), (t.r_t, t.d_t)),
            Some(false) => assert_eq!((r, d), (t.r_c, t.d_c)),
            None => assert_eq!(r, t.r_c),
        }
    }
}
