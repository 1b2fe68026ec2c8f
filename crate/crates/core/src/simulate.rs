//! Synthetic event-history cohorts with a known effect and controllable bias.
//!
//! Each subject draws a latent `u` that is never written to the cohort. Age
//! runs in whole years; in each year an event occurs with probability
//! `logistic(hazard_intercept + hazard_u * u)`, so timing always depends on
//! `u`. Given an event, the subject lands in the treated state `K` with
//! probability `logistic(treated_intercept + gamma_true * u)` and otherwise in
//! one of the states `1..K` uniformly.
//!
//! Outcomes are built from potential outcomes for the last recorded event:
//! `work` under the configured Tobit or proportional effect and `children`,
//! the eventual family size `max(P, children from recorded events)` where
//! `P` is a planned size that rises with `u`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{impute_education_at_event, Cohort, EventRecord, SubjectHistory};

pub const WORK: &str = "work";
pub const CHILDREN: &str = "children";
pub const EDUCATION: &str = "education";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Latent {
    Uniform,
    /// `u = 1` with probability `p`, else 0.
    Binary { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum EffectSpec {
    /// `r_T = max(0, r_C - tau)`.
    Tobit { tau: f64 },
    /// `r_T - r_C = beta (d_T - d_C)`.
    Proportional { beta: f64 },
}

fn d_start_age() -> u32 {
    16
}
fn d_end_age() -> u32 {
    45
}
fn d_max_events() -> u32 {
    2
}
fn d_point_states() -> u16 {
    3
}
fn d_hazard_intercept() -> f64 {
    -1.6
}
fn d_hazard_u() -> f64 {
    1.0
}
fn d_treated_intercept() -> f64 {
    -2.2
}
fn d_noise() -> f64 {
    0.10
}
fn d_levels() -> u32 {
    4
}
fn d_set_size() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n_subjects: usize,
    pub seed: u64,
    pub effect: EffectSpec,
    /// Log-odds of the treated state per unit of `u`; 0 means the state given
    /// an event is assigned at random.
    #[serde(default)]
    pub gamma_true: f64,
    #[serde(default = "d_point_states")]
    pub point_states: u16,
    #[serde(default = "d_max_events")]
    pub max_events: u32,
    #[serde(default = "d_start_age")]
    pub start_age: u32,
    #[serde(default = "d_end_age")]
    pub end_age: u32,
    #[serde(default = "d_hazard_intercept")]
    pub hazard_intercept: f64,
    #[serde(default = "d_hazard_u")]
    pub hazard_u: f64,
    #[serde(default = "d_treated_intercept")]
    pub treated_intercept: f64,
    #[serde(default = "d_noise")]
    pub outcome_noise: f64,
    /// Levels of each of the fixed covariates `race` and `region`.
    #[serde(default = "d_levels")]
    pub covariate_levels: u32,
    /// Intended matched set size; recorded in the truth file.
    #[serde(default = "d_set_size")]
    pub set_size: usize,
    #[serde(default = "uniform")]
    pub latent: Latent,
}

fn uniform() -> Latent {
    Latent::Uniform
}

impl SimSpec {
    pub fn new(n_subjects: usize, seed: u64, effect: EffectSpec) -> Self {
        Self {
            n_subjects,
            seed,
            effect,
            gamma_true: 0.0,
            point_states: d_point_states(),
            max_events: d_max_events(),
            start_age: d_start_age(),
            end_age: d_end_age(),
            hazard_intercept: d_hazard_intercept(),
            hazard_u: d_hazard_u(),
            treated_intercept: d_treated_intercept(),
            outcome_noise: d_noise(),
            covariate_levels: d_levels(),
            set_size: d_set_size(),
            latent: Latent::Uniform,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SimSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.point_states < 2 {
            return bad("need at least two point states");
        }
        if self.max_events == 0 {
            return bad("max_events must be >= 1");
        }
        if self.start_age <= 6 || self.end_age < self.start_age {
            return bad("ages must satisfy 6 < start_age <= end_age");
        }
        if !(self.outcome_noise >= 0.0) || self.covariate_levels == 0 || self.set_size < 2 {
            return bad("noise must be >= 0, covariate_levels >= 1 and set_size >= 2");
        }
        let finite = [
            self.gamma_true,
            self.hazard_intercept,
            self.hazard_u,
            self.treated_intercept,
            self.outcome_noise,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("parameters must be finite");
        }
        if let Latent::Binary { p } = self.latent {
            if !(0.0..=1.0).contains(&p) {
                return bad("binary latent needs 0 <= p <= 1");
            }
        }
        match self.effect {
            EffectSpec::Tobit { tau } if !tau.is_finite() => bad("tau must be finite"),
            EffectSpec::Proportional { beta } if !beta.is_finite() => bad("beta must be finite"),
            _ => Ok(()),
        }
    }
}

/// Counterfactual record for one subject, relative to its last recorded
/// event: `_c` if that event had been a non-treated state, `_t` if treated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub subject_id: String,
    pub u: f64,
    pub last_event_treated: Option<bool>,
    pub r_c: f64,
    pub r_t: f64,
    pub d_c: f64,
    pub d_t: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruthFile {
    pub spec: SimSpec,
    pub subjects: Vec<Truth>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub cohort: Cohort,
    pub truth: TruthFile,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn subject(spec: &SimSpec, index: usize, width: usize) -> Result<(SubjectHistory, Truth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let id = format!("s{:0width$}", index + 1);

    let u = match spec.latent {
        Latent::Uniform => rng.random::<f64>(),
        Latent::Binary { p } => f64::from(u8::from(rng.random::<f64>() < p)),
    };
    let levels = spec.covariate_levels;
    let fixed = BTreeMap::from([
        ("race".to_string(), format!("r{}", rng.random_range(1..=levels))),
        ("region".to_string(), format!("g{}", rng.random_range(1..=levels))),
    ]);
    let noise = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
        if sd > 0.0 {
            Normal::new(0.0, sd).expect("sd > 0").sample(rng)
        } else {
            0.0
        }
    };
    let total_education = (10.0 + 6.0 * u + noise(&mut rng, 1.5)).round().clamp(6.0, 20.0);

    let hazard = logistic(spec.hazard_intercept + spec.hazard_u * u);
    let p_treated = logistic(spec.treated_intercept + spec.gamma_true * u);
    let treated_state = spec.point_states;
    let mut events = Vec::new();
    for age in spec.start_age..=spec.end_age {
        if events.len() as u32 == spec.max_events {
            break;
        }
        if rng.random::<f64>() < hazard {
            let state = if rng.random::<f64>() < p_treated {
                treated_state
            } else {
                rng.random_range(1..treated_state)
            };
            let age = f64::from(age);
            events.push(EventRecord {
                event_index: events.len() as u32 + 1,
                event_time: age,
                state,
                tv_covariates: BTreeMap::from([(
                    EDUCATION.to_string(),
                    impute_education_at_event(total_education, age)?,
                )]),
            });
        }
    }

    let planned = 1.0
        + f64::from(
            Binomial::new(3, 0.3 + 0.4 * u)
                .expect("valid binomial")
                .sample(&mut rng) as u32,
        );
    let base = 0.45 + 0.1 * u + noise(&mut rng, spec.outcome_noise);

    let births = |treated: bool| if treated { 2.0 } else { 1.0 };
    let is_treated: Vec<bool> = events.iter().map(|e| e.state == treated_state).collect();
    let earlier_children: f64 = is_treated
        .iter()
        .take(events.len().saturating_sub(1))
        .map(|&t| births(t))
        .sum();
    let earlier_treated = is_treated
        .iter()
        .take(events.len().saturating_sub(1))
        .filter(|&&t| t)
        .count() as f64;
    let last = is_treated.last().copied();
    let (children_c, children_t) = match last {
        Some(_) => (earlier_children + 1.0, earlier_children + 2.0),
        None => (0.0, 0.0),
    };
    let d_c = planned.max(children_c);
    let d_t = planned.max(children_t);

    let (r_c, r_t) = match spec.effect {
        EffectSpec::Tobit { tau } => {
            let w = base.max(0.0);
            let r_c = (w - tau * earlier_treated).max(0.0);
            (r_c, (r_c - tau).max(0.0))
        }
        EffectSpec::Proportional { beta } => {
            let w = base.max(0.3);
            (w + beta * d_c, w + beta * d_t)
        }
    };
    let (r, d) = if last == Some(true) { (r_t, d_t) } else { (r_c, d_c) };
    let outcomes = BTreeMap::from([(WORK.to_string(), r + 0.0), (CHILDREN.to_string(), d)]);
    let history = SubjectHistory::new(id.clone(), fixed, events, outcomes)?;
    let truth = Truth {
        subject_id: id,
        u,
        last_event_treated: last,
        r_c,
        r_t,
        d_c,
        d_t,
    };
    Ok((history, truth))
}

/// Generates a cohort. The same spec always yields the same cohort: each
/// subject draws from its own ChaCha8 stream keyed by its index.
pub fn simulate_cohort(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let width = spec.n_subjects.max(1).to_string().len();
    let pairs = (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| subject(spec, i, width))
        .collect::<Result<Vec<_>>>()?;
    let (subjects, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(SimOutput {
        cohort: Cohort::new(subjects)?,
        truth: TruthFile {
            spec: spec.clone(),
            subjects: truth,
        },
    })
}

pub fn write_truth_json<W: Write>(truth: &TruthFile, mut w: W) -> Result<()> {
    serde_json::to_writer(&mut w, truth)?;
    writeln!(w)?;
    Ok(())
}
