//! Balance diagnostics and plot-ready summaries of a matched design.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::tobit_transform;
use crate::matching::MatchDesign;
use crate::model::{history_view, Arm, Cohort, HistoryRef, MatchedSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Categorical,
}

/// One balance row. For numeric variables `level` is `"mean"` and the values
/// are means; for categorical variables `level` is the category and the
/// values are percents of the arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub variable: String,
    pub level: String,
    /// `None` for the pooled rows.
    pub k: Option<u32>,
    pub kind: VariableKind,
    pub exact: bool,
    pub treated_n: usize,
    pub control_n: usize,
    pub treated_count: Option<usize>,
    pub control_count: Option<usize>,
    pub treated_value: f64,
    pub control_value: f64,
    /// `None` when both arms have zero spread and equal values are not
    /// guaranteed.
    pub std_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTable {
    pub set_size: usize,
    pub rows: Vec<BalanceRow>,
}

enum Resolved {
    Exact(String),
    Fixed(String),
    History(HistoryRef),
}

fn resolve(design: &MatchDesign, cohort: &Cohort, name: &str) -> Result<Resolved> {
    if design.sets.iter().any(|s| s.stratum.value(name).is_some()) {
        return Ok(Resolved::Exact(name.to_string()));
    }
    if cohort
        .subjects()
        .iter()
        .any(|s| s.fixed_covariates().contains_key(name))
    {
        return Ok(Resolved::Fixed(name.to_string()));
    }
    let r: HistoryRef = name
        .parse()
        .map_err(|_| Error::UnknownVariable(name.to_string()))?;
    let known = r.name == crate::model::EVENT_TIME
        || r.name == crate::model::STATE
        || cohort.subjects().iter().any(|s| {
            s.events()
                .first()
                .is_some_and(|e| e.tv_covariates.contains_key(&r.name))
        });
    if !known {
        return Err(Error::UnknownVariable(name.to_string()));
    }
    Ok(Resolved::History(r))
}

enum Values {
    Numeric(Vec<(Arm, f64)>),
    Categorical(Vec<(Arm, String)>),
}

fn collect(set: &MatchedSet, cohort: &Cohort, var: &Resolved) -> Result<Option<Values>> {
    let arms = std::iter::once(Arm::Treated).chain(std::iter::repeat(Arm::Control));
    match var {
        Resolved::Exact(label) => {
            let Some(v) = set.stratum.value(label) else {
                return Ok(None);
            };
            Ok(Some(Values::Categorical(
                set.members()
                    .zip(arms)
                    .map(|(_, arm)| (arm, v.to_string()))
                    .collect(),
            )))
        }
        Resolved::Fixed(name) => {
            let mut out = Vec::with_capacity(set.size());
            for (id, arm) in set.members().zip(arms) {
                let s = cohort.require(id)?;
                let v = s.fixed_covariates().get(name).ok_or_else(|| {
                    Error::UnresolvableCovariate {
                        name: name.clone(),
                        subject: id.to_string(),
                    }
                })?;
                out.push((arm, v.clone()));
            }
            Ok(Some(Values::Categorical(out)))
        }
        Resolved::History(r) => {
            if r.index.resolve(set.k).is_none() {
                return Ok(None);
            }
            let mut out = Vec::with_capacity(set.size());
            for (id, arm) in set.members().zip(arms) {
                let view = history_view(cohort.require(id)?, set.k)?;
                let v = view.value(r).ok_or_else(|| Error::UnresolvableCovariate {
                    name: r.to_string(),
                    subject: id.to_string(),
                })?;
                out.push((arm, v));
            }
            Ok(Some(Values::Numeric(out)))
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

fn std_diff(mt: f64, vt: f64, mc: f64, vc: f64) -> Option<f64> {
    let pooled = ((vt + vc) / 2.0).sqrt();
    if pooled > 0.0 {
        Some((mt - mc) / pooled)
    } else if mt == mc {
        Some(0.0)
    } else {
        None
    }
}

fn numeric_row(variable: &str, k: Option<u32>, vals: &[(Arm, f64)]) -> BalanceRow {
    let t: Vec<f64> = vals.iter().filter(|v| v.0 == Arm::Treated).map(|v| v.1).collect();
    let c: Vec<f64> = vals.iter().filter(|v| v.0 == Arm::Control).map(|v| v.1).collect();
    let (mt, vt) = mean_var(&t);
    let (mc, vc) = mean_var(&c);
    BalanceRow {
        variable: variable.to_string(),
        level: "mean".into(),
        k,
        kind: VariableKind::Numeric,
        exact: false,
        treated_n: t.len(),
        control_n: c.len(),
        treated_count: None,
        control_count: None,
        treated_value: mt,
        control_value: mc,
        std_diff: std_diff(mt, vt, mc, vc),
    }
}

fn categorical_rows(
    variable: &str,
    k: Option<u32>,
    exact: bool,
    set_size: usize,
    vals: &[(Arm, String)],
) -> Result<Vec<BalanceRow>> {
    let nt = vals.iter().filter(|v| v.0 == Arm::Treated).count();
    let nc = vals.len() - nt;
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (arm, v) in vals {
        let e = counts.entry(v.as_str()).or_default();
        match arm {
            Arm::Treated => e.0 += 1,
            Arm::Control => e.1 += 1,
        }
    }
    counts
        .into_iter()
        .map(|(level, (ct, cc))| {
            if exact && cc != (set_size - 1) * ct {
                return Err(Error::BalanceViolation(format!(
                    "{variable}={level}: {cc} controls for {ct} treated with J = {set_size}"
                )));
            }
            let pt = ct as f64 / nt as f64;
            let pc = cc as f64 / nc as f64;
            let spread_t = pt * (1.0 - pt);
            let spread_c = pc * (1.0 - pc);
            Ok(BalanceRow {
                variable: variable.to_string(),
                level: level.to_string(),
                k,
                kind: VariableKind::Categorical,
                exact,
                treated_n: nt,
                control_n: nc,
                treated_count: Some(ct),
                control_count: Some(cc),
                treated_value: 100.0 * pt,
                control_value: 100.0 * pc,
                std_diff: std_diff(pt, spread_t, pc, spread_c),
            })
        })
        .collect()
}

/// Per-`k` and pooled balance for each variable.
///
/// A name is looked up first as an exact-match label of the design, then as a
/// fixed covariate, then as a history reference such as `event_time[1]`.
/// Exact-match variables are checked, not just reported: every category must
/// hold exactly `J - 1` controls per treated unit.
pub fn balance_table(design: &MatchDesign, cohort: &Cohort, variables: &[String]) -> Result<BalanceTable> {
    let set_size = design.set_size().ok_or(Error::EmptyDesign)?;
    let mut ks: Vec<u32> = design.sets.iter().map(|s| s.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    for name in variables {
        let var = resolve(design, cohort, name)?;
        let exact = matches!(var, Resolved::Exact(_));
        let mut by_k: BTreeMap<u32, Vec<Values>> = BTreeMap::new();
        for s in &design.sets {
            if let Some(v) = collect(s, cohort, &var)? {
                by_k.entry(s.k).or_default().push(v);
            }
        }
        let groups = ks
            .iter()
            .map(|&k| (Some(k), by_k.get(&k).map(Vec::as_slice).unwrap_or(&[])))
            .chain(std::iter::once((None, &[][..])));
        for (k, group) in groups {
            let group: Vec<&Values> = match k {
                Some(_) => group.iter().collect(),
                None => by_k.values().flatten().collect(),
            };
            if group.is_empty() {
                continue;
            }
            match group[0] {
                Values::Numeric(_) => {
                    let vals: Vec<(Arm, f64)> = group
                        .iter()
                        .flat_map(|v| match v {
                            Values::Numeric(x) => x.clone(),
                            Values::Categorical(_) => unreachable!(),
                        })
                        .collect();
                    rows.push(numeric_row(name, k, &vals));
                }
                Values::Categorical(_) => {
                    let vals: Vec<(Arm, String)> = group
                        .iter()
                        .flat_map(|v| match v {
                            Values::Categorical(x) => x.clone(),
                            Values::Numeric(_) => unreachable!(),
                        })
                        .collect();
                    rows.extend(categorical_rows(name, k, exact, set_size, &vals)?);
                }
            }
        }
    }
    Ok(BalanceTable { set_size, rows })
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn arm_outcomes(design: &MatchDesign, cohort: &Cohort, outcome: &str, k: Option<u32>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut t = Vec::new();
    let mut c = Vec::new();
    for s in design.sets.iter().filter(|s| k.is_none_or(|k| s.k == k)) {
        t.push(cohort.require(&s.treated)?.outcome(outcome)?);
        for id in &s.controls {
            c.push(cohort.require(id)?.outcome(outcome)?);
        }
    }
    t.sort_by(f64::total_cmp);
    c.sort_by(f64::total_cmp);
    Ok((t, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QqPoint {
    pub treated: f64,
    pub control: f64,
}

/// Sorted treated outcomes against type-7 quantiles of the pooled controls at
/// `p = (i - 1) / (n_T - 1)`, optionally restricted to one event index.
pub fn qq_data(design: &MatchDesign, cohort: &Cohort, outcome: &str, k: Option<u32>) -> Result<Vec<QqPoint>> {
    let (t, c) = arm_outcomes(design, cohort, outcome, k)?;
    if t.is_empty() {
        return Ok(Vec::new());
    }
    let n = t.len();
    Ok(t.iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            QqPoint {
                treated: y,
                control: quantile_sorted(&c, p),
            }
        })
        .collect())
}

/// Tukey five-number summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub lower_hinge: f64,
    pub median: f64,
    pub upper_hinge: f64,
    pub max: f64,
}

fn median_sorted(x: &[f64]) -> f64 {
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        (x[n / 2 - 1] + x[n / 2]) / 2.0
    }
}

/// Hinges are medians of the lower and upper halves, each including the
/// median when the count is odd.
pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let half = n.div_ceil(2);
    Some(FiveNumber {
        min: x[0],
        lower_hinge: median_sorted(&x[..half]),
        median: median_sorted(&x),
        upper_hinge: median_sorted(&x[n - half..]),
        max: x[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxplotRow {
    pub k: u32,
    pub arm: Arm,
    pub n: usize,
    #[serde(flatten)]
    pub summary: FiveNumber,
}

fn boxplots_of(design: &MatchDesign, value: impl Fn(&MatchedSet, usize, &str) -> Result<f64>) -> Result<Vec<BoxplotRow>> {
    let mut groups: BTreeMap<(u32, Arm), Vec<f64>> = BTreeMap::new();
    for s in &design.sets {
        for (j, id) in s.members().enumerate() {
            let arm = if j == 0 { Arm::Treated } else { Arm::Control };
            groups.entry((s.k, arm)).or_default().push(value(s, j, id)?);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((k, arm), v)| BoxplotRow {
            k,
            arm,
            n: v.len(),
            summary: five_number(&v).expect("groups are nonempty"),
        })
        .collect())
}

/// Five-number summaries of an outcome per `(k, arm)`.
pub fn outcome_boxplot_data(design: &MatchDesign, cohort: &Cohort, outcome: &str) -> Result<Vec<BoxplotRow>> {
    boxplots_of(design, |_, _, id| cohort.require(id)?.outcome(outcome))
}

/// Five-number summaries of Tobit-adjusted outcomes at `τ0`: controls lowered
/// to `max(0, R - τ0)`. At a well-chosen `τ0` the arms should look alike.
pub fn tobit_adjusted_boxplot_data(
    design: &MatchDesign,
    cohort: &Cohort,
    outcome: &str,
    tau0: f64,
) -> Result<Vec<BoxplotRow>> {
    boxplots_of(design, |_, j, id| {
        Ok(tobit_transform(cohort.require(id)?.outcome(outcome)?, j == 0, tau0))
    })
}
