//! File formats: cohort and design CSV, TOML run configuration, and report
//! emission.
//!
//! CSV files start with the line `#isolate-schema=1`. Numbers are written with
//! 17 significant digits so they round-trip bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balance::{BalanceTable, BoxplotRow, QqPoint};
use crate::distance::DistanceSpec;
use crate::error::{Error, Result};
use crate::inference::{
    amplify, AmplificationPoint, Direction, EffectModel, GammaLevel, InferenceOptions,
    SensitivityReport, StatisticKind, StatisticSpec,
};
use crate::matching::{
    EligibilitySpec, ExactSource, ExactVariable, MatchDesign, StateRule, Unmatched,
};
use crate::model::{
    Arm, Cohort, EventRecord, EventState, HistoryRef, MatchedSet, StateSpace, StratumKey,
    SubjectHistory,
};

pub const SCHEMA_LINE: &str = "#isolate-schema=1";
const SCHEMA_PREFIX: &str = "#isolate-schema=";

/// `%.17g` rendering: 17 significant digits, trailing zeros trimmed.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn parse_number(field: &str, what: &str) -> Result<f64> {
    let x: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("{what}: `{field}` is not a number")))?;
    if !x.is_finite() {
        return Err(Error::Schema(format!("{what}: `{field}` is not finite")));
    }
    Ok(x + 0.0)
}

/// Consumes the schema line and returns a reader positioned at the header.
fn open_versioned<R: Read>(reader: R) -> Result<BufReader<R>> {
    let mut reader = BufReader::new(reader);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let first = first.trim_end_matches(['\r', '\n']);
    match first.strip_prefix(SCHEMA_PREFIX) {
        Some("1") => Ok(reader),
        Some(v) => Err(Error::Schema(format!("unsupported schema version `{v}`"))),
        None => Err(Error::Schema(format!(
            "missing `{SCHEMA_LINE}` header line"
        ))),
    }
}

fn csv_writer<W: Write>(mut w: W) -> Result<csv::Writer<W>> {
    writeln!(w, "{SCHEMA_LINE}")?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r)
}

// ---------------------------------------------------------------- cohort

/// Reads the long-format cohort CSV.
///
/// Columns: `subject_id,row,k,time,state` followed by any number of
/// `fixed:<name>`, `tv:<name>` and `outcome:<name>` columns. Each subject has
/// one `S` row (fixed covariates and outcomes) and one `E` row per event
/// (index, time, state and time-varying covariates). Empty fixed or outcome
/// cells mean "absent"; empty time-varying cells are rejected.
pub fn read_cohort<R: Read>(reader: R) -> Result<Cohort> {
    let mut rdr = csv_reader(open_versioned(reader)?);
    let headers = rdr.headers()?.clone();
    let base = ["subject_id", "row", "k", "time", "state"];
    for (i, want) in base.iter().enumerate() {
        if headers.get(i) != Some(*want) {
            return Err(Error::Schema(format!(
                "cohort column {} must be `{want}`",
                i + 1
            )));
        }
    }
    enum Col {
        Fixed(String),
        Tv(String),
        Outcome(String),
    }
    let mut seen = BTreeSet::new();
    let cols: Vec<Col> = headers
        .iter()
        .skip(base.len())
        .map(|h| {
            if !seen.insert(h.to_string()) {
                return Err(Error::Schema(format!("column `{h}` repeated")));
            }
            let col = if let Some(n) = h.strip_prefix("fixed:") {
                Col::Fixed(n.to_string())
            } else if let Some(n) = h.strip_prefix("tv:") {
                Col::Tv(n.to_string())
            } else if let Some(n) = h.strip_prefix("outcome:") {
                Col::Outcome(n.to_string())
            } else {
                return Err(Error::Schema(format!("unknown column `{h}`")));
            };
            match &col {
                Col::Fixed(n) | Col::Tv(n) | Col::Outcome(n) if n.is_empty() => {
                    Err(Error::Schema(format!("column `{h}` has no name")))
                }
                _ => Ok(col),
            }
        })
        .collect::<Result<_>>()?;

    struct Partial {
        fixed: BTreeMap<String, String>,
        outcomes: BTreeMap<String, f64>,
        events: Vec<EventRecord>,
        has_subject_row: bool,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partial: BTreeMap<String, Partial> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = format!("cohort row {}", line + 1);
        if rec.len() != headers.len() {
            return Err(Error::Schema(format!("{at}: wrong number of fields")));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Schema(format!("{at}: empty subject_id")));
        }
        let entry = partial.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                fixed: BTreeMap::new(),
                outcomes: BTreeMap::new(),
                events: Vec::new(),
                has_subject_row: false,
            }
        });
        match &rec[1] {
            "S" => {
                if entry.has_subject_row {
                    return Err(Error::Schema(format!("duplicate subject_id {id}")));
                }
                entry.has_subject_row = true;
                for (col, field) in cols.iter().zip(rec.iter().skip(base.len())) {
                    match col {
                        Col::Fixed(n) if !field.is_empty() => {
                            entry.fixed.insert(n.clone(), field.to_string());
                        }
                        Col::Outcome(n) if !field.is_empty() => {
                            entry.outcomes.insert(n.clone(), parse_number(field, &at)?);
                        }
                        Col::Tv(n) if !field.is_empty() => {
                            return Err(Error::Schema(format!(
                                "{at}: time-varying `{n}` on a subject row"
                            )));
                        }
                        _ => {}
                    }
                }
            }
            "E" => {
                let k: u32 = rec[2]
                    .parse()
                    .map_err(|_| Error::Schema(format!("{at}: bad event index `{}`", &rec[2])))?;
                let state: u16 = rec[4]
                    .parse()
                    .map_err(|_| Error::Schema(format!("{at}: bad state `{}`", &rec[4])))?;
                let mut tv = BTreeMap::new();
                for (col, field) in cols.iter().zip(rec.iter().skip(base.len())) {
                    match col {
                        Col::Tv(n) => {
                            if field.is_empty() {
                                return Err(Error::Schema(format!(
                                    "{at}: time-varying `{n}` missing for subject {id}"
                                )));
                            }
                            tv.insert(n.clone(), parse_number(field, &at)?);
                        }
                        Col::Fixed(n) | Col::Outcome(n) if !field.is_empty() => {
                            return Err(Error::Schema(format!("{at}: `{n}` set on an event row")));
                        }
                        _ => {}
                    }
                }
                entry.events.push(EventRecord {
                    event_index: k,
                    event_time: parse_number(&rec[3], &at)?,
                    state,
                    tv_covariates: tv,
                });
            }
            other => return Err(Error::Schema(format!("{at}: unknown row type `{other}`"))),
        }
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut p = partial.remove(&id).expect("every id was inserted");
        if !p.has_subject_row {
            return Err(Error::Schema(format!("subject {id} has events but no S row")));
        }
        p.events.sort_by_key(|e| e.event_index);
        subjects.push(SubjectHistory::new(id, p.fixed, p.events, p.outcomes)?);
    }
    Cohort::new(subjects)
}

pub fn write_cohort<W: Write>(cohort: &Cohort, w: W) -> Result<()> {
    let mut fixed = BTreeSet::new();
    let mut tv = BTreeSet::new();
    let mut outcomes = BTreeSet::new();
    for s in cohort.subjects() {
        fixed.extend(s.fixed_covariates().keys().cloned());
        outcomes.extend(s.outcomes().keys().cloned());
        for e in s.events() {
            tv.extend(e.tv_covariates.keys().cloned());
        }
    }
    let mut wtr = csv_writer(w)?;
    let mut header: Vec<String> = ["subject_id", "row", "k", "time", "state"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(fixed.iter().map(|n| format!("fixed:{n}")));
    header.extend(tv.iter().map(|n| format!("tv:{n}")));
    header.extend(outcomes.iter().map(|n| format!("outcome:{n}")));
    wtr.write_record(&header)?;
    for s in cohort.subjects() {
        let mut row = vec![s.id().to_string(), "S".into(), String::new(), String::new(), String::new()];
        row.extend(fixed.iter().map(|n| s.fixed_covariates().get(n).cloned().unwrap_or_default()));
        row.extend(tv.iter().map(|_| String::new()));
        row.extend(
            outcomes
                .iter()
                .map(|n| s.outcomes().get(n).map(|&x| format_number(x)).unwrap_or_default()),
        );
        wtr.write_record(&row)?;
        for e in s.events() {
            let mut row = vec![
                s.id().to_string(),
                "E".into(),
                e.event_index.to_string(),
                format_number(e.event_time),
                e.state.to_string(),
            ];
            row.extend(fixed.iter().map(|_| String::new()));
            row.extend(
                tv.iter()
                    .map(|n| e.tv_covariates.get(n).map(|&x| format_number(x)).unwrap_or_default()),
            );
            row.extend(outcomes.iter().map(|_| String::new()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- design

/// Design CSV: `set_id,k,stratum,arm,subject_id,distance`. The treated row
/// carries the set's total distance, each control row its own distance.
pub fn write_design<W: Write>(design: &MatchDesign, w: W) -> Result<()> {
    let mut wtr = csv_writer(w)?;
    wtr.write_record(["set_id", "k", "stratum", "arm", "subject_id", "distance"])?;
    for s in &design.sets {
        let id = s.set_id.to_string();
        let k = s.k.to_string();
        let stratum = s.stratum.encode();
        wtr.write_record([
            id.as_str(),
            &k,
            &stratum,
            "treated",
            &s.treated,
            &format_number(s.total_distance),
        ])?;
        for (c, d) in s.controls.iter().zip(&s.control_distances) {
            wtr.write_record([id.as_str(), &k, &stratum, "control", c, &format_number(*d)])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_design<R: Read>(reader: R) -> Result<MatchDesign> {
    let mut rdr = csv_reader(open_versioned(reader)?);
    let expected = ["set_id", "k", "stratum", "arm", "subject_id", "distance"];
    if rdr.headers()?.iter().ne(expected) {
        return Err(Error::Schema(format!(
            "design header must be `{}`",
            expected.join(",")
        )));
    }
    let mut sets: Vec<MatchedSet> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = format!("design row {}", line + 1);
        let set_id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::Schema(format!("{at}: bad set_id")))?;
        let k: u32 = rec[1]
            .parse()
            .map_err(|_| Error::Schema(format!("{at}: bad k")))?;
        let arm: Arm = rec[3].parse()?;
        let distance = parse_number(&rec[5], &at)?;
        let subject = rec[4].to_string();
        match arm {
            Arm::Treated => {
                if sets.iter().any(|s| s.set_id == set_id) {
                    return Err(Error::Schema(format!("{at}: set {set_id} has two treated rows")));
                }
                sets.push(MatchedSet {
                    set_id,
                    k,
                    stratum: StratumKey::decode(k, &rec[2])?,
                    treated: subject,
                    controls: Vec::new(),
                    control_distances: Vec::new(),
                    total_distance: distance,
                });
            }
            Arm::Control => {
                let s = sets
                    .last_mut()
                    .filter(|s| s.set_id == set_id)
                    .ok_or_else(|| Error::Schema(format!("{at}: control row before its treated row")))?;
                if s.k != k || s.stratum.encode() != rec[2] {
                    return Err(Error::Schema(format!("{at}: set {set_id} mixes strata")));
                }
                s.controls.push(subject);
                s.control_distances.push(distance);
            }
        }
    }
    let design = MatchDesign {
        sets,
        unmatched_treated: Vec::new(),
        config_echo: None,
    };
    design.validate()?;
    Ok(design)
}

pub fn write_unmatched<W: Write>(unmatched: &[Unmatched], w: W) -> Result<()> {
    let mut wtr = csv_writer(w)?;
    wtr.write_record(["subject_id", "k", "stratum", "reason"])?;
    for u in unmatched {
        wtr.write_record([
            u.subject_id.as_str(),
            &u.k.to_string(),
            &u.stratum.encode(),
            &u.reason.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub at_event: Vec<u16>,
    #[serde(default)]
    pub ever_by_k: Vec<Vec<u16>>,
}

impl RuleConfig {
    fn to_rule(&self) -> StateRule {
        StateRule {
            at_event: self.at_event.iter().copied().collect(),
            ever_by_k: self
                .ever_by_k
                .iter()
                .map(|s| s.iter().copied().collect())
                .collect(),
        }
    }
}

/// An exact-match variable: either a fixed covariate (`fixed = "race"`) or a
/// history reference (`history = "event_time[2]"`), optionally binned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactConfig {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cuts: Vec<f64>,
}

impl ExactConfig {
    fn to_variable(&self) -> Result<ExactVariable> {
        let source = match (&self.fixed, &self.history) {
            (Some(name), None) => {
                if !self.cuts.is_empty() {
                    return Err(Error::Config(format!(
                        "exact `{}`: cuts apply to history variables only",
                        self.label
                    )));
                }
                ExactSource::Fixed(name.clone())
            }
            (None, Some(r)) => ExactSource::History(r.parse()?),
            _ => {
                return Err(Error::Config(format!(
                    "exact `{}` needs exactly one of `fixed` or `history`",
                    self.label
                )))
            }
        };
        Ok(ExactVariable {
            label: self.label.clone(),
            source,
            cuts: self.cuts.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EligibilityConfig {
    pub set_size: usize,
    pub k_range: Vec<u32>,
    pub treated: RuleConfig,
    pub control: RuleConfig,
    #[serde(default)]
    pub exact: Vec<ExactConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceConfig {
    pub covariates: Vec<String>,
    #[serde(default)]
    pub penalty_for_unresolvable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticConfig {
    pub kind: StatisticKind,
    pub huber_cutoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub model: EffectModel,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose: Option<String>,
    pub gammas: Vec<f64>,
    pub alpha: f64,
    pub direction: Direction,
    pub bracket: [f64; 2],
    pub tolerance: f64,
    #[serde(default = "default_doublings")]
    pub max_doublings: u32,
    #[serde(default = "default_exact_sets")]
    pub exact_max_sets: usize,
}

fn default_doublings() -> u32 {
    30
}

fn default_exact_sets() -> usize {
    crate::inference::EXACT_MAX_SETS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatesConfig {
    pub interval: String,
    pub point: Vec<String>,
}

impl StatesConfig {
    pub fn to_space(&self) -> Result<StateSpace> {
        let states = std::iter::once(&self.interval)
            .chain(&self.point)
            .enumerate()
            .map(|(i, n)| EventState {
                code: i as u16,
                display_name: n.clone(),
            })
            .collect();
        StateSpace::new(states)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Emit the amplification curve for each Γ > 1 in the report.
    #[serde(default = "yes")]
    pub amplification: bool,
    /// Variables summarized by `balance` when none are given on the command line.
    #[serde(default)]
    pub balance_vars: Vec<String>,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            amplification: true,
            balance_vars: Vec::new(),
        }
    }
}

/// Complete run configuration as stored in TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub eligibility: EligibilityConfig,
    pub distance: DistanceConfig,
    pub statistic: StatisticConfig,
    pub inference: InferenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<StatesConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.eligibility()?;
        self.distance()?;
        self.inference_options()?;
        if let Some(s) = &self.states {
            let space = s.to_space()?;
            let rules = [&self.eligibility.treated, &self.eligibility.control];
            for code in rules
                .iter()
                .flat_map(|r| r.at_event.iter().chain(r.ever_by_k.iter().flatten()))
            {
                if !space.contains_point(*code) {
                    return Err(Error::Config(format!("state {code} is not a configured point state")));
                }
            }
        }
        if self.inference.model == EffectModel::Ratio && self.inference.dose.is_none() {
            return Err(Error::Config("the ratio model needs `dose`".into()));
        }
        Ok(())
    }

    pub fn eligibility(&self) -> Result<EligibilitySpec> {
        let e = &self.eligibility;
        let spec = EligibilitySpec {
            treated: e.treated.to_rule(),
            control: e.control.to_rule(),
            exact: e.exact.iter().map(ExactConfig::to_variable).collect::<Result<_>>()?,
            set_size: e.set_size,
            k_range: e.k_range.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn distance(&self) -> Result<DistanceSpec> {
        let refs = self
            .distance
            .covariates
            .iter()
            .map(|c| c.parse::<HistoryRef>())
            .collect::<Result<_>>()?;
        DistanceSpec::new(refs, self.distance.penalty_for_unresolvable)
    }

    pub fn statistic(&self) -> StatisticSpec {
        StatisticSpec {
            kind: self.statistic.kind,
            huber_cutoff: self.statistic.huber_cutoff,
            scale: None,
        }
    }

    pub fn inference_options(&self) -> Result<InferenceOptions> {
        let i = &self.inference;
        let opts = InferenceOptions {
            gammas: i.gammas.iter().map(|&g| GammaLevel::new(g)).collect::<Result<_>>()?,
            alpha: i.alpha,
            direction: i.direction,
            statistic: self.statistic(),
            bracket: (i.bracket[0], i.bracket[1]),
            tolerance: i.tolerance,
            max_doublings: i.max_doublings,
            exact_max_sets: i.exact_max_sets,
        };
        opts.validate()?;
        Ok(opts)
    }
}

// ---------------------------------------------------------------- reports

pub const REPORT_SCHEMA: &str = "isolate-report/1";

#[derive(Debug, Clone, Serialize)]
pub struct AmplificationCurve {
    pub gamma: f64,
    pub points: Vec<AmplificationPoint>,
}

/// Report JSON: the sensitivity report plus amplification curves.
#[derive(Debug, Clone, Serialize)]
pub struct ReportDocument<'a> {
    pub schema: &'static str,
    #[serde(flatten)]
    pub report: &'a SensitivityReport,
    pub amplification: Vec<AmplificationCurve>,
}

pub fn report_document(report: &SensitivityReport, with_amplification: bool) -> ReportDocument<'_> {
    let amplification = if with_amplification {
        report
            .rows
            .iter()
            .filter(|r| r.gamma > 1.0)
            .map(|r| AmplificationCurve {
                gamma: r.gamma,
                points: amplify(r.gamma).expect("Γ > 1").default_curve(),
            })
            .collect()
    } else {
        Vec::new()
    };
    ReportDocument {
        schema: REPORT_SCHEMA,
        report,
        amplification,
    }
}

pub fn write_report_json<W: Write>(report: &SensitivityReport, with_amplification: bool, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &report_document(report, with_amplification))?;
    writeln!(w)?;
    Ok(())
}

/// Table CSV: one row per Γ.
pub fn write_report_table<W: Write>(report: &SensitivityReport, w: W) -> Result<()> {
    let mut wtr = csv_writer(w)?;
    wtr.write_record([
        "gamma",
        "max_pvalue",
        "exact_max_pvalue",
        "ci_bound",
        "estimate_min",
        "estimate_max",
    ])?;
    for r in &report.rows {
        wtr.write_record([
            format_number(r.gamma),
            format_number(r.max_pvalue),
            r.exact_max_pvalue.map(format_number).unwrap_or_default(),
            format_number(r.ci_bound),
            format_number(r.estimate_min),
            format_number(r.estimate_max),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_balance_csv<W: Write>(table: &BalanceTable, w: W) -> Result<()> {
    let mut wtr = csv_writer(w)?;
    wtr.write_record([
        "variable",
        "level",
        "k",
        "kind",
        "exact",
        "treated_n",
        "control_n",
        "treated_count",
        "control_count",
        "treated_value",
        "control_value",
        "std_diff",
    ])?;
    let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in &table.rows {
        wtr.write_record([
            r.variable.clone(),
            r.level.clone(),
            r.k.map_or_else(|| "all".to_string(), |k| k.to_string()),
            serde_json::to_value(r.kind)?.as_str().unwrap_or_default().to_string(),
            r.exact.to_string(),
            r.treated_n.to_string(),
            r.control_n.to_string(),
            opt(r.treated_count),
            opt(r.control_count),
            format_number(r.treated_value),
            format_number(r.control_value),
            r.std_diff.map(format_number).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct QqSeries {
    /// `None` pools every event index.
    pub k: Option<u32>,
    pub points: Vec<QqPoint>,
}

/// Plot data for one outcome.
#[derive(Debug, Clone, Serialize)]
pub struct OutcomePlots {
    pub outcome: String,
    pub qq: Vec<QqSeries>,
    pub boxplots: Vec<BoxplotRow>,
}

pub fn write_plots_json<W: Write>(plots: &[OutcomePlots], mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, plots)?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::tests::{twelve_specs, twelve_subjects};
    use crate::matching::build_risk_set_match;
    use proptest::prelude::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_number(0.1), "0.10000000000000001");
        assert_eq!(format_number(2.0), "2");
        assert_eq!(format_number(18.5), "18.5");
        assert_eq!(format_number(-0.0), "0");
        assert_eq!(format_number(1e-7), "9.9999999999999995e-08");
        assert_eq!(format_number(1e20), "1e+20");
        assert_eq!(format_number(123456.0), "123456");
        assert_eq!(format_number(0.0001), "0.0001");
    }

    proptest! {
        #[test]
        fn numbers_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let back: f64 = format_number(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), (x + 0.0).to_bits());
        }
    }

    const COHORT: &str = "#isolate-schema=1
subject_id,row,k,time,state,fixed:race,tv:education,outcome:work
s1,S,,,,\"a,b\",,0.5
s1,E,2,24,2,,12,
s1,E,1,20,1,,11,
s2,S,,,,c,,
s2,E,1,19.5,1,,9,
";

    #[test]
    fn cohort_parses_and_round_trips() {
        let c = read_cohort(COHORT.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        let s1 = c.get("s1").unwrap();
        assert_eq!(s1.fixed_covariates()["race"], "a,b");
        assert_eq!(s1.events()[1].event_time, 24.0);
        assert_eq!(s1.outcome("work").unwrap(), 0.5);
        assert!(c.get("s2").unwrap().outcome("work").is_err());

        let mut buf = Vec::new();
        write_cohort(&c, &mut buf).unwrap();
        let again = read_cohort(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_cohort(&again, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(again.subjects(), c.subjects());
    }

    #[test]
    fn cohort_schema_errors() {
        let bad_version = COHORT.replace("schema=1", "schema=2");
        assert!(matches!(read_cohort(bad_version.as_bytes()), Err(Error::Schema(_))));
        let dup = format!("{COHORT}s2,S,,,,c,,\n");
        assert!(matches!(read_cohort(dup.as_bytes()), Err(Error::Schema(m)) if m.contains("duplicate")));
        let missing_tv = COHORT.replace("s2,E,1,19.5,1,,9,", "s2,E,1,19.5,1,,,");
        assert!(matches!(read_cohort(missing_tv.as_bytes()), Err(Error::Schema(_))));
        let orphan = format!("{COHORT}s3,E,1,19,1,,9,\n");
        assert!(read_cohort(orphan.as_bytes()).is_err());
        let no_header = COHORT.replacen("#isolate-schema=1\n", "", 1);
        assert!(read_cohort(no_header.as_bytes()).is_err());
    }

    #[test]
    fn design_round_trip() {
        let cohort = twelve_subjects();
        let (elig, dist) = twelve_specs();
        let design = build_risk_set_match(&cohort, &elig, &dist).unwrap();
        let mut buf = Vec::new();
        write_design(&design, &mut buf).unwrap();
        let back = read_design(buf.as_slice()).unwrap();
        assert_eq!(back.sets, design.sets);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("#isolate-schema=1\nset_id,k,stratum,arm,subject_id,distance\n1,2,region=A,treated,a1,"));
    }

    #[test]
    fn design_rejects_reused_subject() {
        let text = "#isolate-schema=1
set_id,k,stratum,arm,subject_id,distance
1,2,r=A,treated,a,1
1,2,r=A,control,b,1
2,2,r=A,treated,c,1
2,2,r=A,control,b,1
";
        assert!(matches!(read_design(text.as_bytes()), Err(Error::Schema(_))));
    }

    const CONFIG: &str = r#"
[eligibility]
set_size = 3
k_range = [2, 3]
treated = { at_event = [3] }
control = { at_event = [1, 2], ever_by_k = [[1], [2]] }

[[eligibility.exact]]
label = "race"
fixed = "race"

[[eligibility.exact]]
label = "age2"
history = "event_time[2]"
cuts = [18.5, 22.5, 25.5]

[distance]
covariates = ["event_time[*]", "education[k]"]

[statistic]
kind = "huber-m"
huber_cutoff = 2.0

[inference]
model = "ratio"
outcome = "work"
dose = "children"
gammas = [1.0, 1.1]
alpha = 0.05
direction = "less"
bracket = [-1.0, 1.0]
tolerance = 1e-6

[states]
interval = "none"
point = ["girl", "boy", "twins"]
"#;

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::from_toml(CONFIG).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        let elig = cfg.eligibility().unwrap();
        assert_eq!(elig.exact[1].cuts, vec![18.5, 22.5, 25.5]);
        assert_eq!(cfg.inference_options().unwrap().gammas.len(), 2);
    }

    #[test]
    fn config_rejects_bad_input() {
        let overlap = CONFIG.replace("at_event = [3]", "at_event = [2]");
        assert!(matches!(RunConfig::from_toml(&overlap), Err(Error::Config(_))));
        let unknown_state = CONFIG.replace("at_event = [3]", "at_event = [4]");
        assert!(RunConfig::from_toml(&unknown_state).is_err());
        let extra = format!("{CONFIG}\n[mystery]\nx = 1\n");
        assert!(RunConfig::from_toml(&extra).is_err());
        let no_dose = CONFIG.replace("dose = \"children\"\n", "");
        assert!(RunConfig::from_toml(&no_dose).is_err());
        let low_gamma = CONFIG.replace("gammas = [1.0, 1.1]", "gammas = [0.9]");
        assert!(RunConfig::from_toml(&low_gamma).is_err());
    }
}
