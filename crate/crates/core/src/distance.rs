//! Rank-based robust Mahalanobis distance.
//!
//! Each covariate column is replaced by its average ranks within the pool,
//! the covariance of the ranks is computed with an `n - 1` denominator, and
//! each diagonal entry is rescaled to the variance of untied ranks `1..=n`
//! (row and column multiplied by `sqrt(var_untied / var_j)`). Distances are the
//! quadratic form of the raw rank differences in the Moore-Penrose inverse of
//! that adjusted covariance, so tied or outlying columns carry no extra weight.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{HistoryRef, HistoryView, SubjectId};

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSpec {
    covariates: Vec<HistoryRef>,
    /// Drop covariates that do not resolve on every pool member instead of failing.
    pub penalty_for_unresolvable: bool,
}

impl DistanceSpec {
    pub fn new(covariates: Vec<HistoryRef>, penalty_for_unresolvable: bool) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::Config("distance needs at least one covariate".into()));
        }
        for (i, c) in covariates.iter().enumerate() {
            if covariates[..i].contains(c) {
                return Err(Error::Config(format!("covariate {c} listed twice")));
            }
        }
        Ok(Self {
            covariates,
            penalty_for_unresolvable,
        })
    }

    pub fn covariates(&self) -> &[HistoryRef] {
        &self.covariates
    }

    /// Concrete covariate list at event index `k`.
    pub fn expand(&self, k: u32) -> Vec<HistoryRef> {
        let mut out: Vec<HistoryRef> = Vec::new();
        for c in &self.covariates {
            for r in c.expand(k) {
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entry {
    Finite(f64),
    Forbidden,
}

impl Entry {
    pub fn finite(self) -> Option<f64> {
        match self {
            Entry::Finite(d) => Some(d),
            Entry::Forbidden => None,
        }
    }
}

/// Treated-by-control distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    treated_ids: Vec<SubjectId>,
    control_ids: Vec<SubjectId>,
    entries: Vec<Entry>,
}

impl DistanceMatrix {
    pub fn new(
        treated_ids: Vec<SubjectId>,
        control_ids: Vec<SubjectId>,
        entries: Vec<Entry>,
    ) -> Result<Self> {
        if entries.len() != treated_ids.len() * control_ids.len() {
            return Err(Error::Config(format!(
                "distance matrix needs {}x{} entries, got {}",
                treated_ids.len(),
                control_ids.len(),
                entries.len()
            )));
        }
        if let Some(bad) = entries
            .iter()
            .filter_map(|e| e.finite())
            .find(|d| !d.is_finite() || *d < 0.0)
        {
            return Err(Error::Domain(format!(
                "distances must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(Self {
            treated_ids,
            control_ids,
            entries,
        })
    }

    /// Dense matrix with every pair allowed.
    pub fn from_rows(
        treated_ids: Vec<SubjectId>,
        control_ids: Vec<SubjectId>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let entries = rows.iter().flatten().map(|&d| Entry::Finite(d)).collect();
        Self::new(treated_ids, control_ids, entries)
    }

    pub fn treated_ids(&self) -> &[SubjectId] {
        &self.treated_ids
    }

    pub fn control_ids(&self) -> &[SubjectId] {
        &self.control_ids
    }

    pub fn n_treated(&self) -> usize {
        self.treated_ids.len()
    }

    pub fn n_controls(&self) -> usize {
        self.control_ids.len()
    }

    pub fn get(&self, t: usize, c: usize) -> Entry {
        self.entries[t * self.control_ids.len() + c]
    }
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

fn sample_covariance(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let p = cols.len();
    let n = cols.first().map_or(0, Vec::len);
    let mut cov = DMatrix::zeros(p, p);
    if n < 2 {
        return cov;
    }
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    for a in 0..p {
        for b in a..p {
            let s: f64 = (0..n)
                .map(|i| (cols[a][i] - means[a]) * (cols[b][i] - means[b]))
                .sum();
            let v = s / (n as f64 - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

pub(crate) fn pseudo_inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 {
        return m;
    }
    let svd = m.svd(true, true);
    let max_sv = svd.singular_values.max();
    if max_sv == 0.0 {
        return DMatrix::zeros(cols, rows);
    }
    let eps = f64::EPSILON.sqrt() * max_sv;
    svd.pseudo_inverse(eps)
        .expect("both singular vector sets were computed")
}

/// Robust Mahalanobis distances between every treated and control view.
///
/// The pool (treated followed by controls) is ranked and its covariance
/// estimated as a whole. Covariate references with relative indices are
/// expanded at the event index of the first view.
pub fn robust_mahalanobis(
    treated: &[HistoryView<'_>],
    controls: &[HistoryView<'_>],
    spec: &DistanceSpec,
) -> Result<DistanceMatrix> {
    let pool: Vec<&HistoryView<'_>> = treated.iter().chain(controls).collect();
    let first = pool.first().ok_or(Error::EmptyPool)?;
    let n = pool.len();

    let mut columns: Vec<Vec<f64>> = Vec::new();
    for r in spec.expand(first.k()) {
        let mut col = Vec::with_capacity(n);
        let mut missing = None;
        for v in &pool {
            match v.value(&r) {
                Some(x) => col.push(x),
                None => {
                    missing = Some(v.subject_id());
                    break;
                }
            }
        }
        match missing {
            None => columns.push(average_ranks(&col)),
            Some(_) if spec.penalty_for_unresolvable => {
                log::debug!("dropping unresolvable covariate {r} at k={}", first.k());
            }
            Some(subject) => {
                return Err(Error::UnresolvableCovariate {
                    name: r.to_string(),
                    subject: subject.to_string(),
                })
            }
        }
    }

    let p = columns.len();
    let mut cov = sample_covariance(&columns);
    let var_untied = (n * (n + 1)) as f64 / 12.0;
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let v = cov[(j, j)];
            if v > 0.0 {
                (var_untied / v).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for a in 0..p {
        for b in 0..p {
            cov[(a, b)] *= scale[a] * scale[b];
        }
    }
    let precision = pseudo_inverse(cov);

    let nt = treated.len();
    let mut entries = Vec::with_capacity(nt * controls.len());
    let mut diff = DVector::zeros(p);
    for t in 0..nt {
        for c in nt..n {
            for j in 0..p {
                diff[j] = columns[j][t] - columns[j][c];
            }
            let d = (&precision * &diff).dot(&diff);
            entries.push(Entry::Finite(d.max(0.0)));
        }
    }
    DistanceMatrix::new(
        treated.iter().map(|v| v.subject_id().to_string()).collect(),
        controls.iter().map(|v| v.subject_id().to_string()).collect(),
        entries,
    )
}
