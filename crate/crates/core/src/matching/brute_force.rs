//! Exhaustive stratum matcher used as a reference for the flow solver.

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

use super::{scaled_cost, StratumSolution};

const MAX_ASSIGNMENTS: f64 = 1e7;

/// Enumerates every assignment of disjoint `(J-1)`-control sets to treated
/// units (each treated unit may also go unmatched) and keeps the one with the
/// most sets, then the smallest scaled cost.
///
/// Fails with [`Error::TooLarge`] when the product over treated units of
/// `1 + C(n_controls, J-1)` exceeds ten million.
pub fn brute_force_stratum_match(d: &DistanceMatrix, set_size: usize) -> Result<StratumSolution> {
    if set_size < 2 {
        return Err(Error::Config("set size J must be at least 2".into()));
    }
    let per_set = set_size - 1;
    let nc = d.n_controls();
    let choices = if per_set > nc {
        1.0
    } else {
        1.0 + (0..per_set).fold(1.0, |acc, i| acc * (nc - i) as f64 / (i + 1) as f64)
    };
    let bound = choices.powi(d.n_treated() as i32);
    if bound > MAX_ASSIGNMENTS {
        return Err(Error::TooLarge(format!(
            "{} treated x {nc} controls gives about {bound:.3e} assignments",
            d.n_treated()
        )));
    }

    let mut search = Search {
        d,
        per_set,
        used: vec![false; nc],
        current: Vec::new(),
        best: None,
    };
    search.treated(0, 0);
    let (_, _, picks) = search.best.expect("the empty assignment is always visited");
    if picks.is_empty() && d.n_treated() > 0 {
        return Err(Error::InfeasibleStratum);
    }
    Ok(StratumSolution::from_sets(d, picks))
}

type Best = (usize, i64, Vec<(usize, Vec<usize>)>);

struct Search<'a> {
    d: &'a DistanceMatrix,
    per_set: usize,
    used: Vec<bool>,
    current: Vec<(usize, Vec<usize>)>,
    best: Option<Best>,
}

impl Search<'_> {
    fn treated(&mut self, t: usize, cost: i64) {
        if t == self.d.n_treated() {
            let n = self.current.len();
            let better = match &self.best {
                None => true,
                Some((bn, bc, _)) => n > *bn || (n == *bn && cost < *bc),
            };
            if better {
                self.best = Some((n, cost, self.current.clone()));
            }
            return;
        }
        self.treated(t + 1, cost);
        self.controls(t, 0, Vec::with_capacity(self.per_set), cost);
    }

    fn controls(&mut self, t: usize, start: usize, chosen: Vec<usize>, cost: i64) {
        if chosen.len() == self.per_set {
            for &c in &chosen {
                self.used[c] = true;
            }
            self.current.push((t, chosen.clone()));
            self.treated(t + 1, cost);
            self.current.pop();
            for &c in &chosen {
                self.used[c] = false;
            }
            return;
        }
        for c in start..self.d.n_controls() {
            if self.used[c] {
                continue;
            }
            if let Some(x) = self.d.get(t, c).finite() {
                let mut next = chosen.clone();
                next.push(c);
                self.controls(t, c + 1, next, cost + scaled_cost(x));
            }
        }
    }
}
