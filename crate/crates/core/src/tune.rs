//! Two-stage search for an early-termination rule that keeps recall above a floor.
//!
//! Stage one fixes the position threshold at 60% of the queue size and binary
//! searches the smallest patience that meets the floor. Stage two repeats the
//! patience search with the threshold at 50%, 40% and 30% and keeps the
//! cheapest qualifying rule, measured in mean distance computations.

use serde::Serialize;

use crate::bench::mean_recall;
use crate::dataset::QuerySet;
use crate::index::{Index, IndexError, Scoring, TunedEarlyTerm};
use crate::search::{EarlyTermination, SearchParams};

/// Threshold fractions of the queue size, in the order they are tried.
pub const THRESHOLD_FRACTIONS: [f64; 4] = [0.6, 0.5, 0.4, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trial {
    pub threshold: usize,
    pub patience: usize,
    pub recall: f64,
    pub mean_distance_computations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneReport {
    pub ef: usize,
    pub k: usize,
    pub recall_floor: f64,
    pub baseline_recall: f64,
    pub baseline_distance_computations: f64,
    /// `None` when no rule meets the floor.
    pub chosen: Option<Trial>,
    pub trials: Vec<Trial>,
}

impl TuneReport {
    pub fn tuned(&self) -> Option<TunedEarlyTerm> {
        self.chosen.map(|c| TunedEarlyTerm { ef: self.ef, threshold: c.threshold, patience: c.patience })
    }

    /// Relative reduction in mean distance computations versus no early termination.
    pub fn savings(&self) -> f64 {
        match self.chosen {
            Some(c) if self.baseline_distance_computations > 0.0 => {
                1.0 - c.mean_distance_computations / self.baseline_distance_computations
            }
            _ => 0.0,
        }
    }
}

/// Settings shared by every trial.
#[derive(Debug, Clone, Copy)]
pub struct TuneSetup {
    pub k: usize,
    pub ef: usize,
    pub recall_floor: f64,
    pub base: SearchParams,
    pub scoring: Scoring,
    pub workers: usize,
}

impl TuneSetup {
    pub fn new(k: usize, ef: usize, recall_floor: f64) -> Self {
        Self { k, ef, recall_floor, base: SearchParams::new(k, ef), scoring: Scoring::Exact, workers: 1 }
    }
}

struct Evaluator<'a> {
    index: &'a Index,
    queries: &'a QuerySet,
    truth: &'a [Vec<u32>],
    setup: TuneSetup,
    trials: Vec<Trial>,
}

impl Evaluator<'_> {
    fn run(&mut self, rule: Option<EarlyTermination>) -> Result<Trial, IndexError> {
        let params = SearchParams { k: self.setup.k, ef: self.setup.ef, early_term: rule, ..self.setup.base };
        let out = self.index.batch_search(self.queries, &params, self.setup.scoring, self.setup.workers)?;
        let trial = Trial {
            threshold: rule.map_or(0, |r| r.threshold),
            patience: rule.map_or(0, |r| r.patience),
            recall: mean_recall(&out.id_matrix(), self.truth, self.setup.k),
            mean_distance_computations: out.mean_distance_computations(),
        };
        if rule.is_some() {
            self.trials.push(trial);
        }
        Ok(trial)
    }

    /// Smallest patience in `[1, ef]` meeting the floor at `threshold`, assuming
    /// recall grows with patience.
    fn smallest_patience(&mut self, threshold: usize) -> Result<Option<Trial>, IndexError> {
        let floor = self.setup.recall_floor;
        let rule = |patience| Some(EarlyTermination { threshold, patience });
        let top = self.run(rule(self.setup.ef))?;
        if top.recall < floor {
            return Ok(None);
        }
        let (mut lo, mut hi, mut best) = (1usize, self.setup.ef, top);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let t = self.run(rule(mid))?;
            if t.recall >= floor {
                hi = mid;
                best = t;
            } else {
                lo = mid + 1;
            }
        }
        Ok(Some(best))
    }
}

/// Tunes a rule for queue size `setup.ef` on dry-run `queries` with known `truth`.
pub fn tune_early_term(
    index: &Index,
    queries: &QuerySet,
    truth: &[Vec<u32>],
    setup: TuneSetup,
) -> Result<TuneReport, IndexError> {
    SearchParams { early_term: None, ..setup.base }.validate()?;
    let mut eval = Evaluator { index, queries, truth, setup, trials: Vec::new() };
    let baseline = eval.run(None)?;
    let mut chosen: Option<Trial> = None;
    if setup.ef >= 2 {
        let mut thresholds: Vec<usize> = THRESHOLD_FRACTIONS
            .iter()
            .map(|f| ((f * setup.ef as f64).round() as usize).clamp(1, setup.ef - 1))
            .collect();
        thresholds.dedup();
        for t in thresholds {
            if let Some(trial) = eval.smallest_patience(t)? {
                // equal cost favors the later, smaller threshold
                if chosen.is_none_or(|c| trial.mean_distance_computations <= c.mean_distance_computations) {
                    chosen = Some(trial);
                }
            }
        }
    }
    Ok(TuneReport {
        ef: setup.ef,
        k: setup.k,
        recall_floor: setup.recall_floor,
        baseline_recall: baseline.recall,
        baseline_distance_computations: baseline.mean_distance_computations,
        chosen,
        trials: eval.trials,
    })
}
