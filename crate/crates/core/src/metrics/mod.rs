//! Classification and generation metrics, round-history bookkeeping, and
//! best-round selection.
//!
//! All metric values are kept in the 0-1 range internally and rendered as
//! percentages with three decimals at the reporting boundary.

mod text;
mod wilcoxon;

pub use text::{corpus_bleu, meteor, rouge_l, tokenize, GenPair, SynonymTable};
pub use wilcoxon::{wilcoxon_signed_rank, MAX_EXACT_N};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// F1 from precision and recall, defined as 0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall, F1 in [0, 1]; each term is 0 when its denominator is 0.
pub fn prf1(counts: &ConfusionCounts) -> (f64, f64, f64) {
    let precision = if counts.tp + counts.fp == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let recall = if counts.tp + counts.fn_ == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    (precision, recall, f1_from_pr(precision, recall))
}

/// Which metric triple a history carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// precision, recall, F1
    Classification,
    /// corpus BLEU, METEOR, ROUGE-L
    Generation,
}

impl MetricKind {
    pub fn metric_names(&self) -> [&'static str; 3] {
        match self {
            MetricKind::Classification => ["precision", "recall", "f1"],
            MetricKind::Generation => ["c_bleu", "meteor", "rouge_l"],
        }
    }
}

/// Per-round metric triples for one task; row index is the round and round 0
/// holds the untrained (vanilla) model's evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundHistory {
    pub kind: MetricKind,
    pub rows: Vec<[f64; 3]>,
}

impl RoundHistory {
    pub fn new(kind: MetricKind) -> Self {
        RoundHistory { kind, rows: Vec::new() }
    }

    pub fn last_round(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }
}

/// Render a history as `round,task,metric,value_percent` CSV lines
/// (three-decimal percentages), including the header.
pub fn history_to_csv(task: &str, history: &RoundHistory) -> String {
    let mut out = String::from("round,task,metric,value_percent\n");
    let names = history.kind.metric_names();
    for (round, row) in history.rows.iter().enumerate() {
        for (name, value) in names.iter().zip(row.iter()) {
            out.push_str(&format!("{round},{task},{name},{:.3}\n", value * 100.0));
        }
    }
    out
}

/// Descending ranks (1 = best) with mean ranks for ties.
fn descending_mean_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Select the best federated round (rounds >= 1; round 0 is the vanilla
/// baseline and never selectable).
///
/// Classification histories take the earliest F1 argmax. Generation
/// histories take the round that is strictly best in at least two of the
/// three metrics; when no round dominates, the fall-back aggregates
/// per-metric ranks (mean rank across the three metrics, mean ranks for
/// ties) and takes the best. The earliest round wins every tie.
pub fn select_best_round(history: &RoundHistory) -> Result<usize> {
    if history.rows.len() < 2 {
        return Err(Error::Input(
            "history needs at least one federated round beyond round 0".into(),
        ));
    }
    let candidates = &history.rows[1..];
    match history.kind {
        MetricKind::Classification => {
            let mut best = 0usize;
            for (i, row) in candidates.iter().enumerate() {
                if row[2] > candidates[best][2] {
                    best = i;
                }
            }
            Ok(best + 1)
        }
        MetricKind::Generation => {
            // strict two-of-three dominance
            let mut wins = vec![0usize; candidates.len()];
            for m in 0..3 {
                let max = candidates.iter().map(|r| r[m]).fold(f64::NEG_INFINITY, f64::max);
                let holders: Vec<usize> = (0..candidates.len())
                    .filter(|&i| candidates[i][m] == max)
                    .collect();
                if holders.len() == 1 {
                    wins[holders[0]] += 1;
                }
            }
            if let Some(i) = wins.iter().position(|&w| w >= 2) {
                return Ok(i + 1);
            }
            // rank-aggregation fall-back
            let mut mean_rank = vec![0.0; candidates.len()];
            for m in 0..3 {
                let vals: Vec<f64> = candidates.iter().map(|r| r[m]).collect();
                for (i, r) in descending_mean_ranks(&vals).into_iter().enumerate() {
                    mean_rank[i] += r / 3.0;
                }
            }
            let mut best = 0usize;
            for (i, &r) in mean_rank.iter().enumerate() {
                if r < mean_rank[best] {
                    best = i;
                }
            }
            Ok(best + 1)
        }
    }
}
