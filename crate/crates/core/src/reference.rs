//! Reference metric tables from the full-scale study runs, shipped as CSV
//! fixtures. They let report, selection, and significance logic be tested
//! without any training.

use crate::data::TaskId;
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, RoundHistory};

pub const ROUNDWISE_INDIVIDUAL: &str = include_str!("../fixtures/reference/roundwise_individual.csv");
pub const INDIVIDUAL_MODELS: &str = include_str!("../fixtures/reference/individual_models.csv");
pub const TOC_STAGES: &str = include_str!("../fixtures/reference/toc_stages.csv");
pub const COT_BEST: &str = include_str!("../fixtures/reference/cot_best.csv");
pub const CAT_BEST: &str = include_str!("../fixtures/reference/cat_best.csv");
pub const CFT_ROUNDS: &str = include_str!("../fixtures/reference/cft_rounds.csv");
pub const CFT_REG_ROUNDS: &str = include_str!("../fixtures/reference/cft_reg_rounds.csv");
pub const MODEL_COMPARISON: &str = include_str!("../fixtures/reference/model_comparison.csv");

/// Every fixture with a label -> per-task metric layout (not round-wise).
pub fn labeled_tables() -> Vec<(&'static str, &'static str)> {
    vec![
        ("individual_models", INDIVIDUAL_MODELS),
        ("toc_stages", TOC_STAGES),
        ("cot_best", COT_BEST),
        ("cat_best", CAT_BEST),
        ("cft_rounds", CFT_ROUNDS),
        ("cft_reg_rounds", CFT_REG_ROUNDS),
        ("model_comparison", MODEL_COMPARISON),
    ]
}

/// One parsed fixture row; values are on the percent scale as printed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub task: TaskId,
    pub metric: String,
    pub value_percent: f64,
}

/// Parse a `label,task,metric,value_percent` CSV (the first column may also
/// be a round number; it is kept verbatim as the label).
pub fn parse_metric_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Data(format!("bad fixture line {}: '{line}'", i + 1)));
        }
        rows.push(MetricRow {
            label: parts[0].to_string(),
            task: TaskId::parse(parts[1])?,
            metric: parts[2].to_string(),
            value_percent: parts[3]
                .parse()
                .map_err(|_| Error::Data(format!("bad value '{}' on line {}", parts[3], i + 1)))?,
        });
    }
    Ok(rows)
}

/// Group rows into (label, task) -> [first, second, third] metric triples,
/// preserving first-appearance order of labels.
pub fn group_triples(rows: &[MetricRow]) -> Vec<(String, TaskId, [f64; 3])> {
    let metric_slot = |task: TaskId, name: &str| -> usize {
        let names: [&str; 3] = match task {
            TaskId::T1 => ["precision", "recall", "f1"],
            _ => ["c_bleu", "meteor", "rouge_l"],
        };
        names.iter().position(|n| *n == name).unwrap_or(3)
    };
    let mut out: Vec<(String, TaskId, [f64; 3])> = Vec::new();
    for row in rows {
        let slot = metric_slot(row.task, &row.metric);
        if slot == 3 {
            continue;
        }
        match out.iter_mut().find(|(l, t, _)| *l == row.label && *t == row.task) {
            Some((_, _, vals)) => vals[slot] = row.value_percent,
            None => {
                let mut vals = [0.0; 3];
                vals[slot] = row.value_percent;
                out.push((row.label.clone(), row.task, vals));
            }
        }
    }
    out
}

/// The round-wise individual-task history for one task, as a 0-1 scale
/// [`RoundHistory`] (round 0 = vanilla).
pub fn roundwise_history(task: TaskId) -> Result<RoundHistory> {
    let rows = parse_metric_csv(ROUNDWISE_INDIVIDUAL)?;
    let kind = match task {
        TaskId::T1 => MetricKind::Classification,
        _ => MetricKind::Generation,
    };
    let mut history = RoundHistory::new(kind);
    for (label, t, vals) in group_triples(&rows) {
        if t != task {
            continue;
        }
        let round: usize = label
            .parse()
            .map_err(|_| Error::Data(format!("non-numeric round '{label}'")))?;
        if round != history.rows.len() {
            return Err(Error::Data(format!("rounds are not contiguous at {round}")));
        }
        history.rows.push(vals.map(|v| v / 100.0));
    }
    Ok(history)
}

/// The model-comparison fixture as (model, per-task percent triples) in row
/// order.
pub fn model_comparison() -> Result<Vec<(String, [[f64; 3]; 3])>> {
    let rows = parse_metric_csv(MODEL_COMPARISON)?;
    let mut out: Vec<(String, [[f64; 3]; 3])> = Vec::new();
    for (label, task, vals) in group_triples(&rows) {
        match out.iter_mut().find(|(l, _)| *l == label) {
            Some((_, per_task)) => per_task[task.index()] = vals,
            None => {
                let mut per_task = [[0.0; 3]; 3];
                per_task[task.index()] = vals;
                out.push((label, per_task));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_parse() {
        for (name, text) in labeled_tables() {
            let rows = parse_metric_csv(text).unwrap();
            assert!(!rows.is_empty(), "{name} is empty");
        }
        let rows = parse_metric_csv(ROUNDWISE_INDIVIDUAL).unwrap();
        assert_eq!(rows.len(), 21 * 9);
    }

    #[test]
    fn roundwise_history_shape() {
        for task in TaskId::ALL {
            let h = roundwise_history(task).unwrap();
            assert_eq!(h.rows.len(), 21);
        }
        let t1 = roundwise_history(TaskId::T1).unwrap();
        assert!((t1.rows[0][0] - 0.53989).abs() < 1e-9);
        assert!((t1.rows[1][2] - 0.55175).abs() < 1e-9);
    }

    #[test]
    fn comparison_rows_in_fixed_order() {
        let cmp = model_comparison().unwrap();
        let labels: Vec<&str> = cmp.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(
            labels,
            ["vanilla", "central", "fedbest", "toc", "cot", "cat", "cft", "cft_reg"]
        );
    }
}
