//! Consolidated cross-strategy report: one row per model, nine metric
//! columns, plus exact signed-rank comparisons between selected row pairs.

use std::path::Path;

use fedreview::data::TaskId;
use fedreview::error::Result;
use fedreview::metrics::wilcoxon_signed_rank;
use fedreview::reference::{group_triples, parse_metric_csv};

const ROW_ORDER: [&str; 8] = [
    "vanilla", "central", "fedbest", "toc", "cot", "cat", "cft", "cft_reg",
];

const COMPARISONS: [(&str, &str); 3] = [
    ("central", "vanilla"),
    ("fedbest", "vanilla"),
    ("cft_reg", "fedbest"),
];

fn canonical_label(label: &str) -> &str {
    match label {
        "fed@best" => "fedbest",
        other => other,
    }
}

/// Collect every summary.csv under `dir` (at most two levels deep) and
/// merge the rows; later files win on duplicate (model, task) cells.
fn collect_rows(dir: &Path) -> Result<Vec<(String, [[Option<f64>; 3]; 3])>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() && d == dir {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) == Some("summary.csv") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut models: Vec<(String, [[Option<f64>; 3]; 3])> = Vec::new();
    for file in files {
        let text = std::fs::read_to_string(&file)?;
        for (label, task, vals) in group_triples(&parse_metric_csv(&text)?) {
            let label = canonical_label(&label).to_string();
            let slot = match models.iter_mut().find(|(l, _)| *l == label) {
                Some((_, per_task)) => per_task,
                None => {
                    models.push((label, [[None; 3]; 3]));
                    &mut models.last_mut().unwrap().1
                }
            };
            for (i, v) in vals.iter().enumerate() {
                slot[task.index()][i] = Some(*v);
            }
        }
    }
    Ok(models)
}

/// Build the consolidated markdown report; also returns the warning list.
pub fn build_report(dir: &Path) -> Result<(String, Vec<String>)> {
    let models = collect_rows(dir)?;
    let mut warnings = Vec::new();
    let mut out = String::from("# Model comparison\n\n");
    out.push_str(
        "| Model | t1 precision | t1 recall | t1 f1 | t2 c_bleu | t2 meteor | t2 rouge_l | t3 c_bleu | t3 meteor | t3 rouge_l |\n|---|---|---|---|---|---|---|---|---|---|\n",
    );
    let lookup = |name: &str| models.iter().find(|(l, _)| l == name).map(|(_, v)| v);
    for name in ROW_ORDER {
        match lookup(name) {
            Some(per_task) => {
                let cells: Vec<String> = TaskId::ALL
                    .iter()
                    .flat_map(|t| per_task[t.index()].iter().map(|v| match v {
                        Some(x) => format!("{x:.3}"),
                        None => "-".to_string(),
                    }))
                    .collect();
                out.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
            }
            None => warnings.push(format!("missing run for model '{name}'")),
        }
    }
    // rows outside the fixed order (intermediate stage models, clients)
    for (label, per_task) in &models {
        if ROW_ORDER.contains(&label.as_str()) {
            continue;
        }
        let cells: Vec<String> = TaskId::ALL
            .iter()
            .flat_map(|t| per_task[t.index()].iter().map(|v| match v {
                Some(x) => format!("{x:.3}"),
                None => "-".to_string(),
            }))
            .collect();
        out.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }

    out.push_str("\n## Significance (exact two-sided signed-rank)\n\n");
    for (a, b) in COMPARISONS {
        let (Some(ra), Some(rb)) = (lookup(a), lookup(b)) else {
            warnings.push(format!("comparison {a} vs {b} skipped (missing rows)"));
            continue;
        };
        let mut pairs = Vec::new();
        for t in 0..3 {
            for m in 0..3 {
                if let (Some(x), Some(y)) = (ra[t][m], rb[t][m]) {
                    pairs.push((x, y));
                }
            }
        }
        if pairs.len() < 9 {
            warnings.push(format!("comparison {a} vs {b} skipped (incomplete metrics)"));
            continue;
        }
        match wilcoxon_signed_rank(&pairs) {
            Ok((w, p)) => out.push_str(&format!("- {a} vs {b}: W = {w}, p = {p:.5}\n")),
            Err(e) => out.push_str(&format!("- {a} vs {b}: not computable ({e})\n")),
        }
    }
    if !warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    Ok((out, warnings))
}

/// `fedreview report`: consolidate completed runs under a directory.
pub fn cmd_report(dir: &Path) -> Result<()> {
    let (report, warnings) = build_report(dir)?;
    std::fs::write(dir.join("report.md"), &report)?;
    println!("{report}");
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
