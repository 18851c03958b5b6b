//! Deterministic synthetic three-task corpora.
//!
//! Patches are sequences of plain symbols. A record is "buggy" when the
//! reserved bug marker (`s0`) appears; the comment names the marker's
//! position (`s2` followed by a position symbol); the refined patch replaces
//! the marker with the fix symbol (`s1`). All three rules are pure functions
//! of the patch, so the tasks share structure by construction.

use super::vocab;
use super::{Corpus, Provenance, ReviewRecord, TaskId};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngState};

// all synthetic roles use three-character symbol names (s10 and up), so a
// record's character length is a pure function of its token count and never
// leaks the label into the length buckets
const BUG_SYMBOL: usize = 10;
const FIX_SYMBOL: usize = 11;
const COMMENT_HEAD_SYMBOL: usize = 12;
const POSITION_BASE: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    /// Plain symbols available for patch content.
    pub content_symbols: usize,
    /// Distinct projects in the training pool.
    pub n_projects: usize,
    /// Distinct projects in the held-out pool (always disjoint from train).
    pub n_test_projects: usize,
    pub min_patch_len: usize,
    pub max_patch_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            content_symbols: 26,
            n_projects: 48,
            n_test_projects: 12,
            min_patch_len: 4,
            max_patch_len: 8,
            seed: 42,
        }
    }
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.min_patch_len < 2 || self.max_patch_len < self.min_patch_len {
            return Err(Error::Config("patch length range must satisfy 2 <= min <= max".into()));
        }
        let content_base = POSITION_BASE + self.max_patch_len;
        if content_base + self.content_symbols > vocab::N_SYMBOLS {
            return Err(Error::Config(format!(
                "symbol budget exceeded: {} position symbols + {} content symbols do not fit",
                self.max_patch_len, self.content_symbols
            )));
        }
        if self.content_symbols < 2 {
            return Err(Error::Config("need at least 2 content symbols".into()));
        }
        if self.n_projects == 0 || self.n_test_projects == 0 {
            return Err(Error::Config("project counts must be positive".into()));
        }
        Ok(())
    }

    fn content_symbol(&self, i: usize) -> String {
        format!("s{}", POSITION_BASE + self.max_patch_len + i)
    }

    fn position_symbol(&self, pos: usize) -> String {
        format!("s{}", POSITION_BASE + pos)
    }
}

#[derive(Debug)]
pub struct SynthCorpora {
    /// Training corpora for T1, T2, T3 in task order.
    pub train: [Corpus; 3],
    /// Held-out test corpora, project-disjoint from training.
    pub test: [Corpus; 3],
}

/// The comment template: head symbol, the flagged position, the
/// replacement symbol.
fn comment_text(spec: &SyntheticTaskSpec, bug_pos: usize, fixed: &[String]) -> String {
    format!(
        "s{COMMENT_HEAD_SYMBOL} {} s{FIX_SYMBOL} {}",
        spec.position_symbol(bug_pos),
        fixed.join(" ")
    )
}

fn rewrite(words: &[String]) -> Vec<String> {
    words
        .iter()
        .map(|w| {
            if w == &format!("s{BUG_SYMBOL}") {
                format!("s{FIX_SYMBOL}")
            } else {
                w.clone()
            }
        })
        .collect()
}

fn make_record(
    spec: &SyntheticTaskSpec,
    task: TaskId,
    index: usize,
    pool_salt: u64,
    project_prefix: &str,
    n_projects: usize,
) -> ReviewRecord {
    let mut rng = RngState::new(derive_seed(
        spec.seed,
        &[pool_salt, task.index() as u64 + 1, index as u64],
    ));
    let len = spec.min_patch_len + rng.next_below(spec.max_patch_len - spec.min_patch_len + 1);
    let mut words: Vec<String> = (0..len)
        .map(|_| spec.content_symbol(rng.next_below(spec.content_symbols)))
        .collect();
    // T1 alternates buggy/clean for exact label balance; T2/T3 records are
    // always buggy (they all carry a review comment).
    let buggy = task != TaskId::T1 || index % 2 == 0;
    let bug_pos = rng.next_below(len);
    if buggy {
        // the bug pattern marks the flagged position and its second
        // successor (wrapping), so every buggy patch carries exactly two
        // markers without them dominating the content
        words[bug_pos] = format!("s{BUG_SYMBOL}");
        words[(bug_pos + 2) % len] = format!("s{BUG_SYMBOL}");
    }
    let project = match task {
        TaskId::T1 => format!("{project_prefix}{}", (index / 2) % n_projects),
        _ => format!("{project_prefix}{}", index % n_projects),
    };
    let mut record = ReviewRecord::new(project, words.join(" "));
    match task {
        TaskId::T1 => {
            record.label = Some(buggy);
        }
        TaskId::T2 => {
            // the review comment names the flagged position, the
            // replacement symbol, and spells out the suggested rewrite
            record.comment = Some(comment_text(spec, bug_pos, &rewrite(&words)));
        }
        TaskId::T3 => {
            let fixed = rewrite(&words);
            record.comment = Some(comment_text(spec, bug_pos, &fixed));
            record.refined = Some(fixed.join(" "));
        }
    }
    record
}

/// Generate the three training corpora plus held-out test corpora, fully
/// deterministic in the spec.
pub fn synth_generate(
    spec: &SyntheticTaskSpec,
    n_train_per_task: usize,
    n_test_per_task: usize,
) -> Result<SynthCorpora> {
    spec.validate()?;
    if n_train_per_task < 10 {
        return Err(Error::Config("n_train_per_task must be at least 10".into()));
    }
    if n_train_per_task % 2 != 0 || n_test_per_task % 2 != 0 {
        return Err(Error::Config(
            "per-task record counts must be even so T1 labels balance exactly".into(),
        ));
    }
    let build = |task: TaskId, n: usize, pool_salt: u64, prefix: &str, n_projects: usize, prov| {
        let records = (0..n)
            .map(|i| make_record(spec, task, i, pool_salt, prefix, n_projects))
            .collect();
        Corpus::new(task, records, prov)
    };
    let train = TaskId::ALL
        .map(|t| build(t, n_train_per_task, 1, "proj", spec.n_projects, Provenance::Train));
    let test = TaskId::ALL.map(|t| {
        build(
            t,
            n_test_per_task,
            2,
            "heldout",
            spec.n_test_projects,
            Provenance::NewTest,
        )
    });
    Ok(SynthCorpora { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::project_overlap;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticTaskSpec::default();
        let a = synth_generate(&spec, 40, 10).unwrap();
        let b = synth_generate(&spec, 40, 10).unwrap();
        for i in 0..3 {
            assert_eq!(a.train[i].records, b.train[i].records);
            assert_eq!(a.test[i].records, b.test[i].records);
        }
    }

    #[test]
    fn t1_labels_balance_exactly() {
        let out = synth_generate(&SyntheticTaskSpec::default(), 60, 20).unwrap();
        for corpus in [&out.train[0], &out.test[0]] {
            let yes = corpus.records.iter().filter(|r| r.label == Some(true)).count();
            assert_eq!(yes * 2, corpus.len());
        }
    }

    #[test]
    fn t1_label_matches_bug_pattern() {
        let out = synth_generate(&SyntheticTaskSpec::default(), 60, 20).unwrap();
        for r in &out.train[0].records {
            let has_bug = r.patch.split_whitespace().any(|w| w == "s10");
            assert_eq!(r.label, Some(has_bug));
        }
    }

    #[test]
    fn t3_refined_differs_exactly_at_rewritten_position() {
        let out = synth_generate(&SyntheticTaskSpec::default(), 40, 10).unwrap();
        for r in &out.train[2].records {
            let patch: Vec<&str> = r.patch.split_whitespace().collect();
            let refined: Vec<&str> = r.refined.as_deref().unwrap().split_whitespace().collect();
            assert_eq!(patch.len(), refined.len());
            let diffs: Vec<usize> = (0..patch.len()).filter(|&i| patch[i] != refined[i]).collect();
            assert!(!diffs.is_empty());
            for d in diffs {
                assert_eq!(patch[d], "s10");
                assert_eq!(refined[d], "s11");
            }
            assert!(!refined.contains(&"s10"));
        }
    }

    #[test]
    fn train_and_test_projects_are_disjoint() {
        let out = synth_generate(&SyntheticTaskSpec::default(), 40, 10).unwrap();
        for i in 0..3 {
            assert!(project_overlap(&[&out.train[i], &out.test[i]]).is_empty());
        }
    }

    #[test]
    fn rejects_odd_counts() {
        assert!(synth_generate(&SyntheticTaskSpec::default(), 41, 10).is_err());
    }
}
