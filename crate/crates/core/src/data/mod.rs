//! Corpus schema, the resplit/partitioning pipeline, prompt formatting, and
//! the deterministic synthetic three-task generator.

pub mod synth;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngState};

pub use synth::{synth_generate, SynthCorpora, SyntheticTaskSpec};

/// Patches at or above this many characters are excluded before bucketing.
pub const MAX_PATCH_CHARS: usize = 5000;

/// The three code-review sub-tasks: review necessity prediction (yes/no),
/// review comment generation, and code refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    T1,
    T2,
    T3,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::T1, TaskId::T2, TaskId::T3];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::T1 => "t1",
            TaskId::T2 => "t2",
            TaskId::T3 => "t3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(TaskId::T1),
            "t2" => Ok(TaskId::T2),
            "t3" => Ok(TaskId::T3),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn index(&self) -> usize {
        match self {
            TaskId::T1 => 0,
            TaskId::T2 => 1,
            TaskId::T3 => 2,
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    NewValid,
    NewTest,
}

/// One review data point. Fields beyond `project`/`patch` are present when
/// the record's task requires them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewRecord {
    pub project: String,
    pub patch: String,
    pub label: Option<bool>,
    pub comment: Option<String>,
    pub refined: Option<String>,
    pub patch_length: usize,
}

impl ReviewRecord {
    pub fn new(project: impl Into<String>, patch: impl Into<String>) -> Self {
        let patch = patch.into();
        let patch_length = patch.chars().count();
        ReviewRecord {
            project: project.into(),
            patch,
            label: None,
            comment: None,
            refined: None,
            patch_length,
        }
    }

    fn has_required_fields(&self, task: TaskId) -> bool {
        if self.patch.is_empty() || self.project.is_empty() {
            return false;
        }
        match task {
            TaskId::T1 => self.label.is_some(),
            TaskId::T2 => self.comment.is_some(),
            TaskId::T3 => self.comment.is_some() && self.refined.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: TaskId,
    pub records: Vec<ReviewRecord>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(task: TaskId, records: Vec<ReviewRecord>, provenance: Provenance) -> Self {
        Corpus {
            task,
            records,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn projects(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.project.clone()).collect()
    }
}

/// A project-disjoint, length-stratified subset owned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    pub corpus: Corpus,
}

impl ClientShard {
    pub fn sample_count(&self) -> usize {
        self.corpus.len()
    }
}

/// A task-tagged record, the unit the trainers consume; mixed-task training
/// sets are just lists of these.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub task: TaskId,
    pub record: ReviewRecord,
}

impl Corpus {
    pub fn items(&self) -> Vec<TrainItem> {
        self.records
            .iter()
            .map(|r| TrainItem {
                task: self.task,
                record: r.clone(),
            })
            .collect()
    }
}

/// Mapping from JSONL field names onto the record schema. The defaults are
/// the canonical dump names; all of them are remappable.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub project: String,
    pub patch: String,
    pub label: String,
    pub comment: String,
    pub refined: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            project: "proj".into(),
            patch: "patch".into(),
            label: "y".into(),
            comment: "msg".into(),
            refined: "new_patch".into(),
        }
    }
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    pub skipped: usize,
}

fn value_to_label(v: &serde_json::Value) -> Option<bool> {
    match v {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(0) => Some(false),
            Some(1) => Some(true),
            _ => None,
        },
        serde_json::Value::String(s) => match s.as_str() {
            "0" | "no" => Some(false),
            "1" | "yes" => Some(true),
            _ => None,
        },
        _ => None,
    }
}

/// Load a JSONL corpus, one object per line. Rows missing a required field
/// (or failing to parse) are counted and skipped; more than 50% skipped
/// rows is a format error.
pub fn load_jsonl(path: &Path, task: TaskId, fields: &FieldMap) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut total = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let get_str = |key: &str| value.get(key).and_then(|v| v.as_str()).map(str::to_string);
        let mut record = match (get_str(&fields.project), get_str(&fields.patch)) {
            (Some(project), Some(patch)) if !patch.is_empty() && !project.is_empty() => {
                ReviewRecord::new(project, patch)
            }
            _ => {
                skipped += 1;
                continue;
            }
        };
        record.label = value.get(&fields.label).and_then(value_to_label);
        record.comment = get_str(&fields.comment);
        record.refined = get_str(&fields.refined);
        if !record.has_required_fields(task) {
            skipped += 1;
            continue;
        }
        records.push(record);
    }
    if total > 0 && skipped * 2 > total {
        return Err(Error::Data(format!(
            "{skipped} of {total} rows skipped in {}; treating the file as malformed",
            path.display()
        )));
    }
    Ok(LoadOutcome {
        corpus: Corpus::new(task, records, Provenance::Train),
        skipped,
    })
}

/// Write a corpus as canonical JSONL: fields `proj`, `patch`, `y` (0/1),
/// `msg`, `new_patch`; UTF-8 with LF line endings.
pub fn write_jsonl(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &corpus.records {
        let mut obj = serde_json::Map::new();
        obj.insert("proj".into(), serde_json::Value::String(r.project.clone()));
        obj.insert("patch".into(), serde_json::Value::String(r.patch.clone()));
        if let Some(label) = r.label {
            obj.insert("y".into(), serde_json::Value::Number((label as i64).into()));
        }
        if let Some(c) = &r.comment {
            obj.insert("msg".into(), serde_json::Value::String(c.clone()));
        }
        if let Some(refined) = &r.refined {
            obj.insert("new_patch".into(), serde_json::Value::String(refined.clone()));
        }
        out.write_all(serde_json::Value::Object(obj).to_string().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct ResplitOutcome {
    pub new_valid: Corpus,
    pub new_test: Corpus,
    pub warnings: Vec<String>,
}

/// Merge the old validation and test corpora, group by project, and assign
/// the top half of projects (by record count, descending; ties broken by
/// project name ascending) to the new validation set. Projects never
/// straddle the two outputs.
pub fn resplit_eval(valid: &Corpus, test: &Corpus) -> Result<ResplitOutcome> {
    if valid.task != test.task {
        return Err(Error::Data(format!(
            "cannot resplit corpora of different tasks ({} vs {})",
            valid.task, test.task
        )));
    }
    let merged: Vec<&ReviewRecord> = valid.records.iter().chain(test.records.iter()).collect();
    if merged.is_empty() {
        return Err(Error::Data("resplit input is empty".into()));
    }
    let mut by_project: BTreeMap<&str, Vec<&ReviewRecord>> = BTreeMap::new();
    for r in &merged {
        by_project.entry(r.project.as_str()).or_default().push(r);
    }
    let mut projects: Vec<(&str, usize)> = by_project.iter().map(|(p, rs)| (*p, rs.len())).collect();
    projects.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let n_valid = projects.len().div_ceil(2);
    let valid_projects: BTreeSet<&str> = projects[..n_valid].iter().map(|(p, _)| *p).collect();
    let mut new_valid = Vec::new();
    let mut new_test = Vec::new();
    for r in merged {
        if valid_projects.contains(r.project.as_str()) {
            new_valid.push(r.clone());
        } else {
            new_test.push(r.clone());
        }
    }
    let mut warnings = Vec::new();
    if new_test.is_empty() {
        warnings.push("resplit produced an empty new-test corpus (too few projects)".into());
    }
    Ok(ResplitOutcome {
        new_valid: Corpus::new(valid.task, new_valid, Provenance::NewValid),
        new_test: Corpus::new(valid.task, new_test, Provenance::NewTest),
        warnings,
    })
}

/// Projects appearing in more than one of the given corpora. Empty means
/// the inputs are pairwise project-disjoint.
pub fn project_overlap(corpora: &[&Corpus]) -> BTreeSet<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for c in corpora {
        for p in c.projects() {
            *seen.entry(p).or_insert(0) += 1;
        }
    }
    seen.into_iter().filter(|(_, n)| *n > 1).map(|(p, _)| p).collect()
}

#[derive(Debug)]
pub struct LengthBuckets {
    pub buckets: Vec<Vec<ReviewRecord>>,
    pub excluded_long: usize,
}

/// Partition records into `n_buckets` patch-length groups using decile-style
/// quantile cuts; records with `patch_length >= 5000` are excluded first.
/// Equal lengths always land in the same bucket, so heavily tied corpora may
/// leave some buckets empty.
pub fn bucket_by_length(corpus: &Corpus, n_buckets: usize) -> Result<LengthBuckets> {
    if n_buckets == 0 {
        return Err(Error::Config("n_buckets must be at least 1".into()));
    }
    let kept: Vec<&ReviewRecord> = corpus
        .records
        .iter()
        .filter(|r| r.patch_length < MAX_PATCH_CHARS)
        .collect();
    let excluded_long = corpus.records.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Data("no records remain after length filtering".into()));
    }
    let mut lengths: Vec<usize> = kept.iter().map(|r| r.patch_length).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    let cuts: Vec<usize> = (1..n_buckets)
        .map(|i| lengths[((i * n) / n_buckets).max(1) - 1])
        .collect();
    let mut buckets: Vec<Vec<ReviewRecord>> = vec![Vec::new(); n_buckets];
    for r in kept {
        let b = cuts.iter().filter(|&&c| c < r.patch_length).count();
        buckets[b].push(r.clone());
    }
    Ok(LengthBuckets {
        buckets,
        excluded_long,
    })
}

/// Draw two client shards from a corpus at the given ratio.
///
/// Records are bucketed by patch length, each bucket is seed-shuffled, and
/// shards take one record per bucket per sweep until their quota is met.
/// Projects are claimed wholesale by the first shard that samples them, so
/// the two shards are always project-disjoint. With `balance_labels`, yes
/// and no records alternate so each shard ends up exactly balanced.
pub fn sample_shards(
    corpus: &Corpus,
    total: usize,
    ratio: (u64, u64),
    balance_labels: bool,
    seed: u64,
) -> Result<(ClientShard, ClientShard)> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::Config("shard ratio parts must be positive".into()));
    }
    let quota_a = (total as u64 * ratio.0 / (ratio.0 + ratio.1)) as usize;
    let quota_b = total - quota_a;
    let bucketed = bucket_by_length(corpus, 10)?;
    let mut rng = RngState::new(derive_seed(seed, &[0x5A4D]));
    let mut queues: Vec<VecDeque<ReviewRecord>> = bucketed
        .buckets
        .into_iter()
        .map(|mut b| {
            rng.shuffle(&mut b);
            b.into()
        })
        .collect();
    let available: usize = queues.iter().map(|q| q.len()).sum();
    if available < quota_a + quota_b {
        return Err(Error::Capacity {
            context: "sample_shards".into(),
            needed: quota_a + quota_b,
            available,
        });
    }

    let mut claimed: BTreeMap<String, u32> = BTreeMap::new();
    let a = fill_shard(&mut queues, &mut claimed, 0, quota_a, balance_labels, corpus)?;
    let b = fill_shard(&mut queues, &mut claimed, 1, quota_b, balance_labels, corpus)?;
    Ok((a, b))
}

/// Draw a single shard from a corpus (the two-pool pipeline, where each
/// client samples from its own already-disjoint pool).
pub fn sample_shard_from(
    corpus: &Corpus,
    count: usize,
    balance_labels: bool,
    seed: u64,
    client_id: u32,
) -> Result<ClientShard> {
    let bucketed = bucket_by_length(corpus, 10)?;
    let mut rng = RngState::new(derive_seed(seed, &[0x5A4D]));
    let mut queues: Vec<VecDeque<ReviewRecord>> = bucketed
        .buckets
        .into_iter()
        .map(|mut b| {
            rng.shuffle(&mut b);
            b.into()
        })
        .collect();
    let mut claimed: BTreeMap<String, u32> = BTreeMap::new();
    fill_shard(&mut queues, &mut claimed, client_id, count, balance_labels, corpus)
}

/// One round-robin fill over the bucket queues: at each bucket visit, take
/// the best available record, preferring projects this shard already claimed
/// (keeps each client on few projects) and then the alternating label.
fn fill_shard(
    queues: &mut [VecDeque<ReviewRecord>],
    claimed: &mut BTreeMap<String, u32>,
    shard_id: u32,
    quota: usize,
    balance_labels: bool,
    corpus: &Corpus,
) -> Result<ClientShard> {
    if balance_labels && quota % 2 != 0 {
        return Err(Error::Data(format!(
            "cannot balance labels with odd shard quota {quota}"
        )));
    }
    let label_cap = quota / 2;
    let mut records: Vec<ReviewRecord> = Vec::with_capacity(quota);
    let mut taken_yes = 0usize;
    let mut taken_no = 0usize;
    'fill: loop {
        let mut advanced = false;
        for queue in queues.iter_mut() {
            if records.len() == quota {
                break 'fill;
            }
            // records whose project belongs to another shard are dead here
            queue.retain(|r| claimed.get(&r.project).is_none_or(|&owner| owner == shard_id));
            let want_yes = taken_yes <= taken_no;
            let mut picked: Option<(usize, usize)> = None; // (score, index)
            for (i, r) in queue.iter().enumerate() {
                if balance_labels {
                    let is_yes = r.label == Some(true);
                    let taken = if is_yes { taken_yes } else { taken_no };
                    if taken >= label_cap {
                        continue;
                    }
                    let own = claimed.get(&r.project) == Some(&shard_id);
                    let score = (!own as usize) * 2 + (is_yes != want_yes) as usize;
                    if picked.is_none_or(|(s, _)| score < s) {
                        picked = Some((score, i));
                    }
                    if score == 0 {
                        break;
                    }
                } else {
                    let own = claimed.get(&r.project) == Some(&shard_id);
                    if own {
                        picked = Some((0, i));
                        break;
                    }
                    if picked.is_none() {
                        picked = Some((1, i));
                    }
                }
            }
            if let Some((_, i)) = picked {
                let r = queue.remove(i).unwrap();
                if balance_labels {
                    if r.label == Some(true) {
                        taken_yes += 1;
                    } else {
                        taken_no += 1;
                    }
                }
                claimed.insert(r.project.clone(), shard_id);
                records.push(r);
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
    }
    if records.len() < quota || (balance_labels && taken_yes != taken_no) {
        return Err(Error::Capacity {
            context: format!("shard {shard_id} (balanced: {balance_labels})"),
            needed: quota,
            available: records.len(),
        });
    }
    Ok(ClientShard {
        client_id: shard_id,
        corpus: Corpus::new(corpus.task, records, corpus.provenance),
    })
}

/// Canonical prompt templates. All markers are reserved vocabulary tokens;
/// the returned target carries no end-of-sequence token.
pub fn format_prompt(task: TaskId, record: &ReviewRecord) -> Result<(Vec<u32>, Vec<u32>)> {
    let patch = vocab::encode_words(&record.patch)?;
    if patch.is_empty() {
        return Err(Error::Data("record has an empty patch".into()));
    }
    let mut prompt = Vec::with_capacity(patch.len() + 8);
    prompt.push(vocab::PATCH_OPEN);
    prompt.extend_from_slice(&patch);
    prompt.push(vocab::PATCH_CLOSE);
    match task {
        TaskId::T1 => {
            prompt.push(vocab::ASK_REVIEW);
            let label = record
                .label
                .ok_or_else(|| Error::Data("record is missing the yes/no label".into()))?;
            let target = vec![if label { vocab::YES } else { vocab::NO }];
            Ok((prompt, target))
        }
        TaskId::T2 => {
            prompt.push(vocab::GEN_COMMENT);
            let comment = record
                .comment
                .as_deref()
                .ok_or_else(|| Error::Data("record is missing the comment".into()))?;
            Ok((prompt, vocab::encode_words(comment)?))
        }
        TaskId::T3 => {
            let comment = record
                .comment
                .as_deref()
                .ok_or_else(|| Error::Data("record is missing the comment".into()))?;
            let refined = record
                .refined
                .as_deref()
                .ok_or_else(|| Error::Data("record is missing the refined patch".into()))?;
            prompt.push(vocab::COMMENT_OPEN);
            prompt.extend(vocab::encode_words(comment)?);
            prompt.push(vocab::COMMENT_CLOSE);
            prompt.push(vocab::GEN_REFINED);
            Ok((prompt, vocab::encode_words(refined)?))
        }
    }
}

/// Prompt plus completion as the trainer consumes them: generation targets
/// are EOS-terminated so the model learns to stop.
pub fn training_pair(task: TaskId, record: &ReviewRecord) -> Result<(Vec<u32>, Vec<u32>)> {
    let (prompt, mut target) = format_prompt(task, record)?;
    if task != TaskId::T1 {
        target.push(vocab::EOS);
    }
    Ok((prompt, target))
}

/// Decoded view of a formatted prompt (round-trip check for the templates).
#[derive(Debug, PartialEq)]
pub struct ParsedPrompt {
    pub task: TaskId,
    pub patch: Vec<u32>,
    pub comment: Option<Vec<u32>>,
}

pub fn parse_prompt(tokens: &[u32]) -> Result<ParsedPrompt> {
    let close = tokens
        .iter()
        .position(|&t| t == vocab::PATCH_CLOSE)
        .ok_or_else(|| Error::Data("prompt has no patch close marker".into()))?;
    if tokens.first() != Some(&vocab::PATCH_OPEN) {
        return Err(Error::Data("prompt does not start with the patch marker".into()));
    }
    let patch = tokens[1..close].to_vec();
    match tokens.get(close + 1) {
        Some(&vocab::ASK_REVIEW) => Ok(ParsedPrompt {
            task: TaskId::T1,
            patch,
            comment: None,
        }),
        Some(&vocab::GEN_COMMENT) => Ok(ParsedPrompt {
            task: TaskId::T2,
            patch,
            comment: None,
        }),
        Some(&vocab::COMMENT_OPEN) => {
            let rest = &tokens[close + 2..];
            let cclose = rest
                .iter()
                .position(|&t| t == vocab::COMMENT_CLOSE)
                .ok_or_else(|| Error::Data("prompt has no comment close marker".into()))?;
            Ok(ParsedPrompt {
                task: TaskId::T3,
                patch,
                comment: Some(rest[..cclose].to_vec()),
            })
        }
        _ => Err(Error::Data("prompt has no task marker".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(project: &str, patch: &str) -> ReviewRecord {
        ReviewRecord::new(project, patch)
    }

    fn corpus_of(task: TaskId, recs: Vec<ReviewRecord>) -> Corpus {
        Corpus::new(task, recs, Provenance::Train)
    }

    #[test]
    fn load_jsonl_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let out = load_jsonl(&path, TaskId::T2, &FieldMap::default()).unwrap();
        assert!(out.corpus.is_empty());
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn load_jsonl_counts_skipped_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t2.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"proj\":\"p\",\"patch\":\"s0 s1\",\"msg\":\"s2\"}\n",
                "{\"proj\":\"p\",\"patch\":\"s3\",\"msg\":\"s2\"}\n",
                "{\"proj\":\"p\",\"patch\":\"s4 s5\",\"msg\":\"s2\"}\n",
                "{\"proj\":\"p\",\"msg\":\"s2\"}\n",
            ),
        )
        .unwrap();
        let out = load_jsonl(&path, TaskId::T2, &FieldMap::default()).unwrap();
        assert_eq!(out.corpus.len(), 3);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn load_jsonl_rejects_mostly_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "not json\nstill not json\n{\"proj\":\"p\",\"patch\":\"s0\",\"msg\":\"s1\"}\n",
        )
        .unwrap();
        let err = load_jsonl(&path, TaskId::T2, &FieldMap::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let mut r1 = record("alpha", "s0 s1 s2");
        r1.label = Some(true);
        let mut r2 = record("beta", "s3 s4");
        r2.label = Some(false);
        let corpus = corpus_of(TaskId::T1, vec![r1, r2]);
        write_jsonl(&path, &corpus).unwrap();
        let back = load_jsonl(&path, TaskId::T1, &FieldMap::default()).unwrap();
        assert_eq!(back.skipped, 0);
        assert_eq!(back.corpus.records, corpus.records);
    }

    #[test]
    fn resplit_orders_projects_by_count() {
        let mut recs = Vec::new();
        for (proj, count) in [("p1", 10), ("p2", 8), ("p3", 5), ("p4", 3)] {
            for _ in 0..count {
                recs.push(record(proj, "s0"));
            }
        }
        let valid = corpus_of(TaskId::T2, recs[..13].to_vec());
        let test = corpus_of(TaskId::T2, recs[13..].to_vec());
        let out = resplit_eval(&valid, &test).unwrap();
        let vp = out.new_valid.projects();
        let tp = out.new_test.projects();
        assert_eq!(vp, ["p1", "p2"].iter().map(|s| s.to_string()).collect());
        assert_eq!(tp, ["p3", "p4"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn resplit_three_projects_puts_two_in_valid() {
        let recs: Vec<ReviewRecord> = [("a", 3), ("b", 2), ("c", 1)]
            .iter()
            .flat_map(|(p, n)| (0..*n).map(move |_| record(p, "s0")))
            .collect();
        let valid = corpus_of(TaskId::T2, recs[..3].to_vec());
        let test = corpus_of(TaskId::T2, recs[3..].to_vec());
        let out = resplit_eval(&valid, &test).unwrap();
        assert_eq!(out.new_valid.projects().len(), 2);
        assert_eq!(out.new_test.projects().len(), 1);
    }

    #[test]
    fn resplit_single_project_warns() {
        let valid = corpus_of(TaskId::T2, vec![record("only", "s0")]);
        let test = corpus_of(TaskId::T2, vec![record("only", "s1")]);
        let out = resplit_eval(&valid, &test).unwrap();
        assert_eq!(out.new_valid.len(), 2);
        assert!(out.new_test.is_empty());
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn overlap_report_is_symmetric() {
        let a = corpus_of(TaskId::T1, vec![record("x", "s0"), record("y", "s1")]);
        let b = corpus_of(TaskId::T1, vec![record("x", "s2"), record("z", "s3")]);
        let ab = project_overlap(&[&a, &b]);
        let ba = project_overlap(&[&b, &a]);
        assert_eq!(ab, ba);
        assert_eq!(ab.into_iter().collect::<Vec<_>>(), vec!["x".to_string()]);
        let disjoint = project_overlap(&[&a, &corpus_of(TaskId::T1, vec![record("w", "s0")])]);
        assert!(disjoint.is_empty());
    }

    #[test]
    fn buckets_are_even_for_distinct_lengths() {
        let recs: Vec<ReviewRecord> = (0..100)
            .map(|i| {
                let patch: String = vec!["s0"; i + 1].join(" ");
                record(&format!("p{i}"), &patch)
            })
            .collect();
        let out = bucket_by_length(&corpus_of(TaskId::T2, recs), 10).unwrap();
        for b in &out.buckets {
            assert_eq!(b.len(), 10);
        }
    }

    #[test]
    fn equal_lengths_collapse_to_one_bucket() {
        let recs: Vec<ReviewRecord> = (0..30).map(|i| record(&format!("p{i}"), "s0 s1")).collect();
        let out = bucket_by_length(&corpus_of(TaskId::T2, recs), 10).unwrap();
        assert_eq!(out.buckets[0].len(), 30);
        assert!(out.buckets[1..].iter().all(|b| b.is_empty()));
    }

    #[test]
    fn overlong_patches_are_excluded() {
        let long_patch = "x".repeat(6000);
        let recs = vec![record("a", &long_patch), record("b", "s0")];
        let out = bucket_by_length(&corpus_of(TaskId::T2, recs), 10).unwrap();
        assert_eq!(out.excluded_long, 1);
        let total: usize = out.buckets.iter().map(|b| b.len()).sum();
        assert_eq!(total, 1);
    }

    #[test]
    fn bucket_assignment_is_a_partition() {
        let recs: Vec<ReviewRecord> = (0..57)
            .map(|i| record(&format!("p{i}"), &vec!["s1"; (i * 7) % 23 + 1].join(" ")))
            .collect();
        let corpus = corpus_of(TaskId::T2, recs);
        let out = bucket_by_length(&corpus, 10).unwrap();
        let total: usize = out.buckets.iter().map(|b| b.len()).sum();
        assert_eq!(total, corpus.len());
    }

    #[test]
    fn shards_meet_exact_ratio_and_disjointness() {
        let recs: Vec<ReviewRecord> = (0..200)
            .map(|i| record(&format!("p{}", i / 2), &vec!["s0"; i % 17 + 1].join(" ")))
            .collect();
        let corpus = corpus_of(TaskId::T2, recs);
        let (a, b) = sample_shards(&corpus, 80, (3, 1), false, 7).unwrap();
        assert_eq!(a.sample_count(), 60);
        assert_eq!(b.sample_count(), 20);
        assert!(project_overlap(&[&a.corpus, &b.corpus]).is_empty());
    }

    #[test]
    fn shards_balance_labels_exactly() {
        let recs: Vec<ReviewRecord> = (0..300)
            .map(|i| {
                let mut r = record(&format!("p{}", i / 4), &vec!["s0"; i % 11 + 1].join(" "));
                r.label = Some(i % 2 == 0);
                r
            })
            .collect();
        let corpus = corpus_of(TaskId::T1, recs);
        let (a, b) = sample_shards(&corpus, 120, (3, 1), true, 3).unwrap();
        for shard in [&a, &b] {
            let yes = shard.corpus.records.iter().filter(|r| r.label == Some(true)).count();
            assert_eq!(yes * 2, shard.sample_count());
        }
        assert_eq!(a.sample_count(), 90);
        assert_eq!(b.sample_count(), 30);
    }

    #[test]
    fn shards_error_on_insufficient_records() {
        let recs: Vec<ReviewRecord> = (0..10).map(|i| record(&format!("p{i}"), "s0")).collect();
        let corpus = corpus_of(TaskId::T2, recs);
        let err = sample_shards(&corpus, 100, (3, 1), false, 1).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn shards_deterministic_in_seed() {
        let recs: Vec<ReviewRecord> = (0..120)
            .map(|i| record(&format!("p{i}"), &vec!["s0"; i % 13 + 1].join(" ")))
            .collect();
        let corpus = corpus_of(TaskId::T2, recs);
        let run = |seed| sample_shards(&corpus, 40, (3, 1), false, seed).unwrap();
        assert_eq!(run(9), run(9));
        assert_ne!(run(9).0.corpus.records, run(10).0.corpus.records);
    }

    #[test]
    fn round_robin_hand_simulation() {
        // 8 records in two distinct length groups; quotas 6 and 2. Each
        // shard draw alternates between the two buckets.
        let recs: Vec<ReviewRecord> = (0..8)
            .map(|i| {
                let len = if i % 2 == 0 { 1 } else { 5 };
                record(&format!("p{i}"), &vec!["s0"; len].join(" "))
            })
            .collect();
        let corpus = corpus_of(TaskId::T2, recs);
        let bucketed = bucket_by_length(&corpus, 2).unwrap();
        assert_eq!(bucketed.buckets[0].len(), 4);
        assert_eq!(bucketed.buckets[1].len(), 4);
        let (a, b) = sample_shards(&corpus, 8, (3, 1), false, 5).unwrap();
        assert_eq!(a.sample_count(), 6);
        assert_eq!(b.sample_count(), 2);
        for shard in [&a, &b] {
            let short = shard.corpus.records.iter().filter(|r| r.patch_length == 2).count();
            let long = shard.corpus.records.iter().filter(|r| r.patch_length > 2).count();
            assert_eq!(short, long, "draws should alternate buckets");
        }
    }

    #[test]
    fn prompt_templates_match_contract() {
        let mut r = record("p", "s0 s1 s2");
        r.label = Some(true);
        r.comment = Some("s3 s4".into());
        r.refined = Some("s0 s5 s2".into());

        let (p1, t1) = format_prompt(TaskId::T1, &r).unwrap();
        assert_eq!(t1, vec![vocab::YES]);
        assert_eq!(p1[0], vocab::PATCH_OPEN);
        assert_eq!(p1[p1.len() - 1], vocab::ASK_REVIEW);

        let (p3, t3) = format_prompt(TaskId::T3, &r).unwrap();
        assert!(p3.contains(&vocab::COMMENT_OPEN));
        assert!(p3.contains(&vocab::GEN_REFINED));
        assert_eq!(t3.len(), 3);

        let parsed = parse_prompt(&p3).unwrap();
        assert_eq!(parsed.task, TaskId::T3);
        assert_eq!(parsed.patch, vocab::encode_words("s0 s1 s2").unwrap());
        assert_eq!(parsed.comment, Some(vocab::encode_words("s3 s4").unwrap()));

        r.label = None;
        assert!(format_prompt(TaskId::T1, &r).is_err());
    }

    #[test]
    fn training_pair_appends_eos_for_generation_tasks() {
        let mut r = record("p", "s0");
        r.label = Some(false);
        r.comment = Some("s1".into());
        r.refined = Some("s2".into());
        let (_, t1) = training_pair(TaskId::T1, &r).unwrap();
        assert_eq!(t1, vec![vocab::NO]);
        let (_, t2) = training_pair(TaskId::T2, &r).unwrap();
        assert_eq!(t2, vec![vocab::encode_words("s1").unwrap()[0], vocab::EOS]);
    }
}
