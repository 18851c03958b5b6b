//! Corpus-level generation metrics: micro-pooled corpus BLEU, macro ROUGE-L,
//! and a self-contained METEOR variant (exact / prefix-stem / synonym-table
//! unigram alignment with a fragmentation penalty).

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// One hypothesis/reference pair, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct GenPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl GenPair {
    pub fn new(hypothesis: Vec<String>, reference: Vec<String>) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Input("reference must be non-empty".into()));
        }
        Ok(GenPair { hypothesis, reference })
    }
}

/// Whitespace tokenization after splitting punctuation off as its own
/// tokens. Fixed so scores are comparable across runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() * 2);
    for ch in text.chars() {
        if ch.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Micro-averaged corpus BLEU: clipped n-gram matches and totals are pooled
/// over the whole corpus before the geometric mean, with the standard
/// brevity penalty on pooled lengths. No smoothing: a zero pooled match
/// count at any n-gram order zeroes the score.
pub fn corpus_bleu(pairs: &[GenPair], max_n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("corpus_bleu needs at least one pair".into()));
    }
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for pair in pairs {
        hyp_len += pair.hypothesis.len();
        ref_len += pair.reference.len();
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(&pair.hypothesis, n);
            let ref_counts = ngram_counts(&pair.reference, n);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
            totals[n - 1] += pair.hypothesis.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln() / max_n as f64;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Macro ROUGE-L: per pair, the symmetric F-measure of the longest common
/// subsequence; the corpus score is the plain mean over pairs. An empty
/// hypothesis scores 0 for its pair.
pub fn rouge_l(pairs: &[GenPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("rouge_l needs at least one pair".into()));
    }
    let mut sum = 0.0;
    for pair in pairs {
        sum += rouge_l_pair(pair);
    }
    Ok(sum / pairs.len() as f64)
}

pub(crate) fn rouge_l_pair(pair: &GenPair) -> f64 {
    if pair.hypothesis.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&pair.hypothesis, &pair.reference) as f64;
    let p = l / pair.hypothesis.len() as f64;
    let r = l / pair.reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Optional synonym table: words mapping to the same synset id match in the
/// synonym stage.
pub type SynonymTable = BTreeMap<String, String>;

fn common_prefix_len(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// Greedy unigram METEOR with three alignment stages (exact, shared prefix
/// of at least 4 characters, synonym table), the 10PR/(R+9P) recall-heavy
/// mean, and the cubic fragmentation penalty. The corpus score is the mean
/// over pairs. Scores are comparable within this implementation only.
pub fn meteor(pairs: &[GenPair], synonyms: Option<&SynonymTable>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("meteor needs at least one pair".into()));
    }
    let mut sum = 0.0;
    for pair in pairs {
        sum += meteor_pair(pair, synonyms);
    }
    Ok(sum / pairs.len() as f64)
}

pub(crate) fn meteor_pair(pair: &GenPair, synonyms: Option<&SynonymTable>) -> f64 {
    let hyp = &pair.hypothesis;
    let refr = &pair.reference;
    if hyp.is_empty() {
        return 0.0;
    }
    // alignment[i] = matched reference index for hypothesis token i
    let mut alignment: Vec<Option<usize>> = vec![None; hyp.len()];
    let mut ref_taken = vec![false; refr.len()];
    let align_stage = |matches: &dyn Fn(&str, &str) -> bool,
                           alignment: &mut Vec<Option<usize>>,
                           ref_taken: &mut Vec<bool>| {
        for (i, h) in hyp.iter().enumerate() {
            if alignment[i].is_some() {
                continue;
            }
            for (j, r) in refr.iter().enumerate() {
                if !ref_taken[j] && matches(h, r) {
                    alignment[i] = Some(j);
                    ref_taken[j] = true;
                    break;
                }
            }
        }
    };
    align_stage(&|h, r| h == r, &mut alignment, &mut ref_taken);
    align_stage(&|h, r| common_prefix_len(h, r) >= 4, &mut alignment, &mut ref_taken);
    if let Some(table) = synonyms {
        align_stage(
            &|h, r| matches!((table.get(h), table.get(r)), (Some(a), Some(b)) if a == b),
            &mut alignment,
            &mut ref_taken,
        );
    }
    let matched: Vec<(usize, usize)> = alignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = matched.len() as f64;
    if matched.is_empty() {
        return 0.0;
    }
    let p = m / hyp.len() as f64;
    let r = m / refr.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let mut chunks = 1usize;
    for w in matched.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}
