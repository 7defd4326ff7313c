//! Recovery metrics: ROUGE-1/2/L F-scores, token-set precision/recall,
//! named-entity recovery ratio, and batch-level multi-sentence scoring.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSetScores {
    pub precision: f64,
    pub recall: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Clipped n-gram overlap F1. Returns 0 when either side has fewer than `n`
/// tokens.
pub fn rouge_n_f(candidate: &[TokenId], reference: &[TokenId], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be >= 1");
    if candidate.len() < n || reference.len() < n {
        return 0.0;
    }
    let mut ref_counts: HashMap<&[TokenId], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut cand_counts: HashMap<&[TokenId], usize> = HashMap::new();
    for gram in candidate.windows(n) {
        *cand_counts.entry(gram).or_insert(0) += 1;
    }
    let overlap: usize = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let p = overlap as f64 / (candidate.len() - n + 1) as f64;
    let r = overlap as f64 / (reference.len() - n + 1) as f64;
    f1(p, r)
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
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

/// Longest-common-subsequence F1.
pub fn rouge_l_f(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    f1(p, r)
}

pub fn rouge_scores(candidate: &[TokenId], reference: &[TokenId]) -> RougeScores {
    RougeScores {
        rouge1_f: rouge_n_f(candidate, reference, 1),
        rouge2_f: rouge_n_f(candidate, reference, 2),
        rouge_l_f: rouge_l_f(candidate, reference),
    }
}

/// Precision |S*∩S|/|S*| and recall |S*∩S|/|S| of a recovered token set `S*`
/// against the original set `S`. An empty recovered set scores (0, 0); an
/// empty original set is an error.
pub fn token_set_scores(
    recovered: &BTreeSet<TokenId>,
    original: &BTreeSet<TokenId>,
) -> Result<TokenSetScores> {
    if original.is_empty() {
        return Err(Error::InvalidInput("original token set is empty".into()));
    }
    if recovered.is_empty() {
        return Ok(TokenSetScores {
            precision: 0.0,
            recall: 0.0,
        });
    }
    let inter = recovered.intersection(original).count() as f64;
    Ok(TokenSetScores {
        precision: inter / recovered.len() as f64,
        recall: inter / original.len() as f64,
    })
}

fn contains_contiguous(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    !needle.is_empty()
        && haystack
            .windows(needle.len())
            .any(|w| w == needle)
}

/// Fraction of the original sentence's annotated entity spans recovered
/// verbatim (contiguous, exact token match) in any recovered sentence.
pub fn nerr(recovered: &[Vec<TokenId>], original: &Sentence) -> Result<f64> {
    if original.entity_spans.is_empty() {
        return Err(Error::NoEntities);
    }
    let mut hit = 0usize;
    for &(start, end) in &original.entity_spans {
        let span = &original.token_ids[start..end];
        if recovered.iter().any(|r| contains_contiguous(r, span)) {
            hit += 1;
        }
    }
    Ok(hit as f64 / original.entity_spans.len() as f64)
}

/// Batch-level (recall, precision) at a ROUGE-L threshold, with greedy
/// one-to-one assignment: candidate/reference pairs are matched best-first by
/// ROUGE-L, each side used at most once, and only pairs strictly above the
/// threshold count.
pub fn multi_sentence_scores(
    recovered: &[Vec<TokenId>],
    batch: &[Vec<TokenId>],
    threshold: f64,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty ground-truth batch".into()));
    }
    if recovered.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, rec) in recovered.iter().enumerate() {
        for (bi, truth) in batch.iter().enumerate() {
            let s = rouge_l_f(rec, truth);
            if s > threshold {
                pairs.push((s, ri, bi));
            }
        }
    }
    // Best score first; ties by recovery index then truth index.
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut rec_used = vec![false; recovered.len()];
    let mut truth_used = vec![false; batch.len()];
    let mut matched = 0usize;
    for (_, ri, bi) in pairs {
        if !rec_used[ri] && !truth_used[bi] {
            rec_used[ri] = true;
            truth_used[bi] = true;
            matched += 1;
        }
    }
    Ok((
        matched as f64 / batch.len() as f64,
        matched as f64 / recovered.len() as f64,
    ))
}

/// Aggregate report for one attacked transcript entry, serialized to
/// `metrics.json` by the experiment driver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub batch_size: usize,
    pub iteration: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nerr: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi: Option<MultiReport>,
    pub per_sentence: Vec<SentenceReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiReport {
    pub recall: f64,
    pub precision: f64,
    pub r: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceReport {
    pub reference_text: String,
    pub recovered_text: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}
