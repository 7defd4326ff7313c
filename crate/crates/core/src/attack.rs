//! Text reconstruction from transmitted gradients: bag-of-words and max-length
//! extraction, prompt selection, beam search with an n-gram repetition
//! penalty, prior-guided reordering, and multi-sentence recovery.
//!
//! Every operation here is a pure function of its inputs and an explicit
//! seed; the hidden ground truth carried by transcript entries is never read.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sentence, TokenId, Vocab, BOS_ID, MAX_SENTENCE_TOKENS, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::fedsim::TranscriptEntry;
use crate::model::{
    loss_and_gradients, next_token_dist_with_bos, perplexity, sentence_logprob, ModelParams,
};

/// Token set recovered from the word-embedding gradient rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagOfWords {
    pub token_ids: BTreeSet<TokenId>,
    pub source_iteration: usize,
}

impl BagOfWords {
    /// Bag without the special tokens; the usable vocabulary for beams and
    /// insertions.
    pub fn content_tokens(&self) -> BTreeSet<TokenId> {
        self.token_ids
            .iter()
            .copied()
            .filter(|&t| t != PAD_ID && t != UNK_ID && t != BOS_ID)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtractionMode {
    /// Any nonzero entry marks a row (exact for untied embeddings).
    Exact,
    /// Row flagged when its maximum absolute entry exceeds the threshold
    /// (for noisy gradients).
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSearchConfig {
    /// Beam width k.
    pub beam_size: usize,
    /// Maximum sentence length L in tokens (overridden by the recovered max
    /// length when one is available).
    pub max_len: usize,
    /// Repetition penalty n-gram order.
    pub ngram_order: usize,
    /// Repetition/ban penalty weight rho.
    pub penalty: f64,
    /// Fall back to the whole bag when no capitalized prompt exists.
    pub prompt_fallback: bool,
    /// Optional per-token usage caps (word-frequency oracle mode); `None`
    /// leaves usage unlimited.
    pub token_caps: Option<BTreeMap<TokenId, usize>>,
}

impl Default for BeamSearchConfig {
    fn default() -> Self {
        BeamSearchConfig {
            beam_size: 32,
            max_len: 40,
            ngram_order: 2,
            penalty: 1.0,
            prompt_fallback: true,
            token_caps: None,
        }
    }
}

impl BeamSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 || self.ngram_order == 0 {
            return Err(Error::InvalidConfig(
                "beam_size, max_len, ngram_order must all be >= 1".into(),
            ));
        }
        if !(self.penalty >= 0.0) {
            return Err(Error::InvalidConfig("penalty must be >= 0".into()));
        }
        Ok(())
    }
}

/// A partial or complete beam-search hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub token_ids: Vec<TokenId>,
    /// Cumulative log-probability minus penalty (not length-normalized).
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReorderConfig {
    /// Gradient-norm weight beta in the prior score.
    pub beta: f64,
    pub steps_per_stage: usize,
    /// Number of cut positions for phrase permutation.
    pub p_cuts: usize,
    pub candidates_per_step: usize,
    pub seed: u64,
}

impl Default for ReorderConfig {
    fn default() -> Self {
        ReorderConfig {
            beta: 1.0,
            steps_per_stage: 200,
            p_cuts: 2,
            candidates_per_step: 32,
            seed: 0,
        }
    }
}

impl ReorderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_stage == 0 || self.p_cuts == 0 || self.candidates_per_step == 0 {
            return Err(Error::InvalidConfig(
                "reorder counts must all be >= 1".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One recovered sentence with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub rank: usize,
    pub token_ids: Vec<TokenId>,
    pub prior_score: f64,
    pub beam_score: f64,
}

/// Output of one attack run on one transcript entry: the refined best
/// sentence first, then the runner-up beams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub iteration: usize,
    pub recovered: Vec<Recovery>,
}

impl AttackResult {
    pub fn best(&self) -> &Recovery {
        &self.recovered[0]
    }
}

/// Multiset of banned n-grams accumulated across multi-sentence recovery
/// repetitions (any mix of gram lengths).
pub type BannedGrams = BTreeSet<Vec<TokenId>>;

/// Reads the bag of words off the word-embedding gradient matrix. `pad` rows
/// are never included; an empty bag is a valid result.
pub fn extract_bag_of_words(grad_w: &Array2<f64>, mode: ExtractionMode) -> BagOfWords {
    let token_ids = (0..grad_w.nrows())
        .filter(|&v| v != PAD_ID as usize)
        .filter(|&v| {
            let row = grad_w.row(v);
            match mode {
                ExtractionMode::Exact => row.iter().any(|&g| g != 0.0),
                ExtractionMode::Threshold(tau) => {
                    row.iter().fold(0.0f64, |m, &g| m.max(g.abs())) > tau
                }
            }
        })
        .map(|v| v as TokenId)
        .collect();
    BagOfWords {
        token_ids,
        source_iteration: 0,
    }
}

/// 1 + the largest position-embedding gradient row with a nonzero entry
/// (0 when the matrix is all zero). Counts the internal `<bos>` position.
pub fn extract_max_length(grad_p: &Array2<f64>) -> usize {
    (0..grad_p.nrows())
        .rev()
        .find(|&i| grad_p.row(i).iter().any(|&g| g != 0.0))
        .map(|i| i + 1)
        .unwrap_or(0)
}

/// Prompt candidates: bag tokens whose surface form starts with an uppercase
/// letter. With `fallback`, an all-lowercase bag yields the whole bag (minus
/// special tokens).
pub fn select_prompts(bag: &BagOfWords, vocab: &Vocab, fallback: bool) -> Result<BTreeSet<TokenId>> {
    if bag.token_ids.is_empty() {
        return Err(Error::EmptyBag);
    }
    let content = bag.content_tokens();
    let capitalized: BTreeSet<TokenId> = content
        .iter()
        .copied()
        .filter(|&t| {
            vocab
                .token(t)
                .chars()
                .next()
                .map(|c| c.is_uppercase())
                .unwrap_or(false)
        })
        .collect();
    if capitalized.is_empty() && fallback {
        Ok(content)
    } else {
        Ok(capitalized)
    }
}

/// Number of positions whose n-gram already occurred earlier in the sequence.
pub fn ngram_repeat_count(tokens: &[TokenId], n: usize) -> usize {
    assert!(n >= 1, "n-gram order must be >= 1");
    if tokens.len() < n {
        return 0;
    }
    let mut seen: BTreeSet<&[TokenId]> = BTreeSet::new();
    let mut repeats = 0;
    for gram in tokens.windows(n) {
        if !seen.insert(gram) {
            repeats += 1;
        }
    }
    repeats
}

/// Occurrences in `tokens` of any banned gram (grams may have mixed lengths).
fn banned_hits(tokens: &[TokenId], banned: &BannedGrams) -> usize {
    let lengths: BTreeSet<usize> = banned.iter().map(|g| g.len()).collect();
    lengths
        .into_iter()
        .filter(|&l| l >= 1 && l <= tokens.len())
        .map(|l| {
            tokens
                .windows(l)
                .filter(|w| banned.contains(&w.to_vec()))
                .count()
        })
        .sum()
}

/// Beam objective: log P(tokens) - rho * (repeated n-grams + banned-gram
/// occurrences).
pub fn beam_score(
    tokens: &[TokenId],
    params: &ModelParams,
    rho: f64,
    n: usize,
    banned: &BannedGrams,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    let lp = sentence_logprob(params, tokens)?;
    let penalty = ngram_repeat_count(tokens, n) + banned_hits(tokens, banned);
    Ok(lp - rho * penalty as f64)
}

/// Penalty increment contributed by the final position of `tokens` (the
/// repeat indicator of its closing n-gram plus its banned-gram hits).
fn tail_penalty_delta(tokens: &[TokenId], n: usize, banned: &BannedGrams) -> usize {
    let mut delta = 0;
    if tokens.len() >= n {
        let tail = &tokens[tokens.len() - n..];
        let earlier = &tokens[..tokens.len() - 1];
        if earlier.len() >= n && earlier.windows(n).any(|w| w == tail) {
            delta += 1;
        }
    }
    for l in banned.iter().map(|g| g.len()).collect::<BTreeSet<_>>() {
        if l >= 1 && tokens.len() >= l && banned.contains(&tokens[tokens.len() - l..].to_vec()) {
            delta += 1;
        }
    }
    delta
}

/// Beam search over bag tokens (Algorithm: start one beam per prompt, extend
/// every beam by every bag token, keep the top k by score, repeat to length
/// L). Ties break by lexicographic token ids; the returned list is ordered by
/// length-normalized score, best first.
pub fn beam_search(
    bag: &BagOfWords,
    prompts: &BTreeSet<TokenId>,
    params: &ModelParams,
    config: &BeamSearchConfig,
    banned: &BannedGrams,
) -> Result<Vec<Beam>> {
    config.validate()?;
    let content = bag.content_tokens();
    if content.is_empty() {
        return Err(Error::EmptyBag);
    }
    if prompts.is_empty() {
        return Err(Error::EmptyPrompts);
    }
    let extensions: Vec<TokenId> = content.into_iter().collect();

    let mut beams: Vec<Beam> = Vec::new();
    for &p in prompts {
        let tokens = vec![p];
        let score = beam_score(&tokens, params, config.penalty, config.ngram_order, banned)?;
        beams.push(Beam {
            token_ids: tokens,
            score,
        });
    }
    beams.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token_ids.cmp(&b.token_ids)));
    beams.truncate(config.beam_size);

    while beams[0].token_ids.len() < config.max_len {
        let mut candidates: Vec<Beam> = Vec::with_capacity(beams.len() * extensions.len());
        for beam in &beams {
            let dist = next_token_dist_with_bos(params, &beam.token_ids)?;
            for &t in &extensions {
                if let Some(caps) = &config.token_caps {
                    let used = beam.token_ids.iter().filter(|&&x| x == t).count();
                    if used >= caps.get(&t).copied().unwrap_or(usize::MAX) {
                        continue;
                    }
                }
                let mut tokens = beam.token_ids.clone();
                tokens.push(t);
                let lp = dist[t as usize].max(f64::MIN_POSITIVE).ln();
                let delta = tail_penalty_delta(&tokens, config.ngram_order, banned);
                let score = beam.score + lp - config.penalty * delta as f64;
                candidates.push(Beam {
                    token_ids: tokens,
                    score,
                });
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates
            .sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token_ids.cmp(&b.token_ids)));
        candidates.truncate(config.beam_size);
        beams = candidates;
    }

    beams.sort_by(|a, b| {
        let an = a.score / a.token_ids.len() as f64;
        let bn = b.score / b.token_ids.len() as f64;
        bn.total_cmp(&an).then(a.token_ids.cmp(&b.token_ids))
    });
    Ok(beams)
}

/// Sentence prior (lower is better): perplexity plus beta times the global L2
/// norm of the single-sentence loss gradient.
pub fn prior_score(tokens: &[TokenId], params: &ModelParams, beta: f64) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    let ppl = perplexity(params, tokens)?;
    if beta == 0.0 {
        return Ok(ppl);
    }
    let batch = Batch::from_sentences(vec![Sentence {
        token_ids: tokens.to_vec(),
        raw_text: String::new(),
        entity_spans: Vec::new(),
    }]);
    let (_, grads) = loss_and_gradients(params, &batch)?;
    Ok(ppl + beta * grads.l2_norm())
}

/// Keeps the prefix ending at the first end-punctuation token when that
/// prefix has a strictly lower prior score; otherwise returns the input.
pub fn truncate_at_punctuation(
    tokens: &[TokenId],
    params: &ModelParams,
    beta: f64,
    end_punct_ids: &BTreeSet<TokenId>,
) -> Result<Vec<TokenId>> {
    let cut = tokens.iter().position(|t| end_punct_ids.contains(t));
    match cut {
        Some(i) if i + 1 < tokens.len() => {
            let prefix = &tokens[..=i];
            if prior_score(prefix, params, beta)? < prior_score(tokens, params, beta)? {
                Ok(prefix.to_vec())
            } else {
                Ok(tokens.to_vec())
            }
        }
        _ => Ok(tokens.to_vec()),
    }
}

/// All permutations of 0..k in lexicographic order, excluding the identity,
/// capped at `limit`.
fn segment_permutations(k: usize, limit: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    while out.len() < limit && next_permutation(&mut perm) {
        out.push(perm.clone());
    }
    out
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Phrase-level reordering: repeatedly cut the sentence at `p_cuts` random
/// positions, try segment permutations, and keep whichever ordering has the
/// lowest prior score. The incumbent score never increases.
pub fn phrase_reorder(
    tokens: &[TokenId],
    params: &ModelParams,
    config: &ReorderConfig,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    if tokens.len() < 2 {
        return Ok(tokens.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut incumbent = tokens.to_vec();
    let mut incumbent_score = prior_score(&incumbent, params, config.beta)?;

    for _ in 0..config.steps_per_stage {
        // p_cuts distinct interior cut positions, sorted.
        let n_cuts = config.p_cuts.min(incumbent.len() - 1);
        let cut_positions: Vec<usize> = {
            let mut cuts =
                rand::seq::index::sample(&mut rng, incumbent.len() - 1, n_cuts).into_vec();
            cuts.iter_mut().for_each(|c| *c += 1);
            cuts.sort_unstable();
            cuts
        };
        let mut segments: Vec<&[TokenId]> = Vec::with_capacity(n_cuts + 1);
        let mut start = 0;
        for &c in &cut_positions {
            segments.push(&incumbent[start..c]);
            start = c;
        }
        segments.push(&incumbent[start..]);

        let mut best_candidate: Option<(f64, Vec<TokenId>)> = None;
        for perm in segment_permutations(segments.len(), config.candidates_per_step) {
            let candidate: Vec<TokenId> = perm
                .iter()
                .flat_map(|&si| segments[si].iter().copied())
                .collect();
            let score = prior_score(&candidate, params, config.beta)?;
            let better = match &best_candidate {
                None => true,
                Some((s, _)) => score < *s,
            };
            if better {
                best_candidate = Some((score, candidate));
            }
        }
        if let Some((score, candidate)) = best_candidate {
            if score < incumbent_score {
                debug_assert!(score <= incumbent_score);
                incumbent = candidate;
                incumbent_score = score;
            }
        }
    }
    Ok(incumbent)
}

/// Token-level reordering: random swap / delete / insert-from-bag edits,
/// greedily accepted by prior score. The incumbent score never increases.
pub fn token_reorder(
    tokens: &[TokenId],
    bag: &BagOfWords,
    params: &ModelParams,
    config: &ReorderConfig,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    let insertables: Vec<TokenId> = bag.content_tokens().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut incumbent = tokens.to_vec();
    let mut incumbent_score = prior_score(&incumbent, params, config.beta)?;

    for _ in 0..config.steps_per_stage {
        let mut best_candidate: Option<(f64, Vec<TokenId>)> = None;
        for _ in 0..config.candidates_per_step {
            let mut ops: Vec<u8> = Vec::with_capacity(3);
            if incumbent.len() >= 2 {
                ops.push(0); // swap
                ops.push(1); // delete (never empties the sentence)
            }
            if !insertables.is_empty() && incumbent.len() < MAX_SENTENCE_TOKENS {
                ops.push(2); // insert
            }
            if ops.is_empty() {
                break;
            }
            let op = ops[rng.gen_range(0..ops.len())];
            let mut candidate = incumbent.clone();
            match op {
                0 => {
                    let i = rng.gen_range(0..candidate.len());
                    let j = rng.gen_range(0..candidate.len());
                    candidate.swap(i, j);
                }
                1 => {
                    let i = rng.gen_range(0..candidate.len());
                    candidate.remove(i);
                }
                _ => {
                    let i = rng.gen_range(0..=candidate.len());
                    let t = insertables[rng.gen_range(0..insertables.len())];
                    candidate.insert(i, t);
                }
            }
            if candidate == incumbent {
                continue;
            }
            let score = prior_score(&candidate, params, config.beta)?;
            let better = match &best_candidate {
                None => true,
                Some((s, _)) => score < *s,
            };
            if better {
                best_candidate = Some((score, candidate));
            }
        }
        if let Some((score, candidate)) = best_candidate {
            if score < incumbent_score {
                debug_assert!(score <= incumbent_score);
                incumbent = candidate;
                incumbent_score = score;
            }
        }
    }
    Ok(incumbent)
}

fn end_punct_ids(vocab: &Vocab) -> BTreeSet<TokenId> {
    [".", "?", "!"]
        .iter()
        .filter_map(|p| vocab.id(p))
        .collect()
}

/// Full single-sentence pipeline on one transcript entry: extract the bag and
/// max length, pick prompts, beam-search, then refine the best beam by
/// punctuation truncation and both reordering stages.
pub fn recover_single(
    entry: &TranscriptEntry,
    vocab: &Vocab,
    mode: ExtractionMode,
    beam_cfg: &BeamSearchConfig,
    reorder_cfg: &ReorderConfig,
) -> Result<AttackResult> {
    recover_with_bans(entry, vocab, mode, beam_cfg, reorder_cfg, &BannedGrams::new())
}

fn recover_with_bans(
    entry: &TranscriptEntry,
    vocab: &Vocab,
    mode: ExtractionMode,
    beam_cfg: &BeamSearchConfig,
    reorder_cfg: &ReorderConfig,
    banned: &BannedGrams,
) -> Result<AttackResult> {
    let mut bag = extract_bag_of_words(&entry.transmitted.w_embed, mode);
    bag.source_iteration = entry.iteration;
    if bag.content_tokens().is_empty() {
        return Err(Error::EmptyBag);
    }
    // The recovered position count includes the internal <bos> slot, so the
    // word budget is one less.
    let recovered_len = extract_max_length(&entry.transmitted.p_embed);
    let effective_cfg = BeamSearchConfig {
        max_len: if recovered_len > 1 {
            recovered_len - 1
        } else {
            beam_cfg.max_len
        },
        ..beam_cfg.clone()
    };
    let prompts = select_prompts(&bag, vocab, effective_cfg.prompt_fallback)?;
    let beams = beam_search(&bag, &prompts, &entry.params, &effective_cfg, banned)?;

    let punct = end_punct_ids(vocab);
    let best = &beams[0];
    let truncated =
        truncate_at_punctuation(&best.token_ids, &entry.params, reorder_cfg.beta, &punct)?;
    let phrased = phrase_reorder(&truncated, &entry.params, reorder_cfg)?;
    let refined = token_reorder(&phrased, &bag, &entry.params, reorder_cfg)?;

    let mut recovered = Vec::with_capacity(beams.len());
    recovered.push(Recovery {
        rank: 0,
        token_ids: refined.clone(),
        prior_score: prior_score(&refined, &entry.params, reorder_cfg.beta)?,
        beam_score: best.score,
    });
    for (i, beam) in beams.iter().enumerate().skip(1) {
        recovered.push(Recovery {
            rank: i,
            token_ids: beam.token_ids.clone(),
            prior_score: prior_score(&beam.token_ids, &entry.params, reorder_cfg.beta)?,
            beam_score: beam.score,
        });
    }
    Ok(AttackResult {
        iteration: entry.iteration,
        recovered,
    })
}

/// Repeated recovery with cross-run n-gram bans: after each run, every
/// `ban_order`-gram of the accepted sentence is banned in later beam
/// searches, pushing subsequent runs toward other batch members.
pub fn recover_multiple(
    entry: &TranscriptEntry,
    vocab: &Vocab,
    mode: ExtractionMode,
    beam_cfg: &BeamSearchConfig,
    reorder_cfg: &ReorderConfig,
    repetitions: usize,
    ban_order: usize,
) -> Result<Vec<AttackResult>> {
    if repetitions == 0 || ban_order == 0 {
        return Err(Error::InvalidConfig(
            "repetitions and ban_order must be >= 1".into(),
        ));
    }
    let mut banned = BannedGrams::new();
    let mut results = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        // Vary the reorder seed per repetition so repeats explore differently.
        let rep_cfg = ReorderConfig {
            seed: reorder_cfg.seed.wrapping_add(rep as u64),
            ..*reorder_cfg
        };
        let result = recover_with_bans(entry, vocab, mode, beam_cfg, &rep_cfg, &banned)?;
        for gram in result.best().token_ids.windows(ban_order) {
            banned.insert(gram.to_vec());
        }
        results.push(result);
    }
    Ok(results)
}

/// Bag extraction against DPSGD noise: rows whose maximum absolute gradient
/// exceeds tau = sigma * sqrt(2 ln d), where d is the embedding width.
pub fn dpsgd_bow_attack(grad_w: &Array2<f64>, sigma: f64, d: usize) -> Result<BagOfWords> {
    if sigma < 0.0 {
        return Err(Error::InvalidInput("sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(extract_bag_of_words(grad_w, ExtractionMode::Exact));
    }
    let tau = sigma * (2.0 * (d as f64).ln()).sqrt();
    Ok(extract_bag_of_words(grad_w, ExtractionMode::Threshold(tau)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::model::{init_params, Hyperparams};

    fn tiny_params(vocab_size: usize, seed: u64) -> ModelParams {
        let hyper = Hyperparams {
            vocab_size,
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_positions: 41,
            tie_embeddings: false,
        };
        init_params(&hyper, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch_of(ids_list: &[&[TokenId]]) -> Batch {
        Batch::from_sentences(
            ids_list
                .iter()
                .map(|ids| Sentence {
                    token_ids: ids.to_vec(),
                    raw_text: String::new(),
                    entity_spans: Vec::new(),
                })
                .collect(),
        )
    }

    #[test]
    fn empty_gradient_gives_empty_bag() {
        let grad_w = Array2::zeros((10, 4));
        let bag = extract_bag_of_words(&grad_w, ExtractionMode::Exact);
        assert!(bag.token_ids.is_empty());
        assert_eq!(extract_max_length(&Array2::zeros((41, 4))), 0);
    }

    #[test]
    fn bag_equals_sentence_tokens_plus_bos() {
        let params = tiny_params(16, 1);
        let batch = batch_of(&[&[4, 7, 9]]);
        let (_, grads) = loss_and_gradients(&params, &batch).unwrap();
        let bag = extract_bag_of_words(&grads.w_embed, ExtractionMode::Exact);
        let expected: BTreeSet<TokenId> = [BOS_ID, 4, 7, 9].into_iter().collect();
        assert_eq!(bag.token_ids, expected);
        assert_eq!(
            bag.content_tokens(),
            [4, 7, 9].into_iter().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn max_length_counts_bos_position() {
        let params = tiny_params(16, 1);
        // Single-token sentence: positions {0, 1} receive gradient.
        let batch = batch_of(&[&[5]]);
        let (_, grads) = loss_and_gradients(&params, &batch).unwrap();
        assert_eq!(extract_max_length(&grads.p_embed), 2);
        // Longest member dominates.
        let batch = batch_of(&[&[5], &[4, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]]);
        let (_, grads) = loss_and_gradients(&params, &batch).unwrap();
        assert_eq!(extract_max_length(&grads.p_embed), 12);
    }

    #[test]
    fn threshold_mode_filters_small_rows() {
        let mut grad_w = Array2::zeros((6, 4));
        grad_w[[3, 2]] = 0.5;
        grad_w[[4, 0]] = 0.05;
        let bag = extract_bag_of_words(&grad_w, ExtractionMode::Threshold(0.1));
        assert_eq!(bag.token_ids, [3].into_iter().collect());
    }

    #[test]
    fn prompt_selection_by_capitalization() {
        let vocab = Vocab::from_tokens(
            ["<pad>", "<unk>", "<bos>", "Let", "The", "cat", "dogs"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let bag = BagOfWords {
            token_ids: [2, 3, 4, 5, 6].into_iter().collect(),
            source_iteration: 0,
        };
        let prompts = select_prompts(&bag, &vocab, true).unwrap();
        assert_eq!(prompts, [3, 4].into_iter().collect());

        let lowercase_bag = BagOfWords {
            token_ids: [5, 6].into_iter().collect(),
            source_iteration: 0,
        };
        let prompts = select_prompts(&lowercase_bag, &vocab, true).unwrap();
        assert_eq!(prompts, [5, 6].into_iter().collect());

        let empty = BagOfWords {
            token_ids: BTreeSet::new(),
            source_iteration: 0,
        };
        assert!(matches!(
            select_prompts(&empty, &vocab, true),
            Err(Error::EmptyBag)
        ));
    }

    #[test]
    fn ngram_repeat_examples() {
        assert_eq!(ngram_repeat_count(&[10, 11, 10, 11], 2), 1);
        assert_eq!(ngram_repeat_count(&[3, 4, 5], 1), 0);
        assert_eq!(ngram_repeat_count(&[3, 3, 3], 1), 2);
        assert_eq!(ngram_repeat_count(&[3], 2), 0);
    }

    #[test]
    fn beam_score_arithmetic() {
        let params = tiny_params(16, 2);
        let tokens = [4, 5, 4, 5];
        let banned = BannedGrams::new();
        // rho = 0: exactly the log-probability.
        let s = beam_score(&tokens, &params, 0.0, 2, &banned).unwrap();
        let lp = sentence_logprob(&params, &tokens).unwrap();
        assert_eq!(s, lp);
        // One repeated bigram, rho = 1.
        let s = beam_score(&tokens, &params, 1.0, 2, &banned).unwrap();
        assert!((s - (lp - 1.0)).abs() < 1e-12);
        // A banned bigram present once, rho = 2.
        let mut banned = BannedGrams::new();
        banned.insert(vec![5, 4]);
        let s = beam_score(&tokens, &params, 2.0, 2, &banned).unwrap();
        let expected = lp - 2.0 * (1.0 + 1.0); // repeat + ban
        assert!((s - expected).abs() < 1e-12);
        assert!(beam_score(&[], &params, 1.0, 2, &banned).is_err());
    }

    #[test]
    fn single_candidate_beam_search() {
        let params = tiny_params(16, 3);
        let bag = BagOfWords {
            token_ids: [7].into_iter().collect(),
            source_iteration: 0,
        };
        let prompts: BTreeSet<TokenId> = [7].into_iter().collect();
        let cfg = BeamSearchConfig {
            beam_size: 1,
            max_len: 4,
            ..BeamSearchConfig::default()
        };
        let banned = BannedGrams::new();
        let beams = beam_search(&bag, &prompts, &params, &cfg, &banned).unwrap();
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].token_ids, vec![7, 7, 7, 7]);
        let expected = beam_score(&beams[0].token_ids, &params, cfg.penalty, cfg.ngram_order, &banned)
            .unwrap();
        assert!((beams[0].score - expected).abs() < 1e-9);
    }

    #[test]
    fn incremental_scores_match_from_scratch() {
        let params = tiny_params(20, 4);
        let bag = BagOfWords {
            token_ids: [4, 6, 9, 12].into_iter().collect(),
            source_iteration: 0,
        };
        let prompts: BTreeSet<TokenId> = [4, 6].into_iter().collect();
        let cfg = BeamSearchConfig {
            beam_size: 5,
            max_len: 5,
            ..BeamSearchConfig::default()
        };
        let mut banned = BannedGrams::new();
        banned.insert(vec![6, 9]);
        let beams = beam_search(&bag, &prompts, &params, &cfg, &banned).unwrap();
        for beam in &beams {
            let scratch =
                beam_score(&beam.token_ids, &params, cfg.penalty, cfg.ngram_order, &banned)
                    .unwrap();
            assert!(
                (beam.score - scratch).abs() < 1e-9,
                "{:?}: {} vs {}",
                beam.token_ids,
                beam.score,
                scratch
            );
        }
    }

    #[test]
    fn beam_search_is_deterministic_and_closed() {
        let params = tiny_params(20, 5);
        let bag = BagOfWords {
            token_ids: [4, 6, 9, 12, 15].into_iter().collect(),
            source_iteration: 0,
        };
        let prompts: BTreeSet<TokenId> = [4, 9].into_iter().collect();
        let cfg = BeamSearchConfig {
            beam_size: 4,
            max_len: 6,
            ..BeamSearchConfig::default()
        };
        let banned = BannedGrams::new();
        let a = beam_search(&bag, &prompts, &params, &cfg, &banned).unwrap();
        let b = beam_search(&bag, &prompts, &params, &cfg, &banned).unwrap();
        assert_eq!(a, b);
        let mut allowed = bag.content_tokens();
        allowed.extend(prompts.iter().copied());
        for beam in &a {
            assert!(beam.token_ids.len() <= cfg.max_len);
            assert!(beam.token_ids.iter().all(|t| allowed.contains(t)));
        }
    }

    #[test]
    fn prior_score_components() {
        let params = tiny_params(16, 6);
        let tokens = [4, 5, 6];
        let p0 = prior_score(&tokens, &params, 0.0).unwrap();
        assert_eq!(p0, perplexity(&params, &tokens).unwrap());
        let batch = batch_of(&[&tokens]);
        let (_, grads) = loss_and_gradients(&params, &batch).unwrap();
        let p1 = prior_score(&tokens, &params, 1.0).unwrap();
        assert!((p1 - (p0 + grads.l2_norm())).abs() < 1e-9);
        let p2 = prior_score(&tokens, &params, 2.0).unwrap();
        assert!((p2 - (p0 + 2.0 * grads.l2_norm())).abs() < 1e-9);
    }

    #[test]
    fn truncation_requires_punctuation_and_improvement() {
        let params = tiny_params(16, 7);
        let punct: BTreeSet<TokenId> = [9].into_iter().collect();
        // No punctuation: unchanged.
        let t = truncate_at_punctuation(&[4, 5, 6], &params, 1.0, &punct).unwrap();
        assert_eq!(t, vec![4, 5, 6]);
        // Punctuation at the end: unchanged (no tail to drop).
        let t = truncate_at_punctuation(&[4, 5, 9], &params, 1.0, &punct).unwrap();
        assert_eq!(t, vec![4, 5, 9]);
        // Interior punctuation: output is either the input or the prefix, and
        // never scores worse.
        let input = [4, 9, 5, 6];
        let t = truncate_at_punctuation(&input, &params, 1.0, &punct).unwrap();
        assert!(t == input.to_vec() || t == vec![4, 9]);
        let s_in = prior_score(&input, &params, 1.0).unwrap();
        let s_out = prior_score(&t, &params, 1.0).unwrap();
        assert!(s_out <= s_in);
    }

    #[test]
    fn reorder_never_worsens_prior() {
        let params = tiny_params(16, 8);
        let cfg = ReorderConfig {
            steps_per_stage: 10,
            candidates_per_step: 4,
            seed: 3,
            ..ReorderConfig::default()
        };
        let tokens = [4, 5, 6, 7, 8];
        let before = prior_score(&tokens, &params, cfg.beta).unwrap();

        let phrased = phrase_reorder(&tokens, &params, &cfg).unwrap();
        let after = prior_score(&phrased, &params, cfg.beta).unwrap();
        assert!(after <= before);

        let bag = BagOfWords {
            token_ids: [4, 5, 6, 7, 8].into_iter().collect(),
            source_iteration: 0,
        };
        let reordered = token_reorder(&tokens, &bag, &params, &cfg).unwrap();
        let after = prior_score(&reordered, &params, cfg.beta).unwrap();
        assert!(after <= before);

        // Single token: nothing to permute.
        assert_eq!(phrase_reorder(&[4], &params, &cfg).unwrap(), vec![4]);

        // Determinism.
        assert_eq!(
            token_reorder(&tokens, &bag, &params, &cfg).unwrap(),
            reordered
        );
    }

    #[test]
    fn token_reorder_without_bag_still_runs() {
        let params = tiny_params(16, 9);
        let cfg = ReorderConfig {
            steps_per_stage: 5,
            candidates_per_step: 4,
            ..ReorderConfig::default()
        };
        let empty_bag = BagOfWords {
            token_ids: BTreeSet::new(),
            source_iteration: 0,
        };
        let out = token_reorder(&[4, 5, 6], &empty_bag, &params, &cfg).unwrap();
        assert!(!out.is_empty());
        assert!(token_reorder(&[], &empty_bag, &params, &cfg).is_err());
    }

    #[test]
    fn dpsgd_threshold_value() {
        let grad_w = Array2::zeros((4, 4));
        // sigma = 1, d = 768: tau = sqrt(2 ln 768) = 3.64524...
        let tau = 1.0 * (2.0 * 768f64.ln()).sqrt();
        assert!((tau - 3.645_24).abs() < 1e-4);
        assert!(dpsgd_bow_attack(&grad_w, -1.0, 768).is_err());
        let bag = dpsgd_bow_attack(&grad_w, 0.0, 768).unwrap();
        assert!(bag.token_ids.is_empty());
    }
}
