//! Corpora, vocabulary and batching.
//!
//! Tokenization is word-level: whitespace split with `. , ? !` detached as
//! standalone tokens. The vocabulary reserves ids 0/1/2 for pad/unk/bos.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";

/// Sentences longer than this after tokenization are rejected.
pub const MAX_SENTENCE_TOKENS: usize = 40;

const DETACHED_PUNCT: [char; 4] = ['.', ',', '?', '!'];

/// Punctuation that can terminate a sentence (used by attack truncation).
pub const END_PUNCT: [char; 3] = ['.', '?', '!'];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from raw lines: the three specials plus the
    /// `max_size - 3` most frequent tokens, ties broken lexicographically.
    pub fn build(lines: &[String], max_size: usize) -> Result<Vocab> {
        if max_size < 4 {
            return Err(Error::InvalidCorpus(format!(
                "max_size must be at least 4, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for line in lines {
            for tok in split_text(line) {
                any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::InvalidCorpus("no tokens in input".into()));
        }
        let mut by_freq: Vec<(String, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        by_freq.truncate(max_size - 3);

        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
        ];
        tokens.extend(by_freq.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    /// Builds a vocabulary from an explicit token list (line number = id).
    /// The list must start with the three special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 4 {
            return Err(Error::InvalidCorpus(format!(
                "vocabulary needs at least 4 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN || tokens[2] != BOS_TOKEN {
            return Err(Error::InvalidCorpus(
                "vocabulary must start with <pad>, <unk>, <bos>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == PAD_ID || id == UNK_ID || id == BOS_ID
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_tokens(tokens)
    }
}

/// Whitespace split with `. , ? !` detached as separate tokens.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if DETACHED_PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub token_ids: Vec<TokenId>,
    pub raw_text: String,
    /// Annotated entity spans as (start_token, end_token), end exclusive.
    pub entity_spans: Vec<(usize, usize)>,
}

/// Tokenizes a single line. Unknown tokens map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Sentence> {
    let words = split_text(text);
    if words.is_empty() {
        return Err(Error::InvalidCorpus("empty sentence".into()));
    }
    if words.len() > MAX_SENTENCE_TOKENS {
        return Err(Error::SentenceTooLong {
            got: words.len(),
            limit: MAX_SENTENCE_TOKENS,
        });
    }
    let token_ids = words
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    Ok(Sentence {
        token_ids,
        raw_text: text.trim().to_string(),
        entity_spans: Vec::new(),
    })
}

/// Inverse of [`tokenize`] up to canonical single-spacing: tokens joined by
/// single spaces, with `. , ? !` attached to the preceding token.
pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id);
        let is_punct = tok.len() == 1 && DETACHED_PUNCT.contains(&tok.chars().next().unwrap());
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub name: String,
    pub split: Split,
}

impl Corpus {
    pub fn from_lines(lines: &[String], vocab: &Vocab, name: &str, split: Split) -> Result<Corpus> {
        let (sentences, _) = sentences_from_lines(lines, vocab)?;
        if sentences.is_empty() {
            return Err(Error::InvalidCorpus(format!("corpus {name:?} is empty")));
        }
        Ok(Corpus {
            sentences,
            name: name.to_string(),
            split,
        })
    }

    /// Loads a corpus file (one sentence per line). If `<path>.ents` exists it
    /// is read as entity annotations: one line per sentence, zero or more
    /// `start:end` token-index pairs separated by spaces.
    pub fn load(path: &Path, vocab: &Vocab, split: Split) -> Result<Corpus> {
        let text = fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        let lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let (mut sentences, source_lines) = sentences_from_lines(&lines, vocab)?;
        if sentences.is_empty() {
            return Err(Error::InvalidCorpus(format!("corpus {name:?} is empty")));
        }

        // Entity sidecar lines are aligned with the source file lines.
        let ents_path = path.with_extension("ents");
        if ents_path.exists() {
            let ents = fs::read_to_string(&ents_path)?;
            let ent_lines: Vec<&str> = ents.lines().collect();
            for (sent, &line_idx) in sentences.iter_mut().zip(&source_lines) {
                if let Some(line) = ent_lines.get(line_idx) {
                    sent.entity_spans = parse_entity_line(line, sent.token_ids.len())?;
                }
            }
        }
        Ok(Corpus {
            sentences,
            name,
            split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.raw_text);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Tokenizes all non-empty lines, silently dropping over-long ones (the
/// corpus filter). Returns the sentences and their source line indices.
fn sentences_from_lines(lines: &[String], vocab: &Vocab) -> Result<(Vec<Sentence>, Vec<usize>)> {
    let mut sentences = Vec::new();
    let mut source_lines = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match tokenize(line, vocab) {
            Ok(s) => {
                sentences.push(s);
                source_lines.push(i);
            }
            Err(Error::SentenceTooLong { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((sentences, source_lines))
}

fn parse_entity_line(line: &str, n_tokens: usize) -> Result<Vec<(usize, usize)>> {
    let mut spans = Vec::new();
    for pair in line.split_whitespace() {
        let (a, b) = pair
            .split_once(':')
            .ok_or_else(|| Error::InvalidCorpus(format!("bad entity span {pair:?}")))?;
        let start: usize = a
            .parse()
            .map_err(|_| Error::InvalidCorpus(format!("bad entity span {pair:?}")))?;
        let end: usize = b
            .parse()
            .map_err(|_| Error::InvalidCorpus(format!("bad entity span {pair:?}")))?;
        if start >= end || end > n_tokens {
            return Err(Error::InvalidCorpus(format!(
                "entity span {start}:{end} out of range for {n_tokens} tokens"
            )));
        }
        spans.push((start, end));
    }
    Ok(spans)
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// b x l_max token ids, padded with `PAD_ID`.
    pub rows: Vec<Vec<TokenId>>,
    pub lengths: Vec<usize>,
    pub member_sentences: Vec<Sentence>,
}

impl Batch {
    pub fn from_sentences(sentences: Vec<Sentence>) -> Batch {
        let lengths: Vec<usize> = sentences.iter().map(|s| s.token_ids.len()).collect();
        let l_max = lengths.iter().copied().max().unwrap_or(0);
        let rows = sentences
            .iter()
            .map(|s| {
                let mut row = s.token_ids.clone();
                row.resize(l_max, PAD_ID);
                row
            })
            .collect();
        Batch {
            rows,
            lengths,
            member_sentences: sentences,
        }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Set of distinct token ids present (pads excluded).
    pub fn token_set(&self) -> std::collections::BTreeSet<TokenId> {
        self.member_sentences
            .iter()
            .flat_map(|s| s.token_ids.iter().copied())
            .collect()
    }
}

/// Draws `b` distinct sentences uniformly without replacement.
pub fn sample_batch<R: Rng>(corpus: &Corpus, b: usize, rng: &mut R) -> Result<Batch> {
    if b == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    if b > corpus.sentences.len() {
        return Err(Error::BatchTooLarge {
            requested: b,
            available: corpus.sentences.len(),
        });
    }
    let idx = rand::seq::index::sample(rng, corpus.sentences.len(), b);
    let sentences = idx.iter().map(|i| corpus.sentences[i].clone()).collect();
    Ok(Batch::from_sentences(sentences))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_vocab_frequency_order() {
        let v = Vocab::build(&lines(&["the cat", "the dog"]), 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(0), PAD_TOKEN);
        assert_eq!(v.token(1), UNK_TOKEN);
        assert_eq!(v.token(2), BOS_TOKEN);
        // "the" appears twice, first among content tokens; cat/dog tie → lexicographic.
        assert_eq!(v.token(3), "the");
        assert_eq!(v.token(4), "cat");
        assert_eq!(v.token(5), "dog");
    }

    #[test]
    fn build_vocab_empty_input() {
        assert!(matches!(
            Vocab::build(&lines(&[""]), 8),
            Err(Error::InvalidCorpus(_))
        ));
    }

    #[test]
    fn build_vocab_single_token() {
        let v = Vocab::build(&lines(&["a a a"]), 4).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<bos>", "a"]);
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        let v = Vocab::build(&lines(&["The cat sleeps ."]), 10).unwrap();
        let s = tokenize("The cat sleeps.", &v).unwrap();
        let toks: Vec<&str> = s.token_ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, vec!["The", "cat", "sleeps", "."]);
    }

    #[test]
    fn tokenize_unknown_maps_to_unk() {
        let v = Vocab::build(&lines(&["a b"]), 8).unwrap();
        let s = tokenize("zzz", &v).unwrap();
        assert_eq!(s.token_ids, vec![UNK_ID]);
    }

    #[test]
    fn tokenize_rejects_long_sentences() {
        let v = Vocab::build(&lines(&["a"]), 8).unwrap();
        let long = vec!["a"; 41].join(" ");
        assert!(matches!(
            tokenize(&long, &v),
            Err(Error::SentenceTooLong { got: 41, .. })
        ));
        let ok = vec!["a"; 40].join(" ");
        assert!(tokenize(&ok, &v).is_ok());
    }

    #[test]
    fn roundtrip_canonical_spacing() {
        let v = Vocab::build(&lines(&["The cat sleeps . , ok ?"]), 16).unwrap();
        for text in ["The cat sleeps.", "The  cat   sleeps.", "ok, ok? The cat."] {
            let s = tokenize(text, &v).unwrap();
            let detok = detokenize(&s.token_ids, &v);
            let s2 = tokenize(&detok, &v).unwrap();
            assert_eq!(s.token_ids, s2.token_ids, "roundtrip for {text:?}");
            // Canonical form is a fixed point.
            assert_eq!(detok, detokenize(&s2.token_ids, &v));
        }
    }

    #[test]
    fn sample_batch_is_deterministic_and_distinct() {
        let raw = lines(&["a b .", "c d .", "e f ."]);
        let v = Vocab::build(&raw, 16).unwrap();
        let c = Corpus::from_lines(&raw, &v, "t", Split::Train).unwrap();
        let b1 = sample_batch(&c, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b2 = sample_batch(&c, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(b1.rows, b2.rows);
        assert_eq!(b1.size(), 2);
        assert_ne!(b1.member_sentences[0], b1.member_sentences[1]);
    }

    #[test]
    fn sample_batch_too_large() {
        let raw = lines(&["a .", "b ."]);
        let v = Vocab::build(&raw, 16).unwrap();
        let c = Corpus::from_lines(&raw, &v, "t", Split::Train).unwrap();
        assert!(matches!(
            sample_batch(&c, 5, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::BatchTooLarge { requested: 5, available: 2 })
        ));
    }

    #[test]
    fn batch_padding_mask_property() {
        let raw = lines(&["a b c .", "d ."]);
        let v = Vocab::build(&raw, 16).unwrap();
        let c = Corpus::from_lines(&raw, &v, "t", Split::Train).unwrap();
        let b = Batch::from_sentences(c.sentences.clone());
        for (r, row) in b.rows.iter().enumerate() {
            for (i, &id) in row.iter().enumerate() {
                assert_eq!(id == PAD_ID, i >= b.lengths[r]);
            }
        }
        let union: std::collections::BTreeSet<TokenId> = c
            .sentences
            .iter()
            .flat_map(|s| s.token_ids.iter().copied())
            .collect();
        assert_eq!(b.token_set(), union);
    }

    #[test]
    fn vocab_save_load_roundtrip() {
        let v = Vocab::build(&lines(&["the cat sat ."]), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.tokens(), v2.tokens());
    }

    #[test]
    fn entity_sidecar_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "Alice met Bob .\nNothing here .\n").unwrap();
        std::fs::write(dir.path().join("c.ents"), "0:1 2:3\n\n").unwrap();
        let v = Vocab::build(&lines(&["Alice met Bob . Nothing here ."]), 16).unwrap();
        let c = Corpus::load(&path, &v, Split::Train).unwrap();
        assert_eq!(c.sentences[0].entity_spans, vec![(0, 1), (2, 3)]);
        assert!(c.sentences[1].entity_spans.is_empty());
    }
}
