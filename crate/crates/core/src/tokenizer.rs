//! Uncased WordPiece tokenization.
//!
//! Text is lowercased and split on whitespace and punctuation (punctuation
//! marks, including `=` and `,`, become standalone pre-tokens). Each
//! pre-token is decomposed by greedy longest-prefix matching against the
//! vocabulary, with `##` continuation pieces. Encoded sequences are framed as
//! `[CLS] body [SEP]` and padded with `[PAD]` to a fixed length.
//!
//! Vocabularies are either learned from a corpus by iterative pair-frequency
//! merging or loaded from a standard one-token-per-line file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

/// Token-to-id mapping with the five special tokens. Ids are dense in
/// `[0, len)`; `[PAD]` is always id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk_id: u32,
    cls_id: u32,
    sep_id: u32,
    mask_id: u32,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list (id = position).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(Error::InvalidConfig(format!("{PAD} must have id 0")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token {tok:?}")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("missing special token {name}")))
        };
        Ok(Self {
            unk_id: lookup(UNK)?,
            cls_id: lookup(CLS)?,
            sep_id: lookup(SEP)?,
            mask_id: lookup(MASK)?,
            index,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn cls_id(&self) -> u32 {
        self.cls_id
    }

    pub fn sep_id(&self) -> u32 {
        self.sep_id
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad_id()
            || id == self.unk_id
            || id == self.cls_id
            || id == self.sep_id
            || id == self.mask_id
    }

    /// Writes one token per line; the zero-based line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a one-token-per-line vocabulary file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and splits text into words and standalone punctuation marks.
/// This is also the tokenization used by the TF-IDF baseline features.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Learns a vocabulary: specials, every corpus character (in both
/// word-initial and `##` continuation form), then merged subwords added by
/// descending pair frequency until `target_size` is reached or no pairs
/// remain. Ties break on the lexicographically smaller merged token.
pub fn build_vocab(corpus: &[String], target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("empty tokenizer corpus".into()));
    }

    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for word in pre_tokenize(text) {
            *word_counts.entry(word).or_insert(0) += 1;
        }
    }

    let mut charset: Vec<char> = word_counts
        .keys()
        .flat_map(|w| w.chars())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    charset.sort_unstable();

    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let base = tokens.len() + 2 * charset.len();
    if target_size < base {
        return Err(Error::InvalidConfig(format!(
            "target_size {target_size} is below specials + charset = {base}"
        )));
    }
    for c in &charset {
        tokens.push(c.to_string());
    }
    for c in &charset {
        tokens.push(format!("{CONTINUATION}{c}"));
    }

    // Symbol sequences per distinct word: first char plain, rest continuations.
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(word, &count)| {
            let symbols = word
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    }
                })
                .collect();
            (symbols, count)
        })
        .collect();

    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    while tokens.len() < target_size {
        // Pair frequencies across all word representations.
        let mut pair_counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        let Some((pair, _)) = pair_counts.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb)
                .then_with(|| merge_symbols(&pb.0, &pb.1).cmp(&merge_symbols(&pa.0, &pa.1)))
                .then_with(|| pb.cmp(pa))
        }) else {
            break;
        };
        let (left, right) = pair.clone();
        let merged = merge_symbols(&left, &right);

        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        if seen.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    Vocabulary::from_tokens(tokens)
}

fn merge_symbols(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// A fixed-length encoded input.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// 1 for `[CLS]`, body, and `[SEP]`; 0 for padding. Always a prefix of
    /// ones followed by zeros.
    pub attention_mask: Vec<u8>,
    /// All zeros: inputs are single-segment.
    pub segment_ids: Vec<u8>,
    pub label: u8,
}

impl TokenSequence {
    pub fn with_label(mut self, label: u8) -> Self {
        self.label = label;
        self
    }

    /// Number of unmasked (real) positions including `[CLS]` and `[SEP]`.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Greedy longest-match decomposition of one pre-token. Words that exceed
/// [`MAX_WORD_CHARS`] or cannot be fully decomposed become a single `[UNK]`.
fn wordpiece(vocab: &Vocabulary, word: &str, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(vocab.unk_id());
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate = format!("{CONTINUATION}{candidate}");
            }
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some(id);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => {
                out.push(vocab.unk_id());
                return;
            }
        }
    }
    out.extend(pieces);
}

/// Encodes text to a fixed-length sequence: lowercase, split, greedy
/// WordPiece, then `[CLS] body [SEP]` truncated so the total length is
/// `max_len` with `[SEP]` always the last unmasked token, padded with
/// `[PAD]`.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument("max_len must be >= 2".into()));
    }
    let mut body = Vec::new();
    for word in pre_tokenize(text) {
        wordpiece(vocab, &word, &mut body);
        if body.len() >= max_len - 2 {
            break;
        }
    }
    body.truncate(max_len - 2);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&body);
    ids.push(vocab.sep_id());
    let real = ids.len();
    ids.resize(max_len, vocab.pad_id());

    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..real].fill(1);

    Ok(TokenSequence {
        ids,
        attention_mask,
        segment_ids: vec![0; max_len],
        label: 0,
    })
}

/// Reassembles body text from ids: specials skipped, `##` pieces appended to
/// the previous piece, pieces joined by single spaces.
pub fn decode_body(vocab: &Vocabulary, ids: &[u32]) -> String {
    let mut words: Vec<String> = Vec::new();
    for &id in ids {
        if vocab.is_special(id) {
            continue;
        }
        let Some(token) = vocab.token(id) else {
            continue;
        };
        match token.strip_prefix(CONTINUATION) {
            Some(cont) if !words.is_empty() => words.last_mut().unwrap().push_str(cont),
            Some(cont) => words.push(cont.to_string()),
            None => words.push(token.to_string()),
        }
    }
    words.join(" ")
}

/// Masked-language-model corruption: every non-special unmasked position is
/// independently selected with probability `mask_rate`; selected positions
/// become `[MASK]` 80% of the time, a random vocabulary id 10%, and stay
/// unchanged 10%. Returns the corrupted ids and the original id per selected
/// position.
pub fn mlm_mask(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    mask_rate: f64,
    seed: u64,
) -> Result<(Vec<u32>, BTreeMap<usize, u32>)> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::InvalidArgument(format!(
            "mask_rate must be in [0, 1], got {mask_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = seq.ids.clone();
    let mut targets = BTreeMap::new();
    for (pos, (&id, &mask)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
        if mask == 0 || vocab.is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= mask_rate {
            continue;
        }
        targets.insert(pos, id);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            corrupted[pos] = vocab.mask_id();
        } else if roll < 0.9 {
            corrupted[pos] = rng.gen_range(0..vocab.len() as u32);
        }
    }
    Ok((corrupted, targets))
}
