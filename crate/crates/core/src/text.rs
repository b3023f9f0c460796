//! Vocabulary, dictionary segmentation, sentence-pair encoding and labeled
//! dataset loading.
//!
//! File formats:
//! - vocab: UTF-8, one token per line, LF-terminated; line i maps to id i+2
//!   (0 and 1 are reserved for PAD and UNK);
//! - dataset: UTF-8 TSV with exactly three columns
//!   `sentence1<TAB>sentence2<TAB>label`, label literal "0" or "1", no
//!   header. Prediction inputs drop the label column.
//!
//! Sentences are either segmented by greedy longest dictionary match or, in
//! pre-tokenized mode, split on U+0020 so any external segmentation can be
//! injected.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Placeholder token recorded when a sentence is empty after tokenization.
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("vocab line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("vocab line {line}: empty token")]
    EmptyToken { line: usize },
    #[error("dataset row {line}: expected {expected} tab-separated columns, found {found}")]
    BadColumns {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset row {line}: label must be \"0\" or \"1\", found {value:?}")]
    BadLabel { line: usize, value: String },
}

/// Token → id map with PAD=0 and UNK=1 reserved.
#[derive(Debug, Clone)]
pub struct Vocab {
    map: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from tokens in order: token i gets id i+2.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = HashMap::new();
        for (i, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            let line = i + 1;
            if tok.is_empty() {
                return Err(IngestError::EmptyToken { line });
            }
            if map.insert(tok.clone(), i + 2).is_some() {
                return Err(IngestError::DuplicateToken { line, token: tok });
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_tokens(text.lines().map(str::to_owned))
    }

    /// Count including the two reserved ids.
    pub fn size(&self) -> usize {
        self.map.len() + 2
    }

    /// Id for a token, UNK when absent.
    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Word set for greedy longest-match segmentation.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    words: HashSet<String>,
    max_chars: usize,
}

impl Dictionary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: HashSet<String> = words.into_iter().map(Into::into).collect();
        let max_chars = words.iter().map(|w| w.chars().count()).max().unwrap_or(0);
        Self { words, max_chars }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Greedy forward longest-match segmentation. Characters not covered by any
/// dictionary word come out as single-character tokens, so concatenating
/// the result always reproduces the input.
pub fn segment(text: &str, dict: &Dictionary) -> Vec<String> {
    let offsets: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let n_chars = offsets.len() - 1;
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < n_chars {
        let longest = dict.max_chars.min(n_chars - pos).max(1);
        let mut matched = 1;
        for len in (1..=longest).rev() {
            if dict.words.contains(&text[offsets[pos]..offsets[pos + len]]) {
                matched = len;
                break;
            }
        }
        tokens.push(text[offsets[pos]..offsets[pos + matched]].to_string());
        pos += matched;
    }
    tokens
}

/// How a raw sentence column turns into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenization {
    /// Greedy longest match against a dictionary.
    Greedy,
    /// Tokens are already separated by U+0020 in the input.
    Pretokenized,
}

pub fn tokenize(text: &str, mode: Tokenization, dict: &Dictionary) -> Vec<String> {
    match mode {
        Tokenization::Greedy => segment(text, dict),
        Tokenization::Pretokenized => text
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    }
}

/// One encoded sentence pair. Ids and masks are padded to the configured
/// maximum length; the mask is true exactly at the first `len` positions.
#[derive(Debug, Clone)]
pub struct TokenizedPair {
    pub tokens_p: Vec<String>,
    pub tokens_h: Vec<String>,
    pub ids_p: Vec<usize>,
    pub ids_h: Vec<usize>,
    pub mask_p: Vec<bool>,
    pub mask_h: Vec<bool>,
    pub len_p: usize,
    pub len_h: usize,
    pub label: Option<u8>,
}

fn encode_one(tokens: Vec<String>, vocab: &Vocab, max_len: usize) -> (Vec<String>, Vec<usize>, Vec<bool>, usize) {
    // empty sentences become a single UNK so no attention slice is empty
    let mut tokens = tokens;
    if tokens.is_empty() {
        tokens.push(UNK_TOKEN.to_string());
    }
    tokens.truncate(max_len); // keep the head
    let len = tokens.len();
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![true; len];
    mask.resize(max_len, false);
    (tokens, ids, mask, len)
}

/// Encodes two token lists into a padded, masked pair.
pub fn encode_pair(
    tokens_p: Vec<String>,
    tokens_h: Vec<String>,
    vocab: &Vocab,
    max_len: usize,
    label: Option<u8>,
) -> TokenizedPair {
    assert!(max_len >= 1, "max_len must be at least 1");
    let (tokens_p, ids_p, mask_p, len_p) = encode_one(tokens_p, vocab, max_len);
    let (tokens_h, ids_h, mask_h, len_h) = encode_one(tokens_h, vocab, max_len);
    TokenizedPair {
        tokens_p,
        tokens_h,
        ids_p,
        ids_h,
        mask_p,
        mask_h,
        len_p,
        len_h,
        label,
    }
}

/// Ordered list of encoded pairs plus where they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<TokenizedPair>,
    pub source: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn parse_rows(
    path: &Path,
    expected_cols: usize,
) -> Result<Vec<(usize, Vec<String>)>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<String> = raw.split('\t').map(str::to_owned).collect();
        if cols.len() != expected_cols {
            return Err(IngestError::BadColumns {
                line,
                expected: expected_cols,
                found: cols.len(),
            });
        }
        rows.push((line, cols));
    }
    Ok(rows)
}

/// Loads a labeled 3-column TSV, tokenizing and encoding every row.
pub fn load_dataset(
    path: &Path,
    vocab: &Vocab,
    dict: &Dictionary,
    max_len: usize,
    mode: Tokenization,
) -> Result<Dataset, IngestError> {
    let mut pairs = Vec::new();
    for (line, cols) in parse_rows(path, 3)? {
        let label = match cols[2].as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(IngestError::BadLabel {
                    line,
                    value: other.to_string(),
                })
            }
        };
        pairs.push(encode_pair(
            tokenize(&cols[0], mode, dict),
            tokenize(&cols[1], mode, dict),
            vocab,
            max_len,
            Some(label),
        ));
    }
    Ok(Dataset {
        pairs,
        source: path.to_path_buf(),
    })
}

/// Loads an unlabeled 2-column TSV (prediction input).
pub fn load_pairs(
    path: &Path,
    vocab: &Vocab,
    dict: &Dictionary,
    max_len: usize,
    mode: Tokenization,
) -> Result<Dataset, IngestError> {
    let mut pairs = Vec::new();
    for (_, cols) in parse_rows(path, 2)? {
        pairs.push(encode_pair(
            tokenize(&cols[0], mode, dict),
            tokenize(&cols[1], mode, dict),
            vocab,
            max_len,
            None,
        ));
    }
    Ok(Dataset {
        pairs,
        source: path.to_path_buf(),
    })
}

/// Index batches over `n` items. With a seed the permutation is a pure
/// function of (seed, epoch); without one the original order is kept. The
/// final short batch is always emitted.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle: Option<(u64, u64)>,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some((seed, epoch)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch.wrapping_add(1));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab_of(tokens: &[&str]) -> Vocab {
        Vocab::from_tokens(tokens.iter().copied()).unwrap()
    }

    #[test]
    fn vocab_numbering_is_forced() {
        let v = vocab_of(&["我", "你"]);
        assert_eq!(v.id("我"), 2);
        assert_eq!(v.id("你"), 3);
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn empty_vocab_has_reserved_ids_only() {
        let v = Vocab::from_tokens(Vec::<String>::new()).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.id("anything"), UNK_ID);
    }

    #[test]
    fn duplicate_vocab_line_is_rejected_with_line_number() {
        let err = Vocab::from_tokens(["a", "b", "a"]).unwrap_err();
        match err {
            IngestError::DuplicateToken { line, token } => {
                assert_eq!(line, 3);
                assert_eq!(token, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segment_prefers_longest_match() {
        let dict = Dictionary::from_words(["ab", "abc", "d"]);
        assert_eq!(segment("abcd", &dict), vec!["abc", "d"]);
    }

    #[test]
    fn segment_empty_input() {
        let dict = Dictionary::from_words(["x"]);
        assert!(segment("", &dict).is_empty());
    }

    #[test]
    fn segment_falls_back_to_single_chars() {
        let dict = Dictionary::default();
        assert_eq!(segment("xy", &dict), vec!["x", "y"]);
    }

    #[test]
    fn segment_handles_multibyte_chars() {
        let dict = Dictionary::from_words(["中华", "儿女"]);
        assert_eq!(segment("我们都是中华儿女", &dict), vec!["我", "们", "都", "是", "中华", "儿女"]);
    }

    #[test]
    fn encode_truncates_to_max_len_keeping_head() {
        let v = vocab_of(&["t"]);
        let tokens: Vec<String> = (0..101).map(|_| "t".to_string()).collect();
        let pair = encode_pair(tokens, vec!["t".into()], &v, 100, None);
        assert_eq!(pair.len_p, 100);
        assert_eq!(pair.ids_p.len(), 100);
        assert!(pair.mask_p.iter().all(|&m| m));
    }

    #[test]
    fn encode_pads_and_masks() {
        let v = vocab_of(&["a", "b", "c"]);
        let pair = encode_pair(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["a".into()],
            &v,
            5,
            Some(1),
        );
        assert_eq!(pair.ids_p, vec![2, 3, 4, PAD_ID, PAD_ID]);
        assert_eq!(pair.mask_p, vec![true, true, true, false, false]);
        assert_eq!(pair.len_p, 3);
    }

    #[test]
    fn oov_token_becomes_unk() {
        let v = vocab_of(&["a"]);
        let pair = encode_pair(vec!["zzz".into()], vec!["a".into()], &v, 3, None);
        assert_eq!(pair.ids_p[0], UNK_ID);
    }

    #[test]
    fn empty_sentence_becomes_single_unk() {
        let v = vocab_of(&["a"]);
        let pair = encode_pair(vec![], vec!["a".into()], &v, 3, None);
        assert_eq!(pair.len_p, 1);
        assert_eq!(pair.ids_p[0], UNK_ID);
        assert_eq!(pair.tokens_p, vec![UNK_TOKEN.to_string()]);
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_dataset_parses_rows() {
        let v = vocab_of(&["能", "查", "账单", "吗", "可以", "查询"]);
        let dict = Dictionary::from_words(v.words().map(str::to_owned));
        let f = write_tmp("能查账单吗\t可以查询账单\t0\n");
        let ds = load_dataset(f.path(), &v, &dict, 10, Tokenization::Greedy).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pairs[0].label, Some(0));
        assert_eq!(ds.pairs[0].tokens_p, vec!["能", "查", "账单", "吗"]);
    }

    #[test]
    fn load_dataset_empty_file() {
        let v = vocab_of(&["a"]);
        let dict = Dictionary::default();
        let f = write_tmp("");
        let ds = load_dataset(f.path(), &v, &dict, 4, Tokenization::Greedy).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn load_dataset_rejects_two_columns_with_row_number() {
        let v = vocab_of(&["a"]);
        let dict = Dictionary::default();
        let f = write_tmp("a\tb\t1\nc\td\n");
        let err = load_dataset(f.path(), &v, &dict, 4, Tokenization::Greedy).unwrap_err();
        match err {
            IngestError::BadColumns { line, found, .. } => {
                assert_eq!(line, 2);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_dataset_rejects_bad_label() {
        let v = vocab_of(&["a"]);
        let dict = Dictionary::default();
        let f = write_tmp("a\tb\t2\n");
        let err = load_dataset(f.path(), &v, &dict, 4, Tokenization::Greedy).unwrap_err();
        assert!(matches!(err, IngestError::BadLabel { line: 1, .. }));
    }

    #[test]
    fn pretokenized_mode_splits_on_space() {
        let v = vocab_of(&["hello", "world"]);
        let dict = Dictionary::default();
        let f = write_tmp("hello world\tworld\t1\n");
        let ds = load_dataset(f.path(), &v, &dict, 4, Tokenization::Pretokenized).unwrap();
        assert_eq!(ds.pairs[0].tokens_p, vec!["hello", "world"]);
        assert_eq!(ds.pairs[0].ids_p[..2], [2, 3]);
    }

    #[test]
    fn batches_cover_with_final_short_batch() {
        let batches = batch_indices(10, 4, None);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].len(), 4);
        assert_eq!(batches[2].len(), 2);
        assert_eq!(batches.concat(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_order() {
        let a = batch_indices(50, 8, Some((42, 3)));
        let b = batch_indices(50, 8, Some((42, 3)));
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = batch_indices(100, 100, Some((1, 0)));
        let b = batch_indices(100, 100, Some((2, 0)));
        assert_ne!(a, b);
    }

    #[test]
    fn different_epochs_differ() {
        let a = batch_indices(100, 100, Some((1, 0)));
        let b = batch_indices(100, 100, Some((1, 1)));
        assert_ne!(a, b);
    }
}
