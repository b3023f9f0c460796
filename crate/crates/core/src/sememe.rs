//! Word→sememe lexicon and the binary interaction matrix built from it.
//!
//! Lexicon file format: UTF-8 TSV, one `word<TAB>sememe1,sememe2,...` entry
//! per line, LF-terminated; lines starting with `#` are ignored. Duplicate
//! word lines merge their sememe sets. An entry M[i,j] of the interaction
//! matrix is 1 exactly when token i of the first sentence and token j of
//! the second share at least one sememe.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Error, Debug)]
pub enum LexiconError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("lexicon line {line}: missing word field")]
    MissingWord { line: usize },
}

/// Word → deduplicated sememe set.
#[derive(Debug, Clone, Default)]
pub struct SememeLexicon {
    words: HashMap<String, BTreeSet<String>>,
    sememes: BTreeSet<String>,
    empty: BTreeSet<String>,
}

impl SememeLexicon {
    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (word, field) = raw.split_once('\t').unwrap_or((raw, ""));
            if word.is_empty() {
                return Err(LexiconError::MissingWord { line });
            }
            let set: BTreeSet<String> = field
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect();
            if set.is_empty() {
                log::warn!("lexicon line {line}: word {word:?} has no sememes");
            }
            lex.sememes.extend(set.iter().cloned());
            lex.words.entry(word.to_string()).or_default().extend(set);
        }
        Ok(lex)
    }

    pub fn add(&mut self, word: &str, sememes: impl IntoIterator<Item = String>) {
        let entry = self.words.entry(word.to_string()).or_default();
        for s in sememes {
            self.sememes.insert(s.clone());
            entry.insert(s);
        }
    }

    /// Sememe set of `word`; absent words map to the empty set.
    pub fn sememes(&self, word: &str) -> &BTreeSet<String> {
        self.words.get(word).unwrap_or(&self.empty)
    }

    pub fn shared(&self, a: &str, b: &str) -> BTreeSet<String> {
        self.sememes(a)
            .intersection(self.sememes(b))
            .cloned()
            .collect()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Count of distinct sememes across the whole lexicon.
    pub fn sememe_count(&self) -> usize {
        self.sememes.len()
    }
}

/// Binary l_p×l_h matrix over the valid (unpadded) token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SememeMatrix {
    data: Vec<u8>,
    l_p: usize,
    l_h: usize,
}

impl SememeMatrix {
    pub fn zeros(l_p: usize, l_h: usize) -> Self {
        Self {
            data: vec![0; l_p * l_h],
            l_p,
            l_h,
        }
    }

    pub fn rows(&self) -> usize {
        self.l_p
    }

    pub fn cols(&self) -> usize {
        self.l_h
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.l_h + j]
    }

    pub fn transposed(&self) -> Self {
        let mut out = Self::zeros(self.l_h, self.l_p);
        for i in 0..self.l_p {
            for j in 0..self.l_h {
                out.data[j * self.l_p + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn ones_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_f64(f64::from(v))).collect();
        Tensor::new(vec![self.l_p, self.l_h], data).expect("matrix dims are positive")
    }

    /// Row/column sums zero-padded to `max_len`: one count per valid token
    /// of P and of H respectively.
    pub fn sums(&self, max_len: usize) -> SememeSums {
        let mut hn_row = vec![0u32; max_len];
        let mut hn_col = vec![0u32; max_len];
        for i in 0..self.l_p {
            for j in 0..self.l_h {
                let v = u32::from(self.get(i, j));
                hn_row[i] += v;
                hn_col[j] += v;
            }
        }
        SememeSums { hn_row, hn_col }
    }

    pub fn stats(&self) -> OverlapStats {
        let ones = self.ones_count();
        let per_row_max = (0..self.l_p)
            .map(|i| (0..self.l_h).map(|j| u32::from(self.get(i, j))).max().unwrap_or(0))
            .collect();
        OverlapStats {
            ones_count: ones,
            density: ones as f64 / (self.l_p * self.l_h) as f64,
            per_row_max,
        }
    }
}

/// Per-token overlap counts, zero-padded to the model's maximum length so
/// the classifier input width is static.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SememeSums {
    pub hn_row: Vec<u32>,
    pub hn_col: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapStats {
    pub ones_count: usize,
    pub density: f64,
    pub per_row_max: Vec<u32>,
}

/// M[i,j] = 1 iff the sememe sets of tokens_p[i] and tokens_h[j] intersect.
pub fn build_interaction_matrix<S: AsRef<str>>(
    tokens_p: &[S],
    tokens_h: &[S],
    lexicon: &SememeLexicon,
) -> SememeMatrix {
    assert!(
        !tokens_p.is_empty() && !tokens_h.is_empty(),
        "token lists must be non-empty"
    );
    let sets_p: Vec<&BTreeSet<String>> =
        tokens_p.iter().map(|t| lexicon.sememes(t.as_ref())).collect();
    let sets_h: Vec<&BTreeSet<String>> =
        tokens_h.iter().map(|t| lexicon.sememes(t.as_ref())).collect();
    let mut m = SememeMatrix::zeros(tokens_p.len(), tokens_h.len());
    for (i, sp) in sets_p.iter().enumerate() {
        if sp.is_empty() {
            continue;
        }
        for (j, sh) in sets_h.iter().enumerate() {
            if sp.intersection(sh).next().is_some() {
                m.data[i * m.l_h + j] = 1;
            }
        }
    }
    m
}
