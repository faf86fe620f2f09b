use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, SeededRng};

/// Bounds of the uniform distribution used for words missing from the
/// pretrained file.
pub const UNSEEDED_ROW_BOUND: f64 = 0.05;

/// Splits raw post text into tokens.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on Unicode whitespace.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }
}

/// Dense bijection between tokens and row indices of the embedding table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an explicit token list; duplicates keep their first position.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len());
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to row indices, dropping out-of-vocabulary tokens.
    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.get(t.as_ref())).collect()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Every token seen at least `min_count` times, ordered by descending count
/// with ties broken lexicographically.
pub fn build_vocabulary<'a, I, S>(corpus: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for tok in doc {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
    kept.sort_by_key(|e| std::cmp::Reverse(e.1));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)))
}

/// The lookup matrix `E` with one row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(matrix: DenseMatrix) -> Self {
        Self { matrix }
    }

    /// All rows drawn from `U(-0.05, 0.05)`.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            matrix: DenseMatrix::uniform(vocab_size, dim, UNSEEDED_ROW_BOUND, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.matrix
    }
}

/// Reads a GloVe-style text file (`token f1 … fd` per line, no header).
///
/// Rows for vocabulary tokens found in the file are copied; the rest are
/// drawn from `U(-0.05, 0.05)` in vocabulary order using `rng`. A line whose
/// float count differs from `dim` is a parse error, unless every line agrees
/// on some other width, in which case the file simply has the wrong
/// dimension and a shape error is returned.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut found: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut first_bad: Option<(usize, usize)> = None;
    let mut widths_agree: Option<usize> = None;
    let mut consistent = true;
    let mut lines = 0usize;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: line_no,
                message: format!("bad float: {e}"),
            })?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: line_no,
                message: format!("non-finite value at field {}", pos + 1),
            });
        }
        match widths_agree {
            None => widths_agree = Some(values.len()),
            Some(w) if w != values.len() => consistent = false,
            _ => {}
        }
        if values.len() != dim {
            first_bad.get_or_insert((line_no, values.len()));
            continue;
        }
        if let Some(idx) = vocab.get(token) {
            if found[idx].is_none() {
                found[idx] = Some(values);
            }
        }
    }

    if let Some((line, count)) = first_bad {
        if consistent && lines >= 2 {
            return Err(Error::shape(
                "load_embeddings",
                format!("file vectors of dim {count}"),
                format!("expected dim {dim}"),
            ));
        }
        return Err(Error::Parse {
            path: path.to_owned(),
            line,
            message: format!("expected {dim} floats, found {count}"),
        });
    }

    let mut values = Vec::with_capacity(vocab.len() * dim);
    for row in found {
        match row {
            Some(v) => values.extend(v),
            None => values
                .extend((0..dim).map(|_| rng.uniform(-UNSEEDED_ROW_BOUND, UNSEEDED_ROW_BOUND))),
        }
    }
    Ok(EmbeddingTable::new(DenseMatrix::new(
        vocab.len(),
        dim,
        values,
    )?))
}
