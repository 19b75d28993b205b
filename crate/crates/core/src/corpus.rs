//! Corpus parsing, vocabulary construction and continuous feature tables.
//!
//! Corpora use the fastText supervised format: one document per line, with
//! leading `__label__`-prefixed tokens naming its labels. Continuous features
//! live in a sidecar file holding one vector per corpus line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

pub const LABEL_PREFIX: &str = "__label__";

/// Prefix of quantized pseudo-tokens. They share the word namespace.
pub const QUANT_PREFIX: &str = "__q__";

/// Split a corpus line into its labels (prefix stripped) and word tokens.
///
/// Only the leading run of `__label__` tokens is treated as labels; a label
/// marker after the first word is an ordinary word.
pub fn parse_line(line: &str) -> (Vec<&str>, Vec<&str>) {
    let mut labels = Vec::new();
    let mut tokens = Vec::new();
    let mut in_labels = true;
    for tok in line.split_whitespace() {
        if in_labels {
            if let Some(label) = tok.strip_prefix(LABEL_PREFIX) {
                labels.push(label);
                continue;
            }
            in_labels = false;
        }
        tokens.push(tok);
    }
    (labels, tokens)
}

/// Bag-of-words weights: each distinct id gets `count / len(tokens)`.
///
/// Weights use term counts rather than binary presence. The result is
/// sorted by id.
pub fn text_weights(tokens: &[u32]) -> Vec<(u32, f64)> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let len = tokens.len() as f64;
    let mut weights: Vec<(u32, f64)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let id = sorted[i];
        let run = sorted[i..].iter().take_while(|&&t| t == id).count();
        weights.push((id, run as f64 / len));
        i += run;
    }
    weights
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub token: String,
    pub count: u64,
}

/// Word and label inventories with dense ids.
///
/// Ids are assigned in descending count order, ties broken by first
/// occurrence in the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<Entry>,
    labels: Vec<Entry>,
    word_index: HashMap<String, u32>,
    label_index: HashMap<String, u32>,
    quant: Vec<bool>,
    min_count: u32,
}

impl Vocabulary {
    /// Count words and labels over `lines`, dropping words seen fewer than
    /// `min_count` times. Labels are never dropped.
    pub fn from_lines<I, S>(lines: I, min_count: u32) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = Counter::default();
        let mut labels = Counter::default();
        let mut labeled_lines = 0usize;
        for line in lines {
            let (line_labels, tokens) = parse_line(line.as_ref());
            if !line_labels.is_empty() {
                labeled_lines += 1;
            }
            line_labels.into_iter().for_each(|l| labels.add(l));
            tokens.into_iter().for_each(|w| words.add(w));
        }
        if labeled_lines == 0 {
            return Err(Error::NoLabeledLines);
        }

        let words = words
            .into_sorted()
            .into_iter()
            .filter(|e| e.count >= min_count as u64)
            .collect();
        Ok(Self::from_entries(words, labels.into_sorted(), min_count))
    }

    /// Assemble a vocabulary from entries already in id order.
    pub fn from_entries(words: Vec<Entry>, labels: Vec<Entry>, min_count: u32) -> Self {
        let word_index = index(&words);
        let label_index = index(&labels);
        let quant = words
            .iter()
            .map(|e| e.token.starts_with(QUANT_PREFIX))
            .collect();
        Vocabulary {
            words,
            labels,
            word_index,
            label_index,
            quant,
            min_count,
        }
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.word_index.get(word).copied()
    }

    pub fn label_id(&self, label: &str) -> Option<u32> {
        self.label_index.get(label).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize].token
    }

    pub fn label(&self, id: u32) -> &str {
        &self.labels[id as usize].token
    }

    /// Whether word `id` is a quantized pseudo-token.
    #[inline]
    pub fn is_quant(&self, id: u32) -> bool {
        self.quant[id as usize]
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn words(&self) -> &[Entry] {
        &self.words
    }

    pub fn labels(&self) -> &[Entry] {
        &self.labels
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }
}

fn index(entries: &[Entry]) -> HashMap<String, u32> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.token.clone(), i as u32))
        .collect()
}

#[derive(Default)]
struct Counter {
    // token -> (count, first occurrence)
    counts: HashMap<String, (u64, usize)>,
    seen: usize,
}

impl Counter {
    fn add(&mut self, token: &str) {
        if let Some(slot) = self.counts.get_mut(token) {
            slot.0 += 1;
        } else {
            self.counts.insert(token.to_owned(), (1, self.seen));
            self.seen += 1;
        }
    }

    fn into_sorted(self) -> Vec<Entry> {
        let mut entries: Vec<_> = self.counts.into_iter().collect();
        entries.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        entries
            .into_iter()
            .map(|(token, (count, _))| Entry { token, count })
            .collect()
    }
}

/// Build a vocabulary from a corpus file.
pub fn build_vocab(corpus_path: impl AsRef<Path>, min_count: u32) -> Result<Vocabulary> {
    let reader = BufReader::new(File::open(corpus_path)?);
    let lines = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
    Vocabulary::from_lines(lines, min_count)
}

/// A corpus line resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    /// Word ids in order; out-of-vocabulary words are dropped.
    pub tokens: Vec<u32>,
    /// Known label ids.
    pub labels: Vec<u32>,
    /// 0-based line number, keys into the feature table.
    pub line_index: usize,
    /// Labels on the line that the vocabulary does not know.
    pub unknown_labels: usize,
}

impl Document {
    pub fn resolve(line: &str, line_index: usize, vocab: &Vocabulary) -> Self {
        let (labels, tokens) = parse_line(line);
        let tokens = tokens.iter().filter_map(|w| vocab.word_id(w)).collect();
        let known: Vec<u32> = labels.iter().filter_map(|l| vocab.label_id(l)).collect();
        Document {
            tokens,
            unknown_labels: labels.len() - known.len(),
            labels: known,
            line_index,
        }
    }

    /// Whether the source line carried any label at all.
    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() || self.unknown_labels > 0
    }
}

/// Documents of one corpus file, one per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn from_lines<I, S>(lines: I, vocab: &Vocabulary) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let documents = lines
            .into_iter()
            .enumerate()
            .map(|(i, line)| Document::resolve(line.as_ref(), i, vocab))
            .collect();
        Corpus { documents }
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let lines = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::from_lines(lines, vocab))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }
}

/// Dense continuous features, one row per corpus line.
///
/// Rows are unit-normalized on construction; all-zero rows stay zero and
/// stand for documents without continuous input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn from_rows<I, R>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f64]>,
    {
        let mut dim = None;
        let mut data = Vec::new();
        for row in rows {
            let row = row.as_ref();
            let expected = *dim.get_or_insert(row.len());
            if row.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: row.len(),
                });
            }
            push_normalized(row, &mut data);
        }
        Ok(FeatureTable {
            dim: dim.unwrap_or(0),
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

fn push_normalized(row: &[f64], out: &mut Vec<f32>) {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.extend(row.iter().map(|&x| (x / norm) as f32));
    } else {
        out.extend(row.iter().map(|_| 0.0f32));
    }
}

/// Load a feature file with one space-separated vector per line.
///
/// The dimensionality is taken from the first line. When `expected_rows` is
/// given the file must hold exactly that many rows.
pub fn load_features(path: impl AsRef<Path>, expected_rows: Option<usize>) -> Result<FeatureTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let row = line
            .split_ascii_whitespace()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::parse(i + 1, format!("non-numeric field {:?}", field)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let expected = *dim.get_or_insert(row.len());
        if row.len() != expected {
            return Err(Error::parse(
                i + 1,
                format!("expected {} fields, found {}", expected, row.len()),
            ));
        }
        rows.push(row);
    }
    if let Some(expected) = expected_rows {
        if rows.len() != expected {
            return Err(Error::RowCountMismatch {
                expected,
                actual: rows.len(),
            });
        }
    }
    FeatureTable::from_rows(rows)
}
