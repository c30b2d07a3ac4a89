//! Sequence corpora: FASTA/label loading, n-mer tokenization, vocabulary
//! construction, and overlapping segmentation of long sequences.
//!
//! Token index 0 is reserved for padding and index 1 for unknown n-mers, so
//! learned tokens start at 2. Vocabularies must be built from training data
//! only; test-time n-mers outside the vocabulary map to the unknown index.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved token index for padding positions.
pub const PAD_INDEX: usize = 0;
/// Reserved token index for n-mers absent from the vocabulary.
pub const UNK_INDEX: usize = 1;

/// A sequence with its multi-label annotation as dense label indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub id: String,
    pub residues: String,
    pub labels: BTreeSet<usize>,
}

/// Label names in first-appearance order; index in the table is the dense
/// label index used everywhere else.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelTable {
    names: Vec<String>,
}

impl LabelTable {
    pub fn from_names(names: Vec<String>) -> Self {
        LabelTable { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn intern(&mut self, name: &str) -> usize {
        match self.index_of(name) {
            Some(ix) => ix,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }
}

/// Overlapping n-mers of a residue string, stride 1.
///
/// A sequence of length `L` yields exactly `L - n + 1` tokens.
pub fn tokenize(residues: &str, n: usize) -> Result<Vec<&str>> {
    if n == 0 {
        return Err(Error::invalid("tokenize", "n must be at least 1"));
    }
    if residues.len() < n {
        return Err(Error::invalid(
            "tokenize",
            format!("sequence length {} is below n = {}", residues.len(), n),
        ));
    }
    Ok((0..=residues.len() - n)
        .map(|i| &residues[i..i + n])
        .collect())
}

/// Splits a sequence into segments of `segment_size` residues starting at
/// multiples of `floor(segment_size / 2)`.
///
/// Consecutive segments share at least half their positions. Every residue
/// is covered; only the final segment may be shorter than `segment_size`.
/// A sequence not longer than one segment comes back whole.
pub fn segment(residues: &str, segment_size: usize) -> Result<Vec<&str>> {
    if segment_size < 2 {
        return Err(Error::invalid("segment", "segment size must be at least 2"));
    }
    if residues.is_empty() {
        return Err(Error::invalid("segment", "empty sequence"));
    }
    let len = residues.len();
    let stride = segment_size / 2;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + segment_size).min(len);
        out.push(&residues[start..end]);
        if start + segment_size >= len {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// n-mer vocabulary with reserved padding and unknown entries.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    n: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Collects every n-mer of the given sequences in first-appearance
    /// order. Sequences shorter than `n` contribute nothing.
    pub fn build(sequences: &[LabeledSequence], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("vocabulary", "n must be at least 1"));
        }
        let mut vocab = Vocabulary {
            n,
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        for seq in sequences {
            if seq.residues.len() < n {
                continue;
            }
            for token in tokenize(&seq.residues, n)? {
                if !vocab.index.contains_key(token) {
                    let ix = vocab.tokens.len() + 2;
                    vocab.index.insert(token.to_string(), ix);
                    vocab.tokens.push(token.to_string());
                }
            }
        }
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from its learned token list (checkpoint load).
    pub fn from_tokens(n: usize, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 2))
            .collect();
        Vocabulary { n, index, tokens }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total index space including the padding and unknown entries.
    pub fn size(&self) -> usize {
        self.tokens.len() + 2
    }

    /// Learned tokens in index order; token `i` here has index `i + 2`.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of a token, or the unknown index if it was never seen.
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }
}

/// Maps tokens to indices and fixes the vector length at `t_len`: longer
/// inputs are truncated, shorter ones padded. The mask is true exactly at
/// padding positions.
pub fn pad_or_truncate(tokens: &[&str], t_len: usize, vocab: &Vocabulary) -> Result<(Vec<usize>, Vec<bool>)> {
    if t_len == 0 {
        return Err(Error::invalid("pad_or_truncate", "target length must be positive"));
    }
    let mut ids = Vec::with_capacity(t_len);
    let mut mask = Vec::with_capacity(t_len);
    for token in tokens.iter().take(t_len) {
        ids.push(vocab.index_of(token));
        mask.push(false);
    }
    while ids.len() < t_len {
        ids.push(PAD_INDEX);
        mask.push(true);
    }
    Ok((ids, mask))
}

/// One tokenized segment with its inherited labels as a multi-hot vector.
#[derive(Clone, Debug)]
pub struct Segment {
    /// Id of the sequence this segment was cut from.
    pub parent: String,
    pub tokens: Vec<usize>,
    /// True at padding positions.
    pub mask: Vec<bool>,
    /// Multi-hot label vector of length `label_count`.
    pub label: Vec<f64>,
}

/// Fixed-length tokenized segments ready for training.
#[derive(Clone, Debug)]
pub struct SegmentDataset {
    pub segments: Vec<Segment>,
    /// Token positions per segment: `segment_size - n + 1`.
    pub token_len: usize,
    pub label_count: usize,
    pub segment_size: usize,
    pub n: usize,
    /// Size of the vocabulary the token indices refer to.
    pub vocab_size: usize,
}

/// Segments every sequence and tokenizes the pieces against `vocab`.
///
/// Each segment inherits all labels of its parent. Sequences shorter than
/// `n` cannot produce a token and are skipped with a warning; the same
/// applies to a trailing segment shorter than `n` under degenerate sizes.
pub fn build_segment_dataset(
    sequences: &[LabeledSequence],
    segment_size: usize,
    n: usize,
    vocab: &Vocabulary,
    label_count: usize,
) -> Result<SegmentDataset> {
    if n != vocab.n() {
        return Err(Error::invalid(
            "build_segment_dataset",
            format!("n = {} disagrees with vocabulary n = {}", n, vocab.n()),
        ));
    }
    if segment_size < n {
        return Err(Error::invalid(
            "build_segment_dataset",
            format!("segment size {} is below n = {}", segment_size, n),
        ));
    }
    if label_count == 0 {
        return Err(Error::invalid("build_segment_dataset", "label count must be positive"));
    }
    let token_len = segment_size - n + 1;
    let mut segments = Vec::new();
    for seq in sequences {
        if seq.residues.len() < n {
            log::warn!(
                "skipping sequence {}: length {} is below n = {}",
                seq.id,
                seq.residues.len(),
                n
            );
            continue;
        }
        let mut label = vec![0.0; label_count];
        for &l in &seq.labels {
            if l >= label_count {
                return Err(Error::invalid(
                    "build_segment_dataset",
                    format!("sequence {} has label index {} out of {}", seq.id, l, label_count),
                ));
            }
            label[l] = 1.0;
        }
        for piece in segment(&seq.residues, segment_size)? {
            if piece.len() < n {
                log::warn!(
                    "skipping a segment of {}: length {} is below n = {}",
                    seq.id,
                    piece.len(),
                    n
                );
                continue;
            }
            let tokens = tokenize(piece, n)?;
            let (ids, mask) = pad_or_truncate(&tokens, token_len, vocab)?;
            segments.push(Segment {
                parent: seq.id.clone(),
                tokens: ids,
                mask,
                label: label.clone(),
            });
        }
    }
    Ok(SegmentDataset {
        segments,
        token_len,
        label_count,
        segment_size,
        n,
        vocab_size: vocab.size(),
    })
}

fn corpus_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Corpus {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Parses a FASTA file into `(id, residues)` pairs in file order.
///
/// The id is the first whitespace-delimited word after `>`. Residue lines
/// are concatenated, uppercased, and must be ASCII letters.
pub fn load_fasta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut records: Vec<(String, String)> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut header_line = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('>') {
            let id = rest.split_whitespace().next().unwrap_or("");
            if id.is_empty() {
                return Err(corpus_err(path, lineno + 1, "header without an id"));
            }
            if !seen.insert(id.to_string()) {
                return Err(corpus_err(path, lineno + 1, format!("duplicate sequence id `{id}`")));
            }
            if let Some((prev_id, residues)) = records.last() {
                if residues.is_empty() {
                    return Err(corpus_err(
                        path,
                        header_line,
                        format!("sequence `{prev_id}` has no residues"),
                    ));
                }
            }
            records.push((id.to_string(), String::new()));
            header_line = lineno + 1;
        } else {
            let record = records
                .last_mut()
                .ok_or_else(|| corpus_err(path, lineno + 1, "residues before any `>` header"))?;
            if !line.chars().all(|c| c.is_ascii_alphabetic()) {
                return Err(corpus_err(path, lineno + 1, "residue line with non-letter characters"));
            }
            record.1.push_str(&line.to_ascii_uppercase());
        }
    }
    match records.last() {
        None => Err(corpus_err(path, 1, "no sequences found")),
        Some((id, residues)) if residues.is_empty() => {
            Err(corpus_err(path, header_line, format!("sequence `{id}` has no residues")))
        }
        _ => Ok(records),
    }
}

/// Parses a label file of `id<TAB>label1,label2,...` lines.
fn load_labels(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (id, labels) = line
            .split_once('\t')
            .ok_or_else(|| corpus_err(path, lineno + 1, "expected `id<TAB>labels`"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(corpus_err(path, lineno + 1, "empty sequence id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(corpus_err(path, lineno + 1, format!("duplicate label line for `{id}`")));
        }
        let names: Vec<String> = labels
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        if names.is_empty() {
            return Err(corpus_err(path, lineno + 1, format!("sequence `{id}` has zero labels")));
        }
        out.push((id.to_string(), names));
    }
    Ok(out)
}

/// Loads a FASTA file plus its label file into annotated sequences.
///
/// Label names get dense indices in first-appearance order (label-file
/// order). Every sequence must be annotated and every label line must
/// reference a sequence present in the FASTA input.
pub fn load_corpus(sequence_path: &Path, label_path: &Path) -> Result<(Vec<LabeledSequence>, LabelTable)> {
    let records = load_fasta(sequence_path)?;
    let label_lines = load_labels(label_path)?;
    let mut table = LabelTable::default();
    let mut by_id: HashMap<String, BTreeSet<usize>> = HashMap::new();
    let ids: HashSet<&str> = records.iter().map(|(id, _)| id.as_str()).collect();
    for (id, names) in &label_lines {
        if !ids.contains(id.as_str()) {
            return Err(Error::Corpus {
                path: label_path.display().to_string(),
                line: 0,
                detail: format!("unknown sequence id `{id}`"),
            });
        }
        let set: BTreeSet<usize> = names.iter().map(|n| table.intern(n)).collect();
        by_id.insert(id.clone(), set);
    }
    let mut sequences = Vec::with_capacity(records.len());
    for (id, residues) in records {
        let labels = by_id.remove(&id).ok_or_else(|| Error::Corpus {
            path: label_path.display().to_string(),
            line: 0,
            detail: format!("sequence `{id}` has zero labels"),
        })?;
        sequences.push(LabeledSequence { id, residues, labels });
    }
    Ok((sequences, table))
}

/// Loads a corpus whose label names must already exist in `table`,
/// keeping indices consistent with the model that produced the table.
pub fn load_corpus_with_table(
    sequence_path: &Path,
    label_path: &Path,
    table: &LabelTable,
) -> Result<Vec<LabeledSequence>> {
    let records = load_fasta(sequence_path)?;
    let label_lines = load_labels(label_path)?;
    let ids: HashSet<&str> = records.iter().map(|(id, _)| id.as_str()).collect();
    let mut by_id: HashMap<String, BTreeSet<usize>> = HashMap::new();
    for (id, names) in &label_lines {
        if !ids.contains(id.as_str()) {
            return Err(Error::Corpus {
                path: label_path.display().to_string(),
                line: 0,
                detail: format!("unknown sequence id `{id}`"),
            });
        }
        let mut set = BTreeSet::new();
        for name in names {
            let ix = table.index_of(name).ok_or_else(|| Error::Corpus {
                path: label_path.display().to_string(),
                line: 0,
                detail: format!("label `{name}` is not known to the model"),
            })?;
            set.insert(ix);
        }
        by_id.insert(id.clone(), set);
    }
    let mut sequences = Vec::with_capacity(records.len());
    for (id, residues) in records {
        let labels = by_id.remove(&id).ok_or_else(|| Error::Corpus {
            path: label_path.display().to_string(),
            line: 0,
            detail: format!("sequence `{id}` has zero labels"),
        })?;
        sequences.push(LabeledSequence { id, residues, labels });
    }
    Ok(sequences)
}
