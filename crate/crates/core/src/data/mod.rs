//! Tokenization, corpus and triplet loading, and the synthetic template grammar.

mod synth;
mod vocab;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use synth::{default_spec, gen_synthetic, write_labels, SynthCorpus, SynthSentence, SynthSpec, SynthTriplet, Template, DEFAULT_SPEC};
pub use vocab::{detokenize, join_words, split_words, tokenize, Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid UTF-8")]
    Utf8 { path: PathBuf, line: usize },
    #[error("{path}:{line}: expected 3 tab-separated columns, found {found}")]
    Arity { path: PathBuf, line: usize, found: usize },
    #[error("{path}:{line}: empty field in column {column}")]
    EmptyField { path: PathBuf, line: usize, column: usize },
    #[error("synthetic spec line {line}: {msg}")]
    Spec { line: usize, msg: String },
    #[error("synthetic grammar: {0}")]
    Synth(String),
}

/// Sentences of a corpus file plus the number of physical lines read.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<String>,
    pub line_count: usize,
}

/// Evaluation triple: a target, a paraphrase of it, and a syntactically similar sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRecord {
    pub target: String,
    pub sem_src: String,
    pub syn_src: String,
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = Vec::new();
    let mut chunks: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if chunks.last().is_some_and(|c| c.is_empty()) {
        chunks.pop();
    }
    for (i, chunk) in chunks.into_iter().enumerate() {
        let chunk = chunk.strip_suffix(b"\r").unwrap_or(chunk);
        let line = std::str::from_utf8(chunk).map_err(|_| DataError::Utf8 {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

/// One sentence per line; blank lines are skipped. LF and CRLF are equivalent.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    let lines = read_lines(path.as_ref())?;
    let line_count = lines.len();
    let sentences = lines
        .into_iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    Ok(Corpus { sentences, line_count })
}

/// Tab-separated `target, sem_src, syn_src`. Tabs inside fields cannot be quoted.
pub fn load_triplets(path: impl AsRef<Path>, has_header: bool) -> Result<Vec<TripletRecord>, DataError> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if (has_header && i == 0) || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(DataError::Arity {
                path: path.to_path_buf(),
                line: i + 1,
                found: cols.len(),
            });
        }
        if let Some(c) = cols.iter().position(|c| c.trim().is_empty()) {
            return Err(DataError::EmptyField {
                path: path.to_path_buf(),
                line: i + 1,
                column: c + 1,
            });
        }
        out.push(TripletRecord {
            target: cols[0].trim().to_string(),
            sem_src: cols[1].trim().to_string(),
            syn_src: cols[2].trim().to_string(),
        });
    }
    Ok(out)
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[TripletRecord]) -> std::io::Result<()> {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&format!("{}\t{}\t{}\n", t.target, t.sem_src, t.syn_src));
    }
    fs::write(path, s)
}
