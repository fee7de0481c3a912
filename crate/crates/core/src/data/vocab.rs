use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bijection between word strings and ids. Ids 0..4 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED {
            v.index.insert(w.to_string(), v.words.len() as u32);
            v.words.push(w.to_string());
        }
        v
    }

    /// Vocabulary over every word of `sentences`, most frequent first, ties alphabetical.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in sentences {
            for w in split_words(s) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Vocab::new();
        let cap = max_size.unwrap_or(usize::MAX);
        for (w, _) in words {
            if v.len() >= cap {
                break;
            }
            v.add(&w);
        }
        v
    }

    /// Id of `word`, inserting it if new.
    pub fn add(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Rebuilds a vocabulary from its word list in id order.
    pub fn from_words(words: Vec<String>) -> Option<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return None;
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return None;
            }
        }
        Some(Vocab { words, index })
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '…' | '–' | '—')
}

/// Lowercased words and single punctuation characters.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    split_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect()
}

fn attaches_left(w: &str) -> bool {
    matches!(w, "." | "," | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "%" | "'" | "\"")
}

fn attaches_right(w: &str) -> bool {
    matches!(w, "(" | "[" | "{" | "$")
}

/// Joins words with spaces, attaching closing punctuation to the word before it.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for w in words {
        let w = w.as_ref();
        if !glue_next && !attaches_left(w) {
            out.push(' ');
        }
        out.push_str(w);
        glue_next = attaches_right(w);
    }
    out
}

/// Text for `ids`, skipping padding and sentence markers.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    let words: Vec<&str> = ids
        .iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .map(|&id| vocab.word(id).unwrap_or(RESERVED[UNK as usize]))
        .collect();
    join_words(&words)
}
