//! Tokenized text I/O, vocabularies and integerization.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];
const VOCAB_HEADER: &str = "#vocab v1";

pub type Sentence = Vec<String>;

/// Reads a UTF-8 file and splits it into lines, reporting the first invalid
/// line by number.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let text = std::str::from_utf8(line)
            .map_err(|e| Error::parse(path, n + 1, format!("invalid UTF-8: {e}")))?;
        out.push(text.to_string());
    }
    // a trailing newline does not start another sentence
    if bytes.ends_with(b"\n") {
        out.pop();
    }
    Ok(out)
}

pub fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_string).collect()
}

/// One whitespace-tokenized sentence per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

pub fn write_corpus(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Word ↔ id bijection with frequency counts. Ids `0..4` are reserved for
/// padding, sentence begin, sentence end and the unknown word.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string(), 0);
        }
        v
    }

    fn push(&mut self, word: String, count: u64) {
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.counts.push(count);
    }

    /// Words ordered by descending frequency, ties lexicographic, truncated
    /// so the total size including specials is at most `max_size`.
    pub fn from_sentences<'a, I>(sentences: I, max_size: usize, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        if max_size < SPECIALS.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least {}, got {max_size}",
                SPECIALS.len() + 1
            )));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for w in s {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIALS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut v = Self::with_specials();
        for (w, c) in ranked.into_iter().take(max_size - SPECIALS.len()) {
            v.push(w.to_string(), c);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or the unknown-word id.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Non-special words in id order (most frequent first).
    pub fn regular_words(&self) -> impl Iterator<Item = &str> {
        self.words[SPECIALS.len()..].iter().map(String::as_str)
    }

    /// Ids of `tokens` followed by the sentence-end id.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id_or_unk(t)).collect();
        ids.push(EOS_ID);
        ids
    }

    /// Words of `ids`, stopping at the first sentence end; padding and
    /// sentence-begin markers are dropped.
    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID && id != BOS_ID)
            .map(|&id| self.words.get(id).map_or(UNK, String::as_str).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{VOCAB_HEADER}").unwrap();
        for (w, c) in self.words.iter().zip(&self.counts) {
            writeln!(out, "{w}\t{c}").unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        if lines.first().map(String::as_str) != Some(VOCAB_HEADER) {
            return Err(Error::parse(path, 1, format!("expected header '{VOCAB_HEADER}'")));
        }
        let mut v = Vocabulary {
            words: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for (n, line) in lines.iter().enumerate().skip(1) {
            let (w, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, n + 1, "expected 'word<TAB>count'"))?;
            let c: u64 = c
                .parse()
                .map_err(|_| Error::parse(path, n + 1, format!("bad count '{c}'")))?;
            if v.index.contains_key(w) {
                return Err(Error::parse(path, n + 1, format!("duplicate word '{w}'")));
            }
            v.push(w.to_string(), c);
        }
        for (id, s) in SPECIALS.iter().enumerate() {
            if v.words.get(id).map(String::as_str) != Some(*s) {
                return Err(Error::parse(path, id + 2, format!("expected special '{s}'")));
            }
        }
        Ok(v)
    }
}

/// Builds a vocabulary from a tokenized corpus file.
pub fn build_vocab(path: &Path, max_size: usize, min_count: u64) -> Result<Vocabulary> {
    let corpus = read_corpus(path)?;
    Vocabulary::from_sentences(&corpus, max_size, min_count)
}

/// Encodes a parallel corpus, dropping pairs with an empty side.
pub fn encode_bitext(
    src: &[Sentence],
    tgt: &[Sentence],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if src.len() != tgt.len() {
        return Err(Error::Config(format!(
            "parallel corpus sides differ in length: {} vs {}",
            src.len(),
            tgt.len()
        )));
    }
    Ok(src
        .iter()
        .zip(tgt)
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .map(|(s, t)| {
            let mut sid = src_vocab.encode(s);
            sid.pop();
            (sid, tgt_vocab.encode(t))
        })
        .collect())
}
