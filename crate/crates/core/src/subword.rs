//! Byte-pair encoding.
//!
//! A word is split into characters followed by a separate end-of-word
//! symbol `</w>`. Learning repeatedly merges the most frequent adjacent pair
//! (ties broken lexicographically on the pair). When segments are emitted, a
//! bare `</w>` left at the end is attached to the unit before it, so every
//! word ends in exactly one unit carrying the marker.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::read_lines;
use crate::error::{Error, Result};

pub const EOW: &str = "</w>";
const HEADER: &str = "#bpe v1";

/// Ordered merge operations; earlier merges have priority.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, (a, b)) in merges.iter().enumerate() {
            if a.is_empty() || b.is_empty() || a.contains(char::is_whitespace) || b.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid merge symbols '{a}' '{b}'")));
            }
            if ranks.insert((a.clone(), b.clone()), i).is_some() {
                return Err(Error::Config(format!("duplicate merge '{a} {b}'")));
            }
        }
        Ok(MergeTable { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from(HEADER);
        text.push('\n');
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push(' ');
            text.push_str(b);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        if lines.first().map(String::as_str) != Some(HEADER) {
            return Err(Error::parse(path, 1, format!("expected header '{HEADER}'")));
        }
        let mut merges = Vec::with_capacity(lines.len());
        for (n, line) in lines.iter().enumerate().skip(1) {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(Error::parse(path, n + 1, "expected 'a b'")),
            }
        }
        Self::new(merges).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(EOW.to_string());
    s
}

fn merge_pair(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns up to `num_merges` merges from word frequencies. Stops early when
/// no pair occurs at least twice.
pub fn learn_bpe(word_freqs: &BTreeMap<String, u64>, num_merges: usize) -> MergeTable {
    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .filter(|(w, c)| !w.is_empty() && **c > 0)
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
            }
        }
        // max count, lexicographically smallest pair among ties
        let best = counts
            .iter()
            .fold(None::<(&(&str, &str), u64)>, |best, (pair, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((pair, c)),
            });
        let Some((&(a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in &mut words {
            merge_pair(syms, &a, &b);
        }
        merges.push((a, b));
    }
    MergeTable::new(merges).expect("learned merges are unique and whitespace-free")
}

/// Counts whitespace-separated tokens of a corpus.
pub fn word_frequencies<'a, I>(sentences: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    let mut freqs = BTreeMap::new();
    for s in sentences {
        for w in s {
            *freqs.entry(w.clone()).or_insert(0) += 1;
        }
    }
    freqs
}

/// Internal symbols of `token` after applying the merges, with the
/// end-of-word marker still a separate symbol unless it was merged.
pub fn segment_symbols(token: &str, table: &MergeTable) -> Vec<String> {
    let mut syms = initial_symbols(token);
    loop {
        let best = syms
            .windows(2)
            .filter_map(|p| table.ranks.get(&(p[0].clone(), p[1].clone())))
            .min()
            .copied();
        let Some(rank) = best else { break };
        let (a, b) = &table.merges[rank];
        merge_pair(&mut syms, a, b);
    }
    syms
}

/// Segments one token; the last unit carries the end-of-word marker.
pub fn apply_bpe(token: &str, table: &MergeTable) -> Vec<String> {
    let mut syms = segment_symbols(token, table);
    if syms.len() > 1 && syms.last().map(String::as_str) == Some(EOW) {
        syms.pop();
        syms.last_mut().unwrap().push_str(EOW);
    }
    syms
}

/// Segments a tokenized sentence.
pub fn apply_bpe_sentence(tokens: &[String], table: &MergeTable) -> Vec<String> {
    tokens.iter().flat_map(|t| apply_bpe(t, table)).collect()
}

/// Joins subword units back into words at end-of-word markers. Units left
/// without a marker at the end form a final word.
pub fn undo_bpe(units: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for u in units {
        match u.strip_suffix(EOW) {
            Some(stem) => {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(u),
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}
