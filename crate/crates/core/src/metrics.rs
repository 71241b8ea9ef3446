//! Translation and alignment metrics.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::corpus::read_lines;
use crate::error::{Error, Result};

pub const MAX_SHIFTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Percent, 0..=100.
    pub bleu: f64,
    pub bp: f64,
    pub precisions: Vec<f64>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU against a single reference per hypothesis, without smoothing.
pub fn bleu<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuReport> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "bleu needs equal, non-zero hypothesis and reference counts ({} vs {})",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let bp = if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        bp * mean_log.exp() * 100.0
    } else {
        0.0
    };
    Ok(BleuReport { bleu, bp, precisions, hyp_len, ref_len })
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Moves `seq[start..start+len]` so it begins at `dest` in the remaining
/// sequence.
pub fn shift_block<T: Clone>(seq: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let block = &seq[start..start + len];
    let mut rest: Vec<T> = seq[..start].iter().chain(&seq[start + len..]).cloned().collect();
    rest.splice(dest..dest, block.iter().cloned());
    rest
}

/// Minimum edits (shifts + insertions + deletions + substitutions) found by
/// greedy block shifting followed by edit distance.
pub fn ter_edits<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> usize {
    let mut cur = hyp.to_vec();
    let mut dist = levenshtein(&cur, reference);
    let mut shifts = 0;
    while shifts < MAX_SHIFTS && dist > 0 {
        let mut best: Option<(usize, Vec<T>)> = None;
        // smallest block first, then leftmost start, then leftmost destination
        for len in 1..cur.len() {
            for start in 0..=cur.len() - len {
                for dest in 0..=cur.len() - len {
                    if dest == start {
                        continue;
                    }
                    let cand = shift_block(&cur, start, len, dest);
                    let d = levenshtein(&cand, reference);
                    if best.as_ref().map_or(d < dist, |(bd, _)| d < *bd) {
                        best = Some((d, cand));
                    }
                }
            }
        }
        match best {
            Some((d, cand)) => {
                cur = cand;
                dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    shifts + dist
}

/// Edits per reference word.
pub fn ter<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("ter needs a non-empty reference".into()));
    }
    Ok(ter_edits(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus TER in percent: total edits over total reference words.
pub fn corpus_ter<T: PartialEq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Contract("ter needs equal, non-zero hypothesis and reference counts".into()));
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::Contract("ter needs non-empty references".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| ter_edits(h, r)).sum();
    Ok(100.0 * edits as f64 / words as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub ter: f64,
    pub tb: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BLEU={:.3} BP={:.3} TER={:.3} TB={:.3}",
            self.bleu.bleu, self.bleu.bp, self.ter, self.tb
        )
    }
}

/// BLEU, TER and TB = (TER − BLEU) / 2 on the percent scale.
pub fn evaluate(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<EvalReport> {
    let b = bleu(hyps, refs, 4)?;
    let t = corpus_ter(hyps, refs)?;
    Ok(EvalReport { tb: (t - b.bleu) / 2.0, ter: t, bleu: b })
}

pub fn tb(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    Ok(evaluate(hyps, refs)?.tb)
}

/// Links as (source position, target position), 0-based.
pub type AlignmentSet = BTreeSet<(usize, usize)>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl std::fmt::Display for Prf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P={:.4} R={:.4} F1={:.4}", self.precision, self.recall, self.f1)
    }
}

fn prf_from_counts(hit: usize, machine: usize, gold: usize) -> Prf {
    let precision = if machine == 0 { 1.0 } else { hit as f64 / machine as f64 };
    let recall = if gold == 0 { 1.0 } else { hit as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

pub fn alignment_prf(machine: &AlignmentSet, gold: &AlignmentSet) -> Prf {
    prf_from_counts(machine.intersection(gold).count(), machine.len(), gold.len())
}

/// Micro-averaged over sentences: link counts are pooled before dividing.
pub fn corpus_alignment_prf(machine: &[AlignmentSet], gold: &[AlignmentSet]) -> Result<Prf> {
    if machine.len() != gold.len() {
        return Err(Error::Contract(format!(
            "alignment corpora differ in length: {} vs {}",
            machine.len(),
            gold.len()
        )));
    }
    let hit = machine.iter().zip(gold).map(|(m, g)| m.intersection(g).count()).sum();
    let m = machine.iter().map(BTreeSet::len).sum();
    let g = gold.iter().map(BTreeSet::len).sum();
    Ok(prf_from_counts(hit, m, g))
}

pub fn parse_pharaoh_line(line: &str) -> std::result::Result<AlignmentSet, String> {
    line.split_whitespace()
        .map(|tok| {
            let (i, j) = tok.split_once('-').ok_or_else(|| format!("bad link '{tok}'"))?;
            let i = i.parse().map_err(|_| format!("bad source index in '{tok}'"))?;
            let j = j.parse().map_err(|_| format!("bad target index in '{tok}'"))?;
            Ok((i, j))
        })
        .collect()
}

pub fn format_pharaoh_line(links: &AlignmentSet) -> String {
    links.iter().map(|(i, j)| format!("{i}-{j}")).collect::<Vec<_>>().join(" ")
}

pub fn read_pharaoh(path: &Path) -> Result<Vec<AlignmentSet>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(n, l)| parse_pharaoh_line(l).map_err(|m| Error::parse(path, n + 1, m)))
        .collect()
}

/// Occurrences of `pattern` chosen leftmost-first without overlap; this is
/// the maximum number of disjoint occurrences.
fn disjoint_occurrences<T: PartialEq>(seq: &[T], pattern: &[T]) -> usize {
    let n = pattern.len();
    let mut count = 0;
    let mut i = 0;
    while i + n <= seq.len() {
        if seq[i..i + n] == *pattern {
            count += 1;
            i += n;
        } else {
            i += 1;
        }
    }
    count
}

/// Maximal repeated n-grams (n ≥ 2) of one sentence, each as its length.
pub fn sentence_repetitions<T: Eq + std::hash::Hash>(tokens: &[T]) -> Vec<usize> {
    let repeated = |n: usize| -> Vec<&[T]> {
        let mut seen: Vec<&[T]> = Vec::new();
        if n > tokens.len() {
            return seen;
        }
        for w in tokens.windows(n) {
            if !seen.contains(&w) && disjoint_occurrences(tokens, w) >= 2 {
                seen.push(w);
            }
        }
        seen
    };
    let mut lengths = Vec::new();
    let mut longer = repeated(2);
    for n in 2..=tokens.len() / 2 {
        let current = longer;
        longer = repeated(n + 1);
        for g in &current {
            let extended = longer.iter().any(|h| h[1..] == **g || h[..n] == **g);
            if !extended {
                lengths.push(n);
            }
        }
    }
    lengths
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepetitionStats {
    pub count: usize,
    pub avg_length: f64,
}

pub fn repetition_stats<T: Eq + std::hash::Hash>(hyps: &[Vec<T>]) -> RepetitionStats {
    let lengths: Vec<usize> = hyps.iter().flat_map(|h| sentence_repetitions(h)).collect();
    let count = lengths.len();
    let avg_length = if count == 0 {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / count as f64
    };
    RepetitionStats { count, avg_length }
}
