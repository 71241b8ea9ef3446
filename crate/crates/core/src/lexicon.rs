//! Model-1 word translation tables and per-batch candidate lists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{read_lines, Sentence, Vocabulary, EOS_ID, UNK_ID};
use crate::error::{Error, Result};

const HEADER: &str = "#lex v1";
pub const NULL_WORD: &str = "<null>";
pub const PRUNE_BELOW: f64 = 1e-6;
pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_FREQUENT: usize = 2000;

/// t(tgt | src), each row sorted by descending probability (ties by word).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    rows: BTreeMap<String, Vec<(String, f64)>>,
}

#[derive(Clone, Debug)]
pub struct Model1Report {
    pub lexicon: Lexicon,
    /// Training log-likelihood under the table in effect before each
    /// M-step, followed by the value for the final table.
    pub log_likelihood: Vec<f64>,
    pub skipped_pairs: usize,
}

fn sort_row(row: &mut [(String, f64)]) {
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

impl Lexicon {
    pub fn from_rows(rows: BTreeMap<String, Vec<(String, f64)>>) -> Result<Self> {
        let mut rows = rows;
        for (src, row) in rows.iter_mut() {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if row.iter().any(|(_, p)| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "lexicon row '{src}' is not a distribution (sum {total})"
                )));
            }
            sort_row(row);
        }
        Ok(Lexicon { rows })
    }

    pub fn row(&self, src: &str) -> &[(String, f64)] {
        self.rows.get(src).map_or(&[], Vec::as_slice)
    }

    pub fn prob(&self, src: &str, tgt: &str) -> f64 {
        self.row(src).iter().find(|(w, _)| w == tgt).map_or(0.0, |(_, p)| *p)
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The `k` most probable translations of `src`; empty for unknown words.
    pub fn top_k(&self, src: &str, k: usize) -> Vec<&str> {
        self.row(src).iter().take(k).map(|(w, _)| w.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from(HEADER);
        text.push('\n');
        for (src, row) in &self.rows {
            for (tgt, p) in row {
                writeln!(text, "{src}\t{tgt}\t{p:e}").unwrap();
            }
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        if lines.first().map(String::as_str) != Some(HEADER) {
            return Err(Error::parse(path, 1, format!("expected header '{HEADER}'")));
        }
        let mut rows: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (n, line) in lines.iter().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let [src, tgt, p] = f.as_slice() else {
                return Err(Error::parse(path, n + 1, "expected 'src<TAB>tgt<TAB>prob'"));
            };
            let p: f64 = p
                .parse()
                .map_err(|_| Error::parse(path, n + 1, format!("bad probability '{p}'")))?;
            rows.entry(src.to_string()).or_default().push((tgt.to_string(), p));
        }
        Self::from_rows(rows).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

/// IBM Model 1 trained with EM from a uniform table. With `use_null` every
/// source sentence gets an extra empty word that can generate any target.
pub fn train_model1(bitext: &[(Sentence, Sentence)], iterations: usize, use_null: bool) -> Result<Model1Report> {
    if iterations == 0 {
        return Err(Error::Config("model-1 needs at least one iteration".into()));
    }
    let mut src_ids: HashMap<&str, usize> = HashMap::new();
    let mut tgt_ids: HashMap<&str, usize> = HashMap::new();
    let mut src_words: Vec<&str> = Vec::new();
    let mut tgt_words: Vec<&str> = Vec::new();
    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut skipped = 0;
    if use_null {
        src_ids.insert(NULL_WORD, 0);
        src_words.push(NULL_WORD);
    }
    for (s, t) in bitext {
        if s.is_empty() || t.is_empty() {
            skipped += 1;
            continue;
        }
        let mut si: Vec<usize> = if use_null { vec![0] } else { Vec::new() };
        for w in s {
            let next = src_words.len();
            let id = *src_ids.entry(w.as_str()).or_insert(next);
            if id == next {
                src_words.push(w.as_str());
            }
            si.push(id);
        }
        let ti: Vec<usize> = t
            .iter()
            .map(|w| {
                let next = tgt_words.len();
                let id = *tgt_ids.entry(w.as_str()).or_insert(next);
                if id == next {
                    tgt_words.push(w.as_str());
                }
                id
            })
            .collect();
        pairs.push((si, ti));
    }
    if pairs.is_empty() {
        return Err(Error::Config("model-1 needs at least one non-empty sentence pair".into()));
    }
    if skipped > 0 {
        log::warn!("model-1: skipped {skipped} pairs with an empty side");
    }

    // sparse table over co-occurring pairs, uniform over the target vocabulary
    let uniform = 1.0 / tgt_words.len() as f64;
    let mut t: Vec<HashMap<usize, f64>> = vec![HashMap::new(); src_words.len()];
    for (si, ti) in &pairs {
        for &s in si {
            for &w in ti {
                t[s].insert(w, uniform);
            }
        }
    }
    let log_lik = |t: &[HashMap<usize, f64>]| -> f64 {
        pairs
            .iter()
            .map(|(si, ti)| {
                let norm = (si.len() as f64).ln();
                ti.iter()
                    .map(|w| si.iter().map(|&s| t[s][w]).sum::<f64>().ln() - norm)
                    .sum::<f64>()
            })
            .sum()
    };
    let mut trace = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        trace.push(log_lik(&t));
        let mut counts: Vec<HashMap<usize, f64>> = vec![HashMap::new(); src_words.len()];
        for (si, ti) in &pairs {
            for w in ti {
                let z: f64 = si.iter().map(|&s| t[s][w]).sum();
                for &s in si {
                    *counts[s].entry(*w).or_default() += t[s][w] / z;
                }
            }
        }
        for (row, c) in t.iter_mut().zip(counts) {
            let total: f64 = c.values().sum();
            for (w, p) in row.iter_mut() {
                *p = c.get(w).copied().unwrap_or(0.0) / total;
            }
        }
    }
    trace.push(log_lik(&t));

    let mut rows = BTreeMap::new();
    for (s, row) in t.into_iter().enumerate() {
        let mut kept: Vec<(String, f64)> = row
            .into_iter()
            .filter(|&(_, p)| p >= PRUNE_BELOW)
            .map(|(w, p)| (tgt_words[w].to_string(), p))
            .collect();
        let total: f64 = kept.iter().map(|(_, p)| p).sum();
        for (_, p) in kept.iter_mut() {
            *p /= total;
        }
        sort_row(&mut kept);
        rows.insert(src_words[s].to_string(), kept);
    }
    Ok(Model1Report {
        lexicon: Lexicon { rows },
        log_likelihood: trace,
        skipped_pairs: skipped,
    })
}

/// Set of admissible target ids for one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateList {
    ids: Vec<usize>,
}

impl CandidateList {
    /// Sorted, deduplicated ids; the sentence-end and unknown ids are added.
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut set: BTreeSet<usize> = ids.into_iter().collect();
        set.insert(EOS_ID);
        set.insert(UNK_ID);
        CandidateList { ids: set.into_iter().collect() }
    }

    pub fn full(vocab_size: usize) -> Self {
        Self::new(0..vocab_size)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// Inputs shared by every batch's candidate list.
#[derive(Clone, Debug)]
pub struct CandidateSource<'a> {
    pub lexicon: &'a Lexicon,
    pub target_vocab: &'a Vocabulary,
    /// Most frequent training-target words.
    pub frequent: Vec<String>,
    pub k: usize,
    pub cap: Option<usize>,
}

impl<'a> CandidateSource<'a> {
    pub fn new(lexicon: &'a Lexicon, target_vocab: &'a Vocabulary, frequent_count: usize, k: usize) -> Self {
        CandidateSource {
            lexicon,
            target_vocab,
            frequent: target_vocab.regular_words().take(frequent_count).map(str::to_string).collect(),
            k,
            cap: None,
        }
    }

    /// Union of the frequent words, the top-k translations of every source
    /// token and, in training mode, every batch target token. When a cap is
    /// set, lower-priority groups are cut first: frequent words, then
    /// translations; specials and reference tokens are always kept.
    pub fn build(&self, batch_src: &[Sentence], train_targets: Option<&[Sentence]>) -> CandidateList {
        let v = self.target_vocab;
        let mut must: Vec<usize> = Vec::new();
        if let Some(tgts) = train_targets {
            must.extend(tgts.iter().flatten().map(|w| v.id_or_unk(w)));
        }
        let mut translations = Vec::new();
        for w in batch_src.iter().flatten() {
            translations.extend(self.lexicon.top_k(w, self.k).into_iter().filter_map(|t| v.id(t)));
        }
        let frequent = self.frequent.iter().filter_map(|w| v.id(w));
        let Some(cap) = self.cap else {
            return CandidateList::new(must.into_iter().chain(translations).chain(frequent));
        };
        let mut set: BTreeSet<usize> = [EOS_ID, UNK_ID].into_iter().chain(must).collect();
        for id in translations.into_iter().chain(frequent) {
            if set.len() >= cap {
                break;
            }
            set.insert(id);
        }
        CandidateList::new(set)
    }

    /// [`build`](Self::build) for integerized batches; source ids are mapped
    /// back to words through `src_vocab`.
    pub fn build_from_ids(
        &self,
        src_vocab: &Vocabulary,
        batch_src: &[&[usize]],
        train_targets: Option<&[&[usize]]>,
    ) -> CandidateList {
        let words: Vec<Sentence> = batch_src
            .iter()
            .map(|s| s.iter().map(|&id| src_vocab.word(id).to_string()).collect())
            .collect();
        let targets: Option<Vec<Sentence>> = train_targets.map(|ts| {
            ts.iter()
                .map(|t| t.iter().map(|&id| self.target_vocab.word(id).to_string()).collect())
                .collect()
        });
        self.build(&words, targets.as_deref())
    }
}
