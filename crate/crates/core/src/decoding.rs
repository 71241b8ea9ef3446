//! Beam search, ensembles, attention dumps and unknown-word replacement.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{EOS_ID, UNK};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::seq2seq::{decode_step, emit, start_sentence, DecoderState, ModelConfig, Seq2SeqParams, SentenceContext, StepOutput};
use crate::tensor::{kernels, Scalar, Tensor};

/// Next-token distribution of a left-to-right model.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    /// Log-probabilities indexed by token id (`-inf` for excluded ids), the
    /// attention row of this step and the state awaiting the chosen token.
    fn score(&self, state: &Self::State) -> Result<(Vec<f64>, Vec<f64>, Self::State)>;

    fn advance(&self, scored: &Self::State, token: usize) -> Result<Self::State>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, including the final sentence-end id when finished.
    pub tokens: Vec<usize>,
    /// Exact sum of the chosen per-step log-probabilities.
    pub log_prob: f64,
    /// One attention row per emitted token.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing sentence-end id.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn score(&self, len_norm: bool) -> f64 {
        if len_norm && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first, then the lexicographically smaller id sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search. Each step expands every live hypothesis, keeps the best
/// `beam − finished` expansions, and moves those ending in the sentence-end
/// id to the finished pool. At `max_len` the remaining hypotheses are kept as
/// unfinished; they are only returned when nothing finished.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize, len_norm: bool) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max_len must be at least 1".into()));
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            attention: Vec::new(),
            finished: false,
        },
        state: scorer.initial()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let width = beam - finished.len();
        let mut expansions: Vec<(f64, Vec<usize>, usize, usize)> = Vec::new();
        let mut scored = Vec::with_capacity(live.len());
        for (h, l) in live.iter().enumerate() {
            let (lp, alpha, pending) = scorer.score(&l.state)?;
            for (tok, &x) in lp.iter().enumerate() {
                if x.is_finite() {
                    let mut seq = l.hyp.tokens.clone();
                    seq.push(tok);
                    expansions.push((l.hyp.log_prob + x, seq, h, tok));
                }
            }
            scored.push((lp, alpha, pending));
        }
        expansions.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        expansions.truncate(width);
        let mut next = Vec::with_capacity(expansions.len());
        for (_, tokens, h, tok) in expansions {
            let (lp, alpha, pending) = &scored[h];
            let mut hyp = live[h].hyp.clone();
            hyp.log_prob += lp[tok];
            hyp.tokens = tokens;
            hyp.attention.push(alpha.clone());
            if tok == EOS_ID {
                hyp.finished = true;
                finished.push(hyp);
            } else {
                let state = scorer.advance(pending, tok)?;
                next.push(Live { hyp, state });
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }
    let pool: Vec<Hypothesis> = if finished.is_empty() {
        live.into_iter().map(|l| l.hyp).collect()
    } else {
        finished
    };
    pool.into_iter()
        .min_by(|a, b| rank((a.score(len_norm), &a.tokens), (b.score(len_norm), &b.tokens)))
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// Scorer backed by one model on a private tape.
pub struct NmtScorer<'a, T: Scalar> {
    cfg: &'a ModelConfig,
    tape: RefCell<Tape<T>>,
    params: Seq2SeqParams<NodeId>,
    ctx: SentenceContext,
    start: DecoderState,
}

#[derive(Clone, Debug)]
pub struct NmtState {
    dec: DecoderState,
    pending: Option<StepOutput>,
}

impl<'a, T: Scalar> NmtScorer<'a, T> {
    pub fn new(params: &Seq2SeqParams<Tensor<T>>, cfg: &'a ModelConfig, src: &[usize]) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (ctx, start) = start_sentence(&mut tape, cfg, &bound, src, None)?;
        Ok(NmtScorer {
            cfg,
            tape: RefCell::new(tape),
            params: bound,
            ctx,
            start,
        })
    }
}

impl<T: Scalar> StepScorer for NmtScorer<'_, T> {
    type State = NmtState;

    fn initial(&self) -> Result<NmtState> {
        Ok(NmtState { dec: self.start.clone(), pending: None })
    }

    fn score(&self, state: &NmtState) -> Result<(Vec<f64>, Vec<f64>, NmtState)> {
        let mut tape = self.tape.borrow_mut();
        let step = decode_step(&mut tape, self.cfg, &self.params, &self.ctx, &state.dec)?;
        let cols = tape.value(step.log_probs).to_f64_vec();
        let mut lp = vec![f64::NEG_INFINITY; self.cfg.tgt_vocab];
        for (c, x) in cols.into_iter().enumerate() {
            lp[self.ctx.out.vocab_id(c)] = x;
        }
        let alpha = tape.value(step.alpha).to_f64_vec();
        Ok((lp, alpha, NmtState { dec: state.dec.clone(), pending: Some(step) }))
    }

    fn advance(&self, scored: &NmtState, token: usize) -> Result<NmtState> {
        let step = scored
            .pending
            .as_ref()
            .ok_or_else(|| Error::Contract("advance called before score".into()))?;
        let mut tape = self.tape.borrow_mut();
        let dec = emit(&mut tape, &self.params, &self.ctx, step, token)?;
        Ok(NmtState { dec, pending: None })
    }
}

/// Members decode in lockstep, each with its own state; the next-token
/// distribution is the arithmetic mean of the members' distributions and
/// the attention row is the mean of their rows.
pub struct EnsembleScorer<S> {
    pub members: Vec<S>,
}

/// `ln(mean(exp(x_i)))`, shifted by the maximum for stability.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

impl<S: StepScorer> StepScorer for EnsembleScorer<S> {
    type State = Vec<S::State>;

    fn initial(&self) -> Result<Self::State> {
        self.members.iter().map(StepScorer::initial).collect()
    }

    fn score(&self, state: &Self::State) -> Result<(Vec<f64>, Vec<f64>, Self::State)> {
        let mut lps = Vec::with_capacity(self.members.len());
        let mut alphas = Vec::with_capacity(self.members.len());
        let mut pending = Vec::with_capacity(self.members.len());
        for (m, s) in self.members.iter().zip(state) {
            let (lp, a, p) = m.score(s)?;
            lps.push(lp);
            alphas.push(a);
            pending.push(p);
        }
        let n = lps.len();
        let vocab = lps[0].len();
        let lp = (0..vocab)
            .map(|k| log_mean_exp(&lps.iter().map(|l| l[k]).collect::<Vec<_>>()))
            .collect();
        let alpha = (0..alphas[0].len())
            .map(|j| alphas.iter().map(|a| a[j]).sum::<f64>() / n as f64)
            .collect();
        Ok((lp, alpha, pending))
    }

    fn advance(&self, scored: &Self::State, token: usize) -> Result<Self::State> {
        self.members.iter().zip(scored).map(|(m, s)| m.advance(s, token)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub len_norm: bool,
    /// `None` means `2·source length + 5`.
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 10, len_norm: true, max_len: None }
    }
}

impl DecodeOptions {
    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 5)
    }
}

pub fn translate<T: Scalar>(
    params: &Seq2SeqParams<Tensor<T>>,
    cfg: &ModelConfig,
    src: &[usize],
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let scorer = NmtScorer::new(params, cfg, src)?;
    beam_search(&scorer, opts.beam, opts.max_len_for(src.len()), opts.len_norm)
}

/// Greedy argmax decoding.
pub fn greedy<T: Scalar>(params: &Seq2SeqParams<Tensor<T>>, cfg: &ModelConfig, src: &[usize], max_len: usize) -> Result<Hypothesis> {
    let scorer = NmtScorer::new(params, cfg, src)?;
    beam_search(&scorer, 1, max_len, false)
}

pub fn ensemble_decode<T: Scalar>(
    models: &[(&Seq2SeqParams<Tensor<T>>, &ModelConfig)],
    src: &[usize],
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let Some(&(_, first)) = models.first() else {
        return Err(Error::Config("an ensemble needs at least one model".into()));
    };
    for (_, c) in models {
        if c.src_vocab != first.src_vocab || c.tgt_vocab != first.tgt_vocab {
            return Err(Error::Config(format!(
                "ensemble members disagree on vocabulary sizes ({}/{} vs {}/{})",
                c.src_vocab, c.tgt_vocab, first.src_vocab, first.tgt_vocab
            )));
        }
    }
    let members = models
        .iter()
        .map(|(p, c)| NmtScorer::new(p, c, src))
        .collect::<Result<Vec<_>>>()?;
    let scorer = EnsembleScorer { members };
    beam_search(&scorer, opts.beam, opts.max_len_for(src.len()), opts.len_norm)
}

/// Replaces each unknown-word token by the top lexicon translation of its
/// most-attended source word, or by that source word itself.
pub fn replace_unk(tokens: &[String], attention: &[Vec<f64>], src: &[String], lex: Option<&Lexicon>) -> Vec<String> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            if tok != UNK {
                return tok.clone();
            }
            let Some(row) = attention.get(t).filter(|r| !r.is_empty()) else {
                return tok.clone();
            };
            let Some(word) = src.get(kernels::argmax(row)) else {
                return tok.clone();
            };
            lex.and_then(|l| l.top_k(word, 1).first().map(|w| w.to_string()))
                .unwrap_or_else(|| word.clone())
        })
        .collect()
}

/// `x` with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (5 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

/// One attention block: header then one line per target step.
pub fn format_attention_block(n: usize, rows: &[Vec<f64>], src_len: usize) -> String {
    let mut out = format!("SENT {n} T={} L={src_len}\n", rows.len());
    for r in rows {
        let line: Vec<String> = r.iter().map(|&x| format_sig6(x)).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

/// Blocks separated by blank lines.
pub fn format_attention_dump(blocks: &[(Vec<Vec<f64>>, usize)]) -> String {
    blocks
        .iter()
        .enumerate()
        .map(|(n, (rows, l))| format_attention_block(n + 1, rows, *l))
        .collect::<Vec<_>>()
        .join("\n")
}
