//! Encoder–decoder assembly: parameters, teacher-forced loss, attention
//! recording and forced alignment.

use std::collections::BTreeMap;

use crate::attention::{
    advance_coverage, attend_step, AttentionConfig, AttentionKind, AttentionParams, AttnState,
    SourceMemory,
};
use crate::autodiff::{NodeId, Tape};
use crate::corpus::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::layers::{bidir_encode, gru_cell, readout, uniform, GruParams, OutputProjection, ReadoutParams};
use crate::metrics::AlignmentSet;
use crate::rng;
use crate::tensor::{kernels, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb: usize,
    /// GRU size; the attention MLP and readout layer use the same width.
    pub hidden: usize,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize, emb: usize, hidden: usize, kind: AttentionKind) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            emb,
            hidden,
            attention: AttentionConfig::new(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("emb", self.emb),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model dimension '{name}' must be positive")));
            }
        }
        if self.tgt_vocab <= EOS_ID {
            return Err(Error::Config("target vocabulary must include the specials".into()));
        }
        self.attention.validate()
    }

    pub fn annotation_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let a = &self.attention;
        let window = a.history_window.map_or("inf".to_string(), |n| n.to_string());
        format!(
            "src_vocab={}\ntgt_vocab={}\nemb={}\nhidden={}\nvariant={}\nhistory_window={}\ncoverage_dim={}\nlocal_window={}\n",
            self.src_vocab, self.tgt_vocab, self.emb, self.hidden, a.kind, window, a.coverage_dim, a.local_window
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad model config line '{line}'")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Config(format!("model config lacks '{k}'")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("model config '{k}' is not a number")))
        };
        let mut attention = AttentionConfig::new(get("variant")?.parse()?);
        attention.history_window = match get("history_window")? {
            "inf" => None,
            _ => Some(num("history_window")?),
        };
        attention.coverage_dim = num("coverage_dim")?;
        attention.local_window = num("local_window")?;
        let cfg = ModelConfig {
            src_vocab: num("src_vocab")?,
            tgt_vocab: num("tgt_vocab")?,
            emb: num("emb")?,
            hidden: num("hidden")?,
            attention,
        };
        if kv.len() != 8 {
            return Err(Error::Config("model config has unexpected keys".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqParams<P> {
    pub src_embed: P,
    pub tgt_embed: P,
    pub enc_fwd: GruParams<P>,
    pub enc_bwd: GruParams<P>,
    /// Input is `[y_prev_emb ; context]`.
    pub dec: GruParams<P>,
    pub attn: AttentionParams<P>,
    pub readout: ReadoutParams<P>,
    /// `hidden × hidden`, maps the first backward encoder state to `s_0`.
    pub w_init: P,
}

impl<P> Seq2SeqParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Seq2SeqParams<Q> {
        Seq2SeqParams {
            src_embed: f(&self.src_embed),
            tgt_embed: f(&self.tgt_embed),
            enc_fwd: self.enc_fwd.map(f),
            enc_bwd: self.enc_bwd.map(f),
            dec: self.dec.map(f),
            attn: self.attn.map(f),
            readout: self.readout.map(f),
            w_init: f(&self.w_init),
        }
    }

    /// Visits tensors in a fixed order with their stable names.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("src_embed".into(), &self.src_embed);
        f("tgt_embed".into(), &self.tgt_embed);
        self.enc_fwd.visit("enc.fwd", f);
        self.enc_bwd.visit("enc.bwd", f);
        self.dec.visit("dec", f);
        self.attn.visit("attn", f);
        self.readout.visit("readout", f);
        f("W_init".into(), &self.w_init);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        f("src_embed".into(), &mut self.src_embed);
        f("tgt_embed".into(), &mut self.tgt_embed);
        self.enc_fwd.visit_mut("enc.fwd", f);
        self.enc_bwd.visit_mut("enc.bwd", f);
        self.dec.visit_mut("dec", f);
        self.attn.visit_mut("attn", f);
        self.readout.visit_mut("readout", f);
        f("W_init".into(), &mut self.w_init);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    pub fn flat(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, p| out.push(p));
        out
    }
}

impl<T: Scalar> Seq2SeqParams<Tensor<T>> {
    /// Deterministic uniform initialization from the seed's init stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, rng::INIT);
        let (e, h) = (cfg.emb, cfg.hidden);
        let a = cfg.annotation_dim();
        Ok(Seq2SeqParams {
            src_embed: uniform(&mut rng, &[cfg.src_vocab, e]),
            tgt_embed: uniform(&mut rng, &[cfg.tgt_vocab, e]),
            enc_fwd: GruParams::init(e, h, &mut rng),
            enc_bwd: GruParams::init(e, h, &mut rng),
            dec: GruParams::init(e + a, h, &mut rng),
            attn: AttentionParams::init(&cfg.attention, h, a, h, e, &mut rng),
            readout: ReadoutParams::init(h, e, a, h, cfg.tgt_vocab, &mut rng),
            w_init: uniform(&mut rng, &[h, h]),
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::init(cfg, 0)?.map(&mut |t| Tensor::zeros(t.shape())))
    }

    /// Checks every tensor against the shape `cfg` implies.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::init(cfg, 0)?;
        let mut want = Vec::new();
        reference.visit(&mut |n, t| want.push((n, t.shape().to_vec())));
        let mut got = Vec::new();
        self.visit(&mut |n, t| got.push((n, t.shape().to_vec())));
        if want != got {
            for (w, g) in want.iter().zip(&got) {
                if w != g {
                    return Err(Error::dim(
                        "params",
                        format!("{} expected {:?}, found {} {:?}", w.0, w.1, g.0, g.1),
                    ));
                }
            }
            return Err(Error::dim("params", format!("expected {} tensors, found {}", want.len(), got.len())));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Seq2SeqParams<NodeId> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqParams<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }

    pub fn num_parameters(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }
}

/// Attention weights of one sentence: row `t` is the α of target step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub rows: Vec<Vec<f64>>,
    pub src_len: usize,
}

impl AttentionMatrix {
    pub fn new(src_len: usize) -> Self {
        AttentionMatrix { rows: Vec::new(), src_len }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Argmax source position of each row, lowest index on ties.
    pub fn argmax_links(&self, rows: usize) -> AlignmentSet {
        self.rows
            .iter()
            .take(rows)
            .enumerate()
            .map(|(t, r)| (kernels::argmax(r), t))
            .collect()
    }
}

/// Per-sentence encoder output and output projection.
#[derive(Clone, Debug)]
pub struct SentenceContext {
    pub mem: SourceMemory,
    pub s0: NodeId,
    pub out: OutputProjection,
}

/// Decoder state carried between steps; cheap to clone.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub s: NodeId,
    pub attn: AttnState,
    pub y_prev_emb: NodeId,
}

/// Outputs of one decoder step before the next word is chosen.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `1 × C` log-probabilities over the output columns.
    pub log_probs: NodeId,
    pub alpha: NodeId,
    pub next: DecoderState,
}

pub fn start_sentence<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &Seq2SeqParams<NodeId>,
    src: &[usize],
    candidates: Option<&[usize]>,
) -> Result<(SentenceContext, DecoderState)> {
    if let Some(&bad) = src.iter().find(|&&id| id >= cfg.src_vocab) {
        return Err(Error::OutOfRange { id: bad, size: cfg.src_vocab });
    }
    let enc = bidir_encode(tape, src, p.src_embed, &p.enc_fwd, &p.enc_bwd)?;
    let mem = SourceMemory::new(tape, &cfg.attention, &p.attn, enc.annotations)?;
    let s0 = tape.matmul(enc.backward[0], p.w_init)?;
    let s0 = tape.tanh(s0)?;
    let out = OutputProjection::prepare(tape, &p.readout, candidates)?;
    let state = DecoderState {
        s: s0,
        attn: AttnState::reset(tape, &cfg.attention, &mem),
        y_prev_emb: tape.embedding(p.tgt_embed, &[BOS_ID])?,
    };
    Ok((SentenceContext { mem, s0, out }, state))
}

/// Attention from `s_{t−1}`, GRU update on `[y_{t−1} ; c_t]`, readout and
/// log-softmax.
pub fn decode_step<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &Seq2SeqParams<NodeId>,
    ctx: &SentenceContext,
    state: &DecoderState,
) -> Result<StepOutput> {
    let mut attn = state.attn.clone();
    let step = attend_step(tape, &cfg.attention, &p.attn, &ctx.mem, &mut attn, state.s)?;
    let input = tape.concat(&[state.y_prev_emb, step.context], 1)?;
    let s = gru_cell(tape, input, state.s, &p.dec)?;
    let logits = readout(tape, s, state.y_prev_emb, step.context, &p.readout, &ctx.out)?;
    let log_probs = tape.log_softmax_row(logits)?;
    Ok(StepOutput {
        log_probs,
        alpha: step.alpha,
        next: DecoderState { s, attn, y_prev_emb: state.y_prev_emb },
    })
}

/// Feeds the chosen word `y` back: coverage is advanced and `y` becomes the
/// previous-word input of the next step.
pub fn emit<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Seq2SeqParams<NodeId>,
    ctx: &SentenceContext,
    step: &StepOutput,
    y: usize,
) -> Result<DecoderState> {
    let mut next = step.next.clone();
    let y_emb = tape.embedding(p.tgt_embed, &[y])?;
    advance_coverage(tape, &p.attn, &ctx.mem, &mut next.attn, step.alpha, y_emb)?;
    next.y_prev_emb = y_emb;
    Ok(next)
}

/// Tape nodes of one teacher-forced pass.
#[derive(Clone, Debug)]
pub struct ForcedPass {
    /// `1 × 1` total negative log-likelihood.
    pub loss: NodeId,
    pub alphas: Vec<NodeId>,
}

/// Records the teacher-forced decode of `tgt` on `tape`.
pub fn forced_pass<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &Seq2SeqParams<NodeId>,
    src: &[usize],
    tgt: &[usize],
    candidates: Option<&[usize]>,
) -> Result<ForcedPass> {
    if tgt.is_empty() {
        return Err(Error::Contract("target sentence is empty".into()));
    }
    if tgt.last() != Some(&EOS_ID) {
        return Err(Error::Contract("target sentence must end with the sentence-end id".into()));
    }
    let (ctx, mut state) = start_sentence(tape, cfg, p, src, candidates)?;
    let mut picks = Vec::with_capacity(tgt.len());
    let mut alphas = Vec::with_capacity(tgt.len());
    for &y in tgt {
        if y >= cfg.tgt_vocab {
            return Err(Error::OutOfRange { id: y, size: cfg.tgt_vocab });
        }
        let col = ctx.out.column_of(y).ok_or(Error::Unreachable { id: y })?;
        let step = decode_step(tape, cfg, p, &ctx, &state)?;
        picks.push(tape.pick(step.log_probs, col)?);
        alphas.push(step.alpha);
        state = emit(tape, p, &ctx, &step, y)?;
    }
    let total = tape.concat(&picks, 1)?;
    let total = tape.sum(total)?;
    let loss = tape.scale(total, -1.0)?;
    Ok(ForcedPass { loss, alphas })
}

fn attention_matrix<T: Scalar>(tape: &Tape<T>, alphas: &[NodeId], src_len: usize) -> AttentionMatrix {
    AttentionMatrix {
        rows: alphas.iter().map(|&a| tape.value(a).to_f64_vec()).collect(),
        src_len,
    }
}

/// Teacher-forced NLL and the `T × l` attention matrix.
pub fn encode_decode_loss<T: Scalar>(
    params: &Seq2SeqParams<Tensor<T>>,
    cfg: &ModelConfig,
    src: &[usize],
    tgt: &[usize],
    candidates: Option<&[usize]>,
) -> Result<(f64, AttentionMatrix)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let pass = forced_pass(&mut tape, cfg, &p, src, tgt, candidates)?;
    Ok((tape.value(pass.loss).item().as_f64(), attention_matrix(&tape, &pass.alphas, src.len())))
}

/// NLL plus gradients for every tensor, in [`Seq2SeqParams::flat`] order.
pub fn loss_and_grads<T: Scalar>(
    params: &Seq2SeqParams<Tensor<T>>,
    cfg: &ModelConfig,
    src: &[usize],
    tgt: &[usize],
    candidates: Option<&[usize]>,
) -> Result<(f64, Seq2SeqParams<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let pass = forced_pass(&mut tape, cfg, &p, src, tgt, candidates)?;
    let grads = tape.backward(pass.loss)?;
    let mut ids = p.flat().into_iter();
    let g = params.map(&mut |t| grads.get_or_zeros(*ids.next().unwrap(), t.shape()));
    Ok((tape.value(pass.loss).item().as_f64(), g))
}

/// Links `(source j, target t)` from the argmax of each attention row; the
/// sentence-end row is left out.
pub fn forced_decode_alignments<T: Scalar>(
    params: &Seq2SeqParams<Tensor<T>>,
    cfg: &ModelConfig,
    src: &[usize],
    tgt: &[usize],
) -> Result<AlignmentSet> {
    let (_, attn) = encode_decode_loss(params, cfg, src, tgt, None)?;
    Ok(attn.argmax_links(tgt.len() - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::corpus::UNK_ID;

    fn tiny(kind: AttentionKind) -> ModelConfig {
        let mut c = ModelConfig::new(7, 8, 4, 6, kind);
        c.attention.coverage_dim = 3;
        c.attention.local_window = 2;
        c
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny(AttentionKind::Temporal);
        let init = |seed| Seq2SeqParams::<Tensor<f64>>::init(&cfg, seed).unwrap();
        assert_eq!(init(3), init(3));
        assert_ne!(init(3), init(4));
    }

    #[test]
    fn shape_audit() {
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            let p = Seq2SeqParams::<Tensor<f32>>::init(&cfg, 1).unwrap();
            p.validate(&cfg).unwrap();
            let shapes: BTreeMap<String, Vec<usize>> = {
                let mut m = BTreeMap::new();
                p.visit(&mut |n, t| {
                    m.insert(n, t.shape().to_vec());
                });
                m
            };
            assert_eq!(shapes["src_embed"], vec![7, 4]);
            assert_eq!(shapes["tgt_embed"], vec![8, 4]);
            assert_eq!(shapes["enc.fwd.W_z"], vec![4, 6]);
            assert_eq!(shapes["dec.W_z"], vec![4 + 12, 6]);
            assert_eq!(shapes["attn.U_a"], vec![12, 6]);
            assert_eq!(shapes["readout.W_o"], vec![8, 6]);
            assert_eq!(shapes["W_init"], vec![6, 6]);
            assert_eq!(shapes.contains_key("attn.cov.U_c"), kind == AttentionKind::Coverage);
            assert_eq!(shapes.contains_key("attn.local.W_p"), kind == AttentionKind::Local);
            assert_eq!(shapes.len(), p.names().len());
        }
        let cfg = tiny(AttentionKind::Global);
        let mut p = Seq2SeqParams::<Tensor<f32>>::init(&cfg, 1).unwrap();
        p.w_init = Tensor::zeros(&[5, 6]);
        assert!(p.validate(&cfg).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = tiny(AttentionKind::Temporal);
        cfg.attention.history_window = Some(3);
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let cfg = tiny(AttentionKind::Local);
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("emb=3").is_err());
    }

    #[test]
    fn zero_params_give_uniform_nll() {
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            let p = Seq2SeqParams::<Tensor<f64>>::zeros(&cfg).unwrap();
            let tgt = [4, 5, 6, EOS_ID];
            let (nll, attn) = encode_decode_loss(&p, &cfg, &[4, 5, 6], &tgt, None).unwrap();
            assert!((nll - 4.0 * (8f64).ln()).abs() < 1e-12, "{kind}: {nll}");
            assert_eq!(attn.len(), 4);
            let cand = [EOS_ID, UNK_ID, 4, 5, 6];
            let (nll, _) = encode_decode_loss(&p, &cfg, &[4, 5, 6], &tgt, Some(&cand)).unwrap();
            assert!((nll - 4.0 * (5f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            let p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, 9).unwrap();
            let (_, attn) = encode_decode_loss(&p, &cfg, &[1, 4, 5, 6, 3], &[4, 4, 7, 5, EOS_ID], None).unwrap();
            for r in &attn.rows {
                assert_eq!(r.len(), 5);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let cfg = tiny(AttentionKind::Global);
        let p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, 1).unwrap();
        let r = encode_decode_loss(&p, &cfg, &[4], &[6, EOS_ID], Some(&[EOS_ID, UNK_ID, 5]));
        assert!(matches!(r, Err(Error::Unreachable { id: 6 })));
        assert!(encode_decode_loss(&p, &cfg, &[4], &[6], None).is_err());
        assert!(matches!(
            encode_decode_loss(&p, &cfg, &[40], &[EOS_ID], None),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn full_candidate_list_equals_no_restriction() {
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            let p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, 2).unwrap();
            let all: Vec<usize> = (0..cfg.tgt_vocab).collect();
            let a = encode_decode_loss(&p, &cfg, &[4, 5], &[6, 7, EOS_ID], None).unwrap();
            let b = encode_decode_loss(&p, &cfg, &[4, 5], &[6, 7, EOS_ID], Some(&all)).unwrap();
            assert_eq!(a, b);
            let sub = [EOS_ID, UNK_ID, 6, 7];
            let c = encode_decode_loss(&p, &cfg, &[4, 5], &[6, 7, EOS_ID], Some(&sub)).unwrap();
            assert!(c.0 < a.0);
            assert_eq!(c.1, a.1);
        }
    }

    #[test]
    fn sentences_are_independent() {
        // the same sentence gives the same attention whatever was decoded before
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            let p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, 5).unwrap();
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let first = forced_pass(&mut tape, &cfg, &b, &[4, 5, 6], &[5, 6, EOS_ID], None).unwrap();
            let _ = forced_pass(&mut tape, &cfg, &b, &[6, 6], &[4, 4, 4, EOS_ID], None).unwrap();
            let again = forced_pass(&mut tape, &cfg, &b, &[4, 5, 6], &[5, 6, EOS_ID], None).unwrap();
            for (x, y) in first.alphas.iter().zip(&again.alphas) {
                assert_eq!(tape.value(*x), tape.value(*y));
            }
        }
    }

    #[test]
    fn forced_alignment_rules() {
        let cfg = tiny(AttentionKind::Global);
        let p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, 1).unwrap();
        let links = forced_decode_alignments(&p, &cfg, &[4], &[5, EOS_ID]).unwrap();
        assert_eq!(links, [(0, 0)].into());
        let z = Seq2SeqParams::<Tensor<f64>>::zeros(&cfg).unwrap();
        let links = forced_decode_alignments(&z, &cfg, &[4, 5, 6], &[5, 6, EOS_ID]).unwrap();
        assert_eq!(links, [(0, 0), (0, 1)].into());
    }

    #[test]
    fn one_sgd_step_reduces_nll() {
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            for seed in 0..5 {
                let mut p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, seed).unwrap();
                let (src, tgt) = ([4, 6, 5], [7, 4, EOS_ID]);
                let (before, g) = loss_and_grads(&p, &cfg, &src, &tgt, None).unwrap();
                for (w, d) in p.flat_mut().into_iter().zip(g.flat()) {
                    for (x, y) in w.data_mut().iter_mut().zip(d.data()) {
                        *x -= 0.1 * y;
                    }
                }
                let (after, _) = encode_decode_loss(&p, &cfg, &src, &tgt, None).unwrap();
                assert!(after < before, "{kind} seed {seed}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn full_model_gradients() {
        for kind in AttentionKind::ALL {
            let cfg = tiny(kind);
            let p = Seq2SeqParams::<Tensor<f64>>::init(&cfg, 11).unwrap();
            // weights near ±1 keep every gradient well above finite-difference noise
            let p = p.map(&mut |t| t.map(|v| v * 15.0));
            let flat: Vec<Tensor<f64>> = p.flat().into_iter().cloned().collect();
            let shape_src = p.clone();
            let report = grad_check(
                |tape, ids| {
                    let mut it = ids.iter();
                    let bound = shape_src.map(&mut |_| *it.next().unwrap());
                    Ok(forced_pass(tape, &cfg, &bound, &[4, 6, 5], &[7, 4, EOS_ID], Some(&[0, 2, 3, 4, 7]))?.loss)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
        }
    }

    #[test]
    fn flat_views_agree() {
        let cfg = tiny(AttentionKind::Coverage);
        let mut p = Seq2SeqParams::<Tensor<f32>>::init(&cfg, 1).unwrap();
        let n = p.flat().len();
        assert_eq!(p.flat_mut().len(), n);
        assert_eq!(p.names().len(), n);
        let mut names = p.names();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
