//! Attention scoring and the four weighting schemes.
//!
//! * **global**: `α = softmax(e)`.
//! * **temporal**: every raw score is divided by the accumulated exponentiated
//!   scores the same source position received at earlier decoder steps,
//!   `b_{t,j} = exp(e_{t,j}) / Σ_{k<t} exp(e_{k,j})` (plain `exp(e_{1,j})` at
//!   the first step), then normalized over the source. The running sum is
//!   kept in the log domain, `L_j = logsumexp_{k<t} e_{k,j}`, so
//!   `α_t = softmax(e_t − L)`. The history lives for one sentence only.
//! * **coverage**: a per-position coverage vector, updated by a small GRU from
//!   the attention weight and the emitted word, is added to the scoring MLP.
//! * **local**: the softmax is reweighted by a Gaussian window centred on a
//!   predicted source position.
//!
//! The free functions ([`attend_global`], [`attend_temporal`], ...) work on
//! plain vectors; [`attend_step`] records the same computation on a tape for
//! training and decoding. Both routes share the softmax/logsumexp kernels, so
//! identical inputs give bit-identical weights.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{gru_cell, uniform, GruParams};
use crate::tensor::{kernels, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Global,
    Temporal,
    Coverage,
    Local,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Global,
        AttentionKind::Temporal,
        AttentionKind::Coverage,
        AttentionKind::Local,
    ];
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Global => "global",
            AttentionKind::Temporal => "temporal",
            AttentionKind::Coverage => "coverage",
            AttentionKind::Local => "local",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttentionKind::Global),
            "temporal" => Ok(AttentionKind::Temporal),
            "coverage" => Ok(AttentionKind::Coverage),
            "local" => Ok(AttentionKind::Local),
            other => Err(Error::Config(format!(
                "unknown attention variant '{other}' (expected global|temporal|coverage|local)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Temporal history limited to the last `n` steps; `None` keeps all.
    pub history_window: Option<usize>,
    /// Coverage vector size.
    pub coverage_dim: usize,
    /// Local attention half-width `D`.
    pub local_window: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Global,
            history_window: None,
            coverage_dim: 16,
            local_window: 10,
        }
    }
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind) -> Self {
        AttentionConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_window == Some(0) {
            return Err(Error::Config("history_window must be at least 1".into()));
        }
        if self.coverage_dim == 0 {
            return Err(Error::Config("coverage_dim must be at least 1".into()));
        }
        if self.local_window == 0 {
            return Err(Error::Config("local_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-position coverage GRU and its projection into the scoring MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageParams<P> {
    /// `coverage_dim × att`.
    pub u_c: P,
    /// Input is `[α_j ; y_emb]`, hidden is `coverage_dim`.
    pub gru: GruParams<P>,
}

/// Position predictor `p_t = l · σ(v_pᵀ tanh(W_p s))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttnParams<P> {
    /// `state × att`.
    pub w_p: P,
    /// `att × 1`.
    pub v_p: P,
}

/// Additive scoring MLP `e_j = v_aᵀ tanh(W_a s + U_a h_j)` plus the
/// variant-specific extras.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    /// `state × att`.
    pub w_a: P,
    /// `annotation × att`.
    pub u_a: P,
    /// `att × 1`.
    pub v_a: P,
    pub coverage: Option<CoverageParams<P>>,
    pub local: Option<LocalAttnParams<P>>,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            w_a: f(&self.w_a),
            u_a: f(&self.u_a),
            v_a: f(&self.v_a),
            coverage: self.coverage.as_ref().map(|c| CoverageParams {
                u_c: f(&c.u_c),
                gru: c.gru.map(f),
            }),
            local: self.local.as_ref().map(|l| LocalAttnParams {
                w_p: f(&l.w_p),
                v_p: f(&l.v_p),
            }),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.W_a"), &self.w_a);
        f(format!("{prefix}.U_a"), &self.u_a);
        f(format!("{prefix}.v_a"), &self.v_a);
        if let Some(c) = &self.coverage {
            f(format!("{prefix}.cov.U_c"), &c.u_c);
            c.gru.visit(&format!("{prefix}.cov.gru"), f);
        }
        if let Some(l) = &self.local {
            f(format!("{prefix}.local.W_p"), &l.w_p);
            f(format!("{prefix}.local.v_p"), &l.v_p);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        f(format!("{prefix}.W_a"), &mut self.w_a);
        f(format!("{prefix}.U_a"), &mut self.u_a);
        f(format!("{prefix}.v_a"), &mut self.v_a);
        if let Some(c) = &mut self.coverage {
            f(format!("{prefix}.cov.U_c"), &mut c.u_c);
            c.gru.visit_mut(&format!("{prefix}.cov.gru"), f);
        }
        if let Some(l) = &mut self.local {
            f(format!("{prefix}.local.W_p"), &mut l.w_p);
            f(format!("{prefix}.local.v_p"), &mut l.v_p);
        }
    }
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    pub fn init<R: Rng>(
        cfg: &AttentionConfig,
        state: usize,
        annotation: usize,
        att: usize,
        emb: usize,
        rng: &mut R,
    ) -> Self {
        let w_a = uniform(rng, &[state, att]);
        let u_a = uniform(rng, &[annotation, att]);
        let v_a = uniform(rng, &[att, 1]);
        let coverage = (cfg.kind == AttentionKind::Coverage).then(|| CoverageParams {
            u_c: uniform(rng, &[cfg.coverage_dim, att]),
            gru: GruParams::init(1 + emb, cfg.coverage_dim, rng),
        });
        let local = (cfg.kind == AttentionKind::Local).then(|| LocalAttnParams {
            w_p: uniform(rng, &[state, att]),
            v_p: uniform(rng, &[att, 1]),
        });
        AttentionParams {
            w_a,
            u_a,
            v_a,
            coverage,
            local,
        }
    }
}

// ---------------------------------------------------------------------------
// Plain-vector operations
// ---------------------------------------------------------------------------

/// Raw score of one annotation: `v_aᵀ tanh(s W_a + h U_a)`.
pub fn score<T: Scalar>(
    s_prev: &Tensor<T>,
    h_j: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
) -> Result<T> {
    let mut tape = Tape::new();
    let (s, h) = (tape.leaf(s_prev.clone()), tape.leaf(h_j.clone()));
    let (w, u, v) = (
        tape.leaf(p.w_a.clone()),
        tape.leaf(p.u_a.clone()),
        tape.leaf(p.v_a.clone()),
    );
    let a = tape.matmul(s, w)?;
    let b = tape.matmul(h, u)?;
    let x = tape.add(a, b)?;
    let x = tape.tanh(x)?;
    let e = tape.matmul(x, v)?;
    Ok(tape.value(e).item())
}

/// `α = softmax(e)`.
pub fn attend_global<T: Scalar>(e: &[T]) -> Vec<T> {
    assert!(!e.is_empty(), "attention over an empty source");
    kernels::softmax(e)
}

/// Log-domain running sum of past exponentiated scores, one per source
/// position. Fresh for every sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalHistory<T> {
    len: usize,
    /// Decoder step the next call scores (1-based).
    t: usize,
    /// `L_j = logsumexp_{k<t} e_{k,j}`; `None` before the first step.
    log_hist: Option<Vec<T>>,
    window: Option<usize>,
    recent: VecDeque<Vec<T>>,
}

/// Fresh history for a source of length `l`.
pub fn reset_history<T: Scalar>(l: usize) -> TemporalHistory<T> {
    TemporalHistory::new(l, None)
}

impl<T: Scalar> TemporalHistory<T> {
    /// `window = Some(n)` keeps only the last `n` steps.
    pub fn new(l: usize, window: Option<usize>) -> Self {
        assert!(l >= 1, "source length must be at least 1");
        assert!(window != Some(0), "history window must be at least 1");
        TemporalHistory {
            len: l,
            t: 1,
            log_hist: None,
            window,
            recent: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.log_hist.is_none()
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn log_hist(&self) -> Option<&[T]> {
        self.log_hist.as_deref()
    }

    /// Scores one decoder step and folds `e` into the history.
    pub fn step(&mut self, e: &[T]) -> Result<Vec<T>> {
        if e.len() != self.len {
            return Err(Error::dim(
                "attend_temporal",
                format!("{} scores for a source of length {}", e.len(), self.len),
            ));
        }
        let alpha = match &self.log_hist {
            None => kernels::softmax(e),
            Some(hist) => {
                let modulated: Vec<T> = e.iter().zip(hist).map(|(&x, &h)| x - h).collect();
                kernels::softmax(&modulated)
            }
        };
        self.log_hist = Some(match self.window {
            None => match &self.log_hist {
                None => e.to_vec(),
                Some(hist) => hist
                    .iter()
                    .zip(e)
                    .map(|(&h, &x)| kernels::log_add_exp(h, x))
                    .collect(),
            },
            Some(n) => {
                self.recent.push_back(e.to_vec());
                while self.recent.len() > n {
                    self.recent.pop_front();
                }
                (0..self.len)
                    .map(|j| {
                        let col: Vec<T> = self.recent.iter().map(|row| row[j]).collect();
                        kernels::logsumexp(&col)
                    })
                    .collect()
            }
        });
        self.t += 1;
        Ok(alpha)
    }
}

/// Temporal attention for one step: returns the weights and the history
/// advanced past this step.
pub fn attend_temporal<T: Scalar>(
    e: &[T],
    hist: &TemporalHistory<T>,
) -> Result<(Vec<T>, TemporalHistory<T>)> {
    let mut next = hist.clone();
    let alpha = next.step(e)?;
    Ok((alpha, next))
}

/// Predicted window centre `p_t = l · σ(v_pᵀ tanh(s W_p))`.
pub fn predicted_position<T: Scalar>(
    s_t: &Tensor<T>,
    p: &LocalAttnParams<Tensor<T>>,
    l: usize,
) -> Result<T> {
    let mut tape = Tape::new();
    let s = tape.leaf(s_t.clone());
    let lp = LocalAttnParams {
        w_p: tape.leaf(p.w_p.clone()),
        v_p: tape.leaf(p.v_p.clone()),
    };
    let pos = position_node(&mut tape, s, &lp, l)?;
    Ok(tape.value(pos).item())
}

/// Softmax of `e` reweighted by `exp(−(j − p_t)² / 2σ²)` with `σ = D/2`,
/// renormalized. Source positions are 0-based.
pub fn local_weights<T: Scalar>(e: &[T], p_t: T, window: usize) -> Vec<T> {
    assert!(window >= 1);
    let inv = T::from_f64(local_precision(window));
    let shifted: Vec<T> = e
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let d = T::from_f64(j as f64) - p_t;
            x - inv * d * d
        })
        .collect();
    kernels::softmax(&shifted)
}

/// Local attention for decoder state `s_t`.
pub fn attend_local<T: Scalar>(
    e: &[T],
    s_t: &Tensor<T>,
    p: &LocalAttnParams<Tensor<T>>,
    window: usize,
    l: usize,
) -> Result<Vec<T>> {
    if e.len() != l {
        return Err(Error::dim("attend_local", format!("{} scores, l = {l}", e.len())));
    }
    let pt = predicted_position(s_t, p, l)?;
    Ok(local_weights(e, pt, window))
}

/// `1 / 2σ²` for `σ = D/2`.
fn local_precision(window: usize) -> f64 {
    let sigma = window as f64 / 2.0;
    1.0 / (2.0 * sigma * sigma)
}

/// Coverage vectors, one row per source position.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageState<T> {
    /// `l × coverage_dim`.
    pub c: Tensor<T>,
}

impl<T: Scalar> CoverageState<T> {
    pub fn zeros(l: usize, dim: usize) -> Self {
        CoverageState {
            c: Tensor::zeros(&[l, dim]),
        }
    }
}

/// `c'_j = GRU([α_j ; y_emb], c_j)` for every position `j`.
pub fn coverage_update<T: Scalar>(
    cov: &CoverageState<T>,
    alpha: &[T],
    y_emb: &Tensor<T>,
    p: &CoverageParams<Tensor<T>>,
) -> Result<CoverageState<T>> {
    let l = cov.c.rows();
    if alpha.len() != l {
        return Err(Error::dim(
            "coverage_update",
            format!("{} weights for {l} coverage rows", alpha.len()),
        ));
    }
    let mut tape = Tape::new();
    let c = tape.leaf(cov.c.clone());
    let a = tape.leaf(Tensor::row(alpha.to_vec()));
    let y = tape.leaf(y_emb.clone());
    let gru = p.gru.map(&mut |t| tape.leaf(t.clone()));
    let out = coverage_node(&mut tape, c, a, y, &gru)?;
    Ok(CoverageState {
        c: tape.value(out).clone(),
    })
}

// ---------------------------------------------------------------------------
// Tape-level operations
// ---------------------------------------------------------------------------

/// Per-sentence encoder output prepared for attention.
#[derive(Clone, Debug)]
pub struct SourceMemory {
    /// `l × annotation`.
    pub annotations: NodeId,
    /// `l × att`, the source half of the scoring MLP (`H U_a`).
    pub keys: NodeId,
    /// `1 × l` positions `0..l` (local attention).
    positions: Option<NodeId>,
    /// `l × 1` of ones (coverage).
    ones: Option<NodeId>,
    pub len: usize,
}

impl SourceMemory {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        cfg: &AttentionConfig,
        p: &AttentionParams<NodeId>,
        annotations: NodeId,
    ) -> Result<Self> {
        let len = tape.value(annotations).rows();
        let keys = tape.matmul(annotations, p.u_a)?;
        let positions = (cfg.kind == AttentionKind::Local).then(|| {
            tape.leaf(Tensor::row((0..len).map(|j| T::from_f64(j as f64)).collect()))
        });
        let ones = (cfg.kind == AttentionKind::Coverage)
            .then(|| tape.leaf(Tensor::full(&[len, 1], T::one())));
        Ok(SourceMemory {
            annotations,
            keys,
            positions,
            ones,
            len,
        })
    }
}

/// Tape-resident temporal history: `l × 1` log-domain column plus the recent
/// score columns when windowed.
#[derive(Clone, Debug)]
pub struct HistoryNodes {
    pub t: usize,
    pub log_hist: Option<NodeId>,
    recent: VecDeque<NodeId>,
    window: Option<usize>,
}

/// Mutable per-sentence attention state. Cloning is cheap (node ids), which
/// lets every beam hypothesis carry its own copy.
#[derive(Clone, Debug)]
pub enum AttnState {
    Stateless,
    Temporal(HistoryNodes),
    Coverage(NodeId),
}

impl AttnState {
    /// Fresh state at the start of a sentence.
    pub fn reset<T: Scalar>(tape: &mut Tape<T>, cfg: &AttentionConfig, mem: &SourceMemory) -> Self {
        match cfg.kind {
            AttentionKind::Global | AttentionKind::Local => AttnState::Stateless,
            AttentionKind::Temporal => AttnState::Temporal(HistoryNodes {
                t: 1,
                log_hist: None,
                recent: VecDeque::new(),
                window: cfg.history_window,
            }),
            AttentionKind::Coverage => {
                AttnState::Coverage(tape.leaf(Tensor::zeros(&[mem.len, cfg.coverage_dim])))
            }
        }
    }
}

/// Nodes produced by one attention step.
#[derive(Clone, Copy, Debug)]
pub struct AttnStep {
    /// `1 × l` raw scores.
    pub scores: NodeId,
    /// `1 × l` weights.
    pub alpha: NodeId,
    /// `1 × annotation` context vector.
    pub context: NodeId,
}

/// Scores all source positions against `s_prev`, applies the configured
/// weighting and forms the context. Temporal history is advanced here;
/// coverage is advanced by [`advance_coverage`] once the emitted word is known.
pub fn attend_step<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &AttentionConfig,
    p: &AttentionParams<NodeId>,
    mem: &SourceMemory,
    state: &mut AttnState,
    s_prev: NodeId,
) -> Result<AttnStep> {
    let query = tape.matmul(s_prev, p.w_a)?;
    let mut pre = tape.add(mem.keys, query)?;
    if let (AttnState::Coverage(c), Some(cp)) = (&*state, &p.coverage) {
        let cov = tape.matmul(*c, cp.u_c)?;
        pre = tape.add(pre, cov)?;
    }
    let hidden = tape.tanh(pre)?;
    let e_col = tape.matmul(hidden, p.v_a)?;
    let scores = tape.transpose(e_col)?;

    let alpha = match (cfg.kind, &mut *state) {
        (AttentionKind::Temporal, AttnState::Temporal(h)) => {
            let alpha = match h.log_hist {
                None => tape.softmax_row(scores)?,
                Some(lh) => {
                    let lh_row = tape.transpose(lh)?;
                    let modulated = tape.sub(scores, lh_row)?;
                    tape.softmax_row(modulated)?
                }
            };
            h.log_hist = Some(match h.window {
                None => match h.log_hist {
                    None => e_col,
                    Some(lh) => {
                        let pair = tape.concat(&[lh, e_col], 1)?;
                        tape.logsumexp_row(pair)?
                    }
                },
                Some(n) => {
                    h.recent.push_back(e_col);
                    while h.recent.len() > n {
                        h.recent.pop_front();
                    }
                    let cols: Vec<NodeId> = h.recent.iter().copied().collect();
                    let block = tape.concat(&cols, 1)?;
                    tape.logsumexp_row(block)?
                }
            });
            h.t += 1;
            alpha
        }
        (AttentionKind::Local, _) => {
            let lp = p
                .local
                .as_ref()
                .ok_or_else(|| Error::Config("local attention parameters missing".into()))?;
            let positions = mem.positions.expect("local memory has positions");
            let centre = position_node(tape, s_prev, lp, mem.len)?;
            let d = tape.sub(positions, centre)?;
            let d2 = tape.mul(d, d)?;
            let penalty = tape.scale(d2, -local_precision(cfg.local_window))?;
            let shifted = tape.add(scores, penalty)?;
            tape.softmax_row(shifted)?
        }
        (AttentionKind::Global, _) | (AttentionKind::Coverage, AttnState::Coverage(_)) => {
            tape.softmax_row(scores)?
        }
        (kind, _) => {
            return Err(Error::Contract(format!(
                "attention state does not match variant {kind}"
            )))
        }
    };
    let context = tape.matmul(alpha, mem.annotations)?;
    Ok(AttnStep {
        scores,
        alpha,
        context,
    })
}

/// Advances coverage with this step's weights and the emitted word embedding.
/// No-op for other variants.
pub fn advance_coverage<T: Scalar>(
    tape: &mut Tape<T>,
    p: &AttentionParams<NodeId>,
    mem: &SourceMemory,
    state: &mut AttnState,
    alpha: NodeId,
    y_emb: NodeId,
) -> Result<()> {
    if let AttnState::Coverage(c) = state {
        let cp = p
            .coverage
            .as_ref()
            .ok_or_else(|| Error::Config("coverage parameters missing".into()))?;
        let ones = mem.ones.expect("coverage memory has ones");
        let y_rows = tape.matmul(ones, y_emb)?;
        let alpha_col = tape.transpose(alpha)?;
        let input = tape.concat(&[alpha_col, y_rows], 1)?;
        *c = gru_cell(tape, input, *c, &cp.gru)?;
    }
    Ok(())
}

fn coverage_node<T: Scalar>(
    tape: &mut Tape<T>,
    c: NodeId,
    alpha_row: NodeId,
    y_emb: NodeId,
    gru: &GruParams<NodeId>,
) -> Result<NodeId> {
    let l = tape.value(c).rows();
    let ones = tape.leaf(Tensor::full(&[l, 1], T::one()));
    let y_rows = tape.matmul(ones, y_emb)?;
    let alpha_col = tape.transpose(alpha_row)?;
    let input = tape.concat(&[alpha_col, y_rows], 1)?;
    gru_cell(tape, input, c, gru)
}

fn position_node<T: Scalar>(
    tape: &mut Tape<T>,
    s: NodeId,
    p: &LocalAttnParams<NodeId>,
    l: usize,
) -> Result<NodeId> {
    let h = tape.matmul(s, p.w_p)?;
    let h = tape.tanh(h)?;
    let z = tape.matmul(h, p.v_p)?;
    let z = tape.sigmoid(z)?;
    tape.scale(z, l as f64)
}
