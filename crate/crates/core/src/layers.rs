//! Embeddings, GRU cell, bidirectional encoder and the decoder readout.
//!
//! Parameter groups are generic over the slot type `P`: `Tensor<T>` for the
//! stored weights and `NodeId` once they have been placed on a tape. Vectors
//! are rows, so a layer computes `x · W` with `W` of shape `in × out`.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const INIT_SCALE: f64 = 0.08;

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-INIT_SCALE..INIT_SCALE)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Update gate (`z`), reset gate (`r`) and candidate (`h`) weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<P> {
    pub w_z: P,
    pub u_z: P,
    pub b_z: P,
    pub w_r: P,
    pub u_r: P,
    pub b_r: P,
    pub w_h: P,
    pub u_h: P,
    pub b_h: P,
}

impl<P> GruParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> GruParams<Q> {
        GruParams {
            w_z: f(&self.w_z),
            u_z: f(&self.u_z),
            b_z: f(&self.b_z),
            w_r: f(&self.w_r),
            u_r: f(&self.u_r),
            b_r: f(&self.b_r),
            w_h: f(&self.w_h),
            u_h: f(&self.u_h),
            b_h: f(&self.b_h),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        for (name, p) in [
            ("W_z", &self.w_z),
            ("U_z", &self.u_z),
            ("b_z", &self.b_z),
            ("W_r", &self.w_r),
            ("U_r", &self.u_r),
            ("b_r", &self.b_r),
            ("W_h", &self.w_h),
            ("U_h", &self.u_h),
            ("b_h", &self.b_h),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        for (name, p) in [
            ("W_z", &mut self.w_z),
            ("U_z", &mut self.u_z),
            ("b_z", &mut self.b_z),
            ("W_r", &mut self.w_r),
            ("U_r", &mut self.u_r),
            ("b_r", &mut self.b_r),
            ("W_h", &mut self.w_h),
            ("U_h", &mut self.u_h),
            ("b_h", &mut self.b_h),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }
}

impl<T: Scalar> GruParams<Tensor<T>> {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            w_z: uniform(rng, &[input, hidden]),
            u_z: uniform(rng, &[hidden, hidden]),
            b_z: uniform(rng, &[1, hidden]),
            w_r: uniform(rng, &[input, hidden]),
            u_r: uniform(rng, &[hidden, hidden]),
            b_r: uniform(rng, &[1, hidden]),
            w_h: uniform(rng, &[input, hidden]),
            u_h: uniform(rng, &[hidden, hidden]),
            b_h: uniform(rng, &[1, hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(&[input, hidden]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[1, hidden]),
            w_r: Tensor::zeros(&[input, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            b_r: Tensor::zeros(&[1, hidden]),
            w_h: Tensor::zeros(&[input, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_h: Tensor::zeros(&[1, hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.rows()
    }

    /// Checks that all nine tensors agree on input and hidden sizes.
    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_dim(), self.hidden_dim());
        let expect = [
            (&self.w_z, [i, h]),
            (&self.u_z, [h, h]),
            (&self.b_z, [1, h]),
            (&self.w_r, [i, h]),
            (&self.u_r, [h, h]),
            (&self.b_r, [1, h]),
            (&self.w_h, [i, h]),
            (&self.u_h, [h, h]),
            (&self.b_h, [1, h]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::dim(
                    "gru",
                    format!("expected {shape:?}, found {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

pub fn bind<T: Scalar>(tape: &mut Tape<T>, t: &Tensor<T>) -> NodeId {
    tape.leaf(t.clone())
}

/// One GRU step over a batch of rows: `x` is `m × in`, `h_prev` is `m × hidden`.
///
/// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    h_prev: NodeId,
    p: &GruParams<NodeId>,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape<T>, w, u, b, h| -> Result<NodeId> {
        let a = tape.matmul(x, w)?;
        let c = tape.matmul(h, u)?;
        let s = tape.add(a, c)?;
        tape.add(s, b)
    };
    let z = gate(tape, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = tape.tanh(cand)?;
    // (1 − z)·h + z·h̃ == h + z·(h̃ − h)
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}

/// Evaluates [`gru_cell`] on plain tensors.
pub fn gru_cell_value<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    p: &GruParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pb = p.map(&mut |t| tape.leaf(t.clone()));
    let (xi, hi) = (tape.leaf(x.clone()), tape.leaf(h_prev.clone()));
    let out = gru_cell(&mut tape, xi, hi, &pb)?;
    Ok(tape.value(out).clone())
}

/// Source annotations `h_j = [forward_j ; backward_j]`.
#[derive(Clone, Debug)]
pub struct EncoderAnnotations {
    /// `l × 2·hidden`, row `j` is the annotation of source position `j`.
    pub annotations: NodeId,
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
    pub len: usize,
}

/// Runs the forward GRU left to right and the backward GRU right to left,
/// both from zero states, and stacks `[fwd_j ; bwd_j]` row by row.
pub fn bidir_encode<T: Scalar>(
    tape: &mut Tape<T>,
    src_ids: &[usize],
    embed: NodeId,
    fwd: &GruParams<NodeId>,
    bwd: &GruParams<NodeId>,
) -> Result<EncoderAnnotations> {
    if src_ids.is_empty() {
        return Err(Error::Contract("cannot encode an empty source sentence".into()));
    }
    let hidden = tape.value(fwd.u_z).rows();
    let l = src_ids.len();
    let emb = tape.embedding(embed, src_ids)?;
    let xs: Vec<NodeId> = (0..l)
        .map(|j| tape.slice(emb, 0, j, j + 1))
        .collect::<Result<_>>()?;
    let zero = tape.leaf(Tensor::zeros(&[1, hidden]));

    let mut forward = Vec::with_capacity(l);
    let mut h = zero;
    for &x in &xs {
        h = gru_cell(tape, x, h, fwd)?;
        forward.push(h);
    }
    let mut backward = vec![zero; l];
    let mut h = zero;
    for j in (0..l).rev() {
        h = gru_cell(tape, xs[j], h, bwd)?;
        backward[j] = h;
    }
    let rows: Vec<NodeId> = (0..l)
        .map(|j| tape.concat(&[forward[j], backward[j]], 1))
        .collect::<Result<_>>()?;
    let annotations = tape.concat(&rows, 0)?;
    Ok(EncoderAnnotations {
        annotations,
        forward,
        backward,
        len: l,
    })
}

/// Deep output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams<P> {
    pub w_s: P,
    pub w_y: P,
    pub w_c: P,
    pub b: P,
    /// `V × readout`, one row per output word.
    pub w_o: P,
    /// `V × 1`.
    pub b_o: P,
}

impl<P> ReadoutParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ReadoutParams<Q> {
        ReadoutParams {
            w_s: f(&self.w_s),
            w_y: f(&self.w_y),
            w_c: f(&self.w_c),
            b: f(&self.b),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        for (name, p) in [
            ("W_s", &self.w_s),
            ("W_y", &self.w_y),
            ("W_c", &self.w_c),
            ("b", &self.b),
            ("W_o", &self.w_o),
            ("b_o", &self.b_o),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        for (name, p) in [
            ("W_s", &mut self.w_s),
            ("W_y", &mut self.w_y),
            ("W_c", &mut self.w_c),
            ("b", &mut self.b),
            ("W_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }
}

impl<T: Scalar> ReadoutParams<Tensor<T>> {
    pub fn init<R: Rng>(
        state: usize,
        emb: usize,
        ctx: usize,
        readout: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        ReadoutParams {
            w_s: uniform(rng, &[state, readout]),
            w_y: uniform(rng, &[emb, readout]),
            w_c: uniform(rng, &[ctx, readout]),
            b: uniform(rng, &[1, readout]),
            w_o: uniform(rng, &[vocab, readout]),
            b_o: uniform(rng, &[vocab, 1]),
        }
    }
}

/// Output projection prepared once per sentence, optionally restricted to a
/// candidate subset of the output vocabulary.
#[derive(Clone, Debug)]
pub struct OutputProjection {
    /// `readout × C`.
    pub weight_t: NodeId,
    /// `1 × C`.
    pub bias_t: NodeId,
    /// Vocabulary id of each output column; `None` means the identity.
    pub ids: Option<Vec<usize>>,
}

impl OutputProjection {
    pub fn prepare<T: Scalar>(
        tape: &mut Tape<T>,
        p: &ReadoutParams<NodeId>,
        candidates: Option<&[usize]>,
    ) -> Result<Self> {
        let (w, b) = match candidates {
            Some(ids) => (tape.embedding(p.w_o, ids)?, tape.embedding(p.b_o, ids)?),
            None => (p.w_o, p.b_o),
        };
        Ok(OutputProjection {
            weight_t: tape.transpose(w)?,
            bias_t: tape.transpose(b)?,
            ids: candidates.map(<[usize]>::to_vec),
        })
    }

    pub fn width<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.value(self.bias_t).cols()
    }

    /// Vocabulary id of output column `col`.
    pub fn vocab_id(&self, col: usize) -> usize {
        self.ids.as_ref().map_or(col, |ids| ids[col])
    }

    /// Output column of vocabulary id `id`, if admitted.
    pub fn column_of(&self, id: usize) -> Option<usize> {
        match &self.ids {
            None => Some(id),
            Some(ids) => ids.iter().position(|&x| x == id),
        }
    }
}

/// `logits = tanh(s W_s + y W_y + c W_c + b) · W_oᵀ + b_oᵀ`.
pub fn readout<T: Scalar>(
    tape: &mut Tape<T>,
    s: NodeId,
    y_prev_emb: NodeId,
    ctx: NodeId,
    p: &ReadoutParams<NodeId>,
    out: &OutputProjection,
) -> Result<NodeId> {
    let a = tape.matmul(s, p.w_s)?;
    let b = tape.matmul(y_prev_emb, p.w_y)?;
    let c = tape.matmul(ctx, p.w_c)?;
    let h = tape.add(a, b)?;
    let h = tape.add(h, c)?;
    let h = tape.add(h, p.b)?;
    let h = tape.tanh(h)?;
    let logits = tape.matmul(h, out.weight_t)?;
    tape.add(logits, out.bias_t)
}
