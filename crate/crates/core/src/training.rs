//! Optimizers, batching and the epoch loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::corpus::Vocabulary;
use crate::decoding::{self, DecodeOptions};
use crate::error::{Error, Result};
use crate::lexicon::{CandidateList, CandidateSource};
use crate::metrics;
use crate::rng;
use crate::seq2seq::{encode_decode_loss, loss_and_grads, ModelConfig, Seq2SeqParams};
use crate::tensor::{Scalar, Tensor};

pub type Pair = (Vec<usize>, Vec<usize>);

/// Global L2 norm over all gradient tensors.
pub fn global_norm<T: Scalar>(grads: &[&Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt()
}

/// Scale applied to the gradients, or `None` when they are not finite.
fn clip_factor<T: Scalar>(grads: &[&Tensor<T>], clip_norm: Option<f64>) -> Option<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return None;
    }
    Some(match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    })
}

/// `p ← p − lr·g` after global-norm clipping. Returns `false` and leaves the
/// parameters untouched when a gradient is not finite.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64, clip_norm: Option<f64>) -> bool {
    assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
    let Some(scale) = clip_factor(grads, clip_norm) else {
        return false;
    };
    let step = T::from_f64(lr * scale);
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x = *x - step * d;
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState<T> {
    /// Running average of squared gradients.
    pub eg2: Vec<Tensor<T>>,
    /// Running average of squared updates.
    pub edx2: Vec<Tensor<T>>,
    pub rho: f64,
    pub eps: f64,
}

impl<T: Scalar> AdaDeltaState<T> {
    pub fn new(params: &[&Tensor<T>], rho: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdaDeltaState {
            eg2: zeros.clone(),
            edx2: zeros,
            rho,
            eps,
        }
    }
}

/// One AdaDelta update after global-norm clipping; `false` when skipped.
pub fn adadelta_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdaDeltaState<T>,
    clip_norm: Option<f64>,
) -> bool {
    assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
    assert_eq!(params.len(), state.eg2.len(), "optimizer state does not match parameters");
    let Some(scale) = clip_factor(grads, clip_norm) else {
        return false;
    };
    let (rho, eps) = (T::from_f64(state.rho), T::from_f64(state.eps));
    let one = T::one();
    let scale = T::from_f64(scale);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let eg2 = state.eg2[i].data_mut();
        let edx2 = state.edx2[i].data_mut();
        for (k, &g) in grads[i].data().iter().enumerate() {
            let g = g * scale;
            eg2[k] = rho * eg2[k] + (one - rho) * g * g;
            let dx = -((edx2[k] + eps).sqrt() / (eg2[k] + eps).sqrt()) * g;
            edx2[k] = rho * edx2[k] + (one - rho) * dx * dx;
            p[k] = p[k] + dx;
        }
    }
    true
}

/// Partition of `0..lengths.len()` into batches. With `bucket`, sentences
/// are sorted by source length (stable), cut into consecutive batches and the
/// batch order is shuffled; otherwise sentences are shuffled, then cut.
pub fn make_batches<R: Rng>(lengths: &[usize], batch_size: usize, bucket: bool, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if bucket {
        order.sort_by_key(|&i| lengths[i]);
        let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        batches.shuffle(rng);
        batches
    } else {
        order.shuffle(rng);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    AdaDelta { rho: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdaDelta { rho: 0.95, eps: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    DevNll,
    DevBleu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub clip_norm: Option<f64>,
    pub max_epochs: usize,
    pub seed: u64,
    pub bucket: bool,
    pub selection: Selection,
    /// Evaluate on dev every this many epochs.
    pub eval_every: usize,
    /// Where `best.ckpt` is written; `None` keeps the best model in memory only.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 80,
            optimizer: Optimizer::default(),
            clip_norm: Some(1.0),
            max_epochs: 10,
            seed: 1,
            bucket: true,
            selection: Selection::DevNll,
            eval_every: 1,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Optimizer::Sgd { lr } = self.optimizer {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Per-batch candidate lists for training.
pub struct TrainCandidates<'a> {
    pub source: CandidateSource<'a>,
    pub src_vocab: &'a Vocabulary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean NLL per target token over the epoch's batches, measured before
    /// each batch's update.
    pub train_nll: f64,
    pub dev_metric: Option<f64>,
    pub skipped_steps: usize,
}

enum OptState<T> {
    Sgd(f64),
    AdaDelta(AdaDeltaState<T>),
}

/// Owns the parameters and optimizer state across epochs.
pub struct Trainer<'a, T: Scalar> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: Seq2SeqParams<Tensor<T>>,
    train: &'a [Pair],
    dev: &'a [Pair],
    candidates: Option<TrainCandidates<'a>>,
    opt: OptState<T>,
    batch_rng: ChaCha8Rng,
    epoch: usize,
    log: Vec<String>,
    initial_dev_nll: f64,
    best: Option<(f64, usize)>,
    best_params: Option<Seq2SeqParams<Tensor<T>>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: ModelConfig, config: TrainConfig, train: &'a [Pair], dev: &'a [Pair]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if dev.is_empty() {
            return Err(Error::Config("dev corpus is empty".into()));
        }
        let params = Seq2SeqParams::init(&model, config.seed)?;
        let opt = match config.optimizer {
            Optimizer::Sgd { lr } => OptState::Sgd(lr),
            Optimizer::AdaDelta { rho, eps } => OptState::AdaDelta(AdaDeltaState::new(&params.flat(), rho, eps)),
        };
        let mut trainer = Trainer {
            batch_rng: rng::stream(config.seed, rng::BATCHING),
            model,
            config,
            params,
            train,
            dev,
            candidates: None,
            opt,
            epoch: 0,
            log: Vec::new(),
            initial_dev_nll: 0.0,
            best: None,
            best_params: None,
        };
        trainer.initial_dev_nll = trainer.dev_nll()?;
        Ok(trainer)
    }

    pub fn with_candidates(mut self, candidates: TrainCandidates<'a>) -> Self {
        self.candidates = Some(candidates);
        self
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn epoch_count(&self) -> usize {
        self.epoch
    }

    /// Best dev metric so far (lower is better for NLL, higher for BLEU) and
    /// the epoch it was reached.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }

    pub fn best_params(&self) -> &Seq2SeqParams<Tensor<T>> {
        self.best_params.as_ref().unwrap_or(&self.params)
    }

    /// NLL per target token on the dev set.
    pub fn dev_nll(&self) -> Result<f64> {
        corpus_nll(&self.params, &self.model, self.dev)
    }

    fn batch_candidates(&self, batch: &[usize]) -> Option<CandidateList> {
        let c = self.candidates.as_ref()?;
        let src: Vec<&[usize]> = batch.iter().map(|&i| self.train[i].0.as_slice()).collect();
        let tgt: Vec<&[usize]> = batch.iter().map(|&i| self.train[i].1.as_slice()).collect();
        Some(c.source.build_from_ids(c.src_vocab, &src, Some(&tgt)))
    }

    /// One pass over the training data followed, on schedule, by a dev
    /// evaluation.
    pub fn epoch(&mut self) -> Result<EpochReport> {
        self.epoch += 1;
        let lengths: Vec<usize> = self.train.iter().map(|p| p.0.len()).collect();
        let batches = make_batches(&lengths, self.config.batch_size, self.config.bucket, &mut self.batch_rng);
        let (mut nll_sum, mut tokens, mut skipped) = (0.0, 0usize, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let cand = self.batch_candidates(batch);
            let cand_ids = cand.as_ref().map(CandidateList::ids);
            let params = &self.params;
            let model = &self.model;
            let train = self.train;
            let results: Vec<(f64, Seq2SeqParams<Tensor<T>>)> = batch
                .par_iter()
                .map(|&i| loss_and_grads(params, model, &train[i].0, &train[i].1, cand_ids))
                .collect::<Result<_>>()?;
            // fixed summation order keeps runs reproducible
            let mut iter = results.into_iter();
            let (mut nll, mut grad) = iter.next().expect("batches are non-empty");
            for (l, g) in iter {
                nll += l;
                for (acc, x) in grad.flat_mut().into_iter().zip(g.flat()) {
                    acc.add_assign(x);
                }
            }
            let batch_tokens: usize = batch.iter().map(|&i| self.train[i].1.len()).sum();
            let inv = T::from_f64(1.0 / batch.len() as f64);
            for g in grad.flat_mut() {
                for x in g.data_mut() {
                    *x = *x * inv;
                }
            }
            let mut ps = self.params.flat_mut();
            let gs = grad.flat();
            let applied = match &mut self.opt {
                OptState::Sgd(lr) => sgd_step(&mut ps, &gs, *lr, self.config.clip_norm),
                OptState::AdaDelta(st) => adadelta_step(&mut ps, &gs, st, self.config.clip_norm),
            };
            if !applied {
                skipped += 1;
                log::warn!("epoch {} batch {}: non-finite gradient, step skipped", self.epoch, b + 1);
            }
            nll_sum += nll;
            tokens += batch_tokens;
            self.log
                .push(format!("epoch={} batch={} nll={:.6}", self.epoch, b + 1, nll / batch_tokens as f64));
        }
        let dev_metric = if self.epoch % self.config.eval_every == 0 {
            Some(self.evaluate_dev()?)
        } else {
            None
        };
        Ok(EpochReport {
            epoch: self.epoch,
            train_nll: nll_sum / tokens as f64,
            dev_metric,
            skipped_steps: skipped,
        })
    }

    fn evaluate_dev(&mut self) -> Result<f64> {
        let nll = self.dev_nll()?;
        if nll > 10.0 * self.initial_dev_nll {
            return Err(Error::Diverged(format!(
                "dev NLL {nll:.4} exceeds 10x the initial {:.4} at epoch {}",
                self.initial_dev_nll, self.epoch
            )));
        }
        let (metric, better): (f64, fn(f64, f64) -> bool) = match self.config.selection {
            Selection::DevNll => (nll, |new, old| new < old),
            Selection::DevBleu => (self.dev_bleu()?, |new, old| new > old),
        };
        self.log.push(format!("dev epoch={} metric={:.6}", self.epoch, metric));
        if self.best.map_or(true, |(b, _)| better(metric, b)) {
            self.best = Some((metric, self.epoch));
            self.best_params = Some(self.params.clone());
            if let Some(dir) = &self.config.out_dir {
                self.save_best(dir)?;
            }
        }
        Ok(metric)
    }

    fn dev_bleu(&self) -> Result<f64> {
        let opts = DecodeOptions { beam: 1, ..DecodeOptions::default() };
        let hyps: Vec<Vec<String>> = self
            .dev
            .par_iter()
            .map(|(s, _)| {
                let h = decoding::translate(&self.params, &self.model, s, &opts)?;
                Ok(h.content().iter().map(usize::to_string).collect())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<Vec<String>> = self
            .dev
            .iter()
            .map(|(_, t)| t[..t.len() - 1].iter().map(usize::to_string).collect())
            .collect();
        Ok(metrics::bleu(&hyps, &refs, 4)?.bleu)
    }

    fn save_best(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("best.ckpt");
        let mut ck = Checkpoint::new(&self.model, self.config.seed, self.best_params());
        ck.extra = train_echo(&self.config);
        ck.save(&path)?;
        Ok(path)
    }
}

fn train_echo(c: &TrainConfig) -> Vec<(String, String)> {
    let mut v = vec![
        ("batch_size".to_string(), c.batch_size.to_string()),
        ("max_epochs".to_string(), c.max_epochs.to_string()),
        ("bucket".to_string(), c.bucket.to_string()),
    ];
    match c.optimizer {
        Optimizer::Sgd { lr } => {
            v.push(("optimizer".into(), "sgd".into()));
            v.push(("lr".into(), lr.to_string()));
        }
        Optimizer::AdaDelta { rho, eps } => {
            v.push(("optimizer".into(), "adadelta".into()));
            v.push(("rho".into(), rho.to_string()));
            v.push(("eps".into(), eps.to_string()));
        }
    }
    v.push(("clip_norm".into(), c.clip_norm.map_or("none".into(), |x| x.to_string())));
    v
}

/// NLL per target token over a corpus, summed in corpus order.
pub fn corpus_nll<T: Scalar>(params: &Seq2SeqParams<Tensor<T>>, model: &ModelConfig, data: &[Pair]) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|(s, t)| encode_decode_loss(params, model, s, t, None).map(|r| r.0))
        .collect::<Result<_>>()?;
    let tokens: usize = data.iter().map(|p| p.1.len()).sum();
    Ok(losses.iter().sum::<f64>() / tokens as f64)
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub best_path: Option<PathBuf>,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub log: Vec<String>,
    pub params: Seq2SeqParams<Tensor<T>>,
}

/// Runs `max_epochs` epochs and keeps the parameters with the best dev metric.
pub fn train<T: Scalar>(
    model: ModelConfig,
    config: TrainConfig,
    train: &[Pair],
    dev: &[Pair],
    candidates: Option<TrainCandidates<'_>>,
) -> Result<TrainOutcome<T>> {
    let mut t = Trainer::<T>::new(model, config, train, dev)?;
    if let Some(c) = candidates {
        t = t.with_candidates(c);
    }
    for _ in 0..t.config.max_epochs {
        let r = t.epoch()?;
        log::info!("epoch {} train nll/token {:.4}", r.epoch, r.train_nll);
    }
    if t.best.is_none() {
        t.evaluate_dev()?;
    }
    let (best_metric, best_epoch) = t.best.expect("dev evaluated at least once");
    let best_path = t.config.out_dir.as_ref().map(|d| d.join("best.ckpt"));
    Ok(TrainOutcome {
        best_path,
        best_metric,
        best_epoch,
        log: t.log.clone(),
        params: t.best_params().clone(),
    })
}
