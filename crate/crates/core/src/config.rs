//! Run configuration: flat `key = value` files with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{AttentionConfig, AttentionKind};
use crate::corpus::read_lines;
use crate::decoding::DecodeOptions;
use crate::error::{Error, Result};
use crate::seq2seq::ModelConfig;
use crate::training::{Optimizer, Selection, TrainConfig};

/// Every tunable default in one place. Field names double as config keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: AttentionKind,
    pub emb: usize,
    pub hidden: usize,
    pub history_window: Option<usize>,
    pub coverage_dim: usize,
    pub local_window: usize,
    pub num_merges: usize,
    pub vocab_size: usize,
    pub min_count: u64,
    pub model1_iterations: usize,
    pub model1_null: bool,
    pub cand_k: usize,
    pub cand_frequent: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub max_epochs: usize,
    pub bucket: bool,
    pub selection: Selection,
    pub eval_every: usize,
    pub beam: usize,
    pub len_norm: bool,
    pub max_len: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let attn = AttentionConfig::default();
        let train = TrainConfig::default();
        let decode = DecodeOptions::default();
        let (rho, eps) = match Optimizer::default() {
            Optimizer::AdaDelta { rho, eps } => (rho, eps),
            Optimizer::Sgd { .. } => (0.95, 1e-6),
        };
        RunConfig {
            seed: train.seed,
            variant: AttentionKind::Temporal,
            emb: 32,
            hidden: 64,
            history_window: attn.history_window,
            coverage_dim: attn.coverage_dim,
            local_window: attn.local_window,
            num_merges: 8000,
            vocab_size: 30000,
            min_count: 1,
            model1_iterations: 5,
            model1_null: true,
            cand_k: 10,
            cand_frequent: 2000,
            batch_size: train.batch_size,
            optimizer: "adadelta".into(),
            lr: 1.0,
            rho,
            eps,
            clip_norm: train.clip_norm,
            max_epochs: train.max_epochs,
            bucket: train.bucket,
            selection: train.selection,
            eval_every: train.eval_every,
            beam: decode.beam,
            len_norm: decode.len_norm,
            max_len: decode.max_len,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "variant",
    "emb",
    "hidden",
    "history_window",
    "coverage_dim",
    "local_window",
    "num_merges",
    "vocab_size",
    "min_count",
    "model1_iterations",
    "model1_null",
    "cand_k",
    "cand_frequent",
    "batch_size",
    "optimizer",
    "lr",
    "rho",
    "eps",
    "clip_norm",
    "max_epochs",
    "bucket",
    "selection",
    "eval_every",
    "beam",
    "len_norm",
    "max_len",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got '{v}'"))),
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// `N` or one of `none_words` for unlimited.
fn optional<T: FromStr>(key: &str, v: &str, none_words: &[&str]) -> Result<Option<T>> {
    if none_words.contains(&v) {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "emb" => self.emb = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "history_window" => self.history_window = optional(key, v, &["inf"])?,
            "coverage_dim" => self.coverage_dim = num(key, v)?,
            "local_window" => self.local_window = num(key, v)?,
            "num_merges" => self.num_merges = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "min_count" => self.min_count = num(key, v)?,
            "model1_iterations" => self.model1_iterations = num(key, v)?,
            "model1_null" => self.model1_null = parse_switch(key, v)?,
            "cand_k" => self.cand_k = num(key, v)?,
            "cand_frequent" => self.cand_frequent = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "optimizer" => match v {
                "sgd" | "adadelta" => self.optimizer = v.to_string(),
                _ => return Err(Error::Config(format!("optimizer: expected sgd|adadelta, got '{v}'"))),
            },
            "lr" => self.lr = num(key, v)?,
            "rho" => self.rho = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "clip_norm" => self.clip_norm = optional(key, v, &["none", "off"])?,
            "max_epochs" => self.max_epochs = num(key, v)?,
            "bucket" => self.bucket = parse_switch(key, v)?,
            "selection" => {
                self.selection = match v {
                    "dev-nll" => Selection::DevNll,
                    "dev-bleu" => Selection::DevBleu,
                    _ => return Err(Error::Config(format!("selection: expected dev-nll|dev-bleu, got '{v}'"))),
                }
            }
            "eval_every" => self.eval_every = num(key, v)?,
            "beam" => self.beam = num(key, v)?,
            "len_norm" => self.len_norm = parse_switch(key, v)?,
            "max_len" => self.max_len = optional(key, v, &["auto"])?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "emb" => self.emb.to_string(),
            "hidden" => self.hidden.to_string(),
            "history_window" => self.history_window.map_or("inf".into(), |n| n.to_string()),
            "coverage_dim" => self.coverage_dim.to_string(),
            "local_window" => self.local_window.to_string(),
            "num_merges" => self.num_merges.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "min_count" => self.min_count.to_string(),
            "model1_iterations" => self.model1_iterations.to_string(),
            "model1_null" => switch(self.model1_null).into(),
            "cand_k" => self.cand_k.to_string(),
            "cand_frequent" => self.cand_frequent.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => self.optimizer.clone(),
            "lr" => self.lr.to_string(),
            "rho" => self.rho.to_string(),
            "eps" => self.eps.to_string(),
            "clip_norm" => self.clip_norm.map_or("none".into(), |c| c.to_string()),
            "max_epochs" => self.max_epochs.to_string(),
            "bucket" => switch(self.bucket).into(),
            "selection" => match self.selection {
                Selection::DevNll => "dev-nll".into(),
                Selection::DevBleu => "dev-bleu".into(),
            },
            "eval_every" => self.eval_every.to_string(),
            "beam" => self.beam.to_string(),
            "len_norm" => switch(self.len_norm).into(),
            "max_len" => self.max_len.map_or("auto".into(), |n| n.to_string()),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// ignored; `origin` names the source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, format!("expected 'key = value', got '{line}'")))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(&read_lines(path)?.join("\n"), path)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("every key has a value")).unwrap();
        }
        out
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(src_vocab, tgt_vocab, self.emb, self.hidden, self.variant);
        m.attention.history_window = self.history_window;
        m.attention.coverage_dim = self.coverage_dim;
        m.attention.local_window = self.local_window;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self, out_dir: Option<PathBuf>) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => Optimizer::Sgd { lr: self.lr },
            _ => Optimizer::AdaDelta {
                rho: self.rho,
                eps: self.eps,
            },
        };
        let t = TrainConfig {
            batch_size: self.batch_size,
            optimizer,
            clip_norm: self.clip_norm,
            max_epochs: self.max_epochs,
            seed: self.seed,
            bucket: self.bucket,
            selection: self.selection,
            eval_every: self.eval_every,
            out_dir,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn decode_options(&self) -> Result<DecodeOptions> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        Ok(DecodeOptions {
            beam: self.beam,
            len_norm: self.len_norm,
            max_len: self.max_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.history_window = Some(3);
        c.clip_norm = None;
        c.variant = AttentionKind::Local;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::default().to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_whitespace() {
        let mut c = RunConfig::default();
        let text = "# header\n\n  beam=4   # narrow\nlen_norm = off\nhistory_window = inf\n";
        c.apply_text(text, Path::new("run.cfg")).unwrap();
        assert_eq!(c.beam, 4);
        assert!(!c.len_norm);
        assert_eq!(c.history_window, None);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let err = c.apply_text("beam = 2\nbeem = 3\n", Path::new("run.cfg")).unwrap_err().to_string();
        assert!(err.contains("beem") && err.contains("run.cfg:2"), "{err}");
        let err = c.apply_text("beam\n", Path::new("run.cfg")).unwrap_err().to_string();
        assert!(err.contains("run.cfg:1"), "{err}");
        assert!(c.set("variant", "soft").is_err());
    }

    #[test]
    fn conversions_carry_values() {
        let mut c = RunConfig::default();
        c.set("optimizer", "sgd").unwrap();
        c.set("lr", "0.5").unwrap();
        c.set("history_window", "4").unwrap();
        let m = c.model_config(10, 12).unwrap();
        assert_eq!(m.attention.history_window, Some(4));
        assert_eq!(m.attention.kind, AttentionKind::Temporal);
        let t = c.train_config(None).unwrap();
        assert_eq!(t.optimizer, Optimizer::Sgd { lr: 0.5 });
        c.set("batch_size", "0").unwrap();
        assert!(c.train_config(None).is_err());
    }
}
