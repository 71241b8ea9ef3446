//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `TATN`, `u32` version, `u32` length of the
//! config text, the `key=value` config text, `u64` seed, `u32` tensor count,
//! then per tensor `u32` name length, name, `u32` rank, `u32` dims, `f32` data.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seq2seq::{ModelConfig, Seq2SeqParams};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TATN";
pub const VERSION: u32 = 1;
const EXTRA_PREFIX: &str = "train.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    /// Non-model settings echoed for provenance, without the `train.` prefix.
    pub extra: Vec<(String, String)>,
    pub params: Seq2SeqParams<Tensor<f32>>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64, params: &Seq2SeqParams<Tensor<T>>) -> Self {
        Checkpoint {
            config: config.clone(),
            seed,
            extra: Vec::new(),
            params: params.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = self.config.to_text();
        for (k, v) in &self.extra {
            text.push_str(&format!("{EXTRA_PREFIX}{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let tensors: Vec<(String, &Tensor<f32>)> = {
            let mut v = Vec::new();
            self.params.visit(&mut |n, t| v.push((n, t)));
            v
        };
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        let mut r = Cursor::new(bytes);
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0; n];
            r.read_exact(&mut buf).map_err(|_| bad("truncated file".into()))?;
            Ok(buf)
        };
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        if take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32_at(take(4)?);
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = u32_at(take(4)?);
        let text = String::from_utf8(take(len)?).map_err(|_| bad("config text is not UTF-8".into()))?;
        let mut model_text = String::new();
        let mut extra = Vec::new();
        for line in text.lines() {
            match line.strip_prefix(EXTRA_PREFIX).and_then(|l| l.split_once('=')) {
                Some((k, v)) => extra.push((k.to_string(), v.to_string())),
                None => {
                    model_text.push_str(line);
                    model_text.push('\n');
                }
            }
        }
        let config = ModelConfig::from_text(&model_text).map_err(|e| bad(e.to_string()))?;
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32_at(take(4)?);
        let mut params = Seq2SeqParams::<Tensor<f32>>::zeros(&config)?;
        let expected = params.names();
        if count != expected.len() {
            return Err(bad(format!("expected {} tensors, found {count}", expected.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for want in &expected {
            let n = u32_at(take(4)?);
            let name = String::from_utf8(take(n)?).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            if &name != want {
                return Err(bad(format!("expected tensor '{want}', found '{name}'")));
            }
            let rank = u32_at(take(4)?);
            let shape: Vec<usize> = (0..rank).map(|_| take(4).map(u32_at)).collect::<Result<_>>()?;
            let size: usize = shape.iter().product();
            let raw = take(size * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            loaded.push(Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after the last tensor".into()));
        }
        for (slot, t) in params.flat_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        params.validate(&config).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint { config, seed, extra, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
