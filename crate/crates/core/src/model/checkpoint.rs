//! Binary checkpoints: a text header with the configuration, then every
//! named parameter as little-endian `f32` values.

use std::path::Path;

use super::{ModelConfig, Seq2Seq};
use crate::autodiff::{Tensor, TensorError};

const MAGIC: &str = "DSCRV-CKPT 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn fmt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt("truncated parameter section"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Seq2Seq {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = format!(
            "{MAGIC}\nn_layers={}\nn_heads={}\nd_model={}\nd_ff={}\nvocab_size={}\nmax_len={}\ndropout={}\n\n",
            c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_len, c.dropout
        )
        .into_bytes();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(&mut out, self.params.len());
        for (name, t) in &self.params {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.rank());
            for &d in t.shape() {
                put(&mut out, d);
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| fmt("missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| fmt("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt(format!("expected `{MAGIC}` header")));
        }
        let mut cfg = ModelConfig::default();
        let mut seen = 0;
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| fmt(format!("bad header line `{line}`")))?;
            let int = || v.parse::<usize>().map_err(|_| fmt(format!("bad value for {k}")));
            match k {
                "n_layers" => cfg.n_layers = int()?,
                "n_heads" => cfg.n_heads = int()?,
                "d_model" => cfg.d_model = int()?,
                "d_ff" => cfg.d_ff = int()?,
                "vocab_size" => cfg.vocab_size = int()?,
                "max_len" => cfg.max_len = int()?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| fmt("bad value for dropout"))?,
                _ => return Err(fmt(format!("unknown header key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(fmt("incomplete configuration block"));
        }
        let mut r = Reader {
            buf: bytes,
            pos: split + 2,
        };
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| fmt("parameter name is not UTF-8"))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| fmt("parameter too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(fmt("trailing bytes after parameters"));
        }
        Ok(Seq2Seq::from_parts(cfg, params)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
