//! Binary checkpoint format. Everything little-endian:
//!
//!   magic "MTRA" | version u32 | metadata | tensor count u32 |
//!   tensors: name (u32 len + utf8) | rank u32 | dims u32 x rank |
//!            f32 values (row-major)
//!
//! Metadata: eleven u32 model fields, gated flag u32, seed u64, tokenizer
//! mode (u32 len + utf8), layout string (u32 len + utf8). Mamba mixers add
//! one `...out_scale` tensor each beyond the canonical parameter walk, so a
//! load reproduces the model bit-exactly.

use crate::layout::LayerLayout;
use crate::matrix::Matrix;
use crate::model::{HybridModel, Mixer, ModelConfig};
use crate::tasks::{write_atomic, Tokenizer, TokenizerMode};
use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MTRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub cfg: ModelConfig,
    pub layout: String,
    pub tokenizer_mode: String,
    pub seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize, data: &[f32]) {
        self.str(name);
        self.u32(2);
        self.u32(rows as u32);
        self.u32(cols as u32);
        for &v in data {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        if self.off + 4 > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at {what}")));
        }
        let v = u32::from_le_bytes(self.bytes[self.off..self.off + 4].try_into().unwrap());
        self.off += 4;
        Ok(v)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        if self.off + 8 > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at {what}")));
        }
        let v = u64::from_le_bytes(self.bytes[self.off..self.off + 8].try_into().unwrap());
        self.off += 8;
        Ok(v)
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        if self.off + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[self.off..self.off + n])
            .map_err(|_| Error::Checkpoint(format!("invalid utf8 in {what}")))?
            .to_string();
        self.off += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        if self.off + 4 * n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at {what}")));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.off + 4 * i;
            out.push(f32::from_le_bytes(self.bytes[s..s + 4].try_into().unwrap()));
        }
        self.off += 4 * n;
        Ok(out)
    }
}

pub fn serialize(model: &HybridModel, tokenizer_mode: &str, seed: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let cfg = &model.cfg;
    for v in [
        cfg.dim,
        cfg.depth,
        cfg.heads,
        cfg.kv_heads,
        cfg.d_k,
        cfg.d_v,
        cfg.n_state,
        cfg.d_ff,
        cfg.vocab,
        cfg.max_seq,
        cfg.conv_kernel,
    ] {
        w.u32(v as u32);
    }
    w.u32(cfg.gated_ssm as u32);
    w.u64(seed);
    w.str(tokenizer_mode);
    w.str(&model.layout().to_string());

    let names = model.param_names();
    let params = model.export_params();
    let out_scales: Vec<(String, f32)> = model
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| match &b.mixer {
            Mixer::Mamba(m) => Some((format!("block{i}.ssm.out_scale"), m.out_scale)),
            Mixer::Attention(_) => None,
        })
        .collect();
    w.u32((names.len() + out_scales.len()) as u32);
    for (name, p) in names.iter().zip(&params) {
        w.tensor(name, p.rows(), p.cols(), p.data());
    }
    for (name, scale) in &out_scales {
        w.tensor(name, 1, 1, &[*scale]);
    }
    w.buf
}

pub fn deserialize(bytes: &[u8]) -> Result<(HybridModel, CheckpointMeta)> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short for header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?} (not a checkpoint)",
            &bytes[..4]
        )));
    }
    let mut r = Reader { bytes, off: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut dims = [0usize; 11];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32(&format!("model dim field {i}"))? as usize;
    }
    let gated = r.u32("gated flag")? != 0;
    let seed = r.u64("seed")?;
    let tokenizer_mode = r.str("tokenizer mode")?;
    let layout_str = r.str("layout")?;
    let cfg = ModelConfig {
        dim: dims[0],
        depth: dims[1],
        heads: dims[2],
        kv_heads: dims[3],
        d_k: dims[4],
        d_v: dims[5],
        n_state: dims[6],
        d_ff: dims[7],
        vocab: dims[8],
        max_seq: dims[9],
        conv_kernel: dims[10],
        gated_ssm: gated,
    };
    let layout = LayerLayout::parse(&layout_str)?;
    if layout.len() != cfg.depth {
        return Err(Error::Checkpoint(format!(
            "layout string length {} does not match depth {}",
            layout.len(),
            cfg.depth
        )));
    }

    let count = r.u32("tensor count")? as usize;
    let mut tensors: Vec<(String, Matrix)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str("tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank != 2 {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has rank {rank}, expected 2"
            )));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let data = r.f32s(rows * cols, &name)?;
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if r.off != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.off
        )));
    }

    // skeleton with the right layout, then overwrite every tensor by name
    let mut model = HybridModel::new_random(cfg, &layout, 0)?;
    let names = model.param_names();
    let lookup: std::collections::HashMap<&str, &Matrix> = tensors
        .iter()
        .map(|(n, m)| (n.as_str(), m))
        .collect();
    let mut params = Vec::with_capacity(names.len());
    for name in &names {
        let m = lookup
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        params.push((*m).clone());
    }
    model.import_params(&params)?;
    for (i, b) in model.blocks.iter_mut().enumerate() {
        if let Mixer::Mamba(m) = &mut b.mixer {
            let key = format!("block{i}.ssm.out_scale");
            let t = lookup
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            m.out_scale = t.get(0, 0);
        }
    }
    let expected = names.len()
        + model
            .blocks
            .iter()
            .filter(|b| matches!(b.mixer, Mixer::Mamba(_)))
            .count();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model expects {expected}"
        )));
    }
    let meta = CheckpointMeta {
        cfg,
        layout: layout_str,
        tokenizer_mode,
        seed,
    };
    Ok((model, meta))
}

pub fn save(model: &HybridModel, tokenizer: &Tokenizer, seed: u64, path: &Path) -> Result<()> {
    let bytes = serialize(model, tokenizer.mode_name(), seed);
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(HybridModel, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    deserialize(&bytes)
}

/// Rebuild the tokenizer recorded in a checkpoint.
pub fn tokenizer_from_meta(meta: &CheckpointMeta) -> Result<Tokenizer> {
    match meta.tokenizer_mode.as_str() {
        "byte" => Ok(Tokenizer::byte()),
        "symbol" => {
            if meta.cfg.vocab < 5 {
                return Err(Error::Checkpoint("vocab too small for symbol mode".into()));
            }
            Ok(Tokenizer {
                mode: TokenizerMode::Symbol {
                    data_vocab: meta.cfg.vocab - 4,
                },
            })
        }
        other => Err(Error::Checkpoint(format!("unknown tokenizer mode '{other}'"))),
    }
}
