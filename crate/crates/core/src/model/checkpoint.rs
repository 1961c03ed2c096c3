//! Binary checkpoint format.
//!
//! ```text
//! "GROOVCKPT"  u32 version=1
//! config: 7 x u32 (embed_dim, layers, heads, ffn_dim, max_input_len,
//!         max_output_len, vocab_size), f32 dropout_rate
//! u32 n_special, n x (u32 name_len, name bytes, u32 id)
//! u64 step_count
//! f32 x 5 optimizer hyper-parameters (lr, beta1, beta2, epsilon, weight_decay)
//! u32 n_blocks, n x (u32 name_len, name bytes, u64 len, len x f32)
//! ```
//! Parameter blocks come first, followed by `adam.m.*` and `adam.v.*`
//! blocks. All integers and reals are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Layout, Model, ModelConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::tokenizer::SPECIAL_TOKENS;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"GROOVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
    fn block(&mut self, name: &str, data: &[f32]) -> Result<()> {
        self.str(name)?;
        self.u64(data.len() as u64)?;
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.0.write_all(&buf)?)
    }
}

struct Reader<R: Read>(R);

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated or corrupt".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint("implausible string length".into()));
        }
        let mut b = vec![0u8; len];
        self.0.read_exact(&mut b).map_err(truncated)?;
        String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid UTF-8 in block name".into()))
    }
    fn block(&mut self, expect_name: &str, expect_len: usize) -> Result<Vec<f32>> {
        let name = self.str()?;
        let len = self.u64()? as usize;
        if name != expect_name || len != expect_len {
            return Err(Error::Checkpoint(format!(
                "expected block {expect_name} ({expect_len}), found {name} ({len})"
            )));
        }
        let mut raw = vec![0u8; len * 4];
        self.0.read_exact(&mut raw).map_err(truncated)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn save_checkpoint(model: &Model<f32>, opt: &OptimizerState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.0.write_all(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    let c = &model.config;
    for v in [
        c.embed_dim,
        c.layers,
        c.heads,
        c.ffn_dim,
        c.max_input_len,
        c.max_output_len,
        c.vocab_size,
    ] {
        w.u32(v as u32)?;
    }
    w.f32(c.dropout_rate)?;
    w.u32(SPECIAL_TOKENS.len() as u32)?;
    for (name, id) in SPECIAL_TOKENS {
        w.str(name)?;
        w.u32(u32::from(id))?;
    }
    w.u64(model.step_count)?;
    for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon, opt.weight_decay] {
        w.f32(v)?;
    }
    let blocks = &model.layout.blocks;
    w.u32((blocks.len() * 3) as u32)?;
    for b in blocks {
        w.block(&b.name, &model.params[b.range.clone()])?;
    }
    for b in blocks {
        w.block(&format!("adam.m.{}", b.name), &opt.first_moment[b.range.clone()])?;
    }
    for b in blocks {
        w.block(&format!("adam.v.{}", b.name), &opt.second_moment[b.range.clone()])?;
    }
    w.0.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, OptimizerState)> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let magic: [u8; 9] = r.bytes()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        embed_dim: dims[0],
        layers: dims[1],
        heads: dims[2],
        ffn_dim: dims[3],
        max_input_len: dims[4],
        max_output_len: dims[5],
        vocab_size: dims[6],
        dropout_rate: r.f32()?,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_special = r.u32()? as usize;
    let mut specials = Vec::with_capacity(n_special);
    for _ in 0..n_special.min(64) {
        let name = r.str()?;
        specials.push((name, r.u32()?));
    }
    let expected: Vec<(String, u32)> = SPECIAL_TOKENS
        .iter()
        .map(|(n, id)| (n.to_string(), u32::from(*id)))
        .collect();
    if specials != expected {
        return Err(Error::Checkpoint("special-token table does not match this build".into()));
    }
    let step_count = r.u64()?;
    let mut hyper = [0f32; 5];
    for h in &mut hyper {
        *h = r.f32()?;
    }

    let layout = Layout::new(&config);
    let n_blocks = r.u32()? as usize;
    if n_blocks != layout.blocks.len() * 3 {
        return Err(Error::Checkpoint(format!("unexpected block count {n_blocks}")));
    }
    let mut params = vec![0f32; layout.total];
    let mut first = vec![0f32; layout.total];
    let mut second = vec![0f32; layout.total];
    for (prefix, buf) in [("", &mut params), ("adam.m.", &mut first), ("adam.v.", &mut second)] {
        for b in &layout.blocks {
            let data = r.block(&format!("{prefix}{}", b.name), b.range.len())?;
            buf[b.range.clone()].copy_from_slice(&data);
        }
    }
    let model = Model {
        config,
        layout: Arc::new(layout),
        params,
        step_count,
    };
    let mut opt = OptimizerState::new(&model);
    opt.first_moment = first;
    opt.second_moment = second;
    [opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon, opt.weight_decay] = hyper;
    opt.restore_mask(&model);
    Ok((model, opt))
}
