//! A small pre-norm transformer encoder-decoder over the byte alphabet.
//!
//! Parameters live in one flat buffer described by a [`Layout`]; the
//! optimizer, checkpointing and gradient checks all work on that buffer.
//! The network code is generic over [`Real`] so the same forward/backward
//! path can be instantiated in `f64` for numerical verification.

mod checkpoint;
mod incremental;
pub mod kernels;
mod network;
mod optim;

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use incremental::{DecoderCache, EncoderState};
pub use kernels::Real;
pub use network::{Dropout, ForwardCache, Logits};
pub use optim::OptimizerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Number of encoder layers and, separately, of decoder layers.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Maximum input text bytes (BOS not counted).
    pub max_input_len: usize,
    /// Maximum target tokens, EOS included.
    pub max_output_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            max_input_len: 512,
            max_output_len: 128,
            vocab_size: VOCAB_SIZE,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the full-network gradient check.
    pub fn micro() -> Self {
        ModelConfig {
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_input_len: 16,
            max_output_len: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.layers,
            self.heads,
            self.ffn_dim,
            self.max_input_len,
            self.max_output_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embed_dim must be even for sinusoidal positions".into()));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!("vocab_size must be {VOCAB_SIZE}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub g: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: Norm,
    pub attn: Attention,
    pub ln_ffn: Norm,
    pub ff_in: Dense,
    pub ff_out: Dense,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ff_in: Dense,
    pub ff_out: Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub range: Range<usize>,
    /// Whether decoupled weight decay applies (matrices and embeddings).
    pub decay: bool,
}

/// Offsets of every named parameter block inside the flat buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: Range<usize>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub out: Dense,
    pub blocks: Vec<Block>,
    pub total: usize,
    init: Vec<(Range<usize>, Init)>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

struct Builder {
    offset: usize,
    blocks: Vec<Block>,
    init: Vec<(Range<usize>, Init)>,
}

impl Builder {
    fn block(&mut self, name: String, len: usize, decay: bool, init: Init) -> Range<usize> {
        let range = self.offset..self.offset + len;
        self.offset += len;
        self.blocks.push(Block {
            name,
            range: range.clone(),
            decay,
        });
        self.init.push((range.clone(), init));
        range
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Dense {
            w: self.block(format!("{name}.w"), fan_in * fan_out, true, Init::Uniform(scale)),
            b: self.block(format!("{name}.b"), fan_out, false, Init::Const(0.0)),
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.block(format!("{name}.g"), d, false, Init::Const(1.0)),
            b: self.block(format!("{name}.b"), d, false, Init::Const(0.0)),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.dense(&format!("{name}.q"), d, d),
            k: self.dense(&format!("{name}.k"), d, d),
            v: self.dense(&format!("{name}.v"), d, d),
            o: self.dense(&format!("{name}.o"), d, d),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, f, v) = (config.embed_dim, config.ffn_dim, config.vocab_size);
        let mut b = Builder {
            offset: 0,
            blocks: Vec::new(),
            init: Vec::new(),
        };
        let embed = b.block("embed".into(), v * d, true, Init::Uniform(1.0 / (d as f64).sqrt()));
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer {
                ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
                attn: b.attention(&format!("enc.{l}.attn"), d),
                ln_ffn: b.norm(&format!("enc.{l}.ln_ffn"), d),
                ff_in: b.dense(&format!("enc.{l}.ff_in"), d, f),
                ff_out: b.dense(&format!("enc.{l}.ff_out"), f, d),
            })
            .collect();
        let enc_norm = b.norm("enc.ln_final", d);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer {
                ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
                self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
                ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
                cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
                ln_ffn: b.norm(&format!("dec.{l}.ln_ffn"), d),
                ff_in: b.dense(&format!("dec.{l}.ff_in"), d, f),
                ff_out: b.dense(&format!("dec.{l}.ff_out"), f, d),
            })
            .collect();
        let dec_norm = b.norm("dec.ln_final", d);
        let out = b.dense("out", d, v);
        Layout {
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out,
            blocks: b.blocks,
            total: b.offset,
            init: b.init,
        }
    }

    /// Per-element weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for block in self.blocks.iter().filter(|b| b.decay) {
            mask[block.range.clone()].fill(true);
        }
        mask
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub params: Vec<T>,
    pub step_count: u64,
}

/// Scaled-uniform initialization, deterministic under `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model<f32>> {
    config.validate()?;
    let layout = Layout::new(&config);
    let mut params = vec![0f32; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (range, init) in &layout.init {
        match *init {
            Init::Uniform(scale) => {
                for p in &mut params[range.clone()] {
                    *p = rng.gen_range(-scale..scale) as f32;
                }
            }
            Init::Const(c) => params[range.clone()].fill(c as f32),
        }
    }
    Ok(Model {
        config,
        layout: Arc::new(layout),
        params,
        step_count: 0,
    })
}

impl<T: Real> Model<T> {
    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            params: self
                .params
                .iter()
                .map(|p| U::from_f64(p.to_f64().unwrap()).unwrap())
                .collect(),
            step_count: self.step_count,
        }
    }

    pub fn block(&self, name: &str) -> Option<&[T]> {
        self.layout
            .blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.params[b.range.clone()])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn check_lengths(&self, input_len: usize, prefix_len: usize) -> Result<()> {
        if input_len == 0 || input_len > self.config.max_input_len + 1 {
            return Err(Error::Overlength {
                len: input_len,
                max: self.config.max_input_len + 1,
            });
        }
        if prefix_len > self.config.max_output_len {
            return Err(Error::Overlength {
                len: prefix_len,
                max: self.config.max_output_len,
            });
        }
        Ok(())
    }
}
