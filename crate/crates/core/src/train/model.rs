//! Host models for the synthetic tasks.
//!
//! The classifier is a small frozen encoder: token embeddings, attention
//! layers whose query/key/value projections carry adapters, frozen
//! feed-forward layers with residual connections and layer norm, mean
//! pooling, and a trainable two-layer head. The regressor is a single
//! adapter block on top of the teacher's base matrix.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::{AttentionLayer, AttentionVars, BLoraLinear, BlockVars};
use crate::config::{RunConfig, TaskKind};
use crate::error::{Error, Result};
use crate::quantizer::QuantizerConfig;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::task::{Example, SyntheticTask};
use crate::Mode;

/// Names of the adapted projections inside each attention layer.
pub const ATTENTION_SITES: [&str; 3] = ["Wq", "Wk", "Wv"];

fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionLayer,
    pub ff1: Tensor,
    pub ff2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub embed: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub head: Head,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub block: BLoraLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Classifier(ToyModel),
    Regressor(Regressor),
}

/// Location of an adapter block within a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockId {
    pub layer: usize,
    pub site: &'static str,
}

#[derive(Debug, Clone)]
pub enum ModelVars {
    Classifier {
        layers: Vec<AttentionVars>,
        head: [Var; 4],
    },
    Regressor(BlockVars),
}

impl ModelVars {
    /// Block handles in the same order as [`Model::blocks`].
    pub fn blocks(&self) -> Vec<&BlockVars> {
        match self {
            Self::Classifier { layers, .. } => layers.iter().flat_map(|l| [&l.q, &l.k, &l.v]).collect(),
            Self::Regressor(v) => vec![v],
        }
    }
}

/// Task loss plus the network output of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub loss: Var,
    pub output: Var,
    pub vars: ModelVars,
}

/// Stream used for the frozen "pretrained" weights, so they depend on the
/// task seed only.
const FROZEN_STREAM: u64 = 3;

impl Model {
    /// Frozen weights come from the task seed; adapter and head
    /// initialization from `seed`.
    pub fn build(cfg: &RunConfig, task: &SyntheticTask, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let qcfg = cfg.quantizer_config();
        let mut frozen = ChaCha8Rng::seed_from_u64(task.config.seed);
        frozen.set_stream(FROZEN_STREAM);
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (m.d as f64).sqrt();
        match task.config.kind {
            TaskKind::SequenceClassification => {
                let embed = gaussian(&mut frozen, vec![task.config.vocab, m.d], 1.0)?;
                let mut layers = Vec::with_capacity(m.layers);
                for _ in 0..m.layers {
                    let block = |frozen: &mut ChaCha8Rng, init: &mut ChaCha8Rng| {
                        let w0 = gaussian(frozen, vec![m.d, m.d], std)?;
                        BLoraLinear::new(w0, m.rank, m.lora_alpha, &qcfg, m.quantize, init)
                    };
                    let wq = block(&mut frozen, &mut init)?;
                    let wk = block(&mut frozen, &mut init)?;
                    let wv = block(&mut frozen, &mut init)?;
                    let wo = gaussian(&mut frozen, vec![m.d, m.d], std)?;
                    layers.push(EncoderLayer {
                        attn: AttentionLayer::new(wq, wk, wv, wo, m.heads)?,
                        ff1: gaussian(&mut frozen, vec![m.d_ff, m.d], std)?,
                        ff2: gaussian(&mut frozen, vec![m.d, m.d_ff], 1.0 / (m.d_ff as f64).sqrt())?,
                    });
                }
                let head = Head {
                    w1: gaussian(&mut init, vec![m.d, m.d], std)?.with_grad(),
                    b1: Tensor::zeros(vec![m.d])?.with_grad(),
                    w2: gaussian(&mut init, vec![task.config.classes, m.d], std)?.with_grad(),
                    b2: Tensor::zeros(vec![task.config.classes])?.with_grad(),
                };
                Ok(Self::Classifier(ToyModel {
                    embed,
                    layers,
                    head,
                    seq_len: task.config.seq_len,
                }))
            }
            TaskKind::LowRankRegression => {
                let w0 = task
                    .teacher_base
                    .clone()
                    .ok_or_else(|| Error::Config("regression task without a teacher".into()))?;
                let block = BLoraLinear::new(w0, m.rank, m.lora_alpha, &qcfg, m.quantize, &mut init)?;
                Ok(Self::Regressor(Regressor { block }))
            }
        }
    }

    pub fn blocks(&self) -> Vec<(BlockId, &BLoraLinear)> {
        match self {
            Self::Classifier(t) => t
                .layers
                .iter()
                .enumerate()
                .flat_map(|(layer, l)| {
                    l.attn
                        .blocks()
                        .into_iter()
                        .zip(ATTENTION_SITES)
                        .map(move |(b, site)| (BlockId { layer, site }, b))
                })
                .collect(),
            Self::Regressor(r) => vec![(BlockId { layer: 0, site: "W" }, &r.block)],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut BLoraLinear> {
        match self {
            Self::Classifier(t) => t
                .layers
                .iter_mut()
                .flat_map(|l| l.attn.blocks_mut())
                .collect(),
            Self::Regressor(r) => vec![&mut r.block],
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Classifier(t) => {
                let mut out: Vec<&mut Tensor> = t
                    .layers
                    .iter_mut()
                    .flat_map(|l| l.attn.blocks_mut())
                    .flat_map(BLoraLinear::params_mut)
                    .collect();
                let h = &mut t.head;
                out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
                out
            }
            Self::Regressor(r) => r.block.params_mut(),
        }
    }

    /// Tensors that training must never change.
    pub fn frozen(&self) -> Vec<&Tensor> {
        match self {
            Self::Classifier(t) => {
                let mut out = vec![&t.embed];
                for l in &t.layers {
                    out.extend(l.attn.blocks().map(|b| &b.w0));
                    out.extend([&l.attn.wo, &l.ff1, &l.ff2]);
                }
                out
            }
            Self::Regressor(r) => vec![&r.block.w0],
        }
    }

    /// Hash over the bit patterns of every frozen tensor.
    pub fn frozen_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.frozen() {
            for &d in t.shape() {
                h.write_usize(d);
            }
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: &[&Example],
        qcfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        match self {
            Self::Classifier(t) => t.forward(tape, batch, qcfg, mode, rng),
            Self::Regressor(r) => r.forward(tape, batch, qcfg, mode, rng),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        match (self, vars) {
            (Self::Classifier(t), ModelVars::Classifier { layers, head }) => {
                for (l, v) in t.layers.iter_mut().zip(layers) {
                    l.attn.absorb_grads(tape, v);
                }
                let h = &mut t.head;
                for (t, &v) in [&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2].into_iter().zip(head) {
                    tape.write_grad(v, t);
                }
            }
            (Self::Regressor(r), ModelVars::Regressor(v)) => r.block.absorb_grads(tape, v),
            _ => panic!("model and vars disagree on kind"),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

impl ToyModel {
    fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: &[&Example],
        qcfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let d = self.embed.shape()[1];
        let seq = self.seq_len;
        let mut emb = Vec::with_capacity(batch.len() * seq * d);
        let mut labels = Vec::with_capacity(batch.len());
        for ex in batch {
            let Example::Tokens { tokens, label } = ex else {
                return Err(Error::Config("classifier fed a non-token example".into()));
            };
            if tokens.len() != seq {
                return Err(Error::Config(format!(
                    "sequence of length {} for a length-{seq} model",
                    tokens.len()
                )));
            }
            for &tok in tokens {
                emb.extend_from_slice(&self.embed.data()[tok * d..(tok + 1) * d]);
            }
            labels.push(*label);
        }
        let n = batch.len() * seq;
        let mut x = tape.constant(&Tensor::new(vec![n, d], emb)?);

        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let vars = layer.attn.bind(tape);
            let a = layer.attn.forward(tape, &vars, x, seq, qcfg, mode, rng)?;
            let r = tape.add(x, a)?;
            x = tape.layer_norm(r);
            let ff1 = tape.constant(&layer.ff1);
            let ff2 = tape.constant(&layer.ff2);
            let ff1t = tape.transpose(ff1)?;
            let ff2t = tape.transpose(ff2)?;
            let h = tape.matmul(x, ff1t)?;
            let h = tape.relu(h);
            let f = tape.matmul(h, ff2t)?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm(r);
            layer_vars.push(vars);
        }

        let mut pool = vec![0.0; batch.len() * n];
        for b in 0..batch.len() {
            for s in 0..seq {
                pool[b * n + b * seq + s] = 1.0 / seq as f64;
            }
        }
        let pool = tape.constant(&Tensor::new(vec![batch.len(), n], pool)?);
        let pooled = tape.matmul(pool, x)?;

        let h = &self.head;
        let head = [tape.leaf(&h.w1), tape.leaf(&h.b1), tape.leaf(&h.w2), tape.leaf(&h.b2)];
        let w1t = tape.transpose(head[0])?;
        let z = tape.matmul(pooled, w1t)?;
        let z = tape.add_row(z, head[1])?;
        let z = tape.tanh(z);
        let w2t = tape.transpose(head[2])?;
        let logits = tape.matmul(z, w2t)?;
        let logits = tape.add_row(logits, head[3])?;
        let loss = tape.cross_entropy(logits, &labels)?;
        Ok(Forward {
            loss,
            output: logits,
            vars: ModelVars::Classifier {
                layers: layer_vars,
                head,
            },
        })
    }
}

impl Regressor {
    fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: &[&Example],
        qcfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let d = self.block.in_features();
        let mut xs = Vec::with_capacity(batch.len() * d);
        let mut ys = Vec::with_capacity(batch.len() * d);
        for ex in batch {
            let Example::Vector { x, y } = ex else {
                return Err(Error::Config("regressor fed a non-vector example".into()));
            };
            xs.extend_from_slice(x);
            ys.extend_from_slice(y);
        }
        let x = tape.constant(&Tensor::new(vec![batch.len(), d], xs)?);
        let y = tape.constant(&Tensor::new(vec![batch.len(), self.block.out_features()], ys)?);
        let vars = self.block.bind(tape);
        let out = self.block.forward(tape, &vars, x, qcfg, mode, rng)?;
        let diff = tape.sub(out, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        Ok(Forward {
            loss,
            output: out,
            vars: ModelVars::Regressor(vars),
        })
    }
}
