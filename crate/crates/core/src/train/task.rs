//! Synthetic tasks.
//!
//! Classification: a sequence is labelled 1 iff a marker token occurs in it.
//! The decision needs information pooled across positions, so the frozen
//! host cannot solve it without training.
//!
//! Regression: targets come from a frozen random teacher plus a planted
//! low-rank update, `y = (W0 + U Vᵀ) x`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{TaskConfig, TaskKind};
use crate::tensor::Tensor;

/// Token reserved as the marker.
pub const MARKER: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Tokens { tokens: Vec<usize>, label: usize },
    Vector { x: Vec<f64>, y: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub examples: Vec<Example>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub train: Split,
    pub eval: Split,
    /// Teacher base weight for regression; the host freezes this as its `W0`.
    pub teacher_base: Option<Tensor>,
    /// Planted low-rank update for regression.
    pub teacher_delta: Option<Tensor>,
}

/// Independent generator for one split. Train and eval use separate ChaCha
/// streams of the same seed, so they never share draws.
fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TEACHER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

impl SyntheticTask {
    /// `d` is the host hidden size (used for regression vectors).
    pub fn generate(config: &TaskConfig, d: usize) -> Self {
        match config.kind {
            TaskKind::SequenceClassification => Self {
                config: config.clone(),
                train: classification_split(config, config.n_train, TRAIN_STREAM),
                eval: classification_split(config, config.n_eval, EVAL_STREAM),
                teacher_base: None,
                teacher_delta: None,
            },
            TaskKind::LowRankRegression => {
                let mut rng = split_rng(config.seed, TEACHER_STREAM);
                let base = gaussian(&mut rng, d * d, 1.0 / (d as f64).sqrt());
                let k = config.teacher_rank;
                let u = gaussian(&mut rng, d * k, 1.0 / (d as f64).sqrt());
                let v = gaussian(&mut rng, d * k, 1.0);
                let mut delta = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        delta[i * d + j] = (0..k).map(|c| u[i * k + c] * v[j * k + c]).sum();
                    }
                }
                let base = Tensor::new(vec![d, d], base).expect("teacher shape");
                let delta = Tensor::new(vec![d, d], delta).expect("teacher shape");
                Self {
                    config: config.clone(),
                    train: regression_split(config, &base, &delta, config.n_train, TRAIN_STREAM),
                    eval: regression_split(config, &base, &delta, config.n_eval, EVAL_STREAM),
                    teacher_base: Some(base),
                    teacher_delta: Some(delta),
                }
            }
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn classification_split(cfg: &TaskConfig, n: usize, stream: u64) -> Split {
    let mut rng = split_rng(cfg.seed, stream);
    let examples = (0..n)
        .map(|i| {
            // alternate labels so every split is exactly balanced
            let label = i % 2;
            let mut tokens: Vec<usize> = (0..cfg.seq_len)
                .map(|_| rng.random_range(1..cfg.vocab))
                .collect();
            if label == 1 {
                let count = rng.random_range(1..=3.min(cfg.seq_len));
                let mut positions: Vec<usize> = (0..cfg.seq_len).collect();
                positions.shuffle(&mut rng);
                for &p in &positions[..count] {
                    tokens[p] = MARKER;
                }
            }
            Example::Tokens { tokens, label }
        })
        .collect();
    Split { examples }
}

fn regression_split(cfg: &TaskConfig, base: &Tensor, delta: &Tensor, n: usize, stream: u64) -> Split {
    let mut rng = split_rng(cfg.seed, stream);
    let d = base.shape()[0];
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("valid std");
    let examples = (0..n)
        .map(|_| {
            let x = gaussian(&mut rng, d, 1.0);
            let y = (0..d)
                .map(|i| {
                    let clean: f64 = (0..d)
                        .map(|j| (base.at(i, j) + delta.at(i, j)) * x[j])
                        .sum();
                    clean + if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 }
                })
                .collect();
            Example::Vector { x, y }
        })
        .collect();
    Split { examples }
}
