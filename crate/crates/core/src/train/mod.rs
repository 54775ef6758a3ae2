//! Objective, training loop and evaluation.

pub mod model;
pub mod optim;
pub mod task;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TaskKind, TrainConfig};
use crate::error::{Error, Result};
use crate::quantizer::QuantizerConfig;
use crate::report::{self, BlockSnapshot, EpochSnapshot, Metrics, RunReport};
use crate::tensor::{Tape, Var};
use crate::Mode;

pub use model::{BlockId, Forward, Model, ModelVars, ATTENTION_SITES};
pub use optim::{linear_schedule, Adam};
pub use task::{Example, Split, SyntheticTask, MARKER};

/// Stream for batch shuffling and gate noise, disjoint from the task and
/// frozen-weight streams.
const TRAIN_RNG_STREAM: u64 = 4;

/// Objective terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub task: Var,
    /// Σ of gate regularizers over every quantizer, if any are active.
    pub gate_reg: Option<Var>,
    /// Σ of rank regularizers over every block with more than one rank.
    pub rank_reg: Option<Var>,
}

fn sum_opt(tape: &mut Tape, terms: Vec<Var>) -> Result<Option<Var>> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// `task + λ_q·Σ gate_reg + λ_r·Σ rank_reg` on an existing forward pass.
pub fn objective(
    tape: &mut Tape,
    model: &Model,
    forward: &Forward,
    lambda_q: f64,
    lambda_r: f64,
) -> Result<Objective> {
    let blocks = model.blocks();
    let vars = forward.vars.blocks();
    let mut gate_terms = Vec::new();
    let mut rank_terms = Vec::new();
    for ((_, block), v) in blocks.iter().zip(vars) {
        gate_terms.extend(block.gate_regularizer(tape, v));
        rank_terms.extend(block.rank_regularizer(tape, v));
    }
    let gate_reg = sum_opt(tape, gate_terms)?;
    let rank_reg = sum_opt(tape, rank_terms)?;
    let mut total = forward.loss;
    for (reg, lambda) in [(gate_reg, lambda_q), (rank_reg, lambda_r)] {
        if let Some(reg) = reg {
            let weighted = tape.scale(reg, lambda);
            total = tape.add(total, weighted)?;
        }
    }
    Ok(Objective {
        total,
        task: forward.loss,
        gate_reg,
        rank_reg,
    })
}

fn block_snapshots(model: &Model, qcfg: &QuantizerConfig) -> Vec<BlockSnapshot> {
    model
        .blocks()
        .into_iter()
        .map(|(id, b)| BlockSnapshot {
            layer: id.layer,
            site: id.site.to_string(),
            effective_rank: b.effective_rank(),
            expected_bits: b.expected_bits(qcfg),
        })
        .collect()
}

/// Trains `model` in place and returns the full run report.
pub fn train(model: &mut Model, task: &SyntheticTask, cfg: &RunConfig, seed: u64) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let tc: &TrainConfig = &cfg.train;
    let qcfg = cfg.quantizer_config();
    let hash_before = model.frozen_hash();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_RNG_STREAM);
    let mut adam = Adam::new(tc.beta1, tc.beta2, tc.eps, tc.weight_decay);
    let steps_per_epoch = task.train.len() / tc.batch_size;
    let total_steps = steps_per_epoch * tc.epochs;
    let mut order: Vec<usize> = (0..task.train.len()).collect();

    let mut loss_curve = Vec::with_capacity(total_steps);
    let mut task_loss_curve = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut global = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut task_sum) = (0.0, 0.0);
        for (step, chunk) in order.chunks_exact(tc.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &task.train.examples[i]).collect();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, &qcfg, Mode::Train, &mut rng)?;
            let obj = objective(&mut tape, model, &fwd, tc.lambda_q, tc.lambda_r)?;
            let loss = tape.item(obj.total);
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, step, loss });
            }
            let task_loss = tape.item(obj.task);
            tape.backward(obj.total)?;
            model.absorb_grads(&tape, &fwd.vars);
            let lr = linear_schedule(tc.lr, global, total_steps, tc.warmup_ratio);
            adam.step(model.params_mut(), lr);
            loss_curve.push(loss);
            task_loss_curve.push(task_loss);
            loss_sum += loss;
            task_sum += task_loss;
            global += 1;
        }
        let blocks = block_snapshots(model, &qcfg);
        epochs.push(EpochSnapshot {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            task_loss: task_sum / steps_per_epoch as f64,
            mean_effective_rank: report::mean(blocks.iter().map(|b| b.effective_rank as f64)),
            mean_expected_bits: report::mean(blocks.iter().flat_map(|b| b.expected_bits.values().map(|v| *v))),
            blocks,
        });
    }

    let metrics = evaluate(model, task, &qcfg)?;
    let hash_after = model.frozen_hash();
    let mut report = RunReport::new(cfg, seed, model, &qcfg, metrics)?;
    report.loss_curve = loss_curve;
    report.task_loss_curve = task_loss_curve;
    report.epochs = epochs;
    report.frozen_hash_before = format!("{hash_before:016x}");
    report.frozen_hash_after = format!("{hash_after:016x}");
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Examples per forward pass during evaluation.
const EVAL_BATCH: usize = 50;

/// Held-out metrics under deterministic gates.
pub fn evaluate(model: &mut Model, task: &SyntheticTask, qcfg: &QuantizerConfig) -> Result<Metrics> {
    // Eval gates ignore the generator; it only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut correct, mut sq_err, mut loss_sum, mut count) = (0usize, 0.0, 0.0, 0usize);
    for chunk in task.eval.examples.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, qcfg, Mode::Eval, &mut rng)?;
        loss_sum += tape.item(fwd.loss) * batch.len() as f64;
        let width = tape.shape(fwd.output)[1];
        let out = tape.value(fwd.output);
        for (row, ex) in batch.iter().enumerate() {
            let vals = &out[row * width..(row + 1) * width];
            match ex {
                Example::Tokens { label, .. } => {
                    let pred = vals
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0;
                    correct += usize::from(pred == *label);
                }
                Example::Vector { y, .. } => {
                    sq_err += vals.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / width as f64;
                }
            }
        }
        count += batch.len();
    }
    let n = count as f64;
    let (accuracy, mse) = match task.config.kind {
        TaskKind::SequenceClassification => (Some(correct as f64 / n), None),
        TaskKind::LowRankRegression => (None, Some(sq_err / n)),
    };
    let blocks = model.blocks();
    let ranks: Vec<f64> = blocks.iter().map(|(_, b)| b.effective_rank() as f64).collect();
    let bits: Vec<f64> = blocks
        .iter()
        .flat_map(|(_, b)| b.decided_bits(qcfg).values().map(|v| f64::from(*v)))
        .collect();
    Ok(Metrics {
        task: task.config.kind,
        n_eval: count,
        accuracy,
        mse,
        eval_loss: loss_sum / n,
        mean_effective_rank: report::mean(ranks.iter().copied()),
        min_effective_rank: blocks.iter().map(|(_, b)| b.effective_rank()).min().unwrap_or(0),
        mean_decided_bits: report::mean(bits.iter().copied()),
    })
}

/// Builds the model for `cfg`, trains it with `seed` and returns the report.
pub fn run(cfg: &RunConfig, seed: u64) -> Result<RunReport> {
    cfg.validate()?;
    let task = SyntheticTask::generate(&cfg.task, cfg.model.d);
    let mut model = Model::build(cfg, &task, seed)?;
    train(&mut model, &task, cfg, seed)
}
