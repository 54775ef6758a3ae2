//! Independent oracles shared by the integration suites: plain dense
//! arithmetic, central finite differences, and the quantizer properties
//! stated as standalone checks.

#![allow(dead_code)]

pub mod grad;

use blora::quantizer::{self, GATED_BITWIDTHS};
use blora::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a − b| / max(|a|, |b|, 1e-3)`. The floor keeps
/// gradients that vanish analytically from dividing round-off by zero.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- dense math

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

pub fn softmax_rows(a: &mut [f64], cols: usize) {
    for row in a.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
}

/// `x·Wᵀ` for `x [rows×d_in]`, `w [d_out×d_in]`.
pub fn linear(x: &[f64], w: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    matmul(x, &transpose(w, d_out, d_in), rows, d_in, d_out)
}

/// Effective weight `W0 + s·B·diag(g ⊙ E)·A`.
#[allow(clippy::too_many_arguments)]
pub fn effective_weight(w0: &[f64], a: &[f64], b: &[f64], e: &[f64], g: &[f64], s: f64, d1: usize, d2: usize) -> Vec<f64> {
    let r = e.len();
    let mut w = w0.to_vec();
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..r {
                w[i * d2 + j] += s * b[i * r + k] * g[k] * e[k] * a[k * d2 + j];
            }
        }
    }
    w
}

/// Cumulative-product rank gates with ties-to-even rounding.
pub fn rank_gates(xi: &[f64]) -> Vec<f64> {
    let mut g = vec![1.0];
    let mut p = 1.0;
    for &x in xi {
        p *= 1.0 / (1.0 + (-x).exp());
        g.push(p.round_ties_even());
    }
    g
}

/// Multi-head self-attention over sequences of length `seq`, rows grouped by
/// sequence: `softmax(q kᵀ/√hd)·v` per head, concatenated, then `·Woᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn attention(x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], wo: &[f64], d: usize, heads: usize, seq: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let q = linear(x, wq, rows, d, d);
    let k = linear(x, wk, rows, d, d);
    let v = linear(x, wv, rows, d, d);
    let hd = d / heads;
    let mut ctx = vec![0.0; rows * d];
    for s in 0..rows / seq {
        for h in 0..heads {
            let mut scores = vec![0.0; seq * seq];
            for i in 0..seq {
                for j in 0..seq {
                    scores[i * seq + j] = (0..hd)
                        .map(|t| q[(s * seq + i) * d + h * hd + t] * k[(s * seq + j) * d + h * hd + t])
                        .sum::<f64>()
                        / (hd as f64).sqrt();
                }
            }
            softmax_rows(&mut scores, seq);
            for i in 0..seq {
                for t in 0..hd {
                    ctx[(s * seq + i) * d + h * hd + t] =
                        (0..seq).map(|j| scores[i * seq + j] * v[(s * seq + j) * d + h * hd + t]).sum();
                }
            }
        }
    }
    linear(&ctx, wo, rows, d, d)
}

// ------------------------------------------------------------ quantizer props

/// Grid step for `bits` from the closed form.
pub fn closed_step(alpha: f64, beta: f64, bits: u32) -> f64 {
    (beta - alpha) / (2f64.powi(bits as i32) - 1.0)
}

/// Finest bitwidth enabled by hard gates under nesting.
pub fn finest_bits(gates: [f64; 4]) -> u32 {
    let mut b = 2;
    for (g, bits) in gates.iter().zip(GATED_BITWIDTHS) {
        if *g == 0.0 {
            break;
        }
        b = bits;
    }
    b
}

pub fn run_quantize(x: &[f64], alpha: f64, beta: f64, gates: [f64; 4]) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(&Tensor::vector(x.to_vec()).unwrap());
    let g = tape.constant(&Tensor::vector(gates.to_vec()).unwrap());
    let q = quantizer::quantize(&mut tape, xv, alpha, beta, g).unwrap();
    tape.value(q).to_vec()
}

pub fn clip(x: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    x.iter().map(|v| v.clamp(alpha, beta)).collect()
}

pub fn check_grid_membership(x: &[f64], alpha: f64, beta: f64, gates: [f64; 4]) -> Result<(), String> {
    let xq = run_quantize(x, alpha, beta, gates);
    let x2 = run_quantize(x, alpha, beta, [0.0; 4]);
    let s = closed_step(alpha, beta, finest_bits(gates));
    for (q, c) in xq.iter().zip(&x2) {
        let d = q - c;
        let off = (d - s * (d / s).round()).abs();
        if off > 1e-9 {
            return Err(format!("x_q − x_2 = {d} is {off} off the step-{s} grid"));
        }
    }
    Ok(())
}

/// A 32-bit step can be within a few ulps of the magnitude of the range
/// endpoints, so bounds on reconstructed values carry this much slack.
pub fn ulp_slack(alpha: f64, beta: f64) -> f64 {
    8.0 * f64::EPSILON * alpha.abs().max(beta.abs())
}

/// Float slack for comparisons of reconstruction errors that are equal in
/// exact arithmetic.
pub const ROUNDOFF: f64 = 1e-12;

pub fn check_monotone_refinement(x: &[f64], alpha: f64, beta: f64) -> Result<(), String> {
    let xc = clip(x, alpha, beta);
    let mut prev: Option<Vec<f64>> = None;
    for level in 0..=4 {
        let mut gates = [0.0; 4];
        gates[..level].fill(1.0);
        let xq = run_quantize(x, alpha, beta, gates);
        let err: Vec<f64> = xq.iter().zip(&xc).map(|(q, c)| (q - c).abs()).collect();
        if let Some(p) = &prev {
            for (e, pe) in err.iter().zip(p) {
                if *e > pe + ROUNDOFF {
                    return Err(format!("enabling level {level} raised the error from {pe} to {e}"));
                }
            }
        }
        prev = Some(err);
    }
    Ok(())
}

pub fn check_reconstruction_bound(x: &[f64], alpha: f64, beta: f64, gates: [f64; 4]) -> Result<(), String> {
    let xq = run_quantize(x, alpha, beta, gates);
    let s = closed_step(alpha, beta, finest_bits(gates));
    for (q, c) in xq.iter().zip(clip(x, alpha, beta)) {
        if (q - c).abs() > s / 2.0 + ulp_slack(alpha, beta) {
            return Err(format!("|{c} − {q}| exceeds s/2 = {}", s / 2.0));
        }
    }
    Ok(())
}

/// Zeroing gate `off` makes every finer gate irrelevant, bit for bit.
pub fn check_nesting(x: &[f64], alpha: f64, beta: f64, gates: [f64; 4], off: usize, finer: [f64; 4]) -> Result<(), String> {
    let mut a = gates;
    a[off] = 0.0;
    let mut b = a;
    b[off + 1..].copy_from_slice(&finer[off + 1..]);
    let qa = run_quantize(x, alpha, beta, a);
    let qb = run_quantize(x, alpha, beta, b);
    if qa.iter().zip(&qb).any(|(p, q)| p.to_bits() != q.to_bits()) {
        return Err(format!("gates {a:?} and {b:?} differ after closing gate {off}"));
    }
    Ok(())
}

pub fn check_range_safety(x: &[f64], alpha: f64, beta: f64, gates: [f64; 4]) -> Result<(), String> {
    let s = closed_step(alpha, beta, finest_bits(gates));
    for q in run_quantize(x, alpha, beta, gates) {
        if q < alpha - s / 2.0 || q > beta + s / 2.0 {
            return Err(format!("{q} outside [{alpha} − s/2, {beta} + s/2], s = {s}"));
        }
    }
    Ok(())
}

/// Random hard gate vector; each gate is open with probability 0.7.
pub fn random_gates(rng: &mut ChaCha8Rng) -> [f64; 4] {
    std::array::from_fn(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 })
}

/// Random range with `alpha < beta`, widths spanning several decades.
pub fn random_range(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let alpha = rng.random_range(-10.0..10.0);
    let width = 10f64.powf(rng.random_range(-3.0..1.5));
    (alpha, alpha + width)
}

/// Inputs around and beyond the range, so clipping is exercised.
pub fn random_inputs(rng: &mut ChaCha8Rng, alpha: f64, beta: f64, n: usize) -> Vec<f64> {
    let w = beta - alpha;
    uniform(rng, n, alpha - 0.25 * w, beta + 0.25 * w)
}

// ------------------------------------------------------------- rank gates

/// Number of leading open gates.
pub fn rank_of(gates: &[f64]) -> usize {
    gates.iter().take_while(|g| **g == 1.0).count()
}

/// Gate structure over `n` random logit vectors for rank 8, checked both on
/// the values and through a block's effective rank.
pub fn check_rank_gate_structure(n: usize) -> Result<(), String> {
    let mut r = rng(41);
    let cfg = blora::QuantizerConfig::default();
    let w0 = Tensor::zeros(vec![4, 4]).unwrap();
    let mut block = blora::BLoraLinear::new(w0, 8, 16.0, &cfg, false, &mut r).unwrap();
    for _ in 0..n {
        let xi = uniform(&mut r, 7, -6.0, 6.0);
        let g = blora::adapter::rank_gate_values(&xi);
        if g != rank_gates(&xi) {
            return Err(format!("gates {g:?} differ from the oracle for ξ = {xi:?}"));
        }
        if g[0] != 1.0 || g.iter().any(|v| *v != 0.0 && *v != 1.0) || g.windows(2).any(|w| w[0] < w[1]) {
            return Err(format!("gates {g:?} are not a binary non-increasing chain from 1"));
        }
        block.xi.as_mut().unwrap().data_mut().copy_from_slice(&xi);
        let k = block.effective_rank();
        if k != rank_of(&g) || !(1..=8).contains(&k) {
            return Err(format!("effective rank {k} for gates {g:?}"));
        }
    }
    Ok(())
}

/// A block whose trailing rank gates are closed computes the same output as
/// the block truncated to its open ranks. Returns the worst difference.
pub fn check_truncation(instances: usize) -> Result<f64, String> {
    use blora::{BLoraLinear, Mode, QuantizerConfig};
    let mut r = rng(43);
    let (d1, d2, rank) = (6, 5, 8);
    let cfg = QuantizerConfig::default();
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let xi = uniform(&mut r, rank - 1, -5.0, 5.0);
        let mut full = BLoraLinear::from_parts(
            tensor(&[d1, d2], uniform(&mut r, d1 * d2, -1.0, 1.0)),
            tensor(&[rank, d2], uniform(&mut r, rank * d2, -1.0, 1.0)),
            tensor(&[d1, rank], uniform(&mut r, d1 * rank, -1.0, 1.0)),
            tensor(&[rank], uniform(&mut r, rank, -1.5, 1.5)),
            Some(xi.clone()),
            r.random_range(0.25..4.0),
            &cfg,
            false,
        )
        .unwrap();
        let k = rank_of(&rank_gates(&xi));
        let mut truncated = BLoraLinear::from_parts(
            full.w0.clone(),
            tensor(&[k, d2], full.a.data()[..k * d2].to_vec()),
            tensor(&[d1, k], (0..d1).flat_map(|i| full.b.data()[i * rank..i * rank + k].to_vec()).collect()),
            tensor(&[k], full.e.data()[..k].to_vec()),
            (k > 1).then(|| vec![50.0; k - 1]),
            full.scaling,
            &cfg,
            false,
        )
        .unwrap();
        let x = tensor(&[3, d2], uniform(&mut r, 3 * d2, -2.0, 2.0));
        for mode in [Mode::Train, Mode::Eval] {
            let run = |b: &mut BLoraLinear| {
                let mut tape = Tape::new();
                let vars = b.bind(&mut tape);
                let xv = tape.constant(&x);
                let out = b.forward(&mut tape, &vars, xv, &cfg, mode, &mut rng(0)).unwrap();
                tape.value(out).to_vec()
            };
            let (a, b) = (run(&mut full), run(&mut truncated));
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            if diff > 1e-10 {
                return Err(format!("instance {instance}, rank {k}: outputs differ by {diff:e}"));
            }
            worst = worst.max(diff);
        }
    }
    Ok(worst)
}

// -------------------------------------------------------------- objective

/// Largest gap between `objective(λ_q, λ_r) − objective(0, 0)` and
/// `λ_q·Σ gate_reg + λ_r·Σ rank_reg` on one batch and gate draw, with the
/// regularizer sums computed off the tape.
pub fn objective_decomposition_gap(lambdas: &[(f64, f64)]) -> Result<f64, String> {
    use blora::train::{objective, Example};
    use blora::{Mode, Model, RunConfig, SyntheticTask};
    let mut cfg = RunConfig::default();
    cfg.task.n_train = 16;
    cfg.task.n_eval = 16;
    let task = SyntheticTask::generate(&cfg.task, cfg.model.d);
    let mut model = Model::build(&cfg, &task, 0).map_err(|e| e.to_string())?;
    let mut r = rng(1);
    for b in model.blocks_mut() {
        for q in b.quantizers.iter_mut() {
            q.phi.data_mut().copy_from_slice(&uniform(&mut r, 4, -3.0, 3.0));
        }
        if let Some(xi) = b.xi.as_mut() {
            let n = xi.numel();
            xi.data_mut().copy_from_slice(&uniform(&mut r, n, -3.0, 3.0));
        }
    }
    let gate: f64 = model.blocks().iter().map(|(_, b)| b.gate_regularizer_value()).sum();
    let rank: f64 = model.blocks().iter().map(|(_, b)| b.rank_regularizer_value()).sum();
    let batch: Vec<&Example> = task.train.examples[..8].iter().collect();
    let total = |lq: f64, lr: f64| -> Result<f64, String> {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let fwd = m
            .forward(&mut tape, &batch, &cfg.quantizer_config(), Mode::Train, &mut rng(5))
            .map_err(|e| e.to_string())?;
        let obj = objective(&mut tape, &m, &fwd, lq, lr).map_err(|e| e.to_string())?;
        Ok(tape.item(obj.total))
    };
    let base = total(0.0, 0.0)?;
    let mut worst: f64 = 0.0;
    for &(lq, lr) in lambdas {
        let gap = ((total(lq, lr)? - base) - (lq * gate + lr * rank)).abs();
        worst = worst.max(gap);
    }
    Ok(worst)
}
