//! Gated low-rank adapter blocks and the attention layer that hosts them.
//!
//! A [`BLoraLinear`] computes `W0 x + scaling · B diag(g ⊙ E) A x` where the
//! rank gates `g` are nested: `g_1 = 1` and `g_i = round(Π_{j=2..i} σ(ξ_j))`,
//! so closing one gate closes every later one. Seven quantizers sit on the
//! weights (`W0`, `A`, `E`, `B`) and on the intermediate activations
//! (`hA`, `hE`, `out`).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QuantizerConfig, QuantizerRecord, QuantizerState, RangeMode};
use crate::tensor::{sigmoid, Tape, Tensor, Var};
use crate::Mode;

/// Initial value of every rank-gate logit.
pub const XI_INIT: f64 = 6.0;
/// Standard deviation of the Gaussian `A` initialization.
pub const A_INIT_STD: f64 = 0.02;

/// Quantizer sites of one block, in a fixed order.
pub const SITES: [&str; 7] = ["W0", "A", "B", "E", "hA", "hE", "out"];

#[derive(Debug, Clone, PartialEq)]
pub struct SiteQuantizers {
    pub w0: QuantizerState,
    pub a: QuantizerState,
    pub b: QuantizerState,
    pub e: QuantizerState,
    pub h_a: QuantizerState,
    pub h_e: QuantizerState,
    pub out: QuantizerState,
}

impl SiteQuantizers {
    pub fn new(cfg: &QuantizerConfig) -> Self {
        let w = || QuantizerState::new(RangeMode::PerCallMinmax, cfg);
        let act = || QuantizerState::new(RangeMode::EmaMinmax, cfg);
        Self {
            w0: w(),
            a: w(),
            b: w(),
            e: w(),
            h_a: act(),
            h_e: act(),
            out: act(),
        }
    }

    /// Sites in `SITES` order.
    pub fn iter(&self) -> impl Iterator<Item = &QuantizerState> {
        [&self.w0, &self.a, &self.b, &self.e, &self.h_a, &self.h_e, &self.out].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut QuantizerState> {
        [
            &mut self.w0,
            &mut self.a,
            &mut self.b,
            &mut self.e,
            &mut self.h_a,
            &mut self.h_e,
            &mut self.out,
        ]
        .into_iter()
    }
}

/// Rank gates from the logits `xi` (length `r - 1`), as plain values.
pub fn rank_gate_values(xi: &[f64]) -> Vec<f64> {
    let mut keep = 1.0;
    std::iter::once(1.0)
        .chain(xi.iter().map(|&x| {
            keep *= sigmoid(x);
            keep.round_ties_even()
        }))
        .collect()
}

/// Rank gates on the tape. Rounding uses the straight-through estimator, so
/// gradients reach `xi`.
pub fn rank_gates(tape: &mut Tape, xi: Option<Var>) -> Var {
    let one = tape.constant_scalar(1.0);
    match xi {
        None => tape.concat(&[one]),
        Some(xi) => {
            let p = tape.sigmoid(xi);
            let c = tape.cumprod(p);
            let g = tape.round_ste(c);
            tape.concat(&[one, g])
        }
    }
}

/// `Σ_{i=2..r} Π_{j=2..i} σ(ξ_j)`; the constant `g_1` term is left out.
pub fn rank_regularizer(tape: &mut Tape, xi: Var) -> Var {
    let p = tape.sigmoid(xi);
    let c = tape.cumprod(p);
    tape.sum(c)
}

pub fn rank_regularizer_value(xi: &[f64]) -> f64 {
    let mut keep = 1.0;
    xi.iter()
        .map(|&x| {
            keep *= sigmoid(x);
            keep
        })
        .sum()
}

/// Frozen base weight plus a gated, quantized low-rank update.
#[derive(Debug, Clone, PartialEq)]
pub struct BLoraLinear {
    pub w0: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub e: Tensor,
    /// Logits for gates `2..=r`; `None` when `r == 1`.
    pub xi: Option<Tensor>,
    pub scaling: f64,
    pub quantizers: SiteQuantizers,
    /// When false every quantizer is the identity.
    pub quantize: bool,
}

/// Tape handles for one forward pass of a block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub w0: Var,
    pub a: Var,
    pub b: Var,
    pub e: Var,
    pub xi: Option<Var>,
    pub phi: [Var; 7],
}

impl BLoraLinear {
    /// Fresh block around `w0 [d1×d2]`: `A ~ N(0, 0.02²)`, `B = 0`, `E = 1`,
    /// `ξ = 6`, so the initial update is exactly zero at full rank.
    pub fn new<R: Rng + ?Sized>(
        w0: Tensor,
        rank: usize,
        lora_alpha: f64,
        qcfg: &QuantizerConfig,
        quantize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if w0.shape().len() != 2 {
            return Err(Error::Config(format!(
                "base weight must be 2-D, got {:?}",
                w0.shape()
            )));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let (d1, d2) = (w0.shape()[0], w0.shape()[1]);
        let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let a: Vec<f64> = (0..rank * d2).map(|_| normal.sample(rng)).collect();
        Self::from_parts(
            w0,
            Tensor::new(vec![rank, d2], a)?,
            Tensor::zeros(vec![d1, rank])?,
            Tensor::full(vec![rank], 1.0)?,
            (rank > 1).then(|| vec![XI_INIT; rank - 1]),
            lora_alpha / rank as f64,
            qcfg,
            quantize,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mut w0: Tensor,
        a: Tensor,
        b: Tensor,
        e: Tensor,
        xi: Option<Vec<f64>>,
        scaling: f64,
        qcfg: &QuantizerConfig,
        quantize: bool,
    ) -> Result<Self> {
        let (d1, d2) = (w0.shape()[0], w0.shape()[1]);
        let r = e.numel();
        if a.shape() != [r, d2] || b.shape() != [d1, r] || xi.as_ref().map_or(0, Vec::len) + 1 != r
        {
            return Err(Error::Config(format!(
                "inconsistent adapter shapes: W0 {:?}, A {:?}, B {:?}, E {:?}, xi {:?}",
                w0.shape(),
                a.shape(),
                b.shape(),
                e.shape(),
                xi.as_ref().map(Vec::len)
            )));
        }
        w0.set_requires_grad(false);
        Ok(Self {
            w0,
            a: a.with_grad(),
            b: b.with_grad(),
            e: e.with_grad(),
            xi: xi.map(|v| Tensor::vector(v).map(Tensor::with_grad)).transpose()?,
            scaling,
            quantizers: SiteQuantizers::new(qcfg),
            quantize,
        })
    }

    pub fn rank(&self) -> usize {
        self.e.numel()
    }

    pub fn in_features(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn xi_values(&self) -> &[f64] {
        self.xi.as_ref().map_or(&[], Tensor::data)
    }

    pub fn rank_gates(&self) -> Vec<f64> {
        rank_gate_values(self.xi_values())
    }

    /// Number of open rank gates; always in `[1, r]`.
    pub fn effective_rank(&self) -> usize {
        self.rank_gates().iter().filter(|&&g| g >= 0.5).count()
    }

    /// Records parameters on the tape.
    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        let phi: Vec<Var> = self.quantizers.iter().map(|q| tape.leaf(&q.phi)).collect();
        BlockVars {
            w0: tape.leaf(&self.w0),
            a: tape.leaf(&self.a),
            b: tape.leaf(&self.b),
            e: tape.leaf(&self.e),
            xi: self.xi.as_ref().map(|t| tape.leaf(t)),
            phi: phi.try_into().expect("seven sites"),
        }
    }

    /// `x [batch×d2] -> [batch×d1]`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &BlockVars,
        x: Var,
        qcfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.in_features() {
            return Err(crate::TensorError::Shape {
                op: "blora_forward",
                lhs: xs,
                rhs: self.w0.shape().to_vec(),
            }
            .into());
        }
        let on = self.quantize;
        let q = &mut self.quantizers;
        let mut quant = |state: &mut QuantizerState, v: Var, phi: Var, tape: &mut Tape| {
            if on {
                state.forward(tape, v, phi, qcfg, mode, rng)
            } else {
                Ok(v)
            }
        };
        let w = quant(&mut q.w0, vars.w0, vars.phi[0], tape)?;
        let a = quant(&mut q.a, vars.a, vars.phi[1], tape)?;
        let b = quant(&mut q.b, vars.b, vars.phi[2], tape)?;
        let e = quant(&mut q.e, vars.e, vars.phi[3], tape)?;

        let gates = rank_gates(tape, vars.xi);
        let e = tape.mul(e, gates)?;

        let at = tape.transpose(a)?;
        let h1 = tape.matmul(x, at)?;
        let h1 = quant(&mut q.h_a, h1, vars.phi[4], tape)?;
        let h2 = tape.mul_row(h1, e)?;
        let h2 = quant(&mut q.h_e, h2, vars.phi[5], tape)?;

        let wt = tape.transpose(w)?;
        let base = tape.matmul(x, wt)?;
        let bt = tape.transpose(b)?;
        let update = tape.matmul(h2, bt)?;
        let update = tape.scale(update, self.scaling);
        let out = tape.add(base, update)?;
        quant(&mut q.out, out, vars.phi[6], tape)
    }

    /// Sum of the seven gate regularizers, or `None` with quantization off.
    pub fn gate_regularizer(&self, tape: &mut Tape, vars: &BlockVars) -> Option<Var> {
        if !self.quantize {
            return None;
        }
        let terms: Vec<Var> = vars
            .phi
            .iter()
            .map(|&p| crate::quantizer::gate_regularizer(tape, p))
            .collect();
        let all = tape.concat(&terms);
        Some(tape.sum(all))
    }

    pub fn gate_regularizer_value(&self) -> f64 {
        if !self.quantize {
            return 0.0;
        }
        self.quantizers
            .iter()
            .map(|q| crate::quantizer::gate_regularizer_value(q.phi.data()))
            .sum()
    }

    pub fn rank_regularizer(&self, tape: &mut Tape, vars: &BlockVars) -> Option<Var> {
        vars.xi.map(|xi| rank_regularizer(tape, xi))
    }

    pub fn rank_regularizer_value(&self) -> f64 {
        rank_regularizer_value(self.xi_values())
    }

    /// Pulls gradients for every trainable tensor off the tape.
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &BlockVars) {
        tape.write_grad(vars.a, &mut self.a);
        tape.write_grad(vars.b, &mut self.b);
        tape.write_grad(vars.e, &mut self.e);
        if let (Some(v), Some(t)) = (vars.xi, self.xi.as_mut()) {
            tape.write_grad(v, t);
        }
        for (&v, q) in vars.phi.iter().zip(self.quantizers.iter_mut()) {
            tape.write_grad(v, &mut q.phi);
        }
    }

    /// Trainable tensors in a fixed order: A, B, E, ξ, then the seven φ.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.a, &mut self.b, &mut self.e];
        if let Some(xi) = self.xi.as_mut() {
            out.push(xi);
        }
        if self.quantize {
            out.extend(self.quantizers.iter_mut().map(|q| &mut q.phi));
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = self.a.numel() + self.b.numel() + self.e.numel();
        n += self.xi.as_ref().map_or(0, Tensor::numel);
        n
    }

    pub fn decided_bits(&self, qcfg: &QuantizerConfig) -> SiteBits<u32> {
        SiteBits::from_iter(self.quantizers.iter().map(|q| {
            if self.quantize {
                q.decided_bits(qcfg)
            } else {
                32
            }
        }))
    }

    pub fn expected_bits(&self, qcfg: &QuantizerConfig) -> SiteBits<f64> {
        SiteBits::from_iter(self.quantizers.iter().map(|q| {
            if self.quantize {
                q.expected_bitwidth(qcfg, Mode::Train)
            } else {
                32.0
            }
        }))
    }

    pub fn quantizer_records(&self, qcfg: &QuantizerConfig) -> SiteBits<QuantizerRecord> {
        SiteBits::from_iter(self.quantizers.iter().map(|q| q.record(qcfg)))
    }
}

/// One value per quantizer site, keyed like the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteBits<T> {
    #[serde(rename = "W0")]
    pub w0: T,
    #[serde(rename = "A")]
    pub a: T,
    #[serde(rename = "B")]
    pub b: T,
    #[serde(rename = "E")]
    pub e: T,
    #[serde(rename = "hA")]
    pub h_a: T,
    #[serde(rename = "hE")]
    pub h_e: T,
    pub out: T,
}

impl<T> SiteBits<T> {
    pub fn from_iter(it: impl IntoIterator<Item = T>) -> Self {
        let mut it = it.into_iter();
        let mut next = || it.next().expect("seven sites");
        Self {
            w0: next(),
            a: next(),
            b: next(),
            e: next(),
            h_a: next(),
            h_e: next(),
            out: next(),
        }
    }

    pub fn values(&self) -> [&T; 7] {
        [&self.w0, &self.a, &self.b, &self.e, &self.h_a, &self.h_e, &self.out]
    }
}

/// Multi-head self-attention with adapters on the query, key and value
/// projections and a frozen, unquantized output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: BLoraLinear,
    pub wk: BLoraLinear,
    pub wv: BLoraLinear,
    pub wo: Tensor,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub q: BlockVars,
    pub k: BlockVars,
    pub v: BlockVars,
    pub wo: Var,
}

impl AttentionLayer {
    pub fn new(wq: BLoraLinear, wk: BLoraLinear, wv: BLoraLinear, wo: Tensor, heads: usize) -> Result<Self> {
        let d = wq.out_features();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide hidden size {d}"
            )));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
        })
    }

    pub fn hidden(&self) -> usize {
        self.wq.out_features()
    }

    pub fn blocks(&self) -> [&BLoraLinear; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    pub fn blocks_mut(&mut self) -> [&mut BLoraLinear; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            q: self.wq.bind(tape),
            k: self.wk.bind(tape),
            v: self.wv.bind(tape),
            wo: tape.constant(&self.wo),
        }
    }

    /// `x [(batch·seq)×d]`, rows grouped by sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &AttentionVars,
        x: Var,
        seq: usize,
        qcfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let d = self.hidden();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide hidden size {d}",
                self.heads
            )));
        }
        let rows = tape.shape(x)[0];
        if seq == 0 || !rows.is_multiple_of(seq) {
            return Err(Error::Config(format!(
                "{rows} rows are not a whole number of length-{seq} sequences"
            )));
        }
        let q = self.wq.forward(tape, &vars.q, x, qcfg, mode, rng)?;
        let k = self.wk.forward(tape, &vars.k, x, qcfg, mode, rng)?;
        let v = self.wv.forward(tape, &vars.v, x, qcfg, mode, rng)?;
        let hd = d / self.heads;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut per_seq = Vec::with_capacity(rows / seq);
        for s in 0..rows / seq {
            let mut per_head = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice2d(q, s * seq, seq, h * hd, hd)?;
                let kh = tape.slice2d(k, s * seq, seq, h * hd, hd)?;
                let vh = tape.slice2d(v, s * seq, seq, h * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax(scores);
                per_head.push(tape.matmul(probs, vh)?);
            }
            per_seq.push(tape.concat_cols(&per_head)?);
        }
        let ctx = tape.concat_rows(&per_seq)?;
        let wot = tape.transpose(vars.wo)?;
        Ok(tape.matmul(ctx, wot)?)
    }

    pub fn absorb_grads(&mut self, tape: &Tape, vars: &AttentionVars) {
        self.wq.absorb_grads(tape, &vars.q);
        self.wk.absorb_grads(tape, &vars.k);
        self.wv.absorb_grads(tape, &vars.v);
    }
}
