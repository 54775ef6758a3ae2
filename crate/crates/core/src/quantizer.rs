//! Learnable-bitwidth quantizer.
//!
//! A value is quantized on a 2-bit grid and then refined by residuals on the
//! 4, 8, 16 and 32-bit grids. Each refinement is multiplied by a gate, and the
//! gates are nested: the 8-bit residual only counts if the 4-bit one does,
//! and so on. During training the gates are hard-concrete relaxations of
//! Bernoulli variables parameterized by logits `phi`; at eval time they are
//! thresholded deterministically.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Tensor, Var};
use crate::Mode;

/// Every supported bitwidth, coarsest first.
pub const BITWIDTHS: [u32; 5] = [2, 4, 8, 16, 32];
/// Bitwidths that carry a gate. The 2-bit base is always on.
pub const GATED_BITWIDTHS: [u32; 4] = [4, 8, 16, 32];

/// Switches that reproduce the literal quantizer pseudocode instead of the
/// adopted hard-concrete reading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompatFlags {
    /// Mirrored stretch `s(ζ1−ζ2)+ζ2` in training and the printed eval
    /// indicator `σ(β·ln(−ζ2/ζ1) − φ) < t`.
    pub verbatim_alg2: bool,
    /// Divide the logistic noise by the bitwidth instead of the temperature.
    pub temperature_per_bitwidth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub zeta1: f64,
    pub zeta2: f64,
    pub threshold: f64,
    pub temperature: f64,
    /// Initial value of every gate logit.
    pub phi_init: f64,
    /// Momentum of the running min/max kept by activation sites.
    pub ema_momentum: f64,
    #[serde(skip)]
    pub compat: CompatFlags,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            zeta1: -0.1,
            zeta2: 1.1,
            threshold: 0.34,
            temperature: 2.0 / 3.0,
            phi_init: 6.0,
            ema_momentum: 0.9,
            compat: CompatFlags::default(),
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta1 < 0.0 && self.zeta2 > 1.0) {
            return Err(Error::Config(format!(
                "stretch interval must straddle [0, 1], got zeta1={} zeta2={}",
                self.zeta1, self.zeta2
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum must lie in [0, 1), got {}",
                self.ema_momentum
            )));
        }
        Ok(())
    }

    fn noise_temperature(&self, bits: u32) -> f64 {
        if self.compat.temperature_per_bitwidth {
            bits as f64
        } else {
            self.temperature
        }
    }
}

/// Step size of the `bits`-bit grid over `[alpha, beta]`, via the halving
/// recursion `s_b = s_{b/2} / (2^{b/2} + 1)` from `s_2 = (beta - alpha) / 3`.
pub fn step_size(alpha: f64, beta: f64, bits: u32) -> Result<f64> {
    if !BITWIDTHS.contains(&bits) {
        return Err(Error::Bitwidth(bits));
    }
    if !(alpha < beta) {
        return Err(crate::error::TensorError::Range { lo: alpha, hi: beta }.into());
    }
    let mut s = (beta - alpha) / 3.0;
    let mut b = 2;
    while b < bits {
        s /= 2f64.powi(b as i32) + 1.0;
        b *= 2;
    }
    Ok(s)
}

/// How a site obtains its clipping range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeMode {
    /// `[min(x), max(x)]` of every call. Used for weights.
    PerCallMinmax,
    /// Running average of per-batch min/max, frozen at eval. Used for activations.
    EmaMinmax,
}

/// Relaxed (training) or hard (eval) gate values for `GATED_BITWIDTHS`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDraw {
    pub z: [f64; 4],
    /// Uniform noise behind a training draw.
    pub u: Option<[f64; 4]>,
}

impl GateDraw {
    pub fn hard(z: [f64; 4]) -> Self {
        Self { z, u: None }
    }

    /// Cumulative products `z_4, z_4 z_8, ...`: the multiplier actually applied
    /// to each residual.
    pub fn effective(&self) -> [f64; 4] {
        let mut acc = 1.0;
        self.z.map(|z| {
            acc *= z;
            acc
        })
    }
}

/// Value of one hard-concrete gate for logit `phi` and noise `u`.
pub fn relaxed_gate(phi: f64, u: f64, bits: u32, cfg: &QuantizerConfig) -> f64 {
    let g = (u / (1.0 - u)).ln();
    let srel = sigmoid((g + phi) / cfg.noise_temperature(bits));
    stretch(srel, cfg).clamp(0.0, 1.0)
}

fn stretch(srel: f64, cfg: &QuantizerConfig) -> f64 {
    if cfg.compat.verbatim_alg2 {
        srel * (cfg.zeta1 - cfg.zeta2) + cfg.zeta2
    } else {
        srel * (cfg.zeta2 - cfg.zeta1) + cfg.zeta1
    }
}

/// Deterministic gate for one logit, before nesting.
pub fn hard_gate(phi: f64, cfg: &QuantizerConfig) -> bool {
    let t = cfg.temperature;
    if cfg.compat.verbatim_alg2 {
        sigmoid(t * (-cfg.zeta2 / cfg.zeta1).ln() - phi) < cfg.threshold
    } else {
        sigmoid(phi - t * (-cfg.zeta1 / cfg.zeta2).ln()) > cfg.threshold
    }
}

/// Quantizes `x` on the tape with clipping range `[alpha, beta]` and gate
/// node `gates` (four elements, one per `GATED_BITWIDTHS`).
///
/// Rounding goes through the straight-through estimator, so gradients reach
/// `x` (inside the clip range) and the gates, and nothing else.
pub fn quantize(tape: &mut Tape, x: Var, alpha: f64, beta: f64, gates: Var) -> Result<Var> {
    let xc = tape.clip(x, alpha, beta)?;
    let s2 = step_size(alpha, beta, 2)?;
    let scaled = tape.scale(xc, 1.0 / s2);
    let rounded = tape.round_ste(scaled);
    let x2 = tape.scale(rounded, s2);

    let mut approx = x2;
    let mut residuals = Vec::with_capacity(4);
    for &bits in &GATED_BITWIDTHS {
        let s = step_size(alpha, beta, bits)?;
        let rem = tape.sub(xc, approx)?;
        let scaled = tape.scale(rem, 1.0 / s);
        let rounded = tape.round_ste(scaled);
        let eps = tape.scale(rounded, s);
        approx = tape.add(approx, eps)?;
        residuals.push(eps);
    }

    // x2 + z4 (e4 + z8 (e8 + z16 (e16 + z32 e32)))
    let z32 = tape.select(gates, 3)?;
    let mut inner = tape.mul_scalar(residuals[3], z32)?;
    for i in (0..3).rev() {
        let sum = tape.add(residuals[i], inner)?;
        let z = tape.select(gates, i)?;
        inner = tape.mul_scalar(sum, z)?;
    }
    Ok(tape.add(x2, inner)?)
}

/// Learnable state of one quantizer site.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerState {
    pub phi: Tensor,
    pub alpha: f64,
    pub beta: f64,
    pub range_mode: RangeMode,
    pub ema_momentum: f64,
    ema_ready: bool,
}

const MIN_RANGE: f64 = 1e-8;
const WIDEN: f64 = 1e-4;

impl QuantizerState {
    pub fn new(range_mode: RangeMode, cfg: &QuantizerConfig) -> Self {
        Self {
            phi: Tensor::full(vec![4], cfg.phi_init)
                .expect("nonempty")
                .with_grad(),
            alpha: 0.0,
            beta: 1.0,
            range_mode,
            ema_momentum: cfg.ema_momentum,
            ema_ready: false,
        }
    }

    pub fn with_phi(mut self, phi: [f64; 4]) -> Self {
        self.phi.data_mut().copy_from_slice(&phi);
        self
    }

    pub fn phi(&self) -> [f64; 4] {
        let p = self.phi.data();
        [p[0], p[1], p[2], p[3]]
    }

    /// Resolves `[alpha, beta]` for a call on values `x` and stores it.
    pub fn resolve_range(&mut self, x: &[f64], mode: Mode) -> (f64, f64) {
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let (a, b) = match self.range_mode {
            RangeMode::PerCallMinmax => (lo, hi),
            RangeMode::EmaMinmax => match (mode, self.ema_ready) {
                (Mode::Train, true) => {
                    let m = self.ema_momentum;
                    (m * self.alpha + (1.0 - m) * lo, m * self.beta + (1.0 - m) * hi)
                }
                (Mode::Eval, true) => (self.alpha, self.beta),
                (_, false) => (lo, hi),
            },
        };
        let (a, b) = widen(a, b);
        if mode == Mode::Train || self.range_mode == RangeMode::PerCallMinmax || !self.ema_ready {
            self.alpha = a;
            self.beta = b;
            if mode == Mode::Train {
                self.ema_ready = true;
            }
        }
        (a, b)
    }

    /// Draws relaxed training gates.
    pub fn sample_gates<R: Rng + ?Sized>(
        &self,
        cfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<GateDraw> {
        if mode == Mode::Eval {
            return Err(Error::EvalMode);
        }
        let phi = self.phi();
        let mut u = [0.0; 4];
        let mut z = [0.0; 4];
        for i in 0..4 {
            u[i] = rng.sample(Open01);
            z[i] = relaxed_gate(phi[i], u[i], GATED_BITWIDTHS[i], cfg);
        }
        Ok(GateDraw { z, u: Some(u) })
    }

    /// Deterministic gates with nesting applied.
    pub fn eval_gates(&self, cfg: &QuantizerConfig) -> GateDraw {
        let mut open = true;
        let z = self.phi().map(|p| {
            open = open && hard_gate(p, cfg);
            if open {
                1.0
            } else {
                0.0
            }
        });
        GateDraw::hard(z)
    }

    /// Records gate values on the tape. For a training draw the values are
    /// rebuilt from `phi_var` and the stored noise so gradients reach `phi`.
    pub fn gate_node(
        &self,
        tape: &mut Tape,
        phi_var: Var,
        draw: &GateDraw,
        cfg: &QuantizerConfig,
    ) -> Result<Var> {
        let Some(u) = draw.u else {
            return Ok(tape.constant(&Tensor::vector(draw.z.to_vec())?));
        };
        let noise: Vec<f64> = u.iter().map(|&u| (u / (1.0 - u)).ln()).collect();
        let inv_temp: Vec<f64> = GATED_BITWIDTHS
            .iter()
            .map(|&b| 1.0 / cfg.noise_temperature(b))
            .collect();
        let noise = tape.constant(&Tensor::vector(noise)?);
        let inv_temp = tape.constant(&Tensor::vector(inv_temp)?);
        let logits = tape.add(phi_var, noise)?;
        let logits = tape.mul(logits, inv_temp)?;
        let srel = tape.sigmoid(logits);
        let (k, c) = if cfg.compat.verbatim_alg2 {
            (cfg.zeta1 - cfg.zeta2, cfg.zeta2)
        } else {
            (cfg.zeta2 - cfg.zeta1, cfg.zeta1)
        };
        let stretched = tape.scale(srel, k);
        let stretched = tape.offset(stretched, c);
        Ok(tape.clip(stretched, 0.0, 1.0)?)
    }

    /// Full forward for one call: range resolution, gates, quantization.
    /// `phi_var` must be this state's `phi` recorded on `tape`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: Var,
        phi_var: Var,
        cfg: &QuantizerConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (a, b) = self.resolve_range(tape.value(x), mode);
        let draw = match mode {
            Mode::Train => self.sample_gates(cfg, mode, rng)?,
            Mode::Eval => self.eval_gates(cfg),
        };
        let gates = self.gate_node(tape, phi_var, &draw, cfg)?;
        quantize(tape, x, a, b, gates)
    }

    /// Expected added precision under the gate posterior (training), or the
    /// decided bitwidth (eval).
    pub fn expected_bitwidth(&self, cfg: &QuantizerConfig, mode: Mode) -> f64 {
        match mode {
            Mode::Train => {
                let mut keep = 1.0;
                2.0 + self
                    .phi()
                    .iter()
                    .zip(GATED_BITWIDTHS)
                    .map(|(&p, b)| {
                        keep *= sigmoid(p);
                        b as f64 / 2.0 * keep
                    })
                    .sum::<f64>()
            }
            Mode::Eval => self.decided_bits(cfg) as f64,
        }
    }

    /// Finest bitwidth whose nested eval gate is open.
    pub fn decided_bits(&self, cfg: &QuantizerConfig) -> u32 {
        decided_bits(&self.eval_gates(cfg))
    }
}

/// Finest bitwidth whose nested gate is 1, else 2.
pub fn decided_bits(draw: &GateDraw) -> u32 {
    draw.effective()
        .iter()
        .zip(GATED_BITWIDTHS)
        .filter(|(&z, _)| z >= 0.5)
        .map(|(_, b)| b)
        .next_back()
        .unwrap_or(2)
}

fn widen(alpha: f64, beta: f64) -> (f64, f64) {
    if beta - alpha < MIN_RANGE {
        let c = 0.5 * (alpha + beta);
        (c - WIDEN, c + WIDEN)
    } else {
        (alpha, beta)
    }
}

/// Expected number of open refinement gates, `Σ_i Π_{j≤i} σ(φ_j)`.
pub fn gate_regularizer(tape: &mut Tape, phi: Var) -> Var {
    let p = tape.sigmoid(phi);
    let c = tape.cumprod(p);
    tape.sum(c)
}

pub fn gate_regularizer_value(phi: &[f64]) -> f64 {
    let mut keep = 1.0;
    phi.iter()
        .map(|&p| {
            keep *= sigmoid(p);
            keep
        })
        .sum()
}

/// Serialized view of a quantizer site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerRecord {
    pub phi: [f64; 4],
    pub alpha: f64,
    pub beta: f64,
    pub range_mode: RangeMode,
    pub decided_bits: u32,
    pub expected_bits: f64,
}

impl QuantizerState {
    pub fn record(&self, cfg: &QuantizerConfig) -> QuantizerRecord {
        QuantizerRecord {
            phi: self.phi(),
            alpha: self.alpha,
            beta: self.beta,
            range_mode: self.range_mode,
            decided_bits: self.decided_bits(cfg),
            expected_bits: self.expected_bitwidth(cfg, Mode::Train),
        }
    }

    pub fn from_record(rec: &QuantizerRecord, cfg: &QuantizerConfig) -> Self {
        let mut s = Self::new(rec.range_mode, cfg).with_phi(rec.phi);
        s.alpha = rec.alpha;
        s.beta = rec.beta;
        s.ema_ready = true;
        s
    }
}
