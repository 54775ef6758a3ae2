//! Run reports: serialized training outcome, tabulations and the toy-scale
//! complexity audit derived from learned ranks and bitwidths.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::SiteBits;
use crate::complexity::{AdapterBits, AdapterKind, CountConfig, CountReport, ModelDims, Site, SiteKind};
use crate::config::{RunConfig, TaskKind};
use crate::error::{Error, Result};
use crate::quantizer::{QuantizerConfig, QuantizerRecord};
use crate::train::Model;

pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSnapshot {
    pub layer: usize,
    pub site: String,
    pub effective_rank: usize,
    pub expected_bits: SiteBits<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSnapshot {
    pub epoch: usize,
    /// Mean objective over the epoch's steps.
    pub loss: f64,
    pub task_loss: f64,
    pub mean_effective_rank: f64,
    /// Mean training-mode expected bitwidth over every quantizer.
    pub mean_expected_bits: f64,
    pub blocks: Vec<BlockSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockReport {
    pub layer: usize,
    pub site: String,
    pub rank: usize,
    pub effective_rank: usize,
    pub decided_bits: SiteBits<u32>,
    pub expected_bits: SiteBits<f64>,
    pub xi: Vec<f64>,
    pub quantizers: SiteBits<QuantizerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub task: TaskKind,
    pub n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    pub eval_loss: f64,
    pub mean_effective_rank: f64,
    pub min_effective_rank: usize,
    pub mean_decided_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema: u32,
    pub config: RunConfig,
    pub seed: u64,
    /// Objective per optimizer step.
    pub loss_curve: Vec<f64>,
    /// Task loss per optimizer step.
    pub task_loss_curve: Vec<f64>,
    pub epochs: Vec<EpochSnapshot>,
    pub per_block: Vec<BlockReport>,
    pub metrics: Metrics,
    /// BOPs at the learned ranks and bitwidths against full precision at
    /// the configured rank.
    pub audit: CountReport,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub wall_time_s: f64,
}

impl RunReport {
    /// Report for the current model state with empty curves.
    pub fn new(cfg: &RunConfig, seed: u64, model: &Model, qcfg: &QuantizerConfig, metrics: Metrics) -> Result<Self> {
        let per_block: Vec<BlockReport> = model
            .blocks()
            .into_iter()
            .map(|(id, b)| BlockReport {
                layer: id.layer,
                site: id.site.to_string(),
                rank: b.rank(),
                effective_rank: b.effective_rank(),
                decided_bits: b.decided_bits(qcfg),
                expected_bits: b.expected_bits(qcfg),
                xi: b.xi_values().to_vec(),
                quantizers: b.quantizer_records(qcfg),
            })
            .collect();
        let config = RunConfig {
            out_dir: None,
            ..cfg.clone()
        };
        let (learned, baseline) = audit_configs(&config, &per_block)?;
        let hash = format!("{:016x}", model.frozen_hash());
        Ok(Self {
            schema: SCHEMA_VERSION,
            config,
            seed,
            loss_curve: Vec::new(),
            task_loss_curve: Vec::new(),
            epochs: Vec::new(),
            per_block,
            metrics,
            audit: CountReport::build(&learned, &baseline)?,
            frozen_hash_before: hash.clone(),
            frozen_hash_after: hash,
            wall_time_s: 0.0,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported report schema {} (expected {SCHEMA_VERSION})",
                report.schema
            )));
        }
        if report.per_block.is_empty() {
            return Err(Error::Config("report has no adapter blocks".into()));
        }
        Ok(report)
    }

    /// Byte-stable form for comparisons that ignore timing.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }

    /// `epoch,loss,mean_effective_rank,mean_expected_bits`.
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,loss,mean_effective_rank,mean_expected_bits\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.mean_effective_rank, e.mean_expected_bits);
        }
        out
    }

    /// Final mean training-mode expected bitwidth over every quantizer.
    pub fn final_expected_bits(&self) -> f64 {
        mean(
            self.per_block
                .iter()
                .flat_map(|b| b.expected_bits.values().map(|v| *v)),
        )
    }

    /// Median decided bitwidth per quantizer site across blocks.
    pub fn median_decided_bits(&self) -> SiteBits<f64> {
        let columns: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                self.per_block
                    .iter()
                    .map(|b| f64::from(*b.decided_bits.values()[i]))
                    .collect()
            })
            .collect();
        SiteBits::from_iter(columns.iter().map(|c| median(c)))
    }

    /// `layer,site,rank,effective_rank` then `site_kind,median_decided_bits`.
    pub fn tables_csv(&self) -> String {
        let mut out = String::from("layer,site,rank,effective_rank\n");
        for b in &self.per_block {
            let _ = writeln!(out, "{},{},{},{}", b.layer, b.site, b.rank, b.effective_rank);
        }
        out.push_str("\nsite_kind,median_decided_bits\n");
        let med = self.median_decided_bits();
        for (name, v) in crate::adapter::SITES.iter().zip(med.values()) {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }
}

/// Count configurations for a trained model: learned ranks and decided
/// bitwidths, and the full-precision baseline at the configured rank.
///
/// Adapter products take their weight bitwidth from the factor's quantizer
/// and their activation bitwidth from the quantizer feeding them; attention
/// scores multiply the quantized query and key outputs, the context
/// multiplies unquantized probabilities with the quantized value output.
pub fn audit_configs(cfg: &RunConfig, blocks: &[BlockReport]) -> Result<(CountConfig, CountConfig)> {
    let m = &cfg.model;
    let classification = cfg.task.kind == TaskKind::SequenceClassification;
    let dims = if classification {
        ModelDims {
            d: m.d as u64,
            l_seq: cfg.task.seq_len as u64,
            h: m.heads as u64,
            e: 0,
            d_i: m.d_ff as u64,
            n_layers: m.layers as u64,
            r: m.rank as u64,
        }
    } else {
        ModelDims {
            d: m.d as u64,
            l_seq: 1,
            h: 1,
            e: 0,
            d_i: 0,
            n_layers: 1,
            r: m.rank as u64,
        }
    };
    let kind_of = |site: &str| match site {
        "Wk" => SiteKind::Key,
        "Wv" => SiteKind::Value,
        _ => SiteKind::Query,
    };
    let find = |layer: usize, site: &str| {
        blocks
            .iter()
            .find(|b| b.layer == layer && b.site == site)
            .ok_or_else(|| Error::Config(format!("report lacks block {site} in layer {layer}")))
    };

    let mut learned = Vec::new();
    let mut baseline = Vec::new();
    for b in blocks {
        let bits = &b.decided_bits;
        let mut site = Site::new(format!("L{}.{}", b.layer, b.site), kind_of(&b.site))
            .with_adapter(b.effective_rank as u64, AdapterKind::Svd)
            .with_bits(bits.w0, 32);
        site.layer = Some(b.layer as u64);
        site.adapter_bits = Some(AdapterBits {
            a: [bits.a, 32],
            e: [bits.e, bits.h_a],
            b: [bits.b, bits.h_e],
            scale: [32, 32],
        });
        let mut base = Site::new(site.name.clone(), site.kind).with_adapter(b.rank as u64, AdapterKind::Svd);
        base.layer = site.layer;
        learned.push(site);
        baseline.push(base);
    }
    if classification {
        for layer in 0..m.layers {
            let q = find(layer, "Wq")?.decided_bits.out;
            let k = find(layer, "Wk")?.decided_bits.out;
            let v = find(layer, "Wv")?.decided_bits.out;
            let tagged = |name: &str, kind: SiteKind, bw: u32, ba: u32| {
                let mut s = Site::new(format!("L{layer}.{name}"), kind).with_bits(bw, ba);
                s.layer = Some(layer as u64);
                s
            };
            for (name, kind, bw, ba) in [
                ("scores", SiteKind::Scores, q, k),
                ("context", SiteKind::Context, 32, v),
                ("scaling", SiteKind::Scaling, 32, 32),
                ("Wo", SiteKind::Output, 32, 32),
                ("Wf1", SiteKind::FfnIn, 32, 32),
                ("Wf2", SiteKind::FfnOut, 32, 32),
            ] {
                learned.push(tagged(name, kind, bw, ba));
                baseline.push(tagged(name, kind, 32, 32));
            }
        }
    }
    Ok((
        CountConfig {
            name: "learned".into(),
            dims,
            sites: learned,
        },
        CountConfig {
            name: "full-precision".into(),
            dims,
            sites: baseline,
        },
    ))
}
