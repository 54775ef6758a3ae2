//! `blora train`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;

use blora::{RunConfig, RunReport};
use serde::Serialize;

use crate::output::{self, Failure};
use crate::TrainArgs;

#[derive(Debug, Serialize)]
struct Stat {
    mean: f64,
    /// Sample standard deviation; 0 for a single run.
    std: f64,
    values: Vec<f64>,
}

impl Stat {
    fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    schema: u32,
    seeds: Vec<u64>,
    reports: Vec<String>,
    metrics: BTreeMap<String, Stat>,
}

fn paths(out: &Path, seed: u64) -> (PathBuf, PathBuf) {
    (out.join(format!("seed{seed}.json")), out.join(format!("seed{seed}.csv")))
}

pub fn run(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = RunConfig::from_json(&output::read(&args.config)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    let seeds = args.seed.clone().unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(Failure::Usage("no seeds given".into()));
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let summary_path = out.join("summary.json");
    for &seed in &seeds {
        let (json, csv) = paths(&out, seed);
        output::check_free(&json, args.force)?;
        output::check_free(&csv, args.force)?;
    }
    output::check_free(&summary_path, args.force)?;

    // Seeds share nothing, so each runs on its own thread.
    let results: Vec<blora::Result<RunReport>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = &cfg;
                s.spawn(move || blora::train::run(cfg, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });

    let mut reports = Vec::with_capacity(seeds.len());
    for (&seed, result) in seeds.iter().zip(results) {
        let report = result.map_err(|e| match Failure::from(e) {
            Failure::Numeric(m) => Failure::Numeric(format!("seed {seed}: {m}")),
            other => other,
        })?;
        let (json, csv) = paths(&out, seed);
        output::write(&json, &output::to_json(&report))?;
        output::write(&csv, &report.epoch_csv())?;
        println!("seed {seed}: wrote {}", json.display());
        reports.push(report);
    }

    let mut metrics: Vec<(&str, Vec<f64>)> = Vec::new();
    if reports[0].metrics.accuracy.is_some() {
        metrics.push(("accuracy", reports.iter().filter_map(|r| r.metrics.accuracy).collect()));
    }
    if reports[0].metrics.mse.is_some() {
        metrics.push(("mse", reports.iter().filter_map(|r| r.metrics.mse).collect()));
    }
    metrics.extend([
        ("eval_loss", reports.iter().map(|r| r.metrics.eval_loss).collect()),
        ("mean_effective_rank", reports.iter().map(|r| r.metrics.mean_effective_rank).collect()),
        ("mean_decided_bits", reports.iter().map(|r| r.metrics.mean_decided_bits).collect()),
        ("final_expected_bits", reports.iter().map(RunReport::final_expected_bits).collect()),
        ("relative_bops_pct", reports.iter().map(|r| r.audit.relative_bops_pct).collect()),
    ]);
    for (name, v) in &metrics {
        let stat = Stat::of(v.clone());
        println!("{name:<20} {:.4} ± {:.4}", stat.mean, stat.std);
    }
    let summary = Summary {
        schema: 1,
        seeds: seeds.clone(),
        reports: seeds.iter().map(|s| format!("seed{s}.json")).collect(),
        metrics: metrics
            .into_iter()
            .map(|(name, v)| (name.to_string(), Stat::of(v)))
            .collect(),
    };
    output::write(&summary_path, &output::to_json(&summary))?;
    Ok(())
}
