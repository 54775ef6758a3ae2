//! `blora audit`.

use std::path::Path;

use blora::complexity::{self, CountConfig, CountReport, RatioCheck};
use blora::report::audit_configs;
use blora::{AuditConfig, RunReport};
use serde::Serialize;

use crate::output::{self, Failure};
use crate::{AuditArgs, Preset};

/// Tolerance for the reference ratio comparison, in percentage points.
const RATIO_TOLERANCE_PP: f64 = 1.0;

pub const FULL_PRECISION: &str = "full-precision";

pub fn run(args: &AuditArgs) -> Result<(), Failure> {
    let json = match (&args.config, &args.report, args.preset) {
        (Some(path), _, _) => {
            let report = from_config(path, args.baseline.as_deref())?;
            emit_count_report(&report, args.json);
            output::to_json(&report)
        }
        (_, Some(path), _) => {
            let report = from_run_report(path, args.baseline.as_deref())?;
            emit_count_report(&report, args.json);
            output::to_json(&report)
        }
        (_, _, Some(Preset::Table2)) => table2(args.json)?,
        (_, _, Some(Preset::Params)) => params(args.json),
        _ => unreachable!("clap requires one input"),
    };
    if let Some(out) = &args.out {
        output::check_free(out, args.force)?;
        output::write(out, &json)?;
    }
    Ok(())
}

fn load_audit_config(path: &Path) -> Result<AuditConfig, Failure> {
    AuditConfig::from_json(&output::read(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_run_report(path: &Path) -> Result<RunReport, Failure> {
    RunReport::from_json(&output::read(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn from_config(path: &Path, baseline: Option<&str>) -> Result<CountReport, Failure> {
    let cfg = load_audit_config(path)?;
    let base = match baseline {
        Some(b) => load_audit_config(Path::new(b))?.count_config(),
        None => cfg.baseline_config().ok_or_else(|| {
            Failure::Usage(format!(
                "{} has no baseline; add one to the config or pass --baseline",
                path.display()
            ))
        })?,
    };
    Ok(CountReport::build(&cfg.count_config(), &base)?)
}

fn learned_config(report: &RunReport) -> Result<(CountConfig, CountConfig), Failure> {
    Ok(audit_configs(&report.config, &report.per_block)?)
}

fn from_run_report(path: &Path, baseline: Option<&str>) -> Result<CountReport, Failure> {
    let report = load_run_report(path)?;
    let (learned, full) = learned_config(&report)?;
    let base = match baseline {
        None => {
            return Err(Failure::Usage(format!(
                "auditing a run report needs --baseline ({FULL_PRECISION} or another report)"
            )))
        }
        Some(FULL_PRECISION) => full,
        Some(other) => {
            let (mut base, _) = learned_config(&load_run_report(Path::new(other))?)?;
            base.name = other.to_string();
            base
        }
    };
    let learned = CountConfig {
        name: path.display().to_string(),
        ..learned
    };
    Ok(CountReport::build(&learned, &base)?)
}

fn print_components(title: &str, components: &[complexity::Component]) {
    println!("{title}");
    println!("  {:<28} {:>16} {:>22}", "component", "MACs", "BOPs");
    for c in components {
        println!("  {:<28} {:>16} {:>22}", c.name, c.macs, c.bops);
    }
}

fn emit_count_report(r: &CountReport, json: bool) {
    if json {
        print!("{}", output::to_json(r));
        return;
    }
    print_components(&format!("{} vs {}", r.name, r.baseline), &r.components);
    println!("total MACs {}  FLOPs {}  BOPs {}", r.total_macs, r.total_flops, r.total_bops);
    println!("baseline BOPs {}", r.baseline_bops);
    println!("relative BOPs {:.2}%", r.relative_bops_pct);
}

#[derive(Debug, Serialize)]
struct Breakdown {
    name: String,
    perimeter: complexity::Perimeter,
    components: Vec<complexity::Component>,
    baseline_components: Vec<complexity::Component>,
}

#[derive(Debug, Serialize)]
struct Table2 {
    schema: u32,
    tolerance_pp: f64,
    checks: Vec<RatioCheck>,
    /// Per-site counts for every check outside tolerance.
    breakdowns: Vec<Breakdown>,
}

fn table2(json: bool) -> Result<String, Failure> {
    let checks = complexity::reference_ratio_checks()?;
    let mut breakdowns = Vec::new();
    for c in checks.iter().filter(|c| c.abs_diff_pp > RATIO_TOLERANCE_PP) {
        let (r, adapter) = if c.name == "lora_r2" {
            (2, complexity::AdapterKind::Lora)
        } else {
            (complexity::ADAPTIVE_BASELINE_RANK, complexity::AdapterKind::Svd)
        };
        let cfg = complexity::preset(&c.name, r, adapter, c.perimeter);
        let base = complexity::preset("lora_r16", 16, complexity::AdapterKind::Lora, c.perimeter);
        breakdowns.push(Breakdown {
            name: c.name.clone(),
            perimeter: c.perimeter,
            components: cfg.components()?,
            baseline_components: base.components()?,
        });
    }
    let out = Table2 {
        schema: 1,
        tolerance_pp: RATIO_TOLERANCE_PP,
        checks,
        breakdowns,
    };
    if json {
        print!("{}", output::to_json(&out));
    } else {
        println!("relative BOPs against rank-16 adapters");
        println!(
            "{:<10} {:<8} {:>9} {:>9} {:>7}  status",
            "perimeter", "config", "computed", "reported", "|diff|"
        );
        for c in &out.checks {
            let status = if c.abs_diff_pp <= RATIO_TOLERANCE_PP {
                "within 1.0 pp"
            } else {
                "outside tolerance, breakdown below"
            };
            println!(
                "{:<10} {:<8} {:>8.2}% {:>8.2}% {:>7.2}  {status}",
                format!("{:?}", c.perimeter).to_lowercase(),
                c.name,
                c.computed_pct,
                c.reported_pct,
                c.abs_diff_pp
            );
        }
        for b in &out.breakdowns {
            println!();
            let perimeter = format!("{:?}", b.perimeter).to_lowercase();
            print_components(&format!("{} ({perimeter} perimeter)", b.name), &b.components);
            print_components(&format!("lora_r16 ({perimeter} perimeter)"), &b.baseline_components);
        }
    }
    Ok(output::to_json(&out))
}

#[derive(Debug, Serialize)]
struct ParamRow {
    name: String,
    params: u64,
    millions: f64,
    reported_millions: f64,
}

#[derive(Debug, Serialize)]
struct Params {
    schema: u32,
    rows: Vec<ParamRow>,
}

/// Values printed in the reference parameter column, in the order of
/// [`complexity::reference_param_counts`].
const REPORTED_MILLIONS: [f64; 5] = [0.44, 1.33, 0.33, 1.99, 0.49];

fn params(json: bool) -> String {
    let rows: Vec<ParamRow> = complexity::reference_param_counts()
        .into_iter()
        .zip(REPORTED_MILLIONS)
        .map(|((name, params), reported)| ParamRow {
            name,
            params,
            millions: complexity::millions(params),
            reported_millions: reported,
        })
        .collect();
    let out = Params { schema: 1, rows };
    if json {
        print!("{}", output::to_json(&out));
    } else {
        println!("{:<24} {:>10} {:>9} {:>9}", "configuration", "params", "millions", "reported");
        for r in &out.rows {
            println!(
                "{:<24} {:>10} {:>8.2}M {:>8.2}M",
                r.name, r.params, r.millions, r.reported_millions
            );
        }
    }
    output::to_json(&out)
}
