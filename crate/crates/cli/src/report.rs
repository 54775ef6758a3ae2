//! `blora report`.

use blora::{RunReport, SiteBits};
use serde::Serialize;

use crate::output::{self, Failure};
use crate::{Format, ReportArgs};

#[derive(Debug, Serialize)]
struct RankRow<'a> {
    layer: usize,
    site: &'a str,
    rank: usize,
    effective_rank: usize,
}

#[derive(Debug, Serialize)]
struct Tables<'a> {
    schema: u32,
    ranks: Vec<RankRow<'a>>,
    median_decided_bits: SiteBits<f64>,
}

pub fn run(args: &ReportArgs) -> Result<(), Failure> {
    let report = RunReport::from_json(&output::read(&args.path)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.path.display())))?;
    match args.format {
        Format::Csv => print!("{}", report.tables_csv()),
        Format::Json => {
            let tables = Tables {
                schema: 1,
                ranks: report
                    .per_block
                    .iter()
                    .map(|b| RankRow {
                        layer: b.layer,
                        site: &b.site,
                        rank: b.rank,
                        effective_rank: b.effective_rank,
                    })
                    .collect(),
                median_decided_bits: report.median_decided_bits(),
            };
            print!("{}", output::to_json(&tables));
        }
    }
    Ok(())
}
