//! Result records and the append-only JSON-lines results file.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characterize::EccHistogram;
use crate::controller::SimulationReport;
use crate::disturbance::{BitFlip, Mechanism, Pattern};
use crate::dram::Nanos;
use crate::mitigation::MitigationKind;

pub const SCHEMA: &str = "rowpress-results";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("results file: {0}")]
    Io(#[from] std::io::Error),
    #[error("results line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("results file has schema header {0:?}, expected {SCHEMA} v{VERSION}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Record {
    Acmin {
        bank: usize,
        row: u32,
        pattern: Pattern,
        t_aggon_ns: Nanos,
        temperature_c: f64,
        /// `None` when no bitflip occurs within the time budget.
        ac_min: Option<u64>,
    },
    TaggonMin {
        bank: usize,
        row: u32,
        pattern: Pattern,
        ac: u64,
        temperature_c: f64,
        t_aggon_min_ns: Option<Nanos>,
    },
    Ber {
        bank: usize,
        row: u32,
        pattern: Pattern,
        delta_ns: Nanos,
        on_fraction: f64,
        t_aggon_ns: Nanos,
        t_aggoff_ns: Nanos,
        temperature_c: f64,
        ber: f64,
        flips_by_mechanism: BTreeMap<Mechanism, u64>,
        bitflips: Vec<BitFlip>,
    },
    Overlap {
        set_a: String,
        set_b: String,
        rows: u64,
        size_a: u64,
        size_b: u64,
        intersection: u64,
        overlap: Option<f64>,
    },
    Ecc {
        source: String,
        histogram: EccHistogram,
    },
    Attack {
        defense: MitigationKind,
        num_aggr_acts: u32,
        num_reads: u32,
        bitflips: u64,
        rows_with_bitflips: u64,
        preventive_refresh_rows: u64,
        trr_refresh_rows: u64,
        taggon_max_ns: u64,
        warnings: Vec<String>,
    },
    Simulate {
        trace: String,
        report: SimulationReport,
    },
    Sweep {
        point: usize,
        overrides: Vec<String>,
        mitigation: MitigationKind,
        t_mro_ns: Option<Nanos>,
        t_rh: u64,
        t_rh_reduced: u64,
        graphene_t: u64,
        para_p: f64,
        bitflips: Option<u64>,
        rows_with_bitflips: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub seed: u64,
    #[serde(flatten)]
    pub record: Record,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

fn header_line() -> String {
    serde_json::to_string(&Header {
        schema: SCHEMA.into(),
        version: VERSION,
    })
    .expect("header serializes")
}

/// Appends records to `path`, writing the schema header when the file is
/// new and checking it otherwise.
pub fn append_results(path: &Path, records: &[ResultRecord]) -> Result<(), ResultsError> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    if exists {
        let f = std::fs::File::open(path)?;
        let mut first = String::new();
        BufReader::new(f).read_line(&mut first)?;
        check_header(first.trim_end())?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    if !exists {
        buf.push_str(&header_line());
        buf.push('\n');
    }
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| ResultsError::Parse {
            line: 0,
            msg: e.to_string(),
        })?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

fn check_header(line: &str) -> Result<(), ResultsError> {
    match serde_json::from_str::<Header>(line) {
        Ok(h) if h.schema == SCHEMA && h.version == VERSION => Ok(()),
        _ => Err(ResultsError::Header(line.to_string())),
    }
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>, ResultsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) => check_header(h)?,
        None => return Ok(Vec::new()),
    }
    let mut out = Vec::new();
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(l).map_err(|e| ResultsError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, ResultsError> {
    parse_results(&std::fs::read_to_string(path)?)
}
