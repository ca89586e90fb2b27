//! Experiment runners behind the command-line subcommands.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characterize::{
    aggressor_offsets, cell_set, ecc_word_histogram, overlap, region_rows, retention_flips,
    CharacterizeError, Characterizer, Chip,
};
use crate::config::{ConfigError, Experiment, Resolved, RunConfig, SweepJob};
use crate::controller::{run_trace, SimError, SimSetup};
use crate::disturbance::{BitFlip, Mechanism, Pattern};
use crate::dram::DramError;
use crate::mitigation::MitigationKind;
use crate::par::{self, Execution};
use crate::patterns::{gen_trr_bypass, onoff_times, PatternError};
use crate::results::{Record, ResultRecord};
use crate::trace::{parse_trace, TraceError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Characterize(#[from] CharacterizeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Io(String),
}

impl HarnessError {
    /// Whether the error is an illegal DRAM command rather than bad input.
    pub fn is_hard_fault(&self) -> bool {
        matches!(
            self,
            HarnessError::Sim(SimError::Dram(DramError::HardFault { .. }))
                | HarnessError::Characterize(CharacterizeError::IllegalLog { .. })
                | HarnessError::Characterize(CharacterizeError::Dram(DramError::HardFault { .. }))
        )
    }
}

/// Records of one run, in a deterministic order.
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub summary: serde_json::Value,
}

struct Stamp {
    seed: u64,
    wall_clock: bool,
    start: Instant,
}

impl Stamp {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            seed: cfg.seed,
            wall_clock: cfg.output.wall_clock,
            start: Instant::now(),
        }
    }

    fn wrap(&self, records: Vec<Record>) -> Vec<ResultRecord> {
        let ms = self
            .wall_clock
            .then(|| self.start.elapsed().as_secs_f64() * 1e3);
        records
            .into_iter()
            .enumerate()
            .map(|(i, record)| ResultRecord {
                id: format!("{}-{i}", kind_name(&record)),
                seed: self.seed,
                record,
                wall_clock_ms: ms,
            })
            .collect()
    }
}

fn kind_name(r: &Record) -> &'static str {
    match r {
        Record::Acmin { .. } => "acmin",
        Record::TaggonMin { .. } => "taggon_min",
        Record::Ber { .. } => "ber",
        Record::Overlap { .. } => "overlap",
        Record::Ecc { .. } => "ecc",
        Record::Attack { .. } => "attack",
        Record::Simulate { .. } => "simulate",
        Record::Sweep { .. } => "sweep",
    }
}

pub fn tested_rows(cfg: &RunConfig) -> Vec<u32> {
    let ch = &cfg.characterize;
    if ch.rows.is_empty() {
        region_rows(cfg.geometry.rows, ch.rows_per_region)
    } else {
        ch.rows.clone()
    }
}

fn by_mechanism(flips: &BTreeSet<BitFlip>) -> BTreeMap<Mechanism, u64> {
    let mut m = BTreeMap::new();
    for f in flips {
        *m.entry(f.mechanism).or_default() += 1;
    }
    m
}

fn count_summary(records: &[ResultRecord]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(kind_name(&r.record)).or_default() += 1;
    }
    m
}

fn summary(command: &str, resolved: &Resolved, records: &[ResultRecord], extra: serde_json::Value) -> serde_json::Value {
    summary_of(command, &resolved.config, resolved.rp.as_ref(), records, extra)
}

fn summary_of(
    command: &str,
    config: &RunConfig,
    rp: Option<&crate::mitigation::RpAdaptation>,
    records: &[ResultRecord],
    extra: serde_json::Value,
) -> serde_json::Value {
    serde_json::json!({
        "schema": "rowpress-summary",
        "version": crate::results::VERSION,
        "command": command,
        "seed": config.seed,
        "config": config,
        "rp": rp,
        "records": count_summary(records),
        "results": extra,
    })
}

/// AC_min, tAggON_min, BER, overlap and ECC experiments on the tested rows.
pub fn run_characterize(resolved: &Resolved, exec: Execution) -> Result<RunOutput, HarnessError> {
    let cfg = &resolved.config;
    let ch = &cfg.characterize;
    let stamp = Stamp::new(cfg);
    let chip = Chip::new(&resolved.setup);
    let search = &resolved.search;
    let c = Characterizer::new(&chip, search);
    let rows = tested_rows(cfg);
    let nrows = cfg.geometry.rows;
    let temp = search.temperature;
    let bank = chip.bank;
    let wants = |e| ch.experiments.contains(&e);
    let placeable = |row: u32, p: Pattern| aggressor_offsets(p, row, nrows).is_ok();
    let mut records = Vec::new();

    if wants(Experiment::Acmin) {
        let per_row = par::map(exec, &rows, |&row| -> Result<Vec<Record>, HarnessError> {
            let mut out = Vec::new();
            for &p in ch.patterns.iter().filter(|&&p| placeable(row, p)) {
                for &t in &ch.taggon_ns {
                    out.push(Record::Acmin {
                        bank,
                        row,
                        pattern: p,
                        t_aggon_ns: t,
                        temperature_c: temp,
                        ac_min: c.find_acmin(row, t, p)?,
                    });
                }
            }
            Ok(out)
        });
        for r in per_row {
            records.extend(r?);
        }
    }

    if wants(Experiment::TaggonMin) {
        let per_row = par::map(exec, &rows, |&row| -> Result<Vec<Record>, HarnessError> {
            let mut out = Vec::new();
            for &p in ch.patterns.iter().filter(|&&p| placeable(row, p)) {
                for &ac in &ch.acs {
                    out.push(Record::TaggonMin {
                        bank,
                        row,
                        pattern: p,
                        ac,
                        temperature_c: temp,
                        t_aggon_min_ns: c.find_taggon_min(row, ac, p)?,
                    });
                }
            }
            Ok(out)
        });
        for r in per_row {
            records.extend(r?);
        }
    }

    let mut ecc_sources: Vec<(String, BTreeSet<BitFlip>)> = Vec::new();
    if wants(Experiment::Ber) || wants(Experiment::Ecc) {
        let ber_rows: Vec<u32> = rows.iter().copied().take(ch.ber_rows as usize).collect();
        for &p in &ch.patterns {
            for &delta in &ch.onoff_delta_ns {
                for &frac in &ch.onoff_fractions {
                    let (on, off) = onoff_times(delta, frac, &resolved.setup.timing)?;
                    let per_row = par::map(exec, &ber_rows, |&row| -> Result<Option<(Record, BTreeSet<BitFlip>)>, HarnessError> {
                        let Ok(offsets) = aggressor_offsets(p, row, nrows) else {
                            return Ok(None);
                        };
                        let (ber, flips) = c.measure_ber(row, &offsets, on, off)?;
                        let rec = Record::Ber {
                            bank,
                            row,
                            pattern: p,
                            delta_ns: delta,
                            on_fraction: frac,
                            t_aggon_ns: on,
                            t_aggoff_ns: off,
                            temperature_c: temp,
                            ber,
                            flips_by_mechanism: by_mechanism(&flips),
                            bitflips: flips.iter().copied().collect(),
                        };
                        Ok(Some((rec, flips)))
                    });
                    let mut all = BTreeSet::new();
                    for r in per_row {
                        if let Some((rec, flips)) = r? {
                            if wants(Experiment::Ber) {
                                records.push(rec);
                            }
                            all.extend(flips);
                        }
                    }
                    let name = match p {
                        Pattern::SingleSided => "single",
                        Pattern::DoubleSided => "double",
                    };
                    ecc_sources.push((format!("onoff/{name}/delta_{delta}/on_{frac}"), all));
                }
            }
        }
    }
    if wants(Experiment::Ecc) {
        for (source, flips) in &ecc_sources {
            records.push(Record::Ecc {
                source: source.clone(),
                histogram: ecc_word_histogram(flips, 64),
            });
        }
    }

    if wants(Experiment::Overlap) {
        let orows: Vec<u32> = rows
            .iter()
            .copied()
            .filter(|&r| placeable(r, Pattern::SingleSided))
            .take(ch.overlap_rows as usize)
            .collect();
        let t_ras = resolved.setup.timing.t_ras;
        let t_rp = resolved.setup.timing.t_rp;
        let per_row = par::map(exec, &orows, |&row| -> Result<(BTreeSet<BitFlip>, BTreeSet<BitFlip>), HarnessError> {
            let offsets = aggressor_offsets(Pattern::SingleSided, row, nrows)?;
            let at_acmin = |t| -> Result<BTreeSet<BitFlip>, HarnessError> {
                Ok(match c.find_acmin(row, t, Pattern::SingleSided)? {
                    Some(ac) => c.flips(row, &offsets, t, t_rp, ac, &mut HashMap::new())?,
                    None => BTreeSet::new(),
                })
            };
            let press = at_acmin(ch.overlap_press_taggon_ns)?;
            let hammer = at_acmin(t_ras)?;
            Ok((press, hammer))
        });
        let mut press = BTreeSet::new();
        let mut hammer = BTreeSet::new();
        for r in per_row {
            let (p, h) = r?;
            press.extend(p);
            hammer.extend(h);
        }
        let retention = retention_flips(&chip, &orows, ch.retention_ns);
        let (pa, ha, ra) = (cell_set(&press), cell_set(&hammer), cell_set(&retention));
        for (name_b, b) in [("hammer_at_acmin", &ha), ("retention", &ra)] {
            records.push(Record::Overlap {
                set_a: "press_at_acmin".into(),
                set_b: name_b.into(),
                rows: orows.len() as u64,
                size_a: pa.len() as u64,
                size_b: b.len() as u64,
                intersection: pa.intersection(b).count() as u64,
                overlap: overlap(&pa, b).ok(),
            });
        }
    }

    let records = stamp.wrap(records);
    let extra = characterize_summary(&records);
    Ok(RunOutput {
        summary: summary("characterize", resolved, &records, extra),
        records,
    })
}

fn characterize_summary(records: &[ResultRecord]) -> serde_json::Value {
    let tables = crate::plotdata::tables(records);
    let mut m = serde_json::Map::new();
    for (name, (header, rows)) in tables {
        if rows.is_empty() {
            continue;
        }
        let rows: Vec<serde_json::Value> = rows
            .into_iter()
            .map(|r| {
                serde_json::Value::Object(
                    header
                        .iter()
                        .zip(r)
                        .map(|(h, v)| (h.to_string(), serde_json::Value::String(v)))
                        .collect(),
                )
            })
            .collect();
        m.insert(name.to_string(), serde_json::Value::Array(rows));
    }
    serde_json::Value::Object(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPoint {
    pub defense: MitigationKind,
    pub num_aggr_acts: u32,
    pub num_reads: u32,
}

/// TRR-bypass traces over the attack grid, each run against its defense.
pub fn attack_records(resolved: &Resolved, exec: Execution) -> Result<Vec<Record>, HarnessError> {
    let cfg = &resolved.config;
    let a = &cfg.attack;
    let defenses = if a.defenses.is_empty() {
        vec![cfg.mitigation]
    } else {
        a.defenses.clone()
    };
    let reads = if a.reads_grid.is_empty() {
        vec![a.pattern.num_reads]
    } else {
        a.reads_grid.clone()
    };
    let acts = if a.aggr_acts_grid.is_empty() {
        vec![a.pattern.num_aggr_acts]
    } else {
        a.aggr_acts_grid.clone()
    };
    let mut points = Vec::new();
    for &defense in &defenses {
        for &num_aggr_acts in &acts {
            for &num_reads in &reads {
                points.push(AttackPoint {
                    defense,
                    num_aggr_acts,
                    num_reads,
                });
            }
        }
    }
    let results = par::map(exec, &points, |pt| -> Result<Record, HarnessError> {
        let mut setup: SimSetup = resolved.setup.clone();
        setup.mitigation.kind = pt.defense;
        let mut spec = a.pattern.clone();
        spec.num_reads = pt.num_reads;
        spec.num_aggr_acts = pt.num_aggr_acts;
        let trace = gen_trr_bypass(&spec, &setup.timing, setup.geometry.rows)?;
        let report = run_trace(&trace.requests, &setup, None)?;
        Ok(Record::Attack {
            defense: pt.defense,
            num_aggr_acts: pt.num_aggr_acts,
            num_reads: pt.num_reads,
            bitflips: report.bitflips.len() as u64,
            rows_with_bitflips: report.rows_with_bitflips,
            preventive_refresh_rows: report.preventive_refresh_rows,
            trr_refresh_rows: report.trr_refresh_rows,
            taggon_max_ns: report.taggon_max_ns,
            warnings: trace.warnings,
        })
    });
    results.into_iter().collect()
}

pub fn run_attack(resolved: &Resolved, exec: Execution) -> Result<RunOutput, HarnessError> {
    let stamp = Stamp::new(&resolved.config);
    let records = stamp.wrap(attack_records(resolved, exec)?);
    let extra = characterize_summary(&records);
    Ok(RunOutput {
        summary: summary("attack", resolved, &records, extra),
        records,
    })
}

pub fn run_simulate(resolved: &Resolved, trace_name: &str, trace_text: &str) -> Result<RunOutput, HarnessError> {
    let stamp = Stamp::new(&resolved.config);
    let trace = parse_trace(trace_text, &resolved.address_map)?;
    let report = run_trace(&trace, &resolved.setup, None)?;
    let extra = serde_json::json!({
        "requests": report.requests,
        "served": report.served,
        "acts": report.acts,
        "row_hits": report.row_hits,
        "hit_rate": report.hit_rate,
        "bitflips": report.bitflips.len(),
        "rows_with_bitflips": report.rows_with_bitflips,
        "preventive_refresh_rows": report.preventive_refresh_rows,
        "end_time_ns": report.end_time_ns,
    });
    let records = stamp.wrap(vec![Record::Simulate {
        trace: trace_name.to_string(),
        report,
    }]);
    Ok(RunOutput {
        summary: summary("simulate", resolved, &records, extra),
        records,
    })
}

/// Cartesian product of a grid table (`key = [values]`, optionally under
/// `[grid]`) as `key=value` override lists, in sorted key order.
pub fn grid_points(grid_text: &str) -> Result<Vec<Vec<String>>, ConfigError> {
    let mut table: toml::Table = toml::from_str(grid_text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(toml::Value::Table(g)) = table.remove("grid") {
        if !table.is_empty() {
            return Err(ConfigError::Parse("grid file mixes a [grid] table with top-level keys".into()));
        }
        table = g;
    }
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    flatten_axes("", &table, &mut axes)?;
    let mut points = vec![Vec::new()];
    for (key, values) in &axes {
        let mut next = Vec::new();
        for p in &points {
            for v in values {
                let mut q: Vec<String> = p.clone();
                q.push(format!("{key}={v}"));
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

fn flatten_axes(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Vec<String>)>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_axes(&key, t, out)?,
            toml::Value::Array(a) if !a.is_empty() => out.push((key, a.iter().map(|x| x.to_string()).collect())),
            _ => {
                return Err(ConfigError::Invalid {
                    key,
                    msg: "grid axes must be nonempty arrays".into(),
                })
            }
        }
    }
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "point",
    "overrides",
    "mitigation",
    "t_mro_ns",
    "t_rh",
    "t_rh_reduced",
    "graphene_T",
    "para_p",
    "bitflips",
    "rows_with_bitflips",
];

fn sweep_point(base: &str, base_sets: &[String], point: usize, overrides: &[String]) -> Result<Record, HarnessError> {
    let mut sets = base_sets.to_vec();
    sets.extend(overrides.iter().cloned());
    let cfg = RunConfig::from_toml_str(base, &sets)?;
    let r = cfg.resolve()?;
    let t_rh_reduced = r.rp.as_ref().map_or(cfg.t_rh, |a| a.t_rh_reduced);
    let (bitflips, rows_with_bitflips) = match cfg.sweep.job {
        SweepJob::Derive => (None, None),
        SweepJob::Attack => {
            let recs = attack_records(&r, Execution::Sequential)?;
            let mut b = 0;
            let mut rows = 0;
            for rec in recs {
                if let Record::Attack {
                    bitflips,
                    rows_with_bitflips,
                    ..
                } = rec
                {
                    b += bitflips;
                    rows += rows_with_bitflips;
                }
            }
            (Some(b), Some(rows))
        }
    };
    Ok(Record::Sweep {
        point,
        overrides: overrides.to_vec(),
        mitigation: cfg.mitigation,
        t_mro_ns: match r.setup.controller.row_policy {
            crate::controller::RowPolicy::CappedOpen(t) => Some(t),
            _ => None,
        },
        t_rh: cfg.t_rh,
        t_rh_reduced,
        graphene_t: r.setup.mitigation.graphene_t,
        para_p: r.setup.mitigation.para_p,
        bitflips,
        rows_with_bitflips,
    })
}

fn sweep_row(rec: &Record) -> Vec<String> {
    let Record::Sweep {
        point,
        overrides,
        mitigation,
        t_mro_ns,
        t_rh,
        t_rh_reduced,
        graphene_t,
        para_p,
        bitflips,
        rows_with_bitflips,
    } = rec
    else {
        unreachable!("sweep rows come from sweep records")
    };
    let opt = |x: &Option<u64>| x.map(|v| v.to_string()).unwrap_or_default();
    vec![
        point.to_string(),
        overrides.join(";"),
        mitigation.name().to_string(),
        opt(t_mro_ns),
        t_rh.to_string(),
        t_rh_reduced.to_string(),
        graphene_t.to_string(),
        para_p.to_string(),
        opt(bitflips),
        opt(rows_with_bitflips),
    ]
}

fn io_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(e.to_string())
}

/// Runs every grid point. Points are dealt round-robin to `workers`
/// threads; each writes its own part file under `out/parts`, and the parts
/// are merged into `out/sweep.csv` ordered by point.
pub fn run_sweep(
    base: &str,
    base_sets: &[String],
    grid_text: &str,
    workers: usize,
    out: &Path,
) -> Result<(RunOutput, PathBuf), HarnessError> {
    let base_cfg = RunConfig::from_toml_str(base, base_sets)?;
    let points = grid_points(grid_text)?;
    // every point is validated before any work starts
    for p in &points {
        let mut sets = base_sets.to_vec();
        sets.extend(p.iter().cloned());
        RunConfig::from_toml_str(base, &sets)?.resolve()?;
    }
    let parts = out.join("parts");
    std::fs::create_dir_all(&parts).map_err(io_err)?;
    let workers = workers.clamp(1, points.len().max(1));
    let part_files: Vec<PathBuf> = (0..workers).map(|w| parts.join(format!("worker-{w}.csv"))).collect();
    let stamp = Stamp::new(&base_cfg);
    let results: Vec<Result<(), HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let points = &points;
                let path = &part_files[w];
                s.spawn(move || -> Result<(), HarnessError> {
                    let mut wtr = csv::Writer::from_path(path).map_err(io_err)?;
                    wtr.write_record(SWEEP_COLUMNS).map_err(io_err)?;
                    for (i, p) in points.iter().enumerate().skip(w).step_by(workers) {
                        let rec = sweep_point(base, base_sets, i, p)?;
                        wtr.write_record(sweep_row(&rec)).map_err(io_err)?;
                    }
                    wtr.flush().map_err(io_err)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Io("sweep worker panicked".into()))))
            .collect()
    });
    for r in results {
        r?;
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for f in &part_files {
        let mut rdr = csv::Reader::from_path(f).map_err(io_err)?;
        for rec in rdr.records() {
            rows.push(rec.map_err(io_err)?.iter().map(str::to_string).collect());
        }
    }
    rows.sort_by_key(|r| r[0].parse::<usize>().unwrap_or(usize::MAX));
    let merged = out.join("sweep.csv");
    let mut wtr = csv::Writer::from_path(&merged).map_err(io_err)?;
    wtr.write_record(SWEEP_COLUMNS).map_err(io_err)?;
    for r in &rows {
        wtr.write_record(r).map_err(io_err)?;
    }
    wtr.flush().map_err(io_err)?;

    let records: Vec<Record> = rows.iter().map(|r| parse_sweep_row(r)).collect::<Result<_, _>>()?;
    let records = stamp.wrap(records);
    let extra = serde_json::json!({ "points": points.len(), "workers": workers });
    Ok((
        RunOutput {
            summary: summary_of("sweep", &base_cfg, None, &records, extra),
            records,
        },
        merged,
    ))
}

fn parse_sweep_row(r: &[String]) -> Result<Record, HarnessError> {
    let bad = |what: &str| HarnessError::Io(format!("malformed sweep part row ({what}): {r:?}"));
    let num = |i: usize| r[i].parse::<u64>().map_err(|_| bad(SWEEP_COLUMNS[i]));
    let opt = |i: usize| -> Result<Option<u64>, HarnessError> {
        if r[i].is_empty() {
            Ok(None)
        } else {
            num(i).map(Some)
        }
    };
    if r.len() != SWEEP_COLUMNS.len() {
        return Err(bad("width"));
    }
    let mitigation: MitigationKind =
        serde_json::from_value(serde_json::Value::String(r[2].clone())).map_err(|_| bad("mitigation"))?;
    Ok(Record::Sweep {
        point: num(0)? as usize,
        overrides: if r[1].is_empty() {
            Vec::new()
        } else {
            r[1].split(';').map(str::to_string).collect()
        },
        mitigation,
        t_mro_ns: opt(3)?,
        t_rh: num(4)?,
        t_rh_reduced: num(5)?,
        graphene_t: num(6)?,
        para_p: r[7].parse().map_err(|_| bad("para_p"))?,
        bitflips: opt(8)?,
        rows_with_bitflips: opt(9)?,
    })
}
