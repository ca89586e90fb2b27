//! Access-pattern generators: direct command logs for characterization and
//! request traces for controller-mediated attacks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{Command, CommandKind, DramAddress, Nanos, TimingParams};
use crate::trace::{MemoryRequest, RequestKind};

/// Longest direct test program; longer programs are not run.
pub const DEFAULT_BUDGET_NS: Nanos = 60_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("on-time {t_aggon} ns is below tRAS ({t_ras} ns)")]
    OnTimeBelowTras { t_aggon: Nanos, t_ras: Nanos },
    #[error("off-time {t_aggoff} ns is below tRP ({t_rp} ns)")]
    OffTimeBelowTrp { t_aggoff: Nanos, t_rp: Nanos },
    #[error("pattern needs {required} ns, exceeding the {budget} ns budget")]
    Infeasible { required: u128, budget: Nanos },
    #[error("on_fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("pattern has no aggressor rows")]
    NoAggressors,
    #[error("row {row} is outside the bank ({rows} rows)")]
    RowOutOfRange { row: i64, rows: u32 },
}

/// ACT/PRE loop over `aggressors` with a fixed on- and off-time.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectSpec {
    pub bank: DramAddress,
    pub aggressors: Vec<u32>,
    pub t_aggon: Nanos,
    pub t_aggoff: Nanos,
    /// Total number of activations over all aggressors.
    pub acts: u64,
}

impl DirectSpec {
    pub fn single(bank: DramAddress, aggressor: u32, t_aggon: Nanos, acts: u64, timing: &TimingParams) -> Self {
        Self {
            bank,
            aggressors: vec![aggressor],
            t_aggon,
            t_aggoff: timing.t_rp,
            acts,
        }
    }

    /// Aggressors directly above and below `victim`, alternating.
    pub fn double(bank: DramAddress, victim: u32, t_aggon: Nanos, acts: u64, timing: &TimingParams) -> Self {
        Self {
            bank,
            aggressors: vec![victim - 1, victim + 1],
            t_aggon,
            t_aggoff: timing.t_rp,
            acts,
        }
    }

    pub fn onoff(
        bank: DramAddress,
        aggressors: Vec<u32>,
        delta_ta2a: Nanos,
        on_fraction: f64,
        acts: u64,
        timing: &TimingParams,
    ) -> Result<Self, PatternError> {
        let (t_aggon, t_aggoff) = onoff_times(delta_ta2a, on_fraction, timing)?;
        Ok(Self {
            bank,
            aggressors,
            t_aggon,
            t_aggoff,
            acts,
        })
    }

    pub fn period(&self) -> Nanos {
        self.t_aggon + self.t_aggoff
    }
}

/// On- and off-time of the ONOFF pattern for a given extra A2A time.
pub fn onoff_times(
    delta_ta2a: Nanos,
    on_fraction: f64,
    timing: &TimingParams,
) -> Result<(Nanos, Nanos), PatternError> {
    if !(0.0..=1.0).contains(&on_fraction) {
        return Err(PatternError::Fraction(on_fraction));
    }
    let on_extra = (on_fraction * delta_ta2a as f64).round() as Nanos;
    Ok((on_extra + timing.t_ras, delta_ta2a - on_extra + timing.t_rp))
}

/// Largest activation count whose program fits in `budget`.
pub fn max_acts_within(t_aggon: Nanos, t_aggoff: Nanos, budget: Nanos) -> u64 {
    budget / (t_aggon + t_aggoff)
}

/// The conventional single-sided RowHammer loop: ACT, PRE after tRAS, next
/// ACT after tRP.
pub fn gen_rowhammer(bank: DramAddress, aggressor: u32, acts: u64, timing: &TimingParams) -> Vec<Command> {
    let mut log = Vec::with_capacity(2 * acts as usize);
    let addr = bank.with_row(aggressor).with_column(0);
    for i in 0..acts {
        let t = i * timing.t_rc;
        log.push(Command::new(CommandKind::Act, addr, t));
        log.push(Command::new(CommandKind::Pre, addr, t + timing.t_ras));
    }
    log
}

/// Direct command log; periodic refresh is not part of the program.
pub fn gen_direct(spec: &DirectSpec, timing: &TimingParams, budget: Nanos) -> Result<Vec<Command>, PatternError> {
    if spec.aggressors.is_empty() {
        return Err(PatternError::NoAggressors);
    }
    if spec.t_aggon < timing.t_ras {
        return Err(PatternError::OnTimeBelowTras {
            t_aggon: spec.t_aggon,
            t_ras: timing.t_ras,
        });
    }
    if spec.t_aggoff < timing.t_rp {
        return Err(PatternError::OffTimeBelowTrp {
            t_aggoff: spec.t_aggoff,
            t_rp: timing.t_rp,
        });
    }
    let required = spec.acts as u128 * spec.period() as u128;
    if required > budget as u128 {
        return Err(PatternError::Infeasible { required, budget });
    }
    let mut log = Vec::with_capacity(2 * spec.acts as usize);
    let mut t = 0;
    for i in 0..spec.acts {
        let row = spec.aggressors[(i % spec.aggressors.len() as u64) as usize];
        let addr = spec.bank.with_row(row).with_column(0);
        log.push(Command::new(CommandKind::Act, addr, t));
        log.push(Command::new(CommandKind::Pre, addr, t + spec.t_aggon));
        t += spec.period();
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlushVariant {
    /// Reads of one aggressor visit are issued back to back.
    #[default]
    BatchedFlush,
    /// Reads are spread out, holding the row open longer.
    InterleavedFlush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrrBypassSpec {
    #[serde(skip)]
    pub bank: DramAddress,
    pub victim: u32,
    pub num_aggr_acts: u32,
    pub num_reads: u32,
    pub num_dummy: u32,
    pub dummy_acts: u32,
    pub dummy_distance: u32,
    pub dummy_spacing: u32,
    pub variant: FlushVariant,
    /// Number of tREFI windows the pattern runs for.
    pub iterations: u32,
    /// Start of each window's dummy phase after the tREFI boundary.
    pub offset_ns: Nanos,
}

impl Default for TrrBypassSpec {
    fn default() -> Self {
        Self {
            bank: DramAddress::default(),
            victim: 20_000,
            num_aggr_acts: 2,
            num_reads: 16,
            num_dummy: 16,
            dummy_acts: 4,
            dummy_distance: 200,
            dummy_spacing: 4,
            variant: FlushVariant::BatchedFlush,
            iterations: 128,
            offset_ns: 400,
        }
    }
}

impl TrrBypassSpec {
    pub fn aggressors(&self) -> (u32, u32) {
        (self.victim - 1, self.victim + 1)
    }

    pub fn dummy_rows(&self) -> Vec<u32> {
        (0..self.num_dummy)
            .map(|i| self.victim + self.dummy_distance + self.dummy_spacing * i)
            .collect()
    }

    pub fn read_spacing(&self, timing: &TimingParams) -> Nanos {
        match self.variant {
            FlushVariant::BatchedFlush => timing.t_col,
            FlushVariant::InterleavedFlush => 2 * timing.t_col,
        }
    }

    /// Time between consecutive aggressor visits.
    pub fn visit_period(&self, timing: &TimingParams) -> Nanos {
        let n = self.num_reads.max(1) as Nanos;
        let reads = timing.t_rcd + (n - 1) * self.read_spacing(timing) + timing.t_col;
        timing.t_rp + timing.t_ras.max(reads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrace {
    pub requests: Vec<MemoryRequest>,
    pub warnings: Vec<String>,
}

fn push_read(out: &mut Vec<MemoryRequest>, arrival: Nanos, addr: DramAddress) {
    let tag = out.len() as u64;
    out.push(MemoryRequest {
        arrival,
        kind: RequestKind::Read,
        addr,
        tag,
    });
}

fn sort_by_arrival(reqs: &mut [MemoryRequest]) {
    reqs.sort_by_key(|r| (r.arrival, r.tag));
    for (i, r) in reqs.iter_mut().enumerate() {
        r.tag = i as u64;
    }
}

/// Refresh-synchronized TRR-bypass trace. Each tREFI window holds the dummy
/// phase right after the REF and the aggressor rounds right before the next
/// one, so the sampler only ever sees dummy rows first.
pub fn gen_trr_bypass(spec: &TrrBypassSpec, timing: &TimingParams, rows: u32) -> Result<GeneratedTrace, PatternError> {
    let dummies = spec.dummy_rows();
    for &r in dummies.iter().chain([spec.victim - 1, spec.victim + 1].iter()) {
        if r >= rows {
            return Err(PatternError::RowOutOfRange { row: r as i64, rows });
        }
    }
    if spec.victim == 0 {
        return Err(PatternError::RowOutOfRange { row: -1, rows });
    }
    let (a1, a2) = spec.aggressors();
    let s = spec.read_spacing(timing);
    let visit = spec.visit_period(timing);
    let dummy_len = (spec.num_dummy * spec.dummy_acts) as Nanos * timing.t_rc;
    let aggr_len = 2 * spec.num_aggr_acts as Nanos * visit;
    let mut warnings = Vec::new();
    let overlong = spec.offset_ns + dummy_len + aggr_len > timing.t_refi;
    if overlong {
        warnings.push(format!(
            "pattern needs {} ns per iteration, longer than tREFI ({} ns)",
            spec.offset_ns + dummy_len + aggr_len,
            timing.t_refi
        ));
    }
    let mut out = Vec::new();
    for k in 0..spec.iterations as Nanos {
        let window = k * timing.t_refi;
        let d0 = window + spec.offset_ns;
        let mut j = 0;
        for _ in 0..spec.dummy_acts {
            for i in 0..spec.num_dummy as Nanos {
                let row = dummies[((i + k) % spec.num_dummy as Nanos) as usize];
                push_read(&mut out, d0 + j * timing.t_rc, spec.bank.with_row(row));
                j += 1;
            }
        }
        let a0 = if overlong {
            d0 + dummy_len
        } else {
            window + timing.t_refi - aggr_len
        };
        for v in 0..2 * spec.num_aggr_acts as Nanos {
            let row = if v % 2 == 0 { a1 } else { a2 };
            let base = a0 + v * visit;
            for c in 0..spec.num_reads.max(1) as Nanos {
                let addr = spec.bank.with_row(row).with_column(c as u32);
                push_read(&mut out, base + c * s, addr);
            }
        }
    }
    sort_by_arrival(&mut out);
    Ok(GeneratedTrace {
        requests: out,
        warnings,
    })
}

/// Aggressor visits of a fixed open duration, each followed by one access
/// to a far row that closes the aggressor and an idle off period.
#[derive(Debug, Clone, PartialEq)]
pub struct OnoffTraceSpec {
    pub bank: DramAddress,
    pub aggressors: Vec<u32>,
    pub closer_row: u32,
    /// Reads per visit, one every `read_spacing` ns.
    pub reads: u32,
    pub read_spacing: Nanos,
    pub off_ns: Nanos,
    pub visits: u64,
    pub start: Nanos,
}

pub fn gen_onoff_trace(spec: &OnoffTraceSpec, timing: &TimingParams) -> GeneratedTrace {
    let mut out = Vec::new();
    let on = timing.t_rcd + (spec.reads.max(1) as Nanos - 1) * spec.read_spacing + timing.t_col;
    let on = on.max(timing.t_ras);
    let mut t = spec.start;
    for v in 0..spec.visits {
        let row = spec.aggressors[(v % spec.aggressors.len() as u64) as usize];
        for c in 0..spec.reads.max(1) as Nanos {
            push_read(
                &mut out,
                t + c * spec.read_spacing,
                spec.bank.with_row(row).with_column(c as u32),
            );
        }
        let close = t + timing.t_rp + on;
        push_read(&mut out, close, spec.bank.with_row(spec.closer_row));
        t = close + timing.t_rp + timing.t_ras + spec.off_ns.max(timing.t_rp);
    }
    sort_by_arrival(&mut out);
    GeneratedTrace {
        requests: out,
        warnings: Vec::new(),
    }
}

/// One read per activation, cycling over `aggressors` every `spacing` ns.
pub fn gen_hammer_trace(
    bank: DramAddress,
    aggressors: &[u32],
    acts: u64,
    spacing: Nanos,
    start: Nanos,
) -> GeneratedTrace {
    let mut out = Vec::with_capacity(acts as usize);
    for i in 0..acts {
        let row = aggressors[(i % aggressors.len() as u64) as usize];
        push_read(&mut out, start + i * spacing, bank.with_row(row));
    }
    GeneratedTrace {
        requests: out,
        warnings: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::{DramState, Geometry};

    fn t() -> TimingParams {
        TimingParams::default()
    }

    #[test]
    fn single_sided_arithmetic() {
        let spec = DirectSpec::single(DramAddress::default(), 5, 36, 3, &t());
        let log = gen_direct(&spec, &t(), DEFAULT_BUDGET_NS).unwrap();
        let times: Vec<_> = log.iter().map(|c| c.time).collect();
        assert_eq!(times, vec![0, 36, 51, 87, 102, 138]);
    }

    #[test]
    fn direct_at_tras_equals_rowhammer() {
        let spec = DirectSpec::single(DramAddress::default(), 5, 36, 1000, &t());
        assert_eq!(
            gen_direct(&spec, &t(), DEFAULT_BUDGET_NS).unwrap(),
            gen_rowhammer(DramAddress::default(), 5, 1000, &t())
        );
    }

    #[test]
    fn double_sided_alternates() {
        let spec = DirectSpec::double(DramAddress::default(), 11, 36, 4, &t());
        let rows: Vec<_> = gen_direct(&spec, &t(), DEFAULT_BUDGET_NS)
            .unwrap()
            .iter()
            .filter(|c| c.kind == CommandKind::Act)
            .map(|c| c.addr.row)
            .collect();
        assert_eq!(rows, vec![10, 12, 10, 12]);
    }

    #[test]
    fn onoff_formula() {
        assert_eq!(onoff_times(240, 0.25, &t()).unwrap(), (96, 195));
        assert!(onoff_times(240, 1.5, &t()).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let spec = DirectSpec::single(DramAddress::default(), 5, 30_000_000, 2, &t());
        assert!(matches!(
            gen_direct(&spec, &t(), DEFAULT_BUDGET_NS),
            Err(PatternError::Infeasible { .. })
        ));
        let spec = DirectSpec::single(DramAddress::default(), 5, 35, 2, &t());
        assert!(gen_direct(&spec, &t(), DEFAULT_BUDGET_NS).is_err());
    }

    #[test]
    fn direct_logs_are_legal() {
        let spec = DirectSpec::onoff(DramAddress::default(), vec![3, 5], 6000, 0.75, 50, &t()).unwrap();
        let log = gen_direct(&spec, &t(), DEFAULT_BUDGET_NS).unwrap();
        DramState::check_log(&Geometry::default(), &t(), &log).unwrap();
    }

    #[test]
    fn trr_bypass_shape() {
        let spec = TrrBypassSpec {
            num_reads: 1,
            iterations: 2,
            ..TrrBypassSpec::default()
        };
        let g = gen_trr_bypass(&spec, &t(), 65536).unwrap();
        assert!(g.warnings.is_empty());
        let per_window = 16 * 4 + 2 * 2;
        assert_eq!(g.requests.len(), 2 * per_window);
        let dummy_reads = g
            .requests
            .iter()
            .filter(|r| r.addr.row >= spec.victim + 100)
            .count();
        assert_eq!(dummy_reads, 2 * 64);
        assert!(g.requests.windows(2).all(|w| w[0].arrival <= w[1].arrival));
    }

    #[test]
    fn trr_bypass_many_reads() {
        let spec = TrrBypassSpec {
            num_reads: 64,
            num_aggr_acts: 2,
            iterations: 1,
            ..TrrBypassSpec::default()
        };
        let g = gen_trr_bypass(&spec, &t(), 65536).unwrap();
        let aggr: Vec<_> = g.requests.iter().filter(|r| r.addr.row.abs_diff(spec.victim) == 1).collect();
        assert_eq!(aggr.len(), 4 * 64);
        let cols: std::collections::BTreeSet<_> = aggr.iter().map(|r| r.addr.column).collect();
        assert_eq!(cols.len(), 64);
        let long = TrrBypassSpec {
            num_aggr_acts: 5,
            ..spec
        };
        assert_eq!(gen_trr_bypass(&long, &t(), 65536).unwrap().warnings.len(), 1);
    }
}
