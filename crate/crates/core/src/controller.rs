//! Memory controller: per-bank request queues, FR-FCFS scheduling, row
//! policies and refresh with postponement.
//!
//! The simulation is event driven. At every decision time each channel
//! issues at most one command, chosen by priority among the commands that
//! are legal at that instant:
//!
//! 1. the forced PRE of a capped-open row,
//! 2. refresh work of a rank (close its banks, then REF),
//! 3. row hits, oldest first,
//! 4. misses (ACT, or PRE of a conflicting row), oldest first,
//! 5. the idle PRE of the closed-page policy.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disturbance::{
    reaches, BitFlip, CellConfig, CellProfile, DisturbanceLedger, MechanismModel, RowCells,
};
use crate::dram::{
    Command, CommandKind, DramAddress, DramError, DramState, Event, Geometry, Nanos,
    RefreshSchedule, RowRemap, TimingParams,
};
use crate::mitigation::{Mitigation, MitigationParams};
use crate::seed::derive_seed;
use crate::trace::{MemoryRequest, RequestKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowPolicy {
    Open,
    Closed,
    /// Open-page, but a row is closed `t_mro` after its ACT at the latest.
    CappedOpen(Nanos),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub row_policy: RowPolicy,
    pub queue_capacity: usize,
    /// Fixed time from a column command to request completion.
    pub column_latency: Nanos,
    pub refresh: bool,
    pub postpone_refresh: bool,
    pub record_commands: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            row_policy: RowPolicy::Open,
            queue_capacity: 64,
            column_latency: 15,
            refresh: true,
            postpone_refresh: true,
            record_commands: false,
        }
    }
}

/// Everything one simulation instance needs.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub geometry: Geometry,
    pub timing: TimingParams,
    pub remap: RowRemap,
    pub controller: ControllerConfig,
    pub model: MechanismModel,
    pub temperature: f64,
    pub cells: CellConfig,
    pub mitigation: MitigationParams,
    pub seed: u64,
}

impl Default for SimSetup {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            timing: TimingParams::default(),
            remap: RowRemap::Identity,
            controller: ControllerConfig::default(),
            model: MechanismModel::default(),
            temperature: 50.0,
            cells: CellConfig::default(),
            mitigation: MitigationParams::default(),
            seed: 0,
        }
    }
}

impl SimSetup {
    pub fn cell_profile(&self) -> CellProfile {
        CellProfile::new(
            self.cells.clone(),
            self.geometry.columns,
            derive_seed(self.seed, "cells"),
            self.timing.t_refw,
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error("request {tag} arrives at {arrival} ns, before the previous request")]
    Unordered { tag: u64, arrival: Nanos },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub requests: u64,
    pub served: u64,
    pub unserved: u64,
    pub acts: u64,
    pub pres: u64,
    pub column_commands: u64,
    pub refs: u64,
    pub row_hits: u64,
    pub hit_rate: f64,
    pub latency_mean_ns: f64,
    pub latency_p50_ns: u64,
    pub latency_p95_ns: u64,
    pub latency_p99_ns: u64,
    pub latency_max_ns: u64,
    pub preventive_refresh_events: u64,
    pub preventive_refresh_rows: u64,
    pub trr_refresh_rows: u64,
    pub max_refresh_debt: u32,
    pub backpressure_events: u64,
    /// Largest ACT count of one row within one aligned tREFW window.
    pub max_row_acts_per_window: u64,
    /// Power-of-two bucket upper bound -> number of (row, window) pairs.
    pub row_act_histogram: BTreeMap<u64, u64>,
    /// Power-of-two bucket lower bound (ns) -> number of activations.
    pub taggon_histogram: BTreeMap<u64, u64>,
    pub taggon_min_ns: u64,
    pub taggon_max_ns: u64,
    pub bitflips: Vec<BitFlip>,
    pub rows_with_bitflips: u64,
    pub end_time_ns: Nanos,
    #[serde(skip)]
    pub commands: Option<Vec<Command>>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    req: MemoryRequest,
    seq: u64,
}

#[derive(Debug, Default)]
struct BankQueue {
    queue: VecDeque<Pending>,
    overflow: VecDeque<Pending>,
    served_in_activation: u32,
    targets: Vec<u32>,
}

#[derive(Debug, Clone)]
struct RankRefresh {
    next_due: Nanos,
    debt: u32,
    refreshing: bool,
    pending: usize,
}

#[derive(Debug, Clone, Copy)]
enum Serve {
    None,
    Request { bank: usize, idx: usize },
}

#[derive(Debug, Default)]
struct Stats {
    acts: u64,
    pres: u64,
    cols: u64,
    refs: u64,
    hits: u64,
    latencies: Vec<u64>,
    pr_events: u64,
    pr_rows: u64,
    trr_rows: u64,
    max_debt: u32,
    backpressure: u64,
    window: u64,
    window_acts: HashMap<(usize, u32), u64>,
    max_row_acts: u64,
    row_hist: BTreeMap<u64, u64>,
    taggon_hist: BTreeMap<u64, u64>,
    taggon_min: u64,
    taggon_max: u64,
}

impl Stats {
    fn flush_window(&mut self) {
        for (_, n) in self.window_acts.drain() {
            self.max_row_acts = self.max_row_acts.max(n);
            *self.row_hist.entry(n.next_power_of_two()).or_default() += 1;
        }
    }
}

pub struct Controller {
    cfg: ControllerConfig,
    timing: TimingParams,
    model: MechanismModel,
    temperature: f64,
    dram: DramState,
    schedule: RefreshSchedule,
    ledger: DisturbanceLedger,
    profile: CellProfile,
    mitigation: Mitigation,
    banks: Vec<BankQueue>,
    ranks: Vec<RankRefresh>,
    banks_per_rank: usize,
    banks_per_channel: usize,
    channels: usize,
    ranks_per_channel: usize,
    arrivals: VecDeque<MemoryRequest>,
    last_arrival: Nanos,
    next_seq: u64,
    requests: u64,
    stats: Stats,
    flips: BTreeSet<BitFlip>,
    /// Cell populations of disturbed rows and how many cells of each
    /// mechanism already flipped.
    cells: HashMap<(usize, u32), (RowCells, [usize; 2])>,
    log: Vec<Command>,
    wake: Nanos,
    now: Nanos,
}

impl Controller {
    pub fn new(setup: &SimSetup) -> Self {
        let g = &setup.geometry;
        let mut model = setup.model.clone();
        model.t_ras = setup.timing.t_ras;
        let ranks = (g.channels * g.ranks) as usize;
        Self {
            cfg: setup.controller.clone(),
            timing: setup.timing.clone(),
            model,
            temperature: setup.temperature,
            dram: DramState::new(g.clone(), setup.timing.clone(), setup.remap.clone()),
            schedule: RefreshSchedule::new(g, &setup.timing),
            ledger: DisturbanceLedger::new(g.rows),
            profile: setup.cell_profile(),
            mitigation: Mitigation::new(&setup.mitigation, g, &setup.timing, setup.seed),
            banks: (0..g.total_banks()).map(|_| BankQueue::default()).collect(),
            ranks: vec![
                RankRefresh {
                    next_due: setup.timing.t_refi,
                    debt: 0,
                    refreshing: false,
                    pending: 0,
                };
                ranks
            ],
            banks_per_rank: g.banks_per_rank() as usize,
            banks_per_channel: g.banks_per_channel() as usize,
            channels: g.channels as usize,
            ranks_per_channel: g.ranks as usize,
            arrivals: VecDeque::new(),
            last_arrival: 0,
            next_seq: 0,
            requests: 0,
            stats: Stats {
                taggon_min: u64::MAX,
                ..Stats::default()
            },
            flips: BTreeSet::new(),
            cells: HashMap::new(),
            log: Vec::new(),
            wake: 0,
            now: 0,
        }
    }

    /// Makes a request visible to the scheduler from its arrival time on.
    pub fn enqueue(&mut self, req: MemoryRequest) -> Result<(), SimError> {
        self.dram.geometry.check(&req.addr)?;
        if req.arrival < self.last_arrival {
            return Err(SimError::Unordered {
                tag: req.tag,
                arrival: req.arrival,
            });
        }
        self.last_arrival = req.arrival;
        self.requests += 1;
        self.arrivals.push_back(req);
        Ok(())
    }

    pub fn queue_len(&self, bank: usize) -> usize {
        self.banks[bank].queue.len()
    }

    pub fn backpressure_events(&self) -> u64 {
        self.stats.backpressure
    }

    pub fn dram(&self) -> &DramState {
        &self.dram
    }

    pub fn ledger(&self) -> &DisturbanceLedger {
        &self.ledger
    }

    fn admit(&mut self, now: Nanos) {
        while let Some(r) = self.arrivals.front() {
            if r.arrival > now {
                break;
            }
            let req = self.arrivals.pop_front().expect("front exists");
            let bank = self.dram.geometry.bank_index(&req.addr);
            let rank = self.dram.geometry.rank_index(&req.addr);
            let p = Pending {
                req,
                seq: self.next_seq,
            };
            self.next_seq += 1;
            self.ranks[rank].pending += 1;
            let q = &mut self.banks[bank];
            if q.queue.len() < self.cfg.queue_capacity && q.overflow.is_empty() {
                q.queue.push_back(p);
            } else {
                q.overflow.push_back(p);
                self.stats.backpressure += 1;
            }
        }
    }

    fn has_work(&self) -> bool {
        !self.arrivals.is_empty() || self.ranks.iter().any(|r| r.pending > 0)
    }

    fn update_refresh(&mut self, now: Nanos) {
        if !self.cfg.refresh {
            return;
        }
        let force = if self.cfg.postpone_refresh {
            self.timing.max_postponed_refs.max(1)
        } else {
            1
        };
        for r in &mut self.ranks {
            while now >= r.next_due {
                r.debt += 1;
                r.next_due += self.timing.t_refi;
            }
            self.stats.max_debt = self.stats.max_debt.max(r.debt);
            if !r.refreshing && r.debt > 0 && (r.debt >= force || r.pending == 0) {
                r.refreshing = true;
            }
        }
    }

    /// Issues the commands due at `now` (at most one per channel).
    pub fn tick(&mut self, now: Nanos) -> Result<Vec<Command>, SimError> {
        self.now = now;
        self.admit(now);
        self.update_refresh(now);
        let mut wake = u64::MAX;
        if let Some(a) = self.arrivals.front() {
            wake = wake.min(a.arrival);
        }
        if self.cfg.refresh {
            for r in &self.ranks {
                wake = wake.min(r.next_due);
            }
        }
        let mut issued = Vec::new();
        for ch in 0..self.channels {
            if let Some((cmd, serve)) = self.pick(ch, now, &mut wake) {
                self.issue(cmd, serve)?;
                issued.push(cmd);
            }
        }
        self.wake = if issued.is_empty() { wake } else { now + 1 };
        Ok(issued)
    }

    /// Earliest time something may happen after the last tick.
    pub fn next_wake(&self) -> Nanos {
        self.wake
    }

    fn pick(&self, ch: usize, now: Nanos, wake: &mut Nanos) -> Option<(Command, Serve)> {
        let mut best: Option<((u8, u64), Command, Serve)> = None;
        let mut consider = |class: u8, seq: u64, earliest: Option<Nanos>, kind: CommandKind, addr: DramAddress, serve: Serve| {
            let Some(e) = earliest else { return };
            if e <= now {
                let key = (class, seq);
                if best.as_ref().is_none_or(|b| key < b.0) {
                    best = Some((key, Command::new(kind, addr, now), serve));
                }
            } else if e < *wake {
                *wake = e;
            }
        };
        let cap = match self.cfg.row_policy {
            RowPolicy::CappedOpen(t) => Some(t),
            _ => None,
        };
        let t_col = self.timing.t_col;
        let first = ch * self.banks_per_channel;
        for b in first..first + self.banks_per_channel {
            let rank = b / self.banks_per_rank;
            let refreshing = self.ranks[rank].refreshing;
            let st = self.dram.bank(b);
            let q = &self.banks[b];
            let bank_addr = self.dram.geometry.bank_address(b);
            if let Some(open) = st.open_row {
                let row_addr = bank_addr.with_row(open);
                let e_pre = self.dram.earliest(CommandKind::Pre, &row_addr, now);
                if let Some(t_mro) = cap {
                    let forced = st.opened_at + t_mro;
                    consider(0, 0, e_pre.map(|e| e.max(forced)), CommandKind::Pre, row_addr, Serve::None);
                }
                if refreshing {
                    consider(1, 0, e_pre, CommandKind::Pre, row_addr, Serve::None);
                    continue;
                }
                if let Some(idx) = q.queue.iter().position(|p| p.req.addr.row == open) {
                    let p = &q.queue[idx];
                    let kind = match p.req.kind {
                        RequestKind::Read => CommandKind::Rd,
                        RequestKind::Write => CommandKind::Wr,
                    };
                    let mut e = self.dram.earliest(kind, &p.req.addr, now);
                    if let (Some(t_mro), Some(at)) = (cap, e) {
                        if at + t_col > st.opened_at + t_mro {
                            e = None;
                        }
                    }
                    consider(2, p.seq, e, kind, p.req.addr, Serve::Request { bank: b, idx });
                } else if let Some(p) = q.queue.front() {
                    consider(3, p.seq, e_pre, CommandKind::Pre, row_addr, Serve::None);
                } else if self.cfg.row_policy == RowPolicy::Closed {
                    consider(4, 0, e_pre, CommandKind::Pre, row_addr, Serve::None);
                }
            } else if !refreshing {
                if let Some(p) = q.queue.front() {
                    let e = self.dram.earliest(CommandKind::Act, &p.req.addr, now);
                    consider(3, p.seq, e, CommandKind::Act, p.req.addr, Serve::None);
                }
            }
        }
        let first_rank = ch * self.ranks_per_channel;
        for rank in first_rank..first_rank + self.ranks_per_channel {
            if !self.ranks[rank].refreshing {
                continue;
            }
            let banks = rank * self.banks_per_rank..(rank + 1) * self.banks_per_rank;
            if banks.clone().all(|b| self.dram.bank(b).open_row.is_none()) {
                let addr = self.dram.geometry.bank_address(rank * self.banks_per_rank);
                let e = self.dram.earliest(CommandKind::Ref, &addr, now);
                consider(1, 0, e, CommandKind::Ref, addr, Serve::None);
            }
        }
        best.map(|(_, c, s)| (c, s))
    }

    fn record_close(&mut self, bank: usize, phys_row: u32, on_time: Nanos) {
        self.ledger
            .record_activation(&self.model, bank, phys_row, on_time, self.temperature);
        let rows = self.dram.geometry.rows;
        for d in 1..=3u32 {
            for v in [phys_row.checked_sub(d), phys_row.checked_add(d).filter(|&r| r < rows)]
                .into_iter()
                .flatten()
            {
                let dose = self.ledger.get(bank, v);
                if reaches(dose.hammer, self.model.theta_h) || reaches(dose.press, self.model.theta_p) {
                    let profile = &self.profile;
                    let (cells, done) = self
                        .cells
                        .entry((bank, v))
                        .or_insert_with(|| (profile.row(bank, v), [0, 0]));
                    let flips = &mut self.flips;
                    cells.disturbed_since(bank, v, &self.model, &dose, done, |f| {
                        flips.insert(f);
                    });
                }
            }
        }
    }

    fn issue(&mut self, cmd: Command, serve: Serve) -> Result<(), SimError> {
        if self.cfg.record_commands {
            self.log.push(cmd);
        }
        let event = self.dram.apply(&cmd)?;
        let now = cmd.time;
        match event {
            Event::RowOpened { bank, phys_row, .. } => {
                self.stats.acts += 1;
                let w = now / self.timing.t_refw;
                if w != self.stats.window {
                    self.stats.flush_window();
                    self.stats.window = w;
                }
                *self.stats.window_acts.entry((bank, phys_row)).or_default() += 1;
                self.banks[bank].served_in_activation = 0;
                let targets = self.mitigation.on_act(bank, phys_row, now);
                self.banks[bank].targets.extend(targets);
            }
            Event::RowClosed {
                bank,
                phys_row,
                on_time,
                ..
            } => {
                self.stats.pres += 1;
                let bucket = 1u64 << (63 - on_time.max(1).leading_zeros());
                *self.stats.taggon_hist.entry(bucket).or_default() += 1;
                self.stats.taggon_min = self.stats.taggon_min.min(on_time);
                self.stats.taggon_max = self.stats.taggon_max.max(on_time);
                self.record_close(bank, phys_row, on_time);
                let mut targets = std::mem::take(&mut self.banks[bank].targets);
                if !targets.is_empty() {
                    targets.sort_unstable();
                    targets.dedup();
                    for &t in &targets {
                        self.ledger.refresh_row(bank, t, now);
                    }
                    let n = targets.len() as u64;
                    self.stats.pr_events += 1;
                    self.stats.pr_rows += n;
                    let until = now + self.timing.t_rp + n * self.timing.t_rc;
                    self.dram.occupy_for_refresh_work(bank, until);
                }
            }
            Event::ColumnAccess { bank, .. } => {
                self.stats.cols += 1;
                let Serve::Request { bank: sb, idx } = serve else {
                    unreachable!("column command without a request");
                };
                debug_assert_eq!(sb, bank);
                let q = &mut self.banks[bank];
                let p = q.queue.remove(idx).expect("picked request exists");
                if q.served_in_activation > 0 {
                    self.stats.hits += 1;
                }
                q.served_in_activation += 1;
                if let Some(o) = q.overflow.pop_front() {
                    q.queue.push_back(o);
                }
                let rank = self.dram.geometry.rank_index(&p.req.addr);
                self.ranks[rank].pending -= 1;
                self.stats
                    .latencies
                    .push(now + self.cfg.column_latency - p.req.arrival);
            }
            Event::RefreshPerformed { rank, .. } => {
                self.stats.refs += 1;
                let r = &mut self.ranks[rank];
                r.debt = r.debt.saturating_sub(1);
                r.refreshing = false;
                let rows = self.schedule.rows_refreshed_by(rank);
                let banks = rank * self.banks_per_rank..(rank + 1) * self.banks_per_rank;
                for b in banks {
                    for row in rows.clone() {
                        self.ledger.periodic_refresh(b, row);
                    }
                }
                for (b, rows) in self.mitigation.on_ref(rank) {
                    self.stats.trr_rows += rows.len() as u64;
                    for row in rows {
                        self.ledger.refresh_row(b, row, now);
                    }
                }
            }
        }
        Ok(())
    }

    /// Closes every open row at the earliest legal time.
    fn drain(&mut self) -> Result<(), SimError> {
        let mut now = self.now + 1;
        loop {
            let mut wake = u64::MAX;
            let mut any = false;
            for b in 0..self.banks.len() {
                let st = self.dram.bank(b);
                let Some(row) = st.open_row else { continue };
                any = true;
                let addr = self.dram.geometry.bank_address(b).with_row(row);
                let e = self.dram.earliest(CommandKind::Pre, &addr, now).expect("row open");
                wake = wake.min(e);
            }
            if !any {
                break;
            }
            now = wake;
            // one command per channel per tick
            let mut used = vec![false; self.channels];
            for b in 0..self.banks.len() {
                let ch = b / self.banks_per_channel;
                let st = self.dram.bank(b);
                let Some(row) = st.open_row else { continue };
                if used[ch] {
                    continue;
                }
                let addr = self.dram.geometry.bank_address(b).with_row(row);
                if self.dram.earliest(CommandKind::Pre, &addr, now) == Some(now) {
                    self.issue(Command::new(CommandKind::Pre, addr, now), Serve::None)?;
                    used[ch] = true;
                }
            }
            self.now = now;
            now += 1;
        }
        Ok(())
    }

    /// Runs until every request is served (and, with a horizon, until the
    /// horizon is reached), then closes open rows.
    pub fn run(&mut self, horizon: Option<Nanos>) -> Result<(), SimError> {
        let mut now = 0;
        loop {
            if let Some(h) = horizon {
                if now >= h {
                    break;
                }
            }
            self.tick(now)?;
            if horizon.is_none() && !self.has_work() {
                break;
            }
            let next = self.wake;
            if next == u64::MAX {
                break;
            }
            now = next.max(now + 1);
        }
        self.drain()
    }

    pub fn finish(mut self) -> SimulationReport {
        self.stats.flush_window();
        let s = &mut self.stats;
        let served = s.latencies.len() as u64;
        let mut lat = std::mem::take(&mut s.latencies);
        lat.sort_unstable();
        let pct = |q: f64| -> u64 {
            if lat.is_empty() {
                return 0;
            }
            let rank = ((q * lat.len() as f64).ceil() as usize).clamp(1, lat.len());
            lat[rank - 1]
        };
        let mean = if lat.is_empty() {
            0.0
        } else {
            lat.iter().map(|&x| x as f64).sum::<f64>() / lat.len() as f64
        };
        let bitflips: Vec<BitFlip> = self.flips.iter().copied().collect();
        let rows: BTreeSet<(usize, u32)> = bitflips.iter().map(|f| (f.bank, f.row)).collect();
        SimulationReport {
            requests: self.requests,
            served,
            unserved: self.requests - served,
            acts: s.acts,
            pres: s.pres,
            column_commands: s.cols,
            refs: s.refs,
            row_hits: s.hits,
            hit_rate: if served == 0 { 0.0 } else { s.hits as f64 / served as f64 },
            latency_mean_ns: mean,
            latency_p50_ns: pct(0.50),
            latency_p95_ns: pct(0.95),
            latency_p99_ns: pct(0.99),
            latency_max_ns: lat.last().copied().unwrap_or(0),
            preventive_refresh_events: s.pr_events,
            preventive_refresh_rows: s.pr_rows,
            trr_refresh_rows: s.trr_rows,
            max_refresh_debt: s.max_debt,
            backpressure_events: s.backpressure,
            max_row_acts_per_window: s.max_row_acts,
            row_act_histogram: std::mem::take(&mut s.row_hist),
            taggon_histogram: std::mem::take(&mut s.taggon_hist),
            taggon_min_ns: if s.taggon_min == u64::MAX { 0 } else { s.taggon_min },
            taggon_max_ns: s.taggon_max,
            bitflips,
            rows_with_bitflips: rows.len() as u64,
            end_time_ns: self.now,
            commands: if self.cfg.record_commands {
                Some(std::mem::take(&mut self.log))
            } else {
                None
            },
        }
    }
}

/// Simulates `trace` to completion (or to `horizon`) and reports.
pub fn run_trace(
    trace: &[MemoryRequest],
    setup: &SimSetup,
    horizon: Option<Nanos>,
) -> Result<SimulationReport, SimError> {
    let mut c = Controller::new(setup);
    for r in trace {
        c.enqueue(*r)?;
    }
    c.run(horizon)?;
    Ok(c.finish())
}
