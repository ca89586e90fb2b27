//! DRAM organization, command legality and bank state.
//!
//! The model is command-level with nanosecond timestamps. Only the
//! constraints that shape row open/close timing are enforced: tRAS, tRP,
//! tRC, tRCD, the column-access occupancy and refresh (all banks of a rank
//! precharged, tRFC busy period). Data-bus timing is not modeled.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds on the simulation clock.
pub type Nanos = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub channels: u32,
    pub ranks: u32,
    pub bankgroups: u32,
    pub banks_per_group: u32,
    pub rows: u32,
    pub columns: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            channels: 1,
            ranks: 1,
            bankgroups: 4,
            banks_per_group: 4,
            rows: 65536,
            columns: 8192,
        }
    }
}

impl Geometry {
    pub fn banks_per_rank(&self) -> u32 {
        self.bankgroups * self.banks_per_group
    }

    pub fn banks_per_channel(&self) -> u32 {
        self.ranks * self.banks_per_rank()
    }

    pub fn total_banks(&self) -> usize {
        (self.channels * self.banks_per_channel()) as usize
    }

    /// Flat bank index; addresses with equal index are "same-bank".
    pub fn bank_index(&self, addr: &DramAddress) -> usize {
        let per_rank = self.banks_per_rank();
        let idx = ((addr.channel * self.ranks + addr.rank) * per_rank)
            + addr.bankgroup * self.banks_per_group
            + addr.bank;
        idx as usize
    }

    /// Flat rank index (channel-major).
    pub fn rank_index(&self, addr: &DramAddress) -> usize {
        (addr.channel * self.ranks + addr.rank) as usize
    }

    /// Inverse of [`Geometry::bank_index`]; row and column are zero.
    pub fn bank_address(&self, bank: usize) -> DramAddress {
        let bank = bank as u32;
        let per_rank = self.banks_per_rank();
        let rank_flat = bank / per_rank;
        let in_rank = bank % per_rank;
        DramAddress {
            channel: rank_flat / self.ranks,
            rank: rank_flat % self.ranks,
            bankgroup: in_rank / self.banks_per_group,
            bank: in_rank % self.banks_per_group,
            row: 0,
            column: 0,
        }
    }

    pub fn check(&self, addr: &DramAddress) -> Result<(), DramError> {
        let fields = [
            ("channel", addr.channel, self.channels),
            ("rank", addr.rank, self.ranks),
            ("bankgroup", addr.bankgroup, self.bankgroups),
            ("bank", addr.bank, self.banks_per_group),
            ("row", addr.row, self.rows),
            ("column", addr.column, self.columns),
        ];
        for (field, value, limit) in fields {
            if value >= limit {
                return Err(DramError::Geometry {
                    field,
                    value,
                    limit,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct DramAddress {
    pub channel: u32,
    pub rank: u32,
    pub bankgroup: u32,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
}

impl DramAddress {
    pub fn with_row(mut self, row: u32) -> Self {
        self.row = row;
        self
    }

    pub fn with_column(mut self, column: u32) -> Self {
        self.column = column;
        self
    }

    pub fn same_bank(&self, other: &DramAddress) -> bool {
        (self.channel, self.rank, self.bankgroup, self.bank)
            == (other.channel, other.rank, other.bankgroup, other.bank)
    }
}

/// Logical to physical row mapping inside a bank. Adjacency is physical.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RowRemap {
    #[default]
    Identity,
    /// Flip the low bits of the row address selected by `mask`.
    XorMask { mask: u32 },
}

impl RowRemap {
    pub fn to_physical(&self, row: u32) -> u32 {
        match self {
            RowRemap::Identity => row,
            RowRemap::XorMask { mask } => row ^ mask,
        }
    }

    pub fn to_logical(&self, row: u32) -> u32 {
        // both variants are involutions
        self.to_physical(row)
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_ras: Nanos,
    pub t_rp: Nanos,
    pub t_rc: Nanos,
    pub t_rcd: Nanos,
    /// Column access time: minimum spacing between column commands to a
    /// bank, and the time a column access needs before the row may close.
    pub t_col: Nanos,
    pub t_refi: Nanos,
    pub t_refw: Nanos,
    pub t_rfc: Nanos,
    pub max_postponed_refs: u32,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            t_ras: 36,
            t_rp: 15,
            t_rc: 51,
            t_rcd: 15,
            t_col: 15,
            t_refi: 7_800,
            // 8192 REF slots of tREFI
            t_refw: 63_897_600,
            t_rfc: 350,
            max_postponed_refs: 8,
        }
    }
}

impl TimingParams {
    /// Number of REF slots in one refresh window.
    pub fn refresh_slots(&self) -> u64 {
        self.t_refw / self.t_refi
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.t_ras == 0 || self.t_rp == 0 {
            return Err(("timing.t_ras", "t_ras and t_rp must be positive".into()));
        }
        if self.t_rc != self.t_ras + self.t_rp {
            return Err((
                "timing.t_rc",
                format!("must equal t_ras + t_rp = {}", self.t_ras + self.t_rp),
            ));
        }
        if self.t_refi == 0 || !self.t_refw.is_multiple_of(self.t_refi) {
            return Err((
                "timing.t_refw",
                "must be a positive integer multiple of t_refi".into(),
            ));
        }
        if self.max_postponed_refs > 8 {
            return Err(("timing.max_postponed_refs", "must be <= 8".into()));
        }
        if self.t_rfc >= self.t_refi {
            return Err(("timing.t_rfc", "must be smaller than t_refi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandKind {
    Act,
    Pre,
    Rd,
    Wr,
    Ref,
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CommandKind::Act => "ACT",
            CommandKind::Pre => "PRE",
            CommandKind::Rd => "RD",
            CommandKind::Wr => "WR",
            CommandKind::Ref => "REF",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub kind: CommandKind,
    pub addr: DramAddress,
    pub time: Nanos,
}

impl Command {
    pub fn new(kind: CommandKind, addr: DramAddress, time: Nanos) -> Self {
        Self { kind, addr, time }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.addr;
        match self.kind {
            CommandKind::Ref => write!(f, "{} {} ch{} rk{}", self.time, self.kind, a.channel, a.rank),
            CommandKind::Act | CommandKind::Pre => write!(
                f,
                "{} {} ch{} rk{} bg{} ba{} row{}",
                self.time, self.kind, a.channel, a.rank, a.bankgroup, a.bank, a.row
            ),
            CommandKind::Rd | CommandKind::Wr => write!(
                f,
                "{} {} ch{} rk{} bg{} ba{} row{} col{}",
                self.time, self.kind, a.channel, a.rank, a.bankgroup, a.bank, a.row, a.column
            ),
        }
    }
}

/// A violated timing or state constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Violation {
    TRas,
    TRp,
    TRc,
    TRcd,
    TCol,
    TRfc,
    RefWithOpenBank,
    BankAlreadyOpen,
    BankNotOpen,
    RowMismatch,
    BankBusy,
    TimeOrder,
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::TRas => "tRAS",
            Violation::TRp => "tRP",
            Violation::TRc => "tRC",
            Violation::TRcd => "tRCD",
            Violation::TCol => "tCOL",
            Violation::TRfc => "tRFC",
            Violation::RefWithOpenBank => "REF-requires-precharged",
            Violation::BankAlreadyOpen => "bank-already-open",
            Violation::BankNotOpen => "bank-not-open",
            Violation::RowMismatch => "row-mismatch",
            Violation::BankBusy => "bank-busy",
            Violation::TimeOrder => "time-order",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Legal,
    Illegal(Violation),
}

impl Verdict {
    pub fn is_legal(&self) -> bool {
        matches!(self, Verdict::Legal)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DramError {
    #[error("address field {field}={value} outside geometry (limit {limit})")]
    Geometry {
        field: &'static str,
        value: u32,
        limit: u32,
    },
    #[error("hard fault: illegal {cmd} ({violation})")]
    HardFault { cmd: String, violation: Violation },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BankState {
    pub open_row: Option<u32>,
    pub opened_at: Nanos,
    pub last_precharge_at: Option<Nanos>,
    pub last_act_at: Option<Nanos>,
    pub last_col_at: Option<Nanos>,
    /// Refresh (tRFC) or preventive-refresh occupancy.
    pub busy_until: Nanos,
    pub refresh_busy: bool,
}

impl BankState {
    /// tAggON of the currently open row.
    pub fn on_time(&self, now: Nanos) -> Option<Nanos> {
        self.open_row.map(|_| now.saturating_sub(self.opened_at))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    RowOpened {
        bank: usize,
        row: u32,
        phys_row: u32,
        at: Nanos,
    },
    RowClosed {
        bank: usize,
        row: u32,
        phys_row: u32,
        opened_at: Nanos,
        closed_at: Nanos,
        on_time: Nanos,
    },
    ColumnAccess {
        bank: usize,
        row: u32,
        column: u32,
        write: bool,
        at: Nanos,
    },
    RefreshPerformed {
        rank: usize,
        at: Nanos,
    },
}

/// Per-bank state of one DRAM device set plus the per-channel issue clock.
#[derive(Debug, Clone)]
pub struct DramState {
    pub geometry: Geometry,
    pub timing: TimingParams,
    pub remap: RowRemap,
    banks: Vec<BankState>,
    last_issue: Vec<Option<Nanos>>,
}

impl DramState {
    pub fn new(geometry: Geometry, timing: TimingParams, remap: RowRemap) -> Self {
        let banks = vec![BankState::default(); geometry.total_banks()];
        let last_issue = vec![None; geometry.channels as usize];
        Self {
            geometry,
            timing,
            remap,
            banks,
            last_issue,
        }
    }

    pub fn bank(&self, idx: usize) -> &BankState {
        &self.banks[idx]
    }

    pub fn banks(&self) -> &[BankState] {
        &self.banks
    }

    pub fn bank_range_of_rank(&self, rank: usize) -> std::ops::Range<usize> {
        let per = self.geometry.banks_per_rank() as usize;
        rank * per..(rank + 1) * per
    }

    pub fn validate(&self, cmd: &Command) -> Result<Verdict, DramError> {
        self.geometry.check(&cmd.addr)?;
        Ok(match self.check_timing(cmd) {
            Ok(()) => Verdict::Legal,
            Err(v) => Verdict::Illegal(v),
        })
    }

    /// Earliest time at or after `now` at which `kind` could be legal on the
    /// addressed bank, ignoring the per-channel ordering rule. `None` when
    /// the bank state itself forbids the command.
    pub fn earliest(&self, kind: CommandKind, addr: &DramAddress, now: Nanos) -> Option<Nanos> {
        let t = &self.timing;
        match kind {
            CommandKind::Act => {
                let b = &self.banks[self.geometry.bank_index(addr)];
                if b.open_row.is_some() {
                    return None;
                }
                let mut at = now.max(b.busy_until);
                if let Some(p) = b.last_precharge_at {
                    at = at.max(p + t.t_rp);
                }
                if let Some(a) = b.last_act_at {
                    at = at.max(a + t.t_rc);
                }
                Some(at)
            }
            CommandKind::Pre => {
                let b = &self.banks[self.geometry.bank_index(addr)];
                b.open_row?;
                let mut at = now.max(b.opened_at + t.t_ras);
                if let Some(c) = b.last_col_at {
                    at = at.max(c + t.t_col);
                }
                Some(at)
            }
            CommandKind::Rd | CommandKind::Wr => {
                let b = &self.banks[self.geometry.bank_index(addr)];
                if b.open_row != Some(addr.row) {
                    return None;
                }
                let mut at = now.max(b.opened_at + t.t_rcd);
                if let Some(c) = b.last_col_at {
                    at = at.max(c + t.t_col);
                }
                Some(at)
            }
            CommandKind::Ref => {
                let rank = self.geometry.rank_index(addr);
                let mut at = now;
                for b in &self.banks[self.bank_range_of_rank(rank)] {
                    if b.open_row.is_some() {
                        return None;
                    }
                    at = at.max(b.busy_until);
                    if let Some(p) = b.last_precharge_at {
                        at = at.max(p + t.t_rp);
                    }
                }
                Some(at)
            }
        }
    }

    fn check_timing(&self, cmd: &Command) -> Result<(), Violation> {
        let t = &self.timing;
        let now = cmd.time;
        if let Some(prev) = self.last_issue[cmd.addr.channel as usize] {
            if now < prev {
                return Err(Violation::TimeOrder);
            }
        }
        match cmd.kind {
            CommandKind::Act => {
                let b = &self.banks[self.geometry.bank_index(&cmd.addr)];
                if b.open_row.is_some() {
                    return Err(Violation::BankAlreadyOpen);
                }
                if now < b.busy_until {
                    return Err(if b.refresh_busy {
                        Violation::TRfc
                    } else {
                        Violation::BankBusy
                    });
                }
                if let Some(p) = b.last_precharge_at {
                    if now < p + t.t_rp {
                        return Err(Violation::TRp);
                    }
                }
                if let Some(a) = b.last_act_at {
                    if now < a + t.t_rc {
                        return Err(Violation::TRc);
                    }
                }
                Ok(())
            }
            CommandKind::Pre => {
                let b = &self.banks[self.geometry.bank_index(&cmd.addr)];
                if b.open_row.is_none() {
                    return Err(Violation::BankNotOpen);
                }
                if now < b.opened_at + t.t_ras {
                    return Err(Violation::TRas);
                }
                if let Some(c) = b.last_col_at {
                    if now < c + t.t_col {
                        return Err(Violation::TCol);
                    }
                }
                Ok(())
            }
            CommandKind::Rd | CommandKind::Wr => {
                let b = &self.banks[self.geometry.bank_index(&cmd.addr)];
                match b.open_row {
                    None => return Err(Violation::BankNotOpen),
                    Some(r) if r != cmd.addr.row => return Err(Violation::RowMismatch),
                    _ => {}
                }
                if now < b.opened_at + t.t_rcd {
                    return Err(Violation::TRcd);
                }
                if let Some(c) = b.last_col_at {
                    if now < c + t.t_col {
                        return Err(Violation::TCol);
                    }
                }
                Ok(())
            }
            CommandKind::Ref => {
                let rank = self.geometry.rank_index(&cmd.addr);
                for b in &self.banks[self.bank_range_of_rank(rank)] {
                    if b.open_row.is_some() {
                        return Err(Violation::RefWithOpenBank);
                    }
                    if now < b.busy_until {
                        return Err(if b.refresh_busy {
                            Violation::TRfc
                        } else {
                            Violation::BankBusy
                        });
                    }
                    if let Some(p) = b.last_precharge_at {
                        if now < p + t.t_rp {
                            return Err(Violation::TRp);
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Applies a command. Illegal commands are a simulator bug and surface
    /// as [`DramError::HardFault`].
    pub fn apply(&mut self, cmd: &Command) -> Result<Event, DramError> {
        if let Verdict::Illegal(violation) = self.validate(cmd)? {
            return Err(DramError::HardFault {
                cmd: cmd.to_string(),
                violation,
            });
        }
        let now = cmd.time;
        self.last_issue[cmd.addr.channel as usize] = Some(now);
        let t_rfc = self.timing.t_rfc;
        let event = match cmd.kind {
            CommandKind::Act => {
                let bank = self.geometry.bank_index(&cmd.addr);
                let b = &mut self.banks[bank];
                b.open_row = Some(cmd.addr.row);
                b.opened_at = now;
                b.last_act_at = Some(now);
                b.last_col_at = None;
                Event::RowOpened {
                    bank,
                    row: cmd.addr.row,
                    phys_row: self.remap.to_physical(cmd.addr.row),
                    at: now,
                }
            }
            CommandKind::Pre => {
                let bank = self.geometry.bank_index(&cmd.addr);
                let b = &mut self.banks[bank];
                let row = b.open_row.take().expect("validated");
                b.last_precharge_at = Some(now);
                Event::RowClosed {
                    bank,
                    row,
                    phys_row: self.remap.to_physical(row),
                    opened_at: b.opened_at,
                    closed_at: now,
                    on_time: now - b.opened_at,
                }
            }
            CommandKind::Rd | CommandKind::Wr => {
                let bank = self.geometry.bank_index(&cmd.addr);
                self.banks[bank].last_col_at = Some(now);
                Event::ColumnAccess {
                    bank,
                    row: cmd.addr.row,
                    column: cmd.addr.column,
                    write: cmd.kind == CommandKind::Wr,
                    at: now,
                }
            }
            CommandKind::Ref => {
                let rank = self.geometry.rank_index(&cmd.addr);
                for idx in self.bank_range_of_rank(rank) {
                    let b = &mut self.banks[idx];
                    b.busy_until = now + t_rfc;
                    b.refresh_busy = true;
                }
                Event::RefreshPerformed { rank, at: now }
            }
        };
        if matches!(cmd.kind, CommandKind::Act) {
            let bank = self.geometry.bank_index(&cmd.addr);
            self.banks[bank].refresh_busy = false;
        }
        Ok(event)
    }

    /// Validates a whole log against a fresh state. Returns the index and
    /// violation of the first illegal command.
    pub fn check_log(
        geometry: &Geometry,
        timing: &TimingParams,
        log: &[Command],
    ) -> Result<Vec<Event>, (usize, DramError)> {
        let mut state = DramState::new(geometry.clone(), timing.clone(), RowRemap::Identity);
        let mut events = Vec::with_capacity(log.len());
        for (i, cmd) in log.iter().enumerate() {
            events.push(state.apply(cmd).map_err(|e| (i, e))?);
        }
        Ok(events)
    }

    /// Marks preventive-refresh occupancy so that a later `busy` violation
    /// is reported as `bank-busy` rather than `tRFC`.
    pub fn occupy_for_refresh_work(&mut self, bank: usize, until: Nanos) {
        let b = &mut self.banks[bank];
        if until > b.busy_until {
            b.busy_until = until;
            b.refresh_busy = false;
        }
    }
}

/// Round-robin refresh slicing: each REF of a rank refreshes the next slice
/// of rows in every bank of that rank, so every row is refreshed exactly
/// once per tREFW.
#[derive(Debug, Clone)]
pub struct RefreshSchedule {
    rows: u32,
    slots: u64,
    rows_per_slot: u32,
    next_slot: Vec<u64>,
}

impl RefreshSchedule {
    pub fn new(geometry: &Geometry, timing: &TimingParams) -> Self {
        let slots = timing.refresh_slots().max(1);
        let rows_per_slot = (geometry.rows as u64).div_ceil(slots) as u32;
        Self {
            rows: geometry.rows,
            slots,
            rows_per_slot,
            next_slot: vec![0; (geometry.channels * geometry.ranks) as usize],
        }
    }

    pub fn rows_per_ref(&self) -> u32 {
        self.rows_per_slot
    }

    pub fn slots(&self) -> u64 {
        self.slots
    }

    /// The slot a row belongs to.
    pub fn slot_of(&self, row: u32) -> u64 {
        (row / self.rows_per_slot) as u64
    }

    /// Rows refreshed by the next REF to `rank`; advances the slot pointer.
    pub fn rows_refreshed_by(&mut self, rank: usize) -> std::ops::Range<u32> {
        let slot = self.next_slot[rank];
        self.next_slot[rank] = (slot + 1) % self.slots;
        let start = (slot * self.rows_per_slot as u64).min(self.rows as u64) as u32;
        let end = (start as u64 + self.rows_per_slot as u64).min(self.rows as u64) as u32;
        start..end
    }
}
