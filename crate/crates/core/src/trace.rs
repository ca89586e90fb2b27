//! Request traces and physical-address decoding.
//!
//! Trace lines are `<arrival_ns> <R|W> <hex address>`. Blank lines and
//! lines starting with `#` are ignored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{DramAddress, Geometry, Nanos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRequest {
    pub arrival: Nanos,
    pub kind: RequestKind,
    pub addr: DramAddress,
    pub tag: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("address map: {0}")]
    Map(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddrField {
    Column,
    Bankgroup,
    Bank,
    Rank,
    Channel,
    Row,
}

/// Bit-slicing of a physical address, least significant field first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AddressMapConfig {
    pub offset_bits: u32,
    pub column_bits: u32,
    pub order: Vec<AddrField>,
}

impl Default for AddressMapConfig {
    fn default() -> Self {
        Self {
            offset_bits: 6,
            column_bits: 7,
            order: vec![
                AddrField::Column,
                AddrField::Bankgroup,
                AddrField::Bank,
                AddrField::Rank,
                AddrField::Channel,
                AddrField::Row,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressMap {
    offset_bits: u32,
    fields: Vec<(AddrField, u32)>,
}

fn log2_exact(n: u32, what: &str) -> Result<u32, TraceError> {
    if n == 0 || !n.is_power_of_two() {
        return Err(TraceError::Map(format!("{what} = {n} is not a power of two")));
    }
    Ok(n.trailing_zeros())
}

impl AddressMap {
    pub fn new(cfg: &AddressMapConfig, geometry: &Geometry) -> Result<Self, TraceError> {
        let all = [
            AddrField::Column,
            AddrField::Bankgroup,
            AddrField::Bank,
            AddrField::Rank,
            AddrField::Channel,
            AddrField::Row,
        ];
        for f in all {
            if cfg.order.iter().filter(|&&o| o == f).count() != 1 {
                return Err(TraceError::Map(format!(
                    "order must list every field exactly once ({f:?})"
                )));
            }
        }
        if 1u64 << cfg.column_bits > geometry.columns as u64 {
            return Err(TraceError::Map(format!(
                "column_bits = {} exceeds the {} columns per row",
                cfg.column_bits, geometry.columns
            )));
        }
        let mut fields = Vec::new();
        for f in &cfg.order {
            let bits = match f {
                AddrField::Column => cfg.column_bits,
                AddrField::Bankgroup => log2_exact(geometry.bankgroups, "bankgroups")?,
                AddrField::Bank => log2_exact(geometry.banks_per_group, "banks_per_group")?,
                AddrField::Rank => log2_exact(geometry.ranks, "ranks")?,
                AddrField::Channel => log2_exact(geometry.channels, "channels")?,
                AddrField::Row => log2_exact(geometry.rows, "rows")?,
            };
            fields.push((*f, bits));
        }
        let total: u32 = cfg.offset_bits + fields.iter().map(|f| f.1).sum::<u32>();
        if total > 64 {
            return Err(TraceError::Map(format!("{total} address bits exceed 64")));
        }
        Ok(Self {
            offset_bits: cfg.offset_bits,
            fields,
        })
    }

    pub fn total_bits(&self) -> u32 {
        self.offset_bits + self.fields.iter().map(|f| f.1).sum::<u32>()
    }

    pub fn decode(&self, phys: u64) -> Result<DramAddress, String> {
        if self.total_bits() < 64 && phys >> self.total_bits() != 0 {
            return Err(format!("address {phys:#x} beyond the mapped {} bits", self.total_bits()));
        }
        let mut a = DramAddress::default();
        let mut shift = self.offset_bits;
        for &(f, bits) in &self.fields {
            let v = ((phys >> shift) & ((1u64 << bits) - 1)) as u32;
            shift += bits;
            match f {
                AddrField::Column => a.column = v,
                AddrField::Bankgroup => a.bankgroup = v,
                AddrField::Bank => a.bank = v,
                AddrField::Rank => a.rank = v,
                AddrField::Channel => a.channel = v,
                AddrField::Row => a.row = v,
            }
        }
        Ok(a)
    }

    pub fn encode(&self, a: &DramAddress) -> u64 {
        let mut phys = 0u64;
        let mut shift = self.offset_bits;
        for &(f, bits) in &self.fields {
            let v = match f {
                AddrField::Column => a.column,
                AddrField::Bankgroup => a.bankgroup,
                AddrField::Bank => a.bank,
                AddrField::Rank => a.rank,
                AddrField::Channel => a.channel,
                AddrField::Row => a.row,
            } as u64;
            phys |= (v & ((1u64 << bits) - 1)) << shift;
            shift += bits;
        }
        phys
    }
}

pub fn parse_trace(text: &str, map: &AddressMap) -> Result<Vec<MemoryRequest>, TraceError> {
    let mut out = Vec::new();
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let err = |msg: String| TraceError::Parse { line, msg };
        let mut parts = l.split_whitespace();
        let (Some(t), Some(k), Some(a), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(err("expected `<arrival_ns> <R|W> <hex address>`".into()));
        };
        let arrival: Nanos = t
            .parse()
            .map_err(|_| err(format!("bad arrival time `{t}`")))?;
        let kind = match k {
            "R" | "r" => RequestKind::Read,
            "W" | "w" => RequestKind::Write,
            _ => return Err(err(format!("bad request kind `{k}`"))),
        };
        let hex = a.trim_start_matches("0x").trim_start_matches("0X");
        let phys = u64::from_str_radix(hex, 16).map_err(|_| err(format!("bad hex address `{a}`")))?;
        if arrival < last {
            return Err(err(format!("arrival {arrival} precedes previous arrival {last}")));
        }
        last = arrival;
        let addr = map.decode(phys).map_err(err)?;
        out.push(MemoryRequest {
            arrival,
            kind,
            addr,
            tag: out.len() as u64,
        });
    }
    Ok(out)
}

pub fn write_trace(requests: &[MemoryRequest], map: &AddressMap) -> String {
    let mut s = String::with_capacity(requests.len() * 24);
    for r in requests {
        let k = match r.kind {
            RequestKind::Read => 'R',
            RequestKind::Write => 'W',
        };
        let _ = writeln!(s, "{} {} {:#x}", r.arrival, k, map.encode(&r.addr));
    }
    s
}
