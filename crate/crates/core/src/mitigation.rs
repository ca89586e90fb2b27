//! Read-disturbance defenses: an in-DRAM TRR sampler, Graphene, PARA and
//! the row-open-time adaptation that derives Graphene-RP / PARA-RP
//! parameters from a press dose curve.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disturbance::{MechanismModel, Pattern};
use crate::dram::{Geometry, Nanos, TimingParams};
use crate::seed::substream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MitigationError {
    #[error("t_mro {t_mro} ns is below tRAS ({t_ras} ns)")]
    TmroBelowTras { t_mro: Nanos, t_ras: Nanos },
    #[error("invalid model: {0}")]
    Model(String),
}

fn neighbors(row: u32, radius: u32, rows: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(2 * radius as usize);
    for d in 1..=radius {
        if let Some(r) = row.checked_sub(d) {
            out.push(r);
        }
        if row + d < rows {
            out.push(row + d);
        }
    }
    out
}

/// Misra-Gries frequent-row tracker of one bank.
///
/// A row that is not resident is estimated at the spillover count. Each
/// activation raises the activated row's estimate by at least one, so the
/// estimate never falls below the true count within a reset period.
#[derive(Debug, Clone)]
pub struct GrapheneTracker {
    threshold: u64,
    blast_radius: u32,
    rows: u32,
    reset_period: Nanos,
    window_end: Nanos,
    slots: Vec<(Option<u32>, u64)>,
    resident: HashMap<u32, usize>,
    by_count: BTreeMap<u64, BTreeSet<usize>>,
    spillover: u64,
}

impl GrapheneTracker {
    pub fn new(k: usize, threshold: u64, blast_radius: u32, rows: u32, reset_period: Nanos) -> Self {
        assert!(k > 0 && threshold > 0);
        let mut t = Self {
            threshold,
            blast_radius,
            rows,
            reset_period,
            window_end: reset_period,
            slots: Vec::new(),
            resident: HashMap::new(),
            by_count: BTreeMap::new(),
            spillover: 0,
        };
        t.slots = vec![(None, 0); k];
        t.clear();
        t
    }

    /// Table size that bounds the spillover below the threshold for the
    /// activations one reset period can hold.
    pub fn default_k(timing: &TimingParams, threshold: u64) -> usize {
        (timing.t_refw / timing.t_rc).div_ceil(threshold).max(1) as usize
    }

    fn clear(&mut self) {
        for s in &mut self.slots {
            *s = (None, 0);
        }
        self.resident.clear();
        self.by_count.clear();
        self.by_count
            .insert(0, (0..self.slots.len()).collect::<BTreeSet<_>>());
        self.spillover = 0;
    }

    fn set_count(&mut self, slot: usize, count: u64) {
        let old = self.slots[slot].1;
        if let Some(set) = self.by_count.get_mut(&old) {
            set.remove(&slot);
            if set.is_empty() {
                self.by_count.remove(&old);
            }
        }
        self.slots[slot].1 = count;
        self.by_count.entry(count).or_default().insert(slot);
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn spillover(&self) -> u64 {
        self.spillover
    }

    pub fn estimate(&self, row: u32) -> u64 {
        match self.resident.get(&row) {
            Some(&s) => self.slots[s].1,
            None => self.spillover,
        }
    }

    pub fn is_resident(&self, row: u32) -> bool {
        self.resident.contains_key(&row)
    }

    fn maybe_reset(&mut self, time: Nanos) {
        if time >= self.window_end {
            self.clear();
            let periods = (time - self.window_end) / self.reset_period + 1;
            self.window_end += periods * self.reset_period;
        }
    }

    /// Records one activation; returns the rows to refresh preventively.
    pub fn observe(&mut self, row: u32, time: Nanos) -> Vec<u32> {
        self.maybe_reset(time);
        let old = self.estimate(row);
        let new = if let Some(&slot) = self.resident.get(&row) {
            self.set_count(slot, old + 1);
            old + 1
        } else {
            let (&min_count, set) = self.by_count.iter().next().expect("k > 0");
            if min_count == self.spillover {
                let slot = *set.iter().next().expect("nonempty");
                if let Some(evicted) = self.slots[slot].0 {
                    self.resident.remove(&evicted);
                }
                self.slots[slot].0 = Some(row);
                self.resident.insert(row, slot);
                let c = self.spillover + 1;
                self.set_count(slot, c);
                c
            } else {
                self.spillover += 1;
                return Vec::new();
            }
        };
        if new / self.threshold > old / self.threshold {
            neighbors(row, self.blast_radius, self.rows)
        } else {
            Vec::new()
        }
    }
}

/// Probabilistic adjacent row refresh.
#[derive(Debug, Clone)]
pub struct ParaTracker {
    p: f64,
    rows: u32,
    rng: ChaCha8Rng,
}

impl ParaTracker {
    pub fn new(p: f64, rows: u32, rng: ChaCha8Rng) -> Self {
        assert!((0.0..=1.0).contains(&p));
        Self { p, rows, rng }
    }

    pub fn observe(&mut self, row: u32) -> Vec<u32> {
        if !self.rng.gen_bool(self.p) {
            return Vec::new();
        }
        let up = self.rng.gen_bool(0.5);
        let target = if row == 0 {
            1
        } else if row + 1 >= self.rows {
            row - 1
        } else if up {
            row + 1
        } else {
            row - 1
        };
        vec![target]
    }
}

/// In-DRAM TRR sampler: remembers the first `capacity` distinct rows
/// activated since the previous REF and refreshes their neighbors at REF.
#[derive(Debug, Clone)]
pub struct TrrSampler {
    capacity: usize,
    rows: u32,
    tracked: Vec<u32>,
}

impl TrrSampler {
    pub fn new(capacity: usize, rows: u32) -> Self {
        Self {
            capacity,
            rows,
            tracked: Vec::with_capacity(capacity),
        }
    }

    pub fn observe(&mut self, row: u32) {
        if self.tracked.len() < self.capacity && !self.tracked.contains(&row) {
            self.tracked.push(row);
        }
    }

    pub fn tracked(&self) -> &[u32] {
        &self.tracked
    }

    pub fn on_ref(&mut self) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .tracked
            .drain(..)
            .flat_map(|r| neighbors(r, 1, self.rows))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    #[default]
    None,
    Trr,
    Graphene,
    Para,
    GrapheneRp,
    ParaRp,
}

impl MitigationKind {
    pub fn name(&self) -> &'static str {
        match self {
            MitigationKind::None => "none",
            MitigationKind::Trr => "trr",
            MitigationKind::Graphene => "graphene",
            MitigationKind::Para => "para",
            MitigationKind::GrapheneRp => "graphene_rp",
            MitigationKind::ParaRp => "para_rp",
        }
    }
}

/// Resolved mitigation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MitigationParams {
    pub kind: MitigationKind,
    pub graphene_t: u64,
    pub graphene_k: Option<usize>,
    pub para_p: f64,
    pub trr_capacity: usize,
    pub blast_radius: u32,
}

impl Default for MitigationParams {
    fn default() -> Self {
        Self {
            kind: MitigationKind::None,
            graphene_t: 333,
            graphene_k: None,
            para_p: 0.034,
            trr_capacity: 4,
            blast_radius: 3,
        }
    }
}

enum Trackers {
    None,
    Trr(Vec<TrrSampler>),
    Graphene(Vec<GrapheneTracker>),
    Para(ParaTracker),
}

/// Per-bank defense state of one simulation.
pub struct Mitigation {
    trackers: Trackers,
    banks_per_rank: usize,
}

impl Mitigation {
    pub fn new(params: &MitigationParams, geometry: &Geometry, timing: &TimingParams, seed: u64) -> Self {
        let banks = geometry.total_banks();
        let rows = geometry.rows;
        let trackers = match params.kind {
            MitigationKind::None => Trackers::None,
            MitigationKind::Trr => {
                Trackers::Trr((0..banks).map(|_| TrrSampler::new(params.trr_capacity, rows)).collect())
            }
            MitigationKind::Graphene | MitigationKind::GrapheneRp => {
                let k = params
                    .graphene_k
                    .unwrap_or_else(|| GrapheneTracker::default_k(timing, params.graphene_t));
                Trackers::Graphene(
                    (0..banks)
                        .map(|_| {
                            GrapheneTracker::new(k, params.graphene_t, params.blast_radius, rows, timing.t_refw)
                        })
                        .collect(),
                )
            }
            MitigationKind::Para | MitigationKind::ParaRp => {
                Trackers::Para(ParaTracker::new(params.para_p, rows, substream(seed, "para")))
            }
        };
        Self {
            trackers,
            banks_per_rank: geometry.banks_per_rank() as usize,
        }
    }

    /// Preventive-refresh targets caused by an ACT.
    pub fn on_act(&mut self, bank: usize, row: u32, time: Nanos) -> Vec<u32> {
        match &mut self.trackers {
            Trackers::None => Vec::new(),
            Trackers::Trr(s) => {
                s[bank].observe(row);
                Vec::new()
            }
            Trackers::Graphene(g) => g[bank].observe(row, time),
            Trackers::Para(p) => p.observe(row),
        }
    }

    /// Targets refreshed by the TRR logic during a REF of `rank`.
    pub fn on_ref(&mut self, rank: usize) -> Vec<(usize, Vec<u32>)> {
        match &mut self.trackers {
            Trackers::Trr(s) => {
                let range = rank * self.banks_per_rank..(rank + 1) * self.banks_per_rank;
                range
                    .map(|b| (b, s[b].on_ref()))
                    .filter(|(_, v)| !v.is_empty())
                    .collect()
            }
            _ => Vec::new(),
        }
    }
}

/// One row of the row-open-time reduction table: `(t_mro, T'_RH,
/// Graphene T, PARA p)`.
pub const TABLE2: [(Nanos, u64, u64, f64); 6] = [
    (36, 1000, 333, 0.034),
    (66, 809, 269, 0.042),
    (96, 724, 241, 0.047),
    (186, 619, 206, 0.054),
    (336, 555, 185, 0.061),
    (636, 419, 139, 0.079),
];

pub fn table2_row(t_mro: Nanos) -> Option<(Nanos, u64, u64, f64)> {
    TABLE2.iter().copied().find(|r| r.0 == t_mro)
}

/// Graphene threshold for a reduced RowHammer threshold.
pub fn graphene_t_for(t_rh: u64) -> u64 {
    (t_rh / 3).max(1)
}

/// PARA probability that keeps the chance of `t_rh` unrefreshed
/// activations at 1e-15.
pub fn para_p_for(t_rh: u64) -> f64 {
    1.0 - 1e-15f64.powf(1.0 / t_rh.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpAdaptation {
    pub t_mro: Nanos,
    pub reduction: f64,
    pub t_rh: u64,
    pub t_rh_reduced: u64,
    pub graphene_t: u64,
    pub para_p: f64,
}

/// Worst-case RP adaptation for a row-open cap of `t_mro`.
pub fn derive_rp_config(
    model: &MechanismModel,
    t_mro: Nanos,
    t_rh: u64,
    worst_case_temperature: f64,
) -> Result<RpAdaptation, MitigationError> {
    if t_mro < model.t_ras {
        return Err(MitigationError::TmroBelowTras {
            t_mro,
            t_ras: model.t_ras,
        });
    }
    let mut ratio = f64::INFINITY;
    for pattern in [Pattern::SingleSided, Pattern::DoubleSided] {
        let at = |t: Nanos| {
            model
                .acmin_closed_form(t as f64, worst_case_temperature, pattern)
                .map_err(|e| MitigationError::Model(e.to_string()))
        };
        let r = at(t_mro)? as f64 / at(model.t_ras)? as f64;
        ratio = ratio.min(r);
    }
    let ratio = ratio.min(1.0);
    let t_rh_reduced = ((ratio * t_rh as f64).round() as u64).max(1);
    Ok(RpAdaptation {
        t_mro,
        reduction: 1.0 - ratio,
        t_rh,
        t_rh_reduced,
        graphene_t: graphene_t_for(t_rh_reduced),
        para_p: para_p_for(t_rh_reduced),
    })
}
