//! Characterization harness: AC_min and tAggON_min searches, BER, overlap
//! of vulnerable-cell populations and ECC word histograms, all measured by
//! replaying direct command logs against the simulated chip.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::SimSetup;
use crate::disturbance::{
    BitFlip, CellProfile, DisturbanceLedger, MechanismModel, Pattern, RetentionModel, RowCells,
    RowDose,
};
use crate::dram::{DramError, DramState, Event, Geometry, Nanos, RowRemap, TimingParams};
use crate::patterns::{gen_direct, DirectSpec, PatternError};

/// Granularity of the tAggON_min search grid.
pub const TAGGON_STEP_NS: Nanos = 30;
/// Longest on-time the tAggON_min search tries.
pub const TAGGON_MAX_NS: Nanos = 30_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharacterizeError {
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error("illegal command {index} in generated log: {source}")]
    IllegalLog { index: usize, source: DramError },
    #[error("{0}")]
    Contract(String),
    #[error("overlap of an empty set is undefined")]
    EmptySet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub accuracy: f64,
    pub budget_ns: Nanos,
    pub repeats: u32,
    /// Set from the run's operating temperature.
    #[serde(skip)]
    pub temperature: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            accuracy: 0.01,
            budget_ns: 60_000_000,
            repeats: 5,
            temperature: 50.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, timing: &TimingParams) -> Result<(), (&'static str, String)> {
        if !(self.accuracy > 0.0 && self.accuracy <= 1.0) {
            return Err(("search.accuracy", "must be in (0, 1]".into()));
        }
        if self.budget_ns == 0 || self.budget_ns > timing.t_refw {
            return Err((
                "search.budget_ns",
                format!("must be in (0, t_refw = {}]", timing.t_refw),
            ));
        }
        if self.repeats == 0 {
            return Err(("search.repeats", "must be at least 1".into()));
        }
        Ok(())
    }
}

/// Allowed distance between a search answer and the true threshold.
pub fn accuracy_step(answer: u64, accuracy: f64) -> u64 {
    ((accuracy * answer as f64).ceil() as u64).max(1)
}

pub fn within_accuracy(answer: u64, truth: u64, accuracy: f64) -> bool {
    answer.abs_diff(truth) <= accuracy_step(answer, accuracy)
}

/// Smallest `x` in `1..=max` with `pred(x)` for a monotone predicate, up to
/// the accuracy rule. An exponential ramp brackets the threshold, then a
/// binary search narrows the bracket until it is within `tol(hi)`.
pub fn bisect_with(max: u64, mut pred: impl FnMut(u64) -> bool, tol: impl Fn(u64) -> u64) -> Option<u64> {
    if max == 0 {
        return None;
    }
    let mut lo = 0;
    let mut x = 1;
    loop {
        if pred(x) {
            break;
        }
        lo = x;
        if x == max {
            return None;
        }
        x = (x * 2).min(max);
    }
    let mut hi = x;
    while hi - lo > tol(hi) {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

pub fn bisect_min(max: u64, accuracy: f64, pred: impl FnMut(u64) -> bool) -> Option<u64> {
    bisect_with(max, pred, |hi| accuracy_step(hi, accuracy))
}

/// Rows of the first, middle and last `per_region` rows of a bank.
pub fn region_rows(rows: u32, per_region: u32) -> Vec<u32> {
    let n = per_region.min(rows / 3).max(1);
    let mid = rows / 2 - n / 2;
    let mut out: Vec<u32> = (0..n).chain(mid..mid + n).chain(rows - n..rows).collect();
    out.dedup();
    out
}

type DoseKey = (Vec<i64>, Nanos, Nanos, u64, u64);

/// A simulated chip under direct test, with a cache of victim doses per
/// program shape (doses only depend on relative row positions).
pub struct Chip {
    pub geometry: Geometry,
    pub timing: TimingParams,
    pub model: MechanismModel,
    pub profile: CellProfile,
    pub bank: usize,
    cache: Mutex<HashMap<DoseKey, Arc<Vec<(i64, RowDose)>>>>,
}

const CANON_VICTIM: u32 = 64;

impl Chip {
    pub fn new(setup: &SimSetup) -> Self {
        let mut model = setup.model.clone();
        model.t_ras = setup.timing.t_ras;
        Self {
            geometry: setup.geometry.clone(),
            timing: setup.timing.clone(),
            model,
            profile: setup.cell_profile(),
            bank: 0,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Replays a direct log, checking every command, and returns the ledger.
    pub fn replay(&self, log: &[crate::dram::Command], temperature: f64) -> Result<DisturbanceLedger, CharacterizeError> {
        let mut dram = DramState::new(self.geometry.clone(), self.timing.clone(), RowRemap::Identity);
        let mut ledger = DisturbanceLedger::new(self.geometry.rows);
        for (index, cmd) in log.iter().enumerate() {
            let ev = dram
                .apply(cmd)
                .map_err(|source| CharacterizeError::IllegalLog { index, source })?;
            if let Event::RowClosed {
                bank,
                phys_row,
                on_time,
                ..
            } = ev
            {
                ledger.record_activation(&self.model, bank, phys_row, on_time, temperature);
            }
        }
        Ok(ledger)
    }

    fn victim_doses(
        &self,
        offsets: &[i64],
        t_aggon: Nanos,
        t_aggoff: Nanos,
        acts: u64,
        temperature: f64,
        budget: Nanos,
    ) -> Result<Arc<Vec<(i64, RowDose)>>, CharacterizeError> {
        let key = (offsets.to_vec(), t_aggon, t_aggoff, acts, temperature.to_bits());
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let spec = DirectSpec {
            bank: self.geometry.bank_address(self.bank),
            aggressors: offsets
                .iter()
                .map(|o| (CANON_VICTIM as i64 + o) as u32)
                .collect(),
            t_aggon,
            t_aggoff,
            acts,
        };
        let log = gen_direct(&spec, &self.timing, budget)?;
        let ledger = self.replay(&log, temperature)?;
        let lo = offsets.iter().min().copied().unwrap_or(0) - 3;
        let hi = offsets.iter().max().copied().unwrap_or(0) + 3;
        let doses: Vec<(i64, RowDose)> = (lo..=hi)
            .map(|o| (o, ledger.get(self.bank, (CANON_VICTIM as i64 + o) as u32)))
            .filter(|(_, d)| d.hammer > 0.0 || d.press > 0.0)
            .collect();
        let doses = Arc::new(doses);
        self.cache.lock().expect("cache lock").insert(key, doses.clone());
        Ok(doses)
    }
}

/// Aggressor offsets relative to the tested (victim) row.
pub fn aggressor_offsets(pattern: Pattern, victim: u32, rows: u32) -> Result<Vec<i64>, CharacterizeError> {
    match pattern {
        Pattern::SingleSided if victim > 0 => Ok(vec![-1]),
        Pattern::SingleSided if rows > 1 => Ok(vec![1]),
        Pattern::DoubleSided if victim > 0 && victim + 1 < rows => Ok(vec![-1, 1]),
        _ => Err(CharacterizeError::Contract(format!(
            "row {victim} cannot host a {pattern:?} pattern"
        ))),
    }
}

/// Searches against one chip with one search configuration.
pub struct Characterizer<'a> {
    pub chip: &'a Chip,
    pub cfg: &'a SearchConfig,
}

impl<'a> Characterizer<'a> {
    pub fn new(chip: &'a Chip, cfg: &'a SearchConfig) -> Self {
        Self { chip, cfg }
    }

    /// Bitflips in the neighborhood of `victim` after `acts` total
    /// activations of the given shape.
    pub fn flips(
        &self,
        victim: u32,
        offsets: &[i64],
        t_aggon: Nanos,
        t_aggoff: Nanos,
        acts: u64,
        cells: &mut HashMap<u32, RowCells>,
    ) -> Result<BTreeSet<BitFlip>, CharacterizeError> {
        let doses = self.chip.victim_doses(
            offsets,
            t_aggon,
            t_aggoff,
            acts,
            self.cfg.temperature,
            self.cfg.budget_ns,
        )?;
        let rows = self.chip.geometry.rows as i64;
        let bank = self.chip.bank;
        let mut out = BTreeSet::new();
        for (o, dose) in doses.iter() {
            let r = victim as i64 + o;
            if r < 0 || r >= rows || offsets.contains(o) {
                continue;
            }
            let r = r as u32;
            let c = cells
                .entry(r)
                .or_insert_with(|| self.chip.profile.row(bank, r));
            c.disturbed(bank, r, &self.chip.model, dose, |f| {
                out.insert(f);
            });
        }
        Ok(out)
    }

    fn sides(pattern: Pattern) -> u64 {
        match pattern {
            Pattern::SingleSided => 1,
            Pattern::DoubleSided => 2,
        }
    }

    /// AC_min of `victim` at `t_aggon`; per aggressor for double-sided.
    pub fn find_acmin(&self, victim: u32, t_aggon: Nanos, pattern: Pattern) -> Result<Option<u64>, CharacterizeError> {
        let t = &self.chip.timing;
        if t_aggon < t.t_ras {
            return Err(CharacterizeError::Contract(format!(
                "tAggON {t_aggon} ns is below tRAS ({} ns)",
                t.t_ras
            )));
        }
        let offsets = aggressor_offsets(pattern, victim, self.chip.geometry.rows)?;
        let sides = Self::sides(pattern);
        let max = self.cfg.budget_ns / ((t_aggon + t.t_rp) * sides);
        let mut cells = HashMap::new();
        let mut best: Option<u64> = None;
        for _ in 0..self.cfg.repeats {
            let mut err = None;
            let found = bisect_min(max, self.cfg.accuracy, |ac| {
                match self.flips(victim, &offsets, t_aggon, t.t_rp, ac * sides, &mut cells) {
                    Ok(f) => !f.is_empty(),
                    Err(e) => {
                        err.get_or_insert(e);
                        true
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            if let Some(ac) = found {
                best = Some(best.map_or(ac, |b: u64| b.min(ac)));
            }
        }
        Ok(best)
    }

    /// Smallest on-time on the 30 ns grid from tRAS that flips a bit with
    /// `ac` activations (per aggressor for double-sided).
    pub fn find_taggon_min(&self, victim: u32, ac: u64, pattern: Pattern) -> Result<Option<Nanos>, CharacterizeError> {
        if ac == 0 {
            return Err(CharacterizeError::Contract("AC must be at least 1".into()));
        }
        let t = &self.chip.timing;
        let offsets = aggressor_offsets(pattern, victim, self.chip.geometry.rows)?;
        let sides = Self::sides(pattern);
        let per_act = self.cfg.budget_ns / (ac * sides);
        if per_act < t.t_ras + t.t_rp {
            return Ok(None);
        }
        let top = (per_act - t.t_rp).min(TAGGON_MAX_NS);
        let steps = (top - t.t_ras) / TAGGON_STEP_NS + 1;
        let on = |x: u64| t.t_ras + (x - 1) * TAGGON_STEP_NS;
        let acc = self.cfg.accuracy;
        let tol = |hi: u64| {
            let ns = accuracy_step(on(hi), acc);
            (ns / TAGGON_STEP_NS).max(1)
        };
        let mut cells = HashMap::new();
        let mut best: Option<Nanos> = None;
        for _ in 0..self.cfg.repeats {
            let mut err = None;
            let found = bisect_with(
                steps,
                |x| match self.flips(victim, &offsets, on(x), t.t_rp, ac * sides, &mut cells) {
                    Ok(f) => !f.is_empty(),
                    Err(e) => {
                        err.get_or_insert(e);
                        true
                    }
                },
                tol,
            );
            if let Some(e) = err {
                return Err(e);
            }
            if let Some(x) = found {
                let v = on(x);
                best = Some(best.map_or(v, |b: Nanos| b.min(v)));
            }
        }
        Ok(best)
    }

    /// Highest BER over repeats when the aggressors are activated as many
    /// times as the budget allows. BER is the flipped fraction of the most
    /// affected victim row.
    pub fn measure_ber(
        &self,
        victim: u32,
        offsets: &[i64],
        t_aggon: Nanos,
        t_aggoff: Nanos,
    ) -> Result<(f64, BTreeSet<BitFlip>), CharacterizeError> {
        let acts = self.cfg.budget_ns / (t_aggon + t_aggoff);
        let mut cells = HashMap::new();
        let mut best = (0.0, BTreeSet::new());
        for _ in 0..self.cfg.repeats {
            let flips = self.flips(victim, offsets, t_aggon, t_aggoff, acts, &mut cells)?;
            let ber = ber_of(&flips, self.chip.geometry.columns);
            if ber > best.0 || best.1.is_empty() {
                best = (ber, flips);
            }
        }
        Ok(best)
    }
}

/// Flipped fraction of the row with the most flips.
pub fn ber_of(flips: &BTreeSet<BitFlip>, columns: u32) -> f64 {
    let mut per_row: BTreeMap<(usize, u32), u64> = BTreeMap::new();
    for f in flips {
        *per_row.entry((f.bank, f.row)).or_default() += 1;
    }
    per_row.values().copied().max().unwrap_or(0) as f64 / columns as f64
}

/// `|A ∩ B| / |A|` over cell identities `(bank, row, column)`.
pub fn overlap(a: &BTreeSet<(usize, u32, u32)>, b: &BTreeSet<(usize, u32, u32)>) -> Result<f64, CharacterizeError> {
    if a.is_empty() {
        return Err(CharacterizeError::EmptySet);
    }
    Ok(a.intersection(b).count() as f64 / a.len() as f64)
}

pub fn cell_set(flips: &BTreeSet<BitFlip>) -> BTreeSet<(usize, u32, u32)> {
    flips.iter().map(|f| (f.bank, f.row, f.column)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EccHistogram {
    pub words_1_2: u64,
    pub words_3_8: u64,
    pub words_over_8: u64,
    pub max_per_word: u64,
}

/// Bins flipped cells by consecutive `word_bits`-bit words of a row.
pub fn ecc_word_histogram<'a>(flips: impl IntoIterator<Item = &'a BitFlip>, word_bits: u32) -> EccHistogram {
    let mut words: HashMap<(usize, u32, u32), u64> = HashMap::new();
    for f in flips {
        *words.entry((f.bank, f.row, f.column / word_bits)).or_default() += 1;
    }
    let mut h = EccHistogram::default();
    for &n in words.values() {
        match n {
            1..=2 => h.words_1_2 += 1,
            3..=8 => h.words_3_8 += 1,
            _ => h.words_over_8 += 1,
        }
        h.max_per_word = h.max_per_word.max(n);
    }
    h
}

/// Retention failures of `rows` after `elapsed` ns without refresh.
pub fn retention_flips(chip: &Chip, rows: &[u32], elapsed: Nanos) -> BTreeSet<BitFlip> {
    let ledger = DisturbanceLedger::new(chip.geometry.rows);
    let model = RetentionModel {
        rows: rows.iter().map(|&r| (chip.bank, r)).collect(),
    };
    ledger.collect_bitflips(&chip.model, &chip.profile, Some(&model), elapsed)
}
