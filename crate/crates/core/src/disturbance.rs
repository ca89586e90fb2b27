//! Read-disturbance fault model.
//!
//! Two independent mechanisms (hammer and press) each map an aggressor's
//! on-time to a per-activation dose. Doses add up in the victim row until
//! the row is refreshed, and a cell flips once its mechanism's row dose
//! reaches the mechanism threshold times the cell's own multiplier.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::Nanos;
use crate::seed::mix;

/// Relative slack for threshold comparisons so that e.g. 48 activations of
/// dose 1.0 reach a threshold of 1000/21.
pub const REL_TOL: f64 = 1e-9;

pub fn ceil_tol(x: f64) -> u64 {
    let v = (x - x.abs() * REL_TOL).ceil();
    if v < 0.0 {
        0
    } else {
        v as u64
    }
}

pub fn reaches(dose: f64, threshold: f64) -> bool {
    dose >= threshold * (1.0 - REL_TOL)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DisturbanceError {
    #[error("on-time {on_time} ns is below tRAS ({t_ras} ns)")]
    OnTimeBelowTras { on_time: f64, t_ras: Nanos },
    #[error("invalid dose curve: {0}")]
    Curve(String),
    #[error("invalid mechanism model: {0}")]
    Model(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Hammer,
    Press,
    Retention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlipDirection {
    #[serde(rename = "1to0")]
    OneToZero,
    #[serde(rename = "0to1")]
    ZeroToOne,
}

impl FlipDirection {
    fn inverted(self) -> Self {
        match self {
            FlipDirection::OneToZero => FlipDirection::ZeroToOne,
            FlipDirection::ZeroToOne => FlipDirection::OneToZero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    #[serde(rename = "single")]
    SingleSided,
    #[serde(rename = "double")]
    DoubleSided,
}

/// Piecewise log-log dose table with a temperature multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseCurve {
    /// `(on_time_ns, dose)` pairs.
    pub anchors: Vec<(f64, f64)>,
    pub tail_slope: f64,
    /// `(temperature_c, factor)` pairs, linearly interpolated and clamped.
    /// Empty means a constant factor of 1.
    #[serde(default)]
    pub temperature_scale: Vec<(f64, f64)>,
}

impl DoseCurve {
    pub fn validate(&self) -> Result<(), DisturbanceError> {
        if self.anchors.len() < 2 {
            return Err(DisturbanceError::Curve("needs at least 2 anchors".into()));
        }
        for w in self.anchors.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DisturbanceError::Curve(
                    "anchor on-times must be strictly increasing".into(),
                ));
            }
        }
        if self.anchors.iter().any(|a| a.0 <= 0.0 || a.1 <= 0.0) {
            return Err(DisturbanceError::Curve(
                "anchor on-times and doses must be positive".into(),
            ));
        }
        if !self.tail_slope.is_finite() {
            return Err(DisturbanceError::Curve("tail_slope must be finite".into()));
        }
        for w in self.temperature_scale.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DisturbanceError::Curve(
                    "temperature points must be strictly increasing".into(),
                ));
            }
        }
        if self.temperature_scale.iter().any(|p| p.1 <= 0.0) {
            return Err(DisturbanceError::Curve(
                "temperature factors must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn temperature_factor(&self, temperature: f64) -> f64 {
        let pts = &self.temperature_scale;
        match pts.len() {
            0 => 1.0,
            _ if temperature <= pts[0].0 => pts[0].1,
            n if temperature >= pts[n - 1].0 => pts[n - 1].1,
            _ => {
                let i = pts.partition_point(|p| p.0 <= temperature);
                let (t0, f0) = pts[i - 1];
                let (t1, f1) = pts[i];
                f0 + (f1 - f0) * (temperature - t0) / (t1 - t0)
            }
        }
    }

    /// Dose at 50 °C-equivalent scaling, without any on-time contract check.
    pub fn base_dose(&self, on_time: f64) -> f64 {
        let a = &self.anchors;
        let first = a[0];
        let last = a[a.len() - 1];
        if on_time <= first.0 {
            return first.1;
        }
        if on_time >= last.0 {
            return (last.1.ln() + self.tail_slope * (on_time.ln() - last.0.ln())).exp();
        }
        let i = a.partition_point(|p| p.0 <= on_time);
        let (t0, d0) = a[i - 1];
        let (t1, d1) = a[i];
        let frac = (on_time.ln() - t0.ln()) / (t1.ln() - t0.ln());
        (d0.ln() + frac * (d1.ln() - d0.ln())).exp()
    }

    pub fn eval(&self, on_time: f64, temperature: f64) -> f64 {
        self.base_dose(on_time) * self.temperature_factor(temperature)
    }
}

/// Dose of one activation held open for `on_time`.
pub fn dose_of(
    curve: &DoseCurve,
    on_time: f64,
    temperature: f64,
    t_ras: Nanos,
) -> Result<f64, DisturbanceError> {
    if on_time < t_ras as f64 {
        return Err(DisturbanceError::OnTimeBelowTras { on_time, t_ras });
    }
    Ok(curve.eval(on_time, temperature))
}

fn default_t_ras() -> Nanos {
    36
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismModel {
    pub hammer: DoseCurve,
    pub theta_h: f64,
    pub press: DoseCurve,
    pub theta_p: f64,
    /// Coupling factor for victim distance 1, 2 and 3.
    pub distance_coupling: Vec<f64>,
    /// Contract floor for on-times; mirrors the timing's tRAS.
    #[serde(skip, default = "default_t_ras")]
    pub t_ras: Nanos,
}

impl Default for MechanismModel {
    fn default() -> Self {
        Self::with_press_point(0.0557, 1.0 / 0.55)
    }
}

pub const MODEL_PRESETS: &[&str] = &["default", "mfr_s", "mfr_h", "mfr_m", "table2"];

impl MechanismModel {
    fn with_press_point(short_dose: f64, hot_factor: f64) -> Self {
        let theta_h = 1000.0;
        Self {
            hammer: DoseCurve {
                anchors: vec![(36.0, 1.0), (7800.0, 1.0)],
                tail_slope: 0.0,
                temperature_scale: vec![],
            },
            theta_h,
            press: DoseCurve {
                anchors: vec![
                    (36.0, 0.02),
                    (186.0, short_dose),
                    (7800.0, 1.0),
                    (70200.0, 190.0 / 21.0),
                ],
                tail_slope: 1.0,
                temperature_scale: vec![(50.0, 1.0), (80.0, hot_factor)],
            },
            theta_p: theta_h / 21.0,
            distance_coupling: vec![1.0, 0.05, 0.01],
            t_ras: 36,
        }
    }

    /// A chip whose press curve reproduces the row-open-time reduction
    /// table used to configure the RP mitigations.
    pub fn table2() -> Self {
        let theta_h = 1000.0;
        let theta_p = theta_h / 21.0;
        let t_prime = [
            (36.0, 1000.0),
            (66.0, 809.0),
            (96.0, 724.0),
            (186.0, 619.0),
            (336.0, 555.0),
            (636.0, 419.0),
        ];
        Self {
            press: DoseCurve {
                anchors: t_prime.iter().map(|&(t, tp)| (t, theta_p / tp)).collect(),
                tail_slope: 1.0,
                temperature_scale: vec![],
            },
            theta_p,
            ..Self::with_press_point(0.0557, 1.0)
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" | "mfr_s" => Some(Self::default()),
            "mfr_h" => Some(Self::with_press_point(1.04 / 21.0, 1.0 / 0.32)),
            "mfr_m" => Some(Self::with_press_point(1.08 / 21.0, 1.0 / 0.59)),
            "table2" => Some(Self::table2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DisturbanceError> {
        self.hammer.validate()?;
        self.press.validate()?;
        if !(self.theta_h > 0.0) || !(self.theta_p > 0.0) {
            return Err(DisturbanceError::Model("thresholds must be positive".into()));
        }
        let c = &self.distance_coupling;
        if c.len() != 3 {
            return Err(DisturbanceError::Model(
                "distance_coupling needs exactly 3 entries".into(),
            ));
        }
        if c[0] != 1.0 {
            return Err(DisturbanceError::Model(
                "distance_coupling[1] must be 1.0".into(),
            ));
        }
        if c.iter().any(|&x| !(0.0..=1.0).contains(&x)) || c[1] > c[0] || c[2] > c[1] {
            return Err(DisturbanceError::Model(
                "distance_coupling must be in [0,1] and nonincreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn curve(&self, mech: Mechanism) -> &DoseCurve {
        match mech {
            Mechanism::Hammer => &self.hammer,
            Mechanism::Press | Mechanism::Retention => &self.press,
        }
    }

    pub fn threshold(&self, mech: Mechanism) -> f64 {
        match mech {
            Mechanism::Hammer => self.theta_h,
            Mechanism::Press | Mechanism::Retention => self.theta_p,
        }
    }

    pub fn coupling(&self, distance: u32) -> f64 {
        match distance {
            1..=3 => self.distance_coupling[distance as usize - 1],
            _ => 0.0,
        }
    }

    /// Analytic AC_min. For double-sided patterns the count is per aggressor.
    pub fn acmin_closed_form(
        &self,
        on_time: f64,
        temperature: f64,
        pattern: Pattern,
    ) -> Result<u64, DisturbanceError> {
        let h = dose_of(&self.hammer, on_time, temperature, self.t_ras)?;
        let p = dose_of(&self.press, on_time, temperature, self.t_ras)?;
        let sides = match pattern {
            Pattern::SingleSided => 1.0,
            Pattern::DoubleSided => 2.0,
        };
        let need = (self.theta_h / (sides * h)).min(self.theta_p / (sides * p));
        Ok(ceil_tol(need).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RowDose {
    pub hammer: f64,
    pub press: f64,
    pub last_refresh: Nanos,
}

/// Accumulated dose per (bank, physical row) since its last refresh.
/// Rows without an entry hold zero dose.
#[derive(Debug, Clone)]
pub struct DisturbanceLedger {
    rows_per_bank: u32,
    rows: HashMap<(usize, u32), RowDose>,
}

impl DisturbanceLedger {
    pub fn new(rows_per_bank: u32) -> Self {
        Self {
            rows_per_bank,
            rows: HashMap::new(),
        }
    }

    pub fn get(&self, bank: usize, row: u32) -> RowDose {
        self.rows.get(&(bank, row)).copied().unwrap_or_default()
    }

    pub fn tracked_rows(&self) -> usize {
        self.rows.len()
    }

    /// Adds the dose of one closed activation of `aggressor` to its
    /// neighbors at distance 1..=3. Opening the row restored its own cells,
    /// so the aggressor's accumulated disturbance is cleared.
    pub fn record_activation(
        &mut self,
        model: &MechanismModel,
        bank: usize,
        aggressor: u32,
        on_time: Nanos,
        temperature: f64,
    ) {
        if let Some(own) = self.rows.get_mut(&(bank, aggressor)) {
            own.hammer = 0.0;
            own.press = 0.0;
        }
        let t = on_time as f64;
        let h = model.hammer.eval(t, temperature);
        let p = model.press.eval(t, temperature);
        self.add_dose(model, bank, aggressor, h, p);
    }

    /// Adds precomputed per-activation doses to the neighborhood of
    /// `aggressor`.
    pub fn add_dose(
        &mut self,
        model: &MechanismModel,
        bank: usize,
        aggressor: u32,
        hammer: f64,
        press: f64,
    ) {
        for d in 1..=3u32 {
            let c = model.coupling(d);
            if c == 0.0 {
                continue;
            }
            let below = aggressor.checked_sub(d);
            let above = aggressor.checked_add(d).filter(|&r| r < self.rows_per_bank);
            for victim in [below, above].into_iter().flatten() {
                let e = self.rows.entry((bank, victim)).or_default();
                e.hammer += c * hammer;
                e.press += c * press;
            }
        }
    }

    /// Preventive or explicit refresh of one row.
    pub fn refresh_row(&mut self, bank: usize, row: u32, time: Nanos) {
        self.rows.insert(
            (bank, row),
            RowDose {
                hammer: 0.0,
                press: 0.0,
                last_refresh: time,
            },
        );
    }

    /// Periodic refresh: forgets the row entirely, which is equivalent to a
    /// zero dose.
    pub fn periodic_refresh(&mut self, bank: usize, row: u32) {
        self.rows.remove(&(bank, row));
    }

    /// Largest per-mechanism dose over all rows, as `(hammer, press)`.
    pub fn max_dose(&self) -> (f64, f64) {
        self.rows.values().fold((0.0f64, 0.0f64), |acc, d| {
            (acc.0.max(d.hammer), acc.1.max(d.press))
        })
    }

    pub fn collect_bitflips(
        &self,
        model: &MechanismModel,
        profile: &CellProfile,
        retention: Option<&RetentionModel>,
        time: Nanos,
    ) -> BTreeSet<BitFlip> {
        let mut out = BTreeSet::new();
        let mut candidates: Vec<(usize, u32)> = self
            .rows
            .iter()
            .filter(|(_, d)| reaches(d.hammer, model.theta_h) || reaches(d.press, model.theta_p))
            .map(|(k, _)| *k)
            .collect();
        candidates.sort_unstable();
        for (bank, row) in candidates {
            let dose = self.rows[&(bank, row)];
            let cells = profile.row(bank, row);
            cells.disturbed(bank, row, model, &dose, |f| {
                out.insert(f);
            });
        }
        if let Some(ret) = retention {
            for &(bank, row) in &ret.rows {
                let elapsed = time.saturating_sub(self.get(bank, row).last_refresh);
                let cells = profile.row(bank, row);
                for c in &cells.retention {
                    if elapsed > c.budget_ns {
                        out.insert(BitFlip {
                            bank,
                            row,
                            column: c.column,
                            direction: cells.direction(Mechanism::Retention),
                            mechanism: Mechanism::Retention,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitFlip {
    pub bank: usize,
    pub row: u32,
    pub column: u32,
    pub direction: FlipDirection,
    pub mechanism: Mechanism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    pub press_fraction: f64,
    pub hammer_fraction: f64,
    pub retention_fraction: f64,
    pub sigma: f64,
    pub press_hammer_overlap: f64,
    pub press_retention_overlap: f64,
    pub anti_fraction: f64,
    pub region_rows: u32,
    pub retention_median_ns: f64,
    pub retention_sigma: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            press_fraction: 0.05,
            hammer_fraction: 0.02,
            retention_fraction: 0.001,
            sigma: 0.2,
            press_hammer_overlap: 0.00013,
            press_retention_overlap: 0.0034,
            anti_fraction: 0.0,
            region_rows: 512,
            retention_median_ns: 2.0e9,
            retention_sigma: 0.5,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let unit = [
            ("cells.press_fraction", self.press_fraction),
            ("cells.hammer_fraction", self.hammer_fraction),
            ("cells.retention_fraction", self.retention_fraction),
            ("cells.press_hammer_overlap", self.press_hammer_overlap),
            ("cells.press_retention_overlap", self.press_retention_overlap),
            ("cells.anti_fraction", self.anti_fraction),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err((k, "must be within [0, 1]".into()));
            }
        }
        if self.press_fraction + self.hammer_fraction > 1.0 {
            return Err((
                "cells.hammer_fraction",
                "press_fraction + hammer_fraction must be <= 1".into(),
            ));
        }
        if !(self.sigma >= 0.0) || !(self.retention_sigma >= 0.0) {
            return Err(("cells.sigma", "must be nonnegative".into()));
        }
        if self.region_rows == 0 {
            return Err(("cells.region_rows", "must be positive".into()));
        }
        if !(self.retention_median_ns > 0.0) {
            return Err(("cells.retention_median_ns", "must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub column: u32,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetentionCell {
    pub column: u32,
    pub budget_ns: Nanos,
}

/// Sampled vulnerable cells of one row. Disturbance cells are sorted by
/// ascending multiplier; the weakest cell of each mechanism has
/// multiplier 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCells {
    pub press: Vec<Cell>,
    pub hammer: Vec<Cell>,
    pub retention: Vec<RetentionCell>,
    pub anti: bool,
}

impl RowCells {
    pub fn direction(&self, mech: Mechanism) -> FlipDirection {
        let d = match mech {
            Mechanism::Hammer => FlipDirection::ZeroToOne,
            Mechanism::Press | Mechanism::Retention => FlipDirection::OneToZero,
        };
        if self.anti {
            d.inverted()
        } else {
            d
        }
    }

    /// Emits the disturbance flips of this row for the given row dose.
    pub fn disturbed(
        &self,
        bank: usize,
        row: u32,
        model: &MechanismModel,
        dose: &RowDose,
        emit: impl FnMut(BitFlip),
    ) {
        self.disturbed_since(bank, row, model, dose, &mut [0, 0], emit);
    }

    /// Like [`RowCells::disturbed`], skipping the weakest `done[m]` cells of
    /// each mechanism (press, hammer), which were emitted earlier. Cells are
    /// ordered weakest first, so `done` is advanced to the flipped prefix.
    pub fn disturbed_since(
        &self,
        bank: usize,
        row: u32,
        model: &MechanismModel,
        dose: &RowDose,
        done: &mut [usize; 2],
        mut emit: impl FnMut(BitFlip),
    ) {
        let groups = [
            (Mechanism::Press, &self.press, dose.press, model.theta_p),
            (Mechanism::Hammer, &self.hammer, dose.hammer, model.theta_h),
        ];
        for (g, (mechanism, cells, d, theta)) in groups.into_iter().enumerate() {
            let direction = self.direction(mechanism);
            for c in cells.iter().skip(done[g]) {
                if !reaches(d, theta * c.multiplier) {
                    break;
                }
                done[g] += 1;
                emit(BitFlip {
                    bank,
                    row,
                    column: c.column,
                    direction,
                    mechanism,
                });
            }
        }
    }
}

/// Deterministic per-row cell populations.
#[derive(Debug, Clone)]
pub struct CellProfile {
    pub config: CellConfig,
    pub columns: u32,
    pub seed: u64,
    pub t_refw: Nanos,
}

impl CellProfile {
    pub fn new(config: CellConfig, columns: u32, seed: u64, t_refw: Nanos) -> Self {
        Self {
            config,
            columns,
            seed,
            t_refw,
        }
    }

    pub fn is_anti_region(&self, bank: usize, row: u32) -> bool {
        if self.config.anti_fraction <= 0.0 {
            return false;
        }
        let region = row / self.config.region_rows;
        let h = mix(mix(self.seed, 0xa471), mix(bank as u64, region as u64));
        ((h >> 11) as f64 / (1u64 << 53) as f64) < self.config.anti_fraction
    }

    pub fn row(&self, bank: usize, row: u32) -> RowCells {
        let cfg = &self.config;
        let cols = self.columns as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, mix(bank as u64, row as u64)));
        let n_press = ((cfg.press_fraction * cols as f64).round() as usize).min(cols);
        let n_hammer =
            ((cfg.hammer_fraction * cols as f64).round() as usize).min(cols - n_press);
        let n_ret = ((cfg.retention_fraction * cols as f64).round() as usize).min(cols);

        let press_cols: Vec<u32> = sample(&mut rng, cols, n_press)
            .into_iter()
            .map(|c| c as u32)
            .collect();
        let press_set: HashSet<u32> = press_cols.iter().copied().collect();

        let n_ph = ((cfg.press_hammer_overlap * n_press as f64).floor() as usize).min(n_hammer);
        let n_pr = ((cfg.press_retention_overlap * n_press as f64).floor() as usize).min(n_ret);

        // overlap cells come from the front of the (random-order) press list
        let mut hammer_cols: Vec<u32> = press_cols[..n_ph].to_vec();
        draw_outside(&mut rng, cols, &press_set, n_hammer - n_ph, &mut hammer_cols);
        let mut ret_cols: Vec<u32> = press_cols[n_press - n_pr..].to_vec();
        draw_outside(&mut rng, cols, &press_set, n_ret - n_pr, &mut ret_cols);

        let press = with_multipliers(&mut rng, press_cols, cfg.sigma);
        let hammer = with_multipliers(&mut rng, hammer_cols, cfg.sigma);

        let floor = 2 * self.t_refw;
        let budget_dist = LogNormal::new(cfg.retention_median_ns.ln(), cfg.retention_sigma)
            .expect("validated sigma");
        let retention = ret_cols
            .into_iter()
            .map(|column| RetentionCell {
                column,
                budget_ns: (budget_dist.sample(&mut rng) as Nanos).max(floor),
            })
            .collect();

        RowCells {
            press,
            hammer,
            retention,
            anti: self.is_anti_region(bank, row),
        }
    }
}

fn draw_outside(
    rng: &mut ChaCha8Rng,
    cols: usize,
    exclude: &HashSet<u32>,
    n: usize,
    out: &mut Vec<u32>,
) {
    let mut taken: HashSet<u32> = out.iter().copied().collect();
    let available = cols - exclude.len();
    let n = n.min(available.saturating_sub(taken.iter().filter(|c| !exclude.contains(c)).count()));
    let mut added = 0;
    while added < n {
        let c = rng.gen_range(0..cols as u32);
        if !exclude.contains(&c) && taken.insert(c) {
            out.push(c);
            added += 1;
        }
    }
}

fn with_multipliers(rng: &mut ChaCha8Rng, columns: Vec<u32>, sigma: f64) -> Vec<Cell> {
    let dist = LogNormal::new(0.0, sigma).expect("validated sigma");
    let mut cells: Vec<Cell> = columns
        .into_iter()
        .map(|column| Cell {
            column,
            multiplier: dist.sample(rng),
        })
        .collect();
    let min = cells
        .iter()
        .map(|c| c.multiplier)
        .fold(f64::INFINITY, f64::min);
    for c in &mut cells {
        c.multiplier /= min;
    }
    cells.sort_by(|a, b| {
        a.multiplier
            .total_cmp(&b.multiplier)
            .then(a.column.cmp(&b.column))
    });
    cells
}

/// Rows whose retention is evaluated. Only meaningful with periodic refresh
/// disabled; each cell's budget lives in the cell profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetentionModel {
    pub rows: Vec<(usize, u32)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-12)
    }

    #[test]
    fn press_anchor_values() {
        let m = MechanismModel::default();
        assert!(close(m.press.eval(7800.0, 50.0), 1.0, 1e-12));
        assert!(close(m.press.eval(70200.0, 50.0), 9.048, 1e-3));
        let tail = m.press.eval(30_000_000.0, 50.0);
        assert!(close(tail, 9.048 * 30_000_000.0 / 70_200.0, 1e-3), "{tail}");
    }

    #[test]
    fn dose_below_tras_is_rejected() {
        let m = MechanismModel::default();
        assert!(dose_of(&m.press, 35.0, 50.0, 36).is_err());
        assert!(dose_of(&m.press, 36.0, 50.0, 36).is_ok());
    }

    #[test]
    fn closed_form_anchors() {
        let m = MechanismModel::default();
        let s = Pattern::SingleSided;
        assert_eq!(m.acmin_closed_form(36.0, 50.0, s).unwrap(), 1000);
        assert_eq!(m.acmin_closed_form(7800.0, 50.0, s).unwrap(), 48);
        assert_eq!(m.acmin_closed_form(70200.0, 50.0, s).unwrap(), 6);
        assert_eq!(m.acmin_closed_form(30e6, 50.0, s).unwrap(), 1);
        assert_eq!(m.acmin_closed_form(186.0, 50.0, s).unwrap(), 855);
        assert_eq!(m.acmin_closed_form(7800.0, 80.0, s).unwrap(), 27);
        assert_eq!(
            m.acmin_closed_form(36.0, 50.0, Pattern::DoubleSided).unwrap(),
            500
        );
    }

    #[test]
    fn rp_source_curve_reproduces_reduced_thresholds() {
        let m = MechanismModel::table2();
        for (t, tp) in [(36.0, 1000), (66.0, 809), (96.0, 724), (186.0, 619), (336.0, 555), (636.0, 419)] {
            assert_eq!(m.acmin_closed_form(t, 50.0, Pattern::SingleSided).unwrap(), tp);
        }
    }

    #[test]
    fn temperature_factor_interpolates_and_clamps() {
        let m = MechanismModel::default();
        assert_eq!(m.press.temperature_factor(20.0), 1.0);
        assert!(close(m.press.temperature_factor(80.0), 1.0 / 0.55, 1e-12));
        assert!(close(m.press.temperature_factor(95.0), 1.0 / 0.55, 1e-12));
        let mid = m.press.temperature_factor(65.0);
        assert!(close(mid, (1.0 + 1.0 / 0.55) / 2.0, 1e-12));
        assert_eq!(m.hammer.temperature_factor(80.0), 1.0);
    }

    #[test]
    fn presets_validate() {
        for name in MODEL_PRESETS {
            MechanismModel::preset(name).unwrap().validate().unwrap();
        }
        assert!(MechanismModel::preset("nope").is_none());
    }

    #[test]
    fn single_activation_at_tras() {
        let m = MechanismModel::default();
        let mut l = DisturbanceLedger::new(65536);
        l.record_activation(&m, 0, 100, 36, 50.0);
        for v in [99, 101] {
            let d = l.get(0, v);
            assert_eq!(d.hammer, 1.0);
            assert!(close(d.press, 0.02, 1e-12));
        }
        assert!(close(l.get(0, 102).hammer, 0.05, 1e-12));
        assert!(close(l.get(0, 103).hammer, 0.01, 1e-12));
        assert_eq!(l.get(0, 104).hammer, 0.0);
        assert_eq!(l.get(0, 100).hammer, 0.0);
    }

    #[test]
    fn edge_rows_do_not_wrap() {
        let m = MechanismModel::default();
        let mut l = DisturbanceLedger::new(16);
        l.record_activation(&m, 0, 0, 36, 50.0);
        l.record_activation(&m, 0, 15, 36, 50.0);
        assert_eq!(l.get(0, 1).hammer, 1.0);
        assert_eq!(l.get(0, 14).hammer, 1.0);
        assert_eq!(l.tracked_rows(), 6);
    }

    #[test]
    fn activation_restores_the_aggressor() {
        let m = MechanismModel::default();
        let mut l = DisturbanceLedger::new(1024);
        for _ in 0..2000 {
            l.record_activation(&m, 0, 10, 36, 50.0);
            l.record_activation(&m, 0, 12, 36, 50.0);
        }
        assert_eq!(l.get(0, 11).hammer, 4000.0);
        assert!(l.get(0, 12).hammer < 1.0);
        assert!(l.get(0, 10).hammer < 1.0);
    }

    #[test]
    fn refresh_resets_only_that_row() {
        let m = MechanismModel::default();
        let mut l = DisturbanceLedger::new(65536);
        for _ in 0..990 {
            l.record_activation(&m, 0, 10, 36, 50.0);
        }
        l.refresh_row(0, 11, 5);
        l.refresh_row(0, 11, 5);
        assert_eq!(l.get(0, 11).hammer, 0.0);
        assert_eq!(l.get(0, 11).last_refresh, 5);
        assert_eq!(l.get(0, 9).hammer, 990.0);
    }

    #[test]
    fn thousand_acts_reach_hammer_threshold() {
        let m = MechanismModel::default();
        let p = CellProfile::new(CellConfig::default(), 8192, 1, 63_897_600);
        let mut l = DisturbanceLedger::new(65536);
        for _ in 0..999 {
            l.record_activation(&m, 0, 10, 36, 50.0);
        }
        assert!(l.collect_bitflips(&m, &p, None, 0).is_empty());
        l.record_activation(&m, 0, 10, 36, 50.0);
        let flips = l.collect_bitflips(&m, &p, None, 0);
        assert!(!flips.is_empty());
        assert!(flips.iter().all(|f| f.mechanism == Mechanism::Hammer));
        assert!(flips.iter().all(|f| f.direction == FlipDirection::ZeroToOne));
    }

    #[test]
    fn profile_is_deterministic_and_normalized() {
        let p = CellProfile::new(CellConfig::default(), 8192, 42, 63_897_600);
        let a = p.row(3, 1234);
        let b = p.row(3, 1234);
        assert_eq!(a, b);
        assert_ne!(a, p.row(3, 1235));
        assert_eq!(a.press.len(), 410);
        assert_eq!(a.hammer.len(), 164);
        assert_eq!(a.retention.len(), 8);
        assert_eq!(a.press[0].multiplier, 1.0);
        assert!(a.press.windows(2).all(|w| w[0].multiplier <= w[1].multiplier));
        assert!(a.retention.iter().all(|c| c.budget_ns >= 127_795_200));
    }

    #[test]
    fn incremental_emission_matches_full() {
        let m = MechanismModel::default();
        let p = CellProfile::new(CellConfig::default(), 8192, 9, 63_897_600);
        let r = p.row(0, 77);
        let low = RowDose { hammer: 1_050.0, press: 30.0, ..RowDose::default() };
        let high = RowDose { hammer: 1_400.0, press: 80.0, ..RowDose::default() };
        let mut done = [0, 0];
        let mut inc = Vec::new();
        r.disturbed_since(0, 77, &m, &low, &mut done, |f| inc.push(f));
        let first = inc.len();
        r.disturbed_since(0, 77, &m, &high, &mut done, |f| inc.push(f));
        r.disturbed_since(0, 77, &m, &low, &mut done, |f| inc.push(f));
        let mut full = Vec::new();
        r.disturbed(0, 77, &m, &high, |f| full.push(f));
        assert!(first > 0 && inc.len() > first);
        inc.sort();
        full.sort();
        assert_eq!(inc, full);
    }

    #[test]
    fn anti_regions_invert_direction() {
        let cfg = CellConfig {
            anti_fraction: 1.0,
            ..CellConfig::default()
        };
        let p = CellProfile::new(cfg, 8192, 1, 63_897_600);
        let r = p.row(0, 5);
        assert!(r.anti);
        assert_eq!(r.direction(Mechanism::Press), FlipDirection::ZeroToOne);
        assert_eq!(r.direction(Mechanism::Hammer), FlipDirection::OneToZero);
    }
}
