//! Run configuration: TOML file, `key=value` overrides, presets, eager
//! validation and resolution into simulation inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characterize::SearchConfig;
use crate::controller::{ControllerConfig, RowPolicy, SimSetup};
use crate::disturbance::{CellConfig, MechanismModel, Pattern, MODEL_PRESETS};
use crate::dram::{Geometry, Nanos, RowRemap, TimingParams};
use crate::mitigation::{
    derive_rp_config, graphene_t_for, para_p_for, table2_row, MitigationKind, MitigationParams,
    RpAdaptation,
};
use crate::patterns::TrrBypassSpec;
use crate::trace::{AddressMap, AddressMapConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowPolicyName {
    Open,
    Closed,
    CappedOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub queue_capacity: usize,
    pub column_latency_ns: Nanos,
    pub refresh: bool,
    pub postpone_refresh: bool,
    pub record_commands: bool,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Self {
            queue_capacity: c.queue_capacity,
            column_latency_ns: c.column_latency,
            refresh: c.refresh,
            postpone_refresh: c.postpone_refresh,
            record_commands: c.record_commands,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Acmin,
    TaggonMin,
    Ber,
    Overlap,
    Ecc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeSection {
    pub experiments: Vec<Experiment>,
    /// Tested rows; empty selects the first, middle and last
    /// `rows_per_region` rows of the bank.
    pub rows: Vec<u32>,
    pub rows_per_region: u32,
    pub patterns: Vec<Pattern>,
    pub taggon_ns: Vec<Nanos>,
    pub acs: Vec<u64>,
    pub onoff_delta_ns: Vec<Nanos>,
    pub onoff_fractions: Vec<f64>,
    /// BER runs use the first `ber_rows` tested rows.
    pub ber_rows: u32,
    pub overlap_rows: u32,
    pub overlap_press_taggon_ns: Nanos,
    pub retention_ns: Nanos,
}

impl Default for CharacterizeSection {
    fn default() -> Self {
        Self {
            experiments: vec![
                Experiment::Acmin,
                Experiment::TaggonMin,
                Experiment::Ber,
                Experiment::Overlap,
                Experiment::Ecc,
            ],
            rows: Vec::new(),
            rows_per_region: 1024,
            patterns: vec![Pattern::SingleSided, Pattern::DoubleSided],
            taggon_ns: vec![
                36, 66, 96, 186, 336, 636, 1_536, 3_036, 7_800, 15_036, 30_036, 70_200, 150_036,
                300_036, 600_036, 1_500_036, 3_000_036, 7_500_036, 15_000_036, 30_000_000,
            ],
            acs: vec![1, 10, 100, 1_000, 10_000],
            onoff_delta_ns: vec![6_000],
            onoff_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ber_rows: 64,
            overlap_rows: 1024,
            overlap_press_taggon_ns: 7_800,
            retention_ns: 4_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub pattern: TrrBypassSpec,
    pub reads_grid: Vec<u32>,
    pub aggr_acts_grid: Vec<u32>,
    /// Defenses to attack; empty means the configured mitigation.
    pub defenses: Vec<MitigationKind>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            pattern: TrrBypassSpec::default(),
            reads_grid: vec![1, 16, 32, 64],
            aggr_acts_grid: vec![1, 2, 3],
            defenses: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepJob {
    Derive,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub job: SweepJob,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { job: SweepJob::Derive }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Adds elapsed wall-clock time to result records. Off by default so
    /// equal configurations give byte-identical files.
    pub wall_clock: bool,
    pub plotdata: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            wall_clock: false,
            plotdata: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub mitigation: MitigationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_policy: Option<RowPolicyName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_mro_ns: Option<Nanos>,
    #[serde(rename = "graphene_T", skip_serializing_if = "Option::is_none")]
    pub graphene_t: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graphene_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub para_p: Option<f64>,
    pub trr_capacity: usize,
    pub blast_radius: u32,
    pub t_rh: u64,
    pub temperature_c: f64,
    /// Temperature at which RP configurations are derived; defaults to the
    /// hottest calibrated point of the press curve or the operating
    /// temperature, whichever is higher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rp_temperature_c: Option<f64>,
    pub geometry: Geometry,
    pub timing: TimingParams,
    pub remap: RowRemap,
    pub controller: ControllerSection,
    pub address_map: AddressMapConfig,
    /// Full fault-model override; replaces the `model` preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<MechanismModel>,
    pub cells: CellConfig,
    pub search: SearchConfig,
    pub characterize: CharacterizeSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = MitigationParams::default();
        Self {
            seed: 0,
            preset: None,
            model: None,
            mitigation: m.kind,
            row_policy: None,
            t_mro_ns: None,
            graphene_t: None,
            graphene_k: None,
            para_p: None,
            trr_capacity: m.trr_capacity,
            blast_radius: m.blast_radius,
            t_rh: 1000,
            temperature_c: 50.0,
            rp_temperature_c: None,
            geometry: Geometry::default(),
            timing: TimingParams::default(),
            remap: RowRemap::Identity,
            controller: ControllerSection::default(),
            address_map: AddressMapConfig::default(),
            disturbance: None,
            cells: CellConfig::default(),
            search: SearchConfig::default(),
            characterize: CharacterizeSection::default(),
            attack: AttackSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Everything derived from a validated configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub setup: SimSetup,
    pub search: SearchConfig,
    pub address_map: AddressMap,
    /// Reduced RowHammer threshold for the configured row-open cap.
    pub rp: Option<RpAdaptation>,
}

struct Preset {
    model: &'static str,
    t_mro: Nanos,
    t_rh_reduced: u64,
    graphene_t: u64,
    para_p: f64,
}

fn lookup_preset(name: &str) -> Result<Option<Preset>, ConfigError> {
    if name == "default" {
        return Ok(None);
    }
    let row = name
        .strip_prefix("table2/t_mro_")
        .and_then(|t| t.parse::<Nanos>().ok())
        .and_then(table2_row)
        .ok_or_else(|| {
            invalid(
                "preset",
                "expected `default` or `table2/t_mro_<36|66|96|186|336|636>`",
            )
        })?;
    Ok(Some(Preset {
        model: "table2",
        t_mro: row.0,
        t_rh_reduced: row.1,
        graphene_t: row.2,
        para_p: row.3,
    }))
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `key=value` overrides (dotted keys address sections).
pub fn apply_overrides(table: &mut toml::Table, sets: &[String]) -> Result<(), ConfigError> {
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(format!("override `{s}` is not key=value")))?;
        let key = key.trim();
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| invalid(key, format!("`{p}` is not a section")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, sets: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        apply_overrides(&mut table, sets)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn model_name(&self) -> Result<String, ConfigError> {
        if let Some(m) = &self.model {
            return Ok(m.clone());
        }
        Ok(match self.preset.as_deref() {
            Some(p) => lookup_preset(p)?.map_or("default", |p| p.model).to_string(),
            None => "default".to_string(),
        })
    }

    /// Validates every constraint and derives the simulation inputs.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let preset = match &self.preset {
            Some(p) => lookup_preset(p)?,
            None => None,
        };
        let g = &self.geometry;
        for (k, v) in [
            ("geometry.channels", g.channels),
            ("geometry.ranks", g.ranks),
            ("geometry.bankgroups", g.bankgroups),
            ("geometry.banks_per_group", g.banks_per_group),
            ("geometry.columns", g.columns),
        ] {
            if v == 0 {
                return Err(invalid(k, "must be positive"));
            }
        }
        if g.rows < 8 {
            return Err(invalid("geometry.rows", "must be at least 8"));
        }
        self.timing.validate().map_err(|(k, m)| invalid(k, m))?;
        self.cells.validate().map_err(|(k, m)| invalid(k, m))?;
        let mut search = self.search.clone();
        search.temperature = self.temperature_c;
        search.validate(&self.timing).map_err(|(k, m)| invalid(k, m))?;
        if !(-40.0..=150.0).contains(&self.temperature_c) {
            return Err(invalid("temperature_c", "must be within [-40, 150]"));
        }

        let mut model = match &self.disturbance {
            Some(m) => m.clone(),
            None => {
                let name = self.model_name()?;
                MechanismModel::preset(&name).ok_or_else(|| {
                    invalid("model", format!("unknown model `{name}`; known: {}", MODEL_PRESETS.join(", ")))
                })?
            }
        };
        model.t_ras = self.timing.t_ras;
        model
            .validate()
            .map_err(|e| invalid("disturbance", e.to_string()))?;

        let t_mro = self.t_mro_ns.or(preset.as_ref().map(|p| p.t_mro));
        if let Some(t) = t_mro {
            if t < self.timing.t_ras {
                return Err(invalid(
                    "t_mro_ns",
                    format!("t_mro = {t} ns is below tRAS = {} ns", self.timing.t_ras),
                ));
            }
        }
        let policy_name = self.row_policy.unwrap_or(if t_mro.is_some() {
            RowPolicyName::CappedOpen
        } else {
            RowPolicyName::Open
        });
        let row_policy = match policy_name {
            RowPolicyName::Open => RowPolicy::Open,
            RowPolicyName::Closed => RowPolicy::Closed,
            RowPolicyName::CappedOpen => RowPolicy::CappedOpen(
                t_mro.ok_or_else(|| invalid("t_mro_ns", "capped_open row policy needs t_mro_ns"))?,
            ),
        };
        let rp_kind = matches!(self.mitigation, MitigationKind::GrapheneRp | MitigationKind::ParaRp);
        if rp_kind && !matches!(row_policy, RowPolicy::CappedOpen(_)) {
            return Err(invalid(
                "t_mro_ns",
                format!("{} needs a capped_open row policy with t_mro_ns", self.mitigation.name()),
            ));
        }
        if self.t_rh == 0 {
            return Err(invalid("t_rh", "must be positive"));
        }
        let rp = match t_mro {
            Some(t) => {
                let hottest = model
                    .press
                    .temperature_scale
                    .iter()
                    .map(|p| p.0)
                    .fold(self.temperature_c, f64::max);
                let temp = self.rp_temperature_c.unwrap_or(hottest);
                let mut a = derive_rp_config(&model, t, self.t_rh, temp)
                    .map_err(|e| invalid("t_mro_ns", e.to_string()))?;
                if let Some(p) = &preset {
                    if self.t_rh == 1000 {
                        a.t_rh_reduced = p.t_rh_reduced;
                        a.graphene_t = p.graphene_t;
                        a.para_p = p.para_p;
                    }
                }
                Some(a)
            }
            None => None,
        };

        let defaults = MitigationParams::default();
        let graphene_t = match (self.graphene_t, &rp) {
            (Some(t), _) => t,
            (None, Some(a)) if rp_kind => a.graphene_t,
            _ if self.t_rh != 1000 => graphene_t_for(self.t_rh),
            _ => defaults.graphene_t,
        };
        if graphene_t == 0 {
            return Err(invalid("graphene_T", "must be positive"));
        }
        let para_p = match (self.para_p, &rp) {
            (Some(p), _) => p,
            (None, Some(a)) if rp_kind => a.para_p,
            _ if self.t_rh != 1000 => para_p_for(self.t_rh),
            _ => defaults.para_p,
        };
        if !(0.0..=1.0).contains(&para_p) {
            return Err(invalid("para_p", "must be within [0, 1]"));
        }
        if self.trr_capacity == 0 {
            return Err(invalid("trr_capacity", "must be positive"));
        }
        if self.blast_radius == 0 || self.blast_radius > 3 {
            return Err(invalid("blast_radius", "must be within [1, 3]"));
        }
        if self.graphene_k == Some(0) {
            return Err(invalid("graphene_k", "must be positive"));
        }

        let c = &self.controller;
        if c.queue_capacity == 0 {
            return Err(invalid("controller.queue_capacity", "must be positive"));
        }
        let address_map =
            AddressMap::new(&self.address_map, g).map_err(|e| invalid("address_map", e.to_string()))?;
        if let RowRemap::XorMask { mask } = self.remap {
            if mask >= g.rows || (mask != 0 && !g.rows.is_power_of_two()) {
                return Err(invalid("remap.mask", "must keep rows inside the bank"));
            }
        }

        self.validate_characterize(&model)?;
        self.validate_attack()?;

        let setup = SimSetup {
            geometry: g.clone(),
            timing: self.timing.clone(),
            remap: self.remap.clone(),
            controller: ControllerConfig {
                row_policy,
                queue_capacity: c.queue_capacity,
                column_latency: c.column_latency_ns,
                refresh: c.refresh,
                postpone_refresh: c.postpone_refresh,
                record_commands: c.record_commands,
            },
            model,
            temperature: self.temperature_c,
            cells: self.cells.clone(),
            mitigation: MitigationParams {
                kind: self.mitigation,
                graphene_t,
                graphene_k: self.graphene_k,
                para_p,
                trr_capacity: self.trr_capacity,
                blast_radius: self.blast_radius,
            },
            seed: self.seed,
        };
        Ok(Resolved {
            config: self.clone(),
            setup,
            search,
            address_map,
            rp,
        })
    }

    fn validate_characterize(&self, _model: &MechanismModel) -> Result<(), ConfigError> {
        let ch = &self.characterize;
        let rows = self.geometry.rows;
        if let Some(r) = ch.rows.iter().find(|&&r| r >= rows) {
            return Err(invalid("characterize.rows", format!("row {r} outside the {rows}-row bank")));
        }
        if ch.rows.is_empty() && ch.rows_per_region == 0 {
            return Err(invalid("characterize.rows_per_region", "must be positive"));
        }
        if let Some(t) = ch.taggon_ns.iter().find(|&&t| t < self.timing.t_ras) {
            return Err(invalid(
                "characterize.taggon_ns",
                format!("{t} ns is below tRAS = {} ns", self.timing.t_ras),
            ));
        }
        if ch.acs.contains(&0) {
            return Err(invalid("characterize.acs", "activation counts must be at least 1"));
        }
        if let Some(f) = ch.onoff_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(invalid("characterize.onoff_fractions", format!("{f} is outside [0, 1]")));
        }
        if ch.overlap_press_taggon_ns < self.timing.t_ras {
            return Err(invalid("characterize.overlap_press_taggon_ns", "must be at least tRAS"));
        }
        Ok(())
    }

    fn validate_attack(&self) -> Result<(), ConfigError> {
        let a = &self.attack;
        let p = &a.pattern;
        let rows = self.geometry.rows;
        if p.victim == 0 || p.victim + 1 >= rows {
            return Err(invalid("attack.pattern.victim", "needs a neighbor row on both sides"));
        }
        if p.dummy_distance < 100 {
            return Err(invalid(
                "attack.pattern.dummy_distance",
                "dummy rows must be at least 100 rows from the victim",
            ));
        }
        let last = p.victim as u64 + p.dummy_distance as u64 + p.dummy_spacing as u64 * p.num_dummy.saturating_sub(1) as u64;
        if last >= rows as u64 {
            return Err(invalid("attack.pattern.num_dummy", "dummy rows run past the end of the bank"));
        }
        if p.iterations == 0 {
            return Err(invalid("attack.pattern.iterations", "must be positive"));
        }
        if a.reads_grid.contains(&0) || p.num_reads == 0 {
            return Err(invalid("attack.reads_grid", "read counts must be at least 1"));
        }
        if a.aggr_acts_grid.contains(&0) || p.num_aggr_acts == 0 {
            return Err(invalid("attack.aggr_acts_grid", "activation counts must be at least 1"));
        }
        if p.offset_ns >= self.timing.t_refi {
            return Err(invalid("attack.pattern.offset_ns", "must be below t_refi"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    RunConfig::from_toml_str(&text, sets)
}
