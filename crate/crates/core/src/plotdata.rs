//! Flat CSV tables per figure family, aggregated from result records.
//!
//! | file | columns |
//! |---|---|
//! | `acmin-vs-taggon.csv` | t_aggon_ns, pattern, temperature_c, rows, no_bitflip_rows, ac_min_min, ac_min_mean, ac_min_max |
//! | `taggonmin-vs-ac.csv` | ac, pattern, temperature_c, rows, no_bitflip_rows, t_aggon_min_min_ns, t_aggon_min_mean_ns, t_aggon_min_max_ns |
//! | `ber-onoff.csv` | delta_ns, on_fraction, pattern, temperature_c, rows, ber_max, ber_mean |
//! | `overlap.csv` | set_a, set_b, rows, size_a, size_b, intersection, overlap |
//! | `ecc-hist.csv` | source, words_1_2, words_3_8, words_over_8, max_per_word |
//! | `attack-bars.csv` | defense, num_aggr_acts, num_reads, bitflips, rows_with_bitflips |
//!
//! Statistics over rows without a bitflip are left empty.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::disturbance::Pattern;
use crate::results::{Record, ResultRecord};

pub const FAMILIES: [&str; 6] = [
    "acmin-vs-taggon",
    "taggonmin-vs-ac",
    "ber-onoff",
    "overlap",
    "ecc-hist",
    "attack-bars",
];

fn pattern_name(p: Pattern) -> &'static str {
    match p {
        Pattern::SingleSided => "single",
        Pattern::DoubleSided => "double",
    }
}

#[derive(Default)]
struct Agg {
    rows: u64,
    none: u64,
    values: Vec<f64>,
}

impl Agg {
    fn push(&mut self, v: Option<u64>) {
        self.rows += 1;
        match v {
            Some(x) => self.values.push(x as f64),
            None => self.none += 1,
        }
    }

    fn stats(&self) -> [String; 3] {
        if self.values.is_empty() {
            return [String::new(), String::new(), String::new()];
        }
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        [min.to_string(), mean.to_string(), max.to_string()]
    }
}

type Table = (Vec<&'static str>, Vec<Vec<String>>);

/// Builds every table; each has its header even when no record matches.
pub fn tables(records: &[ResultRecord]) -> BTreeMap<&'static str, Table> {
    let mut acmin: BTreeMap<(u64, Pattern, u64), Agg> = BTreeMap::new();
    let mut taggon: BTreeMap<(u64, Pattern, u64), Agg> = BTreeMap::new();
    let mut ber: BTreeMap<(u64, u64, Pattern, u64), (u64, f64, f64)> = BTreeMap::new();
    let mut overlap = Vec::new();
    let mut ecc = Vec::new();
    let mut attack = Vec::new();
    for r in records {
        match &r.record {
            Record::Acmin {
                pattern,
                t_aggon_ns,
                temperature_c,
                ac_min,
                ..
            } => acmin
                .entry((*t_aggon_ns, *pattern, temperature_c.to_bits()))
                .or_default()
                .push(*ac_min),
            Record::TaggonMin {
                pattern,
                ac,
                temperature_c,
                t_aggon_min_ns,
                ..
            } => taggon
                .entry((*ac, *pattern, temperature_c.to_bits()))
                .or_default()
                .push(*t_aggon_min_ns),
            Record::Ber {
                pattern,
                delta_ns,
                on_fraction,
                temperature_c,
                ber: b,
                ..
            } => {
                let e = ber
                    .entry((*delta_ns, on_fraction.to_bits(), *pattern, temperature_c.to_bits()))
                    .or_insert((0, 0.0, 0.0));
                e.0 += 1;
                e.1 = e.1.max(*b);
                e.2 += b;
            }
            Record::Overlap {
                set_a,
                set_b,
                rows,
                size_a,
                size_b,
                intersection,
                overlap: o,
            } => overlap.push(vec![
                set_a.clone(),
                set_b.clone(),
                rows.to_string(),
                size_a.to_string(),
                size_b.to_string(),
                intersection.to_string(),
                o.map(|x| x.to_string()).unwrap_or_default(),
            ]),
            Record::Ecc { source, histogram: h } => ecc.push(vec![
                source.clone(),
                h.words_1_2.to_string(),
                h.words_3_8.to_string(),
                h.words_over_8.to_string(),
                h.max_per_word.to_string(),
            ]),
            Record::Attack {
                defense,
                num_aggr_acts,
                num_reads,
                bitflips,
                rows_with_bitflips,
                ..
            } => attack.push(vec![
                defense.name().to_string(),
                num_aggr_acts.to_string(),
                num_reads.to_string(),
                bitflips.to_string(),
                rows_with_bitflips.to_string(),
            ]),
            Record::Simulate { .. } | Record::Sweep { .. } => {}
        }
    }
    let agg_rows = |m: BTreeMap<(u64, Pattern, u64), Agg>| -> Vec<Vec<String>> {
        m.into_iter()
            .map(|((x, p, temp), a)| {
                let [min, mean, max] = a.stats();
                vec![
                    x.to_string(),
                    pattern_name(p).to_string(),
                    f64::from_bits(temp).to_string(),
                    a.rows.to_string(),
                    a.none.to_string(),
                    min,
                    mean,
                    max,
                ]
            })
            .collect()
    };
    let ber_rows = ber
        .into_iter()
        .map(|((d, f, p, temp), (n, max, sum))| {
            vec![
                d.to_string(),
                f64::from_bits(f).to_string(),
                pattern_name(p).to_string(),
                f64::from_bits(temp).to_string(),
                n.to_string(),
                max.to_string(),
                (sum / n as f64).to_string(),
            ]
        })
        .collect();
    let mut out = BTreeMap::new();
    out.insert(
        "acmin-vs-taggon",
        (
            vec!["t_aggon_ns", "pattern", "temperature_c", "rows", "no_bitflip_rows", "ac_min_min", "ac_min_mean", "ac_min_max"],
            agg_rows(acmin),
        ),
    );
    out.insert(
        "taggonmin-vs-ac",
        (
            vec![
                "ac",
                "pattern",
                "temperature_c",
                "rows",
                "no_bitflip_rows",
                "t_aggon_min_min_ns",
                "t_aggon_min_mean_ns",
                "t_aggon_min_max_ns",
            ],
            agg_rows(taggon),
        ),
    );
    out.insert(
        "ber-onoff",
        (
            vec!["delta_ns", "on_fraction", "pattern", "temperature_c", "rows", "ber_max", "ber_mean"],
            ber_rows,
        ),
    );
    out.insert(
        "overlap",
        (
            vec!["set_a", "set_b", "rows", "size_a", "size_b", "intersection", "overlap"],
            overlap,
        ),
    );
    out.insert(
        "ecc-hist",
        (vec!["source", "words_1_2", "words_3_8", "words_over_8", "max_per_word"], ecc),
    );
    out.insert(
        "attack-bars",
        (
            vec!["defense", "num_aggr_acts", "num_reads", "bitflips", "rows_with_bitflips"],
            attack,
        ),
    );
    out
}

pub fn emit_plotdata(records: &[ResultRecord], dir: &Path) -> Result<Vec<PathBuf>, csv::Error> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, (header, rows)) in tables(records) {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_results_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_plotdata(&[], dir.path()).unwrap();
        assert_eq!(paths.len(), FAMILIES.len());
        for f in FAMILIES {
            let text = std::fs::read_to_string(dir.path().join(format!("{f}.csv"))).unwrap();
            assert_eq!(text.lines().count(), 1, "{f}");
        }
    }

    #[test]
    fn acmin_rows_grouped() {
        let mk = |row, t, p, ac| ResultRecord {
            id: String::new(),
            seed: 0,
            record: Record::Acmin {
                bank: 0,
                row,
                pattern: p,
                t_aggon_ns: t,
                temperature_c: 50.0,
                ac_min: ac,
            },
            wall_clock_ms: None,
        };
        let recs = vec![
            mk(0, 36, Pattern::SingleSided, Some(1000)),
            mk(1, 36, Pattern::SingleSided, Some(1002)),
            mk(0, 36, Pattern::DoubleSided, Some(500)),
            mk(0, 7800, Pattern::SingleSided, None),
        ];
        let t = tables(&recs);
        let rows = &t["acmin-vs-taggon"].1;
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], ["36", "single", "50", "2", "0", "1000", "1001", "1002"]);
        assert_eq!(rows[2][4], "1");
        assert_eq!(rows[2][5], "");
    }
}
