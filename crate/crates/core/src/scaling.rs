//! Scaling-efficiency coefficients within model families.
//!
//! For a record against its family baseline (the smallest model),
//! `G = acc/acc₀`, `P = params/params₀`, `C = time/time₀` and
//! `S = −1 / log₁₀(G / (P·C))`. `S` is defined only while `G < P·C`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub family: String,
    pub name: String,
    pub params: f64,
    /// Time per epoch, in any unit shared by the family.
    pub time: f64,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.params >= 1.0) {
            return Err(Error::invalid(format!(
                "{}: params must be >= 1",
                self.name
            )));
        }
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(Error::invalid(format!(
                "{}: time must be positive",
                self.name
            )));
        }
        if !(self.accuracy > 0.0 && self.accuracy <= 1.0) {
            return Err(Error::invalid(format!(
                "{}: accuracy must lie in (0, 1]",
                self.name
            )));
        }
        Ok(())
    }
}

/// Reads `family,name,params,time,accuracy`. If any accuracy exceeds 1 the
/// column is read as percentages.
pub fn read_records(r: impl Read) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let want = ["family", "name", "params", "time", "accuracy"];
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != want {
        return Err(Error::Format(format!(
            "expected header {}, found {}",
            want.join(","),
            headers.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|_| {
                Error::Format(format!("bad {} `{}` for `{}`", want[i], &row[i], &row[1]))
            })
        };
        out.push(RunRecord {
            family: row[0].to_string(),
            name: row[1].to_string(),
            params: num(2)?,
            time: num(3)?,
            accuracy: num(4)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Format("no run records".into()));
    }
    if out.iter().any(|r| r.accuracy > 1.0) {
        for r in &mut out {
            r.accuracy /= 100.0;
        }
    }
    for r in &out {
        r.validate()?;
    }
    Ok(out)
}

/// `(G, P, C)` of `record` against `baseline`.
pub fn factors(record: &RunRecord, baseline: &RunRecord) -> Result<(f64, f64, f64)> {
    if baseline.accuracy <= 0.0 || baseline.params <= 0.0 || baseline.time <= 0.0 {
        return Err(Error::invalid(format!(
            "baseline {} has a zero quantity",
            baseline.name
        )));
    }
    if record.family != baseline.family {
        return Err(Error::invalid(format!(
            "{} ({}) compared against a baseline from {}",
            record.name, record.family, baseline.family
        )));
    }
    Ok((
        record.accuracy / baseline.accuracy,
        record.params / baseline.params,
        record.time / baseline.time,
    ))
}

/// `−1 / log₁₀(G / (P·C))`; an error when `G ≥ P·C`.
pub fn scaling_coefficient(g: f64, p: f64, c: f64) -> Result<f64> {
    if !(g > 0.0 && p > 0.0 && c > 0.0) {
        return Err(Error::invalid("scaling factors must be positive"));
    }
    let ratio = g / (p * c);
    if ratio == 1.0 {
        return Err(Error::Undefined(
            "G = P·C, the coefficient divides by zero".into(),
        ));
    }
    if ratio > 1.0 {
        return Err(Error::Undefined(
            "super-efficient, coefficient undefined under this formula".into(),
        ));
    }
    Ok(-1.0 / ratio.log10())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Baseline,
    /// Family with a single member.
    NotApplicable,
    Coefficient {
        g: f64,
        p: f64,
        c: f64,
        s: f64,
    },
    Undefined {
        g: f64,
        p: f64,
        c: f64,
        note: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub record: RunRecord,
    pub entry: Entry,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Series {
    pub family: String,
    /// `(P, S)` for defined coefficients.
    pub scaling: Vec<(f64, f64)>,
    /// `(P, accuracy)` including the baseline at `P = 1`.
    pub accuracy: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    /// Families in name order; rows within a family by parameters, time,
    /// then name.
    pub rows: Vec<ReportRow>,
    pub series: Vec<Series>,
}

fn order(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    a.params
        .total_cmp(&b.params)
        .then(a.time.total_cmp(&b.time))
        .then_with(|| a.name.cmp(&b.name))
}

pub fn build_report(records: &[RunRecord]) -> Result<ScalingReport> {
    if records.is_empty() {
        return Err(Error::invalid("no run records"));
    }
    let mut families: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        families.entry(&r.family).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut series = Vec::new();
    for (family, mut members) in families {
        members.sort_by(|a, b| order(a, b));
        let base = members[0];
        if members.len() == 1 {
            rows.push(ReportRow {
                record: base.clone(),
                entry: Entry::NotApplicable,
            });
            continue;
        }
        let mut s = Series {
            family: family.to_string(),
            ..Default::default()
        };
        for (i, r) in members.iter().enumerate() {
            let entry = if i == 0 {
                Entry::Baseline
            } else {
                let (g, p, c) = factors(r, base)?;
                match scaling_coefficient(g, p, c) {
                    Ok(sc) => {
                        s.scaling.push((p, sc));
                        Entry::Coefficient { g, p, c, s: sc }
                    }
                    Err(Error::Undefined(note)) => Entry::Undefined { g, p, c, note },
                    Err(e) => return Err(e),
                }
            };
            s.accuracy.push((r.params / base.params, r.accuracy));
            rows.push(ReportRow {
                record: (*r).clone(),
                entry,
            });
        }
        series.push(s);
    }
    Ok(ScalingReport { rows, series })
}

impl ScalingReport {
    pub fn coefficient(&self, name: &str) -> Option<&Entry> {
        self.rows
            .iter()
            .find(|r| r.record.name == name)
            .map(|r| &r.entry)
    }

    /// `family,name,params,time,accuracy,G,P,C,scaling_coefficient,note`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "family",
            "name",
            "params",
            "time",
            "accuracy",
            "G",
            "P",
            "C",
            "scaling_coefficient",
            "note",
        ])?;
        for row in &self.rows {
            let r = &row.record;
            let f = |v: f64| format!("{v:.6}");
            let (g, p, c, s, note) = match &row.entry {
                Entry::Baseline => (f(1.0), f(1.0), f(1.0), "Baseline".into(), String::new()),
                Entry::NotApplicable => (
                    String::new(),
                    String::new(),
                    String::new(),
                    "N/A".into(),
                    "single-member family".into(),
                ),
                Entry::Coefficient { g, p, c, s } => {
                    (f(*g), f(*p), f(*c), format!("{s:.4}"), String::new())
                }
                Entry::Undefined { g, p, c, note } => {
                    (f(*g), f(*p), f(*c), "undefined".into(), note.clone())
                }
            };
            out.write_record([
                r.family.clone(),
                r.name.clone(),
                r.params.to_string(),
                r.time.to_string(),
                format!("{:.6}", r.accuracy),
                g,
                p,
                c,
                s,
                note,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
