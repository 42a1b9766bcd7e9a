//! Class distributions and the chi-squared split audit.

use std::io::{Read, Write};

use super::{Dataset, SpectralTile, Split, IGNORE_LABEL};
use crate::error::{Error, Result};

/// Normalized per-class pixel fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    fractions: Vec<f64>,
}

impl ClassDistribution {
    /// Normalizes non-negative weights (counts, percentages, ...).
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "class weights must be finite and non-negative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("class distribution has no mass"));
        }
        Ok(Self {
            fractions: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty()
    }
}

/// Pixel histogram over `0..k`, ignoring unlabeled pixels.
pub fn class_distribution<'a>(
    tiles: impl IntoIterator<Item = &'a SpectralTile>,
    k: usize,
) -> Result<ClassDistribution> {
    let mut counts = vec![0u64; k];
    for tile in tiles {
        for &l in &tile.labels {
            if l == IGNORE_LABEL {
                continue;
            }
            *counts.get_mut(l as usize).ok_or_else(|| {
                Error::invalid(format!("label {l} outside [0, {k}) in tile {}", tile.sheet))
            })? += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::invalid("no labelled pixels to count"));
    }
    ClassDistribution::from_weights(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
}

/// `Σ (p − q)² / (p + q)`, with empty classes contributing nothing.
pub fn chi_squared_distance(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distributions over {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    Ok(p.fractions
        .iter()
        .zip(&q.fractions)
        .map(|(&a, &b)| {
            if a + b > 0.0 {
                (a - b).powi(2) / (a + b)
            } else {
                0.0
            }
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAudit {
    pub class_names: Vec<String>,
    pub train: ClassDistribution,
    pub val: ClassDistribution,
    pub test: ClassDistribution,
    pub train_val: f64,
    pub train_test: f64,
    pub val_test: f64,
}

impl SplitAudit {
    pub fn from_distributions(
        class_names: Vec<String>,
        train: ClassDistribution,
        val: ClassDistribution,
        test: ClassDistribution,
    ) -> Result<Self> {
        if class_names.len() != train.len() {
            return Err(Error::invalid("class names do not match the distributions"));
        }
        Ok(Self {
            train_val: chi_squared_distance(&train, &val)?,
            train_test: chi_squared_distance(&train, &test)?,
            val_test: chi_squared_distance(&val, &test)?,
            class_names,
            train,
            val,
            test,
        })
    }
}

pub fn split_audit(ds: &Dataset) -> Result<SplitAudit> {
    let k = ds.manifest.num_classes();
    let mut dists = Vec::with_capacity(3);
    for split in Split::ALL {
        let tiles = ds.split(split);
        if tiles.is_empty() {
            return Err(Error::invalid(format!(
                "need all three splits; `{split}` is empty"
            )));
        }
        dists.push(class_distribution(tiles, k)?);
    }
    let test = dists.pop().unwrap();
    let val = dists.pop().unwrap();
    let train = dists.pop().unwrap();
    SplitAudit::from_distributions(ds.manifest.class_names.clone(), train, val, test)
}

/// CSV `class,train_frac,val_frac,test_frac` with a closing
/// `chi_squared,<train/val>,<train/test>,<val/test>` row.
pub fn write_split_audit(w: impl Write, audit: &SplitAudit) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "train_frac", "val_frac", "test_frac"])?;
    for (i, name) in audit.class_names.iter().enumerate() {
        out.write_record([
            name.clone(),
            format!("{:.8}", audit.train.fractions()[i]),
            format!("{:.8}", audit.val.fractions()[i]),
            format!("{:.8}", audit.test.fractions()[i]),
        ])?;
    }
    out.write_record([
        "chi_squared".to_string(),
        format!("{:.7}", audit.train_val),
        format!("{:.7}", audit.train_test),
        format!("{:.7}", audit.val_test),
    ])?;
    out.flush()?;
    Ok(())
}

/// Reads a `class,train_frac,val_frac,test_frac` table (percentages or
/// fractions; each column is normalized). A `chi_squared` row is skipped.
pub fn read_fraction_table(r: impl Read) -> Result<SplitAudit> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let headers = rdr.headers()?.clone();
    let want = ["class", "train_frac", "val_frac", "test_frac"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!(
            "expected header {}, found {}",
            want.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut names = Vec::new();
    let mut cols = [Vec::new(), Vec::new(), Vec::new()];
    for row in rdr.records() {
        let row = row?;
        if &row[0] == "chi_squared" {
            continue;
        }
        names.push(row[0].to_string());
        for (c, col) in cols.iter_mut().enumerate() {
            let v: f64 = row[c + 1].parse().map_err(|_| {
                Error::Format(format!("bad fraction `{}` for `{}`", &row[c + 1], &row[0]))
            })?;
            col.push(v);
        }
    }
    if names.is_empty() {
        return Err(Error::Format("fraction table has no classes".into()));
    }
    let [a, b, c] = cols;
    SplitAudit::from_distributions(
        names,
        ClassDistribution::from_weights(&a)?,
        ClassDistribution::from_weights(&b)?,
        ClassDistribution::from_weights(&c)?,
    )
}
