//! Accuracy, confusion matrices, confidence intervals and curve smoothing.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, IGNORE_LABEL};
use crate::data::SpectralTile;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    /// Counts every labelled pixel; ignored pixels are skipped.
    pub fn record(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::invalid("truth and prediction lengths differ"));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.k || p >= self.k {
                return Err(Error::invalid(format!(
                    "class {} outside [0, {})",
                    t.max(p),
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::invalid("no labelled pixels were evaluated")),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    /// `K×K` CSV with class names heading both rows and columns.
    pub fn write_csv(&self, w: impl Write, names: &[String]) -> Result<()> {
        if names.len() != self.k {
            return Err(Error::invalid(format!(
                "{} class names for a {}-class matrix",
                names.len(),
                self.k
            )));
        }
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["truth\\pred".to_string()];
        header.extend(names.iter().cloned());
        out.write_record(&header)?;
        for (i, name) in names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend((0..self.k).map(|j| self.get(i, j).to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overall_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub pixels: u64,
}

/// Whole-tile predictions over `tiles`, parallel per tile.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    tiles: &[&SpectralTile],
) -> Result<Evaluation> {
    if tiles.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let k = model.config.num_classes;
    let parts: Vec<ConfusionMatrix> = tiles
        .par_iter()
        .map(|tile| {
            let pred = model.predict(params, &tile.image.cast::<T>())?;
            let mut cm = ConfusionMatrix::new(k);
            cm.record(&tile.labels, &pred)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(k);
    for p in &parts {
        confusion.merge(p);
    }
    Ok(Evaluation {
        overall_accuracy: confusion.overall_accuracy()?,
        pixels: confusion.total(),
        confusion,
    })
}

/// Normal-approximation 95% half-width `1.96·sqrt(p(1−p)/N)`.
pub fn binomial_ci_halfwidth(p: f64, n: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || n == 0 {
        return Err(Error::invalid(format!(
            "need p in [0, 1] and N >= 1, got p={p}, N={n}"
        )));
    }
    Ok(1.96 * (p * (1.0 - p) / n as f64).sqrt())
}

/// Sample sizes `N` for which the half-width in percentage points rounds to
/// `printed_pp` at `decimals` places, as `(N_min, N_max)` (inclusive).
/// Returns `None` when no `N` does.
pub fn implied_sample_size(p: f64, printed_pp: f64, decimals: i32) -> Option<(u64, u64)> {
    let half = 0.5 * 10f64.powi(-decimals);
    let hi_pp = printed_pp + half;
    let lo_pp = (printed_pp - half).max(0.0);
    let var = p * (1.0 - p);
    if var == 0.0 {
        return None;
    }
    // half-width in pp = 196·sqrt(var/N)  =>  N = var·(196/hw)²
    let n_of = |hw: f64| var * (196.0 / hw).powi(2);
    let n_min = n_of(hi_pp).ceil().max(1.0) as u64;
    let n_max = if lo_pp == 0.0 {
        u64::MAX
    } else {
        n_of(lo_pp).floor() as u64
    };
    let rounds = |n: u64| {
        let hw = 100.0 * binomial_ci_halfwidth(p, n).unwrap_or(f64::NAN);
        ((hw * 10f64.powi(decimals)).round() - (printed_pp * 10f64.powi(decimals)).round()).abs()
            < 0.5
    };
    let lo = (n_min.saturating_sub(2)..=n_min.saturating_add(2)).find(|&n| n > 0 && rounds(n))?;
    let hi = (n_max.saturating_sub(2)..=n_max.saturating_add(2))
        .rev()
        .find(|&n| rounds(n))?;
    (lo <= hi).then_some((lo, hi))
}

/// Trailing mean; the first `window − 1` entries average the available
/// prefix.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::invalid("moving average of an empty series"));
    }
    if window == 0 {
        return Err(Error::invalid("moving-average window must be at least 1"));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (i, &v) in series.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= series[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictions() {
        let truth = [0u8, 1, 2, 2, 1, 0, 2];
        let mut cm = ConfusionMatrix::new(3);
        cm.record(&truth, &truth).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), 1.0);
        assert_eq!((cm.get(2, 2), cm.get(0, 1)), (3, 0));

        let mut c = ConfusionMatrix::new(3);
        c.record(&truth, &[2; 7]).unwrap();
        assert_eq!(c.overall_accuracy().unwrap(), 3.0 / 7.0);
    }

    #[test]
    fn three_class_hand_count() {
        let truth = [0u8, 0, 1, 1, 1, 2, IGNORE_LABEL];
        let pred = [0u8, 1, 1, 1, 2, 0, 0];
        let mut cm = ConfusionMatrix::new(3);
        cm.record(&truth, &pred).unwrap();
        let expect = [[1, 1, 0], [0, 2, 1], [1, 0, 0]];
        for (i, row) in expect.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(cm.get(i, j), v);
            }
        }
        assert_eq!(cm.total(), 6);
        assert!((cm.overall_accuracy().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record(&[IGNORE_LABEL; 3], &[0; 3]).unwrap();
        assert!(cm.overall_accuracy().is_err());
    }

    #[test]
    fn csv_layout() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record(&[0, 1, 1], &[0, 0, 1]).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "truth\\pred,a,b\na,1,0\nb,1,1\n"
        );
    }

    #[test]
    fn ci_closed_forms() {
        assert_eq!(binomial_ci_halfwidth(1.0, 10).unwrap(), 0.0);
        let hw = binomial_ci_halfwidth(0.7592, 21_500_000).unwrap();
        assert!((hw - 0.000_180_7).abs() < 5e-7, "{hw}");
        assert_eq!((hw * 100.0 * 100.0).round() / 100.0, 0.02);
        let hw = binomial_ci_halfwidth(0.9671, 21_500_000).unwrap();
        assert_eq!((hw * 100.0 * 100.0).round() / 100.0, 0.01);
        assert!(binomial_ci_halfwidth(1.2, 5).is_err());
        assert!(binomial_ci_halfwidth(0.5, 0).is_err());
    }

    #[test]
    fn implied_sample_size_brackets() {
        let (lo, hi) = implied_sample_size(0.9, 0.02, 2).unwrap();
        for n in [lo, hi, (lo + hi) / 2] {
            let hw = 100.0 * binomial_ci_halfwidth(0.9, n).unwrap();
            assert_eq!((hw * 100.0).round(), 2.0, "{n}");
        }
        let below = 100.0 * binomial_ci_halfwidth(0.9, lo - 1).unwrap();
        assert_ne!((below * 100.0).round(), 2.0);
    }

    #[test]
    fn moving_average_cases() {
        assert_eq!(
            moving_average(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(),
            vec![1.0, 1.5, 2.5, 3.5]
        );
        assert_eq!(moving_average(&[5.0; 4], 3).unwrap(), vec![5.0; 4]);
        assert_eq!(
            moving_average(&[3.0, 1.0, 2.0], 1).unwrap(),
            vec![3.0, 1.0, 2.0]
        );
        assert!(moving_average(&[], 2).is_err());
    }
}
