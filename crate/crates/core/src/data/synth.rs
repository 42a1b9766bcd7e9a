//! Seeded synthetic multi-band scenes.
//!
//! Each block is one square scene of `4×4` sub-sheets. Class regions are the
//! Voronoi cells of random sites whose classes follow the target mixture.
//! A pixel of class `k` takes the class signature `s_k ∈ [0, 1]^C`, plus
//! spatially correlated Gaussian noise, times a per-tile, per-band gain.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SheetIndex, SpectralTile, SubSheet, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LAND_COVER: [&str; 14] = [
    "Coastal dune habitats",
    "Cultivated land",
    "Grasslands",
    "Heathland",
    "Inland marshes",
    "Marine habitats",
    "Pioneer vegetation",
    "Small landscape features - not specified",
    "Small non-woody landscape features",
    "Small woody landscape features",
    "Unknown",
    "Urban areas",
    "Water bodies",
    "Woodland and shrub",
];

/// Land-cover style names for up to 14 classes, `class_<i>` beyond.
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| match LAND_COVER.get(i) {
            Some(n) if k <= LAND_COVER.len() => (*n).to_string(),
            _ => format!("class_{i:02}"),
        })
        .collect()
}

fn d_blocks() -> usize {
    2
}
fn d_tile_side() -> usize {
    32
}
fn d_bands() -> usize {
    12
}
fn d_classes() -> usize {
    6
}
fn d_noise() -> f64 {
    0.04
}
fn d_blur() -> usize {
    1
}
fn d_gain() -> f64 {
    0.25
}
fn d_sites() -> usize {
    4
}
fn d_angle() -> f64 {
    8.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub seed: u64,
    /// Number of blocks, numbered from 1.
    #[serde(default = "d_blocks")]
    pub blocks: usize,
    #[serde(default = "d_tile_side")]
    pub tile_side: usize,
    #[serde(default = "d_bands")]
    pub bands: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    /// Standard deviation of the additive noise.
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Box-blur radius that correlates the noise spatially.
    #[serde(default = "d_blur")]
    pub noise_blur: usize,
    /// Per-tile band gains are drawn from `1 ± gain_jitter`.
    #[serde(default = "d_gain")]
    pub gain_jitter: f64,
    /// Voronoi sites per sub-sheet.
    #[serde(default = "d_sites")]
    pub sites_per_sheet: usize,
    /// Target class mixture; uniform when absent.
    #[serde(default)]
    pub mixture: Option<Vec<f64>>,
    /// Minimum pairwise angle between class signatures, in degrees.
    #[serde(default = "d_angle")]
    pub min_angle_deg: f64,
    /// Probability that a pixel is unlabeled.
    #[serde(default)]
    pub ignore_fraction: f64,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands < 4 {
            return Err(Error::config(format!(
                "need at least 4 bands, got {}",
                self.bands
            )));
        }
        if self.classes < 3 {
            return Err(Error::config(format!(
                "need at least 3 classes, got {}",
                self.classes
            )));
        }
        if self.classes >= IGNORE_LABEL as usize {
            return Err(Error::config("class count collides with the ignore label"));
        }
        if self.blocks == 0 || self.tile_side == 0 || self.sites_per_sheet == 0 {
            return Err(Error::config(
                "blocks, tile side and site density must be positive",
            ));
        }
        if !(self.noise >= 0.0 && self.gain_jitter >= 0.0 && self.gain_jitter < 1.0) {
            return Err(Error::config(
                "noise must be >= 0 and gain jitter in [0, 1)",
            ));
        }
        if !(0.0..1.0).contains(&self.ignore_fraction) {
            return Err(Error::config("ignore fraction must lie in [0, 1)"));
        }
        if let Some(m) = &self.mixture {
            if m.len() != self.classes
                || m.iter().any(|&w| !(w >= 0.0))
                || m.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::config(
                    "mixture needs one non-negative weight per class",
                ));
            }
        }
        if let Some(n) = &self.class_names {
            if n.len() != self.classes {
                return Err(Error::config(format!(
                    "{} class names for {} classes",
                    n.len(),
                    self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn target_mixture(&self) -> Vec<f64> {
        let w = self
            .mixture
            .clone()
            .unwrap_or_else(|| vec![1.0; self.classes]);
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| default_class_names(self.classes))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticRegion {
    pub config: GeneratorConfig,
    pub class_names: Vec<String>,
    /// `[K, C]`
    pub signatures: Vec<Vec<f64>>,
    /// Block-major, sub-sheets in [`SubSheet::all`] order.
    pub tiles: Vec<SpectralTile>,
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Class signatures in `[0.1, 0.9]^C` with pairwise angles of at least
/// `min_angle_deg`, drawn by rejection.
pub fn signatures(
    seed: u64,
    classes: usize,
    bands: usize,
    min_angle_deg: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while out.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(format!(
                "cannot place {classes} signatures {min_angle_deg} degrees apart in {bands} bands"
            )));
        }
        let s: Vec<f64> = (0..bands).map(|_| rng.random_range(0.1..0.9)).collect();
        if out.iter().all(|o| angle_deg(o, &s) >= min_angle_deg) {
            out.push(s);
        }
    }
    Ok(out)
}

fn box_blur(field: &mut [f64], side: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let norm = (2 * radius + 1) as f64;
    let clamp = |i: usize| i.saturating_sub(radius).min(side - 1);
    let mut tmp = vec![0.0; field.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = (x..=x + 2 * radius)
                .map(|o| field[y * side + clamp(o)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..side {
        for x in 0..side {
            field[y * side + x] = (y..=y + 2 * radius)
                .map(|o| tmp[clamp(o) * side + x])
                .sum::<f64>()
                / norm;
        }
    }
    // a separable box blur of white noise shrinks its std by about (2r+1)
    for v in field.iter_mut() {
        *v *= norm;
    }
}

fn generate_block(
    cfg: &GeneratorConfig,
    block: u32,
    sigs: &[Vec<f64>],
) -> Result<Vec<SpectralTile>> {
    let t = cfg.tile_side;
    let side = 4 * t;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(block as u64);

    let mixture =
        WeightedIndex::new(cfg.target_mixture()).map_err(|e| Error::config(e.to_string()))?;
    let n_sites = cfg.sites_per_sheet * 16;
    let sites: Vec<(f64, f64, u8)> = (0..n_sites)
        .map(|_| {
            let y = rng.random_range(0.0..side as f64);
            let x = rng.random_range(0.0..side as f64);
            (y, x, mixture.sample(&mut rng) as u8)
        })
        .collect();
    let mut labels = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sy, sx, k) in &sites {
                let d = (sy - py).powi(2) + (sx - px).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels[y * side + x] = best.1;
        }
    }

    let c = cfg.bands;
    let mut noise = vec![vec![0.0; side * side]; c];
    if cfg.noise > 0.0 {
        for band in noise.iter_mut() {
            for v in band.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            box_blur(band, side, cfg.noise_blur);
            for v in band.iter_mut() {
                *v *= cfg.noise;
            }
        }
    }

    SubSheet::all()
        .map(|code| {
            let (row, col) = code.layout();
            let gains: Vec<f64> = (0..c)
                .map(|_| 1.0 + cfg.gain_jitter * rng.random_range(-1.0..=1.0))
                .collect();
            let mut img = Vec::with_capacity(c * t * t);
            for (band, gain) in gains.iter().enumerate() {
                for y in row * t..(row + 1) * t {
                    for x in col * t..(col + 1) * t {
                        let k = labels[y * side + x] as usize;
                        let v = gain * (sigs[k][band] + noise[band][y * side + x]);
                        img.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            let mut tile_labels = Vec::with_capacity(t * t);
            for y in row * t..(row + 1) * t {
                for x in col * t..(col + 1) * t {
                    let unlabeled =
                        cfg.ignore_fraction > 0.0 && rng.random_bool(cfg.ignore_fraction);
                    tile_labels.push(if unlabeled {
                        IGNORE_LABEL
                    } else {
                        labels[y * side + x]
                    });
                }
            }
            SpectralTile::new(
                Tensor::new(vec![c, t, t], img)?,
                tile_labels,
                SheetIndex::new(block, code)?,
            )
        })
        .collect()
}

/// Builds every tile of `blocks` scenes; identical configs give identical
/// tiles regardless of thread count.
pub fn generate_synthetic_region(cfg: &GeneratorConfig) -> Result<SyntheticRegion> {
    cfg.validate()?;
    let sigs = signatures(cfg.seed, cfg.classes, cfg.bands, cfg.min_angle_deg)?;
    let blocks: Vec<Vec<SpectralTile>> = (1..=cfg.blocks as u32)
        .into_par_iter()
        .map(|b| generate_block(cfg, b, &sigs))
        .collect::<Result<_>>()?;
    Ok(SyntheticRegion {
        config: cfg.clone(),
        class_names: cfg.names(),
        signatures: sigs,
        tiles: blocks.into_iter().flatten().collect(),
    })
}
