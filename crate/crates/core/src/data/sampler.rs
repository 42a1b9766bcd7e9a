//! Griding tiles into cells and sampling square groups of cells as patches.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SpectralTile;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub cell_side: usize,
    /// Patch side in cells.
    pub patch_cells: usize,
    /// Patches per epoch.
    pub n_patches: usize,
    #[serde(default)]
    pub replacement: bool,
    #[serde(default)]
    pub seed: u64,
}

/// A patch: tile index and top-left pixel of a `side×side` window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub tile: usize,
    pub y: usize,
    pub x: usize,
    pub side: usize,
}

impl PatchRef {
    pub fn extract(
        &self,
        tiles: &[&SpectralTile],
    ) -> Result<(crate::tensor::Tensor<f32>, Vec<u8>)> {
        tiles[self.tile].crop(self.y, self.x, self.side)
    }
}

/// Candidate patches are every cell-aligned `patch_cells × patch_cells`
/// group that fits inside a tile.
#[derive(Clone, Debug)]
pub struct GridPatchSampler {
    config: SamplerConfig,
    candidates: Vec<PatchRef>,
}

impl GridPatchSampler {
    pub fn new(tiles: &[&SpectralTile], config: SamplerConfig) -> Result<Self> {
        let SamplerConfig {
            cell_side,
            patch_cells,
            ..
        } = config;
        if cell_side == 0 || patch_cells == 0 {
            return Err(Error::config("cell side and patch size must be positive"));
        }
        let side = cell_side * patch_cells;
        let mut candidates = Vec::new();
        for (i, t) in tiles.iter().enumerate() {
            let (h, w) = (t.height(), t.width());
            if h % cell_side != 0 || w % cell_side != 0 {
                return Err(Error::config(format!(
                    "cell side {cell_side} does not divide tile {h}x{w}"
                )));
            }
            if side > h || side > w {
                return Err(Error::config(format!(
                    "patch of {side} pixels is larger than tile {h}x{w}"
                )));
            }
            let (ch, cw) = (h / cell_side, w / cell_side);
            for cy in 0..=ch - patch_cells {
                for cx in 0..=cw - patch_cells {
                    candidates.push(PatchRef {
                        tile: i,
                        y: cy * cell_side,
                        x: cx * cell_side,
                        side,
                    });
                }
            }
        }
        if candidates.is_empty() {
            return Err(Error::config("sampler has no tiles"));
        }
        if !config.replacement && config.n_patches > candidates.len() {
            return Err(Error::config(format!(
                "{} patches requested without replacement from {} candidates",
                config.n_patches,
                candidates.len()
            )));
        }
        Ok(Self { config, candidates })
    }

    pub fn candidates(&self) -> &[PatchRef] {
        &self.candidates
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// The patch sequence of one epoch; a function of `(seed, epoch)` only.
    pub fn epoch(&self, epoch: u64) -> Vec<PatchRef> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        let n = self.candidates.len();
        if self.config.replacement {
            (0..self.config.n_patches)
                .map(|_| self.candidates[rng.random_range(0..n)])
                .collect()
        } else {
            sample(&mut rng, n, self.config.n_patches)
                .into_iter()
                .map(|i| self.candidates[i])
                .collect()
        }
    }
}
