//! Synthetic multi-band scenes, map-sheet split rules, class distribution
//! audits and the grid/patch sampler.

mod audit;
mod io;
mod sampler;
mod synth;

pub use audit::{
    chi_squared_distance, class_distribution, read_fraction_table, split_audit, write_split_audit,
    ClassDistribution, SplitAudit,
};
pub use io::{
    read_attention_dump, read_tile, read_tile_file, write_attention_dump, write_tile,
    write_tile_file, Dataset, Manifest, TileRecord, DTYPE_IMAGE_LABELS, DTYPE_IMAGE_ONLY,
    TILE_MAGIC,
};
pub use sampler::{GridPatchSampler, PatchRef, SamplerConfig};
pub use synth::{
    default_class_names, generate_synthetic_region, signatures, GeneratorConfig, SyntheticRegion,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::backbone::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Half {
    N,
    Z,
}

/// Sub-sheet code `1N..8N`, `1Z..8Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubSheet {
    pub number: u8,
    pub half: Half,
}

impl SubSheet {
    pub fn new(number: u8, half: Half) -> Result<Self> {
        if !(1..=8).contains(&number) {
            return Err(Error::invalid(format!(
                "sub-sheet number {number} outside 1..=8"
            )));
        }
        Ok(Self { number, half })
    }

    /// All 16 codes: `1N..8N` then `1Z..8Z`.
    pub fn all() -> impl Iterator<Item = SubSheet> {
        [Half::N, Half::Z]
            .into_iter()
            .flat_map(|half| (1..=8).map(move |number| SubSheet { number, half }))
    }

    /// Position in the 4×4 block layout. Rows alternate N and Z halves:
    /// `1N-4N / 1Z-4Z / 5N-8N / 5Z-8Z`, so the training sheets fill the left
    /// two columns, validation the upper right and test the lower right.
    pub fn layout(self) -> (usize, usize) {
        let n = (self.number - 1) as usize;
        let half = usize::from(self.half == Half::Z);
        ((n / 4) * 2 + half, n % 4)
    }
}

impl fmt::Display for SubSheet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = match self.half {
            Half::N => 'N',
            Half::Z => 'Z',
        };
        write!(f, "{}{h}", self.number)
    }
}

impl FromStr for SubSheet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("unknown sub-sheet code `{s}`"));
        let (num, half) = s.split_at(s.len().checked_sub(1).ok_or_else(bad)?);
        let half = match half {
            "N" | "n" => Half::N,
            "Z" | "z" => Half::Z,
            _ => return Err(bad()),
        };
        let number: u8 = num.parse().map_err(|_| bad())?;
        SubSheet::new(number, half).map_err(|_| bad())
    }
}

/// `block/sub-sheet`, e.g. `17/4Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SheetIndex {
    pub block: u32,
    pub sub_sheet: SubSheet,
}

impl SheetIndex {
    pub fn new(block: u32, sub_sheet: SubSheet) -> Result<Self> {
        if block == 0 {
            return Err(Error::invalid("block numbers start at 1"));
        }
        Ok(Self { block, sub_sheet })
    }
}

impl fmt::Display for SheetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.block, self.sub_sheet)
    }
}

impl FromStr for SheetIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (block, code) = s
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("sheet `{s}` is not block/code")))?;
        let block: u32 = block
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad block number in `{s}`")))?;
        SheetIndex::new(block, code.parse()?)
    }
}

impl Serialize for SheetIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SheetIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sheets `1,2,5,6` (both halves) train, `3,4` validate, `7,8` test.
pub fn assign_split(sheet: SheetIndex) -> Split {
    split_of_code(sheet.sub_sheet)
}

pub fn split_of_code(code: SubSheet) -> Split {
    match code.number {
        1 | 2 | 5 | 6 => Split::Train,
        3 | 4 => Split::Val,
        _ => Split::Test,
    }
}

/// One training unit: a `[C, H, W]` image with `H·W` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTile {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub sheet: SheetIndex,
}

impl SpectralTile {
    pub fn new(image: Tensor<f32>, labels: Vec<u8>, sheet: SheetIndex) -> Result<Self> {
        if image.rank() != 3 || image.shape()[1] * image.shape()[2] != labels.len() {
            return Err(Error::shape(
                "tile",
                format!("image {:?} with {} labels", image.shape(), labels.len()),
            ));
        }
        Ok(Self {
            image,
            labels,
            sheet,
        })
    }

    pub fn bands(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(l) => Err(Error::invalid(format!(
                "tile {} has label {l} outside [0, {num_classes})",
                self.sheet
            ))),
            None => Ok(()),
        }
    }

    /// Copies the `side×side` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, side: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
        let (c, h, w) = (self.bands(), self.height(), self.width());
        if y + side > h || x + side > w {
            return Err(Error::invalid(format!(
                "crop {side}x{side} at ({y}, {x}) exceeds tile {h}x{w}"
            )));
        }
        let d = self.image.data();
        let mut img = Vec::with_capacity(c * side * side);
        for band in 0..c {
            for row in y..y + side {
                let start = (band * h + row) * w + x;
                img.extend_from_slice(&d[start..start + side]);
            }
        }
        let mut labels = Vec::with_capacity(side * side);
        for row in y..y + side {
            labels.extend_from_slice(&self.labels[row * w + x..row * w + x + side]);
        }
        Ok((Tensor::new(vec![c, side, side], img)?, labels))
    }
}

/// Picks exactly `⌊fraction·n⌋` of `n` items, returned in ascending order.
/// The selection depends only on `(n, fraction, seed)`.
pub fn select_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "data fraction {fraction} outside (0, 1]"
        )));
    }
    let k = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
