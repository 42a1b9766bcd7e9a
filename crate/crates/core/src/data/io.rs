//! Tile files and dataset manifests.
//!
//! Tile layout (little-endian): magic `CFT1`, `u32` C, H, W, `u32` dtype tag,
//! then `f32` values `C×H×W` row-major and, for tag 0, `u8` labels `H×W`.
//! Tag 1 stores a bare `f32` cube (used for attention dumps).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{GeneratorConfig, SyntheticRegion};
use super::{assign_split, SheetIndex, SpectralTile, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TILE_MAGIC: &[u8; 4] = b"CFT1";
pub const DTYPE_IMAGE_LABELS: u32 = 0;
pub const DTYPE_IMAGE_ONLY: u32 = 1;
pub const MANIFEST_FORMAT: &str = "chromaformer-dataset/1";

fn put_header(w: &mut impl Write, shape: [usize; 3], tag: u32) -> Result<()> {
    w.write_all(TILE_MAGIC)?;
    for d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tile extent exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&tag.to_le_bytes())?;
    Ok(())
}

fn put_floats(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tile(w: &mut impl Write, tile: &SpectralTile) -> Result<()> {
    let s = tile.image.shape();
    put_header(w, [s[0], s[1], s[2]], DTYPE_IMAGE_LABELS)?;
    put_floats(w, tile.image.data())?;
    w.write_all(&tile.labels)?;
    Ok(())
}

/// Reads a tag-0 tile. The sheet is not stored in the file.
pub fn read_tile(r: &mut impl Read, sheet: SheetIndex) -> Result<SpectralTile> {
    let ([c, h, w], tag) = read_header(r)?;
    if tag != DTYPE_IMAGE_LABELS {
        return Err(Error::Format(format!(
            "expected a labelled tile, found dtype tag {tag}"
        )));
    }
    let image = read_floats(r, [c, h, w])?;
    let mut labels = vec![0u8; h * w];
    r.read_exact(&mut labels)?;
    SpectralTile::new(image, labels, sheet)
}

fn read_header(r: &mut impl Read) -> Result<([usize; 3], u32)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TILE_MAGIC {
        return Err(Error::Format("missing CFT1 tile magic".into()));
    }
    let mut next = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let dims = [next()? as usize, next()? as usize, next()? as usize];
    let tag = next()?;
    if tag > DTYPE_IMAGE_ONLY {
        return Err(Error::Format(format!("unknown dtype tag {tag}")));
    }
    Ok((dims, tag))
}

fn read_floats(r: &mut impl Read, shape: [usize; 3]) -> Result<Tensor<f32>> {
    let n = shape.iter().product::<usize>();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn write_tile_file(path: &Path, tile: &SpectralTile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tile(&mut w, tile)?;
    w.flush()?;
    Ok(())
}

pub fn read_tile_file(path: &Path, sheet: SheetIndex) -> Result<SpectralTile> {
    read_tile(&mut BufReader::new(File::open(path)?), sheet)
}

/// Writes an `[N_p, C, C]` attention stack as a tag-1 file.
pub fn write_attention_dump(path: &Path, attention: &Tensor<f32>) -> Result<()> {
    let s = attention.shape();
    if s.len() != 3 {
        return Err(Error::shape("attention dump", format!("{s:?}")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    put_header(&mut w, [s[0], s[1], s[2]], DTYPE_IMAGE_ONLY)?;
    put_floats(&mut w, attention.data())?;
    w.flush()?;
    Ok(())
}

/// Reads a tag-1 cube.
pub fn read_attention_dump(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let (shape, tag) = read_header(&mut r)?;
    if tag != DTYPE_IMAGE_ONLY {
        return Err(Error::Format(format!("expected dtype tag 1, found {tag}")));
    }
    read_floats(&mut r, shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sheet: SheetIndex,
    pub split: Split,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub bands: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Generator settings that produced the tiles, when synthetic.
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    pub tiles: Vec<TileRecord>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn count(&self, split: Split) -> usize {
        self.tiles.iter().filter(|t| t.split == split).count()
    }

    /// Writes every tile under `dir/tiles/` and the manifest as
    /// `dir/manifest.json`.
    pub fn write_region(region: &SyntheticRegion, dir: &Path) -> Result<(PathBuf, Manifest)> {
        let tile_dir = dir.join("tiles");
        fs::create_dir_all(&tile_dir)?;
        let mut records = Vec::with_capacity(region.tiles.len());
        for tile in &region.tiles {
            let name = format!("b{:03}_{}.cft", tile.sheet.block, tile.sheet.sub_sheet);
            write_tile_file(&tile_dir.join(&name), tile)?;
            records.push(TileRecord {
                path: format!("tiles/{name}"),
                sheet: tile.sheet,
                split: assign_split(tile.sheet),
                height: tile.height(),
                width: tile.width(),
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            bands: region.config.bands,
            class_names: region.class_names.clone(),
            seed: region.config.seed,
            generator: Some(region.config.clone()),
            tiles: records,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok((path, manifest))
    }

    /// Parses a manifest and checks that every tile exists with the
    /// declared extents.
    pub fn load(path: &Path) -> Result<Manifest> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "unsupported manifest format `{}`",
                manifest.format
            )));
        }
        let root = path.parent().unwrap_or(Path::new("."));
        for rec in &manifest.tiles {
            let mut r = BufReader::new(File::open(root.join(&rec.path))?);
            let ([c, h, w], _) = read_header(&mut r)?;
            if c != manifest.bands || h != rec.height || w != rec.width {
                return Err(Error::Format(format!(
                    "tile {} is {c}x{h}x{w}, manifest declares {}x{}x{}",
                    rec.path, manifest.bands, rec.height, rec.width
                )));
            }
        }
        Ok(manifest)
    }
}

/// A manifest with its tiles in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub tiles: Vec<SpectralTile>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let tiles = manifest
            .tiles
            .iter()
            .map(|rec| {
                let tile = read_tile_file(&root.join(&rec.path), rec.sheet)?;
                tile.check_labels(manifest.num_classes())?;
                Ok(tile)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, tiles })
    }

    pub fn from_region(region: &SyntheticRegion) -> Dataset {
        let tiles = region.tiles.clone();
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            bands: region.config.bands,
            class_names: region.class_names.clone(),
            seed: region.config.seed,
            generator: Some(region.config.clone()),
            tiles: tiles
                .iter()
                .map(|t| TileRecord {
                    path: String::new(),
                    sheet: t.sheet,
                    split: assign_split(t.sheet),
                    height: t.height(),
                    width: t.width(),
                })
                .collect(),
        };
        Dataset { manifest, tiles }
    }

    pub fn split(&self, split: Split) -> Vec<&SpectralTile> {
        self.tiles
            .iter()
            .zip(&self.manifest.tiles)
            .filter(|(_, rec)| rec.split == split)
            .map(|(t, _)| t)
            .collect()
    }
}
