//! Segmentation networks: the windowed-attention encoder (with or without the
//! spectral module in stage 1) and two convolutional baselines.

pub mod checkpoint;
mod cnn;
mod swin;
pub mod window;

use serde::{Deserialize, Serialize};

pub use cnn::{ResNetLike, UnetppLike};
pub use swin::{
    block_forward, effective_window, spectral_fusion, BlockWeights, SpectralFusion, SwinBlock,
    SwinNet,
};
pub use window::{
    relative_position_index, shifted_window_msa, window_msa, window_partition, window_reverse,
    windowed_attention, AttnWeights, Grid, WindowAttention, WindowLayout,
};

use crate::autodiff::{Reduction, Var};
use crate::error::{Error, Result};
use crate::params::{ParamRegistry, ParamSpec, ParamStore, Session};
use crate::sdm::SdmConfig;
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Chromaformer,
    Swin,
    ResnetLike,
    UnetppLike,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Chromaformer => "chromaformer",
            Family::Swin => "swin",
            Family::ResnetLike => "resnet_like",
            Family::UnetppLike => "unetpp_like",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "chromaformer" => Family::Chromaformer,
            "swin" => Family::Swin,
            "resnet_like" => Family::ResnetLike,
            "unetpp_like" => Family::UnetppLike,
            other => return Err(Error::config(format!("unknown model family `{other}`"))),
        })
    }
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_true() -> bool {
    true
}

/// Full architecture description.
///
/// For the transformer families stage `i` has width `embed_dim · 2^i`. The
/// convolutional baselines read `embed_dim` as their base width and
/// `stage_depths` as block counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub in_bands: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    #[serde(default)]
    pub head_counts: Vec<usize>,
    #[serde(default)]
    pub window_side: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub sdm: Option<SdmConfig>,
    /// Width of the per-stage projections in the segmentation head.
    #[serde(default)]
    pub head_dim: usize,
    #[serde(default = "default_true")]
    pub rel_pos_bias: bool,
}

/// Variant names of the size ladder, smallest first.
pub const VARIANTS: [&str; 5] = ["t", "s", "b", "l", "h"];

impl ModelConfig {
    pub fn shift(&self) -> usize {
        self.window_side / 2
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self.family, Family::Chromaformer | Family::Swin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::config("class count collides with the ignore label"));
        }
        if self.in_bands == 0 || self.embed_dim == 0 {
            return Err(Error::config(
                "band count and embedding width must be positive",
            ));
        }
        if self.stage_depths.is_empty() || self.stage_depths.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        match (self.family, &self.sdm) {
            (Family::Chromaformer, None) => {
                return Err(Error::config("chromaformer requires an sdm configuration"))
            }
            (f, Some(_)) if f != Family::Chromaformer => {
                return Err(Error::config(format!(
                    "family {} must not carry an sdm configuration",
                    f.as_str()
                )))
            }
            _ => {}
        }
        if let Some(sdm) = &self.sdm {
            sdm.validate()?;
            if sdm.num_bands != self.in_bands {
                return Err(Error::config(format!(
                    "sdm expects {} bands but the model takes {}",
                    sdm.num_bands, self.in_bands
                )));
            }
        }
        if self.is_transformer() {
            if self.window_side < 1 || self.patch_size < 1 || self.head_dim < 1 {
                return Err(Error::config(
                    "window side, patch size and head width must be positive",
                ));
            }
            if self.head_counts.len() != self.stage_depths.len() {
                return Err(Error::config(format!(
                    "{} head counts for {} stages",
                    self.head_counts.len(),
                    self.stage_depths.len()
                )));
            }
            for (i, &h) in self.head_counts.iter().enumerate() {
                let width = self.stage_width(i);
                if h == 0 || !width.is_multiple_of(h) {
                    return Err(Error::config(format!(
                        "stage {i}: {h} heads do not divide width {width}"
                    )));
                }
            }
            if !(self.mlp_ratio > 0.0) {
                return Err(Error::config("mlp ratio must be positive"));
            }
        }
        Ok(())
    }

    /// Full-scale ladder: `t` is the 96-wide 2/2/6/2 layout with 3/6/12/24
    /// heads and window 7.
    pub fn full_scale(
        family: Family,
        variant: &str,
        in_bands: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let (embed, depths, base_heads): (usize, Vec<usize>, usize) = match variant {
            "t" => (96, vec![2, 2, 6, 2], 3),
            "s" => (96, vec![2, 2, 18, 2], 3),
            "b" => (128, vec![2, 2, 18, 2], 4),
            "l" => (192, vec![2, 2, 18, 2], 6),
            "h" => (352, vec![2, 2, 18, 2], 11),
            other => return Err(Error::config(format!("unknown variant `{other}`"))),
        };
        Self::transformer(
            family,
            in_bands,
            num_classes,
            embed,
            depths,
            base_heads,
            7,
            4,
        )
    }

    /// Desk-scale ladder with embedding widths 24/32/48/64/96, two stages,
    /// window 4 and 2×2 input patches.
    pub fn desk_scale(
        family: Family,
        variant: &str,
        in_bands: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let embed = match variant {
            "t" => 24,
            "s" => 32,
            "b" => 48,
            "l" => 64,
            "h" => 96,
            other => return Err(Error::config(format!("unknown variant `{other}`"))),
        };
        Self::transformer(
            family,
            in_bands,
            num_classes,
            embed,
            vec![2, 2],
            embed / 8,
            4,
            2,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn transformer(
        family: Family,
        in_bands: usize,
        num_classes: usize,
        embed_dim: usize,
        stage_depths: Vec<usize>,
        base_heads: usize,
        window_side: usize,
        patch_size: usize,
    ) -> Result<Self> {
        let head_counts = (0..stage_depths.len()).map(|i| base_heads << i).collect();
        let sdm = match family {
            Family::Chromaformer => Some(SdmConfig::new(in_bands, (embed_dim / 2).max(4))),
            Family::Swin => None,
            _ => {
                return Err(Error::config(
                    "transformer preset for a convolutional family",
                ))
            }
        };
        let cfg = Self {
            family,
            in_bands,
            num_classes,
            embed_dim,
            stage_depths,
            head_counts,
            window_side,
            patch_size,
            mlp_ratio: 4.0,
            sdm,
            head_dim: embed_dim,
            rel_pos_bias: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resnet_like(in_bands: usize, num_classes: usize, width: usize, blocks: usize) -> Self {
        Self::cnn(
            Family::ResnetLike,
            in_bands,
            num_classes,
            width,
            vec![blocks],
        )
    }

    pub fn unetpp_like(in_bands: usize, num_classes: usize, width: usize) -> Self {
        Self::cnn(Family::UnetppLike, in_bands, num_classes, width, vec![1])
    }

    fn cnn(
        family: Family,
        in_bands: usize,
        num_classes: usize,
        width: usize,
        depths: Vec<usize>,
    ) -> Self {
        Self {
            family,
            in_bands,
            num_classes,
            embed_dim: width,
            stage_depths: depths,
            head_counts: Vec::new(),
            window_side: 0,
            patch_size: 0,
            mlp_ratio: default_mlp_ratio(),
            sdm: None,
            head_dim: 0,
            rel_pos_bias: false,
        }
    }

    /// The same configuration with the spectral module removed (or added
    /// with `sdm`), switching between the two transformer families.
    pub fn with_sdm(&self, sdm: Option<SdmConfig>) -> Self {
        let mut cfg = self.clone();
        cfg.family = if sdm.is_some() {
            Family::Chromaformer
        } else {
            Family::Swin
        };
        cfg.sdm = sdm;
        cfg
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Transformer(SwinNet),
    Resnet(ResNetLike),
    Unetpp(UnetppLike),
}

/// A declared network: parameter specs plus the structure that consumes them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub specs: Vec<ParamSpec>,
    pub net: Network,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut reg = ParamRegistry::new();
    let net = match config.family {
        Family::Chromaformer | Family::Swin => {
            Network::Transformer(SwinNet::declare(&mut reg, config)?)
        }
        Family::ResnetLike => Network::Resnet(ResNetLike::declare(&mut reg, config)),
        Family::UnetppLike => Network::Unetpp(UnetppLike::declare(&mut reg, config)),
    };
    Ok(Model {
        config: config.clone(),
        specs: reg.into_specs(),
        net,
    })
}

/// Exact number of learnable scalars.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(build_model(config)?.param_count())
}

/// Closed-form count of what the spectral path adds to a transformer: the
/// module itself plus one `C·d_v → D₁` projection (with bias) per stage-1
/// block.
pub fn sdm_fusion_param_count(config: &ModelConfig) -> usize {
    let Some(sdm) = &config.sdm else { return 0 };
    let d1 = config.stage_width(0);
    sdm.param_count() + config.stage_depths[0] * (sdm.num_bands * sdm.d_v() * d1 + d1)
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::initialize(&self.specs, seed)
    }

    /// `image [C, H, W] -> logits [K, H, W]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let shape = s.tape.shape(image);
        if shape.len() != 3 || shape[0] != self.config.in_bands {
            return Err(Error::shape(
                "model",
                format!("expected [{}, H, W], got {shape:?}", self.config.in_bands),
            ));
        }
        match &self.net {
            Network::Transformer(n) => n.forward(s, image),
            Network::Resnet(n) => n.forward(s, image),
            Network::Unetpp(n) => n.forward(s, image),
        }
    }

    /// Pixel cross-entropy of `[K, H, W]` logits against `H·W` labels.
    pub fn loss<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        logits: Var,
        labels: &[u8],
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = s.tape.shape(logits).to_vec();
        let (k, pixels) = (shape[0], shape[1] * shape[2]);
        let flat = s.tape.reshape(logits, vec![k, pixels])?;
        let rows = s.tape.permute(flat, &[1, 0])?;
        s.tape
            .cross_entropy_logits(rows, labels, Some(IGNORE_LABEL), reduction)
    }

    /// Per-pixel argmax of a forward pass without gradient tracking.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<u8>> {
        let mut s = Session::new(params, false);
        let x = s.input(image.clone())?;
        let logits = self.forward(&mut s, x)?;
        Ok(argmax_channels(s.tape.value(logits)))
    }
}

/// Argmax over axis 0 of `[K, H, W]`; ties go to the lower class.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let (k, pixels) = (logits.shape()[0], logits.len() / logits.shape()[0]);
    let d = logits.data();
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * pixels + p] > d[best * pixels + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
