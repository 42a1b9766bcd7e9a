//! Convolutional baselines for family comparisons.

use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, Session};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn declare(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        reg.scoped(name, |r| Self {
            weight: r.declare("weight", vec![cout, cin, k, k], Init::TruncNormal(std)),
            bias: r.declare("bias", vec![cout], Init::Zeros),
            stride,
            padding: k / 2,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight)?, s.param(self.bias)?);
        s.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    fn forward_relu<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        s.tape.relu(y)
    }
}

/// Stem, `n` residual blocks of two 3×3 convolutions, 1×1 classifier.
#[derive(Clone, Debug)]
pub struct ResNetLike {
    stem: Conv,
    blocks: Vec<(Conv, Conv)>,
    head: Conv,
}

impl ResNetLike {
    pub(crate) fn declare(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Self {
        let w = cfg.embed_dim;
        let n: usize = cfg.stage_depths.iter().sum();
        Self {
            stem: Conv::declare(reg, "stem", cfg.in_bands, w, 3, 1),
            blocks: (0..n)
                .map(|i| {
                    (
                        Conv::declare(reg, &format!("blocks.{i}.conv1"), w, w, 3, 1),
                        Conv::declare(reg, &format!("blocks.{i}.conv2"), w, w, 3, 1),
                    )
                })
                .collect(),
            head: Conv::declare(reg, "head", w, cfg.num_classes, 1, 1),
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let mut x = self.stem.forward_relu(s, image)?;
        for (c1, c2) in &self.blocks {
            let h = c1.forward_relu(s, x)?;
            let h = c2.forward(s, h)?;
            let y = s.tape.add(x, h)?;
            x = s.tape.relu(y)?;
        }
        self.head.forward(s, x)
    }
}

/// Two-level nested-skip encoder/decoder (nodes `X⁰⁰ X¹⁰ X²⁰ X⁰¹ X¹¹ X⁰²`).
#[derive(Clone, Debug)]
pub struct UnetppLike {
    x00: Conv,
    down1: Conv,
    x10: Conv,
    down2: Conv,
    x20: Conv,
    x01: Conv,
    x11: Conv,
    x02: Conv,
    head: Conv,
}

impl UnetppLike {
    pub(crate) fn declare(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Self {
        let w = cfg.embed_dim;
        Self {
            x00: Conv::declare(reg, "x00", cfg.in_bands, w, 3, 1),
            down1: Conv::declare(reg, "down1", w, w, 3, 2),
            x10: Conv::declare(reg, "x10", w, 2 * w, 3, 1),
            down2: Conv::declare(reg, "down2", 2 * w, 2 * w, 3, 2),
            x20: Conv::declare(reg, "x20", 2 * w, 4 * w, 3, 1),
            x01: Conv::declare(reg, "x01", w + 2 * w, w, 3, 1),
            x11: Conv::declare(reg, "x11", 2 * w + 4 * w, 2 * w, 3, 1),
            x02: Conv::declare(reg, "x02", w + w + 2 * w, w, 3, 1),
            head: Conv::declare(reg, "head", w, cfg.num_classes, 1, 1),
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let (h, w) = (s.tape.shape(image)[1], s.tape.shape(image)[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "unetpp_like",
                format!("spatial extents {h}x{w} must be multiples of 4"),
            ));
        }
        let x00 = self.x00.forward_relu(s, image)?;
        let d1 = self.down1.forward_relu(s, x00)?;
        let x10 = self.x10.forward_relu(s, d1)?;
        let d2 = self.down2.forward_relu(s, x10)?;
        let x20 = self.x20.forward_relu(s, d2)?;

        let up10 = s.tape.upsample_nearest(x10, 2)?;
        let cat = s.tape.concat0(&[x00, up10])?;
        let x01 = self.x01.forward_relu(s, cat)?;

        let up20 = s.tape.upsample_nearest(x20, 2)?;
        let cat = s.tape.concat0(&[x10, up20])?;
        let x11 = self.x11.forward_relu(s, cat)?;

        let up11 = s.tape.upsample_nearest(x11, 2)?;
        let cat = s.tape.concat0(&[x00, x01, up11])?;
        let x02 = self.x02.forward_relu(s, cat)?;
        self.head.forward(s, x02)
    }
}
