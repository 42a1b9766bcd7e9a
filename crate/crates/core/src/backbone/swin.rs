//! Hierarchical windowed-attention encoder, optional spectral fusion in its
//! first stage, and a multi-stage segmentation head.

use std::sync::Arc;

use super::window::{windowed_attention, AttnWeights, Grid, WindowAttention};
use super::ModelConfig;
use crate::autodiff::{Tape, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, Session};
use crate::sdm::SpectralDependencyModule;
use crate::tensor::Scalar;

const STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn declare(reg: &mut ParamRegistry, name: &str, dim: usize) -> Self {
        reg.scoped(name, |r| Self {
            gain: r.declare("gain", vec![dim], Init::Ones),
            bias: r.declare("bias", vec![dim], Init::Zeros),
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain)?, s.param(self.bias)?);
        s.tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Dense {
    fn declare(
        reg: &mut ParamRegistry,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        reg.scoped(name, |r| Self {
            weight: r.declare("weight", vec![fan_in, fan_out], Init::TruncNormal(STD)),
            bias: bias.then(|| r.declare("bias", vec![fan_out], Init::Zeros)),
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = self.bias.map(|b| s.param(b)).transpose()?;
        s.tape.linear(x, w, b)
    }
}

/// Projection of the flattened spectral context `[1, C·d_v]` to the stage
/// width, added to every token after attention.
#[derive(Clone, Debug)]
pub struct SpectralFusion {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// One transformer block; with `fusion` set it is a ChromaFormer block.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub dim: usize,
    pub shift: usize,
    pub window: usize,
    norm1: Norm,
    pub attn: WindowAttention,
    norm2: Norm,
    fc1: Dense,
    fc2: Dense,
    pub fusion: Option<SpectralFusion>,
}

/// Bound parameters of a block for direct (test / verification) use.
pub struct BlockWeights {
    pub attn: AttnWeights,
    pub norm1: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub fusion: Option<(Var, Var)>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        reg: &mut ParamRegistry,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
        rel_bias: bool,
        fusion_in: Option<usize>,
    ) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        let norm1 = Norm::declare(reg, "norm1", dim);
        let attn = reg.scoped("attn", |r| {
            WindowAttention::declare(r, dim, heads, window, rel_bias)
        })?;
        let norm2 = Norm::declare(reg, "norm2", dim);
        let fc1 = Dense::declare(reg, "mlp.fc1", dim, hidden, true);
        let fc2 = Dense::declare(reg, "mlp.fc2", hidden, dim, true);
        let fusion = fusion_in.map(|n| {
            reg.scoped("fusion", |r| SpectralFusion {
                weight: r.declare(
                    "weight",
                    vec![n, dim],
                    Init::TruncNormal(1.0 / (n as f64).sqrt()),
                ),
                bias: r.declare("bias", vec![dim], Init::Zeros),
            })
        });
        Ok(Self {
            dim,
            shift,
            window,
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            fusion,
        })
    }

    pub fn param_count(
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: f64,
        rel_bias: bool,
    ) -> usize {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        4 * dim
            + WindowAttention::param_count(dim, heads, window, rel_bias)
            + dim * hidden
            + hidden
            + hidden * dim
            + dim
    }

    pub fn bind<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<BlockWeights> {
        let pair = |s: &mut Session<'_, T>, a: ParamId, b: ParamId| -> Result<(Var, Var)> {
            Ok((s.param(a)?, s.param(b)?))
        };
        Ok(BlockWeights {
            attn: self.attn.bind(s)?,
            norm1: pair(s, self.norm1.gain, self.norm1.bias)?,
            norm2: pair(s, self.norm2.gain, self.norm2.bias)?,
            fc1: pair(s, self.fc1.weight, self.fc1.bias.expect("fc1 bias"))?,
            fc2: pair(s, self.fc2.weight, self.fc2.bias.expect("fc2 bias"))?,
            fusion: self
                .fusion
                .as_ref()
                .map(|f| pair(s, f.weight, f.bias))
                .transpose()?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        grid: Grid,
        sdm_ctx: Option<Var>,
    ) -> Result<Var> {
        let w = self.bind(s)?;
        block_forward(
            &mut s.tape,
            x,
            grid,
            self.window,
            self.shift,
            self.attn.heads,
            &w,
            sdm_ctx,
        )
    }
}

/// `y = x + MSA(LN(x))`, `y' = y + fuse(ctx)` (when fusing),
/// `out = y' + MLP(LN(y'))`.
///
/// The window shrinks to the grid when the grid is no larger than the
/// window; the shift is then dropped.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    grid: Grid,
    window: usize,
    shift: usize,
    heads: usize,
    w: &BlockWeights,
    sdm_ctx: Option<Var>,
) -> Result<Var> {
    let (eff_window, eff_shift) = effective_window(grid, window, shift);
    let h = tape.layer_norm(x, w.norm1.0, w.norm1.1)?;
    let a = windowed_attention(tape, h, grid, eff_window, eff_shift, heads, &w.attn, window)?;
    let mut y = tape.add(x, a)?;
    match (w.fusion, sdm_ctx) {
        (Some((fw, fb)), Some(ctx)) => {
            let fused = spectral_fusion(tape, ctx, fw, fb, grid.len())?;
            y = tape.add(y, fused)?;
        }
        (Some(_), None) => {
            return Err(Error::invalid(
                "ChromaFormer block needs the spectral context",
            ));
        }
        _ => {}
    }
    let h = tape.layer_norm(y, w.norm2.0, w.norm2.1)?;
    let h = tape.linear(h, w.fc1.0, Some(w.fc1.1))?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, w.fc2.0, Some(w.fc2.1))?;
    tape.add(y, h)
}

/// Projects `[C, d_v]` (or its flattening) to `[tokens, D]`, broadcasting one
/// row over every token.
pub fn spectral_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: Var,
    weight: Var,
    bias: Var,
    tokens: usize,
) -> Result<Var> {
    let n: usize = tape.shape(ctx).iter().product();
    let fan_in = tape.shape(weight)[0];
    if n != fan_in {
        return Err(Error::shape(
            "spectral_fusion",
            format!("context of {n} values for projection expecting {fan_in}"),
        ));
    }
    let flat = tape.reshape(ctx, vec![1, n])?;
    let row = tape.linear(flat, weight, Some(bias))?;
    let d = tape.shape(row)[1];
    let index: Vec<usize> = (0..tokens).flat_map(|_| 0..d).collect();
    tape.gather(row, Arc::new(index), vec![tokens, d])
}

pub fn effective_window(grid: Grid, window: usize, shift: usize) -> (usize, usize) {
    let smallest = grid.h.min(grid.w);
    if smallest <= window {
        (smallest, 0)
    } else {
        (window, shift)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PatchMerge {
    norm: Norm,
    reduction: Dense,
}

impl PatchMerge {
    fn declare(reg: &mut ParamRegistry, dim: usize) -> Self {
        Self {
            norm: Norm::declare(reg, "norm", 4 * dim),
            reduction: Dense::declare(reg, "reduction", 4 * dim, 2 * dim, false),
        }
    }

    /// `[h·w, D] -> [⌈h/2⌉·⌈w/2⌉, 2D]`, zero-padding odd extents.
    fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        grid: Grid,
    ) -> Result<(Var, Grid)> {
        let d = s.tape.shape(x)[1];
        let out = Grid::new(grid.h.div_ceil(2), grid.w.div_ceil(2));
        let mut index = Vec::with_capacity(out.len() * 4 * d);
        for y in 0..out.h {
            for xx in 0..out.w {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                    if sy < grid.h && sx < grid.w {
                        let t = sy * grid.w + sx;
                        index.extend(t * d..(t + 1) * d);
                    } else {
                        index.extend(std::iter::repeat_n(GATHER_ZERO, d));
                    }
                }
            }
        }
        let merged = s.tape.gather(x, Arc::new(index), vec![out.len(), 4 * d])?;
        let merged = self.norm.forward(s, merged)?;
        Ok((self.reduction.forward(s, merged)?, out))
    }
}

#[derive(Clone, Debug)]
pub struct SwinNet {
    patch: usize,
    embed: Dense,
    embed_norm: Norm,
    pub sdm: Option<SpectralDependencyModule>,
    pub stages: Vec<Vec<SwinBlock>>,
    merges: Vec<PatchMerge>,
    head_norms: Vec<Norm>,
    head_proj: Vec<Dense>,
    head_out_w: ParamId,
    head_out_b: ParamId,
}

impl SwinNet {
    pub(crate) fn declare(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        let embed = Dense::declare(
            reg,
            "patch_embed.proj",
            cfg.in_bands * p * p,
            cfg.embed_dim,
            true,
        );
        let embed_norm = Norm::declare(reg, "patch_embed.norm", cfg.embed_dim);
        let sdm = cfg
            .sdm
            .clone()
            .map(|c| reg.scoped("sdm", |r| SpectralDependencyModule::declare(r, c)))
            .transpose()?;
        let fusion_in = cfg.sdm.as_ref().map(|c| c.num_bands * c.d_v());

        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut head_norms = Vec::new();
        let mut head_proj = Vec::new();
        for (i, (&depth, &heads)) in cfg.stage_depths.iter().zip(&cfg.head_counts).enumerate() {
            let dim = cfg.stage_width(i);
            let blocks = reg.scoped(format!("stages.{i}"), |r| {
                (0..depth)
                    .map(|b| {
                        r.scoped(format!("blocks.{b}"), |r| {
                            let shift = if b % 2 == 1 { cfg.window_side / 2 } else { 0 };
                            SwinBlock::declare(
                                r,
                                dim,
                                heads,
                                cfg.window_side,
                                shift,
                                cfg.mlp_ratio,
                                cfg.rel_pos_bias,
                                if i == 0 { fusion_in } else { None },
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            stages.push(blocks);
            if i + 1 < cfg.stage_depths.len() {
                merges
                    .push(reg.scoped(format!("stages.{i}.merge"), |r| PatchMerge::declare(r, dim)));
            }
            head_norms.push(Norm::declare(reg, &format!("head.norm.{i}"), dim));
            head_proj.push(Dense::declare(
                reg,
                &format!("head.proj.{i}"),
                dim,
                cfg.head_dim,
                true,
            ));
        }
        let fan_in = cfg.head_dim;
        let head_out_w = reg.declare(
            "head.out.weight",
            vec![cfg.num_classes, fan_in, 1, 1],
            Init::TruncNormal(STD),
        );
        let head_out_b = reg.declare("head.out.bias", vec![cfg.num_classes], Init::Zeros);
        Ok(Self {
            patch: p,
            embed,
            embed_norm,
            sdm,
            stages,
            merges,
            head_norms,
            head_proj,
            head_out_w,
            head_out_b,
        })
    }

    /// `image [C, H, W] -> logits [K, H, W]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let shape = s.tape.shape(image).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::shape(
                "model",
                format!("expected [C, H, W], got {shape:?}"),
            ));
        };
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("patch size {p} does not divide {h}x{w}"),
            ));
        }
        let ctx = match &self.sdm {
            Some(sdm) => Some(sdm.forward(s, image, false)?.o),
            None => None,
        };

        let mut grid = Grid::new(h / p, w / p);
        let mut index = Vec::with_capacity(c * h * w);
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                for band in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            index.push((band * h + gy * p + dy) * w + gx * p + dx);
                        }
                    }
                }
            }
        }
        let tokens = s
            .tape
            .gather(image, Arc::new(index), vec![grid.len(), c * p * p])?;
        let tokens = self.embed.forward(s, tokens)?;
        let mut x = self.embed_norm.forward(s, tokens)?;

        let mut summed: Option<Var> = None;
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(s, x, grid, if i == 0 { ctx } else { None })?;
            }
            let f = self.head_norms[i].forward(s, x)?;
            let f = self.head_proj[i].forward(s, f)?;
            let hd = s.tape.shape(f)[1];
            let f = s.tape.permute(f, &[1, 0])?;
            let f = s.tape.reshape(f, vec![hd, grid.h, grid.w])?;
            let factor = p << i;
            let mut up = s.tape.upsample_nearest(f, factor)?;
            if grid.h * factor != h || grid.w * factor != w {
                up = crop(&mut s.tape, up, h, w)?;
            }
            summed = Some(match summed {
                Some(acc) => s.tape.add(acc, up)?,
                None => up,
            });
            if let Some(merge) = self.merges.get(i) {
                (x, grid) = merge.forward(s, x, grid)?;
            }
        }
        let feat = s.tape.gelu(summed.expect("at least one stage"))?;
        let (ow, ob) = (s.param(self.head_out_w)?, s.param(self.head_out_b)?);
        s.tape.conv2d(feat, ow, Some(ob), 1, 0)
    }
}

/// Crops `[c, H', W']` to its top-left `[c, h, w]`.
pub(crate) fn crop<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let [c, hh, ww] = tape.shape(x)[..] else {
        return Err(Error::shape("crop", format!("{:?}", tape.shape(x))));
    };
    if h > hh || w > ww {
        return Err(Error::shape("crop", format!("{hh}x{ww} to {h}x{w}")));
    }
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            index.extend((0..w).map(|xx| (ch * hh + y) * ww + xx));
        }
    }
    tape.gather(x, Arc::new(index), vec![c, h, w])
}
