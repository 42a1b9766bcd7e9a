//! Window partitioning, cyclic shifts and windowed multi-head attention.
//!
//! Token grids are stored as `[h·w, D]` row-major over the grid. Windowed
//! attention zero-pads the grid up to a window multiple, optionally rolls it
//! by `(−shift, −shift)`, attends inside each `window×window` block and then
//! undoes all three steps. After a shift, tokens that wrapped around the
//! padded grid edge are masked from tokens that did not, so no token attends
//! across the seam.

use std::sync::Arc;

use crate::autodiff::{Tape, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded(&self, multiple: usize) -> Grid {
        Grid::new(
            self.h.div_ceil(multiple) * multiple,
            self.w.div_ceil(multiple) * multiple,
        )
    }
}

/// Window layout of a (padded) grid: for every window-ordered token slot, the
/// row-major position in the padded grid before shifting.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub grid: Grid,
    pub padded: Grid,
    pub window: usize,
    pub shift: usize,
    /// Source grid token for each `(window, slot)`, or `None` for padding.
    pub source: Vec<Option<usize>>,
}

impl WindowLayout {
    pub fn new(grid: Grid, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::invalid(format!(
                "window {window} with shift {shift}: need window > 0 and shift < window"
            )));
        }
        let padded = grid.padded(window);
        let (nwy, nwx) = (padded.h / window, padded.w / window);
        let mut source = Vec::with_capacity(padded.len());
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ty in 0..window {
                    for tx in 0..window {
                        // position in the rolled grid, then where it came from
                        let (ry, rx) = (wy * window + ty, wx * window + tx);
                        let (oy, ox) = ((ry + shift) % padded.h, (rx + shift) % padded.w);
                        source.push((oy < grid.h && ox < grid.w).then_some(oy * grid.w + ox));
                    }
                }
            }
        }
        Ok(Self {
            grid,
            padded,
            window,
            shift,
            source,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.padded.h / self.window) * (self.padded.w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Gather indices taking `[h·w, D]` tokens to `[n_win·w², D]`.
    pub fn partition_index(&self, dim: usize) -> Vec<usize> {
        let mut index = Vec::with_capacity(self.source.len() * dim);
        for src in &self.source {
            match src {
                Some(t) => index.extend((0..dim).map(|d| t * dim + d)),
                None => index.extend(std::iter::repeat_n(GATHER_ZERO, dim)),
            }
        }
        index
    }

    /// Gather indices taking `[n_win·w², D]` back to `[h·w, D]`.
    pub fn reverse_index(&self, dim: usize) -> Vec<usize> {
        let mut slot_of = vec![0usize; self.grid.len()];
        for (slot, src) in self.source.iter().enumerate() {
            if let Some(t) = src {
                slot_of[*t] = slot;
            }
        }
        slot_of
            .iter()
            .flat_map(|&s| (0..dim).map(move |d| s * dim + d))
            .collect()
    }

    /// `[n_win, w², w²]` mask, true where attention is blocked because the
    /// two tokens lie on different sides of a wrap-around seam.
    pub fn shift_mask(&self) -> Vec<bool> {
        let n = self.tokens_per_window();
        let ws = self.window;
        let (hp, wp, s) = (self.padded.h, self.padded.w, self.shift);
        let region = |len: usize, r: usize| -> u8 {
            if r < len - ws {
                0
            } else if r < len - s {
                1
            } else {
                2
            }
        };
        let (nwy, nwx) = (hp / ws, wp / ws);
        let mut mask = Vec::with_capacity(self.num_windows() * n * n);
        for wy in 0..nwy {
            for wx in 0..nwx {
                let ids: Vec<u8> = (0..n)
                    .map(|t| {
                        let (ry, rx) = (wy * ws + t / ws, wx * ws + t % ws);
                        region(hp, ry) * 3 + region(wp, rx)
                    })
                    .collect();
                for &a in &ids {
                    for &b in &ids {
                        mask.push(s > 0 && a != b);
                    }
                }
            }
        }
        mask
    }
}

/// Splits a `[H', W', D]` grid into `[n_win, w², D]` windows.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let [h, w, d] = *x.shape() else {
        return Err(Error::shape("window_partition", format!("{:?}", x.shape())));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("window {window} does not tile {h}x{w}"),
        ));
    }
    let layout = WindowLayout::new(Grid::new(h, w), window, 0)?;
    let src = x.data();
    let data = layout.partition_index(d).iter().map(|&i| src[i]).collect();
    Tensor::new(vec![layout.num_windows(), window * window, d], data)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    window: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let [nw, n, d] = *windows.shape() else {
        return Err(Error::shape(
            "window_reverse",
            format!("{:?}", windows.shape()),
        ));
    };
    if window == 0
        || n != window * window
        || nw * n != h * w
        || !h.is_multiple_of(window)
        || !w.is_multiple_of(window)
    {
        return Err(Error::shape(
            "window_reverse",
            format!("{:?} into {h}x{w} with window {window}", windows.shape()),
        ));
    }
    let layout = WindowLayout::new(Grid::new(h, w), window, 0)?;
    let src = windows.data();
    let data = layout.reverse_index(d).iter().map(|&i| src[i]).collect();
    Tensor::new(vec![h, w, d], data)
}

/// Relative-position table index for each `(query, key)` pair in a window of
/// side `window`, for a table sized for windows up to `table_window`.
pub fn relative_position_index(window: usize, table_window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * table_window - 1;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) as isize - (j / window) as isize + table_window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + table_window as isize - 1;
            index.push(dy as usize * span + dx as usize);
        }
    }
    index
}

/// Parameter handles of one windowed attention layer.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub rel_bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    /// `[(2·window − 1)², heads]`
    pub rel_bias: Option<Var>,
}

impl WindowAttention {
    pub fn declare(
        reg: &mut ParamRegistry,
        dim: usize,
        heads: usize,
        window: usize,
        rel_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        let std = 0.02;
        let span = 2 * window - 1;
        Ok(Self {
            dim,
            heads,
            window,
            qkv_w: reg.declare("qkv.weight", vec![dim, 3 * dim], Init::TruncNormal(std)),
            qkv_b: reg.declare("qkv.bias", vec![3 * dim], Init::Zeros),
            proj_w: reg.declare("proj.weight", vec![dim, dim], Init::TruncNormal(std)),
            proj_b: reg.declare("proj.bias", vec![dim], Init::Zeros),
            rel_bias: rel_bias
                .then(|| reg.declare("rel_bias", vec![span * span, heads], Init::TruncNormal(std))),
        })
    }

    pub fn param_count(dim: usize, heads: usize, window: usize, rel_bias: bool) -> usize {
        let span = 2 * window - 1;
        dim * 3 * dim + 3 * dim + dim * dim + dim + usize::from(rel_bias) * span * span * heads
    }

    pub fn bind<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<AttnWeights> {
        Ok(AttnWeights {
            qkv_w: s.param(self.qkv_w)?,
            qkv_b: s.param(self.qkv_b)?,
            proj_w: s.param(self.proj_w)?,
            proj_b: s.param(self.proj_b)?,
            rel_bias: self.rel_bias.map(|b| s.param(b)).transpose()?,
        })
    }
}

/// Scaled dot-product attention inside each window.
///
/// `windows` is `[n_win, N, D]` with `N = window²`; `mask`, when given, is
/// `[n_win, N, N]` with `true` marking blocked pairs. Heads are split from the
/// channel axis and concatenated back before the output projection.
pub fn window_msa<T: Scalar>(
    tape: &mut Tape<T>,
    windows: Var,
    heads: usize,
    w: &AttnWeights,
    table_window: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let [nw, n, d] = shape[..] else {
        return Err(Error::shape(
            "window_msa",
            format!("expected [n_win, N, D], got {shape:?}"),
        ));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "window_msa",
            format!("{heads} heads do not divide width {d}"),
        ));
    }
    let window = (n as f64).sqrt().round() as usize;
    if window * window != n {
        return Err(Error::shape(
            "window_msa",
            format!("{n} tokens is not a square window"),
        ));
    }
    let hd = d / heads;
    let qkv = tape.linear(windows, w.qkv_w, Some(w.qkv_b))?; // [nw, n, 3d]

    // qkv channel layout is [3][heads][hd]; split to [nw·heads, n, hd]
    let split = |part: usize| -> Vec<usize> {
        let mut idx = Vec::with_capacity(nw * n * d);
        for win in 0..nw {
            for h in 0..heads {
                for t in 0..n {
                    let base = (win * n + t) * 3 * d + part * d + h * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        idx
    };
    let bh = nw * heads;
    let q = tape.gather(qkv, Arc::new(split(0)), vec![bh, n, hd])?;
    let k = tape.gather(qkv, Arc::new(split(1)), vec![bh, n, hd])?;
    let v = tape.gather(qkv, Arc::new(split(2)), vec![bh, n, hd])?;

    let scores = tape.batched_matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    if let Some(table) = w.rel_bias {
        let rel = relative_position_index(window, table_window);
        let mut idx = Vec::with_capacity(bh * n * n);
        for _ in 0..nw {
            for h in 0..heads {
                idx.extend(rel.iter().map(|&r| r * heads + h));
            }
        }
        let bias = tape.gather(table, Arc::new(idx), vec![bh, n, n])?;
        scores = tape.add(scores, bias)?;
    }
    let attn = match mask {
        Some(m) => {
            if m.len() != nw * n * n {
                return Err(Error::shape(
                    "window_msa",
                    format!("mask of {} for {nw} windows of {n}", m.len()),
                ));
            }
            let mut full = Vec::with_capacity(bh * n * n);
            for win in 0..nw {
                for _ in 0..heads {
                    full.extend_from_slice(&m[win * n * n..(win + 1) * n * n]);
                }
            }
            tape.masked_softmax_rows(scores, Arc::new(full))?
        }
        None => tape.softmax_rows(scores)?,
    };
    let out = tape.batched_matmul(attn, v)?; // [nw·heads, n, hd]

    let mut merge = Vec::with_capacity(nw * n * d);
    for win in 0..nw {
        for t in 0..n {
            for h in 0..heads {
                let base = ((win * heads + h) * n + t) * hd;
                merge.extend(base..base + hd);
            }
        }
    }
    let merged = tape.gather(out, Arc::new(merge), vec![nw, n, d])?;
    tape.linear(merged, w.proj_w, Some(w.proj_b))
}

/// Pads, rolls by `shift`, attends per window, and restores the grid.
/// `shift == 0` gives plain windowed attention.
pub fn windowed_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    grid: Grid,
    window: usize,
    shift: usize,
    heads: usize,
    w: &AttnWeights,
    table_window: usize,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if tape.shape(x) != [grid.len(), d] {
        return Err(Error::shape(
            "windowed_attention",
            format!("tokens {:?} for grid {}x{}", tape.shape(x), grid.h, grid.w),
        ));
    }
    let layout = WindowLayout::new(grid, window, shift)?;
    let (nw, n) = (layout.num_windows(), layout.tokens_per_window());
    let windows = tape.gather(x, Arc::new(layout.partition_index(d)), vec![nw, n, d])?;
    let mask = (shift > 0).then(|| layout.shift_mask());
    let attended = window_msa(tape, windows, heads, w, table_window, mask.as_deref())?;
    tape.gather(
        attended,
        Arc::new(layout.reverse_index(d)),
        vec![grid.len(), d],
    )
}

/// Shifted-window attention; requires `0 < shift < window`.
pub fn shifted_window_msa<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    grid: Grid,
    window: usize,
    shift: usize,
    heads: usize,
    w: &AttnWeights,
) -> Result<Var> {
    if shift == 0 || shift >= window {
        return Err(Error::invalid(format!(
            "shift {shift} must satisfy 0 < shift < window ({window})"
        )));
    }
    windowed_attention(tape, x, grid, window, shift, heads, w, window)
}
