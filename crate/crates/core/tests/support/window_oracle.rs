//! Dense attention over the whole padded grid, used as the reference for
//! shifted-window attention.

use chromaformer::backbone::window::Grid;
use chromaformer::params::{ParamRegistry, ParamStore};
use chromaformer::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_store(reg: &ParamRegistry, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = reg.specs().iter().map(|s| s.name.clone()).collect();
    let values = reg
        .specs()
        .iter()
        .map(|s| Tensor::from_fn(s.shape.clone(), |_| rng.random_range(-1.0..1.0)))
        .collect();
    ParamStore::from_parts(names, values).unwrap()
}

pub struct Raw {
    pub qkv_w: Tensor<f64>,
    pub qkv_b: Tensor<f64>,
    pub proj_w: Tensor<f64>,
    pub proj_b: Tensor<f64>,
    pub table: Tensor<f64>,
}

pub fn raw(store: &ParamStore<f64>, prefix: &str) -> Raw {
    let get = |n: &str| {
        store
            .get(store.id_of(&format!("{prefix}{n}")).unwrap())
            .clone()
    };
    Raw {
        qkv_w: get("qkv.weight"),
        qkv_b: get("qkv.bias"),
        proj_w: get("proj.weight"),
        proj_b: get("proj.bias"),
        table: get("rel_bias"),
    }
}

/// Dense attention over the whole padded grid. Two tokens may attend iff they
/// share a window after the roll and, when shifted, the same seam region.
pub fn global_masked_attention(
    x: &Tensor<f64>,
    grid: Grid,
    window: usize,
    shift: usize,
    heads: usize,
    w: &Raw,
) -> Tensor<f64> {
    let d = x.shape()[1];
    let hd = d / heads;
    let (hp, wp) = (
        grid.h.div_ceil(window) * window,
        grid.w.div_ceil(window) * window,
    );
    let region =
        |len: usize, r: usize| usize::from(r >= len - window) + usize::from(r >= len - shift);
    // Every padded position with its rolled coordinate.
    let tokens: Vec<(Option<usize>, usize, usize)> = (0..hp * wp)
        .map(|p| {
            let (py, px) = (p / wp, p % wp);
            let src = (py < grid.h && px < grid.w).then_some(py * grid.w + px);
            (src, (py + hp - shift) % hp, (px + wp - shift) % wp)
        })
        .collect();
    let feature = |t: &(Option<usize>, usize, usize)| -> Vec<f64> {
        t.0.map_or(vec![0.0; d], |i| x.data()[i * d..(i + 1) * d].to_vec())
    };
    let qkv: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| {
            let f = feature(t);
            (0..3 * d)
                .map(|j| {
                    w.qkv_b.data()[j] + (0..d).map(|i| f[i] * w.qkv_w.at(&[i, j])).sum::<f64>()
                })
                .collect()
        })
        .collect();
    let span = 2 * window - 1;
    let mut out = Tensor::zeros(vec![grid.len(), d]);
    for (a, ta) in tokens.iter().enumerate() {
        let Some(dst) = ta.0 else { continue };
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let mut scores = Vec::new();
            for (b, tb) in tokens.iter().enumerate() {
                let same_window = ta.1 / window == tb.1 / window && ta.2 / window == tb.2 / window;
                let same_region = shift == 0
                    || (region(hp, ta.1) == region(hp, tb.1)
                        && region(wp, ta.2) == region(wp, tb.2));
                if !(same_window && same_region) {
                    continue;
                }
                let dot: f64 = (0..hd)
                    .map(|t| qkv[a][h * hd + t] * qkv[b][d + h * hd + t])
                    .sum();
                let dy = (ta.1 % window) as isize - (tb.1 % window) as isize + window as isize - 1;
                let dx = (ta.2 % window) as isize - (tb.2 % window) as isize + window as isize - 1;
                let bias = w.table.at(&[dy as usize * span + dx as usize, h]);
                scores.push((b, dot / (hd as f64).sqrt() + bias));
            }
            let mx = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
            let total: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
            for (b, s) in &scores {
                let p = (s - mx).exp() / total;
                for t in 0..hd {
                    concat[h * hd + t] += p * qkv[*b][2 * d + h * hd + t];
                }
            }
        }
        for j in 0..d {
            let v = w.proj_b.data()[j]
                + (0..d)
                    .map(|i| concat[i] * w.proj_w.at(&[i, j]))
                    .sum::<f64>();
            out.data_mut()[dst * d + j] = v;
        }
    }
    out
}
