//! Spectral dependency module: attention whose units are spectral bands.
//!
//! For an image `X` of shape `[C, H, W]`, every band is cut into
//! non-overlapping `s×s` patches and each patch (flattened row-major into
//! `P = s²` values) is embedded by a shared linear map `E`. For patch `p` the
//! band embeddings form `Z_p ∈ R^{C×d}`, and
//!
//! ```text
//! A_p = softmax(Z_p W_Q (Z_p W_K)ᵀ / sqrt(d_k))      (C × C, row-stochastic)
//! O_p = A_p · Z_p W_V                                 (C × d_v)
//! O   = mean_p O_p
//! ```
//!
//! All weights are shared across patches and bands, which makes the output
//! equivariant to band permutations and invariant to patch permutations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, Session};
use crate::tensor::{Scalar, Tensor};

fn default_patch_side() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdmConfig {
    pub num_bands: usize,
    #[serde(default = "default_patch_side")]
    pub patch_side: usize,
    pub embed_dim: usize,
    /// Defaults to `embed_dim`.
    #[serde(default)]
    pub key_dim: Option<usize>,
    /// Defaults to `embed_dim`.
    #[serde(default)]
    pub value_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub embed_bias: bool,
}

impl SdmConfig {
    pub fn new(num_bands: usize, embed_dim: usize) -> Self {
        Self {
            num_bands,
            patch_side: default_patch_side(),
            embed_dim,
            key_dim: None,
            value_dim: None,
            embed_bias: true,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn d_k(&self) -> usize {
        self.key_dim.unwrap_or(self.embed_dim)
    }

    pub fn d_v(&self) -> usize {
        self.value_dim.unwrap_or(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bands == 0 || self.patch_side == 0 || self.embed_dim == 0 {
            return Err(Error::config(
                "spectral module needs positive band count, patch side and embedding width",
            ));
        }
        if self.d_k() == 0 || self.d_v() == 0 {
            return Err(Error::config(
                "spectral key/value widths must be at least 1",
            ));
        }
        Ok(())
    }

    /// Learnable scalars in the module.
    pub fn param_count(&self) -> usize {
        let (p, d) = (self.patch_len(), self.embed_dim);
        p * d + usize::from(self.embed_bias) * d + 2 * d * self.d_k() + d * self.d_v()
    }
}

/// Parameter handles for one spectral module.
#[derive(Clone, Debug)]
pub struct SpectralDependencyModule {
    pub config: SdmConfig,
    pub embed_w: ParamId,
    pub embed_b: Option<ParamId>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Tape handles of the module weights for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SdmWeights {
    pub embed_w: Var,
    pub embed_b: Option<Var>,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SdmOutput {
    /// `[C, d_v]`
    pub o: Var,
    /// `[N_p, C, C]`, present when retention was requested.
    pub attention: Option<Var>,
}

impl SpectralDependencyModule {
    pub fn declare(reg: &mut ParamRegistry, config: SdmConfig) -> Result<Self> {
        config.validate()?;
        let (p, d) = (config.patch_len(), config.embed_dim);
        let fan_in = |n: usize| Init::TruncNormal(1.0 / (n as f64).sqrt());
        let embed_w = reg.declare("embed.weight", vec![p, d], fan_in(p));
        let embed_b = config
            .embed_bias
            .then(|| reg.declare("embed.bias", vec![d], Init::Zeros));
        let w_q = reg.declare("w_q", vec![d, config.d_k()], fan_in(d));
        let w_k = reg.declare("w_k", vec![d, config.d_k()], fan_in(d));
        let w_v = reg.declare("w_v", vec![d, config.d_v()], fan_in(d));
        Ok(Self {
            config,
            embed_w,
            embed_b,
            w_q,
            w_k,
            w_v,
        })
    }

    pub fn bind<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<SdmWeights> {
        Ok(SdmWeights {
            embed_w: s.param(self.embed_w)?,
            embed_b: self.embed_b.map(|b| s.param(b)).transpose()?,
            w_q: s.param(self.w_q)?,
            w_k: s.param(self.w_k)?,
            w_v: s.param(self.w_v)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        retain_attention: bool,
    ) -> Result<SdmOutput> {
        let w = self.bind(s)?;
        sdm_forward(&mut s.tape, x, &self.config, &w, retain_attention)
    }
}

/// Gather indices mapping `[C, H, W]` to `[N_p, C, P]`; patches are ordered
/// row-major over the patch grid and each patch is flattened row-major.
pub fn patchify_index(c: usize, h: usize, w: usize, side: usize) -> Result<Vec<usize>> {
    if side == 0 || !h.is_multiple_of(side) || !w.is_multiple_of(side) {
        return Err(Error::shape(
            "patchify_bands",
            format!("patch side {side} does not divide {h}x{w}"),
        ));
    }
    let (gh, gw) = (h / side, w / side);
    let mut index = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for band in 0..c {
                for dy in 0..side {
                    for dx in 0..side {
                        index.push((band * h + py * side + dy) * w + px * side + dx);
                    }
                }
            }
        }
    }
    Ok(index)
}

fn image_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            "patchify_bands",
            format!("expected [C, H, W], got {:?}", x.shape()),
        )),
    }
}

pub fn patchify_bands<T: Scalar>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(x)?;
    let index = patchify_index(c, h, w, side)?;
    let d = x.data();
    Tensor::new(
        vec![(h / side) * (w / side), c, side * side],
        index.iter().map(|&i| d[i]).collect(),
    )
}

/// Inverse of [`patchify_bands`] for an image of spatial size `h × w`.
pub fn unpatchify_bands<T: Scalar>(patches: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [np, c, p] = *patches.shape() else {
        return Err(Error::shape(
            "unpatchify_bands",
            format!("{:?}", patches.shape()),
        ));
    };
    let side = (p as f64).sqrt().round() as usize;
    if side * side != p || np * p != h * w {
        return Err(Error::shape(
            "unpatchify_bands",
            format!("{:?} into {h}x{w}", patches.shape()),
        ));
    }
    let index = patchify_index(c, h, w, side)?;
    let mut out = vec![T::zero(); c * h * w];
    for (&dst, &v) in index.iter().zip(patches.data()) {
        out[dst] = v;
    }
    Tensor::new(vec![c, h, w], out)
}

/// Differentiable patch rearrangement on the tape.
pub fn patchify_var<T: Scalar>(tape: &mut Tape<T>, x: Var, side: usize) -> Result<Var> {
    let (c, h, w) = image_dims(tape.value(x))?;
    let index = patchify_index(c, h, w, side)?;
    tape.gather(
        x,
        Arc::new(index),
        vec![(h / side) * (w / side), c, side * side],
    )
}

/// Applies `E` to every `(patch, band)` slice: `[N_p, C, P] -> [N_p, C, d]`.
pub fn embed_patches<T: Scalar>(tape: &mut Tape<T>, patches: Var, w: &SdmWeights) -> Result<Var> {
    let p = tape.shape(w.embed_w)[0];
    if tape.shape(patches).last() != Some(&p) {
        return Err(Error::shape(
            "embed_patches",
            format!(
                "patches {:?} for embedding of {p} values",
                tape.shape(patches)
            ),
        ));
    }
    tape.linear(patches, w.embed_w, w.embed_b)
}

/// Pre-softmax scores `Q Kᵀ / sqrt(d_k)` for stacked band embeddings
/// `[N_p, C, d]`, returned as `[N_p, C, C]`.
pub fn spectral_scores<T: Scalar>(tape: &mut Tape<T>, z: Var, w: &SdmWeights) -> Result<Var> {
    let dk = tape.shape(w.w_q)[1];
    let q = tape.linear(z, w.w_q, None)?;
    let k = tape.linear(z, w.w_k, None)?;
    let raw = tape.batched_matmul_nt(q, k)?;
    tape.scale(raw, 1.0 / (dk as f64).sqrt())
}

fn attend<T: Scalar>(tape: &mut Tape<T>, z: Var, w: &SdmWeights) -> Result<(Var, Var)> {
    let scores = spectral_scores(tape, z, w)?;
    let a = tape.softmax_rows(scores)?;
    let v = tape.linear(z, w.w_v, None)?;
    let o = tape.batched_matmul(a, v)?;
    Ok((a, o))
}

/// Attention across bands for one patch: `Z_p [C, d] -> (A_p [C, C], O_p [C, d_v])`.
pub fn spectral_attention<T: Scalar>(
    tape: &mut Tape<T>,
    z_p: Var,
    w: &SdmWeights,
) -> Result<(Var, Var)> {
    let shape = tape.shape(z_p).to_vec();
    let [c, d] = shape[..] else {
        return Err(Error::shape(
            "spectral_attention",
            format!("expected [C, d], got {shape:?}"),
        ));
    };
    let z = tape.reshape(z_p, vec![1, c, d])?;
    let (a, o) = attend(tape, z, w)?;
    let a = tape.reshape(a, vec![c, c])?;
    let dv = tape.shape(o)[2];
    let o = tape.reshape(o, vec![c, dv])?;
    Ok((a, o))
}

/// Mean over the patch axis: `[N_p, C, d_v] -> [C, d_v]`.
pub fn aggregate_patches<T: Scalar>(tape: &mut Tape<T>, o_stack: Var) -> Result<Var> {
    if tape.shape(o_stack).len() != 3 {
        return Err(Error::shape(
            "aggregate_patches",
            format!("expected [N_p, C, d_v], got {:?}", tape.shape(o_stack)),
        ));
    }
    tape.mean_over_axis(o_stack, 0)
}

/// Full module: patchify, embed, per-patch band attention, average.
pub fn sdm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    config: &SdmConfig,
    w: &SdmWeights,
    retain_attention: bool,
) -> Result<SdmOutput> {
    let (c, _, _) = image_dims(tape.value(x))?;
    if c != config.num_bands {
        return Err(Error::shape(
            "sdm_forward",
            format!("input has {c} bands, module expects {}", config.num_bands),
        ));
    }
    let patches = patchify_var(tape, x, config.patch_side)?;
    let z = embed_patches(tape, patches, w)?;
    let (a, o_stack) = attend(tape, z, w)?;
    let o = aggregate_patches(tape, o_stack)?;
    Ok(SdmOutput {
        o,
        attention: retain_attention.then_some(a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn weights(tape: &mut Tape<f64>, p: usize, d: usize, rng: &mut ChaCha8Rng) -> SdmWeights {
        SdmWeights {
            embed_w: tape.leaf(random(vec![p, d], rng), true).unwrap(),
            embed_b: Some(tape.leaf(random(vec![d], rng), true).unwrap()),
            w_q: tape.leaf(random(vec![d, d], rng), true).unwrap(),
            w_k: tape.leaf(random(vec![d, d], rng), true).unwrap(),
            w_v: tape.leaf(random(vec![d, d], rng), true).unwrap(),
        }
    }

    #[test]
    fn whole_image_patch() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify_bands(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sentinel_like_shape() {
        let x = Tensor::<f32>::zeros(vec![12, 64, 64]);
        assert_eq!(patchify_bands(&x, 4).unwrap().shape(), &[256, 12, 16]);
    }

    #[test]
    fn patch_blocks_are_spatial_blocks() {
        let x = Tensor::<f64>::from_fn(vec![2, 4, 4], |i| i as f64);
        let p = patchify_bands(&x, 2).unwrap();
        // patch 1 = top-right block; band 1 starts at 16
        assert_eq!(
            &p.data()[(2 + 1) * 4..(2 + 2) * 4],
            &[18.0, 19.0, 22.0, 23.0]
        );
        assert!(patchify_bands(&x, 3).is_err());
    }

    #[test]
    fn identity_and_zero_embedding() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = random(vec![3, 2, 4], &mut rng);
        let pv = tape.constant(patches.clone()).unwrap();
        let mut w = weights(&mut tape, 4, 4, &mut rng);
        w.embed_w = tape.constant(Tensor::eye(4)).unwrap();
        w.embed_b = None;
        let z = embed_patches(&mut tape, pv, &w).unwrap();
        assert_eq!(tape.value(z), &patches);
        w.embed_w = tape.constant(Tensor::zeros(vec![4, 4])).unwrap();
        let z = embed_patches(&mut tape, pv, &w).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_matches_direct_product() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patches = random(vec![1, 1, 4], &mut rng);
        let e = random(vec![4, 3], &mut rng);
        let pv = tape.constant(patches.clone()).unwrap();
        let mut w = weights(&mut tape, 4, 3, &mut rng);
        w.embed_w = tape.constant(e.clone()).unwrap();
        w.embed_b = None;
        let z = embed_patches(&mut tape, pv, &w).unwrap();
        for j in 0..3 {
            let direct: f64 = (0..4).map(|i| patches.data()[i] * e.at(&[i, j])).sum();
            assert!((tape.value(z).data()[j] - direct).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(vec![1, 1, 5])).unwrap();
        assert!(embed_patches(&mut tape, bad, &w).is_err());
    }

    #[test]
    fn single_band_attention_is_trivial() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = weights(&mut tape, 4, 3, &mut rng);
        let z = tape.constant(random(vec![1, 3], &mut rng)).unwrap();
        let (a, o) = spectral_attention(&mut tape, z, &w).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        let v = tape.linear(z, w.w_v, None).unwrap();
        assert_eq!(tape.value(o).data(), tape.value(v).data());
    }

    #[test]
    fn identical_bands_attend_uniformly() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = weights(&mut tape, 4, 3, &mut rng);
        let row = random(vec![3], &mut rng);
        let z = Tensor::from_fn(vec![5, 3], |i| row.data()[i % 3]);
        let z = tape.constant(z).unwrap();
        let (a, _) = spectral_attention(&mut tape, z, &w).unwrap();
        assert!(tape
            .value(a)
            .data()
            .iter()
            .all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn two_band_scalar_hand_computation() {
        // C = 2, d = d_k = d_v = 1: z = [1, 2], w_q = 0.5, w_k = 1.5, w_v = -1.
        let mut tape = Tape::<f64>::new();
        let s = |t: &mut Tape<f64>, v: f64| {
            t.constant(Tensor::from_f64(vec![1, 1], &[v]).unwrap())
                .unwrap()
        };
        let w = SdmWeights {
            embed_w: s(&mut tape, 1.0),
            embed_b: None,
            w_q: s(&mut tape, 0.5),
            w_k: s(&mut tape, 1.5),
            w_v: s(&mut tape, -1.0),
        };
        let z = tape
            .constant(Tensor::from_f64(vec![2, 1], &[1.0, 2.0]).unwrap())
            .unwrap();
        let (a, o) = spectral_attention(&mut tape, z, &w).unwrap();
        // q = [0.5, 1], k = [1.5, 3], v = [-1, -2]
        let row = |q: f64| {
            let (e1, e2) = ((q * 1.5f64).exp(), (q * 3.0f64).exp());
            (e1 / (e1 + e2), e2 / (e1 + e2))
        };
        let (a00, a01) = row(0.5);
        let (a10, a11) = row(1.0);
        let expect_a = [a00, a01, a10, a11];
        let expect_o = [-a00 - 2.0 * a01, -a10 - 2.0 * a11];
        for (x, y) in tape.value(a).data().iter().zip(expect_a) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tape.value(o).data().iter().zip(expect_o) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_cases() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let single = random(vec![1, 3, 2], &mut rng);
        let v = tape.constant(single.clone()).unwrap();
        let m = aggregate_patches(&mut tape, v).unwrap();
        assert_eq!(tape.value(m).data(), single.data());

        let o = random(vec![3, 2], &mut rng);
        let both: Vec<f64> = o
            .data()
            .iter()
            .copied()
            .chain(o.data().iter().map(|v| -v))
            .collect();
        let v = tape
            .constant(Tensor::new(vec![2, 3, 2], both).unwrap())
            .unwrap();
        let m = aggregate_patches(&mut tape, v).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn patch_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let stack = random(vec![5, 3, 2], &mut rng);
            let mut order: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f64> = order
                .iter()
                .flat_map(|&p| stack.data()[p * 6..(p + 1) * 6].to_vec())
                .collect();
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(stack.clone()).unwrap();
            let b = tape
                .constant(Tensor::new(vec![5, 3, 2], permuted).unwrap())
                .unwrap();
            let ma = aggregate_patches(&mut tape, a).unwrap();
            let mb = aggregate_patches(&mut tape, b).unwrap();
            assert!(tape.value(ma).max_rel_diff(tape.value(mb), 1e-12) < 1e-12);
        }
    }

    #[test]
    fn constant_image_gives_uniform_attention_and_equal_rows() {
        let cfg = SdmConfig {
            patch_side: 2,
            ..SdmConfig::new(3, 4)
        };
        let mut reg = ParamRegistry::new();
        let module = SpectralDependencyModule::declare(&mut reg, cfg).unwrap();
        let store = ParamStore::<f64>::initialize(reg.specs(), 9);
        let mut s = Session::new(&store, false);
        let x = s.input(Tensor::full(vec![3, 4, 4], 0.7)).unwrap();
        let out = module.forward(&mut s, x, true).unwrap();
        let a = s.tape.value(out.attention.unwrap());
        assert_eq!(a.shape(), &[4, 3, 3]);
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        let o = s.tape.value(out.o);
        for band in 1..3 {
            for j in 0..4 {
                assert!((o.at(&[band, j]) - o.at(&[0, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn band_count_mismatch_is_rejected() {
        let mut reg = ParamRegistry::new();
        let module = SpectralDependencyModule::declare(&mut reg, SdmConfig::new(3, 4)).unwrap();
        let store = ParamStore::<f64>::initialize(reg.specs(), 9);
        let mut s = Session::new(&store, false);
        let x = s.input(Tensor::zeros(vec![2, 4, 4])).unwrap();
        assert!(module.forward(&mut s, x, false).is_err());
        assert!(SdmConfig {
            key_dim: Some(0),
            ..SdmConfig::new(3, 4)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn scores_scale_quadratically() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = weights(&mut tape, 4, 3, &mut rng);
        let z = random(vec![2, 4, 3], &mut rng);
        let t = 1.7;
        let z1 = tape.constant(z.clone()).unwrap();
        let z2 = tape.constant(z.scaled(t)).unwrap();
        let s1 = spectral_scores(&mut tape, z1, &w).unwrap();
        let s2 = spectral_scores(&mut tape, z2, &w).unwrap();
        let expect = tape.value(s1).scaled(t * t);
        assert!(tape.value(s2).max_rel_diff(&expect, 1e-12) < 1e-12);
    }
}
