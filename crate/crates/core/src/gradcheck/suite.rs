//! Seeded gradient-check targets: every primitive, the spectral module, both
//! block kinds and a tiny full model.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_session, finite_difference_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::{FaultInjection, Reduction, Tape, Var, GATHER_ZERO};
use crate::backbone::window::Grid;
use crate::backbone::{build_model, Family, ModelConfig, SwinBlock, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::params::{Init, ParamRegistry, ParamStore};
use crate::sdm::{SdmConfig, SpectralDependencyModule};
use crate::tensor::Tensor;

/// Largest relative error a target may show.
pub const THRESHOLD: f64 = 1e-4;

const EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Primitives,
    Sdm,
    Block,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Sdm, Scope::Block, Scope::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Sdm => "sdm",
            Scope::Block => "block",
            Scope::Model => "model",
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck scope `{s}`")))
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const PRIMITIVES: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_row_vector",
    "sum",
    "mean_over_axis",
    "layer_norm",
    "gelu",
    "relu",
    "linear",
    "matmul",
    "batched_matmul",
    "batched_matmul_nt",
    "softmax_rows",
    "masked_softmax_rows",
    "cross_entropy_logits",
    "conv2d",
    "upsample_nearest",
    "gather",
    "reshape",
    "permute",
    "concat0",
];

/// `(scope, name)` of every target in `scope`, or all of them.
pub fn targets(scope: Option<Scope>) -> Vec<(Scope, &'static str)> {
    let mut out: Vec<(Scope, &'static str)> =
        PRIMITIVES.iter().map(|&p| (Scope::Primitives, p)).collect();
    out.push((Scope::Sdm, "sdm_forward"));
    out.push((Scope::Block, "swin_block"));
    out.push((Scope::Block, "chroma_block"));
    out.push((Scope::Model, "tiny_chromaformer"));
    out.retain(|(s, _)| scope.is_none_or(|want| *s == want));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetResult {
    pub scope: Scope,
    pub name: &'static str,
    pub seeds: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl TargetResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random projection to a scalar, so every output element gets its own weight.
fn project(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x9e37_79b9);
    let r = uniform(tape.shape(out).to_vec(), &mut rng);
    let r = tape.constant(r)?;
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

type Case = (
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

fn primitive_case(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n, b) = (dim(1, 4), dim(1, 4), dim(2, 4), dim(1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let rng = &mut rng;
    let p = seed;
    macro_rules! case {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            Ok((
                $inputs,
                Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> {
                    let out = $body?;
                    project($t, out, p)
                }),
            ))
        };
    }
    match name {
        "add" => case!(
            vec![uniform(vec![m, n], rng), uniform(vec![m, n], rng)],
            |t, v| t.add(v[0], v[1])
        ),
        "sub" => case!(
            vec![uniform(vec![m, n], rng), uniform(vec![m, n], rng)],
            |t, v| t.sub(v[0], v[1])
        ),
        "mul" => case!(
            vec![uniform(vec![m, n], rng), uniform(vec![m, n], rng)],
            |t, v| t.mul(v[0], v[1])
        ),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            case!(vec![uniform(vec![m, n], rng)], |t, v| t.scale(v[0], s))
        }
        "add_row_vector" => case!(
            vec![uniform(vec![b, m, n], rng), uniform(vec![n], rng)],
            |t, v| t.add_row_vector(v[0], v[1])
        ),
        "sum" => case!(vec![uniform(vec![m, n], rng)], |t, v| t.sum(v[0])),
        "mean_over_axis" => {
            let axis = rng.random_range(0..3);
            case!(vec![uniform(vec![b, m, n], rng)], |t, v| t
                .mean_over_axis(v[0], axis))
        }
        "layer_norm" => case!(
            vec![
                uniform(vec![m, n + 1], rng),
                uniform(vec![n + 1], rng),
                uniform(vec![n + 1], rng)
            ],
            |t, v| t.layer_norm(v[0], v[1], v[2])
        ),
        "gelu" => {
            let x = Tensor::from_fn(vec![m, n], |_| rng.random_range(-3.0..3.0));
            case!(vec![x], |t, v| t.gelu(v[0]))
        }
        "relu" => {
            // Keep clear of the kink so the central difference is exact.
            let x = Tensor::from_fn(vec![m, n], |_| {
                let mag: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            });
            case!(vec![x], |t, v| t.relu(v[0]))
        }
        "linear" => case!(
            vec![
                uniform(vec![b, m, k], rng),
                uniform(vec![k, n], rng),
                uniform(vec![n], rng)
            ],
            |t, v| t.linear(v[0], v[1], Some(v[2]))
        ),
        "matmul" => case!(
            vec![uniform(vec![m, k], rng), uniform(vec![k, n], rng)],
            |t, v| t.matmul(v[0], v[1])
        ),
        "batched_matmul" => case!(
            vec![uniform(vec![b, m, k], rng), uniform(vec![b, k, n], rng)],
            |t, v| t.batched_matmul(v[0], v[1])
        ),
        "batched_matmul_nt" => case!(
            vec![uniform(vec![b, m, k], rng), uniform(vec![b, n, k], rng)],
            |t, v| t.batched_matmul_nt(v[0], v[1])
        ),
        "softmax_rows" => {
            let x = Tensor::from_fn(vec![b, m, n], |_| rng.random_range(-3.0..3.0));
            case!(vec![x], |t, v| t.softmax_rows(v[0]))
        }
        "masked_softmax_rows" => {
            let x = Tensor::from_fn(vec![m, n], |_| rng.random_range(-3.0..3.0));
            let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.4)).collect();
            for row in mask.chunks_mut(n) {
                let keep = rng.random_range(0..n);
                row[keep] = false;
            }
            let mask = Arc::new(mask);
            case!(vec![x], |t, v| t.masked_softmax_rows(v[0], mask.clone()))
        }
        "cross_entropy_logits" => {
            let rows = m + 2;
            let mut labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..n as u8)).collect();
            labels[rng.random_range(1..rows)] = IGNORE_LABEL;
            let reduction = if rng.random_bool(0.5) {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            let x = Tensor::from_fn(vec![rows, n], |_| rng.random_range(-3.0..3.0));
            Ok((
                vec![x],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    t.cross_entropy_logits(v[0], &labels, Some(IGNORE_LABEL), reduction)
                }),
            ))
        }
        "conv2d" => {
            let ks = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (ks + rng.random_range(0..=3), ks + rng.random_range(0..=3));
            case!(
                vec![
                    uniform(vec![cin, h, w], rng),
                    uniform(vec![cout, cin, ks, ks], rng),
                    uniform(vec![cout], rng)
                ],
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding)
            )
        }
        "upsample_nearest" => {
            let f = rng.random_range(1..=3);
            case!(vec![uniform(vec![b, m, n], rng)], |t, v| t
                .upsample_nearest(v[0], f))
        }
        "gather" => {
            let len = m * n;
            let out = rng.random_range(1..=2 * len);
            let index: Vec<usize> = (0..out)
                .map(|_| {
                    if rng.random_bool(0.15) {
                        GATHER_ZERO
                    } else {
                        rng.random_range(0..len)
                    }
                })
                .collect();
            let index = Arc::new(index);
            case!(vec![uniform(vec![m, n], rng)], |t, v| t.gather(
                v[0],
                index.clone(),
                vec![out]
            ))
        }
        "reshape" => case!(vec![uniform(vec![b, m, n], rng)], |t, v| t
            .reshape(v[0], vec![b * m, n])),
        "permute" => {
            let mut perm = vec![0, 1, 2];
            perm.shuffle(rng);
            case!(vec![uniform(vec![b, m, n], rng)], |t, v| t
                .permute(v[0], &perm))
        }
        "concat0" => case!(
            vec![
                uniform(vec![m, n], rng),
                uniform(vec![k, n], rng),
                uniform(vec![b, n], rng)
            ],
            |t, v| t.concat0(&[v[0], v[1], v[2]])
        ),
        other => Err(Error::invalid(format!(
            "unknown primitive target `{other}`"
        ))),
    }
}

/// Uniform `[-1, 1)` values for every declared tensor.
fn random_store(reg: &ParamRegistry, rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let names = reg.specs().iter().map(|s| s.name.clone()).collect();
    let values = reg
        .specs()
        .iter()
        .map(|s| uniform(s.shape.clone(), rng))
        .collect();
    ParamStore::from_parts(names, values)
}

fn options(
    seed: u64,
    max_coords: Option<usize>,
    fault: &Option<FaultInjection>,
) -> GradCheckOptions {
    GradCheckOptions {
        eps: EPS,
        max_coords,
        seed,
        fault: fault.clone(),
    }
}

fn sdm_case(seed: u64, fault: &Option<FaultInjection>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = SdmConfig::new(rng.random_range(1..=4), rng.random_range(1..=4));
    cfg.patch_side = rng.random_range(1..=2);
    cfg.embed_bias = rng.random_bool(0.7);
    let (h, w) = (
        cfg.patch_side * rng.random_range(1..=3),
        cfg.patch_side * rng.random_range(1..=3),
    );
    let mut reg = ParamRegistry::new();
    let input = reg.declare("input", vec![cfg.num_bands, h, w], Init::Zeros);
    let sdm = SpectralDependencyModule::declare(&mut reg, cfg)?;
    let store = random_store(&reg, &mut rng)?;
    check_session(
        |s| {
            let x = s.param(input)?;
            let out = sdm.forward(s, x, false)?;
            project(&mut s.tape, out.o, seed)
        },
        &store,
        &options(seed, Some(48), fault),
    )
}

fn block_case(seed: u64, fuse: bool, fault: &Option<FaultInjection>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(1..=3);
    let grid = Grid::new(rng.random_range(2..=5), rng.random_range(2..=5));
    let (window, shift) = (2, rng.random_range(0..=1));
    let sdm_cfg = SdmConfig {
        patch_side: 2,
        ..SdmConfig::new(rng.random_range(1..=3), rng.random_range(1..=3))
    };
    let mut reg = ParamRegistry::new();
    let tokens = reg.declare("tokens", vec![grid.len(), dim], Init::Zeros);
    let image = reg.declare("image", vec![sdm_cfg.num_bands, 4, 4], Init::Zeros);
    let sdm = fuse
        .then(|| {
            reg.scoped("sdm", |r| {
                SpectralDependencyModule::declare(r, sdm_cfg.clone())
            })
        })
        .transpose()?;
    let fusion_in = fuse.then(|| sdm_cfg.num_bands * sdm_cfg.d_v());
    let block = reg.scoped("block", |r| {
        SwinBlock::declare(r, dim, heads, window, shift, 2.0, true, fusion_in)
    })?;
    let store = random_store(&reg, &mut rng)?;
    check_session(
        |s| {
            let ctx = match &sdm {
                Some(m) => {
                    let img = s.param(image)?;
                    Some(m.forward(s, img, false)?.o)
                }
                None => None,
            };
            let x = s.param(tokens)?;
            let out = block.forward(s, x, grid, ctx)?;
            project(&mut s.tape, out, seed)
        },
        &store,
        &options(seed, Some(48), fault),
    )
}

fn model_case(seed: u64, fault: &Option<FaultInjection>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::transformer(Family::Chromaformer, 3, 3, 8, vec![1, 1], 2, 2, 2)?;
    cfg.head_dim = 4;
    if let Some(sdm) = cfg.sdm.as_mut() {
        sdm.patch_side = 2;
    }
    let model = build_model(&cfg)?;
    let (h, w) = (2 * rng.random_range(2..=4), 2 * rng.random_range(2..=4));
    let mut reg = ParamRegistry::new();
    for spec in &model.specs {
        reg.declare(&spec.name, spec.shape.clone(), Init::Zeros);
    }
    let input = reg.declare("input", vec![3, h, w], Init::Zeros);
    let mut store = random_store(&reg, &mut rng)?;
    // Unit-scale norms keep the network well conditioned.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".gain") {
            for v in store.get_mut(id).data_mut() {
                *v = 1.0 + 0.25 * *v;
            }
        }
    }
    let mut labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
    labels[0] = IGNORE_LABEL;
    check_session(
        |s| {
            let x = s.param(input)?;
            let logits = model.forward(s, x)?;
            model.loss(s, logits, &labels, Reduction::Mean)
        },
        &store,
        &options(seed, Some(32), fault),
    )
}

pub fn run_one(
    scope: Scope,
    name: &str,
    seed: u64,
    fault: &Option<FaultInjection>,
) -> Result<GradCheckReport> {
    match (scope, name) {
        (Scope::Primitives, p) => {
            let (inputs, f) = primitive_case(p, seed)?;
            finite_difference_check(f, &inputs, &options(seed, None, fault))
        }
        (Scope::Sdm, _) => sdm_case(seed, fault),
        (Scope::Block, "swin_block") => block_case(seed, false, fault),
        (Scope::Block, _) => block_case(seed, true, fault),
        (Scope::Model, _) => model_case(seed, fault),
    }
}

/// Runs one target over `seeds`, keeping the worst seed.
pub fn run_target(
    scope: Scope,
    name: &'static str,
    seeds: Range<u64>,
    fault: Option<FaultInjection>,
) -> Result<TargetResult> {
    let mut result = TargetResult {
        scope,
        name,
        seeds: 0,
        coords: 0,
        max_rel_error: 0.0,
        worst_seed: seeds.start,
    };
    for seed in seeds {
        let r = run_one(scope, name, seed, &fault)?;
        result.seeds += 1;
        result.coords += r.coords_checked;
        if r.max_rel_error > result.max_rel_error {
            result.max_rel_error = r.max_rel_error;
            result.worst_seed = seed;
        }
    }
    Ok(result)
}

/// Every target of `scope` (all when `None`), in [`targets`] order.
pub fn run_suite(
    scope: Option<Scope>,
    seeds: Range<u64>,
    fault: Option<FaultInjection>,
) -> Result<Vec<TargetResult>> {
    targets(scope)
        .into_par_iter()
        .map(|(sc, name)| run_target(sc, name, seeds.clone(), fault.clone()))
        .collect()
}
