//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime
//! against the budget.
//!
//! A criterion listed in [`EXPECTED_FAIL`] is still run and reported as FAIL;
//! only an unexpected outcome (a new failure, or an expected failure that
//! starts passing) makes the process exit non-zero.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use chromaformer::backbone::window::{
    window_partition, window_reverse, windowed_attention, Grid, WindowAttention,
};
use chromaformer::backbone::{sdm_fusion_param_count, SwinBlock, VARIANTS};
use chromaformer::data::{
    assign_split, generate_synthetic_region, select_fraction, Dataset, GeneratorConfig, SheetIndex,
    Split, SubSheet,
};
use chromaformer::params::{ParamRegistry, ParamStore, Session};
use chromaformer::sdm::{SdmConfig, SpectralDependencyModule};
use chromaformer::train::{binomial_ci_halfwidth, evaluate, train, TrainConfig};
use chromaformer::{build_model, param_count, Family, ModelConfig, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

#[path = "../../core/tests/support/sdm_oracle.rs"]
mod sdm_oracle;
#[path = "../../core/tests/support/window_oracle.rs"]
mod window_oracle;

/// At the stated sample size one printed half-width rounds the other way; no
/// single sample size reproduces every row (see the error-bar notes in the
/// README).
const EXPECTED_FAIL: &[u8] = &[3];

/// `(family, name, params [M], time/epoch, accuracy %, printed ± [pp], printed S)`.
type Row = (&'static str, &'static str, f64, f64, f64, f64, &'static str);

const TABLE: &[Row] = &[
    ("resnet", "ResNet-1M", 1.0, 3.5, 75.92, 0.02, "Baseline"),
    ("resnet", "ResNet-2M", 2.0, 3.9, 76.03, 0.02, "2.879"),
    ("unetpp", "UNet++", 23.0, 4.0, 64.48, 0.02, "N/A"),
    ("resnet", "ResNet-20M", 20.0, 4.1, 80.95, 0.02, "0.745"),
    ("swin", "Swint", 27.0, 8.7, 91.34, 0.01, "Baseline"),
    (
        "chromaformer",
        "ChromaFormer-t",
        27.0,
        8.7,
        92.25,
        0.01,
        "Baseline",
    ),
    ("resnet", "ResNet-230M", 230.0, 7.4, 84.10, 0.02, "0.378"),
    ("swin", "Swins", 49.0, 12.6, 92.19, 0.01, "2.406"),
    (
        "chromaformer",
        "ChromaFormer-s",
        49.0,
        12.6,
        92.53,
        0.01,
        "2.390",
    ),
    ("swin", "Swinb", 86.0, 14.8, 93.08, 0.01, "1.378"),
    (
        "chromaformer",
        "ChromaFormer-b",
        86.0,
        14.8,
        93.38,
        0.01,
        "1.373",
    ),
    ("resnet", "ResNet-1550M", 1550.0, 25.2, 87.32, 0.02, "0.251"),
    ("swin", "Swinl", 195.0, 16.3, 94.57, 0.01, "0.896"),
    (
        "chromaformer",
        "ChromaFormer-l",
        195.0,
        16.3,
        94.80,
        0.01,
        "0.893",
    ),
    ("resnet", "ResNet-2800M", 2800.0, 40.0, 89.19, 0.01, "0.225"),
    ("swin", "Swinh", 655.0, 24.0, 96.64, 0.01, "0.555"),
    (
        "chromaformer",
        "ChromaFormer-h",
        656.0,
        24.0,
        96.71,
        0.01,
        "0.554",
    ),
];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chromaformer"))
        .args(args)
        .current_dir(dir)
        .env_remove("CHROMA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).expect("csv exists");
    rdr.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

fn scaling_coefficients() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut body = String::from("family,name,params,time,accuracy\n");
    for (family, name, p, t, acc, _, _) in TABLE {
        body.push_str(&format!("{family},{name},{p},{t},{acc}\n"));
    }
    fs::write(dir.path().join("records.csv"), body).unwrap();
    let o = cli(
        dir.path(),
        &["scaling-report", "--records", "records.csv", "--out", "rep"],
    );
    if !o.status.success() {
        return Outcome::new(
            false,
            format!("command failed: {}", String::from_utf8_lossy(&o.stderr)),
        );
    }
    let rows = csv_rows(&dir.path().join("rep/scaling_report.csv"));
    let (mut numeric, mut worst, mut bad) = (0, 0.0f64, Vec::new());
    for (_, name, .., printed) in TABLE {
        let got = &rows.iter().find(|r| r[1] == *name).unwrap()[8];
        match printed.parse::<f64>() {
            Ok(want) => {
                numeric += 1;
                let err = got
                    .parse::<f64>()
                    .map_or(f64::INFINITY, |g| (g - want).abs());
                worst = worst.max(err);
                if err > 0.005 {
                    bad.push(format!("{name} {got} vs {want}"));
                }
            }
            Err(_) if got != printed => bad.push(format!("{name} {got} vs {printed}")),
            Err(_) => {}
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{numeric} coefficients within ±0.005 (worst {worst:.4}), baselines and N/A rendered")
        } else {
            bad.join("; ")
        },
    )
}

fn chi_squared() -> Outcome {
    let dir = TempDir::new().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/class_fractions.csv");
    let o = cli(
        dir.path(),
        &[
            "split-audit",
            "--fractions",
            fixture.to_str().unwrap(),
            "--out",
            "a",
        ],
    );
    if !o.status.success() {
        return Outcome::new(false, String::from_utf8_lossy(&o.stderr).into_owned());
    }
    let rows = csv_rows(&dir.path().join("a/split_audit.csv"));
    let last = rows.last().unwrap();
    let got: Vec<f64> = (1..4).map(|i| last[i].parse().unwrap()).collect();
    let want = [0.0038, 0.0039, 0.0048];
    let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.0005);
    Outcome::new(
        ok,
        format!(
            "train/val {:.5}, train/test {:.5}, val/test {:.5}",
            got[0], got[1], got[2]
        ),
    )
}

fn error_bars() -> Outcome {
    let n = 21_500_000;
    let mut bad = Vec::new();
    for (_, name, _, _, acc, printed, _) in TABLE {
        let hw = 100.0 * binomial_ci_halfwidth(acc / 100.0, n).unwrap();
        if (hw * 100.0).round() != (printed * 100.0f64).round() {
            bad.push(format!(
                "{name}: {hw:.4} prints as {:.2}, table has {printed:.2}",
                hw
            ));
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!("all {} rows reproduce at N = {n}", TABLE.len())
        } else {
            format!(
                "{} of {} rows reproduce; {}",
                TABLE.len() - bad.len(),
                TABLE.len(),
                bad.join("; ")
            )
        },
    )
}

fn gradients() -> Outcome {
    let dir = TempDir::new().unwrap();
    let o = cli(
        dir.path(),
        &[
            "gradcheck",
            "--scope",
            "all",
            "--seeds",
            "100",
            "--out",
            "g",
        ],
    );
    let rows = csv_rows(&dir.path().join("g/gradcheck.csv"));
    let worst = rows
        .iter()
        .map(|r| (r[4].parse::<f64>().unwrap(), r[1].clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let covered = ["sdm_forward", "chroma_block", "tiny_chromaformer"]
        .iter()
        .all(|t| rows.iter().any(|r| r[1] == *t));
    let seeds_ok = rows.iter().all(|r| r[2] == "100");
    Outcome::new(
        o.status.success() && covered && seeds_ok && rows.iter().all(|r| r[6] == "true"),
        format!(
            "{} targets x 100 seeds, worst {:.2e} ({})",
            rows.len(),
            worst.0,
            worst.1
        ),
    )
}

fn random_store(reg: &ParamRegistry, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    window_oracle::random_store(reg, rng.random())
}

fn sdm_run(
    sdm: &SpectralDependencyModule,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut s = Session::new(store, false);
    let xv = s.input(x.clone()).unwrap();
    let out = sdm.forward(&mut s, xv, true).unwrap();
    (
        s.tape.value(out.o).clone(),
        s.tape.value(out.attention.unwrap()).clone(),
    )
}

fn sdm_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut row_err, mut perm_err, mut patch_err, mut oracle_err) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let c = rng.random_range(1..=5);
        let mut cfg = SdmConfig::new(c, rng.random_range(1..=6));
        cfg.patch_side = 2;
        let mut reg = ParamRegistry::new();
        let sdm = SpectralDependencyModule::declare(&mut reg, cfg).unwrap();
        let store = random_store(&reg, &mut rng);
        let (gh, gw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (2 * gh, 2 * gw);
        let x = Tensor::from_fn(vec![c, h, w], |_| rng.random_range(0.0..1.0));
        let (o, a) = sdm_run(&sdm, &store, &x);
        for row in a.data().chunks(c) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&v| v < 0.0) {
                row_err = f64::INFINITY;
            }
        }

        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let xp = Tensor::from_fn(x.shape().to_vec(), |i| {
            x.data()[perm[i / (h * w)] * h * w + i % (h * w)]
        });
        let (op, _) = sdm_run(&sdm, &store, &xp);
        let dv = o.shape()[1];
        for (i, &src) in perm.iter().enumerate() {
            for t in 0..dv {
                let (p, q) = (op.at(&[i, t]), o.at(&[src, t]));
                perm_err = perm_err.max((p - q).abs() / p.abs().max(q.abs()).max(1e-12));
            }
        }

        let mut order: Vec<usize> = (0..gh * gw).collect();
        order.shuffle(&mut rng);
        let moved = Tensor::from_fn(vec![c, h, w], |i| {
            let (band, y, xx) = (i / (h * w), (i / w) % h, i % w);
            let src = order[(y / 2) * gw + xx / 2];
            x.at(&[band, (src / gw) * 2 + y % 2, (src % gw) * 2 + xx % 2])
        });
        patch_err = patch_err.max(sdm_run(&sdm, &store, &moved).0.max_rel_diff(&o, 1e-12));
    }
    for _ in 0..60 {
        let c = rng.random_range(1..=3);
        let mut cfg = SdmConfig::new(c, rng.random_range(1..=5));
        cfg.patch_side = [1, 2, 4][rng.random_range(0..3)];
        cfg.key_dim = Some(rng.random_range(1..=4));
        cfg.value_dim = Some(rng.random_range(1..=4));
        cfg.embed_bias = rng.random_bool(0.5);
        let mut reg = ParamRegistry::new();
        let sdm = SpectralDependencyModule::declare(&mut reg, cfg.clone()).unwrap();
        let store = random_store(&reg, &mut rng);
        let x = Tensor::from_fn(vec![c, 4, 4], |_| rng.random_range(0.0..1.0));
        let (o, _) = sdm_run(&sdm, &store, &x);
        for (a, b) in o
            .data()
            .iter()
            .zip(sdm_oracle::sdm_oracle(&cfg, &store, &x))
        {
            oracle_err = oracle_err.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Outcome::new(
        row_err <= 1e-6 && perm_err <= 1e-5 && patch_err <= 1e-9 && oracle_err <= 1e-6,
        format!(
            "rows {row_err:.1e}, band permutation {perm_err:.1e}, patch reorder {patch_err:.1e}, oracle {oracle_err:.1e}"
        ),
    )
}

fn swin_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut round_trip = true;
    for window in 1..=4 {
        for (wh, ww) in [(1, 1), (2, 3), (4, 2)] {
            let (h, w) = (wh * window, ww * window);
            let x = Tensor::<f64>::from_fn(vec![h, w, 3], |i| i as f64);
            let parts = window_partition(&x, window).unwrap();
            round_trip &= window_reverse(&parts, window, h, w).unwrap() == x;
        }
    }

    let (mut attn_err, mut shifted) = (0.0f64, 0);
    for _ in 0..80 {
        let window = rng.random_range(2..=4);
        let shift = rng.random_range(0..window);
        let grid = Grid::new(rng.random_range(1..=8), rng.random_range(1..=8));
        let heads = rng.random_range(1..=2);
        let d = heads * rng.random_range(1..=3);
        let mut reg = ParamRegistry::new();
        let attn = WindowAttention::declare(&mut reg, d, heads, window, true).unwrap();
        let store = random_store(&reg, &mut rng);
        let x = Tensor::from_fn(vec![grid.len(), d], |_| rng.random_range(-1.0..1.0));
        let mut s = Session::new(&store, false);
        let wts = attn.bind(&mut s).unwrap();
        let xv = s.input(x.clone()).unwrap();
        let y =
            windowed_attention(&mut s.tape, xv, grid, window, shift, heads, &wts, window).unwrap();
        let want = window_oracle::global_masked_attention(
            &x,
            grid,
            window,
            shift,
            heads,
            &window_oracle::raw(&store, ""),
        );
        attn_err = attn_err.max(s.tape.value(y).max_rel_diff(&want, 1e-9));
        shifted += usize::from(shift > 0);
    }

    let mut fusion_err = 0.0f64;
    for _ in 0..10 {
        let (dim, heads, window, shift) = (8, 2, 2, rng.random_range(0..=1));
        let grid = Grid::new(rng.random_range(2..=6), rng.random_range(2..=6));
        let sdm_cfg = SdmConfig {
            patch_side: 2,
            ..SdmConfig::new(3, 4)
        };
        let mut reg = ParamRegistry::new();
        let sdm = reg
            .scoped("sdm", |r| {
                SpectralDependencyModule::declare(r, sdm_cfg.clone())
            })
            .unwrap();
        let chroma = reg
            .scoped("block", |r| {
                SwinBlock::declare(r, dim, heads, window, shift, 4.0, true, Some(12))
            })
            .unwrap();
        let mut store = random_store(&reg, &mut rng);
        for name in ["block.fusion.weight", "block.fusion.bias"] {
            let id = store.id_of(name).unwrap();
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut plain_reg = ParamRegistry::new();
        let plain = plain_reg
            .scoped("block", |r| {
                SwinBlock::declare(r, dim, heads, window, shift, 4.0, true, None)
            })
            .unwrap();
        let names: Vec<String> = plain_reg.specs().iter().map(|s| s.name.clone()).collect();
        let values = names
            .iter()
            .map(|n| store.get(store.id_of(n).unwrap()).clone())
            .collect();
        let plain_store = ParamStore::from_parts(names, values).unwrap();

        let x = Tensor::from_fn(vec![grid.len(), dim], |_| rng.random_range(-1.0..1.0));
        let img = Tensor::from_fn(vec![3, 4, 4], |_| rng.random_range(0.0..1.0));
        let mut s = Session::new(&store, false);
        let iv = s.input(img).unwrap();
        let ctx = sdm.forward(&mut s, iv, false).unwrap().o;
        let xv = s.input(x.clone()).unwrap();
        let y = chroma.forward(&mut s, xv, grid, Some(ctx)).unwrap();
        let mut p = Session::new(&plain_store, false);
        let xv = p.input(x).unwrap();
        let yp = plain.forward(&mut p, xv, grid, None).unwrap();
        fusion_err = fusion_err.max(s.tape.value(y).max_rel_diff(p.tape.value(yp), 1e-12));
    }
    Outcome::new(
        round_trip && attn_err <= 1e-5 && fusion_err <= 1e-6 && shifted > 0,
        format!(
            "round trip {}, masked attention {attn_err:.1e} over 80 grids ({shifted} shifted), zero fusion {fusion_err:.1e}",
            if round_trip { "exact" } else { "broken" }
        ),
    )
}

fn desk_model(family: Family, embed: usize) -> ModelConfig {
    let mut cfg =
        ModelConfig::transformer(family, 12, 6, embed, vec![2, 2], embed / 8, 4, 2).unwrap();
    if let Some(sdm) = cfg.sdm.as_mut() {
        sdm.embed_dim = 8;
    }
    cfg.head_dim = embed;
    cfg
}

fn desk_run(ds: &Dataset, family: Family, embed: usize, seed: u64) -> f64 {
    let model = build_model(&desk_model(family, embed)).unwrap();
    let mut params = model.init_params::<f32>(seed);
    let cfg = TrainConfig {
        epochs: 30,
        seed,
        batch_size: 8,
        lr: 3e-3,
        ..Default::default()
    };
    train(
        &model,
        &mut params,
        &ds.split(Split::Train),
        &ds.split(Split::Val),
        &cfg,
        |_| {},
    )
    .unwrap();
    evaluate(&model, &params, &ds.split(Split::Test))
        .unwrap()
        .overall_accuracy
}

fn training_direction() -> Outcome {
    let region = generate_synthetic_region(&GeneratorConfig {
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let ds = Dataset::from_region(&region);
    let seeds = 0..5u64;
    let chroma: Vec<f64> = seeds
        .clone()
        .map(|s| desk_run(&ds, Family::Chromaformer, 16, s))
        .collect();
    let swin: Vec<f64> = seeds.map(|s| desk_run(&ds, Family::Swin, 16, s)).collect();
    let larger = desk_run(&ds, Family::Chromaformer, 24, 0);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mc, ms) = (mean(&chroma), mean(&swin));
    let min_c = chroma.iter().cloned().fold(f64::INFINITY, f64::min);
    let (a, b, c) = (min_c >= 0.90, mc >= ms, larger >= chroma[0]);
    let mark = |ok: bool| if ok { "ok" } else { "NO" };
    Outcome::new(
        a && b && c,
        format!(
            "(a) min OA {min_c:.4} {}; (b) mean {mc:.4} vs swin {ms:.4} {}; (c) embed 24 {larger:.4} vs 16 {:.4} {}",
            mark(a),
            mark(b),
            chroma[0],
            mark(c)
        ),
    )
}

fn accumulation() -> Outcome {
    let region = generate_synthetic_region(&GeneratorConfig {
        seed: 3,
        blocks: 1,
        tile_side: 16,
        bands: 4,
        classes: 3,
        ..Default::default()
    })
    .unwrap();
    let ds = Dataset::from_region(&region);
    let mut model_cfg =
        ModelConfig::transformer(Family::Chromaformer, 4, 3, 8, vec![1, 1], 2, 2, 2).unwrap();
    model_cfg.sdm.as_mut().unwrap().patch_side = 2;
    let model = build_model(&model_cfg).unwrap();
    let run = |batch_size, accumulation_steps| {
        let mut params = model.init_params::<f32>(1);
        let cfg = TrainConfig {
            batch_size,
            accumulation_steps,
            epochs: 10,
            patches_per_epoch: Some(40),
            cell_side: 4,
            patch_cells: 2,
            lr: 3e-3,
            ..Default::default()
        };
        let rep = train(
            &model,
            &mut params,
            &ds.split(Split::Train),
            &[],
            &cfg,
            |_| {},
        )
        .unwrap();
        (params, rep.steps)
    };
    let (fused, s1) = run(8, 1);
    let (micro, s4) = run(2, 4);
    let diff = fused
        .values()
        .iter()
        .zip(micro.values())
        .map(|(a, b)| a.max_rel_diff(b, 1e-12))
        .fold(0.0, f64::max);
    let moved = model
        .init_params::<f32>(1)
        .values()
        .iter()
        .zip(fused.values())
        .map(|(a, b)| a.max_rel_diff(b, 1e-12))
        .fold(0.0, f64::max);
    Outcome::new(
        s1 == 50 && s4 == 50 && diff <= 1e-5 && moved > 1e-3,
        format!("{s1} vs {s4} steps, max relative parameter difference {diff:.1e} after moving {moved:.1e} from init"),
    )
}

fn splits() -> Outcome {
    let mut counts = [0usize; 3];
    let mut grouping = true;
    for code in SubSheet::all() {
        let split = assign_split(SheetIndex::new(9, code).unwrap());
        counts[split as usize] += 1;
        let want = match code.number {
            1 | 2 | 5 | 6 => Split::Train,
            3 | 4 => Split::Val,
            _ => Split::Test,
        };
        grouping &= split == want;
    }
    let mut exact = true;
    for n in [0usize, 1, 7, 16, 48, 100, 257] {
        for f in [0.01, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.9, 1.0] {
            let a = select_fraction(n, f, 11).unwrap();
            let b = select_fraction(n, f, 11).unwrap();
            let distinct = a.windows(2).all(|w| w[0] < w[1]) && a.iter().all(|&i| i < n);
            exact &= a.len() == (f * n as f64).floor() as usize && a == b && distinct;
        }
    }
    Outcome::new(
        counts == [8, 4, 4] && grouping && exact,
        format!(
            "train/val/test sub-sheets {counts:?}, grouping {}, fraction sizes {}",
            if grouping { "matches" } else { "differs" },
            if exact {
                "exact and seed-stable"
            } else {
                "wrong"
            }
        ),
    )
}

fn parameters() -> Outcome {
    let swin_t = param_count(&ModelConfig::full_scale(Family::Swin, "t", 3, 14).unwrap()).unwrap();
    let within = (swin_t as f64 - 27e6).abs() <= 0.15 * 27e6;
    let mut ledger_ok = true;
    let mut checked = 0;
    for variant in VARIANTS {
        for full in [false, true] {
            let make = |f| {
                if full {
                    ModelConfig::full_scale(f, variant, 12, 14).unwrap()
                } else {
                    ModelConfig::desk_scale(f, variant, 12, 14).unwrap()
                }
            };
            let (chroma, swin) = (make(Family::Chromaformer), make(Family::Swin));
            let sdm = chroma.sdm.as_ref().unwrap();
            let (p2, d, c, d1) = (
                sdm.patch_side * sdm.patch_side,
                sdm.embed_dim,
                sdm.num_bands,
                chroma.embed_dim,
            );
            let module = p2 * d + d + 2 * d * sdm.d_k() + d * sdm.d_v();
            let fusion = chroma.stage_depths[0] * (c * sdm.d_v() * d1 + d1);
            let diff = param_count(&chroma).unwrap() - param_count(&swin).unwrap();
            ledger_ok &= diff == module + fusion && diff == sdm_fusion_param_count(&chroma);
            checked += 1;
        }
    }
    Outcome::new(
        within && ledger_ok,
        format!(
            "Swin-T-like {swin_t} ({:+.1}% of 27M); spectral ledger exact on {checked} configs: {ledger_ok}",
            100.0 * (swin_t as f64 / 27e6 - 1.0)
        ),
    )
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(u8, &str, Duration, Check); 10] = [
        (
            1,
            "scaling-coefficient reproduction",
            Duration::from_secs(1),
            scaling_coefficients,
        ),
        (
            2,
            "chi-squared reproduction",
            Duration::from_secs(1),
            chi_squared,
        ),
        (
            3,
            "error-bar reproduction",
            Duration::from_secs(1),
            error_bars,
        ),
        (
            4,
            "gradient correctness",
            Duration::from_secs(300),
            gradients,
        ),
        (
            5,
            "spectral module invariants",
            Duration::from_secs(60),
            sdm_invariants,
        ),
        (
            6,
            "windowed attention mechanics",
            Duration::from_secs(60),
            swin_mechanics,
        ),
        (
            7,
            "desk-scale training direction",
            Duration::from_secs(7200),
            training_direction,
        ),
        (
            8,
            "gradient-accumulation equivalence",
            Duration::from_secs(120),
            accumulation,
        ),
        (9, "split correctness", Duration::from_secs(1), splits),
        (
            10,
            "parameter accounting",
            Duration::from_secs(1),
            parameters,
        ),
    ];
    let only: Option<u8> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut surprises = Vec::new();
    for (id, name, budget, check) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let passed = outcome.passed && in_budget;
        let expected = EXPECTED_FAIL.contains(&id);
        let note = match (passed, expected) {
            (false, true) => "  [expected]",
            (true, true) => "  [unexpected pass]",
            _ => "",
        };
        println!(
            "{} {id:>2}. {name}: {} ({:.2}s, budget {}s{}){note}",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
        if passed == expected {
            surprises.push(id);
        }
    }
    if surprises.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcome for criteria {surprises:?}");
        ExitCode::FAILURE
    }
}
