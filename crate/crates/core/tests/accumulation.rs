use chromaformer::backbone::{build_model, Family, ModelConfig};
use chromaformer::data::{generate_synthetic_region, Dataset, GeneratorConfig, Split};
use chromaformer::train::{accumulate_micro_batch, train, GradAccumulator, TrainConfig};
use chromaformer::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_dataset() -> Dataset {
    let region = generate_synthetic_region(&GeneratorConfig {
        seed: 3,
        blocks: 1,
        tile_side: 16,
        bands: 4,
        classes: 3,
        ..Default::default()
    })
    .unwrap();
    Dataset::from_region(&region)
}

fn tiny_model(family: Family) -> ModelConfig {
    let mut cfg = ModelConfig::transformer(family, 4, 3, 8, vec![1, 1], 2, 2, 2).unwrap();
    if let Some(sdm) = cfg.sdm.as_mut() {
        sdm.patch_side = 2;
    }
    cfg
}

fn run(batch_size: usize, accumulation_steps: usize) -> (ParamStore<f32>, usize) {
    let ds = tiny_dataset();
    let model = build_model(&tiny_model(Family::Chromaformer)).unwrap();
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
    let report = train(
        &model,
        &mut params,
        &ds.split(Split::Train),
        &[],
        &cfg,
        |_| {},
    )
    .unwrap();
    (params, report.steps)
}

#[test]
fn four_micro_batches_match_one_fused_batch() {
    let (fused, steps) = run(8, 1);
    let (accumulated, steps_acc) = run(2, 4);
    assert_eq!((steps, steps_acc), (50, 50));
    for (a, b) in fused.values().iter().zip(accumulated.values()) {
        assert!(a.max_rel_diff(b, 1e-12) <= 1e-5);
    }
}

fn random_batch(n: usize, seed: u64) -> Vec<(Tensor<f64>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let img = Tensor::from_fn(vec![4, 4, 4], |_| rng.random_range(0.0..1.0));
            let labels = (0..16)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        255
                    } else {
                        rng.random_range(0..3)
                    }
                })
                .collect();
            (img, labels)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_split_gives_identical_window_gradients(
        seed in any::<u64>(),
        n in 1usize..=6,
        cuts in proptest::collection::vec(1usize..=3, 1..6),
        swin in any::<bool>(),
    ) {
        let family = if swin { Family::Swin } else { Family::Chromaformer };
        let model = build_model(&tiny_model(family)).unwrap();
        let params = model.init_params::<f64>(seed);
        let batch = random_batch(n, seed);

        let mut fused = GradAccumulator::new(params.len());
        accumulate_micro_batch(&mut fused, &model, &params, &batch).unwrap();

        let mut split = GradAccumulator::new(params.len());
        let mut start = 0;
        for c in cuts.iter().cycle() {
            if start >= n {
                break;
            }
            let end = (start + c).min(n);
            accumulate_micro_batch(&mut split, &model, &params, &batch[start..end]).unwrap();
            start = end;
        }
        prop_assert_eq!(fused.pixels, split.pixels);
        prop_assert_eq!(fused.loss_sum, split.loss_sum);
        for (a, b) in fused.mean_grads().iter().zip(split.mean_grads()) {
            prop_assert_eq!(a.as_ref(), b.as_ref());
        }
    }
}
