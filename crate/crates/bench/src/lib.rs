//! Shared fixtures for the benchmarks.

use chromaformer::params::ParamRegistry;
use chromaformer::sdm::SpectralDependencyModule;
use chromaformer::{build_model, Family, Model, ModelConfig, ParamStore, SdmConfig, Tensor};

/// Deterministic values in `[-1, 1)` without pulling in an RNG.
pub fn filled(shape: impl Into<Vec<usize>>, salt: usize) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        ((i.wrapping_mul(2_654_435_761).wrapping_add(salt * 97)) % 2000) as f32 / 1000.0 - 1.0
    })
}

/// A desk-scale transformer over a 12-band, 6-class input.
pub fn desk_model(family: Family, embed: usize) -> (Model, ParamStore<f32>) {
    let mut cfg =
        ModelConfig::transformer(family, 12, 6, embed, vec![2, 2], embed / 8, 4, 2).unwrap();
    if let Some(sdm) = cfg.sdm.as_mut() {
        sdm.embed_dim = 8;
    }
    cfg.head_dim = embed;
    let model = build_model(&cfg).unwrap();
    let params = model.init_params(0);
    (model, params)
}

pub fn sdm(bands: usize, embed: usize) -> (SpectralDependencyModule, ParamStore<f32>) {
    let mut reg = ParamRegistry::new();
    let module = SpectralDependencyModule::declare(&mut reg, SdmConfig::new(bands, embed)).unwrap();
    let params = ParamStore::initialize(reg.specs(), 0);
    (module, params)
}
