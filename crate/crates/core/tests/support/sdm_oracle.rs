//! Straight-line restatement of the spectral module: patch, embed, per-patch
//! band attention, mean over patches.

use chromaformer::params::ParamStore;
use chromaformer::sdm::SdmConfig;
use chromaformer::Tensor;

fn get(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(store.id_of(name).unwrap()).data().to_vec()
}

/// `O` as a flat `[C, d_v]` buffer.
pub fn sdm_oracle(cfg: &SdmConfig, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (s, d, dk, dv) = (cfg.patch_side, cfg.embed_dim, cfg.d_k(), cfg.d_v());
    let (e, q, k, v) = (
        get(store, "embed.weight"),
        get(store, "w_q"),
        get(store, "w_k"),
        get(store, "w_v"),
    );
    let b = if cfg.embed_bias {
        get(store, "embed.bias")
    } else {
        vec![0.0; d]
    };
    let dot = |a: &[f64], m: &[f64], cols: usize, j: usize| -> f64 {
        a.iter()
            .enumerate()
            .map(|(i, ai)| ai * m[i * cols + j])
            .sum()
    };
    let mut o = vec![0.0; c * dv];
    let n_p = (h / s) * (w / s);
    for py in 0..h / s {
        for px in 0..w / s {
            let z: Vec<Vec<f64>> = (0..c)
                .map(|band| {
                    let pix: Vec<f64> = (0..s * s)
                        .map(|i| x.at(&[band, py * s + i / s, px * s + i % s]))
                        .collect();
                    (0..d).map(|j| dot(&pix, &e, d, j) + b[j]).collect()
                })
                .collect();
            let proj = |m: &[f64], cols: usize| -> Vec<Vec<f64>> {
                z.iter()
                    .map(|zi| (0..cols).map(|j| dot(zi, m, cols, j)).collect())
                    .collect()
            };
            let (qs, ks, vs) = (proj(&q, dk), proj(&k, dk), proj(&v, dv));
            for i in 0..c {
                let sc: Vec<f64> = (0..c)
                    .map(|j| (0..dk).map(|t| qs[i][t] * ks[j][t]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = sc.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = ex.iter().sum();
                for t in 0..dv {
                    o[i * dv + t] +=
                        (0..c).map(|j| ex[j] / tot * vs[j][t]).sum::<f64>() / n_p as f64;
                }
            }
        }
    }
    o
}
