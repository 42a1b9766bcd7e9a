//! Adam with gradient accumulation and the desk-scale training loop.

mod metrics;

pub use metrics::{
    binomial_ci_halfwidth, evaluate, implied_sample_size, moving_average, ConfusionMatrix,
    Evaluation,
};

use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::backbone::{Model, IGNORE_LABEL};
use crate::data::{select_fraction, GridPatchSampler, SamplerConfig, SpectralTile};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

fn d_lr() -> f64 {
    1e-3
}
fn d_lr_min() -> f64 {
    1e-5
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_one() -> usize {
    1
}
fn d_batch() -> usize {
    4
}
fn d_epochs() -> usize {
    10
}
fn d_fraction() -> f64 {
    1.0
}
fn d_cell() -> usize {
    8
}
fn d_patch_cells() -> usize {
    2
}
fn d_ma() -> usize {
    5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate; decays along a cosine to `lr_min`.
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Patches per micro-batch.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    #[serde(default = "d_one")]
    pub accumulation_steps: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_fraction")]
    pub data_fraction: f64,
    #[serde(default = "d_cell")]
    pub cell_side: usize,
    #[serde(default = "d_patch_cells")]
    pub patch_cells: usize,
    /// Defaults to one pass over the training pixels.
    #[serde(default)]
    pub patches_per_epoch: Option<usize>,
    #[serde(default = "d_ma")]
    pub ma_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::config("need lr > 0 and 0 <= lr_min <= lr"));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::config(
                "Adam betas must lie in [0, 1) and eps be positive",
            ));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return Err(Error::config(
                "batch size, accumulation steps and epochs must be >= 1",
            ));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config(format!(
                "data fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if self.ma_window == 0 {
            return Err(Error::config("moving-average window must be >= 1"));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            t: 0,
            m: params.values().iter().map(Tensor::zeros_like).collect(),
            v: params.values().iter().map(Tensor::zeros_like).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched (their moments do not decay).
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.values()[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of `{}`", params.names()[i]),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of `{}`", params.names()[i]),
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    let one = T::one();
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params.values_mut()[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Summed pixel loss, its gradient and the number of labelled pixels for one
/// image.
pub struct SampleGrad<T> {
    pub loss_sum: f64,
    pub pixels: usize,
    pub grads: Vec<Option<Tensor<T>>>,
}

pub fn sample_grad<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    labels: &[u8],
) -> Result<SampleGrad<T>> {
    let pixels = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut s = Session::new(params, true);
    let x = s.input(image.clone())?;
    let logits = model.forward(&mut s, x)?;
    if pixels == 0 {
        return Ok(SampleGrad {
            loss_sum: 0.0,
            pixels,
            grads: vec![None; params.len()],
        });
    }
    let loss = model.loss(&mut s, logits, labels, Reduction::Sum)?;
    let loss_sum = s.tape.value(loss).item().to_f64();
    let mut g = s.tape.backward(loss)?;
    Ok(SampleGrad {
        loss_sum,
        pixels,
        grads: s.param_grads(&mut g),
    })
}

/// Running sum of per-sample gradients over one accumulation window.
pub struct GradAccumulator<T> {
    pub sum: Vec<Option<Tensor<T>>>,
    pub loss_sum: f64,
    pub pixels: usize,
    pub samples: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            sum: vec![None; n_params],
            loss_sum: 0.0,
            pixels: 0,
            samples: 0,
        }
    }

    pub fn add(&mut self, g: SampleGrad<T>) {
        for (acc, gi) in self.sum.iter_mut().zip(g.grads) {
            match (acc.as_mut(), gi) {
                (Some(a), Some(gi)) => a.add_assign(&gi),
                (None, Some(gi)) => *acc = Some(gi),
                _ => {}
            }
        }
        self.loss_sum += g.loss_sum;
        self.pixels += g.pixels;
        self.samples += 1;
    }

    /// Gradients of the window's mean pixel loss.
    pub fn mean_grads(&self) -> Vec<Option<Tensor<T>>> {
        let inv = T::from_f64(1.0 / self.pixels.max(1) as f64);
        self.sum
            .iter()
            .map(|g| g.as_ref().map(|g| g.scaled(inv)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }
}

/// Adds a micro-batch to the window. Per-sample gradients are computed in
/// parallel and folded in sample order, so splitting a batch into
/// micro-batches does not change the summation order.
pub fn accumulate_micro_batch<T: Scalar>(
    acc: &mut GradAccumulator<T>,
    model: &Model,
    params: &ParamStore<T>,
    batch: &[(Tensor<T>, Vec<u8>)],
) -> Result<()> {
    let grads: Vec<SampleGrad<T>> = batch
        .par_iter()
        .map(|(img, labels)| sample_grad(model, params, img, labels))
        .collect::<Result<_>>()?;
    for g in grads {
        acc.add(g);
    }
    Ok(())
}

/// Applies one optimizer step for the window and returns its mean loss.
pub fn step_window<T: Scalar>(
    acc: &GradAccumulator<T>,
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    adam: &AdamConfig,
) -> Result<f64> {
    if acc.pixels == 0 {
        return Ok(0.0);
    }
    adam_step(params, &acc.mean_grads(), state, lr, adam)?;
    Ok(acc.loss_sum / acc.pixels as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub samples_seen: u64,
    pub loss: f64,
    pub ma_loss: f64,
    pub val_oa: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    pub train_tiles: usize,
}

fn divergence(err: Error, epoch: usize, step: usize, lr: f64) -> Error {
    match err {
        Error::NonFinite { op } => Error::Divergence(format!(
            "epoch {epoch}, step {step}, lr {lr:.3e}: non-finite values from {op}"
        )),
        other => other,
    }
}

/// Trains `params` in place. `on_epoch` sees each record as it is produced.
pub fn train<T: Scalar>(
    model: &Model,
    params: &mut ParamStore<T>,
    train_tiles: &[&SpectralTile],
    val_tiles: &[&SpectralTile],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let chosen = select_fraction(train_tiles.len(), cfg.data_fraction, cfg.seed)?;
    if chosen.is_empty() {
        return Err(Error::config("data fraction leaves no training tiles"));
    }
    let tiles: Vec<&SpectralTile> = chosen.iter().map(|&i| train_tiles[i]).collect();
    for t in &tiles {
        t.check_labels(model.config.num_classes)?;
    }
    let side = cfg.cell_side * cfg.patch_cells;
    let pixels: usize = tiles.iter().map(|t| t.labels.len()).sum();
    let n_patches = cfg
        .patches_per_epoch
        .unwrap_or((pixels / (side * side)).max(1));
    let sampler = GridPatchSampler::new(
        &tiles,
        SamplerConfig {
            cell_side: cfg.cell_side,
            patch_cells: cfg.patch_cells,
            n_patches,
            replacement: true,
            seed: cfg.seed,
        },
    )?;

    let micro_per_epoch = n_patches.div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.accumulation_steps);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = AdamState::new(params);
    let mut step = 0usize;
    let mut samples_seen = 0u64;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let patches = sampler.epoch(epoch as u64);
        let (mut loss_sum, mut loss_pixels) = (0.0, 0usize);
        let mut acc = GradAccumulator::new(params.len());
        let mut micro_in_window = 0;
        let chunks: Vec<_> = patches.chunks(cfg.batch_size).collect();
        for (ci, chunk) in chunks.iter().enumerate() {
            let lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
            let batch = chunk
                .iter()
                .map(|p| {
                    let (img, labels) = p.extract(&tiles)?;
                    Ok((img.cast::<T>(), labels))
                })
                .collect::<Result<Vec<_>>>()?;
            accumulate_micro_batch(&mut acc, model, params, &batch)
                .map_err(|e| divergence(e, epoch, step, lr))?;
            micro_in_window += 1;
            samples_seen += chunk.len() as u64;
            if micro_in_window == cfg.accumulation_steps || ci + 1 == chunks.len() {
                let mean = step_window(&acc, params, &mut state, lr, &cfg.adam)
                    .map_err(|e| divergence(e, epoch, step, lr))?;
                if !mean.is_finite() {
                    return Err(Error::Divergence(format!(
                        "epoch {epoch}, step {step}: loss {mean}"
                    )));
                }
                loss_sum += acc.loss_sum;
                loss_pixels += acc.pixels;
                acc = GradAccumulator::new(params.len());
                micro_in_window = 0;
                step += 1;
            }
        }
        let loss = loss_sum / loss_pixels.max(1) as f64;
        losses.push(loss);
        let ma_loss = *moving_average(&losses, cfg.ma_window)?.last().unwrap();
        let val_oa = if val_tiles.is_empty() {
            None
        } else {
            Some(evaluate(model, params, val_tiles)?.overall_accuracy)
        };
        let rec = MetricsRecord {
            epoch: epoch + 1,
            samples_seen,
            loss,
            ma_loss,
            val_oa,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(TrainReport {
        records,
        steps: step,
        train_tiles: tiles.len(),
    })
}

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "samples_seen",
    "loss",
    "ma_loss",
    "val_oa",
    "seconds",
];

pub fn write_metrics_csv(w: impl Write, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in records {
        out.write_record([
            r.epoch.to_string(),
            r.samples_seen.to_string(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.ma_loss),
            r.val_oa.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(r: impl Read) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != METRICS_HEADER {
        return Err(Error::Format(format!(
            "metrics CSV header must be {}",
            METRICS_HEADER.join(",")
        )));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad {what} value `{s}`")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push(MetricsRecord {
            epoch: num(&row[0], "epoch")? as usize,
            samples_seen: num(&row[1], "samples_seen")? as u64,
            loss: num(&row[2], "loss")?,
            ma_loss: num(&row[3], "ma_loss")?,
            val_oa: if row[4].is_empty() {
                None
            } else {
                Some(num(&row[4], "val_oa")?)
            },
            seconds: num(&row[5], "seconds")?,
        });
    }
    if out.is_empty() {
        return Err(Error::Format("metrics CSV has no rows".into()));
    }
    Ok(out)
}
