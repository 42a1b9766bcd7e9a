//! Differentiable primitives.
//!
//! Shape contracts (no implicit broadcasting anywhere else):
//!
//! | primitive            | inputs                                   | output            |
//! |----------------------|------------------------------------------|-------------------|
//! | `add`, `sub`, `mul`  | two tensors of identical shape           | same shape        |
//! | `scale`              | any tensor                               | same shape        |
//! | `add_row_vector`     | `[.., n]`, `[n]`                         | `[.., n]`         |
//! | `mean_over_axis`     | any tensor, axis `< rank`                | axis removed      |
//! | `layer_norm`         | `[.., n]`, gain `[n]`, bias `[n]`        | `[.., n]`         |
//! | `gelu`, `relu`       | any tensor                               | same shape        |
//! | `linear`             | `[.., in]`, weight `[in, out]`, `[out]`  | `[.., out]`       |
//! | `matmul`             | `[m, k]`, `[k, n]`                       | `[m, n]`          |
//! | `batched_matmul`     | `[b, m, k]`, `[b, k, n]`                 | `[b, m, n]`       |
//! | `batched_matmul_nt`  | `[b, m, k]`, `[b, n, k]`                 | `[b, m, n]`       |
//! | `softmax_rows`       | `[.., c]`, `c >= 1`                      | same shape        |
//! | `conv2d`             | `[cin, h, w]`, `[cout, cin, k, k]`, `[cout]` | `[cout, h', w']` |
//! | `upsample_nearest`   | `[c, h, w]`                              | `[c, h·f, w·f]`   |
//! | `gather`             | any tensor, flat index list              | requested shape   |
//! | `concat0`            | tensors agreeing past axis 0             | stacked on axis 0 |
//!
//! `layer_norm` adds `1e-5` to the variance before the square root.

use std::str::FromStr;
use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index value that makes [`Tape::gather`] emit zero.
pub const GATHER_ZERO: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Named primitive kinds with their attributes, dispatched by
/// [`Tape::apply_primitive`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Mul,
    Scale(f64),
    MeanOverAxis(usize),
    LayerNorm,
    Gelu,
    Linear,
    Relu,
    Conv2d { stride: usize, padding: usize },
    UpsampleNearest(usize),
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses a kind name with default attributes (`scale` = 1, axis 0,
    /// stride 1 / padding 0, factor 2).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "scale" => Primitive::Scale(1.0),
            "mean_over_axis" => Primitive::MeanOverAxis(0),
            "layer_norm" => Primitive::LayerNorm,
            "gelu" => Primitive::Gelu,
            "linear" => Primitive::Linear,
            "relu" => Primitive::Relu,
            "conv2d" => Primitive::Conv2d {
                stride: 1,
                padding: 0,
            },
            "upsample_nearest" => Primitive::UpsampleNearest(2),
            other => return Err(Error::invalid(format!("unknown primitive kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap();
    (shape.iter().product::<usize>() / n, n)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn col_sums<T: Scalar>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(vec![n], out).unwrap()
}

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<T: Scalar> Tape<T> {
    /// Dispatches a named primitive. `Linear`, `Conv2d` take an optional third
    /// (bias) input; `LayerNorm` takes gain and bias.
    pub fn apply_primitive(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale(s) => {
                arity(1)?;
                self.scale(inputs[0], s)
            }
            Primitive::MeanOverAxis(axis) => {
                arity(1)?;
                self.mean_over_axis(inputs[0], axis)
            }
            Primitive::LayerNorm => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            Primitive::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Primitive::Linear => match inputs.len() {
                2 => self.linear(inputs[0], inputs[1], None),
                3 => self.linear(inputs[0], inputs[1], Some(inputs[2])),
                n => Err(Error::invalid(format!(
                    "Linear expects 2 or 3 inputs, got {n}"
                ))),
            },
            Primitive::Conv2d { stride, padding } => match inputs.len() {
                2 => self.conv2d(inputs[0], inputs[1], None, stride, padding),
                3 => self.conv2d(inputs[0], inputs[1], Some(inputs[2]), stride, padding),
                n => Err(Error::invalid(format!(
                    "Conv2d expects 2 or 3 inputs, got {n}"
                ))),
            },
            Primitive::UpsampleNearest(f) => {
                arity(1)?;
                self.upsample_nearest(inputs[0], f)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = zip_map(va, vb, |x, y| x + y);
        self.record(
            "add",
            out,
            &[a, b],
            Box::new(|p| vec![Some(p.grad.clone()), Some(p.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = zip_map(va, vb, |x, y| x - y);
        self.record(
            "sub",
            out,
            &[a, b],
            Box::new(|p| vec![Some(p.grad.clone()), Some(p.grad.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = zip_map(va, vb, |x, y| x * y);
        self.record(
            "mul",
            out,
            &[a, b],
            Box::new(|p| {
                vec![
                    p.needs[0].then(|| zip_map(p.grad, p.inputs[1], |g, y| g * y)),
                    p.needs[1].then(|| zip_map(p.grad, p.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(a).scaled(s);
        self.record(
            "scale",
            out,
            &[a],
            Box::new(move |p| vec![Some(p.grad.scaled(s))]),
        )
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = *vx.shape().last().unwrap();
        if vb.shape() != [n] {
            return Err(Error::shape(
                "add_row_vector",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(vb.data()) {
                *o = *o + v;
            }
        }
        self.record(
            "add_row_vector",
            out,
            &[x, b],
            Box::new(move |p| {
                vec![
                    Some(p.grad.clone()),
                    p.needs[1].then(|| col_sums(p.grad, n)),
                ]
            }),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let shape = self.shape(x).to_vec();
        self.record(
            "sum",
            Tensor::scalar(total),
            &[x],
            Box::new(move |p| vec![Some(Tensor::full(shape.clone(), p.grad.item()))]),
        )
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "mean_over_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        let d = vx.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.record(
            "mean_over_axis",
            Tensor::new(out_shape, out)?,
            &[x],
            Box::new(move |p| {
                let g = p.grad.data();
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (a, &b) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *a = b * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Normalizes the last axis, then applies learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, n) = last_dim(vx.shape());
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?}, bias {:?}",
                    vx.shape(),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (normed, _) = normalize_rows(vx.data(), rows, n);
        let (vg, vb) = (self.value(gain).data(), self.value(bias).data());
        let mut out = normed;
        for row in out.chunks_mut(n) {
            for ((o, &g), &b) in row.iter_mut().zip(vg).zip(vb) {
                *o = *o * g + b;
            }
        }
        let shape = vx.shape().to_vec();
        self.record(
            "layer_norm",
            Tensor::new(shape.clone(), out)?,
            &[x, gain, bias],
            Box::new(move |p| {
                let (xhat, inv_std) = normalize_rows(p.inputs[0].data(), rows, n);
                let gain = p.inputs[1].data();
                let g = p.grad.data();
                let nt = T::from_f64(n as f64);
                let mut dx = vec![T::zero(); rows * n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        let dxh = gr[j] * gain[j];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xr[j];
                        dgain[j] = dgain[j] + gr[j] * xr[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                    let k = inv_std[r] / nt;
                    for j in 0..n {
                        let dxh = gr[j] * gain[j];
                        dx[r * n + j] = k * (nt * dxh - s1 - xr[j] * s2);
                    }
                }
                vec![
                    Some(Tensor::new(shape.clone(), dx).unwrap()),
                    p.needs[1].then(|| Tensor::new(vec![n], dgain).unwrap()),
                    p.needs[2].then(|| Tensor::new(vec![n], dbias).unwrap()),
                ]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::from_f64(gelu_fwd(v.to_f64())));
        self.record(
            "gelu",
            out,
            &[x],
            Box::new(|p| {
                vec![Some(zip_map(p.grad, p.inputs[0], |g, x| {
                    g * T::from_f64(gelu_grad(x.to_f64()))
                }))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.record(
            "relu",
            out,
            &[x],
            Box::new(|p| {
                vec![Some(zip_map(p.grad, p.inputs[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    /// `x · weight + bias` over the last axis of `x`; weight is `[in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (rows, fan_in) = last_dim(vx.shape());
        if vw.rank() != 2 || vw.shape()[0] != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let fan_out = vw.shape()[1];
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {fan_out} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); rows * fan_out];
        matmul_into(vx.data(), vw.data(), &mut out, rows, fan_in, fan_out);
        if let Some(b) = bias {
            let vb = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                for (o, &v) in row.iter_mut().zip(vb) {
                    *o = *o + v;
                }
            }
        }
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = fan_out;
        let in_shape = vx.shape().to_vec();
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(
            "linear",
            Tensor::new(out_shape, out)?,
            &inputs,
            Box::new(move |p| {
                let g = p.grad.data();
                let dx = p.needs[0].then(|| {
                    let mut dx = vec![T::zero(); rows * fan_in];
                    matmul_nt_into(g, p.inputs[1].data(), &mut dx, rows, fan_out, fan_in);
                    Tensor::new(in_shape.clone(), dx).unwrap()
                });
                let dw = p.needs[1].then(|| {
                    let mut dw = vec![T::zero(); fan_in * fan_out];
                    matmul_tn_into(p.inputs[0].data(), g, &mut dw, fan_in, rows, fan_out);
                    Tensor::new(vec![fan_in, fan_out], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if p.inputs.len() == 3 {
                    grads.push(p.needs[2].then(|| col_sums(p.grad, fan_out)));
                }
                grads
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!(
                    "cannot multiply {:?} by {:?}: inner extents differ",
                    va.shape(),
                    vb.shape()
                ),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        self.record(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            &[a, b],
            Box::new(move |p| {
                let g = p.grad.data();
                let da = p.needs[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(g, p.inputs[1].data(), &mut da, m, n, k);
                    Tensor::new(vec![m, k], da).unwrap()
                });
                let db = p.needs[1].then(|| {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(p.inputs[0].data(), g, &mut db, k, m, n);
                    Tensor::new(vec![k, n], db).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false)
    }

    /// `a[i] · b[i]ᵀ` for every batch entry.
    pub fn batched_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, true)
    }

    fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op = if transpose_b {
            "batched_matmul_nt"
        } else {
            "batched_matmul"
        };
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || Error::shape(op, format!("{:?} with {:?}", va.shape(), vb.shape()));
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(mismatch());
        }
        let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, n) = if transpose_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            let ai = &va.data()[i * m * k..(i + 1) * m * k];
            let bi = &vb.data()[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_nt_into(ai, bi, oi, m, k, n);
            } else {
                matmul_into(ai, bi, oi, m, k, n);
            }
        }
        let b_shape = vb.shape().to_vec();
        self.record(
            op,
            Tensor::new(vec![bsz, m, n], out)?,
            &[a, b],
            Box::new(move |p| {
                let g = p.grad.data();
                let (ad, bd) = (p.inputs[0].data(), p.inputs[1].data());
                let mut da = p.needs[0].then(|| vec![T::zero(); bsz * m * k]);
                let mut db = p.needs[1].then(|| vec![T::zero(); bsz * k * n]);
                for i in 0..bsz {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    if let Some(da) = da.as_mut() {
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            // b is [n, k]
                            matmul_into(gi, bi, dai, m, n, k);
                        } else {
                            matmul_nt_into(gi, bi, dai, m, n, k);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            matmul_tn_into(gi, ai, dbi, n, m, k);
                        } else {
                            matmul_tn_into(ai, gi, dbi, k, m, n);
                        }
                    }
                }
                vec![
                    da.map(|d| Tensor::new(vec![bsz, m, k], d).unwrap()),
                    db.map(|d| Tensor::new(b_shape.clone(), d).unwrap()),
                ]
            }),
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `masked[i] == true` excludes element
    /// `i` (equivalent to a score of −∞). A row with every entry masked has
    /// no attendable key and is rejected.
    pub fn masked_softmax_rows(&mut self, x: Var, masked: Arc<Vec<bool>>) -> Result<Var> {
        if masked.len() != self.value(x).len() {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask of {} for {:?}", masked.len(), self.shape(x)),
            ));
        }
        self.softmax_impl(x, Some(masked))
    }

    fn softmax_impl(&mut self, x: Var, masked: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() < 1 {
            return Err(Error::shape("softmax_rows", "empty row dimension"));
        }
        let (_, c) = last_dim(vx.shape());
        let mut out = vx.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let keep = |j: usize| masked.as_ref().is_none_or(|m| !m[r * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::invalid(format!(
                    "softmax row {r} has no attendable entry"
                )));
            }
            let mut total = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - max).exp() } else { T::zero() };
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let shape = vx.shape().to_vec();
        self.record(
            "softmax_rows",
            Tensor::new(shape.clone(), out)?,
            &[x],
            Box::new(move |p| {
                let y = p.output.data();
                let g = p.grad.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Cross-entropy of `[n, k]` logits against class indices; positions whose
    /// label equals `ignore` are skipped. `Mean` divides by the number of
    /// non-ignored positions.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore: Option<u8>,
        reduction: Reduction,
    ) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy_logits",
                format!("logits {:?} with {} labels", vl.shape(), labels.len()),
            ));
        }
        let k = vl.shape()[1];
        let mut active = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            if Some(l) == ignore {
                continue;
            }
            if l as usize >= k {
                return Err(Error::invalid(format!(
                    "label {l} at position {i} is outside [0, {k})"
                )));
            }
            active.push(i);
        }
        if active.is_empty() {
            return Err(Error::invalid("every label is the ignore marker"));
        }
        let d = vl.data();
        let mut probs = vec![T::zero(); labels.len() * k];
        let mut loss = T::zero();
        for &i in &active {
            let row = &d[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss = loss + (log_z - row[labels[i] as usize]);
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
        }
        let norm = match reduction {
            Reduction::Mean => T::from_f64(active.len() as f64),
            Reduction::Sum => T::one(),
        };
        let labels = labels.to_vec();
        let shape = vl.shape().to_vec();
        self.record(
            "cross_entropy_logits",
            Tensor::scalar(loss / norm),
            &[logits],
            Box::new(move |p| {
                let scale = p.grad.item() / norm;
                let mut dx = vec![T::zero(); probs.len()];
                for &i in &active {
                    for j in 0..k {
                        dx[i * k + j] = probs[i * k + j] * scale;
                    }
                    dx[i * k + labels[i] as usize] = dx[i * k + labels[i] as usize] - scale;
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// 2-D convolution on a single `[cin, h, w]` image with square kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        if vx.rank() != 3
            || vw.rank() != 4
            || vw.shape()[1] != vx.shape()[0]
            || vw.shape()[2] != vw.shape()[3]
        {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let geom = ConvGeom::new(vx.shape(), vw.shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} channels", self.shape(b), geom.cout),
                ));
            }
        }
        let cols = geom.im2col(vx.data());
        let (rows, npix) = (geom.cin * geom.k * geom.k, geom.ho * geom.wo);
        let mut out = vec![T::zero(); geom.cout * npix];
        matmul_into(vw.data(), &cols, &mut out, geom.cout, rows, npix);
        if let Some(b) = bias {
            for (c, chunk) in out.chunks_mut(npix).enumerate() {
                let bv = self.value(b).data()[c];
                for v in chunk.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(
            "conv2d",
            Tensor::new(vec![geom.cout, geom.ho, geom.wo], out)?,
            &inputs,
            Box::new(move |p| {
                let g = p.grad.data();
                let dx = p.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * npix];
                    matmul_tn_into(p.inputs[1].data(), g, &mut dcols, rows, geom.cout, npix);
                    Tensor::new(vec![geom.cin, geom.h, geom.w], geom.col2im(&dcols)).unwrap()
                });
                let dw = p.needs[1].then(|| {
                    let cols = geom.im2col(p.inputs[0].data());
                    let mut dw = vec![T::zero(); geom.cout * rows];
                    matmul_nt_into(g, &cols, &mut dw, geom.cout, npix, rows);
                    Tensor::new(vec![geom.cout, geom.cin, geom.k, geom.k], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if p.inputs.len() == 3 {
                    grads.push(p.needs[2].then(|| {
                        let sums = g.chunks(npix).map(|c| c.iter().copied().sum()).collect();
                        Tensor::new(vec![geom.cout], sums).unwrap()
                    }));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour upsampling of a `[c, h, w]` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || factor == 0 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("{:?} by factor {factor}", vx.shape()),
            ));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let d = vx.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = d[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.record(
            "upsample_nearest",
            Tensor::new(vec![c, ho, wo], out)?,
            &[x],
            Box::new(move |p| {
                let g = p.grad.data();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let dst = (ch * h + y / factor) * w + xx / factor;
                            dx[dst] = dx[dst] + g[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx).unwrap())]
            }),
        )
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// Covers reshaping, permutation, padding, cropping and cyclic shifts.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() || shape.contains(&0) {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        let src_len = vx.len();
        if let Some(bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= src_len) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", vx.shape()),
            ));
        }
        let d = vx.data();
        let out = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { d[i] })
            .collect();
        let src_shape = vx.shape().to_vec();
        self.record(
            "gather",
            Tensor::new(shape, out)?,
            &[x],
            Box::new(move |p| {
                let mut dx = vec![T::zero(); src_len];
                for (&i, &g) in index.iter().zip(p.grad.data()) {
                    if i != GATHER_ZERO {
                        dx[i] = dx[i] + g;
                    }
                }
                vec![Some(Tensor::new(src_shape.clone(), dx).unwrap())]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        self.record(
            "reshape",
            out,
            &[x],
            Box::new(move |p| vec![Some(p.grad.clone().reshape(src_shape.clone()).unwrap())]),
        )
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (index, out_shape) = permute_index(&shape, perm)?;
        self.gather(x, Arc::new(index), out_shape)
    }

    /// Stacks tensors along axis 0.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| Error::invalid("concat0 of nothing"))?,
            )
            .to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat0", format!("{first:?} with {s:?}")));
            }
            rows += s[0];
            lens.push(self.value(x).len());
            out.extend_from_slice(self.value(x).data());
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x).to_vec()).collect();
        self.record(
            "concat0",
            Tensor::new(shape, out)?,
            xs,
            Box::new(move |p| {
                let mut offset = 0;
                let g = p.grad.data();
                lens.iter()
                    .zip(&shapes)
                    .map(|(&len, s)| {
                        let t = Tensor::new(s.clone(), g[offset..offset + len].to_vec()).unwrap();
                        offset += len;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }
}

/// `(x - mean) / sqrt(var + eps)` per row, with the per-row inverse std.
fn normalize_rows<T: Scalar>(d: &[T], rows: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let nt = T::from_f64(n as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let mut out = vec![T::zero(); rows * n];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &d[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        inv[r] = is;
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

/// Gather indices for an axis permutation.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        index.push(
            counter
                .iter()
                .zip(perm)
                .map(|(&c, &p)| c * strides[p])
                .sum(),
        );
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok((index, out_shape))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (cin, h, wd) = (x[0], x[1], x[2]);
        let (cout, k) = (w[0], w[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd}"),
            ));
        }
        Ok(Self {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        })
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let npix = self.ho * self.wo;
        let mut cols = vec![T::zero(); self.cin * self.k * self.k * npix];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                cols[row * npix + oy * self.wo + ox] =
                                    x[(c * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let npix = self.ho * self.wo;
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                let dst = (c * self.h + y) * self.w + xx;
                                x[dst] = x[dst] + cols[row * npix + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
