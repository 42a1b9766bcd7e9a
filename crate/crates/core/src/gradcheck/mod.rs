//! Finite-difference gradient verification with the fourth-order
//! five-point central stencil.

mod suite;

pub use suite::{run_one, run_suite, run_target, targets, Scope, TargetResult, THRESHOLD};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{FaultInjection, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Applied to the analytic pass only.
    pub fault: Option<FaultInjection>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat coordinate, analytic, numeric)` at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a − b| / max(|a|, |b|, 1e-6)`. The floor keeps rounding noise on
/// structurally zero gradients from reading as a large relative error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `backward()` of `f` against
/// `(8(f(θ+εe) − f(θ−εe)) − (f(θ+2εe) − f(θ−2εe))) / 12ε` per coordinate.
/// `f` records its computation on the given tape, reading parameters from
/// the supplied leaves, and returns a scalar.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_step(opts)?;
    let eval = |values: &[Tensor<f64>],
                fault: Option<FaultInjection>|
     -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::with_fault(fault);
        let leaves = values
            .iter()
            .map(|v| tape.leaf(v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &leaves)?;
        if tape.value(out).len() != 1 {
            return Err(Error::shape(
                "finite_difference_check",
                "function is not scalar",
            ));
        }
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(params, opts.fault.clone())?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros_like(p))
        })
        .collect();
    drop(tape);
    compare(params, &analytic, opts, |work| {
        let (tape, _, out) = eval(work, None)?;
        Ok(tape.value(out).item())
    })
}

/// As [`finite_difference_check`], perturbing every tensor of a parameter
/// store; `f` runs one forward pass in the given session.
pub fn check_session<F>(
    f: F,
    params: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    check_step(opts)?;
    let mut s = Session::with_fault(params, true, opts.fault.clone());
    let out = f(&mut s)?;
    if s.tape.value(out).len() != 1 {
        return Err(Error::shape("check_session", "function is not scalar"));
    }
    let mut grads = s.tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = s
        .param_grads(&mut grads)
        .into_iter()
        .zip(params.values())
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();
    drop(s);
    let names = params.names().to_vec();
    compare(params.values(), &analytic, opts, |work| {
        let store = ParamStore::from_parts(names.clone(), work.to_vec())?;
        let mut s = Session::new(&store, false);
        let out = f(&mut s)?;
        Ok(s.tape.value(out).item())
    })
}

fn check_step(opts: &GradCheckOptions) -> Result<()> {
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    Ok(())
}

fn compare(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: &GradCheckOptions,
    value_at: impl Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    if let Some(limit) = opts.max_coords {
        if limit < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|k| coords[k]).collect();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let finite = |v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite_difference_check".into(),
            })
        }
    };
    for (i, j) in coords {
        let base = work[i].data()[j];
        let mut at = |step: f64| -> Result<f64> {
            work[i].data_mut()[j] = base + step;
            finite(value_at(&work)?)
        };
        let (p1, m1) = (at(opts.eps)?, at(-opts.eps)?);
        let (p2, m2) = (at(2.0 * opts.eps)?, at(-2.0 * opts.eps)?);
        work[i].data_mut()[j] = base;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.eps);
        let a = analytic[i].data()[j];
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}
