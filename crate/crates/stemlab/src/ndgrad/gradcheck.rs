//! Finite-difference gradient checking harness.
//!
//! Each case pairs an analytic path (graph of [`Tensor`] ops, f32) with an
//! independent f64 evaluation of the same function; central differences on
//! the f64 side give the oracle gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::param::Parameter;
use super::reference;
use super::tensor::Tensor;
use crate::error::Result;

// Small enough that ReLU-kink crossings (|pre-activation| < step) are
// vanishingly rare; the oracle side is f64 so subtractive noise stays ~1e-11.
pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;

/// Like [`check_fn`] but over an existing set of named parameters (a model).
///
/// Each seed randomizes the parameter values, runs the analytic graph, and
/// compares against central differences of `numeric`, which receives the
/// current values keyed by parameter name.
pub fn check_params(
    name: &str,
    params: &[super::param::ParamRef],
    rng: &mut ChaCha8Rng,
    seeds: usize,
    init_scale: f32,
    analytic: impl Fn() -> Result<Tensor>,
    numeric: impl Fn(&std::collections::HashMap<String, Vec<f64>>) -> f64,
) -> Result<GradCheckReport> {
    let mut max_err = 0.0f64;
    for _ in 0..seeds {
        for p in params {
            let data: Vec<f32> = (0..p.numel())
                .map(|_| rng.gen_range(-init_scale..init_scale))
                .collect();
            p.set_value(data);
            p.zero_grad();
        }
        let loss = analytic()?;
        loss.backward()?;

        let mut vals: std::collections::HashMap<String, Vec<f64>> = params
            .iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    p.value().iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();
        for p in params {
            let x = vals[p.name()].clone();
            let num = reference::finite_diff(&x, FD_STEP, |xs| {
                vals.insert(p.name().to_string(), xs.to_vec());
                let y = numeric(&vals);
                vals.insert(p.name().to_string(), x.clone());
                y
            });
            for (a, n) in p.grad().iter().zip(&num) {
                let err = (*a as f64 - n).abs() / n.abs().max(1.0);
                if err > max_err {
                    max_err = err;
                }
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        seeds,
        max_err,
        pass: max_err < REL_TOL,
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub seeds: usize,
    pub max_err: f64,
    pub pass: bool,
}

/// Check one function of several tensor inputs over `seeds` random draws.
///
/// `analytic` builds a scalar loss from gradient-carrying leaves;
/// `numeric` evaluates the same function in f64 on flat input slices.
/// The comparison is `|a - n| <= REL_TOL * max(1, |n|)` per coordinate.
pub fn check_fn(
    name: &str,
    shapes: &[&[usize]],
    rng: &mut ChaCha8Rng,
    seeds: usize,
    analytic: impl Fn(&[Tensor]) -> Result<Tensor>,
    numeric: impl Fn(&[Vec<f64>]) -> f64,
) -> Result<GradCheckReport> {
    let mut max_err = 0.0f64;
    for _ in 0..seeds {
        let params: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                Parameter::new(format!("arg{i}"), s, data)
            })
            .collect();
        let leaves: Vec<Tensor> = params.iter().map(|p| p.leaf()).collect();
        let loss = analytic(&leaves)?;
        loss.backward()?;

        let x64: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.value().iter().map(|&v| v as f64).collect())
            .collect();
        for (pi, p) in params.iter().enumerate() {
            let base = x64.clone();
            let num = reference::finite_diff(&x64[pi], FD_STEP, |xs| {
                let mut args = base.clone();
                args[pi] = xs.to_vec();
                numeric(&args)
            });
            for (a, n) in p.grad().iter().zip(&num) {
                let err = (*a as f64 - n).abs() / n.abs().max(1.0);
                if err > max_err {
                    max_err = err;
                }
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        seeds,
        max_err,
        pass: max_err < REL_TOL,
    })
}
