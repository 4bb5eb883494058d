//! Training objectives: symmetrized InfoNCE with a trainable temperature,
//! and the normalized prediction MSE with stop-gradient targets.

use crate::error::{Error, Result};
use crate::ndgrad::{ParamRef, Parameter, Tensor};

pub const TAU_MIN: f32 = 0.01;
pub const TAU_MAX: f32 = 1.0;
pub const TAU_INIT: f32 = 0.1;
const NEG_INF: f32 = -1e9;

/// Trainable temperature, stored as log(tau) so the optimizer works in an
/// unconstrained space; clamped to [TAU_MIN, TAU_MAX] after every step.
pub struct Temperature {
    param: ParamRef,
}

impl Temperature {
    pub fn new(init_tau: f32) -> Self {
        Temperature {
            param: Parameter::new("temperature.log_tau", &[1], vec![init_tau.ln()]),
        }
    }

    pub fn param(&self) -> &ParamRef {
        &self.param
    }

    pub fn leaf(&self) -> Tensor {
        self.param.leaf()
    }

    pub fn tau(&self) -> f32 {
        self.param.value()[0].exp()
    }

    pub fn set_tau(&self, tau: f32) {
        self.param.set_value(vec![tau.ln()]);
    }

    /// Project tau back into its range; call after each optimizer step.
    pub fn clamp(&self) {
        let lt = self.param.value()[0];
        let clamped = lt.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        if clamped != lt {
            self.param.set_value(vec![clamped]);
        }
    }
}

/// Which embeddings serve as negatives for each anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSet {
    /// All 2N pooled context+target embeddings; each anchor's denominator
    /// runs over the other 2N-1 (the default reading).
    Joint,
    /// Context anchors score against targets only and vice versa (ablation).
    CrossOnly,
}

/// Per-anchor InfoNCE rows: logsumexp over each row minus the positive
/// logit at `pos_col(row)`. Rows already carry any exclusion mask.
fn nce_rows(logits: &Tensor, pos_col: impl Fn(usize) -> usize) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    let (r, c) = (shape[0], shape[1]);
    let vals = logits.data().to_vec();
    // stabilizer: detached row maxima (constant w.r.t. the graph)
    let mut max_full = vec![0.0f32; r * c];
    let mut max_vec = vec![0.0f32; r];
    for i in 0..r {
        let m = vals[i * c..(i + 1) * c]
            .iter()
            .fold(f32::MIN, |a, &b| a.max(b));
        max_vec[i] = m;
        max_full[i * c..(i + 1) * c].fill(m);
    }
    let shifted = logits.sub(&Tensor::from_vec(max_full, &[r, c])?)?;
    let lse = shifted
        .exp()
        .sum_axis(1)?
        .log()
        .add(&Tensor::from_vec(max_vec, &[r])?)?;
    let mut pmask = vec![0.0f32; r * c];
    for i in 0..r {
        pmask[i * c + pos_col(i)] = 1.0;
    }
    let pos = logits.mul(&Tensor::from_vec(pmask, &[r, c])?)?.sum_axis(1)?;
    lse.sub(&pos)
}

/// Symmetrized contrastive loss over N aligned (context, target) rows.
///
/// Cosine similarities divided by tau = exp(log_tau); each of the 2N ordered
/// anchor-positive pairs contributes -log softmax(positive); the result is
/// their mean and is always >= 0 because the positive sits in its own
/// denominator.
pub fn contrastive_loss(
    ctx: &Tensor,
    tgt: &Tensor,
    log_tau: &Tensor,
    negatives: NegativeSet,
) -> Result<Tensor> {
    let n = ctx.shape()[0];
    if tgt.shape() != ctx.shape() {
        return Err(Error::Invalid(format!(
            "contrastive batch shape mismatch: {:?} vs {:?}",
            ctx.shape(),
            tgt.shape()
        )));
    }
    if n < 2 {
        return Err(Error::Invalid(format!(
            "contrastive batch needs N >= 2 pairs, got {n}"
        )));
    }
    for (name, t) in [("context", ctx), ("target", tgt)] {
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite {name} embeddings in contrastive batch"
            )));
        }
    }
    let inv_tau = log_tau.scale(-1.0).exp();
    match negatives {
        NegativeSet::Joint => {
            let e = Tensor::concat(&[ctx.clone(), tgt.clone()], 0)?;
            let u = e.l2_normalize_rows();
            let sim = u.matmul(&u.transpose()?)?;
            let logits = sim.mul(&inv_tau)?;
            let b = 2 * n;
            let mut diag = vec![0.0f32; b * b];
            for i in 0..b {
                diag[i * b + i] = NEG_INF;
            }
            let masked = logits.add(&Tensor::from_vec(diag, &[b, b])?)?;
            Ok(nce_rows(&masked, |i| (i + n) % b)?.mean_all())
        }
        NegativeSet::CrossOnly => {
            let uc = ctx.l2_normalize_rows();
            let ut = tgt.l2_normalize_rows();
            let l_ct = uc.matmul(&ut.transpose()?)?.mul(&inv_tau)?;
            let l_tc = l_ct.transpose()?;
            let both = Tensor::concat(&[nce_rows(&l_ct, |i| i)?, nce_rows(&l_tc, |i| i)?], 0)?;
            Ok(both.mean_all())
        }
    }
}

/// Sum over rows of the squared distance between row-normalized predictions
/// and row-normalized targets. Gradients flow into `pred` only; the target
/// branch is detached. Result lies in [0, 4K].
pub fn jepa_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::Invalid(format!(
            "prediction/target shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let cols = pred.shape()[1];
    for (name, t) in [("prediction", pred), ("target", target)] {
        for (k, row) in t.data().chunks(cols).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm < 1e-12 {
                eprintln!("warning: {name} row {k} has near-zero norm; normalized with epsilon floor");
            }
        }
    }
    pred.l2_normalize_rows()
        .squared_error(&target.detach().l2_normalize_rows())
}

// ---- independent f64 references for gradient checking and selfcheck ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

pub fn reference_contrastive(
    ctx: &[Vec<f64>],
    tgt: &[Vec<f64>],
    log_tau: f64,
    negatives: NegativeSet,
) -> f64 {
    let n = ctx.len();
    let inv_tau = (-log_tau).exp();
    let lse = |row: &[f64]| -> f64 {
        let m = row.iter().fold(f64::MIN, |a, &b| a.max(b));
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    match negatives {
        NegativeSet::Joint => {
            let all: Vec<Vec<f64>> = ctx.iter().chain(tgt).map(|v| unit(v)).collect();
            let b = 2 * n;
            let mut total = 0.0;
            for i in 0..b {
                let row: Vec<f64> = (0..b)
                    .filter(|&j| j != i)
                    .map(|j| dot(&all[i], &all[j]) * inv_tau)
                    .collect();
                let pos = dot(&all[i], &all[(i + n) % b]) * inv_tau;
                total += lse(&row) - pos;
            }
            total / b as f64
        }
        NegativeSet::CrossOnly => {
            let uc: Vec<Vec<f64>> = ctx.iter().map(|v| unit(v)).collect();
            let ut: Vec<Vec<f64>> = tgt.iter().map(|v| unit(v)).collect();
            let mut total = 0.0;
            for i in 0..n {
                let row_ct: Vec<f64> = ut.iter().map(|t| dot(&uc[i], t) * inv_tau).collect();
                let row_tc: Vec<f64> = uc.iter().map(|c| dot(&ut[i], c) * inv_tau).collect();
                total += lse(&row_ct) - row_ct[i] + lse(&row_tc) - row_tc[i];
            }
            total / (2 * n) as f64
        }
    }
}

pub fn reference_jepa(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let (p, t) = (unit(p), unit(t));
            p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum()
}
