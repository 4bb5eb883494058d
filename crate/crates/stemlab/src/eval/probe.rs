//! Instrument-probe harness: a small MLP classifier trained on frozen
//! global embeddings, averaged over seeds with a small LR sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::normal_init;
use crate::ndgrad::{AdamW, AdamWConfig, ParamRef, Parameter, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: u64,
    pub seeds: u64,
    pub lrs: Vec<f32>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 512,
            steps: 200,
            seeds: 3,
            lrs: vec![1e-3, 1e-4],
        }
    }
}

/// Global clip embedding from a patch-embedding sequence `[K x d]` with
/// frequency-major patch order: concatenate the d-dim embeddings across the
/// frequency-patch axis, then average over time patches. Width = d * nf.
pub fn global_embedding(z: &Tensor, nf: usize, nt: usize) -> Result<Vec<f32>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] != nf * nt {
        return Err(Error::Invalid(format!(
            "embedding shape {shape:?} does not match {nf}x{nt} patches"
        )));
    }
    let d = shape[1];
    let data = z.data();
    let mut out = vec![0.0f32; d * nf];
    for f in 0..nf {
        for t in 0..nt {
            let row = &data[(f * nt + t) * d..(f * nt + t + 1) * d];
            for (o, x) in out[f * d..(f + 1) * d].iter_mut().zip(row) {
                *o += x / nt as f32;
            }
        }
    }
    Ok(out)
}

struct Mlp {
    params: Vec<ParamRef>,
}

impl Mlp {
    fn new(d_in: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let w1 = Parameter::new("probe.w1", &[d_in, hidden], normal_init(rng, d_in * hidden, 0.02));
        let b1 = Parameter::new("probe.b1", &[hidden], vec![0.0; hidden]);
        let w2 = Parameter::new(
            "probe.w2",
            &[hidden, classes],
            normal_init(rng, hidden * classes, 0.02),
        );
        let b2 = Parameter::new("probe.b2", &[classes], vec![0.0; classes]);
        Mlp {
            params: vec![w1, b1, w2, b2],
        }
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = x
            .matmul(&self.params[0].leaf())?
            .add(&self.params[1].leaf())?
            .relu();
        h.matmul(&self.params[2].leaf())?.add(&self.params[3].leaf())
    }
}

fn xent(logits: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let n = labels.len();
    let mut mask = vec![0.0f32; n * classes];
    for (i, &c) in labels.iter().enumerate() {
        mask[i * classes + c] = 1.0;
    }
    let logp = logits.softmax().log();
    Ok(logp
        .mul(&Tensor::from_vec(mask, &[n, classes])?)?
        .sum_all()
        .scale(-1.0 / n as f32))
}

fn accuracy(logits: &Tensor, labels: &[usize], classes: usize) -> f64 {
    let data = logits.data();
    let mut hits = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        let row = &data[i * classes..(i + 1) * classes];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == c {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn split_xy(data: &[(Vec<f32>, usize)]) -> Result<(Tensor, Vec<usize>)> {
    let d = data[0].0.len();
    let mut flat = Vec::with_capacity(data.len() * d);
    let mut labels = Vec::with_capacity(data.len());
    for (x, y) in data {
        flat.extend_from_slice(x);
        labels.push(*y);
    }
    Ok((Tensor::from_vec(flat, &[data.len(), d])?, labels))
}

/// Train the probe for each seed and LR; return the best-LR mean test
/// accuracy in percent.
pub fn probe(
    train: &[(Vec<f32>, usize)],
    test: &[(Vec<f32>, usize)],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("empty probe split".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = train.iter().map(|(_, y)| *y).collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid(
            "probe training split has fewer than 2 classes".into(),
        ));
    }
    if train.iter().chain(test).any(|(_, y)| *y >= classes) {
        return Err(Error::Invalid("probe label out of range".into()));
    }
    let d_in = train[0].0.len();
    let (x_train, y_train) = split_xy(train)?;
    let (x_test, y_test) = split_xy(test)?;

    let mut best = 0.0f64;
    for &lr in &cfg.lrs {
        let mut acc_sum = 0.0f64;
        for seed in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = Mlp::new(d_in, cfg.hidden, classes, &mut rng);
            let mut opt = AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            });
            for _ in 0..cfg.steps {
                let loss = xent(&mlp.logits(&x_train)?, &y_train, classes)?;
                if !loss.item().is_finite() {
                    return Err(Error::Numeric("non-finite probe loss".into()));
                }
                for p in &mlp.params {
                    p.zero_grad();
                }
                loss.backward()?;
                opt.step(&mlp.params, lr)?;
            }
            acc_sum += accuracy(&mlp.logits(&x_test)?, &y_test, classes);
        }
        best = best.max(100.0 * acc_sum / cfg.seeds as f64);
    }
    Ok(best)
}

/// Random label permutation for the chance baseline.
pub fn shuffle_labels(data: &[(Vec<f32>, usize)], seed: u64) -> Vec<(Vec<f32>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    data.iter()
        .zip(labels)
        .map(|((x, _), y)| (x.clone(), y))
        .collect()
}
