//! Conditioned per-patch MLP predictor.
//!
//! Each hidden transition is linear -> feature-wise scale/shift from the
//! conditioning vector -> ReLU; the final layer is plain linear so outputs
//! span the full embedding space. The scale map starts at exactly 1 and the
//! shift at exactly 0, so a fresh predictor ignores its conditioning.

use rand_chacha::ChaCha8Rng;

use super::encoder::normal_init;
use crate::error::{Error, Result};
use crate::ndgrad::{ParamRef, ParamSet, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
}

impl PredictorConfig {
    pub fn paper(embed_dim: usize, cond_dim: usize) -> Self {
        PredictorConfig {
            layers: 6,
            hidden: 1024,
            embed_dim,
            cond_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!(
                "predictor needs at least 2 layers, got {}",
                self.layers
            )));
        }
        Ok(())
    }
}

struct FilmLayer {
    gamma_w: ParamRef,
    gamma_b: ParamRef,
    beta_w: ParamRef,
    beta_b: ParamRef,
}

pub struct FilmPredictor {
    pub cfg: PredictorConfig,
    params: ParamSet,
    weights: Vec<ParamRef>,
    biases: Vec<ParamRef>,
    film: Vec<FilmLayer>,
}

impl FilmPredictor {
    pub fn new(cfg: PredictorConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Result<FilmPredictor> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let (l, m, d, p) = (cfg.layers, cfg.hidden, cfg.embed_dim, cfg.cond_dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..l {
            let d_in = if i == 0 { d } else { m };
            let d_out = if i == l - 1 { d } else { m };
            let w = Parameter::new(
                format!("{prefix}.layer{i}.w"),
                &[d_in, d_out],
                normal_init(rng, d_in * d_out, 0.02),
            );
            let b = Parameter::new(format!("{prefix}.layer{i}.b"), &[d_out], vec![0.0; d_out]);
            params.register(w.clone())?;
            params.register(b.clone())?;
            weights.push(w);
            biases.push(b);
        }
        // identity start: gamma(c) = 1, beta(c) = 0 for every c
        let mut film = Vec::new();
        for i in 0..l - 1 {
            let gamma_w = Parameter::new(
                format!("{prefix}.film{i}.gamma.w"),
                &[p, m],
                vec![0.0; p * m],
            );
            let gamma_b = Parameter::new(format!("{prefix}.film{i}.gamma.b"), &[m], vec![1.0; m]);
            let beta_w =
                Parameter::new(format!("{prefix}.film{i}.beta.w"), &[p, m], vec![0.0; p * m]);
            let beta_b = Parameter::new(format!("{prefix}.film{i}.beta.b"), &[m], vec![0.0; m]);
            params.register(gamma_w.clone())?;
            params.register(gamma_b.clone())?;
            params.register(beta_w.clone())?;
            params.register(beta_b.clone())?;
            film.push(FilmLayer {
                gamma_w,
                gamma_b,
                beta_w,
                beta_b,
            });
        }
        Ok(FilmPredictor {
            cfg,
            params,
            weights,
            biases,
            film,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Predict target embeddings from `z` `[K x d]` conditioned on `c` `[p]`.
    /// Applied independently per patch row.
    pub fn predict(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.embed_dim {
            return Err(Error::Shape {
                op: "predict",
                lhs: z.shape().to_vec(),
                rhs: vec![0, self.cfg.embed_dim],
            });
        }
        if cond.numel() != self.cfg.cond_dim {
            return Err(Error::Shape {
                op: "predict.cond",
                lhs: cond.shape().to_vec(),
                rhs: vec![self.cfg.cond_dim],
            });
        }
        let c = cond.reshape(&[1, self.cfg.cond_dim])?;
        let m = self.cfg.hidden;
        let mut h = z.clone();
        for i in 0..self.cfg.layers - 1 {
            h = h.matmul(&self.weights[i].leaf())?.add(&self.biases[i].leaf())?;
            let f = &self.film[i];
            let gamma = c
                .matmul(&f.gamma_w.leaf())?
                .add(&f.gamma_b.leaf())?
                .reshape(&[m])?;
            let beta = c
                .matmul(&f.beta_w.leaf())?
                .add(&f.beta_b.leaf())?
                .reshape(&[m])?;
            h = h.mul(&gamma)?.add(&beta)?.relu();
        }
        let last = self.cfg.layers - 1;
        h.matmul(&self.weights[last].leaf())?
            .add(&self.biases[last].leaf())
    }
}
