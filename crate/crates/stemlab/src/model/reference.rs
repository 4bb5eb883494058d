//! Independent f64 forward evaluation of the encoder and predictor.
//!
//! Used as the oracle side of gradient checks and hand-instance tests. Takes
//! parameter values by name so it shares no state with the graph path.

use std::collections::HashMap;

use super::encoder::{pos_embed_2d, EncoderConfig, LN_EPS};
use super::predictor::PredictorConfig;
use crate::ndgrad::reference as r;

pub type ParamMap = HashMap<String, Vec<f64>>;

fn linear(p: &ParamMap, name: &str, x: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let y = r::matmul(x, &p[&format!("{name}.w")], m, k, n);
    r::add(&y, &p[&format!("{name}.b")])
}

fn layer_norm_affine(p: &ParamMap, name: &str, x: &[f64], cols: usize) -> Vec<f64> {
    let y = r::layer_norm_rows(x, cols, LN_EPS as f64);
    r::add(
        &r::mul(&y, &p[&format!("{name}.g")]),
        &p[&format!("{name}.b")],
    )
}

/// Encoder forward: `[K x patch_dim]` -> `[K x d]`.
pub fn encoder_forward(
    cfg: &EncoderConfig,
    prefix: &str,
    p: &ParamMap,
    patches: &[f64],
    nf: usize,
    nt: usize,
) -> Vec<f64> {
    let k = nf * nt;
    let d = cfg.embed_dim;
    let mut h = linear(
        p,
        &format!("{prefix}.patch_proj"),
        patches,
        k,
        cfg.patch_dim,
        d,
    );
    h = r::add(&h, &pos_embed_2d(nf, nt, d));
    for b in 0..cfg.depth {
        let blk = format!("{prefix}.block{b}");
        let x1 = layer_norm_affine(p, &format!("{blk}.ln1"), &h, d);
        let attn = attention(cfg, &blk, p, &x1, k);
        h = r::add(&h, &attn);
        let x2 = layer_norm_affine(p, &format!("{blk}.ln2"), &h, d);
        let f1 = r::gelu(&linear(p, &format!("{blk}.mlp.fc1"), &x2, k, d, d * cfg.mlp_ratio));
        let f2 = linear(p, &format!("{blk}.mlp.fc2"), &f1, k, d * cfg.mlp_ratio, d);
        h = r::add(&h, &f2);
    }
    layer_norm_affine(p, &format!("{prefix}.ln_f"), &h, d)
}

fn attention(cfg: &EncoderConfig, blk: &str, p: &ParamMap, x: &[f64], k: usize) -> Vec<f64> {
    let d = cfg.embed_dim;
    let dh = d / cfg.heads;
    let q = linear(p, &format!("{blk}.attn.q"), x, k, d, d);
    let kk = linear(p, &format!("{blk}.attn.k"), x, k, d, d);
    let v = linear(p, &format!("{blk}.attn.v"), x, k, d, d);
    let slice = |m: &[f64], h: usize| -> Vec<f64> {
        let mut out = vec![0.0; k * dh];
        for i in 0..k {
            out[i * dh..(i + 1) * dh].copy_from_slice(&m[i * d + h * dh..i * d + (h + 1) * dh]);
        }
        out
    };
    let mut ctx = vec![0.0; k * d];
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (slice(&q, h), slice(&kk, h), slice(&v, h));
        let kht = r::transpose(&kh, k, dh);
        let scores: Vec<f64> = r::matmul(&qh, &kht, k, dh, k)
            .iter()
            .map(|s| s / (dh as f64).sqrt())
            .collect();
        let probs = r::softmax_rows(&scores, k);
        let ch = r::matmul(&probs, &vh, k, k, dh);
        for i in 0..k {
            ctx[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&ch[i * dh..(i + 1) * dh]);
        }
    }
    linear(p, &format!("{blk}.attn.o"), &ctx, k, d, d)
}

/// Predictor forward: `[K x d]` with conditioning `[p]` -> `[K x d]`.
pub fn predictor_forward(
    cfg: &PredictorConfig,
    prefix: &str,
    p: &ParamMap,
    z: &[f64],
    cond: &[f64],
    k: usize,
) -> Vec<f64> {
    let (l, m, d, pd) = (cfg.layers, cfg.hidden, cfg.embed_dim, cfg.cond_dim);
    let mut h = z.to_vec();
    let mut width = d;
    for i in 0..l - 1 {
        h = linear(p, &format!("{prefix}.layer{i}"), &h, k, width, m);
        let gamma = r::add(
            &r::matmul(cond, &p[&format!("{prefix}.film{i}.gamma.w")], 1, pd, m),
            &p[&format!("{prefix}.film{i}.gamma.b")],
        );
        let beta = r::add(
            &r::matmul(cond, &p[&format!("{prefix}.film{i}.beta.w")], 1, pd, m),
            &p[&format!("{prefix}.film{i}.beta.b")],
        );
        h = r::relu(&r::add(&r::mul(&h, &gamma), &beta));
        width = m;
    }
    linear(p, &format!("{prefix}.layer{}", l - 1), &h, k, width, d)
}

/// Collect a parameter set's values as f64 by name.
pub fn param_map(set: &crate::ndgrad::ParamSet) -> ParamMap {
    set.iter()
        .map(|p| {
            (
                p.name().to_string(),
                p.value().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}
