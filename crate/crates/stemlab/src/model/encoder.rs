//! Patch-sequence transformer encoder.
//!
//! Pre-norm blocks (multi-head self-attention + GELU MLP), a learned patch
//! projection, a fixed 2-D sinusoidal positional table over the
//! (freq, time) patch grid, and a final layer norm. No dropout: forward is
//! deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::PatchSequence;
use crate::error::{Error, Result};
use crate::ndgrad::{ParamRef, ParamSet, Parameter, Tensor};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_dim: usize,
    pub max_patches: usize,
}

impl EncoderConfig {
    /// Paper-scale ViT-Base geometry.
    pub fn paper() -> Self {
        EncoderConfig {
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            patch_dim: 256,
            max_patches: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 4 for the 2-D positional table",
                self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Gaussian init via Box-Muller, driven by the shared seeded generator.
pub fn normal_init(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (z as f32) * std
        })
        .collect()
}

struct Linear {
    w: ParamRef,
    b: ParamRef,
}

impl Linear {
    fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = Parameter::new(
            format!("{name}.w"),
            &[d_in, d_out],
            normal_init(rng, d_in * d_out, 0.02),
        );
        let b = Parameter::new(format!("{name}.b"), &[d_out], vec![0.0; d_out]);
        set.register(w.clone())?;
        set.register(b.clone())?;
        Ok(Linear { w, b })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.leaf())?.add(&self.b.leaf())
    }
}

struct LayerNorm {
    g: ParamRef,
    b: ParamRef,
}

impl LayerNorm {
    fn new(set: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        let g = Parameter::new(format!("{name}.g"), &[d], vec![1.0; d]);
        let b = Parameter::new(format!("{name}.b"), &[d], vec![0.0; d]);
        set.register(g.clone())?;
        set.register(b.clone())?;
        Ok(LayerNorm { g, b })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(LN_EPS).mul(&self.g.leaf())?.add(&self.b.leaf())
    }
}

struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    params: ParamSet,
    patch_proj: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Encoder {
    /// Fresh encoder with parameter names under `prefix` (e.g. "encoder").
    pub fn new(cfg: EncoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let d = cfg.embed_dim;
        let patch_proj = Linear::new(
            &mut params,
            rng,
            &format!("{prefix}.patch_proj"),
            cfg.patch_dim,
            d,
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("{prefix}.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut params, &format!("{p}.ln1"), d)?,
                wq: Linear::new(&mut params, rng, &format!("{p}.attn.q"), d, d)?,
                wk: Linear::new(&mut params, rng, &format!("{p}.attn.k"), d, d)?,
                wv: Linear::new(&mut params, rng, &format!("{p}.attn.v"), d, d)?,
                wo: Linear::new(&mut params, rng, &format!("{p}.attn.o"), d, d)?,
                ln2: LayerNorm::new(&mut params, &format!("{p}.ln2"), d)?,
                mlp1: Linear::new(&mut params, rng, &format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio)?,
                mlp2: Linear::new(&mut params, rng, &format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d)?,
            });
        }
        let ln_f = LayerNorm::new(&mut params, &format!("{prefix}.ln_f"), d)?;
        Ok(Encoder {
            cfg,
            params,
            patch_proj,
            blocks,
            ln_f,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Encode a patch sequence into `[K x d]` embeddings.
    pub fn encode(&self, seq: &PatchSequence) -> Result<Tensor> {
        let k = seq.k();
        if k > self.cfg.max_patches {
            return Err(Error::Invalid(format!(
                "sequence of {k} patches exceeds max_patches {}",
                self.cfg.max_patches
            )));
        }
        let patch_w = seq.patches.len() / k;
        if patch_w != self.cfg.patch_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![k, patch_w],
                rhs: vec![k, self.cfg.patch_dim],
            });
        }
        let x = Tensor::from_vec(seq.patches.clone(), &[k, patch_w])?;
        self.encode_tensor(&x, seq.n_freq_patches, seq.n_time_patches)
    }

    /// Encoder body on an already-built `[K x patch_dim]` tensor.
    pub fn encode_tensor(&self, x: &Tensor, nf: usize, nt: usize) -> Result<Tensor> {
        let d = self.cfg.embed_dim;
        let k = nf * nt;
        let pos: Vec<f32> = pos_embed_2d(nf, nt, d).iter().map(|&v| v as f32).collect();
        let pos = Tensor::from_vec(pos, &[k, d])?;
        let mut h = self.patch_proj.forward(x)?.add(&pos)?;
        for blk in &self.blocks {
            let attn_in = blk.ln1.forward(&h)?;
            let attn = self.attention(blk, &attn_in, k)?;
            h = h.add(&attn)?;
            let mlp_in = blk.ln2.forward(&h)?;
            let mlp = blk.mlp2.forward(&blk.mlp1.forward(&mlp_in)?.gelu())?;
            h = h.add(&mlp)?;
        }
        self.ln_f.forward(&h)
    }

    fn attention(&self, blk: &Block, x: &Tensor, _k: usize) -> Result<Tensor> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let q = blk.wq.forward(x)?;
        let kt = blk.wk.forward(x)?;
        let v = blk.wv.forward(x)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = kt.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            outs.push(scores.softmax().matmul(&vh)?);
        }
        blk.wo.forward(&Tensor::concat(&outs, 1)?)
    }
}

/// Mean over the patch axis: `[K x d] -> [d]`.
pub fn pool(z: &Tensor) -> Result<Tensor> {
    z.mean_axis(0)
}

/// Fixed 2-D sinusoidal positional table over a (freq, time) patch grid,
/// frequency-major (`k = f * nt + t`). The first half of the channel axis
/// encodes the time index, the second the frequency index.
pub fn pos_embed_2d(nf: usize, nt: usize, d: usize) -> Vec<f64> {
    assert_eq!(d % 4, 0);
    let half = d / 2;
    let quarter = d / 4;
    let mut table = vec![0.0f64; nf * nt * d];
    for f in 0..nf {
        for t in 0..nt {
            let row = &mut table[(f * nt + t) * d..(f * nt + t + 1) * d];
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[2 * i] = (t as f64 * omega).sin();
                row[2 * i + 1] = (t as f64 * omega).cos();
                row[half + 2 * i] = (f as f64 * omega).sin();
                row[half + 2 * i + 1] = (f as f64 * omega).cos();
            }
        }
    }
    table
}
