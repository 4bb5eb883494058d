//! Self-contained verification suites: finite-difference gradient checks for
//! every differentiable operation and both losses end-to-end through tiny
//! models, plus scripted-value and statistical property checks ("selfcheck").
//!
//! Both suites return one [`CheckResult`] per property so callers (the CLI
//! and the acceptance tests) can print a line per check and fail honestly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{PatchSequence, PATCH_SIZE};
use crate::error::Result;
use crate::eval::{self, reference as evalref, Distance, IndexEntry, Query, RetrievalIndex};
use crate::model::{
    pool, reference as modref, EmaSchedule, Encoder, EncoderConfig, FilmPredictor, PredictorConfig,
};
use crate::ndgrad::{
    gradcheck, reference as r64, LrSchedule, ParamRef, Parameter, Tensor,
};
use crate::training::{
    contrastive_loss, jepa_loss,
    loss::{reference_contrastive, reference_jepa, Temperature, TAU_MAX, TAU_MIN},
    NegativeSet,
};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

fn report_to_result(r: gradcheck::GradCheckReport) -> CheckResult {
    CheckResult {
        pass: r.pass,
        detail: format!("max rel err {:.3e} over {} seeds", r.max_err, r.seeds),
        name: r.name,
    }
}

// ---- Gradient-check suite ----

/// Finite-difference checks for each differentiable op, the FiLM predictor,
/// the transformer encoder, and both losses end-to-end through tiny models.
pub fn run_gradcheck_suite(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out = Vec::new();
    out.extend(op_gradchecks(&mut rng, seeds)?);
    out.push(stop_gradient_property()?);
    out.push(film_predictor_gradcheck(&mut rng, seeds)?);
    out.push(encoder_gradcheck(&mut rng, seeds)?);
    out.push(report_to_result(contrastive_gradcheck(
        &mut rng,
        seeds,
        NegativeSet::Joint,
    )?));
    out.push(report_to_result(contrastive_gradcheck(
        &mut rng,
        seeds,
        NegativeSet::CrossOnly,
    )?));
    out.push(jepa_gradcheck(&mut rng, seeds)?);
    out.push(contrastive_end_to_end_gradcheck(&mut rng, seeds)?);
    out.push(jepa_end_to_end_gradcheck(&mut rng, seeds)?);
    Ok(out)
}

fn op_gradchecks(rng: &mut ChaCha8Rng, seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut case = |r: Result<gradcheck::GradCheckReport>| -> Result<()> {
        out.push(report_to_result(r?));
        Ok(())
    };
    let m34: &[usize] = &[3, 4];
    let v4: &[usize] = &[4];

    case(gradcheck::check_fn(
        "op.add(broadcast)",
        &[m34, v4],
        rng,
        seeds,
        |t| Ok(t[0].add(&t[1])?.gelu().mean_all()),
        |x| mean(&r64::gelu(&r64::add(&x[0], &x[1]))),
    ))?;
    case(gradcheck::check_fn(
        "op.sub(broadcast)",
        &[m34, v4],
        rng,
        seeds,
        |t| Ok(t[0].sub(&t[1])?.gelu().mean_all()),
        |x| mean(&r64::gelu(&r64::sub(&x[0], &x[1]))),
    ))?;
    case(gradcheck::check_fn(
        "op.mul(broadcast)",
        &[m34, v4],
        rng,
        seeds,
        |t| Ok(t[0].mul(&t[1])?.gelu().mean_all()),
        |x| mean(&r64::gelu(&r64::mul(&x[0], &x[1]))),
    ))?;
    case(gradcheck::check_fn(
        "op.scale",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].scale(1.7).gelu().mean_all()),
        |x| mean(&r64::gelu(&x[0].iter().map(|v| v * 1.7).collect::<Vec<_>>())),
    ))?;
    case(gradcheck::check_fn(
        "op.matmul",
        &[m34, &[4, 5]],
        rng,
        seeds,
        |t| Ok(t[0].matmul(&t[1])?.gelu().mean_all()),
        |x| mean(&r64::gelu(&r64::matmul(&x[0], &x[1], 3, 4, 5))),
    ))?;
    case(gradcheck::check_fn(
        "op.relu",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].relu().mul(&t[0])?.mean_all()),
        |x| mean(&r64::mul(&r64::relu(&x[0]), &x[0])),
    ))?;
    case(gradcheck::check_fn(
        "op.gelu",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].gelu().mean_all()),
        |x| mean(&r64::gelu(&x[0])),
    ))?;
    case(gradcheck::check_fn(
        "op.exp",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].exp().mean_all()),
        |x| mean(&r64::exp(&x[0])),
    ))?;
    // log through exp(x)+1 keeps the argument away from the clamp floor.
    case(gradcheck::check_fn(
        "op.log",
        &[m34],
        rng,
        seeds,
        |t| {
            let one = Tensor::full(t[0].shape(), 1.0);
            Ok(t[0].exp().add(&one)?.log().mean_all())
        },
        |x| {
            mean(&r64::log(
                &r64::exp(&x[0]).iter().map(|v| v + 1.0).collect::<Vec<_>>(),
            ))
        },
    ))?;
    case(gradcheck::check_fn(
        "op.softmax",
        &[&[3, 5], &[3, 5]],
        rng,
        seeds,
        |t| Ok(t[0].softmax().mul(&t[1])?.mean_all()),
        |x| mean(&r64::mul(&r64::softmax_rows(&x[0], 5), &x[1])),
    ))?;
    case(gradcheck::check_fn(
        "op.layer_norm",
        &[&[4, 6], &[4, 6]],
        rng,
        seeds,
        |t| Ok(t[0].layer_norm(1e-5).mul(&t[1])?.mean_all()),
        |x| mean(&r64::mul(&r64::layer_norm_rows(&x[0], 6, 1e-5), &x[1])),
    ))?;
    case(gradcheck::check_fn(
        "op.l2_normalize_rows",
        &[m34, m34],
        rng,
        seeds,
        |t| Ok(t[0].l2_normalize_rows().mul(&t[1])?.mean_all()),
        |x| mean(&r64::mul(&r64::l2_normalize_rows(&x[0], 4), &x[1])),
    ))?;
    case(gradcheck::check_fn(
        "op.mean_axis0",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].mean_axis(0)?.gelu().mean_all()),
        |x| mean(&r64::gelu(&r64::mean_axis0(&x[0], 3, 4))),
    ))?;
    case(gradcheck::check_fn(
        "op.sum_axis1",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].sum_axis(1)?.gelu().mean_all()),
        |x| {
            let rows: Vec<f64> = (0..3).map(|r| x[0][r * 4..(r + 1) * 4].iter().sum()).collect();
            mean(&r64::gelu(&rows))
        },
    ))?;
    case(gradcheck::check_fn(
        "op.sum_all",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].mul(&t[0])?.sum_all()),
        |x| x[0].iter().map(|v| v * v).sum(),
    ))?;
    case(gradcheck::check_fn(
        "op.mean_all",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].mul(&t[0])?.mean_all()),
        |x| mean(&x[0].iter().map(|v| v * v).collect::<Vec<_>>()),
    ))?;
    case(gradcheck::check_fn(
        "op.concat(axis0)",
        &[m34, &[2, 4]],
        rng,
        seeds,
        |t| Ok(Tensor::concat(&[t[0].clone(), t[1].clone()], 0)?.gelu().mean_all()),
        |x| {
            let mut all = x[0].clone();
            all.extend_from_slice(&x[1]);
            mean(&r64::gelu(&all))
        },
    ))?;
    case(gradcheck::check_fn(
        "op.concat(axis1)",
        &[m34, &[3, 2]],
        rng,
        seeds,
        |t| Ok(Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?.gelu().mean_all()),
        |x| {
            let mut all = Vec::new();
            for r in 0..3 {
                all.extend_from_slice(&x[0][r * 4..(r + 1) * 4]);
                all.extend_from_slice(&x[1][r * 2..(r + 1) * 2]);
            }
            mean(&r64::gelu(&all))
        },
    ))?;
    case(gradcheck::check_fn(
        "op.reshape",
        &[m34],
        rng,
        seeds,
        |t| Ok(t[0].reshape(&[2, 6])?.layer_norm(1e-5).mean_all()),
        |x| mean(&r64::layer_norm_rows(&x[0], 6, 1e-5)),
    ))?;
    case(gradcheck::check_fn(
        "op.transpose",
        &[m34, m34],
        rng,
        seeds,
        |t| Ok(t[0].transpose()?.matmul(&t[1])?.gelu().mean_all()),
        |x| {
            mean(&r64::gelu(&r64::matmul(
                &r64::transpose(&x[0], 3, 4),
                &x[1],
                4,
                3,
                4,
            )))
        },
    ))?;
    case(gradcheck::check_fn(
        "op.slice_cols",
        &[&[3, 6]],
        rng,
        seeds,
        |t| Ok(t[0].slice_cols(1, 4)?.gelu().mean_all()),
        |x| {
            let mut s = Vec::new();
            for r in 0..3 {
                s.extend_from_slice(&x[0][r * 6 + 1..r * 6 + 4]);
            }
            mean(&r64::gelu(&s))
        },
    ))?;
    case(gradcheck::check_fn(
        "op.squared_error",
        &[m34, m34],
        rng,
        seeds,
        |t| t[0].squared_error(&t[1]),
        |x| x[0].iter().zip(&x[1]).map(|(a, b)| (a - b) * (a - b)).sum(),
    ))?;
    Ok(out)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `detach` must block the backward pass entirely.
fn stop_gradient_property() -> Result<CheckResult> {
    let a = Parameter::new("a", &[2, 2], vec![1.0, -2.0, 3.0, 0.5]);
    let b = Parameter::new("b", &[2, 2], vec![0.3, 0.7, -1.1, 2.0]);
    let loss = a.leaf().mul(&b.leaf().detach())?.sum_all();
    loss.backward()?;
    let pass = a.grad_touched() && !b.grad_touched() && a.grad() == b.value();
    Ok(CheckResult::new(
        "op.detach(stop-gradient)",
        pass,
        format!(
            "upstream grad touched: {}, detached grad touched: {}",
            a.grad_touched(),
            b.grad_touched()
        ),
    ))
}

fn tiny_encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        patch_dim: PATCH_SIZE * PATCH_SIZE,
        max_patches: 8,
    }
}

fn random_patches(rng: &mut ChaCha8Rng, nf: usize, nt: usize) -> PatchSequence {
    let w = PATCH_SIZE * PATCH_SIZE;
    PatchSequence {
        patches: (0..nf * nt * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        n_freq_patches: nf,
        n_time_patches: nt,
    }
}

fn params_of(set: &crate::ndgrad::ParamSet) -> Vec<ParamRef> {
    set.iter().cloned().collect()
}

fn film_predictor_gradcheck(rng: &mut ChaCha8Rng, seeds: usize) -> Result<CheckResult> {
    let cfg = PredictorConfig {
        layers: 3,
        hidden: 6,
        embed_dim: 4,
        cond_dim: 5,
    };
    let pred = FilmPredictor::new(cfg.clone(), "pred", rng)?;
    let k = 3;
    let z: Vec<f32> = (0..k * cfg.embed_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let cond: Vec<f32> = (0..cfg.cond_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let target: Vec<f32> = (0..k * cfg.embed_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let (z64, cond64, t64): (Vec<f64>, Vec<f64>, Vec<f64>) = (
        z.iter().map(|&v| v as f64).collect(),
        cond.iter().map(|&v| v as f64).collect(),
        target.iter().map(|&v| v as f64).collect(),
    );
    let zt = Tensor::from_vec(z, &[k, cfg.embed_dim])?;
    let ct = Tensor::from_vec(cond, &[1, cfg.cond_dim])?;
    let tt = Tensor::from_vec(target, &[k, cfg.embed_dim])?;
    let report = gradcheck::check_params(
        "model.film_predictor",
        &params_of(pred.params()),
        rng,
        seeds,
        0.5,
        || pred.predict(&zt, &ct)?.squared_error(&tt),
        |vals| {
            let y = modref::predictor_forward(&cfg, "pred", vals, &z64, &cond64, k);
            y.iter().zip(&t64).map(|(a, b)| (a - b) * (a - b)).sum()
        },
    )?;
    Ok(report_to_result(report))
}

fn encoder_gradcheck(rng: &mut ChaCha8Rng, seeds: usize) -> Result<CheckResult> {
    let cfg = tiny_encoder_cfg();
    let enc = Encoder::new(cfg.clone(), "encoder", rng)?;
    let seq = random_patches(rng, 1, 2);
    let d = cfg.embed_dim;
    let k = seq.k();
    let target: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let t64: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let p64: Vec<f64> = seq.patches.iter().map(|&v| v as f64).collect();
    let tt = Tensor::from_vec(target, &[k, d])?;
    let report = gradcheck::check_params(
        "model.encoder",
        &params_of(enc.params()),
        rng,
        seeds,
        0.3,
        || enc.encode(&seq)?.squared_error(&tt),
        |vals| {
            let y = modref::encoder_forward(&cfg, "encoder", vals, &p64, 1, 2);
            y.iter().zip(&t64).map(|(a, b)| (a - b) * (a - b)).sum()
        },
    )?;
    Ok(report_to_result(report))
}

fn contrastive_gradcheck(
    rng: &mut ChaCha8Rng,
    seeds: usize,
    negatives: NegativeSet,
) -> Result<gradcheck::GradCheckReport> {
    let name = match negatives {
        NegativeSet::Joint => "loss.contrastive(joint)",
        NegativeSet::CrossOnly => "loss.contrastive(cross-only)",
    };
    gradcheck::check_fn(
        name,
        &[&[3, 4], &[3, 4], &[1]],
        rng,
        seeds,
        move |t| contrastive_loss(&t[0], &t[1], &t[2], negatives),
        move |x| {
            let rows = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(4).map(|c| c.to_vec()).collect() };
            reference_contrastive(&rows(&x[0]), &rows(&x[1]), x[2][0], negatives)
        },
    )
}

fn jepa_gradcheck(rng: &mut ChaCha8Rng, seeds: usize) -> Result<CheckResult> {
    // The target side is a stop-gradient by construction, so only the
    // prediction input is differentiated; the target stays fixed.
    let target: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let t64: Vec<Vec<f64>> = target.chunks(4).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let tt = Tensor::from_vec(target, &[3, 4])?;
    let report = gradcheck::check_fn(
        "loss.jepa",
        &[&[3, 4]],
        rng,
        seeds,
        |t| jepa_loss(&t[0], &tt),
        |x| {
            let rows: Vec<Vec<f64>> = x[0].chunks(4).map(|c| c.to_vec()).collect();
            reference_jepa(&rows, &t64)
        },
    )?;
    Ok(report_to_result(report))
}

/// Phase-1 objective end-to-end: tiny encoder -> pool -> contrastive loss,
/// differentiated through every encoder weight and the temperature.
fn contrastive_end_to_end_gradcheck(rng: &mut ChaCha8Rng, seeds: usize) -> Result<CheckResult> {
    let cfg = tiny_encoder_cfg();
    let enc = Encoder::new(cfg.clone(), "encoder", rng)?;
    let temp = Temperature::new(0.5);
    let n = 2;
    let seqs: Vec<PatchSequence> = (0..2 * n).map(|_| random_patches(rng, 1, 1)).collect();
    let seqs64: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| s.patches.iter().map(|&v| v as f64).collect())
        .collect();
    let mut params = params_of(enc.params());
    params.push(temp.param().clone());
    let d = cfg.embed_dim;
    let report = gradcheck::check_params(
        "phase1.encoder+contrastive",
        &params,
        rng,
        seeds,
        0.3,
        || {
            let pooled: Vec<Tensor> = seqs
                .iter()
                .map(|s| Ok(pool(&enc.encode(s)?)?.reshape(&[1, d])?))
                .collect::<Result<_>>()?;
            let ctx = Tensor::concat(&pooled[..n], 0)?;
            let tgt = Tensor::concat(&pooled[n..], 0)?;
            contrastive_loss(&ctx, &tgt, &temp.leaf(), NegativeSet::Joint)
        },
        |vals| {
            let pooled: Vec<Vec<f64>> = seqs64
                .iter()
                .map(|p| {
                    let z = modref::encoder_forward(&cfg, "encoder", vals, p, 1, 1);
                    r64::mean_axis0(&z, z.len() / d, d)
                })
                .collect();
            reference_contrastive(
                &pooled[..n],
                &pooled[n..],
                vals["temperature.log_tau"][0],
                NegativeSet::Joint,
            )
        },
    )?;
    Ok(report_to_result(report))
}

/// Phase-2 objective end-to-end: tiny encoder -> FiLM predictor -> JEPA loss
/// against a fixed target, differentiated through both models' weights.
fn jepa_end_to_end_gradcheck(rng: &mut ChaCha8Rng, seeds: usize) -> Result<CheckResult> {
    let ecfg = tiny_encoder_cfg();
    let pcfg = PredictorConfig {
        layers: 2,
        hidden: 6,
        embed_dim: ecfg.embed_dim,
        cond_dim: 5,
    };
    let enc = Encoder::new(ecfg.clone(), "encoder", rng)?;
    let pred = FilmPredictor::new(pcfg.clone(), "predictor", rng)?;
    let seq = random_patches(rng, 1, 2);
    let p64: Vec<f64> = seq.patches.iter().map(|&v| v as f64).collect();
    let k = seq.k();
    let d = ecfg.embed_dim;
    let cond: Vec<f32> = (0..pcfg.cond_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let cond64: Vec<f64> = cond.iter().map(|&v| v as f64).collect();
    let ct = Tensor::from_vec(cond, &[1, pcfg.cond_dim])?;
    let target: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let t64: Vec<Vec<f64>> = target.chunks(d).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let tt = Tensor::from_vec(target, &[k, d])?;
    let mut params = params_of(enc.params());
    params.extend(params_of(pred.params()));
    let report = gradcheck::check_params(
        "phase2.encoder+predictor+jepa",
        &params,
        rng,
        seeds,
        0.3,
        || {
            let z = enc.encode(&seq)?;
            let y = pred.predict(&z, &ct)?;
            jepa_loss(&y, &tt)
        },
        |vals| {
            let z = modref::encoder_forward(&ecfg, "encoder", vals, &p64, 1, 2);
            let y = modref::predictor_forward(&pcfg, "predictor", vals, &z, &cond64, k);
            let rows: Vec<Vec<f64>> = y.chunks(d).map(|c| c.to_vec()).collect();
            reference_jepa(&rows, &t64)
        },
    )?;
    Ok(report_to_result(report))
}

// ---- Selfcheck: scripted values, closed forms, statistical properties ----

pub fn run_selfcheck() -> Result<Vec<CheckResult>> {
    let mut out = vec![
        contrastive_identity_checks()?,
        contrastive_scripted_instance()?,
        contrastive_flat_at_high_tau()?,
        contrastive_random_properties()?,
        jepa_identity_checks()?,
        schedule_closed_forms(),
        ema_freeze_property()?,
        film_identity_at_init()?,
        temperature_clamp_bounds(),
    ];
    out.push(metric_oracle_equivalence(10, 200, 0xBEEF)?);
    out.push(chance_calibration(200, 1000, 0xD1CE)?);
    Ok(out)
}

/// With every embedding identical the softmax is uniform over the
/// negatives: loss is ln(2N-1) jointly, ln(N) cross-only.
fn contrastive_identity_checks() -> Result<CheckResult> {
    let n = 4;
    let row = vec![0.3f32, -0.2, 0.9, 0.1];
    let data: Vec<f32> = row.iter().cycle().take(n * 4).cloned().collect();
    let e = Tensor::from_vec(data, &[n, 4])?;
    let log_tau = Tensor::from_vec(vec![0.0], &[1])?;
    let joint = contrastive_loss(&e, &e, &log_tau, NegativeSet::Joint)?.item() as f64;
    let cross = contrastive_loss(&e, &e, &log_tau, NegativeSet::CrossOnly)?.item() as f64;
    let e_joint = ((2 * n - 1) as f64).ln();
    let e_cross = (n as f64).ln();
    let pass = (joint - e_joint).abs() < 1e-5 && (cross - e_cross).abs() < 1e-5;
    Ok(CheckResult::new(
        "selfcheck.contrastive-uniform-identity",
        pass,
        format!("joint {joint:.6} vs ln(2N-1) {e_joint:.6}; cross {cross:.6} vs ln(N) {e_cross:.6}"),
    ))
}

/// Orthonormal pairs at tau = 1: every anchor sees its positive at logit 1
/// and 2N-2 zeros, so the loss is exactly ln(e + 2N - 2) - 1.
fn contrastive_scripted_instance() -> Result<CheckResult> {
    let n = 2;
    let d = 4;
    let mut data = vec![0.0f32; n * d];
    for i in 0..n {
        data[i * d + i] = 2.5; // non-unit scale; the loss normalizes rows
    }
    let e = Tensor::from_vec(data, &[n, d])?;
    let log_tau = Tensor::from_vec(vec![0.0], &[1])?;
    let got = contrastive_loss(&e, &e, &log_tau, NegativeSet::Joint)?.item() as f64;
    let expect = (std::f64::consts::E + (2 * n - 2) as f64).ln() - 1.0;
    let pass = (got - expect).abs() < 1e-5;
    Ok(CheckResult::new(
        "selfcheck.contrastive-orthonormal-instance",
        pass,
        format!("got {got:.6}, closed form ln(e+2N-2)-1 = {expect:.6}"),
    ))
}

/// As tau grows all logits shrink toward zero and the loss flattens to the
/// uniform value regardless of the embeddings.
fn contrastive_flat_at_high_tau() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3;
    let mk = |rng: &mut ChaCha8Rng| {
        Tensor::from_vec((0..n * 6).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), &[n, 6])
    };
    let (ctx, tgt) = (mk(&mut rng)?, mk(&mut rng)?);
    let log_tau = Tensor::from_vec(vec![(1e6f32).ln()], &[1])?;
    let got = contrastive_loss(&ctx, &tgt, &log_tau, NegativeSet::Joint)?.item() as f64;
    let expect = ((2 * n - 1) as f64).ln();
    let pass = (got - expect).abs() < 1e-4;
    Ok(CheckResult::new(
        "selfcheck.contrastive-flat-at-high-tau",
        pass,
        format!("got {got:.6}, uniform value {expect:.6}"),
    ))
}

/// Non-negativity, invariance to positive rescaling of the embeddings, and
/// agreement with the independent f64 evaluation, over random draws.
fn contrastive_random_properties() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut max_ref_err = 0.0f64;
    for trial in 0..20 {
        let n = 2 + trial % 4;
        let d = 3 + trial % 5;
        let draw: Vec<f32> = (0..2 * n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let ctx = Tensor::from_vec(draw[..n * d].to_vec(), &[n, d])?;
        let tgt = Tensor::from_vec(draw[n * d..].to_vec(), &[n, d])?;
        let lt = rng.gen_range(-2.0f32..0.5);
        let log_tau = Tensor::from_vec(vec![lt], &[1])?;
        for negatives in [NegativeSet::Joint, NegativeSet::CrossOnly] {
            let loss = contrastive_loss(&ctx, &tgt, &log_tau, negatives)?.item() as f64;
            if loss < -1e-6 {
                return Ok(CheckResult::new(
                    "selfcheck.contrastive-random-properties",
                    false,
                    format!("negative loss {loss} on trial {trial}"),
                ));
            }
            let scaled = contrastive_loss(&ctx.scale(3.7), &tgt.scale(0.2), &log_tau, negatives)?
                .item() as f64;
            if (scaled - loss).abs() > 1e-4 {
                return Ok(CheckResult::new(
                    "selfcheck.contrastive-random-properties",
                    false,
                    format!("not scale invariant: {loss} vs {scaled} on trial {trial}"),
                ));
            }
            let rows = |t: &Tensor| -> Vec<Vec<f64>> {
                t.data().chunks(d).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
            };
            let reference = reference_contrastive(&rows(&ctx), &rows(&tgt), lt as f64, negatives);
            max_ref_err = max_ref_err.max((loss - reference).abs());
        }
    }
    let pass = max_ref_err < 1e-5;
    Ok(CheckResult::new(
        "selfcheck.contrastive-random-properties",
        pass,
        format!("nonneg + scale-invariant over 20 trials; max f64-reference err {max_ref_err:.3e}"),
    ))
}

/// JEPA loss identities: zero for any positive rescaling of the target,
/// 4 per row for antipodal rows, and bounded by [0, 4K].
fn jepa_identity_checks() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 5;
    let d = 6;
    let data: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let z = Tensor::from_vec(data.clone(), &[k, d])?;
    let same = jepa_loss(&z, &z.scale(2.3))?.item() as f64;
    let anti = jepa_loss(&z, &z.scale(-1.0))?.item() as f64;
    // row-wise orthogonal construction: prediction e_0, target e_1 per row
    let mut p_rows = vec![0.0f32; k * d];
    let mut t_rows = vec![0.0f32; k * d];
    for i in 0..k {
        p_rows[i * d] = 1.5;
        t_rows[i * d + 1] = 0.4;
    }
    let ortho = jepa_loss(
        &Tensor::from_vec(p_rows, &[k, d])?,
        &Tensor::from_vec(t_rows, &[k, d])?,
    )?
    .item() as f64;
    let rand_t = Tensor::from_vec((0..k * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), &[k, d])?;
    let r = jepa_loss(&z, &rand_t)?.item() as f64;
    let pass = same.abs() < 1e-5
        && (ortho - 2.0 * k as f64).abs() < 1e-5
        && (anti - 4.0 * k as f64).abs() < 1e-4
        && (0.0..=4.0 * k as f64 + 1e-6).contains(&r);
    Ok(CheckResult::new(
        "selfcheck.jepa-identities",
        pass,
        format!(
            "rescaled {same:.2e}, orthogonal {ortho:.6} (expect {}), antipodal {anti:.6} (expect {}), random {r:.4} in [0,{}]",
            2 * k, 4 * k, 4 * k
        ),
    ))
}

/// Closed-form anchors for the learning-rate and EMA-rate schedules.
fn schedule_closed_forms() -> CheckResult {
    let s = LrSchedule::new(1e-3, 100, 1100);
    let lr0 = s.lr_at(0);
    let lr_w = s.lr_at(100);
    let lr_mid = s.lr_at(100 + 500); // cosine midpoint
    let lr_ok = lr0 == 0.0
        && (lr_w - 1e-3).abs() < 1e-9
        && (lr_mid - 5e-4).abs() < 1e-7;

    let e = EmaSchedule {
        tau_start: 0.996,
        tau_end: 1.0,
        total_steps: 1000,
    };
    let ema_ok = (e.rate(0) - 0.996).abs() < 1e-7
        && (e.rate(1000) - 1.0).abs() < 1e-7
        && (e.rate(500) - 0.998).abs() < 1e-6;
    CheckResult::new(
        "selfcheck.schedule-closed-forms",
        lr_ok && ema_ok,
        format!(
            "lr(0)={lr0}, lr(warmup)={lr_w:.1e}, lr(mid)={lr_mid:.2e}; ema(0)={}, ema(mid)={}, ema(end)={}",
            e.rate(0), e.rate(500), e.rate(1000)
        ),
    )
}

/// EMA with rate 1 leaves the target untouched; rate 0 copies the online
/// weights outright.
fn ema_freeze_property() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = tiny_encoder_cfg();
    let online = Encoder::new(cfg.clone(), "encoder", &mut rng)?;
    let target = Encoder::new(cfg, "encoder", &mut rng)?;
    let before: Vec<Vec<f32>> = target.params().iter().map(|p| p.value()).collect();
    crate::model::ema_update(target.params(), online.params(), 1.0)?;
    let frozen = target
        .params()
        .iter()
        .zip(&before)
        .all(|(p, b)| &p.value() == b);
    crate::model::ema_update(target.params(), online.params(), 0.0)?;
    let copied = target
        .params()
        .iter()
        .zip(online.params().iter())
        .all(|(t, o)| t.value() == o.value());
    Ok(CheckResult::new(
        "selfcheck.ema-freeze-and-copy",
        frozen && copied,
        format!("rate 1 froze target: {frozen}; rate 0 copied online: {copied}"),
    ))
}

/// At initialization FiLM is the identity modulation (gamma 1, beta 0), so
/// the predictor output must not depend on the conditioning vector.
fn film_identity_at_init() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = PredictorConfig {
        layers: 3,
        hidden: 8,
        embed_dim: 6,
        cond_dim: 5,
    };
    let pred = FilmPredictor::new(cfg.clone(), "pred", &mut rng)?;
    let z = Tensor::from_vec((0..2 * 6).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), &[2, 6])?;
    let mk_cond = |rng: &mut ChaCha8Rng| {
        Tensor::from_vec((0..5).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), &[1, 5])
    };
    let y1 = pred.predict(&z, &mk_cond(&mut rng)?)?;
    let y2 = pred.predict(&z, &mk_cond(&mut rng)?)?;
    let pass = y1.data() == y2.data();
    Ok(CheckResult::new(
        "selfcheck.film-identity-at-init",
        pass,
        format!("outputs under two different conditioning vectors identical: {pass}"),
    ))
}

fn temperature_clamp_bounds() -> CheckResult {
    let t = Temperature::new(0.1);
    t.set_tau(1e-6);
    t.clamp();
    let lo = t.tau();
    t.set_tau(50.0);
    t.clamp();
    let hi = t.tau();
    let pass = (lo - TAU_MIN).abs() < 1e-6 && (hi - TAU_MAX).abs() < 1e-5;
    CheckResult::new(
        "selfcheck.temperature-clamp",
        pass,
        format!("clamped to [{lo}, {hi}], bounds [{TAU_MIN}, {TAU_MAX}]"),
    )
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize, quantize: bool) -> RetrievalIndex {
    let instruments = ["kick", "snare", "bass", "lead", "pad", "voice"];
    let categories = ["drums", "drums", "bass", "guitar", "keys", "vocals"];
    let entries: Vec<IndexEntry> = (0..n)
        .map(|i| {
            let embedding: Vec<f32> = (0..dim)
                .map(|_| {
                    let v = rng.gen_range(-1.0f32..1.0);
                    if quantize {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect();
            let inst = i % instruments.len();
            IndexEntry {
                embedding,
                track_id: format!("track{:04}", i / 4),
                stem_id: format!("stem{i}"),
                instrument: instruments[inst].to_string(),
                category: categories[inst].to_string(),
            }
        })
        .collect();
    RetrievalIndex::new(entries).expect("synthetic index is valid")
}

/// Ranks, normalized ranks, recall, and top-1 from the sorting-based metric
/// path must agree exactly with the independent counting-based evaluation,
/// on randomized instances with quantized coordinates to exercise ties.
pub fn metric_oracle_equivalence(instances: usize, max_n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0usize;
    for inst in 0..instances {
        let n = rng.gen_range(8..=max_n.max(9));
        let dim = rng.gen_range(3..=8);
        let quantize = inst % 2 == 0;
        let index = random_index(&mut rng, n, dim, quantize);
        let queries: Vec<Query> = (0..20.min(n))
            .map(|i| {
                let truth = &index.entries[(i * 7) % n];
                let embedding: Vec<f32> = (0..dim)
                    .map(|_| {
                        let v = rng.gen_range(-1.0f32..1.0);
                        if quantize { (v * 4.0).round() / 4.0 } else { v }
                    })
                    .collect();
                Query {
                    embedding,
                    track_id: truth.track_id.clone(),
                    stem_id: truth.stem_id.clone(),
                    label: truth.instrument.clone(),
                }
            })
            .collect();
        for metric in [Distance::Euclidean, Distance::Cosine] {
            for q in &queries {
                let main = eval::rank_of_truth(&index, q, metric)?;
                let oracle = evalref::rank_by_counting(&index, q, metric)?;
                if main != oracle {
                    return Ok(CheckResult::new(
                        "metric-oracle-equivalence",
                        false,
                        format!("rank mismatch {main} vs {oracle} (instance {inst}, {metric:?})"),
                    ));
                }
                let nr = eval::normalized_rank(q, &index, metric)?;
                let nro = evalref::normalized_rank(q, &index, metric)?;
                if (nr - nro).abs() > 0.0 {
                    return Ok(CheckResult::new(
                        "metric-oracle-equivalence",
                        false,
                        format!("normalized rank mismatch {nr} vs {nro} (instance {inst})"),
                    ));
                }
                let top_main = eval::ranked_indices(&index, &q.embedding, metric)[0];
                let top_oracle = evalref::top1_by_scan(&index, &q.embedding, metric);
                if top_main != top_oracle {
                    return Ok(CheckResult::new(
                        "metric-oracle-equivalence",
                        false,
                        format!("top-1 mismatch {top_main} vs {top_oracle} (instance {inst})"),
                    ));
                }
                compared += 1;
            }
            for k in [1, 5, 10, n + 3] {
                let main = eval::recall_at_k(&queries, &index, k, metric)?;
                let oracle = evalref::recall_at_k(&queries, &index, k, metric)?;
                if (main - oracle).abs() > 0.0 {
                    return Ok(CheckResult::new(
                        "metric-oracle-equivalence",
                        false,
                        format!("recall@{k} mismatch {main} vs {oracle} (instance {inst})"),
                    ));
                }
            }
        }
    }
    Ok(CheckResult::new(
        "metric-oracle-equivalence",
        true,
        format!("{compared} query evaluations across {instances} instances, exact agreement"),
    ))
}

/// Random queries against a random index must land at chance: recall@k near
/// 100k/|Z| and mean normalized rank near 50%, each within 3 standard errors.
pub fn chance_calibration(n_index: usize, n_queries: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let index = random_index(&mut rng, n_index, dim, false);
    let queries: Vec<Query> = (0..n_queries)
        .map(|i| {
            let truth = &index.entries[i % n_index];
            Query {
                embedding: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                track_id: truth.track_id.clone(),
                stem_id: truth.stem_id.clone(),
                label: truth.instrument.clone(),
            }
        })
        .collect();
    let mut failures = Vec::new();
    for k in [1usize, 5, 10] {
        let got = eval::recall_at_k(&queries, &index, k, Distance::Euclidean)?;
        let p = k as f64 / n_index as f64;
        let expect = 100.0 * p;
        let se = 100.0 * (p * (1.0 - p) / n_queries as f64).sqrt();
        if (got - expect).abs() > 3.0 * se {
            failures.push(format!("R@{k} {got:.2} vs {expect:.2} (3SE {:.2})", 3.0 * se));
        }
    }
    let mut rank_sum = 0.0;
    for q in &queries {
        rank_sum += eval::normalized_rank(q, &index, Distance::Euclidean)?;
    }
    let mean_nr = 100.0 * rank_sum / n_queries as f64;
    // Uniform rank over |Z| slots: mean (|Z|-1)/(2|Z|), variance ~ 1/12.
    let expect_nr = 100.0 * (n_index as f64 - 1.0) / (2.0 * n_index as f64);
    let se_nr = 100.0 * (1.0 / 12.0f64).sqrt() / (n_queries as f64).sqrt();
    if (mean_nr - expect_nr).abs() > 3.0 * se_nr {
        failures.push(format!(
            "mean norm rank {mean_nr:.2} vs {expect_nr:.2} (3SE {:.2})",
            3.0 * se_nr
        ));
    }
    Ok(CheckResult::new(
        "chance-calibration",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "|Z|={n_index}, {n_queries} random queries: recall and mean rank within 3 SE of chance (mean rank {mean_nr:.2}%)"
            )
        } else {
            failures.join("; ")
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_suite_passes() {
        let results = run_gradcheck_suite(3).unwrap();
        for r in &results {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
        assert!(results.len() >= 25);
    }

    #[test]
    fn selfcheck_passes() {
        let results = run_selfcheck().unwrap();
        for r in &results {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }
}
