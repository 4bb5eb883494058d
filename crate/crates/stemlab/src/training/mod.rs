//! Two training phases: contrastive encoder pretraining and conditioned
//! predictive training against an EMA target encoder.

pub mod loss;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::EmbeddingTable;
use crate::corpus::{sample_pair, Corpus, LoadedTrack, TrainingPair, SAMPLE_RATE};
use crate::dsp::{log_mel, patchify, MelConfig, PatchSequence};
use crate::error::{Error, Result};
use crate::model::checkpoint::{dump_params, restore_params, Checkpoint};
use crate::model::{copy_params, ema_update, EmaSchedule, Encoder, EncoderConfig, FilmPredictor, PredictorConfig};
use crate::ndgrad::{AdamW, AdamWConfig, LrSchedule, ParamRef, ParamSet, Tensor};

pub use loss::{contrastive_loss, jepa_loss, NegativeSet, Temperature, TAU_INIT};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhaseConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    pub chunk_secs: f32,
    pub checkpoint_every: u64,
    pub weight_decay: f32,
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.chunk_secs <= 0.0 {
            return Err(Error::Config("chunk_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn chunk_samples(&self) -> usize {
        (self.chunk_secs * SAMPLE_RATE as f32).round() as usize
    }
}

/// One JSON line per step in the metrics log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_rate: Option<f32>,
}

struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(MetricsLog {
            file: std::fs::File::create(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?,
        })
    }

    fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("metrics record: {e}")))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io("metrics log".to_string(), e))
    }
}

pub fn featurize(samples: &[f32], mel: &MelConfig) -> Result<PatchSequence> {
    patchify(&log_mel(
        &crate::dsp::AudioChunk {
            samples: samples.to_vec(),
            sample_rate: SAMPLE_RATE,
        },
        mel,
    )?)
}

/// Draw a batch of training pairs, skipping tracks that cannot produce a
/// non-silent pair (with a warning).
fn sample_batch(
    tracks: &[LoadedTrack],
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    chunk_samples: usize,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::with_capacity(batch_size);
    let mut tries = 0;
    while out.len() < batch_size {
        if tries > 100 * batch_size {
            return Err(Error::Invalid(
                "corpus produced no non-silent training pairs".into(),
            ));
        }
        tries += 1;
        let t = &tracks[rng.gen_range(0..tracks.len())];
        match sample_pair(t, rng, chunk_samples)? {
            Some(p) => out.push(p),
            None => eprintln!(
                "warning: track {} yielded no non-silent pair; skipped",
                t.manifest.track_id
            ),
        }
    }
    Ok(out)
}

fn load_tracks(corpus: &Corpus) -> Result<Vec<LoadedTrack>> {
    corpus
        .manifest
        .tracks
        .iter()
        .map(|t| corpus.load_track(t))
        .collect()
}

fn stack_pooled(rows: &[Tensor]) -> Result<Tensor> {
    let d = rows[0].numel();
    let as_rows: Vec<Tensor> = rows
        .iter()
        .map(|r| r.reshape(&[1, d]))
        .collect::<Result<_>>()?;
    Tensor::concat(&as_rows, 0)
}

fn batch_provenance(batch: &[TrainingPair]) -> String {
    batch
        .iter()
        .map(|p| {
            format!(
                "{}:{}@{}<-[{}]",
                p.provenance.track_id,
                p.provenance.target_stem,
                p.provenance.offset,
                p.provenance.context_stems.join("+")
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub struct TrainOutcome {
    pub final_loss: f32,
    pub checkpoint_path: PathBuf,
    pub losses: Vec<f32>,
}

fn save_checkpoint(
    path: &Path,
    phase: u8,
    step: u64,
    params: &ParamSet,
    extra: &[ParamRef],
    opt: &AdamW,
    ema: Option<&ParamSet>,
    config_digest: [u8; 32],
) -> Result<()> {
    let mut tensors = dump_params(params);
    for p in extra {
        tensors.push((p.name().to_string(), p.shape().to_vec(), p.value()));
    }
    let opt_state: Vec<_> = opt
        .state()
        .into_iter()
        .flat_map(|(name, m, v)| {
            let n = m.len();
            [
                (format!("{name}.m"), vec![n], m),
                (format!("{name}.v"), vec![n], v),
            ]
        })
        .collect();
    Checkpoint {
        config_digest,
        phase,
        step,
        tensors,
        opt_step: opt.step_count(),
        opt: Some(opt_state),
        ema: ema.map(dump_params),
    }
    .save(path)
}

/// Contrastive pretraining of the encoder (and temperature) on pooled
/// context/target embeddings.
pub fn train_phase1(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    mel: &MelConfig,
    cfg: &PhaseConfig,
    negatives: NegativeSet,
    out_dir: &Path,
    config_digest: [u8; 32],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let tracks = load_tracks(corpus)?;
    if tracks.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::new(enc_cfg.clone(), "encoder", &mut rng)?;
    let temp = Temperature::new(TAU_INIT);
    let mut opt_params: Vec<ParamRef> = encoder.params().iter().cloned().collect();
    opt_params.push(temp.param().clone());
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let sched = LrSchedule::new(cfg.base_lr, cfg.warmup_steps, cfg.steps);
    let mut log = MetricsLog::create(&out_dir.join("phase1_metrics.jsonl"))?;
    let chunk = cfg.chunk_samples();

    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = sample_batch(&tracks, &mut rng, cfg.batch_size, chunk)?;
        let mut ctx_rows = Vec::with_capacity(batch.len());
        let mut tgt_rows = Vec::with_capacity(batch.len());
        for p in &batch {
            ctx_rows.push(crate::model::pool(
                &encoder.encode(&featurize(&p.context.samples, mel)?)?,
            )?);
            tgt_rows.push(crate::model::pool(
                &encoder.encode(&featurize(&p.target.samples, mel)?)?,
            )?);
        }
        let ctx = stack_pooled(&ctx_rows)?;
        let tgt = stack_pooled(&tgt_rows)?;
        let loss = contrastive_loss(&ctx, &tgt, &temp.leaf(), negatives)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_val} at phase-1 step {step}; batch [{}]",
                batch_provenance(&batch)
            )));
        }
        for p in &opt_params {
            p.zero_grad();
        }
        loss.backward()?;
        let lr = sched.lr_at(step);
        opt.step(&opt_params, lr)?;
        temp.clamp();
        log.append(&MetricsRecord {
            step,
            loss: loss_val,
            lr,
            tau: Some(temp.tau()),
            ema_rate: None,
        })?;
        losses.push(loss_val);
        if step % 50 == 0 {
            eprintln!("phase1 step {step}/{}: loss {loss_val:.4} tau {:.4}", cfg.steps, temp.tau());
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 != cfg.steps
        {
            save_checkpoint(
                &out_dir.join(format!("phase1_step{:06}.ckpt", step + 1)),
                1,
                step + 1,
                encoder.params(),
                &[temp.param().clone()],
                &opt,
                None,
                config_digest,
            )?;
        }
    }
    let checkpoint_path = out_dir.join("phase1_final.ckpt");
    save_checkpoint(
        &checkpoint_path,
        1,
        cfg.steps,
        encoder.params(),
        &[temp.param().clone()],
        &opt,
        None,
        config_digest,
    )?;
    Ok(TrainOutcome {
        final_loss: *losses.last().unwrap(),
        checkpoint_path,
        losses,
    })
}

/// Conditioned predictive training: context through the online encoder and
/// FiLM predictor; target through the EMA encoder under stop-gradient.
#[allow(clippy::too_many_arguments)]
pub fn train_phase2(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    pred_cfg: &PredictorConfig,
    mel: &MelConfig,
    cfg: &PhaseConfig,
    ema: &EmaSchedule,
    table: &EmbeddingTable,
    init_checkpoint: Option<&Path>,
    out_dir: &Path,
    config_digest: [u8; 32],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    if table.dim != pred_cfg.cond_dim {
        return Err(Error::Config(format!(
            "conditioning table dim {} != predictor cond_dim {}",
            table.dim, pred_cfg.cond_dim
        )));
    }
    let tracks = load_tracks(corpus)?;
    if tracks.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::new(enc_cfg.clone(), "encoder", &mut rng)?;
    if let Some(ckpt_path) = init_checkpoint {
        let ckpt = Checkpoint::load(ckpt_path)?;
        restore_params(encoder.params(), &ckpt.tensors)?;
        eprintln!(
            "phase2: encoder initialized from {} (phase {}, step {})",
            ckpt_path.display(),
            ckpt.phase,
            ckpt.step
        );
    }
    let predictor = FilmPredictor::new(pred_cfg.clone(), "predictor", &mut rng)?;
    // target encoder: same architecture and names, starts as a copy of theta
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
    let target = Encoder::new(enc_cfg.clone(), "encoder", &mut target_rng)?;
    copy_params(target.params(), encoder.params())?;

    let opt_params: Vec<ParamRef> = encoder
        .params()
        .iter()
        .chain(predictor.params().iter())
        .cloned()
        .collect();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let sched = LrSchedule::new(cfg.base_lr, cfg.warmup_steps, cfg.steps);
    let mut log = MetricsLog::create(&out_dir.join("phase2_metrics.jsonl"))?;
    let chunk = cfg.chunk_samples();
    let mut label_misses = std::collections::BTreeMap::<String, usize>::new();

    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = sample_batch(&tracks, &mut rng, cfg.batch_size, chunk)?;
        let mut loss_acc: Option<Tensor> = None;
        for p in &batch {
            let emb = table.lookup(&p.label);
            if !emb.hit {
                *label_misses.entry(emb.label.clone()).or_default() += 1;
            }
            let cond = Tensor::from_vec(emb.vector.to_vec(), &[table.dim])?;
            let z_ctx = encoder.encode(&featurize(&p.context.samples, mel)?)?;
            let z_pred = predictor.predict(&z_ctx, &cond)?;
            let z_tgt = target
                .encode(&featurize(&p.target.samples, mel)?)?
                .detach();
            let l = jepa_loss(&z_pred, &z_tgt)?;
            loss_acc = Some(match loss_acc {
                None => l,
                Some(acc) => acc.add(&l)?,
            });
        }
        let loss = loss_acc.unwrap().scale(1.0 / batch.len() as f32);
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_val} at phase-2 step {step}; batch [{}]",
                batch_provenance(&batch)
            )));
        }
        for p in &opt_params {
            p.zero_grad();
        }
        loss.backward()?;
        let lr = sched.lr_at(step);
        opt.step(&opt_params, lr)?;
        let rate = ema.rate(step);
        ema_update(target.params(), encoder.params(), rate)?;
        log.append(&MetricsRecord {
            step,
            loss: loss_val,
            lr,
            tau: None,
            ema_rate: Some(rate),
        })?;
        losses.push(loss_val);
        if step % 50 == 0 {
            eprintln!("phase2 step {step}/{}: loss {loss_val:.4} ema {rate:.5}", cfg.steps);
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 != cfg.steps
        {
            let mut params = ParamSet::new();
            params.extend(encoder.params())?;
            params.extend(predictor.params())?;
            save_checkpoint(
                &out_dir.join(format!("phase2_step{:06}.ckpt", step + 1)),
                2,
                step + 1,
                &params,
                &[],
                &opt,
                Some(target.params()),
                config_digest,
            )?;
        }
    }
    for (label, n) in &label_misses {
        eprintln!("warning: label `{label}` missed the conditioning table {n} times (fell back to music)");
    }
    let checkpoint_path = out_dir.join("phase2_final.ckpt");
    let mut params = ParamSet::new();
    params.extend(encoder.params())?;
    params.extend(predictor.params())?;
    save_checkpoint(
        &checkpoint_path,
        2,
        cfg.steps,
        &params,
        &[],
        &opt,
        Some(target.params()),
        config_digest,
    )?;
    Ok(TrainOutcome {
        final_loss: *losses.last().unwrap(),
        checkpoint_path,
        losses,
    })
}
