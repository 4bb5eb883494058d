//! Run configuration: structured TOML with strict (unknown-key rejecting)
//! parsing and the two named presets.

use std::path::Path;

use crate::corpus::CorpusConfig;
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::eval::Distance;
use crate::model::{EmaSchedule, EncoderConfig, PredictorConfig};
use crate::training::{NegativeSet, PhaseConfig};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub phase1: Phase1Section,
    pub phase2: Phase2Section,
    pub conditioning: ConditioningSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_tracks: usize,
    pub stems_min: usize,
    pub stems_max: usize,
    pub duration_secs: f32,
    pub seed: u64,
    pub empty_label_fraction: f32,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub predictor_layers: usize,
    pub predictor_hidden: usize,
    pub n_mels: usize,
    pub max_patches: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase1Section {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    pub chunk_secs: f32,
    pub checkpoint_every: u64,
    pub weight_decay: f32,
    pub negatives: NegativeSet,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Section {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    pub chunk_secs: f32,
    pub checkpoint_every: u64,
    pub weight_decay: f32,
    pub ema_tau_start: f32,
    pub ema_tau_end: f32,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningSection {
    pub dim: usize,
    pub seed: u64,
    pub alpha: f32,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub distance: Distance,
    /// Length of the fixed per-stem evaluation chunk. Retrieval works best
    /// when this matches the chunk length the encoder was trained on.
    #[serde(default = "default_eval_chunk_secs")]
    pub chunk_secs: f32,
}

fn default_eval_chunk_secs() -> f32 {
    crate::eval::EVAL_CHUNK_SECS
}

impl RunConfig {
    /// Small preset sized for minutes-scale CPU runs.
    pub fn desk() -> Self {
        RunConfig {
            corpus: CorpusSection {
                n_tracks: 60,
                stems_min: 4,
                stems_max: 6,
                duration_secs: 12.0,
                seed: 7,
                empty_label_fraction: 0.1,
            },
            model: ModelSection {
                embed_dim: 64,
                depth: 2,
                heads: 2,
                mlp_ratio: 4,
                predictor_layers: 4,
                predictor_hidden: 128,
                n_mels: 80,
                max_patches: 256,
            },
            phase1: Phase1Section {
                steps: 2000,
                batch_size: 16,
                base_lr: 1e-3,
                warmup_steps: 100,
                seed: 11,
                chunk_secs: 3.0,
                checkpoint_every: 1000,
                weight_decay: 0.05,
                negatives: NegativeSet::Joint,
            },
            phase2: Phase2Section {
                steps: 2000,
                batch_size: 16,
                base_lr: 1e-3,
                warmup_steps: 100,
                seed: 13,
                chunk_secs: 3.0,
                checkpoint_every: 1000,
                weight_decay: 0.05,
                ema_tau_start: 0.996,
                ema_tau_end: 1.0,
            },
            conditioning: ConditioningSection {
                dim: 64,
                seed: 17,
                alpha: 0.7,
            },
            eval: EvalSection {
                ks: vec![1, 5, 10],
                distance: Distance::Euclidean,
                chunk_secs: 3.0,
            },
        }
    }

    /// Published hyperparameters, retained verbatim as a named preset; not
    /// intended to be run on a desktop CPU.
    pub fn paper() -> Self {
        RunConfig {
            corpus: CorpusSection {
                n_tracks: 20_000,
                stems_min: 4,
                stems_max: 6,
                duration_secs: 243.0, // ~1350 h / 20k tracks
                seed: 7,
                empty_label_fraction: 0.0,
            },
            model: ModelSection {
                embed_dim: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4,
                predictor_layers: 6,
                predictor_hidden: 1024,
                n_mels: 80,
                max_patches: 250,
            },
            phase1: Phase1Section {
                steps: 300_000,
                batch_size: 256,
                base_lr: 1e-3,
                warmup_steps: 20_000,
                seed: 11,
                chunk_secs: 8.0,
                checkpoint_every: 10_000,
                weight_decay: 0.05,
                negatives: NegativeSet::Joint,
            },
            phase2: Phase2Section {
                steps: 300_000,
                batch_size: 256,
                base_lr: 1e-3,
                warmup_steps: 20_000,
                seed: 13,
                chunk_secs: 8.0,
                checkpoint_every: 10_000,
                weight_decay: 0.05,
                ema_tau_start: 0.996,
                ema_tau_end: 1.0,
            },
            conditioning: ConditioningSection {
                dim: 512, // text-tower embedding width
                seed: 17,
                alpha: 0.7,
            },
            eval: EvalSection {
                ks: vec![1, 5, 10],
                distance: Distance::Euclidean,
                chunk_secs: 8.0,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `desk` or `paper`)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.predictor_config().validate()?;
        self.phase_config(Phase::One).validate()?;
        self.phase_config(Phase::Two).validate()?;
        if self.conditioning.dim < 8 {
            return Err(Error::Config("conditioning.dim must be >= 8".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty positive integers".into()));
        }
        let min_secs = self
            .phase1
            .chunk_secs
            .max(self.phase2.chunk_secs)
            .max(self.eval.chunk_secs);
        if self.corpus.duration_secs < min_secs {
            return Err(Error::Config(format!(
                "corpus.duration_secs {} shorter than the longest chunk {min_secs}",
                self.corpus.duration_secs
            )));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_tracks: self.corpus.n_tracks,
            stems_min: self.corpus.stems_min,
            stems_max: self.corpus.stems_max,
            duration_secs: self.corpus.duration_secs,
            seed: self.corpus.seed,
            empty_label_fraction: self.corpus.empty_label_fraction,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.model.embed_dim,
            depth: self.model.depth,
            heads: self.model.heads,
            mlp_ratio: self.model.mlp_ratio,
            patch_dim: crate::dsp::PATCH_SIZE * crate::dsp::PATCH_SIZE,
            max_patches: self.model.max_patches,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            layers: self.model.predictor_layers,
            hidden: self.model.predictor_hidden,
            embed_dim: self.model.embed_dim,
            cond_dim: self.conditioning.dim,
        }
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            n_mels: self.model.n_mels,
            window_secs: 0.025,
            hop_secs: 0.010,
        }
    }

    pub fn phase_config(&self, phase: Phase) -> PhaseConfig {
        match phase {
            Phase::One => PhaseConfig {
                steps: self.phase1.steps,
                batch_size: self.phase1.batch_size,
                base_lr: self.phase1.base_lr,
                warmup_steps: self.phase1.warmup_steps,
                seed: self.phase1.seed,
                chunk_secs: self.phase1.chunk_secs,
                checkpoint_every: self.phase1.checkpoint_every,
                weight_decay: self.phase1.weight_decay,
            },
            Phase::Two => PhaseConfig {
                steps: self.phase2.steps,
                batch_size: self.phase2.batch_size,
                base_lr: self.phase2.base_lr,
                warmup_steps: self.phase2.warmup_steps,
                seed: self.phase2.seed,
                chunk_secs: self.phase2.chunk_secs,
                checkpoint_every: self.phase2.checkpoint_every,
                weight_decay: self.phase2.weight_decay,
            },
        }
    }

    pub fn ema_schedule(&self) -> EmaSchedule {
        EmaSchedule {
            tau_start: self.phase2.ema_tau_start,
            tau_end: self.phase2.ema_tau_end,
            total_steps: self.phase2.steps,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Phase {
    One,
    Two,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected_with_key_diagnostic() {
        let mut text = RunConfig::desk().to_toml();
        text.push_str("\n[phase3]\nsteps = 1\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("phase3"), "{err}");

        let text = RunConfig::desk().to_toml().replace("embed_dim", "embed_dims");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("embed_dims"), "{err}");
    }

    #[test]
    fn paper_preset_matches_published_values() {
        let p = RunConfig::paper();
        assert_eq!(p.model.embed_dim, 768);
        assert_eq!(p.model.depth, 12);
        assert_eq!(p.model.predictor_hidden, 1024);
        assert_eq!(p.model.predictor_layers, 6);
        assert_eq!(p.phase1.steps, 300_000);
        assert_eq!(p.phase1.warmup_steps, 20_000);
        assert_eq!(p.phase1.batch_size, 256);
        assert_eq!(p.phase1.base_lr, 1e-3);
        assert_eq!(p.model.n_mels, 80);
        assert_eq!(p.model.max_patches, 250);
    }

    #[test]
    fn invalid_sections_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.phase1.warmup_steps = cfg.phase1.steps;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.corpus.duration_secs = 2.0;
        assert!(cfg.validate().is_err());
    }
}
