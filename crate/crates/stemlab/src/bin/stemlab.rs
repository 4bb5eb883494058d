//! Command-line front end: corpus and conditioning fixtures, both training
//! phases, embedding/indexing, retrieval evaluation, analysis, and the
//! verification suites.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure,
//! 5 property-check failure. Errors print one machine-parsable line to
//! stderr; progress goes to stderr; results go to files under the run
//! directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stemlab::checks;
use stemlab::conditioning::{generate_fixture_table, EmbeddingTable, InstrumentTaxonomy};
use stemlab::config::{Phase, RunConfig};
use stemlab::corpus::{generate_corpus, Corpus};
use stemlab::error::{Error, Result};
use stemlab::eval::{
    self, build_index, build_queries, evaluate, probe as probemod, save_index, MetricsReport,
};
use stemlab::model::checkpoint::{config_digest, file_digest, hex_string, restore_params, Checkpoint};
use stemlab::model::{Encoder, FilmPredictor};
use stemlab::training::{train_phase1, train_phase2};

#[derive(Parser)]
#[command(name = "stemlab", about = "Stem retrieval: synthetic corpus, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (TOML). Mutually exclusive with --preset.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Named preset: `desk` (default) or `paper`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override a config key, e.g. --set phase1.steps=50 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a multi-stem corpus under --out.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Generate the deterministic conditioning-embedding fixture table.
    GenConditioning {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 1: contrastive encoder pretraining.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Phase 2: conditioned predictive training with an EMA target encoder.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Optional phase-1 checkpoint to initialize the encoder from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Embed every stem and write the retrieval index.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for provenance logs; defaults to --out's parent.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Build index + conditioned queries and report retrieval metrics.
    EvalRetrieval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Query with pooled encoder outputs directly, bypassing the
        /// predictor (contrastive-baseline mode).
        #[arg(long)]
        no_predictor: bool,
    },
    /// Break down the top-1 neighbors into the 2x3 taxonomy.
    AnalyzeNeighbors {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        no_predictor: bool,
    },
    /// Train linear-probe MLPs on stem-category labels from global embeddings.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Finite-difference gradient checks for every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Loss identities, metric-oracle equivalence, chance calibration.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error[{code}]: {e}");
            ExitCode::from(code as u8)
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?,
        None => RunConfig::preset(&args.preset)?.to_toml(),
    };
    let text = apply_overrides(&base, &args.overrides)?;
    RunConfig::parse(&text)
}

/// Apply `--set section.key=value` overrides on the TOML document, so the
/// strict schema check still runs on the final result.
fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut doc: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{ov}`")))?;
        let parsed: toml::Value = toml::from_str::<toml::Value>(&format!("v = {raw}"))
            .or_else(|_| toml::from_str::<toml::Value>(&format!("v = {raw:?}")))
            .map_err(|e| Error::Config(format!("--set {key}: bad value `{raw}`: {e}")))?;
        let value = parsed.get("v").cloned().unwrap();
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("--set {key}: unknown section `{part}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: not a section")))?;
        let leaf = parts[parts.len() - 1];
        if !table.contains_key(leaf) {
            return Err(Error::Config(format!("--set {key}: unknown key `{leaf}`")));
        }
        table.insert(leaf.to_string(), value);
    }
    toml::to_string_pretty(&doc).map_err(|e| Error::Config(format!("{e}")))
}

/// Write the resolved config and input digests into the run directory.
fn write_provenance(
    run_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    let cfg_text = cfg.to_toml();
    let cfg_path = run_dir.join("resolved_config.toml");
    std::fs::write(&cfg_path, &cfg_text).map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    let mut digests = serde_json::Map::new();
    for (name, path) in inputs {
        let digest = if path.is_dir() {
            // directory inputs are identified by their manifest
            file_digest(&path.join("manifest.toml"))?
        } else {
            file_digest(path)?
        };
        digests.insert(name.to_string(), serde_json::json!({
            "path": path.display().to_string(),
            "sha256": digest,
        }));
    }
    let prov = serde_json::json!({
        "command": command,
        "config_sha256": hex_string(&config_digest(&cfg_text)),
        "inputs": digests,
    });
    let prov_path = run_dir.join("provenance.json");
    let body = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    std::fs::write(&prov_path, body).map_err(|e| Error::io(prov_path.display().to_string(), e))?;
    Ok(())
}

/// Restore an encoder (and optionally the predictor) from a checkpoint.
struct EvalModels {
    /// Online encoder; encodes query context mixes.
    context_encoder: Encoder,
    /// Encoder for reference/index embeddings: the EMA target encoder when
    /// the checkpoint carries one (phase 2), the online encoder otherwise.
    /// The predictor is trained against target-encoder embeddings, so the
    /// index must live in that space for distances to be meaningful.
    index_encoder: Encoder,
    predictor: Option<FilmPredictor>,
}

fn load_models(cfg: &RunConfig, path: &Path, with_predictor: bool) -> Result<EvalModels> {
    let ckpt = Checkpoint::load(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let context_encoder = Encoder::new(cfg.encoder_config(), "encoder", &mut rng)?;
    restore_params(context_encoder.params(), &ckpt.tensors)?;
    let index_encoder = Encoder::new(cfg.encoder_config(), "encoder", &mut rng)?;
    restore_params(index_encoder.params(), ckpt.ema.as_deref().unwrap_or(&ckpt.tensors))?;
    let predictor = if with_predictor {
        let p = FilmPredictor::new(cfg.predictor_config(), "predictor", &mut rng)?;
        restore_params(p.params(), &ckpt.tensors).map_err(|e| {
            Error::Format(format!(
                "{}: no predictor weights (is this a phase-1 checkpoint?): {e}",
                path.display()
            ))
        })?;
        Some(p)
    } else {
        None
    };
    Ok(EvalModels { context_encoder, index_encoder, predictor })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn metrics_table(report: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("recall@1               {:8.2} %\n", report.recall_at_1));
    s.push_str(&format!("recall@5               {:8.2} %\n", report.recall_at_5));
    s.push_str(&format!("recall@10              {:8.2} %\n", report.recall_at_10));
    s.push_str(&format!("mean normalized rank   {:8.2} %\n", report.mean_normalized_rank));
    s.push_str(&format!("median normalized rank {:8.2} %\n", report.median_normalized_rank));
    s.push_str("\nper-instrument (n, recall@1 %, mean normalized rank %):\n");
    for (label, st) in &report.per_instrument {
        s.push_str(&format!(
            "  {label:<12} {:4}  {:6.2}  {:6.2}\n",
            st.n, st.recall_at_1, st.mean_normalized_rank
        ));
    }
    s.push_str("\ntop-1 neighbor taxonomy (% of queries):\n");
    s.push_str("               right-instr  same-cat  wrong\n");
    for (row, name) in report.taxonomy.cells.iter().zip(["same track ", "other track"]) {
        s.push_str(&format!(
            "  {name}  {:10.2} {:9.2} {:6.2}\n",
            100.0 * row[0],
            100.0 * row[1],
            100.0 * row[2]
        ));
    }
    s
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { cfg, out, overwrite } => {
            let cfg = resolve_config(&cfg)?;
            let corpus = generate_corpus(&cfg.corpus_config(), &out, overwrite)?;
            write_provenance(&out, "gen-corpus", &cfg, &[])?;
            eprintln!(
                "gen-corpus: {} tracks under {}",
                corpus.manifest.tracks.len(),
                out.display()
            );
            Ok(())
        }
        Command::GenConditioning { cfg, out } => {
            let cfg = resolve_config(&cfg)?;
            let taxonomy = InstrumentTaxonomy::default_taxonomy();
            let table = generate_fixture_table(
                &taxonomy,
                cfg.conditioning.dim,
                cfg.conditioning.seed,
                cfg.conditioning.alpha,
            )?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
            table.save_text(&out)?;
            eprintln!(
                "gen-conditioning: {} labels, dim {}, written to {}",
                table.len(),
                table.dim,
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { cfg, corpus, run_dir } => {
            let cfg = resolve_config(&cfg)?;
            write_provenance(&run_dir, "pretrain", &cfg, &[("corpus", corpus.as_path())])?;
            let corpus = Corpus::load(&corpus)?;
            let outcome = train_phase1(
                &corpus,
                &cfg.encoder_config(),
                &cfg.mel_config(),
                &cfg.phase_config(Phase::One),
                cfg.phase1.negatives,
                &run_dir,
                config_digest(&cfg.to_toml()),
            )?;
            eprintln!(
                "pretrain: final loss {:.4}, checkpoint {}",
                outcome.final_loss,
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Train { cfg, corpus, table, run_dir, init } => {
            let cfg = resolve_config(&cfg)?;
            let mut inputs = vec![("corpus", corpus.as_path()), ("table", table.as_path())];
            if let Some(init) = &init {
                inputs.push(("init_checkpoint", init.as_path()));
            }
            write_provenance(&run_dir, "train", &cfg, &inputs)?;
            let corpus = Corpus::load(&corpus)?;
            let table = EmbeddingTable::load(&table)?;
            let outcome = train_phase2(
                &corpus,
                &cfg.encoder_config(),
                &cfg.predictor_config(),
                &cfg.mel_config(),
                &cfg.phase_config(Phase::Two),
                &cfg.ema_schedule(),
                &table,
                init.as_deref(),
                &run_dir,
                config_digest(&cfg.to_toml()),
            )?;
            eprintln!(
                "train: final loss {:.4}, checkpoint {}",
                outcome.final_loss,
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Embed { cfg, corpus, checkpoint, out, run_dir } => {
            let cfg = resolve_config(&cfg)?;
            let run_dir = run_dir.unwrap_or_else(|| {
                out.parent()
                    .filter(|d| !d.as_os_str().is_empty())
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            write_provenance(
                &run_dir,
                "embed",
                &cfg,
                &[("corpus", corpus.as_path()), ("checkpoint", checkpoint.as_path())],
            )?;
            let corpus = Corpus::load(&corpus)?;
            let models = load_models(&cfg, &checkpoint, false)?;
            let index =
                build_index(&corpus, &models.index_encoder, &cfg.mel_config(), cfg.eval.chunk_secs)?;
            save_index(&index, &out)?;
            eprintln!("embed: {} stems indexed, written to {}", index.len(), out.display());
            Ok(())
        }
        Command::EvalRetrieval { cfg, corpus, checkpoint, table, run_dir, no_predictor } => {
            let cfg = resolve_config(&cfg)?;
            write_provenance(
                &run_dir,
                "eval-retrieval",
                &cfg,
                &[
                    ("corpus", corpus.as_path()),
                    ("checkpoint", checkpoint.as_path()),
                    ("table", table.as_path()),
                ],
            )?;
            let corpus = Corpus::load(&corpus)?;
            let table = EmbeddingTable::load(&table)?;
            let models = load_models(&cfg, &checkpoint, !no_predictor)?;
            let mel = cfg.mel_config();
            let index = build_index(&corpus, &models.index_encoder, &mel, cfg.eval.chunk_secs)?;
            let pred_arg = models.predictor.as_ref().map(|p| (p, &table));
            // Without a predictor the query is compared directly against the
            // index, so it must come from the same (index) encoder.
            let query_encoder = match pred_arg {
                Some(_) => &models.context_encoder,
                None => &models.index_encoder,
            };
            let queries =
                build_queries(&corpus, &index, query_encoder, pred_arg, &mel, cfg.eval.chunk_secs)?;
            let report = evaluate(&queries, &index, cfg.eval.distance)?;
            write_json(&run_dir.join("metrics.json"), &report)?;
            let table_txt = metrics_table(&report);
            let txt_path = run_dir.join("metrics.txt");
            std::fs::write(&txt_path, &table_txt)
                .map_err(|e| Error::io(txt_path.display().to_string(), e))?;
            eprint!("{table_txt}");
            Ok(())
        }
        Command::AnalyzeNeighbors { cfg, corpus, checkpoint, table, run_dir, no_predictor } => {
            let cfg = resolve_config(&cfg)?;
            write_provenance(
                &run_dir,
                "analyze-neighbors",
                &cfg,
                &[
                    ("corpus", corpus.as_path()),
                    ("checkpoint", checkpoint.as_path()),
                    ("table", table.as_path()),
                ],
            )?;
            let corpus = Corpus::load(&corpus)?;
            let table = EmbeddingTable::load(&table)?;
            let models = load_models(&cfg, &checkpoint, !no_predictor)?;
            let mel = cfg.mel_config();
            let index = build_index(&corpus, &models.index_encoder, &mel, cfg.eval.chunk_secs)?;
            let pred_arg = models.predictor.as_ref().map(|p| (p, &table));
            let query_encoder = match pred_arg {
                Some(_) => &models.context_encoder,
                None => &models.index_encoder,
            };
            let queries =
                build_queries(&corpus, &index, query_encoder, pred_arg, &mel, cfg.eval.chunk_secs)?;
            let (taxonomy, per_label) =
                eval::neighbor_taxonomy(&queries, &index, cfg.eval.distance)?;
            write_json(
                &run_dir.join("taxonomy.json"),
                &serde_json::json!({ "overall": taxonomy, "per_label": per_label }),
            )?;
            let mut txt = String::from("top-1 neighbor taxonomy (% of queries):\n");
            txt.push_str("               right-instr  same-cat  wrong\n");
            for (row, name) in taxonomy.cells.iter().zip(["same track ", "other track"]) {
                txt.push_str(&format!(
                    "  {name}  {:10.2} {:9.2} {:6.2}\n",
                    100.0 * row[0],
                    100.0 * row[1],
                    100.0 * row[2]
                ));
            }
            let txt_path = run_dir.join("taxonomy.txt");
            std::fs::write(&txt_path, &txt)
                .map_err(|e| Error::io(txt_path.display().to_string(), e))?;
            eprint!("{txt}");
            Ok(())
        }
        Command::Probe { cfg, corpus, checkpoint, run_dir } => {
            let cfg = resolve_config(&cfg)?;
            write_provenance(
                &run_dir,
                "probe",
                &cfg,
                &[("corpus", corpus.as_path()), ("checkpoint", checkpoint.as_path())],
            )?;
            let corpus = Corpus::load(&corpus)?;
            let models = load_models(&cfg, &checkpoint, false)?;
            let (data, classes, class_names) =
                probe_dataset(&corpus, &models.index_encoder, &cfg.mel_config(), cfg.eval.chunk_secs)?;
            // Deterministic split: even indices train, odd test.
            let train: Vec<_> = data.iter().step_by(2).cloned().collect();
            let test: Vec<_> = data.iter().skip(1).step_by(2).cloned().collect();
            let probe_cfg = probemod::ProbeConfig::default();
            let accuracy = probemod::probe(&train, &test, classes, &probe_cfg)?;
            write_json(
                &run_dir.join("probe.json"),
                &serde_json::json!({
                    "accuracy_percent": accuracy,
                    "classes": class_names,
                    "train_size": train.len(),
                    "test_size": test.len(),
                }),
            )?;
            eprintln!("probe: {accuracy:.2}% accuracy over {classes} classes");
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let results = checks::run_gradcheck_suite(seeds)?;
            print_results(&results)
        }
        Command::Selfcheck => {
            let results = checks::run_selfcheck()?;
            print_results(&results)
        }
    }
}

fn print_results(results: &[checks::CheckResult]) -> Result<()> {
    for r in results {
        println!(
            "{} {} ({})",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if checks::all_pass(results) {
        Ok(())
    } else {
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.name.as_str())
            .collect();
        Err(Error::Property(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Global embedding per stem with its taxonomy-category class index.
fn probe_dataset(
    corpus: &Corpus,
    encoder: &Encoder,
    mel: &stemlab::dsp::MelConfig,
    chunk_secs: f32,
) -> Result<(Vec<(Vec<f32>, usize)>, usize, Vec<String>)> {
    let taxonomy = InstrumentTaxonomy::default_taxonomy();
    let mut class_names: Vec<String> = Vec::new();
    let mut data = Vec::new();
    for t in &corpus.manifest.tracks {
        let loaded = corpus.load_track(t)?;
        for (stem, meta) in loaded.stems.iter().zip(&t.stems) {
            let Some(category) = meta.labels.first() else {
                continue;
            };
            if taxonomy.category_of(category).is_none() {
                continue;
            }
            let class = match class_names.iter().position(|c| c == category) {
                Some(i) => i,
                None => {
                    class_names.push(category.clone());
                    class_names.len() - 1
                }
            };
            let chunk_len = eval::eval_chunk_samples(stem.len(), chunk_secs);
            let Some(offset) = eval::first_nonsilent_offset(stem, chunk_len) else {
                continue;
            };
            let chunk = stemlab::dsp::AudioChunk {
                samples: stem[offset..offset + chunk_len].to_vec(),
                sample_rate: stemlab::corpus::SAMPLE_RATE,
            };
            let seq = stemlab::dsp::patchify(&stemlab::dsp::log_mel(&chunk, mel)?)?;
            let z = encoder.encode(&seq)?;
            let g = probemod::global_embedding(&z, seq.n_freq_patches, seq.n_time_patches)?;
            data.push((g, class));
        }
    }
    let classes = class_names.len();
    if classes < 2 {
        return Err(Error::Invalid(format!(
            "probe needs >= 2 stem categories, found {classes}"
        )));
    }
    Ok((data, classes, class_names))
}
