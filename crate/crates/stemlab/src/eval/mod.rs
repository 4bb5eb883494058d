//! Retrieval evaluation: reference index, conditioned queries, Recall@k,
//! normalized rank, the nearest-neighbor taxonomy, and the probe harness.

pub mod probe;
pub mod reference;

use std::collections::BTreeMap;
use std::path::Path;

use crate::conditioning::EmbeddingTable;
use crate::corpus::{mix, Corpus, LoadedTrack, SAMPLE_RATE};
use crate::dsp::{is_silent, AudioChunk, MelConfig, SILENCE_THRESHOLD_DB};
use crate::error::{Error, Result};
use crate::model::{pool, Encoder, FilmPredictor};
use crate::ndgrad::Tensor;
use crate::training::featurize;

/// Default evaluation chunk length; overridable per run so evaluation can
/// match the chunk length the encoder was trained on.
pub const EVAL_CHUNK_SECS: f32 = 8.0;
/// Offset scan granularity when looking for the first non-silent chunk.
const OFFSET_HOP_SECS: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub embedding: Vec<f32>,
    pub track_id: String,
    pub stem_id: String,
    /// Instrument-level label (exact-match level of the taxonomy cells).
    pub instrument: String,
    /// Category-level (root) label.
    pub category: String,
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone)]
pub struct Query {
    pub embedding: Vec<f32>,
    pub track_id: String,
    pub stem_id: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PerLabelStats {
    pub n: usize,
    pub recall_at_1: f64,
    pub mean_normalized_rank: f64,
}

/// Row 0: top-1 neighbor from the same track; row 1: from another track.
/// Columns: right instrument, same category, wrong category.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaxonomyTable {
    pub cells: [[f64; 3]; 2],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mean_normalized_rank: f64,
    pub median_normalized_rank: f64,
    pub per_instrument: BTreeMap<String, PerLabelStats>,
    pub taxonomy: TaxonomyTable,
    pub per_label_taxonomy: BTreeMap<String, TaxonomyTable>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Invalid(format!(
                "retrieval index needs >= 2 entries, got {}",
                entries.len()
            )));
        }
        let dim = entries[0].embedding.len();
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::Invalid(format!(
                    "index entry {}/{} has dim {}, expected {dim}",
                    e.track_id,
                    e.stem_id,
                    e.embedding.len()
                )));
            }
            if e.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite embedding for {}/{}",
                    e.track_id, e.stem_id
                )));
            }
        }
        Ok(RetrievalIndex { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, track_id: &str, stem_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.track_id == track_id && e.stem_id == stem_id)
    }
}

pub fn distance(metric: Distance, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        Distance::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Distance::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            1.0 - dot / (na * nb).max(1e-12)
        }
    }
}

/// Index positions sorted by ascending distance to `q`, ties broken by
/// lexicographic (track_id, stem_id).
pub fn ranked_indices(index: &RetrievalIndex, q: &[f32], metric: Distance) -> Vec<usize> {
    let mut order: Vec<usize> = (0..index.entries.len()).collect();
    let dists: Vec<f64> = index
        .entries
        .iter()
        .map(|e| distance(metric, q, &e.embedding))
        .collect();
    order.sort_by(|&a, &b| {
        dists[a]
            .partial_cmp(&dists[b])
            .unwrap()
            .then_with(|| {
                let ea = &index.entries[a];
                let eb = &index.entries[b];
                (&ea.track_id, &ea.stem_id).cmp(&(&eb.track_id, &eb.stem_id))
            })
    });
    order
}

/// 0-based rank of the query's ground-truth entry in the sorted list.
pub fn rank_of_truth(index: &RetrievalIndex, q: &Query, metric: Distance) -> Result<usize> {
    if index.position(&q.track_id, &q.stem_id).is_none() {
        return Err(Error::Invalid(format!(
            "ground truth {}/{} absent from index",
            q.track_id, q.stem_id
        )));
    }
    let order = ranked_indices(index, &q.embedding, metric);
    Ok(order
        .iter()
        .position(|&i| {
            index.entries[i].track_id == q.track_id && index.entries[i].stem_id == q.stem_id
        })
        .unwrap())
}

/// Percent of queries whose ground truth lies within the k nearest
/// neighbors; k > |Z| clamps to |Z|.
pub fn recall_at_k(
    queries: &[Query],
    index: &RetrievalIndex,
    k: usize,
    metric: Distance,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let k = k.min(index.len());
    let mut hits = 0usize;
    for q in queries {
        if rank_of_truth(index, q, metric)? < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / queries.len().max(1) as f64)
}

/// 0-based rank divided by |Z|, in [0, 1).
pub fn normalized_rank(query: &Query, index: &RetrievalIndex, metric: Distance) -> Result<f64> {
    Ok(rank_of_truth(index, query, metric)? as f64 / index.len() as f64)
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn taxonomy_cell(index: &RetrievalIndex, q: &Query, top1: usize) -> (usize, usize) {
    let e = &index.entries[top1];
    let row = if e.track_id == q.track_id { 0 } else { 1 };
    let truth_pos = index.position(&q.track_id, &q.stem_id).unwrap();
    let truth = &index.entries[truth_pos];
    let col = if e.instrument == truth.instrument {
        0
    } else if e.category == truth.category {
        1
    } else {
        2
    };
    (row, col)
}

/// Classify every query's top-1 neighbor into
/// {same track, other track} x {right instrument, same category, wrong}.
pub fn neighbor_taxonomy(
    queries: &[Query],
    index: &RetrievalIndex,
    metric: Distance,
) -> Result<(TaxonomyTable, BTreeMap<String, TaxonomyTable>)> {
    let mut counts = [[0usize; 3]; 2];
    let mut per_label = BTreeMap::<String, [[usize; 3]; 2]>::new();
    for q in queries {
        if index.position(&q.track_id, &q.stem_id).is_none() {
            return Err(Error::Invalid(format!(
                "ground truth {}/{} absent from index",
                q.track_id, q.stem_id
            )));
        }
        let top1 = ranked_indices(index, &q.embedding, metric)[0];
        let (r, c) = taxonomy_cell(index, q, top1);
        counts[r][c] += 1;
        per_label.entry(q.label.clone()).or_default()[r][c] += 1;
    }
    let to_table = |counts: &[[usize; 3]; 2]| {
        let total: usize = counts.iter().flatten().sum();
        let mut cells = [[0.0f64; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                cells[r][c] = counts[r][c] as f64 / total.max(1) as f64;
            }
        }
        TaxonomyTable { cells }
    };
    Ok((
        to_table(&counts),
        per_label.iter().map(|(k, v)| (k.clone(), to_table(v))).collect(),
    ))
}

/// Full metrics bundle over a query set.
pub fn evaluate(
    queries: &[Query],
    index: &RetrievalIndex,
    metric: Distance,
) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    let mut per_instr = BTreeMap::<String, (usize, usize, f64)>::new(); // n, r1 hits, rank sum
    for q in queries {
        let r = normalized_rank(q, index, metric)?;
        ranks.push(r);
        let truth = &index.entries[index.position(&q.track_id, &q.stem_id).unwrap()];
        let ent = per_instr.entry(truth.instrument.clone()).or_default();
        ent.0 += 1;
        if rank_of_truth(index, q, metric)? == 0 {
            ent.1 += 1;
        }
        ent.2 += r;
    }
    let mean = 100.0 * ranks.iter().sum::<f64>() / ranks.len() as f64;
    let mut sorted = ranks.clone();
    let med = 100.0 * median(&mut sorted);
    let (taxonomy, per_label_taxonomy) = neighbor_taxonomy(queries, index, metric)?;
    Ok(MetricsReport {
        recall_at_1: recall_at_k(queries, index, 1, metric)?,
        recall_at_5: recall_at_k(queries, index, 5, metric)?,
        recall_at_10: recall_at_k(queries, index, 10, metric)?,
        mean_normalized_rank: mean,
        median_normalized_rank: med,
        per_instrument: per_instr
            .into_iter()
            .map(|(k, (n, hits, rank_sum))| {
                (
                    k,
                    PerLabelStats {
                        n,
                        recall_at_1: 100.0 * hits as f64 / n as f64,
                        mean_normalized_rank: 100.0 * rank_sum / n as f64,
                    },
                )
            })
            .collect(),
        taxonomy,
        per_label_taxonomy,
    })
}

// ---- building indexes and queries from a corpus + trained models ----

fn stem_labels(labels: &[String]) -> (String, String) {
    let category = labels.first().cloned().unwrap_or_default();
    let instrument = labels.get(1).or(labels.first()).cloned().unwrap_or_default();
    (instrument, category)
}

/// First chunk offset (scanned at 1 s granularity) where `samples` is not
/// silent; None when every scanned chunk is silent.
pub fn first_nonsilent_offset(samples: &[f32], chunk: usize) -> Option<usize> {
    if samples.len() < chunk {
        return None;
    }
    let hop = (OFFSET_HOP_SECS * SAMPLE_RATE as f32) as usize;
    let mut offset = 0;
    while offset + chunk <= samples.len() {
        let c = AudioChunk {
            samples: samples[offset..offset + chunk].to_vec(),
            sample_rate: SAMPLE_RATE,
        };
        if !is_silent(&c, SILENCE_THRESHOLD_DB) {
            return Some(offset);
        }
        offset += hop;
    }
    None
}

pub fn eval_chunk_samples(track_len: usize, chunk_secs: f32) -> usize {
    ((chunk_secs * SAMPLE_RATE as f32) as usize).min(track_len)
}

/// One pooled embedding per stem, from the first non-silent fixed-length
/// chunk; all-silent stems are excluded with a warning.
pub fn build_index(
    corpus: &Corpus,
    encoder: &Encoder,
    mel: &MelConfig,
    chunk_secs: f32,
) -> Result<RetrievalIndex> {
    let mut entries = Vec::new();
    for t in &corpus.manifest.tracks {
        let loaded = corpus.load_track(t)?;
        let chunk = eval_chunk_samples(loaded.stems[0].len(), chunk_secs);
        for (s, samples) in t.stems.iter().zip(&loaded.stems) {
            let Some(offset) = first_nonsilent_offset(samples, chunk) else {
                eprintln!(
                    "warning: {}/{} has no non-silent chunk; excluded from index",
                    t.track_id, s.stem_id
                );
                continue;
            };
            let seq = featurize(&samples[offset..offset + chunk], mel)?;
            // Patch embeddings are direction-aligned by the predictive loss
            // while their magnitudes are unconstrained, so retrieval pools
            // unit-normalized patch vectors on both the index and query side.
            let z = pool(&encoder.encode(&seq)?.l2_normalize_rows())?;
            let (instrument, category) = stem_labels(&s.labels);
            entries.push(IndexEntry {
                embedding: z.data().to_vec(),
                track_id: t.track_id.clone(),
                stem_id: s.stem_id.clone(),
                instrument,
                category,
            });
        }
    }
    RetrievalIndex::new(entries)
}

/// Mix of every stem but `stem_idx`, encoded and (unless bypassed) passed
/// through the conditioned predictor, then pooled.
#[allow(clippy::too_many_arguments)]
pub fn make_query(
    track: &LoadedTrack,
    stem_idx: usize,
    label: &str,
    encoder: &Encoder,
    predictor: Option<(&FilmPredictor, &EmbeddingTable)>,
    mel: &MelConfig,
    chunk_secs: f32,
) -> Result<Option<Query>> {
    let n = track.stems.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "track {} has fewer than 2 stems",
            track.manifest.track_id
        )));
    }
    let chunk = eval_chunk_samples(track.stems[0].len(), chunk_secs);
    let others: Vec<AudioChunk> = (0..n)
        .filter(|&i| i != stem_idx)
        .map(|i| AudioChunk {
            samples: track.stems[i].clone(),
            sample_rate: SAMPLE_RATE,
        })
        .collect();
    let mixed = mix(&others.iter().collect::<Vec<_>>())?;
    let Some(offset) = first_nonsilent_offset(&mixed.samples, chunk) else {
        eprintln!(
            "warning: context mix for {}/{} is silent everywhere; query skipped",
            track.manifest.track_id, track.manifest.stems[stem_idx].stem_id
        );
        return Ok(None);
    };
    let seq = featurize(&mixed.samples[offset..offset + chunk], mel)?;
    let z = encoder.encode(&seq)?;
    let z = match predictor {
        Some((p, table)) => {
            let emb = table.lookup(label);
            if !emb.hit {
                eprintln!("warning: query label `{}` missed the table; using fallback", emb.label);
            }
            let cond = Tensor::from_vec(emb.vector.to_vec(), &[table.dim])?;
            p.predict(&z, &cond)?
        }
        None => z,
    };
    Ok(Some(Query {
        embedding: pool(&z.l2_normalize_rows())?.data().to_vec(),
        track_id: track.manifest.track_id.clone(),
        stem_id: track.manifest.stems[stem_idx].stem_id.clone(),
        label: label.to_string(),
    }))
}

/// Conditioning label used for the query of a stem: the instrument-level
/// label when present, the fallback otherwise.
pub fn query_label(labels: &[String]) -> &str {
    labels
        .get(1)
        .or_else(|| labels.first())
        .map(|s| s.as_str())
        .unwrap_or(crate::conditioning::FALLBACK_LABEL)
}

/// Build one query per indexed stem of the corpus.
pub fn build_queries(
    corpus: &Corpus,
    index: &RetrievalIndex,
    encoder: &Encoder,
    predictor: Option<(&FilmPredictor, &EmbeddingTable)>,
    mel: &MelConfig,
    chunk_secs: f32,
) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    for t in &corpus.manifest.tracks {
        let loaded = corpus.load_track(t)?;
        for (i, s) in t.stems.iter().enumerate() {
            if index.position(&t.track_id, &s.stem_id).is_none() {
                continue; // stem was excluded from the index
            }
            if let Some(q) = make_query(
                &loaded,
                i,
                query_label(&s.labels),
                encoder,
                predictor,
                mel,
                chunk_secs,
            )? {
                queries.push(q);
            }
        }
    }
    Ok(queries)
}

/// Dump index embeddings into the binary tensor container ("track/stem").
pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let ckpt = crate::model::checkpoint::Checkpoint {
        tensors: index
            .entries
            .iter()
            .map(|e| {
                (
                    format!("{}/{}", e.track_id, e.stem_id),
                    vec![e.embedding.len()],
                    e.embedding.clone(),
                )
            })
            .collect(),
        ..Default::default()
    };
    ckpt.save(path)
}

#[cfg(test)]
mod tests;
