//! Brute-force metric reference, written independently of the main path:
//! ranks are computed by counting better entries instead of sorting, so the
//! two implementations can cross-check each other exactly.

use super::{distance, Distance, Query, RetrievalIndex};
use crate::error::{Error, Result};

/// Rank by counting entries that beat the ground truth under
/// (distance, track_id, stem_id) ordering.
pub fn rank_by_counting(index: &RetrievalIndex, q: &Query, metric: Distance) -> Result<usize> {
    let truth_pos = index
        .position(&q.track_id, &q.stem_id)
        .ok_or_else(|| Error::Invalid(format!("{}/{} absent", q.track_id, q.stem_id)))?;
    let truth = &index.entries[truth_pos];
    let dt = distance(metric, &q.embedding, &truth.embedding);
    let mut better = 0usize;
    for (i, e) in index.entries.iter().enumerate() {
        if i == truth_pos {
            continue;
        }
        let d = distance(metric, &q.embedding, &e.embedding);
        if d < dt
            || (d == dt && (&e.track_id, &e.stem_id) < (&truth.track_id, &truth.stem_id))
        {
            better += 1;
        }
    }
    Ok(better)
}

pub fn recall_at_k(
    queries: &[Query],
    index: &RetrievalIndex,
    k: usize,
    metric: Distance,
) -> Result<f64> {
    let k = k.min(index.len());
    let mut hits = 0;
    for q in queries {
        if rank_by_counting(index, q, metric)? < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / queries.len().max(1) as f64)
}

pub fn normalized_rank(q: &Query, index: &RetrievalIndex, metric: Distance) -> Result<f64> {
    Ok(rank_by_counting(index, q, metric)? as f64 / index.len() as f64)
}

/// Top-1 index by linear scan with the shared tie-break.
pub fn top1_by_scan(index: &RetrievalIndex, q: &[f32], metric: Distance) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, e) in index.entries.iter().enumerate() {
        let d = distance(metric, q, &e.embedding);
        let better = d < best_d || {
            let b = &index.entries[best];
            d == best_d && (&e.track_id, &e.stem_id) < (&b.track_id, &b.stem_id)
        };
        if better {
            best = i;
            best_d = d;
        }
    }
    best
}
