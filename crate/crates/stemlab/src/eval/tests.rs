use super::probe::*;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn entry(e: &[f32], track: &str, stem: &str, instr: &str, cat: &str) -> IndexEntry {
    IndexEntry {
        embedding: e.to_vec(),
        track_id: track.into(),
        stem_id: stem.into(),
        instrument: instr.into(),
        category: cat.into(),
    }
}

fn query(e: &[f32], track: &str, stem: &str) -> Query {
    Query {
        embedding: e.to_vec(),
        track_id: track.into(),
        stem_id: stem.into(),
        label: "x".into(),
    }
}

#[test]
fn hand_instance_recall() {
    // q at distances 0.5, 0.2, 0.9 from (true, other, other)
    let index = RetrievalIndex::new(vec![
        entry(&[0.5], "t0", "a", "i", "c"),
        entry(&[0.2], "t1", "b", "i", "c"),
        entry(&[0.9], "t2", "d", "i", "c"),
    ])
    .unwrap();
    let q = vec![query(&[0.0], "t0", "a")];
    assert_eq!(recall_at_k(&q, &index, 1, Distance::Euclidean).unwrap(), 0.0);
    assert_eq!(recall_at_k(&q, &index, 2, Distance::Euclidean).unwrap(), 100.0);
    // k beyond |Z| clamps
    assert_eq!(recall_at_k(&q, &index, 99, Distance::Euclidean).unwrap(), 100.0);
}

#[test]
fn perfect_and_farthest_ranks() {
    let mut entries = vec![];
    for i in 0..4 {
        entries.push(entry(&[i as f32], &format!("t{i}"), "s", "i", "c"));
    }
    let index = RetrievalIndex::new(entries).unwrap();
    let perfect = query(&[2.0], "t2", "s");
    assert_eq!(normalized_rank(&perfect, &index, Distance::Euclidean).unwrap(), 0.0);
    let farthest = query(&[-10.0], "t3", "s");
    assert_eq!(
        normalized_rank(&farthest, &index, Distance::Euclidean).unwrap(),
        3.0 / 4.0
    );
    // hand 4-entry instance with ground truth second-closest
    let second = query(&[0.6], "t0", "s");
    assert_eq!(
        normalized_rank(&second, &index, Distance::Euclidean).unwrap(),
        1.0 / 4.0
    );
    // absent ground truth is rejected
    assert!(normalized_rank(&query(&[0.0], "zz", "s"), &index, Distance::Euclidean).is_err());
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    quantize: bool,
) -> (RetrievalIndex, Vec<Query>) {
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let e: Vec<f32> = (0..d)
            .map(|_| {
                let x = rng.gen_range(-1.0f32..1.0);
                // quantized coordinates force distance ties to exercise the tie-break
                if quantize {
                    (x * 2.0).round() / 2.0
                } else {
                    x
                }
            })
            .collect();
        entries.push(entry(
            &e,
            &format!("t{:03}", i / 4),
            &format!("s{}", i % 4),
            "i",
            "c",
        ));
    }
    let index = RetrievalIndex::new(entries).unwrap();
    let queries: Vec<Query> = (0..n)
        .step_by(3)
        .map(|i| {
            let e: Vec<f32> = (0..d)
                .map(|_| {
                    let x = rng.gen_range(-1.0f32..1.0);
                    if quantize {
                        (x * 2.0).round() / 2.0
                    } else {
                        x
                    }
                })
                .collect();
            query(&e, &format!("t{:03}", i / 4), &format!("s{}", i % 4))
        })
        .collect();
    (index, queries)
}

#[test]
fn metrics_match_brute_force_reference_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (n, quantize) in [(10, false), (100, true), (500, true)] {
        let (index, queries) = random_instance(&mut rng, n, 4, quantize);
        for metric in [Distance::Euclidean, Distance::Cosine] {
            for q in &queries {
                assert_eq!(
                    rank_of_truth(&index, q, metric).unwrap(),
                    reference::rank_by_counting(&index, q, metric).unwrap(),
                    "rank mismatch at n={n}"
                );
                assert_eq!(
                    ranked_indices(&index, &q.embedding, metric)[0],
                    reference::top1_by_scan(&index, &q.embedding, metric)
                );
            }
            for k in [1, 5, 10, n] {
                assert_eq!(
                    recall_at_k(&queries, &index, k, metric).unwrap(),
                    reference::recall_at_k(&queries, &index, k, metric).unwrap()
                );
            }
        }
    }
}

#[test]
fn recall_monotone_in_k_and_total_at_z() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (index, queries) = random_instance(&mut rng, 60, 3, false);
    let mut prev = 0.0;
    for k in 1..=60 {
        let r = recall_at_k(&queries, &index, k, Distance::Euclidean).unwrap();
        assert!(r >= prev, "R@{k} = {r} < R@{} = {prev}", k - 1);
        prev = r;
    }
    assert_eq!(prev, 100.0);
}

#[test]
fn chance_calibration_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let d = 16;
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let z = 200;
    let entries: Vec<IndexEntry> = (0..z)
        .map(|i| entry(&unit(&mut rng), &format!("t{i:03}"), "s", "i", "c"))
        .collect();
    let index = RetrievalIndex::new(entries).unwrap();
    let queries: Vec<Query> = (0..1000)
        .map(|i| query(&unit(&mut rng), &format!("t{:03}", i % z), "s"))
        .collect();
    for k in [1usize, 5, 10] {
        let r = recall_at_k(&queries, &index, k, Distance::Euclidean).unwrap();
        let p = k as f64 / z as f64;
        let se = 100.0 * (p * (1.0 - p) / 1000.0).sqrt();
        let expected = 100.0 * p;
        assert!(
            (r - expected).abs() <= 3.0 * se,
            "R@{k} = {r}, chance {expected} +- {se}"
        );
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    while rows.len() < d {
        let mut v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        for r in &rows {
            let dot: f32 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    rows
}

#[test]
fn metrics_invariant_under_orthogonal_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 8;
    let (index, queries) = random_instance(&mut rng, 40, d, false);
    let base = evaluate(&queries, &index, Distance::Euclidean).unwrap();
    let q_mat = random_orthogonal(d, &mut rng);
    let apply = |v: &[f32]| -> Vec<f32> {
        q_mat
            .iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let rot_index = RetrievalIndex::new(
        index
            .entries
            .iter()
            .map(|e| IndexEntry {
                embedding: apply(&e.embedding),
                ..e.clone()
            })
            .collect(),
    )
    .unwrap();
    let rot_queries: Vec<Query> = queries
        .iter()
        .map(|q| Query {
            embedding: apply(&q.embedding),
            ..q.clone()
        })
        .collect();
    let rot = evaluate(&rot_queries, &rot_index, Distance::Euclidean).unwrap();
    assert!((base.recall_at_1 - rot.recall_at_1).abs() < 1e-6);
    assert!((base.recall_at_5 - rot.recall_at_5).abs() < 1e-6);
    assert!((base.recall_at_10 - rot.recall_at_10).abs() < 1e-6);
    assert!((base.mean_normalized_rank - rot.mean_normalized_rank).abs() < 1e-6);
    assert!((base.median_normalized_rank - rot.median_normalized_rank).abs() < 1e-6);
}

#[test]
fn taxonomy_cells() {
    let index = RetrievalIndex::new(vec![
        entry(&[0.0, 0.0], "t0", "drums", "drum kit", "drums"),
        entry(&[1.0, 0.0], "t0", "bass", "synth bass", "bass"),
        entry(&[0.0, 1.0], "t1", "drums", "drum kit", "drums"),
        entry(&[5.0, 5.0], "t1", "perc", "percussion", "drums"),
    ])
    .unwrap();
    // q1: top-1 is its own ground truth -> (same track, right instrument)
    let q1 = query(&[0.01, 0.0], "t0", "drums");
    // q2: ground truth t0/bass, top-1 is t1/drums -> (other track, wrong category)
    let q2 = query(&[0.0, 0.99], "t0", "bass");
    // q3: ground truth t1/perc, top-1 t1/drums -> (same track, same category)
    let q3 = query(&[0.1, 0.9], "t1", "perc");
    let (table, per_label) =
        neighbor_taxonomy(&[q1, q2, q3], &index, Distance::Euclidean).unwrap();
    let third = 1.0 / 3.0;
    assert!((table.cells[0][0] - third).abs() < 1e-9, "{:?}", table.cells);
    assert!((table.cells[1][2] - third).abs() < 1e-9);
    assert!((table.cells[0][1] - third).abs() < 1e-9);
    let total: f64 = table.cells.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(per_label.len(), 1); // all three used label "x"
}

#[test]
fn probe_separable_and_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 8;
    let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(Vec<f32>, usize)> {
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                let y = usize::from(v[2] > 0.0);
                (v, y)
            })
            .collect()
    };
    let train = make(&mut rng, 500);
    let test = make(&mut rng, 200);
    let cfg = ProbeConfig {
        hidden: 64,
        steps: 150,
        seeds: 3,
        lrs: vec![1e-3, 1e-4],
    };
    let acc = probe(&train, &test, 2, &cfg).unwrap();
    assert!(acc > 95.0, "separable probe accuracy {acc}");

    // shuffled labels: chance within 3 standard errors
    let shuffled = shuffle_labels(&train, 1);
    let test_shuffled = shuffle_labels(&test, 2);
    let acc = probe(&shuffled, &test_shuffled, 2, &cfg).unwrap();
    let se = 100.0 * (0.25f64 / 200.0).sqrt();
    assert!((acc - 50.0).abs() < 3.0 * se, "chance probe accuracy {acc}");

    // degenerate split rejected
    let single: Vec<_> = train.iter().cloned().map(|(x, _)| (x, 0)).collect();
    assert!(probe(&single, &test, 2, &cfg).is_err());
}

#[test]
fn global_embedding_layout() {
    let nf = 2;
    let nt = 3;
    let d = 4;
    // patch (f, t) filled with value f*10 + t
    let mut data = vec![0.0f32; nf * nt * d];
    for f in 0..nf {
        for t in 0..nt {
            for c in 0..d {
                data[(f * nt + t) * d + c] = (f * 10 + t) as f32 + c as f32 / 10.0;
            }
        }
    }
    let z = crate::ndgrad::Tensor::from_vec(data, &[nf * nt, d]).unwrap();
    let g = global_embedding(&z, nf, nt).unwrap();
    assert_eq!(g.len(), d * nf);
    // averaging over t of f*10 + t = f*10 + 1
    for f in 0..nf {
        for c in 0..d {
            let expected = (f * 10 + 1) as f32 + c as f32 / 10.0;
            assert!((g[f * d + c] - expected).abs() < 1e-5);
        }
    }
}

#[test]
fn index_and_queries_from_tiny_pipeline() {
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::model::EncoderConfig;

    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(
        &CorpusConfig {
            n_tracks: 3,
            duration_secs: 9.0,
            ..CorpusConfig::default()
        },
        dir.path(),
        false,
    )
    .unwrap();
    let mel = MelConfig {
        n_mels: 16,
        window_secs: 0.025,
        hop_secs: 0.010,
    };
    let enc_cfg = EncoderConfig {
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        patch_dim: 256,
        max_patches: 64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let encoder = Encoder::new(enc_cfg, "encoder", &mut rng).unwrap();
    let index = build_index(&corpus, &encoder, &mel, EVAL_CHUNK_SECS).unwrap();
    let n_stems: usize = corpus.manifest.tracks.iter().map(|t| t.stems.len()).sum();
    assert_eq!(index.len(), n_stems);

    // deterministic rebuild
    let again = build_index(&corpus, &encoder, &mel, EVAL_CHUNK_SECS).unwrap();
    for (a, b) in index.entries.iter().zip(&again.entries) {
        assert_eq!(a, b);
    }

    // pooled vectors match an independent 64-bit recomputation
    let pm = crate::model::reference::param_map(encoder.params());
    let t0 = &corpus.manifest.tracks[0];
    let loaded = corpus.load_track(t0).unwrap();
    let chunk = (EVAL_CHUNK_SECS * SAMPLE_RATE as f32) as usize;
    let offset = first_nonsilent_offset(&loaded.stems[0], chunk).unwrap();
    let seq = featurize(&loaded.stems[0][offset..offset + chunk], &mel).unwrap();
    let z64 = crate::model::reference::encoder_forward(
        &encoder.cfg,
        "encoder",
        &pm,
        &seq.patches.iter().map(|&x| x as f64).collect::<Vec<_>>(),
        seq.n_freq_patches,
        seq.n_time_patches,
    );
    let d = 16;
    let k = seq.k();
    // index pooling averages unit-normalized patch rows
    let norms: Vec<f64> = (0..k)
        .map(|r| (0..d).map(|c| z64[r * d + c].powi(2)).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let pooled64: Vec<f64> = (0..d)
        .map(|c| (0..k).map(|r| z64[r * d + c] / norms[r]).sum::<f64>() / k as f64)
        .collect();
    let stored = &index.entries[0].embedding;
    for (a, b) in stored.iter().zip(&pooled64) {
        assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
    }

    // query determinism and 2-stem behavior through make_query
    let q1 = make_query(&loaded, 0, "drums", &encoder, None, &mel, EVAL_CHUNK_SECS).unwrap().unwrap();
    let q2 = make_query(&loaded, 0, "drums", &encoder, None, &mel, EVAL_CHUNK_SECS).unwrap().unwrap();
    assert_eq!(q1.embedding, q2.embedding);

    let queries = build_queries(&corpus, &index, &encoder, None, &mel, EVAL_CHUNK_SECS).unwrap();
    assert_eq!(queries.len(), index.len());
    let report = evaluate(&queries, &index, Distance::Euclidean).unwrap();
    assert!(report.recall_at_1 <= report.recall_at_5);
    assert!(report.recall_at_5 <= report.recall_at_10);
}

#[test]
fn film_identity_at_init_makes_queries_label_independent() {
    use crate::model::PredictorConfig;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred = FilmPredictor::new(
        PredictorConfig {
            layers: 2,
            hidden: 8,
            embed_dim: 4,
            cond_dim: 8,
        },
        "predictor",
        &mut rng,
    )
    .unwrap();
    let z = Tensor::from_vec((0..8).map(|x| x as f32 / 8.0).collect(), &[2, 4]).unwrap();
    // freshly initialized FiLM has gamma = 1, beta = 0: the conditioning
    // input cannot influence the output yet
    let c1 = Tensor::from_vec(vec![1.0; 8], &[8]).unwrap();
    let c2 = Tensor::from_vec((0..8).map(|x| -(x as f32)).collect(), &[8]).unwrap();
    let y1 = pred.predict(&z, &c1).unwrap();
    let y2 = pred.predict(&z, &c2).unwrap();
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn save_index_roundtrips_through_container() {
    let index = RetrievalIndex::new(vec![
        entry(&[1.0, 2.0], "t0", "a", "i", "c"),
        entry(&[3.0, 4.0], "t1", "b", "i", "c"),
    ])
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    save_index(&index, &path).unwrap();
    let ckpt = crate::model::checkpoint::Checkpoint::load(&path).unwrap();
    let (name, shape, data) = &ckpt.tensors[0];
    assert_eq!(name, "t0/a");
    assert_eq!(shape, &vec![2]);
    assert_eq!(data, &vec![1.0, 2.0]);
}
