//! Label-to-vector conditioning tables.
//!
//! A file-based table maps free-form instrument labels to unit-norm
//! p-dimensional vectors, with "music" as the mandatory fallback row.
//! The fixture generator builds a deterministic table whose geometry follows
//! the instrument hierarchy: labels within a category stay closer together
//! than labels across categories. Real text-tower embeddings can be imported
//! through the same formats.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;

pub const FALLBACK_LABEL: &str = "music";
pub const DEFAULT_ALPHA: f32 = 0.7;

/// Three-level instrument hierarchy: category -> instrument -> fine variant.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InstrumentTaxonomy {
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Category {
    pub name: String,
    pub instruments: Vec<Instrument>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Instrument {
    pub name: String,
    pub variants: Vec<String>,
}

impl InstrumentTaxonomy {
    pub fn default_taxonomy() -> Self {
        fn inst(name: &str, variants: &[&str]) -> Instrument {
            Instrument {
                name: name.into(),
                variants: variants.iter().map(|s| s.to_string()).collect(),
            }
        }
        let cat = |name: &str, instruments: Vec<Instrument>| Category {
            name: name.into(),
            instruments,
        };
        InstrumentTaxonomy {
            categories: vec![
                cat(
                    "drums",
                    vec![
                        inst("drum kit", &["rock drum kit", "jazz drum kit"]),
                        inst("percussion", &["shaker", "tambourine"]),
                    ],
                ),
                cat(
                    "bass",
                    vec![
                        inst("electric bass", &["fingered electric bass", "picked electric bass"]),
                        inst("synth bass", &["sub synth bass"]),
                    ],
                ),
                cat(
                    "guitar",
                    vec![
                        inst("electric guitar", &["lead electric guitar", "rhythm electric guitar"]),
                        inst("acoustic guitar", &["steel string acoustic guitar"]),
                    ],
                ),
                cat(
                    "vocals",
                    vec![
                        inst("lead vocals", &["male lead vocals", "female lead vocals"]),
                        inst("backing vocals", &["choir"]),
                    ],
                ),
                cat(
                    "keys",
                    vec![
                        inst("piano", &["grand piano", "upright piano"]),
                        inst("synth lead", &["saw synth lead"]),
                    ],
                ),
                cat(
                    "strings",
                    vec![
                        inst("string ensemble", &["violin section", "cello section"]),
                    ],
                ),
            ],
        }
    }

    /// All labels at every level, category first.
    pub fn all_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.categories {
            out.push(c.name.clone());
            for i in &c.instruments {
                out.push(i.name.clone());
                for v in &i.variants {
                    out.push(v.clone());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.all_labels();
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.clone()) {
                return Err(Error::Invalid(format!("duplicate taxonomy label `{l}`")));
            }
        }
        Ok(())
    }

    /// Category owning a label at any level, if present.
    pub fn category_of(&self, label: &str) -> Option<&str> {
        for c in &self.categories {
            if c.name == label {
                return Some(&c.name);
            }
            for i in &c.instruments {
                if i.name == label || i.variants.iter().any(|v| v == label) {
                    return Some(&c.name);
                }
            }
        }
        None
    }
}

pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub alpha: Option<f32>,
    entries: BTreeMap<String, Vec<f32>>,
}

/// Result of a lookup: the vector plus whether it was an exact hit.
#[derive(Debug, Clone)]
pub struct LabelEmbedding<'a> {
    pub label: String,
    pub vector: &'a [f32],
    pub hit: bool,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: BTreeMap<String, Vec<f32>>, alpha: Option<f32>) -> Result<Self> {
        if !entries.contains_key(FALLBACK_LABEL) {
            return Err(Error::Format(format!(
                "embedding table missing the `{FALLBACK_LABEL}` fallback row"
            )));
        }
        for (label, v) in &entries {
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "row `{label}` has dimension {}, expected {dim}",
                    v.len()
                )));
            }
        }
        Ok(EmbeddingTable {
            dim,
            alpha,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn vector(&self, label: &str) -> Option<&[f32]> {
        self.entries.get(label).map(|v| v.as_slice())
    }

    /// Exact-match lookup after normalization; unknown labels fall back to
    /// the "music" row with `hit = false` so callers can record the miss.
    pub fn lookup(&self, label: &str) -> LabelEmbedding<'_> {
        let norm = normalize_label(label);
        match self.entries.get(&norm) {
            Some(v) => LabelEmbedding {
                label: norm,
                vector: v,
                hit: true,
            },
            None => LabelEmbedding {
                label: norm,
                vector: &self.entries[FALLBACK_LABEL],
                hit: false,
            },
        }
    }

    // ---- text format ----
    // header `p=<int> count=<int>[ alpha=<float>]`, then per row:
    // label TAB p space-separated decimal floats NEWLINE.

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("p={} count={}", self.dim, self.entries.len()));
        if let Some(a) = self.alpha {
            out.push_str(&format!(" alpha={a}"));
        }
        out.push('\n');
        for (label, v) in &self.entries {
            out.push_str(label);
            out.push('\t');
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{x}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty table file", path.display())))?;
        let mut dim = None;
        let mut count = None;
        let mut alpha = None;
        for field in header.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| {
                Error::Format(format!("{}: malformed header field `{field}`", path.display()))
            })?;
            match k {
                "p" => dim = Some(v.parse::<usize>().map_err(|e| {
                    Error::Format(format!("{}: bad p: {e}", path.display()))
                })?),
                "count" => count = Some(v.parse::<usize>().map_err(|e| {
                    Error::Format(format!("{}: bad count: {e}", path.display()))
                })?),
                "alpha" => alpha = v.parse::<f32>().ok(),
                _ => {
                    return Err(Error::Format(format!(
                        "{}: unknown header field `{k}`",
                        path.display()
                    )))
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::Format(format!("{}: header missing p", path.display())))?;
        let count =
            count.ok_or_else(|| Error::Format(format!("{}: header missing count", path.display())))?;
        let mut entries = BTreeMap::new();
        let mut offset = header.len() + 1;
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                offset += 1;
                continue;
            }
            let (label, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!(
                    "{}: line {} (byte offset {offset}): missing tab separator",
                    path.display(),
                    lineno + 2
                ))
            })?;
            let v: Vec<f32> = rest
                .split(' ')
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| {
                    Error::Format(format!(
                        "{}: line {} (byte offset {offset}): {e}",
                        path.display(),
                        lineno + 2
                    ))
                })?;
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "{}: line {} (byte offset {offset}): row `{label}` has {} values, expected {dim}",
                    path.display(),
                    lineno + 2,
                    v.len()
                )));
            }
            entries.insert(normalize_label(label), v);
            offset += line.len() + 1;
        }
        if entries.len() != count {
            return Err(Error::Format(format!(
                "{}: header says {count} rows, found {} (truncated payload, ends at byte {offset})",
                path.display(),
                entries.len()
            )));
        }
        EmbeddingTable::new(dim, entries, alpha)
    }

    /// Binary tensor-table container with labels as tensor names.
    pub fn load_binary(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut entries = BTreeMap::new();
        let mut dim = 0usize;
        for (name, _, data) in ckpt.tensors {
            dim = data.len();
            entries.insert(normalize_label(&name), data);
        }
        EmbeddingTable::new(dim, entries, None)
    }

    /// Load either format, sniffing the container magic.
    pub fn load(path: &Path) -> Result<Self> {
        let mut head = [0u8; 4];
        {
            use std::io::Read;
            let mut f = std::fs::File::open(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let _ = f.read(&mut head);
        }
        if &head == crate::model::checkpoint::MAGIC {
            Self::load_binary(path)
        } else {
            Self::load_text(path)
        }
    }
}

fn unit_random(rng: &mut ChaCha8Rng, p: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..p)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn renormalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= n;
    }
    v
}

fn blend(anchor: &[f32], noise: &[f32], alpha: f32) -> Vec<f32> {
    renormalize(
        anchor
            .iter()
            .zip(noise)
            .map(|(a, n)| alpha * a + (1.0 - alpha) * n)
            .collect(),
    )
}

/// Deterministic fixture table over a taxonomy.
///
/// Each category gets a unit anchor (near-orthogonal by Gram-Schmidt when
/// p >= #categories); instruments and variants are unit blends
/// `alpha * parent + (1 - alpha) * noise` so within-category cosines exceed
/// cross-category cosines in expectation.
pub fn generate_fixture_table(
    taxonomy: &InstrumentTaxonomy,
    p: usize,
    seed: u64,
    alpha: f32,
) -> Result<EmbeddingTable> {
    if p < 8 {
        return Err(Error::Config(format!("conditioning dim p={p} must be >= 8")));
    }
    taxonomy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cat = taxonomy.categories.len();
    let mut anchors: Vec<Vec<f32>> = Vec::with_capacity(n_cat);
    for _ in 0..n_cat {
        let mut v = unit_random(&mut rng, p);
        if p >= n_cat {
            for a in &anchors {
                let dot: f32 = v.iter().zip(a).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(a) {
                    *x -= dot * y;
                }
            }
            v = renormalize(v);
        }
        anchors.push(v);
    }
    let mut entries = BTreeMap::new();
    entries.insert(FALLBACK_LABEL.to_string(), unit_random(&mut rng, p));
    for (ci, c) in taxonomy.categories.iter().enumerate() {
        entries.insert(normalize_label(&c.name), anchors[ci].clone());
        for i in &c.instruments {
            let noise = unit_random(&mut rng, p);
            let iv = blend(&anchors[ci], &noise, alpha);
            entries.insert(normalize_label(&i.name), iv.clone());
            for var in &i.variants {
                let noise = unit_random(&mut rng, p);
                entries.insert(normalize_label(var), blend(&iv, &noise, alpha));
            }
        }
    }
    EmbeddingTable::new(p, entries, Some(alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        generate_fixture_table(&InstrumentTaxonomy::default_taxonomy(), 32, 42, DEFAULT_ALPHA)
            .unwrap()
    }

    #[test]
    fn lookup_normalizes_and_falls_back() {
        let t = table();
        let hit = t.lookup("Bass ");
        assert!(hit.hit);
        assert_eq!(hit.vector, t.vector("bass").unwrap());
        let miss = t.lookup("theremin");
        assert!(!miss.hit);
        assert_eq!(miss.vector, t.vector(FALLBACK_LABEL).unwrap());
        // purity
        assert_eq!(t.lookup("drums").vector, t.lookup("drums").vector);
    }

    #[test]
    fn fixture_is_deterministic_and_unit_norm() {
        let a = table();
        let b = table();
        for (la, lb) in a.labels().zip(b.labels()) {
            assert_eq!(la, lb);
            assert_eq!(a.vector(la), b.vector(lb));
        }
        for l in a.labels() {
            let n: f32 = a.vector(l).unwrap().iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "{l}: {n}");
        }
    }

    #[test]
    fn within_category_cosine_exceeds_cross_category() {
        let tax = InstrumentTaxonomy::default_taxonomy();
        let t = table();
        let cos = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        let mut within = vec![];
        let mut cross = vec![];
        let labels: Vec<String> = tax.all_labels().iter().map(|l| normalize_label(l)).collect();
        for (i, a) in labels.iter().enumerate() {
            for b in labels.iter().skip(i + 1) {
                let c = cos(t.vector(a).unwrap(), t.vector(b).unwrap());
                if tax.category_of(a) == tax.category_of(b) {
                    within.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        let mw = within.iter().sum::<f32>() / within.len() as f32;
        let mc = cross.iter().sum::<f32>() / cross.len() as f32;
        assert!(mw > mc + 0.2, "within {mw} vs cross {mc}");
    }

    #[test]
    fn text_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.tsv");
        let t = table();
        t.save_text(&path).unwrap();
        let back = EmbeddingTable::load(&path).unwrap();
        assert_eq!(back.dim, t.dim);
        assert_eq!(back.len(), t.len());
        for l in t.labels() {
            assert_eq!(back.vector(l).unwrap(), t.vector(l).unwrap(), "{l}");
        }
    }

    #[test]
    fn missing_music_row_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "p=8 count=1\nbass\t1 0 0 0 0 0 0 0\n").unwrap();
        let err = EmbeddingTable::load(&path).unwrap_err().to_string();
        assert!(err.contains("music"), "{err}");
    }

    #[test]
    fn truncated_and_inconsistent_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "p=8 count=3\nmusic\t1 0 0 0 0 0 0 0\n").unwrap();
        let err = EmbeddingTable::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte"), "{err}");

        std::fs::write(
            &path,
            "p=8 count=2\nmusic\t1 0 0 0 0 0 0 0\nbass\t1 0\n",
        )
        .unwrap();
        let err = EmbeddingTable::load(&path).unwrap_err().to_string();
        assert!(err.contains("expected 8"), "{err}");
    }

    #[test]
    fn binary_container_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        let t = table();
        let ckpt = Checkpoint {
            tensors: t
                .labels()
                .map(|l| (l.clone(), vec![t.dim], t.vector(l).unwrap().to_vec()))
                .collect(),
            ..Default::default()
        };
        ckpt.save(&path).unwrap();
        let back = EmbeddingTable::load(&path).unwrap();
        assert_eq!(back.len(), t.len());
        assert_eq!(back.vector("music"), t.vector("music"));
    }

    #[test]
    fn low_dim_rejected() {
        assert!(
            generate_fixture_table(&InstrumentTaxonomy::default_taxonomy(), 4, 1, 0.7).is_err()
        );
    }
}
