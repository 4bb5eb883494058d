//! Synthetic multi-track corpus: generation, manifests, and pair sampling.
//!
//! Each track draws a tempo and key; its stems are small deterministic
//! synthesizers sharing that tempo/key, so stems of one track are mutually
//! predictive while different tracks differ in tempo, key, and pattern.
//! Real datasets can be ingested by writing the same manifest by hand.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::FALLBACK_LABEL;
use crate::dsp::{is_silent, read_wav, write_wav, AudioChunk, SILENCE_THRESHOLD_DB};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
const STEM_PEAK: f32 = 0.2;
const MAX_PAIR_TRIES: u32 = 32;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StemRecord {
    pub stem_id: String,
    /// WAV path relative to the corpus root.
    pub audio: String,
    /// Root-to-leaf label path in the taxonomy; may be empty.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrackManifest {
    pub track_id: String,
    pub tempo_bpm: f32,
    pub key_pc: u8,
    pub stems: Vec<StemRecord>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusManifest {
    pub tracks: Vec<TrackManifest>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

#[derive(Debug, Clone)]
pub struct PairProvenance {
    pub track_id: String,
    pub target_stem: String,
    pub context_stems: Vec<String>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub context: AudioChunk,
    pub target: AudioChunk,
    pub label: String,
    pub provenance: PairProvenance,
}

/// A track with all stem audio resident in memory.
#[derive(Debug, Clone)]
pub struct LoadedTrack {
    pub manifest: TrackManifest,
    pub stems: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    pub n_tracks: usize,
    pub stems_min: usize,
    pub stems_max: usize,
    pub duration_secs: f32,
    pub seed: u64,
    /// Fraction of stems whose label path is left empty.
    pub empty_label_fraction: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_tracks: 20,
            stems_min: 4,
            stems_max: 6,
            duration_secs: 12.0,
            seed: 7,
            empty_label_fraction: 0.1,
        }
    }
}

fn semitone(base: f32, st: f32) -> f32 {
    base * (st / 12.0).exp2()
}

struct TrackSynth {
    sr: f32,
    n: usize,
    spb: usize,
    key_hz: f32, // root in a low octave (A1-based)
}

impl TrackSynth {
    fn new(tempo_bpm: f32, key_pc: u8, duration_secs: f32) -> Self {
        let sr = SAMPLE_RATE as f32;
        TrackSynth {
            sr,
            n: (duration_secs * sr).round() as usize,
            spb: (60.0 / tempo_bpm * sr).round() as usize,
            key_hz: semitone(55.0, key_pc as f32),
        }
    }

    fn normalize(mut v: Vec<f32>) -> Vec<f32> {
        let peak = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        if peak > 0.0 {
            let s = STEM_PEAK / peak;
            for x in v.iter_mut() {
                *x *= s;
            }
        }
        v
    }

    /// Kick on even beats, noise-burst snare on odd beats.
    fn drums(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut out = vec![0.0f32; self.n];
        let noise: Vec<f32> = (0..(self.sr * 0.1) as usize)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        for (i, x) in out.iter_mut().enumerate() {
            let beat = i / self.spb;
            let t = (i % self.spb) as f32 / self.sr;
            if beat % 2 == 0 {
                // kick: pitch sweep 120 -> 50 Hz, fast decay
                let f = 50.0 + 70.0 * (-t / 0.03).exp();
                let phase = 2.0 * std::f32::consts::PI * f * t;
                *x = phase.sin() * (-t / 0.06).exp();
            } else {
                let idx = (t * self.sr) as usize;
                if idx < noise.len() {
                    *x = noise[idx] * (-t / 0.04).exp();
                }
            }
        }
        Self::normalize(out)
    }

    /// Low sine riff alternating root and fifth, one note per beat.
    fn bass(&self) -> Vec<f32> {
        let pattern = [0.0f32, 0.0, 7.0, 0.0];
        let mut out = vec![0.0f32; self.n];
        for (i, x) in out.iter_mut().enumerate() {
            let beat = i / self.spb;
            let t = (i % self.spb) as f32 / self.sr;
            let f = semitone(self.key_hz, pattern[beat % 4]);
            let phase = 2.0 * std::f32::consts::PI * f * t;
            *x = phase.sin() * (-3.0 * t * self.sr / self.spb as f32).exp();
        }
        Self::normalize(out)
    }

    fn bandlimited_saw(&self, f: f32, t: f32) -> f32 {
        let nyq = 0.45 * self.sr;
        let h = (nyq / f).floor() as usize;
        let mut s = 0.0;
        for k in 1..=h.max(1) {
            s += (2.0 * std::f32::consts::PI * f * k as f32 * t).sin() / k as f32;
        }
        s
    }

    /// Band-limited sawtooth triad arpeggio, one note per half-beat.
    fn guitar(&self) -> Vec<f32> {
        let arp = [0.0f32, 4.0, 7.0, 12.0];
        let base = semitone(self.key_hz, 24.0);
        let half = (self.spb / 2).max(1);
        let mut out = vec![0.0f32; self.n];
        for (i, x) in out.iter_mut().enumerate() {
            let step = i / half;
            let t = (i % half) as f32 / self.sr;
            let f = semitone(base, arp[step % 4]);
            *x = self.bandlimited_saw(f, t + 0.001) * (-4.0 * t * self.sr / half as f32).exp();
        }
        Self::normalize(out)
    }

    /// Formant-weighted harmonic "voice" on a pentatonic melody, one note per beat.
    fn vocals(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let scale = [0.0f32, 2.0, 4.0, 7.0, 9.0];
        let n_beats = self.n / self.spb + 1;
        let melody: Vec<f32> = (0..n_beats)
            .map(|_| scale[rng.gen_range(0..scale.len())])
            .collect();
        let base = semitone(self.key_hz, 24.0);
        let formant = |f: f32| -> f32 {
            let a = ((f - 500.0) / 300.0).powi(2);
            let b = ((f - 1500.0) / 400.0).powi(2);
            (-a).exp() + 0.7 * (-b).exp()
        };
        let mut out = vec![0.0f32; self.n];
        for (i, x) in out.iter_mut().enumerate() {
            let beat = i / self.spb;
            let t = (i % self.spb) as f32 / self.sr;
            let tg = i as f32 / self.sr;
            let vib = 1.0 + 0.008 * (2.0 * std::f32::consts::PI * 5.5 * tg).sin();
            let f0 = semitone(base, melody[beat]) * vib;
            let mut s = 0.0;
            let mut k = 1.0f32;
            while f0 * k < 0.45 * self.sr && k <= 20.0 {
                s += formant(f0 * k) * (2.0 * std::f32::consts::PI * f0 * k * tg).sin();
                k += 1.0;
            }
            let beat_frac = t * self.sr / self.spb as f32;
            let env = (beat_frac * 8.0).min(1.0) * (1.0 - beat_frac).max(0.0).sqrt();
            *x = s * env;
        }
        Self::normalize(out)
    }

    /// Decaying harmonic triad struck on every beat, inversion per bar.
    fn piano(&self) -> Vec<f32> {
        let base = semitone(self.key_hz, 12.0);
        let chords = [[0.0f32, 4.0, 7.0], [4.0, 7.0, 12.0]];
        let mut out = vec![0.0f32; self.n];
        for (i, x) in out.iter_mut().enumerate() {
            let beat = i / self.spb;
            let t = (i % self.spb) as f32 / self.sr;
            let mut s = 0.0;
            for st in chords[(beat / 4) % 2] {
                let f = semitone(base, st);
                for (h, a) in [(1.0, 1.0), (2.0, 0.4), (3.0, 0.15)] {
                    s += a * (2.0 * std::f32::consts::PI * f * h * t).sin();
                }
            }
            *x = s * (-t / 0.25).exp();
        }
        Self::normalize(out)
    }

    /// Sustained saws on root + fifth, bowed swell once per beat.
    fn strings(&self) -> Vec<f32> {
        let base = semitone(self.key_hz, 12.0);
        let mut out = vec![0.0f32; self.n];
        for (i, x) in out.iter_mut().enumerate() {
            let t = i as f32 / self.sr;
            let mut s = 0.0;
            for st in [0.0f32, 7.0] {
                s += self.bandlimited_saw(semitone(base, st), t);
            }
            let beat_frac = (i % self.spb) as f32 / self.spb as f32;
            let swell = 0.15 + 0.85 * (std::f32::consts::PI * beat_frac).sin().powi(2);
            let attack = (t / 0.5).min(1.0);
            *x = s * swell * attack;
        }
        Self::normalize(out)
    }
}

struct StemKind {
    id: &'static str,
    /// Root-to-leaf path in the default taxonomy; the variant level is
    /// picked per stem.
    path: (&'static str, &'static str, &'static [&'static str]),
    core: bool,
}

const STEM_KINDS: &[StemKind] = &[
    StemKind {
        id: "drums",
        path: ("drums", "drum kit", &["rock drum kit", "jazz drum kit"]),
        core: true,
    },
    StemKind {
        id: "bass",
        path: ("bass", "synth bass", &["sub synth bass"]),
        core: true,
    },
    StemKind {
        id: "guitar",
        path: ("guitar", "electric guitar", &["lead electric guitar", "rhythm electric guitar"]),
        core: true,
    },
    StemKind {
        id: "vocals",
        path: ("vocals", "lead vocals", &["male lead vocals", "female lead vocals"]),
        core: true,
    },
    StemKind {
        id: "piano",
        path: ("keys", "piano", &["grand piano", "upright piano"]),
        core: false,
    },
    StemKind {
        id: "strings",
        path: ("strings", "string ensemble", &["violin section", "cello section"]),
        core: false,
    },
];

pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path, overwrite: bool) -> Result<Corpus> {
    if cfg.n_tracks == 0 {
        return Err(Error::Config("n_tracks must be >= 1".into()));
    }
    if cfg.stems_min < 2 || cfg.stems_max < cfg.stems_min || cfg.stems_max > STEM_KINDS.len() {
        return Err(Error::Config(format!(
            "stems per track must satisfy 2 <= min <= max <= {}",
            STEM_KINDS.len()
        )));
    }
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir.display().to_string(), e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Invalid(format!(
                "output directory {} is not empty; pass the overwrite flag to replace it",
                out_dir.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(out_dir)
                .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut tracks = Vec::with_capacity(cfg.n_tracks);
    for ti in 0..cfg.n_tracks {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (ti as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let tempo_bpm = (rng.gen_range(70.0f32..=140.0) * 10.0).round() / 10.0;
        let key_pc = rng.gen_range(0u8..12);
        let synth = TrackSynth::new(tempo_bpm, key_pc, cfg.duration_secs);

        let n_stems = rng.gen_range(cfg.stems_min..=cfg.stems_max);
        let mut order: Vec<usize> = (0..STEM_KINDS.len()).collect();
        // keep core stems first so small tracks stay mutually predictive
        let (core, extras) = order.split_at_mut(4);
        core.shuffle(&mut rng);
        extras.shuffle(&mut rng);
        order.truncate(n_stems);
        order.sort_unstable();
        debug_assert!(STEM_KINDS.iter().take(4).all(|k| k.core));

        let track_id = format!("track{ti:04}");
        let track_dir = out_dir.join(&track_id);
        std::fs::create_dir_all(&track_dir)
            .map_err(|e| Error::io(track_dir.display().to_string(), e))?;

        let mut stems = Vec::new();
        for &ki in &order {
            let kind = &STEM_KINDS[ki];
            let samples = match kind.id {
                "drums" => synth.drums(&mut rng),
                "bass" => synth.bass(),
                "guitar" => synth.guitar(),
                "vocals" => synth.vocals(&mut rng),
                "piano" => synth.piano(),
                "strings" => synth.strings(),
                _ => unreachable!(),
            };
            let rel = format!("{track_id}/{}.wav", kind.id);
            write_wav(
                &out_dir.join(&rel),
                &AudioChunk {
                    samples,
                    sample_rate: SAMPLE_RATE,
                },
            )?;
            let labels = if rng.gen::<f32>() < cfg.empty_label_fraction {
                vec![]
            } else {
                let (c, i, variants) = kind.path;
                let v = variants[rng.gen_range(0..variants.len())];
                vec![c.to_string(), i.to_string(), v.to_string()]
            };
            stems.push(StemRecord {
                stem_id: kind.id.to_string(),
                audio: rel,
                labels,
            });
        }
        tracks.push(TrackManifest {
            track_id,
            tempo_bpm,
            key_pc,
            stems,
        });
    }
    let manifest = CorpusManifest { tracks };
    let path = out_dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(Corpus {
        root: out_dir.to_path_buf(),
        manifest,
    })
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.toml");
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: CorpusManifest = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for t in &manifest.tracks {
            if t.stems.len() < 2 {
                return Err(Error::Format(format!(
                    "track {} has {} stems, need at least 2",
                    t.track_id,
                    t.stems.len()
                )));
            }
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load_track(&self, track: &TrackManifest) -> Result<LoadedTrack> {
        let mut stems = Vec::with_capacity(track.stems.len());
        let mut len = None;
        for s in &track.stems {
            let chunk = read_wav(&self.root.join(&s.audio))?;
            if chunk.sample_rate != SAMPLE_RATE {
                return Err(Error::Format(format!(
                    "{}: sample rate {} != {SAMPLE_RATE}",
                    s.audio, chunk.sample_rate
                )));
            }
            match len {
                None => len = Some(chunk.samples.len()),
                Some(l) if l != chunk.samples.len() => {
                    return Err(Error::Format(format!(
                        "track {}: stems differ in duration",
                        track.track_id
                    )))
                }
                _ => {}
            }
            stems.push(chunk.samples);
        }
        Ok(LoadedTrack {
            manifest: track.clone(),
            stems,
        })
    }
}

/// Sample-wise sum with a peak clamp to [-1, 1].
pub fn mix(chunks: &[&AudioChunk]) -> Result<AudioChunk> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::Invalid("mix of zero chunks".into()))?;
    let len = first.samples.len();
    for c in chunks {
        if c.samples.len() != len || c.sample_rate != first.sample_rate {
            return Err(Error::Invalid(format!(
                "mix length/rate mismatch: {} vs {}",
                c.samples.len(),
                len
            )));
        }
    }
    let mut samples = vec![0.0f32; len];
    for c in chunks {
        for (o, x) in samples.iter_mut().zip(&c.samples) {
            *o += x;
        }
    }
    for x in samples.iter_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
    Ok(AudioChunk {
        samples,
        sample_rate: first.sample_rate,
    })
}

fn chunk_of(samples: &[f32], offset: usize, len: usize) -> AudioChunk {
    AudioChunk {
        samples: samples[offset..offset + len].to_vec(),
        sample_rate: SAMPLE_RATE,
    }
}

/// Draw one (context mix, target stem, label) pair from a loaded track.
///
/// Target stem uniform; each remaining stem joins the context independently
/// with probability 1/2, redrawn while empty; chunk offset uniform; up to 32
/// rejection tries for the silence check. Returns None when the track never
/// yields a non-silent pair, which callers should log and skip.
pub fn sample_pair(
    track: &LoadedTrack,
    rng: &mut ChaCha8Rng,
    chunk_samples: usize,
) -> Result<Option<TrainingPair>> {
    let n = track.stems.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "track {} has fewer than 2 stems",
            track.manifest.track_id
        )));
    }
    let track_len = track.stems[0].len();
    if chunk_samples > track_len {
        return Err(Error::Invalid(format!(
            "chunk of {chunk_samples} samples exceeds track length {track_len}"
        )));
    }
    for _ in 0..MAX_PAIR_TRIES {
        let target_idx = rng.gen_range(0..n);
        let mut context_idx: Vec<usize>;
        loop {
            context_idx = (0..n)
                .filter(|&i| i != target_idx && rng.gen::<bool>())
                .collect();
            if !context_idx.is_empty() {
                break;
            }
        }
        let offset = rng.gen_range(0..=track_len - chunk_samples);
        let target = chunk_of(&track.stems[target_idx], offset, chunk_samples);
        let ctx_chunks: Vec<AudioChunk> = context_idx
            .iter()
            .map(|&i| chunk_of(&track.stems[i], offset, chunk_samples))
            .collect();
        let context = mix(&ctx_chunks.iter().collect::<Vec<_>>())?;
        if is_silent(&target, SILENCE_THRESHOLD_DB) || is_silent(&context, SILENCE_THRESHOLD_DB) {
            continue;
        }
        let path = &track.manifest.stems[target_idx].labels;
        let label = if path.is_empty() {
            FALLBACK_LABEL.to_string()
        } else {
            path[rng.gen_range(0..path.len())].clone()
        };
        return Ok(Some(TrainingPair {
            context,
            target,
            label,
            provenance: PairProvenance {
                track_id: track.manifest.track_id.clone(),
                target_stem: track.manifest.stems[target_idx].stem_id.clone(),
                context_stems: context_idx
                    .iter()
                    .map(|&i| track.manifest.stems[i].stem_id.clone())
                    .collect(),
                offset,
            },
        }));
    }
    Ok(None)
}

/// Rebuild the audio of a pair from its provenance, bit-exactly.
pub fn reconstruct_pair(
    corpus: &Corpus,
    prov: &PairProvenance,
    chunk_samples: usize,
) -> Result<(AudioChunk, AudioChunk)> {
    let track = corpus
        .manifest
        .tracks
        .iter()
        .find(|t| t.track_id == prov.track_id)
        .ok_or_else(|| Error::Invalid(format!("unknown track {}", prov.track_id)))?;
    let loaded = corpus.load_track(track)?;
    let stem_idx = |id: &str| -> Result<usize> {
        track
            .stems
            .iter()
            .position(|s| s.stem_id == id)
            .ok_or_else(|| Error::Invalid(format!("unknown stem {id} in {}", prov.track_id)))
    };
    let target = chunk_of(&loaded.stems[stem_idx(&prov.target_stem)?], prov.offset, chunk_samples);
    let ctx: Vec<AudioChunk> = prov
        .context_stems
        .iter()
        .map(|id| Ok(chunk_of(&loaded.stems[stem_idx(id)?], prov.offset, chunk_samples)))
        .collect::<Result<_>>()?;
    let context = mix(&ctx.iter().collect::<Vec<_>>())?;
    Ok((context, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CorpusConfig {
        CorpusConfig {
            n_tracks: 4,
            duration_secs: 6.0,
            ..CorpusConfig::default()
        }
    }

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = vec![];
        fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            for e in std::fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(&p, base, out);
                } else {
                    out.push((
                        p.strip_prefix(base).unwrap().to_string_lossy().into_owned(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        walk(dir, dir, &mut files);
        files.sort();
        files
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&tiny_cfg(), d1.path(), false).unwrap();
        generate_corpus(&tiny_cfg(), d2.path(), false).unwrap();
        assert_eq!(read_all(d1.path()), read_all(d2.path()));
    }

    #[test]
    fn refuses_non_empty_dir_without_overwrite() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("keep.txt"), "x").unwrap();
        assert!(generate_corpus(&tiny_cfg(), d.path(), false).is_err());
        assert!(generate_corpus(&tiny_cfg(), d.path(), true).is_ok());
    }

    #[test]
    fn stems_are_non_silent_and_manifest_loads() {
        let d = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny_cfg(), d.path(), false).unwrap();
        let loaded = Corpus::load(d.path()).unwrap();
        assert_eq!(loaded.manifest.tracks.len(), corpus.manifest.tracks.len());
        for t in &loaded.manifest.tracks {
            let lt = loaded.load_track(t).unwrap();
            for (s, samples) in t.stems.iter().zip(&lt.stems) {
                assert!(
                    !is_silent(
                        &AudioChunk {
                            samples: samples.clone(),
                            sample_rate: SAMPLE_RATE
                        },
                        SILENCE_THRESHOLD_DB
                    ),
                    "{}/{} silent",
                    t.track_id,
                    s.stem_id
                );
            }
        }
    }

    #[test]
    fn mix_identities() {
        let a = AudioChunk {
            samples: vec![0.1, -0.2, 0.3],
            sample_rate: SAMPLE_RATE,
        };
        let b = AudioChunk {
            samples: vec![-0.1, 0.2, -0.3],
            sample_rate: SAMPLE_RATE,
        };
        assert_eq!(mix(&[&a]).unwrap().samples, a.samples);
        assert_eq!(mix(&[&a, &b]).unwrap().samples, vec![0.0, 0.0, 0.0]);
        assert_eq!(
            mix(&[&a, &b]).unwrap().samples,
            mix(&[&b, &a]).unwrap().samples
        );
        let short = AudioChunk {
            samples: vec![0.1],
            sample_rate: SAMPLE_RATE,
        };
        assert!(mix(&[&a, &short]).is_err());
    }

    #[test]
    fn two_stem_track_context_is_the_other_stem() {
        let d = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_tracks: 1,
            stems_min: 2,
            stems_max: 2,
            duration_secs: 6.0,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg, d.path(), false).unwrap();
        let lt = corpus.load_track(&corpus.manifest.tracks[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = sample_pair(&lt, &mut rng, SAMPLE_RATE as usize).unwrap().unwrap();
            assert_eq!(p.provenance.context_stems.len(), 1);
            assert_ne!(p.provenance.context_stems[0], p.provenance.target_stem);
        }
    }

    #[test]
    fn label_levels_uniform_over_hierarchy() {
        let d = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_tracks: 1,
            stems_min: 4,
            stems_max: 4,
            duration_secs: 6.0,
            empty_label_fraction: 0.0,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg, d.path(), false).unwrap();
        let lt = corpus.load_track(&corpus.manifest.tracks[0]).unwrap();
        // per-stem level counts: labels[0]=level0 etc.
        let mut counts = std::collections::HashMap::<(String, usize), usize>::new();
        let mut totals = std::collections::HashMap::<String, usize>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30_000 {
            let p = sample_pair(&lt, &mut rng, SAMPLE_RATE as usize).unwrap().unwrap();
            let stem = lt
                .manifest
                .stems
                .iter()
                .find(|s| s.stem_id == p.provenance.target_stem)
                .unwrap();
            let level = stem.labels.iter().position(|l| *l == p.label).unwrap();
            *counts.entry((stem.stem_id.clone(), level)).or_default() += 1;
            *totals.entry(stem.stem_id.clone()).or_default() += 1;
        }
        for ((stem, level), c) in &counts {
            let frac = *c as f64 / totals[stem] as f64;
            assert!(
                (frac - 1.0 / 3.0).abs() < 0.02,
                "{stem} level {level}: {frac}"
            );
        }
    }

    #[test]
    fn unlabeled_stem_gets_music_label() {
        let d = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_tracks: 1,
            stems_min: 4,
            stems_max: 4,
            duration_secs: 6.0,
            empty_label_fraction: 1.0,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg, d.path(), false).unwrap();
        let lt = corpus.load_track(&corpus.manifest.tracks[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = sample_pair(&lt, &mut rng, SAMPLE_RATE as usize).unwrap().unwrap();
            assert_eq!(p.label, FALLBACK_LABEL);
        }
    }

    #[test]
    fn provenance_reconstructs_pair_bit_exactly() {
        let d = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny_cfg(), d.path(), false).unwrap();
        let lt = corpus.load_track(&corpus.manifest.tracks[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = sample_pair(&lt, &mut rng, SAMPLE_RATE as usize).unwrap().unwrap();
        let (ctx, tgt) = reconstruct_pair(&corpus, &p.provenance, SAMPLE_RATE as usize).unwrap();
        assert_eq!(ctx.samples, p.context.samples);
        assert_eq!(tgt.samples, p.target.samples);
    }

    /// Onset-envelope autocorrelation at the beat lag: all stems of a track
    /// share the track's fundamental period.
    #[test]
    fn tempo_shows_in_stem_autocorrelation() {
        let d = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_tracks: 10,
            duration_secs: 8.0,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg, d.path(), false).unwrap();
        let hop = 160usize; // 10 ms envelope resolution
        for t in &corpus.manifest.tracks {
            let lt = corpus.load_track(t).unwrap();
            let beat_lag = (60.0 / t.tempo_bpm * SAMPLE_RATE as f32 / hop as f32).round() as usize;
            for (s, samples) in t.stems.iter().zip(&lt.stems) {
                let env: Vec<f64> = samples
                    .chunks(hop)
                    .map(|c| c.iter().map(|x| (*x as f64).powi(2)).sum::<f64>())
                    .collect();
                let mean = env.iter().sum::<f64>() / env.len() as f64;
                let e: Vec<f64> = env.iter().map(|x| x - mean).collect();
                let ac = |lag: usize| -> f64 {
                    (0..e.len() - lag).map(|i| e[i] * e[i + lag]).sum::<f64>()
                };
                let zero = ac(0);
                // local search absorbs rounding of the beat to whole samples
                let peak = (beat_lag.saturating_sub(2)..=beat_lag + 2)
                    .map(ac)
                    .fold(f64::MIN, f64::max);
                assert!(
                    peak > 0.3 * zero,
                    "{}/{}: autocorr at beat lag {} is {:.3} of peak",
                    t.track_id,
                    s.stem_id,
                    beat_lag,
                    peak / zero
                );
            }
        }
    }
}
