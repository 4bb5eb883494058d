//! Audio front end: log-Mel spectrograms, 16x16 patch grids, silence check.
//!
//! Pinned conventions: Hann window, centered frames with reflect padding,
//! power spectrum, 80 triangular HTK-mel filters (unnormalized peaks) from
//! 0 Hz to Nyquist, natural log floored at 1e-10. Frame count is exactly
//! `duration / hop`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Power floor applied before the log.
pub const LOG_MEL_FLOOR: f32 = 1e-10;
/// RMS threshold below which a chunk counts as silent, in dBFS.
pub const SILENCE_THRESHOLD_DB: f32 = -48.0;

#[derive(Debug, Clone)]
pub struct AudioChunk {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioChunk {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioChunk {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f32>() / self.samples.len() as f32).sqrt()
    }
}

/// True iff the RMS level is below `threshold_db` dBFS.
pub fn is_silent(chunk: &AudioChunk, threshold_db: f32) -> bool {
    let rms = chunk.rms();
    if rms == 0.0 {
        return true;
    }
    20.0 * rms.log10() < threshold_db
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_secs: f64,
    pub hop_secs: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 80,
            window_secs: 0.025,
            hop_secs: 0.010,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogMelSpectrogram {
    /// Row-major `[n_mels x n_frames]`.
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl LogMelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank, dense `[n_mels x (n_fft/2 + 1)]`, peak value 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f32>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    // n_mels + 2 edge points, evenly spaced in mel
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![vec![0.0f32; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, w) in fb[m].iter_mut().enumerate() {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            if f > lo && f < hi {
                *w = if f <= center {
                    ((f - lo) / (center - lo)) as f32
                } else {
                    ((hi - f) / (hi - center)) as f32
                };
            }
        }
    }
    fb
}

/// Center frequencies of the triangular filters, in Hz.
pub fn filterbank_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn reflect_index(i: i64, len: i64) -> usize {
    // reflect without repeating the edge sample
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Log-Mel spectrogram with exactly `len / hop` frames.
pub fn log_mel(chunk: &AudioChunk, cfg: &MelConfig) -> Result<LogMelSpectrogram> {
    let sr = chunk.sample_rate;
    let win = (cfg.window_secs * sr as f64).round() as usize;
    let hop = (cfg.hop_secs * sr as f64).round() as usize;
    if chunk.samples.is_empty() {
        return Err(Error::Invalid("log_mel on empty audio".into()));
    }
    if chunk.samples.len() < win {
        return Err(Error::Invalid(format!(
            "chunk of {} samples is shorter than one {} sample window",
            chunk.samples.len(),
            win
        )));
    }
    let n_fft = win.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let n_frames = chunk.samples.len() / hop;

    let hann: Vec<f32> = (0..win)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / win as f64;
            (x.sin() * x.sin()) as f32
        })
        .collect();
    let fb = mel_filterbank(cfg.n_mels, n_fft, sr);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let len = chunk.samples.len() as i64;
    let mut values = vec![0.0f32; cfg.n_mels * n_frames];
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    let mut power = vec![0.0f32; n_bins];
    for t in 0..n_frames {
        let center = (t * hop) as i64;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                let src = reflect_index(center - (win / 2) as i64 + i as i64, len);
                Complex::new(chunk.samples[src] * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filt) in fb.iter().enumerate() {
            let e: f32 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * n_frames + t] = e.max(LOG_MEL_FLOOR).ln();
        }
    }
    Ok(LogMelSpectrogram {
        values,
        n_mels: cfg.n_mels,
        n_frames,
    })
}

pub const PATCH_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct PatchSequence {
    /// `[K x 256]`, each patch a row-major 16x16 tile (freq rows, time cols).
    pub patches: Vec<f32>,
    pub n_freq_patches: usize,
    pub n_time_patches: usize,
}

impl PatchSequence {
    pub fn k(&self) -> usize {
        self.n_freq_patches * self.n_time_patches
    }

    pub fn patch(&self, k: usize) -> &[f32] {
        let w = PATCH_SIZE * PATCH_SIZE;
        &self.patches[k * w..(k + 1) * w]
    }
}

/// Tile the spectrogram into 16x16 patches, frequency-major raster order
/// (`index = f * n_time_patches + t`). The time axis is padded with the log
/// floor value when not divisible by 16; `n_mels` must be divisible.
pub fn patchify(lms: &LogMelSpectrogram) -> Result<PatchSequence> {
    if lms.n_mels % PATCH_SIZE != 0 {
        return Err(Error::Invalid(format!(
            "n_mels {} not divisible by {}",
            lms.n_mels, PATCH_SIZE
        )));
    }
    let nf = lms.n_mels / PATCH_SIZE;
    let padded_frames = lms.n_frames.div_ceil(PATCH_SIZE) * PATCH_SIZE;
    let nt = padded_frames / PATCH_SIZE;
    let pad_value = LOG_MEL_FLOOR.ln();
    let mut patches = vec![0.0f32; nf * nt * PATCH_SIZE * PATCH_SIZE];
    for fp in 0..nf {
        for tp in 0..nt {
            let k = fp * nt + tp;
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    let mel = fp * PATCH_SIZE + r;
                    let frame = tp * PATCH_SIZE + c;
                    patches[k * 256 + r * PATCH_SIZE + c] = if frame < lms.n_frames {
                        lms.at(mel, frame)
                    } else {
                        pad_value
                    };
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        n_freq_patches: nf,
        n_time_patches: nt,
    })
}

/// Inverse of [`patchify`] (returns the padded grid when padding occurred).
pub fn unpatchify(seq: &PatchSequence) -> LogMelSpectrogram {
    let n_mels = seq.n_freq_patches * PATCH_SIZE;
    let n_frames = seq.n_time_patches * PATCH_SIZE;
    let mut values = vec![0.0f32; n_mels * n_frames];
    for fp in 0..seq.n_freq_patches {
        for tp in 0..seq.n_time_patches {
            let k = fp * seq.n_time_patches + tp;
            let patch = seq.patch(k);
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    values[(fp * PATCH_SIZE + r) * n_frames + tp * PATCH_SIZE + c] =
                        patch[r * PATCH_SIZE + c];
                }
            }
        }
    }
    LogMelSpectrogram {
        values,
        n_mels,
        n_frames,
    }
}

// ---- WAV I/O ----

/// Read a WAV file as mono f32 in [-1, 1]; multi-channel input is averaged.
pub fn read_wav(path: &std::path::Path) -> Result<AudioChunk> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let ch = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        (f, b) => {
            return Err(Error::Format(format!(
                "{}: unsupported wav format {f:?}/{b} bits",
                path.display()
            )))
        }
    };
    let samples = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks(ch)
            .map(|frame| frame.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    Ok(AudioChunk::new(samples, spec.sample_rate))
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &std::path::Path, chunk: &AudioChunk) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: chunk.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for &s in &chunk.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f32, secs: f64, sr: u32) -> AudioChunk {
        let n = (secs * sr as f64).round() as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
            .collect();
        AudioChunk::new(samples, sr)
    }

    #[test]
    fn silence_yields_floor_grid() {
        let chunk = AudioChunk::new(vec![0.0; 16000 * 8], 16000);
        let lms = log_mel(&chunk, &MelConfig::default()).unwrap();
        assert_eq!(lms.n_mels, 80);
        assert_eq!(lms.n_frames, 800);
        let floor = LOG_MEL_FLOOR.ln();
        assert!(lms.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn eight_seconds_gives_80_by_800() {
        let chunk = sine(440.0, 0.5, 8.0, 16000);
        let lms = log_mel(&chunk, &MelConfig::default()).unwrap();
        assert_eq!((lms.n_mels, lms.n_frames), (80, 800));
        assert!(lms.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_audio_rejected() {
        let chunk = AudioChunk::new(vec![], 16000);
        assert!(log_mel(&chunk, &MelConfig::default()).is_err());
    }

    #[test]
    fn sine_peaks_in_bracketing_filter() {
        // independent filterbank-center oracle: triangle weight at 440 Hz
        let sr = 16000u32;
        let n_mels = 80;
        let mel_max = hz_to_mel(sr as f64 / 2.0);
        let edge = |i: usize| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64);
        let weight_at = |m: usize, f: f64| {
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            if f <= lo || f >= hi {
                0.0
            } else if f <= c {
                (f - lo) / (c - lo)
            } else {
                (hi - f) / (hi - c)
            }
        };
        let expected = (0..n_mels)
            .max_by(|&a, &b| {
                weight_at(a, 440.0)
                    .partial_cmp(&weight_at(b, 440.0))
                    .unwrap()
            })
            .unwrap();

        let chunk = sine(440.0, 0.5, 1.0, sr);
        let lms = log_mel(&chunk, &MelConfig::default()).unwrap();
        for t in 5..lms.n_frames - 5 {
            let argmax = (0..n_mels)
                .max_by(|&a, &b| lms.at(a, t).partial_cmp(&lms.at(b, t)).unwrap())
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn is_silent_examples() {
        let zeros = AudioChunk::new(vec![0.0; 1600], 16000);
        assert!(is_silent(&zeros, SILENCE_THRESHOLD_DB));
        let loud = sine(220.0, 1.0, 0.5, 16000);
        assert!(!is_silent(&loud, SILENCE_THRESHOLD_DB));
        // sine at -60 dB amplitude: RMS = amp/sqrt(2) => ~ -63 dBFS < -48
        let quiet = sine(220.0, 10f32.powf(-60.0 / 20.0), 0.5, 16000);
        assert!(is_silent(&quiet, SILENCE_THRESHOLD_DB));
    }

    #[test]
    fn patchify_grid_sizes() {
        let lms = LogMelSpectrogram {
            values: vec![1.5; 80 * 800],
            n_mels: 80,
            n_frames: 800,
        };
        let seq = patchify(&lms).unwrap();
        assert_eq!(seq.k(), 250);
        assert_eq!((seq.n_freq_patches, seq.n_time_patches), (5, 50));
        // constant grid: every patch identical
        let first = seq.patch(0).to_vec();
        for k in 1..seq.k() {
            assert_eq!(seq.patch(k), &first[..]);
        }

        let small = LogMelSpectrogram {
            values: vec![0.0; 80 * 160],
            n_mels: 80,
            n_frames: 160,
        };
        assert_eq!(patchify(&small).unwrap().k(), 50);
    }

    #[test]
    fn patch_roundtrip_bit_exact() {
        let values: Vec<f32> = (0..80 * 160).map(|i| (i as f32).sin()).collect();
        let lms = LogMelSpectrogram {
            values: values.clone(),
            n_mels: 80,
            n_frames: 160,
        };
        let back = unpatchify(&patchify(&lms).unwrap());
        assert_eq!(back.values, values);
    }

    #[test]
    fn patchify_pads_time_with_floor() {
        let lms = LogMelSpectrogram {
            values: vec![2.0; 16 * 20],
            n_mels: 16,
            n_frames: 20,
        };
        let seq = patchify(&lms).unwrap();
        assert_eq!(seq.k(), 2);
        let back = unpatchify(&seq);
        assert_eq!(back.n_frames, 32);
        assert_eq!(back.at(0, 19), 2.0);
        assert_eq!(back.at(0, 20), LOG_MEL_FLOOR.ln());
    }

    #[test]
    fn time_shift_by_one_hop_shifts_columns() {
        let sr = 16000u32;
        let chunk = sine(330.0, 0.4, 1.0, sr);
        let hop = 160usize;
        let mut shifted = vec![0.0f32; chunk.samples.len()];
        shifted[hop..].copy_from_slice(&chunk.samples[..chunk.samples.len() - hop]);
        let a = log_mel(&chunk, &MelConfig::default()).unwrap();
        let b = log_mel(&AudioChunk::new(shifted, sr), &MelConfig::default()).unwrap();
        for m in 0..a.n_mels {
            for t in 2..a.n_frames - 2 {
                assert!(
                    (a.at(m, t) - b.at(m, t + 1)).abs() < 1e-5,
                    "mel {m} frame {t}: {} vs {}",
                    a.at(m, t),
                    b.at(m, t + 1)
                );
            }
        }
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let chunk = sine(500.0, 0.3, 0.5, 16000);
        let doubled = AudioChunk::new(chunk.samples.iter().map(|s| s * 2.0).collect(), 16000);
        let a = log_mel(&chunk, &MelConfig::default()).unwrap();
        let b = log_mel(&doubled, &MelConfig::default()).unwrap();
        let floor = LOG_MEL_FLOOR.ln();
        let ln4 = 4.0f32.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor + 1.0 && *y > floor + 1.0 {
                assert!((y - x - ln4).abs() < 1e-3, "{x} {y}");
            } else {
                assert!(y >= x);
            }
        }
    }

    #[test]
    fn wav_roundtrip_mono_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let chunk = sine(440.0, 0.25, 0.1, 16000);
        write_wav(&path, &chunk).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples.len(), chunk.samples.len());
        for (a, b) in back.samples.iter().zip(&chunk.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}
