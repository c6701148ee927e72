//! Waveform to 40-dim log-Mel features, plus training-time augmentation.
//!
//! Geometry is fixed: 16 kHz input, 25 ms Hann window, 10 ms shift,
//! 512-point FFT, 40 triangular Mel filters spanning 0-8000 Hz, natural log
//! with a 1e-10 floor.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::LanguageLabel;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400; // 25 ms
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL_BINS: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }
}

/// One utterance's features: `frames` is `[T x 40]`.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub valid_length: usize,
    pub utterance_id: String,
    pub language: LanguageLabel,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, utterance_id: String, language: LanguageLabel) -> Result<Self> {
        let (t, d) = frames.dims2()?;
        if d != NUM_MEL_BINS {
            return Err(Error::Data(format!(
                "feature matrix must have {NUM_MEL_BINS} columns, got {d}"
            )));
        }
        frames.validate_finite(&format!("features of {utterance_id}"))?;
        Ok(FeatureSequence {
            frames,
            valid_length: t,
            utterance_id,
            language,
        })
    }
}

/// Number of frames produced for `n` samples, if at least one window fits.
pub fn num_frames(n: usize) -> Option<usize> {
    if n < FRAME_LEN {
        None
    } else {
        Some(1 + (n - FRAME_LEN) / FRAME_SHIFT)
    }
}

/// Center frequencies of the 40 Mel filters in Hz.
pub fn mel_filter_centers() -> [f64; NUM_MEL_BINS] {
    let pts = mel_points();
    let mut out = [0.0; NUM_MEL_BINS];
    for (i, v) in out.iter_mut().enumerate() {
        *v = pts[i + 1];
    }
    out
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// 42 boundary points in Hz, equally spaced on the Mel scale over 0-8000 Hz.
fn mel_points() -> [f64; NUM_MEL_BINS + 2] {
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(8000.0);
    let mut pts = [0.0; NUM_MEL_BINS + 2];
    for (i, p) in pts.iter_mut().enumerate() {
        let m = lo + (hi - lo) * i as f64 / (NUM_MEL_BINS + 1) as f64;
        *p = mel_to_hz(m);
    }
    pts
}

/// Triangular filterbank over the 257 real FFT bins.
fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let pts = mel_points();
    let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
    let mut filters = Vec::with_capacity(NUM_MEL_BINS);
    for j in 0..NUM_MEL_BINS {
        let (left, center, right) = (pts[j], pts[j + 1], pts[j + 2]);
        let mut taps = Vec::new();
        for bin in 0..=FFT_SIZE / 2 {
            let f = bin as f64 * bin_hz;
            let w = if f > left && f < center {
                (f - left) / (center - left)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((bin, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// Log-Mel features `[T x 40]` from a 16 kHz waveform.
pub fn compute_log_mel(w: &Waveform) -> Result<Tensor> {
    let n = w.samples.len();
    let t = num_frames(n).ok_or(Error::UtteranceTooShort {
        len: n,
        min: FRAME_LEN,
    })?;
    let window: Vec<f64> = (0..FRAME_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (FRAME_LEN - 1) as f64).cos())
        .collect();
    let filters = mel_filterbank();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut out = vec![0.0; t * NUM_MEL_BINS];
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for fi in 0..t {
        let start = fi * FRAME_SHIFT;
        for i in 0..FFT_SIZE {
            let v = if i < FRAME_LEN {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..=FFT_SIZE / 2].iter().map(|c| c.norm_sqr()).collect();
        for (j, taps) in filters.iter().enumerate() {
            let mut e = 0.0;
            for &(bin, wgt) in taps {
                e += wgt * power[bin];
            }
            out[fi * NUM_MEL_BINS + j] = e.max(LOG_FLOOR).ln();
        }
    }
    Tensor::new(vec![t, NUM_MEL_BINS], out)
}

/// Linear-interpolation resampling by `factor` in {0.9, 1.0, 1.1};
/// output length is `round(n / factor)`.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    const FACTORS: [f64; 3] = [0.9, 1.0, 1.1];
    if !FACTORS.iter().any(|f| (f - factor).abs() < 1e-9) {
        return Err(Error::InvalidArg(format!(
            "speed perturbation factor must be one of {FACTORS:?}, got {factor}"
        )));
    }
    if (factor - 1.0).abs() < 1e-9 {
        return Ok(w.clone());
    }
    let n = w.samples.len();
    let out_len = (n as f64 / factor).round() as usize;
    let mut samples = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = (i as f64 * factor).min((n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = pos - i0 as f64;
        samples.push(w.samples[i0] * (1.0 - frac) + w.samples[i1] * frac);
    }
    Waveform::new(samples, w.sample_rate)
}

/// Time/frequency masking parameters. Masks have the configured widths and
/// seeded random positions; masked cells take the utterance mean.
#[derive(Debug, Clone)]
pub struct SpecAugmentConfig {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub seed: u64,
}

impl SpecAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_freq_width > NUM_MEL_BINS {
            return Err(Error::InvalidArg(format!(
                "freq mask width {} exceeds {NUM_MEL_BINS} bins",
                self.max_freq_width
            )));
        }
        Ok(())
    }
}

/// Apply SpecAugment-style masking to a `[T x 40]` feature matrix.
pub fn spec_augment(frames: &Tensor, cfg: &SpecAugmentConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (t, d) = frames.dims2()?;
    let mut out = frames.clone();
    if cfg.num_freq_masks == 0 && cfg.num_time_masks == 0 {
        return Ok(out);
    }
    let mean = frames.data.iter().sum::<f64>() / frames.data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.num_freq_masks {
        let width = cfg.max_freq_width.min(d);
        if width == 0 {
            continue;
        }
        let f0 = rng.gen_range(0..=d - width);
        for row in out.data.chunks_exact_mut(d) {
            for v in &mut row[f0..f0 + width] {
                *v = mean;
            }
        }
    }
    for _ in 0..cfg.num_time_masks {
        let width = cfg.max_time_width.min(t);
        if width == 0 {
            continue;
        }
        let t0 = rng.gen_range(0..=t - width);
        for row in out.data[t0 * d..(t0 + width) * d].chunks_exact_mut(d) {
            row.fill(mean);
        }
    }
    Ok(out)
}

// ---- minimal PCM16 mono WAV I/O ------------------------------------------

/// Read a mono 16-bit little-endian PCM WAV at 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((audio_format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let (audio_format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if audio_format != 1 || channels != 1 || bits != 16 {
        return Err(bad("expected mono 16-bit PCM"));
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Write a mono 16-bit PCM WAV at 16 kHz.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples: Vec<f64> = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let f = compute_log_mel(&w).unwrap();
        assert_eq!(f.shape, vec![98, 40]);
    }

    #[test]
    fn frame_count_formula_over_range() {
        for n in [400usize, 401, 559, 560, 561, 1000, 64_000] {
            let w = Waveform::new(vec![0.0; n], SAMPLE_RATE).unwrap();
            let f = compute_log_mel(&w).unwrap();
            assert_eq!(f.shape[0], 1 + (n - 400) / 160, "n = {n}");
        }
    }

    #[test]
    fn too_short_input_is_an_error() {
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        match compute_log_mel(&w) {
            Err(Error::UtteranceTooShort { len: 399, min: 400 }) => {}
            other => panic!("expected UtteranceTooShort, got {other:?}"),
        }
    }

    #[test]
    fn silence_hits_log_floor() {
        let w = Waveform::new(vec![0.0; 800], SAMPLE_RATE).unwrap();
        let f = compute_log_mel(&w).unwrap();
        for v in &f.data {
            assert_eq!(*v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn pure_tone_peaks_at_nearest_filter() {
        let centers = mel_filter_centers();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0)
                    .abs()
                    .partial_cmp(&(b.1 - 1000.0).abs())
                    .unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        let w = tone(1000.0, 0.5, 0.8);
        let f = compute_log_mel(&w).unwrap();
        for row in f.data.chunks_exact(NUM_MEL_BINS) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected);
        }
    }

    #[test]
    fn scaling_waveform_shifts_log_mel_by_2_ln_c() {
        let w = tone(700.0, 0.2, 0.2);
        let mut scaled = w.clone();
        let c = 2.5;
        for s in &mut scaled.samples {
            *s *= c;
        }
        let f1 = compute_log_mel(&w).unwrap();
        let f2 = compute_log_mel(&scaled).unwrap();
        let shift = 2.0 * c.ln();
        for (a, b) in f1.data.iter().zip(&f2.data) {
            if *a > LOG_FLOOR.ln() + 1.0 {
                assert!((b - a - shift).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn speed_perturb_identity_and_lengths() {
        let w = tone(440.0, 0.5, 0.5);
        let same = speed_perturb(&w, 1.0).unwrap();
        assert_eq!(same.samples, w.samples);

        let w9k = Waveform::new(vec![0.1; 9000], SAMPLE_RATE).unwrap();
        let slow = speed_perturb(&w9k, 0.9).unwrap();
        assert_eq!(slow.samples.len(), 10_000);

        assert!(speed_perturb(&w, 1.05).is_err());
    }

    #[test]
    fn speed_perturb_ramp_matches_linear_interpolation() {
        let n = 1000;
        let samples: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let out = speed_perturb(&w, 1.1).unwrap();
        assert_eq!(out.samples.len(), (n as f64 / 1.1).round() as usize);
        for (i, v) in out.samples.iter().enumerate() {
            let pos = (i as f64 * 1.1).min((n - 1) as f64);
            assert!((v - pos / n as f64).abs() <= 1e-9);
        }
    }

    #[test]
    fn spec_augment_zero_masks_is_identity() {
        let frames = Tensor::new(vec![5, 40], (0..200).map(|i| i as f64).collect()).unwrap();
        let cfg = SpecAugmentConfig {
            num_freq_masks: 0,
            max_freq_width: 10,
            num_time_masks: 0,
            max_time_width: 10,
            seed: 1,
        };
        assert_eq!(spec_augment(&frames, &cfg).unwrap().data, frames.data);
    }

    #[test]
    fn spec_augment_full_band_mask_means_everything() {
        let frames = Tensor::new(vec![5, 40], (0..200).map(|i| i as f64).collect()).unwrap();
        let mean = frames.data.iter().sum::<f64>() / 200.0;
        let cfg = SpecAugmentConfig {
            num_freq_masks: 1,
            max_freq_width: 40,
            num_time_masks: 0,
            max_time_width: 0,
            seed: 3,
        };
        let out = spec_augment(&frames, &cfg).unwrap();
        for v in &out.data {
            assert_eq!(*v, mean);
        }
    }

    #[test]
    fn spec_augment_deterministic_and_finite() {
        let frames = Tensor::new(vec![20, 40], (0..800).map(|i| (i as f64).sin()).collect()).unwrap();
        let cfg = SpecAugmentConfig {
            num_freq_masks: 2,
            max_freq_width: 7,
            num_time_masks: 2,
            max_time_width: 5,
            seed: 7,
        };
        let a = spec_augment(&frames, &cfg).unwrap();
        let b = spec_augment(&frames, &cfg).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, frames.shape);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wav_round_trip() {
        let w = tone(440.0, 0.05, 0.5);
        let dir = std::env::temp_dir().join("ddcf_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.wav");
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), w.samples.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 1.0 / 32_000.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
