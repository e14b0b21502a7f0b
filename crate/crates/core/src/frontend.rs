//! Log-mel features, global CMVN, SpecAugment and speed perturbation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::{Audio, Utterance};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Matrix;

/// Floor applied to filterbank energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Variance clamp used by [`apply_cmvn`].
pub const VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Matrix,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale between 0 Hz and Nyquist,
/// `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Matrix {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
    }
    fb
}

/// Linear interpolation of each row onto `n_out` evenly spaced points.
fn resample_cols(m: &Matrix, n_out: usize) -> Matrix {
    let n_in = m.cols();
    let mut out = Matrix::zeros(m.rows(), n_out);
    for r in 0..m.rows() {
        let row = m.row(r);
        for j in 0..n_out {
            let pos = if n_out == 1 {
                0.0
            } else {
                j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            out.set(r, j, lerp(row, pos));
        }
    }
    out
}

fn lerp(values: &[f64], pos: f64) -> f64 {
    let i = pos.floor() as usize;
    if i + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let frac = pos - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}

/// Log-mel filterbank features.
///
/// Waveforms are framed with a Hamming window, giving
/// `T = floor((len − frame_length) / frame_shift) + 1`. Frame streams are
/// validated and passed through, interpolated along the feature axis when
/// their width differs from `n_mels`.
pub fn compute_log_mel(audio: &Audio, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    if cfg.n_mels == 0 {
        return Err(Error::invalid("n_mels must be positive"));
    }
    if !(cfg.frame_length_ms > 0.0 && cfg.frame_shift_ms > 0.0) {
        return Err(Error::invalid("frame length and shift must be positive"));
    }
    let data = match audio {
        Audio::Frames { frames, .. } => {
            if frames.rows() == 0 || frames.cols() == 0 {
                return Err(Error::Data("empty frame stream".into()));
            }
            if !frames.is_finite() {
                return Err(Error::NonFinite("frame stream".into()));
            }
            if frames.cols() == cfg.n_mels {
                frames.clone()
            } else {
                resample_cols(frames, cfg.n_mels)
            }
        }
        Audio::Wave {
            samples,
            sample_rate,
        } => waveform_log_mel(samples, *sample_rate, cfg)?,
    };
    Ok(FeatureMatrix {
        data,
        frame_shift_ms: cfg.frame_shift_ms,
        frame_length_ms: cfg.frame_length_ms,
    })
}

fn waveform_log_mel(samples: &[f64], sample_rate: u32, cfg: &FrontendConfig) -> Result<Matrix> {
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let sr = sample_rate as f64;
    let frame_len = (sr * cfg.frame_length_ms / 1000.0).round() as usize;
    let shift = ((sr * cfg.frame_shift_ms / 1000.0).round() as usize).max(1);
    if frame_len == 0 || samples.len() < frame_len {
        return Err(Error::Data(format!(
            "audio of {} samples is shorter than one {frame_len}-sample frame",
            samples.len()
        )));
    }
    let n_frames = (samples.len() - frame_len) / shift + 1;
    let n_fft = frame_len.next_power_of_two();
    let fb = mel_filterbank(cfg.n_mels, n_fft, sample_rate);
    let window: Vec<f64> = (0..frame_len)
        .map(|i| {
            if frame_len == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * i as f64 / (frame_len - 1) as f64).cos()
            }
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = Matrix::zeros(1, n_fft / 2 + 1);
    let mut out = Matrix::zeros(n_frames, cfg.n_mels);
    for t in 0..n_frames {
        let frame = &samples[t * shift..t * shift + frame_len];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < frame_len { frame[i] * window[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (b, p) in power.row_mut(0).iter_mut().enumerate() {
            *p = buf[b].norm_sqr();
        }
        let energies = power.matmul_nt(&fb);
        for (o, e) in out.row_mut(t).iter_mut().zip(energies.row(0)) {
            *o = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Global per-dimension feature statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

/// Corpus mean and population variance over every frame of `features`.
pub fn estimate_cmvn<'a, I>(features: I) -> Result<CmvnStats>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0u64;
    let mats: Vec<&Matrix> = features.into_iter().collect();
    for m in &mats {
        if sum.is_empty() {
            sum = vec![0.0; m.cols()];
        }
        if m.cols() != sum.len() {
            return Err(Error::Shape {
                name: "features".into(),
                expected: format!("{} columns", sum.len()),
                found: format!("{} columns", m.cols()),
            });
        }
        for r in 0..m.rows() {
            for (s, v) in sum.iter_mut().zip(m.row(r)) {
                *s += v;
            }
        }
        count += m.rows() as u64;
    }
    if count < 2 {
        return Err(Error::Data(format!("CMVN needs at least 2 frames, got {count}")));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; mean.len()];
    for m in &mats {
        for r in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok(CmvnStats { mean, var, count })
}

impl CmvnStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// 2 x F float matrix (mean row, variance row) with the frame count in
    /// the header's third field.
    pub fn save(&self, path: &Path) -> Result<()> {
        let m = Matrix::from_vec(2, self.dim(), [self.mean.clone(), self.var.clone()].concat());
        let count = u32::try_from(self.count).map_err(|_| Error::invalid("frame count exceeds u32"))?;
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        io::write_f32_matrix(&mut w, &m, count)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let (m, count) = io::read_f32_matrix(&mut BufReader::new(file))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if m.rows() != 2 {
            return Err(Error::Data(format!("CMVN file has {} rows, expected 2", m.rows())));
        }
        Ok(Self {
            mean: m.row(0).to_vec(),
            var: m.row(1).to_vec(),
            count: count as u64,
        })
    }
}

/// `(x − mean) / sqrt(max(var, VAR_FLOOR))` per dimension.
pub fn apply_cmvn(features: &Matrix, stats: &CmvnStats) -> Result<Matrix> {
    if features.cols() != stats.dim() {
        return Err(Error::Shape {
            name: "features".into(),
            expected: format!("{} columns", stats.dim()),
            found: format!("{} columns", features.cols()),
        });
    }
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / v.max(VAR_FLOOR).sqrt()).collect();
    let mut out = features.clone();
    for r in 0..out.rows() {
        for ((x, mu), s) in out.row_mut(r).iter_mut().zip(&stats.mean).zip(&inv) {
            *x = (*x - mu) * s;
        }
    }
    Ok(out)
}

/// Model input for a stored frame stream: log-mel pass-through, then CMVN.
pub fn features_from_frames(frames: &Matrix, cfg: &FrontendConfig, cmvn: Option<&CmvnStats>) -> Result<Matrix> {
    let audio = Audio::Frames {
        frames: frames.clone(),
        sample_rate: 16000,
    };
    let f = compute_log_mel(&audio, cfg)?.data;
    match cmvn {
        Some(s) => apply_cmvn(&f, s),
        None => Ok(f),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    pub max_freq_width: usize,
    pub max_time_width: usize,
    pub mask_value: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            n_time_masks: 5,
            max_freq_width: 4,
            max_time_width: 4,
            mask_value: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Freq,
    Time,
}

/// One masked band: `width` rows (time) or columns (freq) from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBand {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// [`spec_augment`] that also reports the bands it drew, frequency bands first.
pub fn spec_augment_with_masks(
    features: &Matrix,
    cfg: &SpecAugmentConfig,
    seed: u64,
) -> Result<(Matrix, Vec<MaskBand>)> {
    let (t, f) = features.shape();
    if cfg.max_freq_width > f || cfg.max_time_width > t {
        return Err(Error::invalid(format!(
            "mask widths ({}, {}) exceed feature dims ({t}, {f})",
            cfg.max_time_width, cfg.max_freq_width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bands = Vec::with_capacity(cfg.n_freq_masks + cfg.n_time_masks);
    for (axis, n, max_w, dim) in [
        (MaskAxis::Freq, cfg.n_freq_masks, cfg.max_freq_width, f),
        (MaskAxis::Time, cfg.n_time_masks, cfg.max_time_width, t),
    ] {
        for _ in 0..n {
            let width = rng.gen_range(0..=max_w);
            let start = rng.gen_range(0..=dim - width);
            bands.push(MaskBand { axis, start, width });
        }
    }
    let mut out = features.clone();
    for b in &bands {
        match b.axis {
            MaskAxis::Freq => {
                for r in 0..t {
                    out.row_mut(r)[b.start..b.start + b.width].fill(cfg.mask_value);
                }
            }
            MaskAxis::Time => {
                for r in b.start..b.start + b.width {
                    out.row_mut(r).fill(cfg.mask_value);
                }
            }
        }
    }
    Ok((out, bands))
}

/// Masks `n_freq_masks` frequency bands and `n_time_masks` time bands with
/// widths drawn uniformly from `[0, max_width]`. The input is left untouched.
pub fn spec_augment(features: &Matrix, cfg: &SpecAugmentConfig, seed: u64) -> Result<Matrix> {
    spec_augment_with_masks(features, cfg, seed).map(|(m, _)| m)
}

/// Output length of a speed-perturbed signal: `round(len / factor)`.
pub fn perturbed_len(len: usize, factor: f64) -> usize {
    (len as f64 / factor).round() as usize
}

/// Linear resampling of a waveform by `factor`.
pub fn resample_linear(samples: &[f64], factor: f64) -> Vec<f64> {
    let n = perturbed_len(samples.len(), factor);
    (0..n).map(|i| lerp(samples, i as f64 * factor)).collect()
}

/// Linear interpolation between frame rows.
pub fn resample_frames(frames: &Matrix, factor: f64) -> Matrix {
    let n = perturbed_len(frames.rows(), factor).max(1);
    let mut out = Matrix::zeros(n, frames.cols());
    let last = frames.rows() - 1;
    for i in 0..n {
        let pos = i as f64 * factor;
        let lo = (pos.floor() as usize).min(last);
        let hi = (lo + 1).min(last);
        let frac = if lo == last { 0.0 } else { pos - lo as f64 };
        for c in 0..frames.cols() {
            out.set(i, c, frames.get(lo, c) * (1.0 - frac) + frames.get(hi, c) * frac);
        }
    }
    out
}

/// Speed perturbation: the waveform (or frame stream) is resampled so its
/// length becomes `round(len / factor)`. Factor 1 returns an exact copy.
pub fn speed_perturb(utt: &Utterance, factor: f64) -> Result<Utterance> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("speed factor must be positive, got {factor}")));
    }
    if utt.audio.is_empty() {
        return Err(Error::Data(format!("utterance {:?} has no audio", utt.id)));
    }
    let audio = match &utt.audio {
        Audio::Wave {
            samples,
            sample_rate,
        } => Audio::Wave {
            samples: resample_linear(samples, factor),
            sample_rate: *sample_rate,
        },
        Audio::Frames { frames, sample_rate } => Audio::Frames {
            frames: resample_frames(frames, factor),
            sample_rate: *sample_rate,
        },
    };
    Ok(Utterance {
        audio,
        ..utt.clone()
    })
}

/// Overlap-add sine rendering of a frame stream: each feature dimension
/// drives a fixed-frequency sinusoid, Hann-windowed frames two shifts long.
pub fn render_waveform(frames: &Matrix, sample_rate: u32, frame_shift_ms: f64) -> Vec<f64> {
    let hop = ((sample_rate as f64 * frame_shift_ms / 1000.0).round() as usize).max(1);
    let win = 2 * hop;
    let n = (frames.rows() + 1) * hop;
    let nyquist = sample_rate as f64 / 2.0;
    let freqs: Vec<f64> = (0..frames.cols())
        .map(|k| nyquist * (k as f64 + 1.0) / (frames.cols() as f64 + 2.0))
        .collect();
    let mut out = vec![0.0; n];
    for t in 0..frames.rows() {
        let start = t * hop;
        for i in 0..win {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
            let time = (start + i) as f64 / sample_rate as f64;
            let s: f64 = frames
                .row(t)
                .iter()
                .zip(&freqs)
                .map(|(a, f)| a * (2.0 * PI * f * time).sin())
                .sum();
            out[start + i] += w * s;
        }
    }
    out
}
