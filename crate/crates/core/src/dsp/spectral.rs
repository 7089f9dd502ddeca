use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioSignal, FeatureMap, MfccConfig};
use crate::error::{Error, Result};

/// Floor applied to mel energies before the logarithm.
pub(crate) const LOG_FLOOR: f64 = 1e-10;

/// Dense row-major matrix used for spectrograms and filterbanks.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Number of analysis frames for a signal of `n_samples` samples.
pub fn frame_count(n_samples: usize, cfg: &MfccConfig) -> Result<usize> {
    if n_samples == 0 {
        return Err(Error::TooShort {
            n_samples,
            needed: 1,
        });
    }
    if cfg.hop == 0 {
        return Err(Error::Config("hop must be positive".into()));
    }
    if cfg.centered {
        Ok(1 + n_samples / cfg.hop)
    } else if n_samples < cfg.n_fft {
        Err(Error::TooShort {
            n_samples,
            needed: cfg.n_fft,
        })
    } else {
        Ok(1 + (n_samples - cfg.n_fft) / cfg.hop)
    }
}

/// Mirror index without repeating the edge sample (`[2, 1 | 0, 1, 2 | 1, 0]`).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Squared-magnitude STFT, shape `(n_fft / 2 + 1, t)`.
///
/// Each frame is multiplied by a periodic Hann window before the FFT. In
/// centered mode the signal is reflect padded by `n_fft / 2` at both ends.
pub fn power_spectrogram(signal: &AudioSignal, cfg: &MfccConfig) -> Result<Matrix> {
    signal.validate()?;
    cfg.validate()?;
    let n = signal.samples.len();
    let t = frame_count(n, cfg)?;
    let n_fft = cfg.n_fft;
    let n_bins = n_fft / 2 + 1;
    let offset = if cfg.centered { (n_fft / 2) as isize } else { 0 };

    let window = hann_periodic(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Matrix::zeros(n_bins, t);

    for frame in 0..t {
        let start = (frame * cfg.hop) as isize - offset;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = start + k as isize;
            let s = if idx >= 0 && (idx as usize) < n {
                signal.samples[idx as usize]
            } else {
                signal.samples[reflect_index(idx, n)]
            };
            *slot = Complex::new(s * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, z) in buf.iter().take(n_bins).enumerate() {
            out.data[bin * t + frame] = z.norm_sqr();
        }
    }
    Ok(out)
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz (`f / (200/3)`), logarithmic above
/// (`15 + ln(f / 1000) / (ln 6.4 / 27)`).
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular mel filterbank, shape `(n_mels, n_fft / 2 + 1)`.
///
/// Filter `i` rises from mel point `i` to `i + 1` and falls to `i + 2`, with
/// `n_mels + 2` points equally spaced in mel between `fmin` and `fmax`. Each
/// filter is scaled by `2 / (hz[i + 2] - hz[i])` so that all have equal area.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Matrix> {
    cfg.validate()?;
    let n_bins = cfg.n_fft / 2 + 1;
    let sr = cfg.sample_rate_hz as f64;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sr / cfg.n_fft as f64)
        .collect();

    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let n_points = cfg.n_mels + 2;
    let hz_points: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect();

    let mut fb = Matrix::zeros(cfg.n_mels, n_bins);
    for m in 0..cfg.n_mels {
        let (left, center, right) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        let norm = 2.0 / (right - left);
        let mut any = false;
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                any = true;
                fb.data[m * n_bins + k] = w * norm;
            }
        }
        if !any {
            return Err(Error::DegenerateFilter { index: m });
        }
    }
    Ok(fb)
}

fn dct_scale(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Orthonormal DCT-II basis: row `k`, column `n`.
fn dct_basis(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let s = dct_scale(k, n_in);
        for n in 0..n_in {
            basis[k * n_in + n] =
                s * (PI * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos();
        }
    }
    basis
}

/// Orthonormal DCT-II.
pub fn dct2_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let basis = dct_basis(n, n);
    (0..n)
        .map(|k| {
            basis[k * n..(k + 1) * n]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum()
        })
        .collect()
}

/// Inverse of [`dct2_ortho`] (orthonormal DCT-III).
pub fn idct2_ortho(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    let basis = dct_basis(n, n);
    (0..n)
        .map(|i| (0..n).map(|k| basis[k * n + i] * coeffs[k]).sum())
        .collect()
}

/// Full MFCC feature map of a signal.
///
/// `ln(max(mel_energy, 1e-10))` followed by an orthonormal DCT-II over the mel
/// axis, keeping the first `n_mfcc` coefficients. The output has one column
/// per frame.
pub fn extract_mfcc(signal: &AudioSignal, cfg: &MfccConfig) -> Result<FeatureMap> {
    let spec = power_spectrogram(signal, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let t = spec.cols;
    let n_bins = spec.rows;

    // Support of each filter, so the product skips the zero tails.
    let support: Vec<(usize, usize)> = (0..fb.rows)
        .map(|m| {
            let row = fb.row(m);
            let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w > 0.0).map_or(0, |i| i + 1);
            (lo, hi)
        })
        .collect();

    let mut log_mel = Matrix::zeros(cfg.n_mels, t);
    for m in 0..cfg.n_mels {
        let (lo, hi) = support[m];
        let out = &mut log_mel.data[m * t..(m + 1) * t];
        for k in lo..hi {
            let w = fb.data[m * n_bins + k];
            let spec_row = &spec.data[k * t..(k + 1) * t];
            for (o, &s) in out.iter_mut().zip(spec_row) {
                *o += w * s;
            }
        }
        for v in out.iter_mut() {
            *v = v.max(LOG_FLOOR).ln();
        }
    }

    let basis = dct_basis(cfg.n_mfcc, cfg.n_mels);
    let mut values = vec![0.0f64; cfg.n_mfcc * t];
    for k in 0..cfg.n_mfcc {
        let out = &mut values[k * t..(k + 1) * t];
        for m in 0..cfg.n_mels {
            let b = basis[k * cfg.n_mels + m];
            for (o, &v) in out.iter_mut().zip(log_mel.row(m)) {
                *o += b * v;
            }
        }
    }

    if cfg.standardize {
        for row in values.chunks_mut(t) {
            let mean = row.iter().sum::<f64>() / t as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
    }

    FeatureMap::new(
        cfg.n_mfcc,
        t,
        values.into_iter().map(|v| v as f32).collect(),
    )
}
