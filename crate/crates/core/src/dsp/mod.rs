//! Audio front end: WAV decoding, framing, power spectra, mel filterbank,
//! DCT and the `(p, t)` MFCC feature map.
//!
//! Framing follows the common "centered" convention: the signal is reflect
//! padded by `n_fft / 2` samples on both ends, so frame `j` is centered on
//! sample `j * hop` and a signal of `n` samples yields `1 + n / hop` frames.

mod featmap;
mod spectral;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use featmap::{read_feature_map, write_feature_map, FeatureMap, MFCM_MAGIC, MFCM_VERSION};
pub use spectral::{
    dct2_ortho, extract_mfcc, frame_count, hz_to_mel, idct2_ortho, mel_filterbank, mel_to_hz,
    power_spectrogram, Matrix,
};
pub use wav::{load_wav, load_wav_at, resample_linear, write_wav_pcm16};

/// Sample rate every recording is brought to before feature extraction.
pub const TARGET_SAMPLE_RATE: u32 = 22050;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let signal = AudioSignal {
            samples,
            sample_rate_hz,
        };
        signal.validate()?;
        Ok(signal)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Argument(format!("sample {i} is not finite")));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// MFCC extraction parameters.
///
/// Defaults: 22050 Hz, 2048-sample window, 512-sample hop, 128 Slaney mel
/// filters, 64 coefficients kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub centered: bool,
    /// Standardize every coefficient row to zero mean and unit variance over
    /// time after extraction. Off by default: the network sees raw maps.
    pub standardize: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate_hz: TARGET_SAMPLE_RATE,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            n_mfcc: 64,
            fmin_hz: 0.0,
            fmax_hz: TARGET_SAMPLE_RATE as f64 / 2.0,
            centered: true,
            standardize: false,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sample_rate_hz == 0 {
            return fail("sample_rate_hz must be positive".into());
        }
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 || self.n_mfcc == 0 {
            return fail("n_fft, hop, n_mels and n_mfcc must be positive (n_fft >= 2)".into());
        }
        if self.n_mfcc > self.n_mels {
            return fail(format!(
                "n_mfcc ({}) exceeds n_mels ({})",
                self.n_mfcc, self.n_mels
            ));
        }
        if self.hop > self.n_fft {
            return fail(format!("hop ({}) exceeds n_fft ({})", self.hop, self.n_fft));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return fail(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin_hz, self.fmax_hz
            ));
        }
        Ok(())
    }

    /// Seconds between the starts of consecutive frames.
    pub fn frame_period_secs(&self) -> f64 {
        self.hop as f64 / self.sample_rate_hz as f64
    }
}
