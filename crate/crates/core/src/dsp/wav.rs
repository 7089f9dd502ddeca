use std::path::Path;

use super::{AudioSignal, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Loads a 16-bit PCM WAV file as mono audio at 22050 Hz.
///
/// Stereo is averaged to mono, samples are scaled by `1/32768`, and other
/// sample rates are linearly resampled.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    load_wav_at(path, TARGET_SAMPLE_RATE)
}

/// [`load_wav`] with an explicit output sample rate.
pub fn load_wav_at(path: impl AsRef<Path>, target_rate_hz: u32) -> Result<AudioSignal> {
    let path = path.as_ref();
    if target_rate_hz == 0 {
        return Err(Error::Argument("target sample rate must be positive".into()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    check_format_tag(path, &bytes)?;
    let reader =
        hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: floating-point samples, expected 16-bit PCM",
            path.display()
        )));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {}-bit samples, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels != 1 && channels != 2 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {channels} channels, expected mono or stereo",
            path.display()
        )));
    }

    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<i16>, _>>()
        .map_err(|e| map_hound(path, e))?;
    let scale = 1.0 / 32768.0;
    let mono: Vec<f64> = if channels == 1 {
        raw.iter().map(|&s| s as f64 * scale).collect()
    } else {
        raw.chunks_exact(2)
            .map(|lr| (lr[0] as f64 + lr[1] as f64) * 0.5 * scale)
            .collect()
    };

    let samples = if spec.sample_rate == target_rate_hz {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, target_rate_hz)
    };
    AudioSignal::new(samples, target_rate_hz)
}

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Rejects non-PCM encodings from the `fmt ` chunk before full parsing, so a
/// compressed file is reported as unsupported rather than malformed.
fn check_format_tag(path: &Path, bytes: &[u8]) -> Result<()> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if len < 16 || body + 16 > bytes.len() {
                return Err(Error::Format(format!("{}: truncated fmt chunk", path.display())));
            }
            let mut tag = u16::from_le_bytes([bytes[body], bytes[body + 1]]);
            if tag == WAVE_FORMAT_EXTENSIBLE && len >= 40 && body + 26 <= bytes.len() {
                // First two bytes of the sub-format GUID carry the real tag.
                tag = u16::from_le_bytes([bytes[body + 24], bytes[body + 25]]);
            }
            return match tag {
                WAVE_FORMAT_PCM => Ok(()),
                WAVE_FORMAT_IEEE_FLOAT => Err(Error::UnsupportedEncoding(format!(
                    "{}: floating-point samples, expected 16-bit PCM",
                    path.display()
                ))),
                other => Err(Error::UnsupportedEncoding(format!(
                    "{}: format tag {other:#06x}, expected PCM",
                    path.display()
                ))),
            };
        }
        pos = body + len + (len & 1);
    }
    Err(Error::Format(format!("{}: no fmt chunk", path.display())))
}

/// Linear-interpolation resampler.
///
/// Produces `round(n * to / from)` samples; output sample `j` reads the input
/// at fractional position `j * from / to`, holding the last sample past the end.
pub fn resample_linear(samples: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if samples.is_empty() || from_hz == to_hz {
        return samples.to_vec();
    }
    let n_out = (samples.len() as f64 * to_hz as f64 / from_hz as f64).round() as usize;
    let step = from_hz as f64 / to_hz as f64;
    let last = samples.len() - 1;
    (0..n_out)
        .map(|j| {
            let pos = j as f64 * step;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            samples[i0] * (1.0 - frac) + samples[i1] * frac
        })
        .collect()
}

/// Writes mono 16-bit PCM. Samples are clipped to `[-1, 1]`.
pub fn write_wav_pcm16(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let write_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Argument(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in &signal.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

/// The file is already open when hound runs, so its I/O errors mean the data
/// ended early or is unreadable as WAV.
fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Format(format!("{}: {e}", path.display())),
        hound::Error::Unsupported => Error::UnsupportedEncoding(format!(
            "{}: compressed or unknown sample encoding",
            path.display()
        )),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
