//! Synthetic two-class recordings for end-to-end checks.
//!
//! Class 0 is a continuous voiced tone with a syllable-rate amplitude
//! envelope. Class 1 is the same kind of tone interrupted by long pauses, each
//! either near-silence or a quiet noise burst. The pause positions are kept
//! (in feature-map frames) so heatmaps can be scored against them.

use std::f64::consts::TAU;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{extract_mfcc, load_wav, write_feature_map, write_wav_pcm16, AudioSignal, MfccConfig};
use crate::error::{Error, Result};
use crate::trainer::{DatasetManifest, ManifestEntry};
use crate::{AD, NON_AD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Clip duration range in seconds.
    pub duration_secs: (f64, f64),
    /// Duration range of each pause in class-1 clips.
    pub pause_secs: (f64, f64),
    /// Number of pauses per class-1 clip, inclusive range.
    pub pauses_per_clip: (usize, usize),
    pub sample_rate_hz: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 60,
            seed: 0,
            duration_secs: (8.0, 10.0),
            pause_secs: (1.0, 1.5),
            pauses_per_clip: (2, 3),
            sample_rate_hz: crate::dsp::TARGET_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub id: String,
    pub label: usize,
    pub signal: AudioSignal,
    /// Pause spans in samples.
    pub pauses: Vec<Range<usize>>,
}

impl SynthClip {
    /// Feature-map columns whose frame center falls inside a pause.
    pub fn pause_frames(&self, hop: usize) -> Vec<Range<usize>> {
        self.pauses
            .iter()
            .map(|p| p.start.div_ceil(hop)..p.end.div_ceil(hop))
            .collect()
    }
}

fn voiced(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let f0 = rng.random_range(110.0..240.0);
    let vib_rate = rng.random_range(4.0..6.0);
    let vib_depth = rng.random_range(0.01..0.03);
    let syl_rate = rng.random_range(3.0..5.0);
    let phase0: f64 = rng.random_range(0.0..TAU);
    let harmonics: Vec<f64> = (1..=8).map(|h| rng.random_range(0.3..1.0) / h as f64).collect();
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (TAU * vib_rate * t).sin());
            phase += TAU * f / sr;
            let env = 0.65 + 0.35 * (TAU * syl_rate * t + phase0).sin();
            let s: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                .sum();
            0.15 * env * s
        })
        .collect()
}

/// One clip of the given class.
pub fn generate_clip(id: &str, label: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthClip> {
    if label > 1 {
        return Err(Error::Argument(format!("label {label} is not 0 or 1")));
    }
    let sr = cfg.sample_rate_hz as f64;
    let secs = rng.random_range(cfg.duration_secs.0..=cfg.duration_secs.1);
    let n = (secs * sr) as usize;
    let mut samples = voiced(n, sr, rng);
    let mut pauses = Vec::new();
    if label == AD {
        let count = rng.random_range(cfg.pauses_per_clip.0..=cfg.pauses_per_clip.1);
        // Place pauses in equal slots so they never overlap.
        let slot = n / count.max(1);
        for k in 0..count {
            let len = (rng.random_range(cfg.pause_secs.0..=cfg.pause_secs.1) * sr) as usize;
            if len >= slot {
                return Err(Error::Config(format!(
                    "{count} pauses of {len} samples do not fit a clip of {n} samples"
                )));
            }
            let start = k * slot + rng.random_range(0..slot - len);
            let amp = if rng.random_bool(0.5) { 1e-3 } else { 0.03 };
            for s in &mut samples[start..start + len] {
                *s = amp * rng.random_range(-1.0..1.0);
            }
            pauses.push(start..start + len);
        }
    }
    Ok(SynthClip {
        id: id.to_string(),
        label,
        signal: AudioSignal::new(samples, cfg.sample_rate_hz)?,
        pauses,
    })
}

/// `cfg.n_samples` clips with alternating labels, starting with class 0.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples)
        .map(|i| {
            let label = if i % 2 == 0 { NON_AD } else { AD };
            generate_clip(&format!("syn{i:03}"), label, cfg, &mut rng)
        })
        .collect()
}

/// Pause annotations written next to the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauseAnnotation {
    pub id: String,
    pub label: usize,
    pub t: usize,
    /// Half-open frame spans.
    pub pause_frames: Vec<(usize, usize)>,
}

/// Writes `<id>.wav` and `<id>.mfcm` for every clip plus `manifest.csv` and
/// `pauses.json`. Feature maps are extracted from the written 16-bit files so
/// they match what the CLI would extract from them.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    clips: &[SynthClip],
    mfcc: &MfccConfig,
) -> Result<(DatasetManifest, Vec<PauseAnnotation>)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut notes = Vec::new();
    for clip in clips {
        let wav = dir.join(format!("{}.wav", clip.id));
        write_wav_pcm16(&wav, &clip.signal)?;
        let map = extract_mfcc(&load_wav(&wav)?, mfcc)?;
        let file = format!("{}.mfcm", clip.id);
        write_feature_map(dir.join(&file), &map)?;
        entries.push(ManifestEntry {
            id: clip.id.clone(),
            path: file.into(),
            label: clip.label,
            fold: None,
        });
        notes.push(PauseAnnotation {
            id: clip.id.clone(),
            label: clip.label,
            t: map.t(),
            pause_frames: clip
                .pause_frames(mfcc.hop)
                .into_iter()
                .map(|r| (r.start, r.end.min(map.t())))
                .collect(),
        });
    }
    // The CSV holds paths relative to the corpus directory; the returned
    // manifest has them resolved, as if loaded from that file.
    DatasetManifest::new(entries.clone())?.save(dir.join("manifest.csv"))?;
    for e in &mut entries {
        e.path = dir.join(&e.path);
    }
    let manifest = DatasetManifest::new(entries)?;
    let json = serde_json::to_string_pretty(&notes)?;
    let path = dir.join("pauses.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok((manifest, notes))
}
