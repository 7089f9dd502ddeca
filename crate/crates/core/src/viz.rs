//! Temporal impact heatmaps.
//!
//! One row of the head output (class evidence per downsampled time step) is
//! split into low and high with Otsu's method, stretched back to one bit per
//! feature-map column by nearest neighbour, and drawn as a bar under the map.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureMap, MfccConfig};
use crate::error::{Error, Result};
use crate::model::TimeActivations;

/// Histogram resolution of [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;
/// Height of the heatmap bar in pixels.
pub const BAR_HEIGHT: usize = 16;
pub const LOW_COLOR: [u8; 3] = [32, 32, 64];
pub const HIGH_COLOR: [u8; 3] = [240, 200, 32];

fn bin_of(v: f64, lo: f64, range: f64) -> usize {
    (((v - lo) / range * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu split of `values` over a 256-bin histogram of the min-max range.
///
/// Returns the first bin of the high class: a value is high iff its bin index
/// is at least the returned cut. Class means are taken from the normalized
/// values themselves rather than bin centres. Among equally good cuts the
/// lowest wins. Constant or empty input returns `None`.
pub fn otsu_cut(values: &[f64]) -> Option<(usize, f64, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return None;
    }
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &v in values {
        let b = bin_of(v, lo, range);
        count[b] += 1;
        sum[b] += (v - lo) / range;
    }
    let n = values.len() as f64;
    let total: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for k in 1..OTSU_BINS {
        n0 += count[k - 1] as f64;
        s0 += sum[k - 1];
        let n1 = n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let d = s0 / n0 - (total - s0) / n1;
        let between = n0 * n1 * d * d / (n * n);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((k, between));
        }
    }
    best.map(|(k, _)| (k, lo, range))
}

/// The Otsu threshold in the units of `values`: the lower edge of the first
/// high bin. For constant input every value counts as low and the common
/// value is returned.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    match otsu_cut(values) {
        Some((k, lo, range)) => lo + range * k as f64 / OTSU_BINS as f64,
        None => values.first().copied().unwrap_or(0.0),
    }
}

/// 1 for values in the high Otsu class, 0 otherwise.
pub fn otsu_bits(values: &[f64]) -> Vec<u8> {
    match otsu_cut(values) {
        Some((k, lo, range)) => values
            .iter()
            .map(|&v| (bin_of(v, lo, range) >= k) as u8)
            .collect(),
        None => vec![0; values.len()],
    }
}

/// Nearest-neighbour resize: output `i` takes source
/// `min(n - 1, floor((i + 0.5) * n / len))`.
pub fn upsample_nearest<T: Copy>(src: &[T], len: usize) -> Vec<T> {
    let n = src.len();
    (0..len)
        .map(|i| src[((2 * i + 1) * n / (2 * len)).min(n - 1)])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// One bit per feature-map column; 1 marks high impact.
    pub bits: Vec<u8>,
    pub class_index: usize,
    pub threshold: f64,
}

/// Thresholds one class row of `acts` and stretches it to the source width.
pub fn heatmap(acts: &TimeActivations, class_index: usize) -> Result<Heatmap> {
    if class_index > 1 {
        return Err(Error::Argument(format!("class index {class_index} is not 0 or 1")));
    }
    if acts.is_empty() || acts.source_t == 0 {
        return Err(Error::Shape("time activations are empty".into()));
    }
    let row = acts.class_row(class_index);
    Ok(Heatmap {
        bits: upsample_nearest(&otsu_bits(&row), acts.source_t),
        class_index,
        threshold: otsu_threshold(&row),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub bit: u8,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub class_index: usize,
    pub threshold: f64,
    pub runs: Vec<Run>,
}

/// Maximal runs of equal bits, with times from the extraction hop.
pub fn runs(hm: &Heatmap, mfcc: &MfccConfig) -> Vec<Run> {
    let period = mfcc.frame_period_secs();
    let mut out: Vec<Run> = Vec::new();
    for (i, &bit) in hm.bits.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.bit == bit => r.end_frame = i + 1,
            _ => out.push(Run {
                bit,
                start_frame: i,
                end_frame: i + 1,
                start_sec: 0.0,
                end_sec: 0.0,
            }),
        }
    }
    for r in &mut out {
        r.start_sec = r.start_frame as f64 * period;
        r.end_sec = r.end_frame as f64 * period;
    }
    out
}

/// P6 image bytes: the map in grayscale (min-max over the map, low
/// coefficients at the bottom) above a bar of `BAR_HEIGHT` rows.
pub fn render_ppm(map: &FeatureMap, hm: &Heatmap) -> Result<Vec<u8>> {
    let (p, t) = (map.p(), map.t());
    if hm.bits.len() != t {
        return Err(Error::Shape(format!(
            "heatmap has {} columns, feature map {t}",
            hm.bits.len()
        )));
    }
    let (lo, hi) = map
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) as f64 } else { 0.0 };
    let mut out = format!("P6\n{t} {}\n255\n", p + BAR_HEIGHT).into_bytes();
    out.reserve(3 * t * (p + BAR_HEIGHT));
    for y in 0..p {
        for &v in map.row(p - 1 - y) {
            let g = ((v - lo) as f64 * scale).round() as u8;
            out.extend_from_slice(&[g, g, g]);
        }
    }
    for _ in 0..BAR_HEIGHT {
        for &b in &hm.bits {
            out.extend_from_slice(if b == 1 { &HIGH_COLOR } else { &LOW_COLOR });
        }
    }
    Ok(out)
}

/// Writes the image to `out_path` and the run list to the same path with a
/// `.json` extension, which is returned.
pub fn render(map: &FeatureMap, hm: &Heatmap, mfcc: &MfccConfig, out_path: impl AsRef<Path>) -> Result<PathBuf> {
    let out_path = out_path.as_ref();
    let image = render_ppm(map, hm)?;
    let mut f = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    f.write_all(&image).map_err(|e| Error::io(out_path, e))?;
    let sidecar = HeatmapSidecar {
        class_index: hm.class_index,
        threshold: hm.threshold,
        runs: runs(hm, mfcc),
    };
    let json_path = out_path.with_extension("json");
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}
