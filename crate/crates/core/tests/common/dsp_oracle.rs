//! Direct O(n^2) reference for the power spectrogram.

use std::f64::consts::PI;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    (if i >= n { period - i } else { i }) as usize
}

/// `|DFT|^2` of the Hann-windowed frame centred on `frame * hop`.
pub fn frame_power(samples: &[f64], frame: usize, n_fft: usize, hop: usize) -> Vec<f64> {
    let w = hann(n_fft);
    let start = (frame * hop) as isize - (n_fft / 2) as isize;
    let x: Vec<f64> = (0..n_fft)
        .map(|k| samples[mirror(start + k as isize, samples.len())] * w[k])
        .collect();
    (0..=n_fft / 2)
        .map(|bin| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (bin * k % n_fft) as f64 / n_fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect()
}
