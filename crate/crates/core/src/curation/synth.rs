//! Synthetic test signals and a small labelled corpus.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::wav::write_wav_pcm16;
use crate::error::Result;

pub fn sine(freq: f64, amp: f64, seconds: f64, sample_rate: u32) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin()) as f32)
        .collect()
}

pub fn white_noise(std: f64, seconds: f64, sample_rate: u32, seed: u64) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (std * z) as f32
        })
        .collect()
}

/// Zeroes every FFT bin above `cutoff_hz`.
pub fn brickwall_lowpass(wave: &[f32], cutoff_hz: f64, sample_rate: u32) -> Vec<f32> {
    let n = wave.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = wave.iter().map(|v| Complex::new(*v as f64, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        if k.min(n - k) as f64 * sample_rate as f64 / n as f64 > cutoff_hz {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Gates `wave` on and off in blocks of `period_s / 2`, leaving `floor` where off.
pub fn gated(wave: &[f32], period_s: f64, sample_rate: u32) -> Vec<f32> {
    let half = ((period_s * sample_rate as f64) / 2.0).round().max(1.0) as usize;
    wave.iter().enumerate().map(|(i, v)| if (i / half) % 2 == 0 { *v } else { 0.0 }).collect()
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// A broadband, non-stationary clip that passes every filter: tone bursts over a light noise floor.
pub fn clean_clip(seconds: f64, sample_rate: u32, seed: u64) -> Vec<f32> {
    let bursts = gated(&sine(1000.0, 0.5, seconds, sample_rate), 0.4, sample_rate);
    add(&bursts, &white_noise(0.03, seconds, sample_rate, seed))
}

/// Digital silence.
pub fn silent_clip(seconds: f64, sample_rate: u32) -> Vec<f32> {
    vec![0.0; (seconds * sample_rate as f64).round() as usize]
}

/// Loud, bursty noise with nothing above 10 kHz.
pub fn band_limited_clip(seconds: f64, sample_rate: u32, seed: u64) -> Vec<f32> {
    let bursts = gated(&white_noise(0.2, seconds, sample_rate, seed), 0.4, sample_rate);
    let mixed = add(&bursts, &white_noise(0.02, seconds, sample_rate, seed + 1));
    brickwall_lowpass(&mixed, 10_000.0, sample_rate)
}

/// Writes `clean.wav`, `silent.wav` and `band_limited.wav` (8 s, 48 kHz, 16-bit) into `dir`.
pub fn write_labelled_corpus(dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let sr = 48_000;
    let files = [
        ("clean.wav", clean_clip(8.0, sr, seed)),
        ("silent.wav", silent_clip(8.0, sr)),
        ("band_limited.wav", band_limited_clip(8.0, sr, seed + 10)),
    ];
    let mut out = Vec::new();
    for (name, wave) in files {
        let p = dir.join(name);
        write_wav_pcm16(&p, &wave, sr)?;
        out.push(p);
    }
    Ok(out)
}
