//! Per-clip signal measurements: silence ratio, effective bandwidth, SNR.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::PipelineConfig;
use crate::error::{Error, Result};

pub const WELCH_WINDOW: usize = 4096;
pub const HQ_TAG: &str = "high-quality";

fn frame_len(sample_rate: u32, ms: f64) -> usize {
    ((sample_rate as f64 * ms / 1000.0).round() as usize).max(1)
}

/// Mean square of consecutive frames; a trailing partial frame counts as a frame.
fn frame_energies(wave: &[f32], len: usize) -> Vec<f64> {
    wave.chunks(len)
        .map(|f| f.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / f.len() as f64)
        .collect()
}

/// Fraction of frames whose RMS falls below the silence level.
pub fn silence_ratio(wave: &[f32], sample_rate: u32, cfg: &PipelineConfig) -> Result<f64> {
    if wave.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    let energies = frame_energies(wave, frame_len(sample_rate, cfg.silence_frame_ms));
    let floor = 10f64.powf(cfg.silence_dbfs / 10.0);
    let silent = energies.iter().filter(|e| **e < floor).count();
    Ok(silent as f64 / energies.len() as f64)
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Welch-averaged one-sided magnitude spectrum with 4096-sample Hann windows
/// at 50% overlap. Clips shorter than one window use a single zero-padded window.
pub fn welch_magnitude(wave: &[f32]) -> Vec<f64> {
    let n = WELCH_WINDOW;
    let hop = n / 2;
    let win = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let starts: Vec<usize> = if wave.len() <= n { vec![0] } else { (0..=wave.len() - n).step_by(hop).collect() };
    let bins = n / 2 + 1;
    let mut acc = vec![0.0f64; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for &s in &starts {
        for (i, b) in buf.iter_mut().enumerate() {
            let x = wave.get(s + i).copied().unwrap_or(0.0) as f64;
            *b = Complex::new(x * win[i], 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm();
        }
    }
    acc.iter().map(|a| a / starts.len() as f64).collect()
}

/// Twice the highest frequency whose averaged magnitude is within
/// `bandwidth_rel_db` of the spectral peak. The DC bin is ignored.
pub fn effective_sample_rate(wave: &[f32], sample_rate: u32, cfg: &PipelineConfig) -> Result<f64> {
    if sample_rate < 8000 {
        return Err(Error::InvalidArgument(format!("sample rate {sample_rate} Hz below 8 kHz")));
    }
    if wave.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    let mag = welch_magnitude(wave);
    let peak = mag[1..].iter().copied().fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Ok(0.0);
    }
    let level = peak * 10f64.powf(cfg.bandwidth_rel_db / 20.0);
    let top = (1..mag.len()).rev().find(|&k| mag[k] >= level).unwrap_or(0);
    let f_max = top as f64 * sample_rate as f64 / WELCH_WINDOW as f64;
    Ok(2.0 * f_max)
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `10 log10(p90 / p10)` over frame energies; `-inf` for digital silence.
pub fn estimate_snr(wave: &[f32], sample_rate: u32, cfg: &PipelineConfig) -> Result<f64> {
    let mut e = frame_energies(wave, frame_len(sample_rate, cfg.silence_frame_ms));
    if e.len() < 50 {
        return Err(Error::InvalidArgument(format!("{} frames, at least 50 needed for an SNR estimate", e.len())));
    }
    e.sort_by(f64::total_cmp);
    let (p90, p10) = (percentile(&e, 0.9), percentile(&e, 0.1));
    if p90 == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (p90 / p10).log10())
}

/// Appends the high-quality tag when the effective rate strictly exceeds the tag threshold.
pub fn bandwidth_tag(tags: &mut Vec<String>, effective_sr: f64, cfg: &PipelineConfig) {
    if effective_sr > cfg.hq_tag_sr_hz && !tags.iter().any(|t| t == HQ_TAG) {
        tags.push(HQ_TAG.to_string());
    }
}
