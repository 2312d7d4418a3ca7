//! Synthetic multi-montage EEG-like datasets.
//!
//! Classes differ by oscillatory band power: class k carries strong
//! sinusoidal content in its assigned band plus weak content in the other
//! classes' bands, on top of 1/f background noise. Subjects differ by a
//! global gain. Everything is deterministic in the seed.

use rand::Rng;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::montage::Montage;
use crate::recording::Recording;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Frequency bands assigned to classes, in Hz.
pub const CLASS_BANDS: [(f64, f64); 6] = [
    (8.0, 12.0),
    (2.0, 4.0),
    (20.0, 28.0),
    (4.0, 8.0),
    (13.0, 18.0),
    (30.0, 45.0),
];

const CLASS_AMP: f64 = 3.0;
const OFF_AMP: f64 = 0.3;
const PINK_AMP: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    /// Montage template channel count: 16, 20 or 26.
    pub channels: usize,
    pub classes: usize,
    pub subjects: usize,
    /// Duration of each recording, in seconds.
    pub seconds: f64,
    /// Sampling rate of the generated recordings.
    pub fs: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 20,
            classes: 2,
            subjects: 8,
            seconds: 60.0,
            fs: 256.0,
        }
    }
}

/// One recording per (subject, class), labeled by class.
/// Subject ids are `s00`, `s01`, ...
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<Recording>> {
    let montage = Montage::template(cfg.channels)?;
    if cfg.classes == 0 || cfg.classes > CLASS_BANDS.len() {
        return Err(Error::invalid(format!(
            "classes must be 1..={}, got {}",
            CLASS_BANDS.len(),
            cfg.classes
        )));
    }
    if cfg.subjects == 0 || cfg.seconds <= 0.0 || cfg.fs <= 0.0 {
        return Err(Error::invalid("subjects, seconds and fs must be positive".to_string()));
    }
    let t = (cfg.seconds * cfg.fs as f64).round() as usize;
    let mut out = Vec::with_capacity(cfg.subjects * cfg.classes);
    for subject in 0..cfg.subjects {
        // per-subject gain from a counter space disjoint from recordings
        let gain = stream_rng(seed, Stream::Synth, 1_000_000 + subject as u64)
            .random_range(0.7..1.3);
        for class in 0..cfg.classes {
            let idx = (subject * cfg.classes + class) as u64;
            let mut rng = stream_rng(seed, Stream::Synth, idx);
            let mut samples = Vec::with_capacity(montage.channels() * t);
            for _c in 0..montage.channels() {
                let mut ch = pink_noise(t, cfg.fs as f64, &mut rng, PINK_AMP);
                for (k, &(lo, hi)) in CLASS_BANDS[..cfg.classes].iter().enumerate() {
                    let (count, amp) = if k == class { (3, CLASS_AMP) } else { (2, OFF_AMP) };
                    for _ in 0..count {
                        let f = rng.random_range(lo..hi);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        let a = amp * rng.random_range(0.8..1.2);
                        for (i, v) in ch.iter_mut().enumerate() {
                            *v += a
                                * (std::f64::consts::TAU * f * i as f64 / cfg.fs as f64 + phase)
                                    .sin();
                        }
                    }
                }
                samples.extend(ch.iter().map(|&v| (v * gain) as f32));
            }
            out.push(Recording::new(
                montage.clone(),
                cfg.fs,
                samples,
                Some(class as i32),
                format!("s{subject:02}"),
            )?);
        }
    }
    Ok(out)
}

/// Unit-variance 1/f noise via spectral synthesis.
fn pink_noise(t: usize, _fs: f64, rng: &mut rand_chacha::ChaCha8Rng, amp: f64) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); t];
    for k in 1..=t / 2 {
        let mag = (k as f64).powf(-0.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let v = Complex64::from_polar(mag, phase);
        spec[k] = v;
        if k != t - k && t - k < t {
            spec[t - k] = v.conj();
        }
    }
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(t);
    ifft.process(&mut spec);
    let mut x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / t as f64;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
    let inv = amp / var.sqrt().max(1e-12);
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
    x
}
