//! Preprocessing: bandpass + notch filtering (zero phase), polyphase
//! resampling to 256 Hz, and non-overlapping windowing.

use crate::recording::{Recording, WindowBatch};
use crate::{Error, Result};

pub const TARGET_FS: f32 = 256.0;

/// One second-order IIR section (coefficients normalized so a0 = 1).
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Butterworth low-pass (Q = 1/sqrt(2)).
    pub fn lowpass(f0: f64, fs: f64) -> Biquad {
        let (c, alpha) = rbj(f0, fs, std::f64::consts::FRAC_1_SQRT_2);
        let b = [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0];
        normalize(b, c, alpha)
    }

    /// Butterworth high-pass (Q = 1/sqrt(2)).
    pub fn highpass(f0: f64, fs: f64) -> Biquad {
        let (c, alpha) = rbj(f0, fs, std::f64::consts::FRAC_1_SQRT_2);
        let b = [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0];
        normalize(b, c, alpha)
    }

    /// Notch at `f0` with quality `q`.
    pub fn notch(f0: f64, fs: f64, q: f64) -> Biquad {
        let (c, alpha) = rbj(f0, fs, q);
        let b = [1.0, -2.0 * c, 1.0];
        normalize(b, c, alpha)
    }

    fn apply_forward(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                - self.a[1] * y1
                - self.a[2] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }

    /// Squared-magnitude response at frequency `f` (single pass).
    pub fn power_response(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let num = polyval_mag2(&self.b, w);
        let den = polyval_mag2(&self.a, w);
        num / den
    }
}

fn rbj(f0: f64, fs: f64, q: f64) -> (f64, f64) {
    let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
    (w0.cos(), w0.sin() / (2.0 * q))
}

fn normalize(b: [f64; 3], c: f64, alpha: f64) -> Biquad {
    let a0 = 1.0 + alpha;
    Biquad {
        b: [b[0] / a0, b[1] / a0, b[2] / a0],
        a: [1.0, -2.0 * c / a0, (1.0 - alpha) / a0],
    }
}

fn polyval_mag2(c: &[f64; 3], w: f64) -> f64 {
    // |c0 + c1 e^{-jw} + c2 e^{-2jw}|^2
    let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
    let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
    re * re + im * im
}

/// The 0.1–75 Hz bandpass plus 50 Hz notch cascade used throughout.
pub fn eeg_filter_cascade(fs: f64) -> Vec<Biquad> {
    vec![
        Biquad::highpass(0.1, fs),
        Biquad::highpass(0.1, fs),
        Biquad::lowpass(75.0, fs),
        Biquad::lowpass(75.0, fs),
        Biquad::notch(50.0, fs, 30.0),
    ]
}

/// Squared-magnitude response of a cascade after forward-backward
/// application (each pass contributes |H|^2, so the net is |H|^4... no:
/// the zero-phase response is |H|^2 of the single-pass cascade).
pub fn cascade_zero_phase_power(cascade: &[Biquad], f: f64, fs: f64) -> f64 {
    let single: f64 = cascade.iter().map(|b| b.power_response(f, fs)).product();
    single * single
}

/// Forward-backward filtering with odd-reflection edge padding.
pub fn filtfilt(cascade: &[Biquad], x: &[f32]) -> Vec<f32> {
    let t = x.len();
    let pad = (3 * 512).min(t.saturating_sub(1));
    let mut buf = Vec::with_capacity(t + 2 * pad);
    let first = x[0] as f64;
    let last = x[t - 1] as f64;
    for k in (1..=pad).rev() {
        buf.push(2.0 * first - x[k] as f64);
    }
    buf.extend(x.iter().map(|&v| v as f64));
    for k in 1..=pad {
        buf.push(2.0 * last - x[t - 1 - k] as f64);
    }
    for bq in cascade {
        bq.apply_forward(&mut buf);
    }
    buf.reverse();
    for bq in cascade {
        bq.apply_forward(&mut buf);
    }
    buf.reverse();
    buf[pad..pad + t].iter().map(|&v| v as f32).collect()
}

/// 0.1–75 Hz bandpass and 50 Hz notch, zero phase, per channel.
/// Requires fs > 150 Hz so the 75 Hz band edge stays below Nyquist.
pub fn bandpass_notch(rec: &Recording) -> Result<Recording> {
    if rec.fs <= 150.0 {
        return Err(Error::invalid(format!(
            "bandpass_notch requires fs > 150 Hz (75 Hz band edge below Nyquist), got {}",
            rec.fs
        )));
    }
    let cascade = eeg_filter_cascade(rec.fs as f64);
    let t = rec.len();
    let mut samples = Vec::with_capacity(rec.samples.len());
    for c in 0..rec.channels() {
        samples.extend(filtfilt(&cascade, &rec.samples[c * t..(c + 1) * t]));
    }
    Recording::new(
        rec.montage.clone(),
        rec.fs,
        samples,
        rec.label,
        rec.subject.clone(),
    )
}

/// Kaiser-windowed-sinc polyphase resampling to `TARGET_FS`.
/// Output length is `round(T * 256 / fs)`; a 256 Hz input is returned
/// unchanged.
pub fn resample(rec: &Recording) -> Result<Recording> {
    if rec.fs == TARGET_FS {
        return Ok(rec.clone());
    }
    let t_in = rec.len();
    let ratio = TARGET_FS as f64 / rec.fs as f64;
    let t_out = (t_in as f64 * ratio).round() as usize;
    if t_out == 0 {
        return Err(Error::invalid("resample: output would be empty".to_string()));
    }
    // Anti-alias cutoff at the narrower Nyquist, in cycles per input sample.
    let fc = 0.5 * ratio.min(1.0);
    let beta = 8.6;
    let zero_crossings = 16.0;
    let half_width = zero_crossings / (2.0 * fc);
    let i0_beta = bessel_i0(beta);

    let mut samples = Vec::with_capacity(rec.channels() * t_out);
    for c in 0..rec.channels() {
        let x = &rec.samples[c * t_in..(c + 1) * t_in];
        for n in 0..t_out {
            let center = n as f64 / ratio;
            let k0 = ((center - half_width).ceil() as i64).max(0);
            let k1 = ((center + half_width).floor() as i64).min(t_in as i64 - 1);
            let mut acc = 0.0f64;
            for k in k0..=k1 {
                let dt = k as f64 - center;
                let s = 2.0 * fc * sinc(2.0 * fc * dt);
                let frac = dt / half_width;
                let w = bessel_i0(beta * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
                acc += x[k as usize] as f64 * s * w;
            }
            samples.push(acc as f32);
        }
    }
    Recording::new(
        rec.montage.clone(),
        TARGET_FS,
        samples,
        rec.label,
        rec.subject.clone(),
    )
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn bessel_i0(x: f64) -> f64 {
    // power series; converges quickly for the argument range used here
    let half = x / 2.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..40 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

/// Cuts a 256 Hz recording into non-overlapping windows of
/// `seconds` length; the trailing remainder is discarded. Windows are
/// raw copies — concatenating them reproduces the truncated recording.
pub fn window(rec: &Recording, seconds: f64) -> Result<WindowBatch> {
    if rec.fs != TARGET_FS {
        return Err(Error::invalid(format!(
            "window expects a {TARGET_FS} Hz recording, got {} Hz",
            rec.fs
        )));
    }
    let win_f = seconds * TARGET_FS as f64;
    if win_f <= 0.0 || win_f.fract() != 0.0 {
        return Err(Error::invalid(format!(
            "window length {seconds} s x {TARGET_FS} Hz = {win_f} is not a whole number of samples"
        )));
    }
    let w = win_f as usize;
    let t = rec.len();
    let c = rec.channels();
    let b = t / w;
    let mut windows = Vec::with_capacity(b * c * w);
    let mut provenance = Vec::with_capacity(b);
    for bi in 0..b {
        for ci in 0..c {
            let ch = rec.channel(ci);
            windows.extend_from_slice(&ch[bi * w..(bi + 1) * w]);
        }
        provenance.push((rec.subject.clone(), bi * w));
    }
    let labels = rec.label.map(|l| vec![l; b]);
    Ok(WindowBatch {
        montage: rec.montage.clone(),
        windows,
        window_len: w,
        labels,
        provenance,
    })
}

/// Per-channel per-window z-scoring (mean 0, unit variance; epsilon 1e-8
/// in the denominator).
pub fn zscore(batch: &WindowBatch) -> WindowBatch {
    let w = batch.window_len;
    let mut out = batch.clone();
    for chunk in out.windows.chunks_mut(w) {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / w as f64;
        let var = chunk
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / w as f64;
        let inv = 1.0 / (var.sqrt() + 1e-8);
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
    out
}

/// Full pipeline: filter, resample to 256 Hz, window, z-score.
pub fn preprocess(rec: &Recording, window_seconds: f64) -> Result<WindowBatch> {
    let filtered = bandpass_notch(rec)?;
    let resampled = resample(&filtered)?;
    Ok(zscore(&window(&resampled, window_seconds)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::Montage;

    fn tone(c: usize, t: usize, fs: f32, hz: f32) -> Vec<f32> {
        let mut s = Vec::with_capacity(c * t);
        for _ in 0..c {
            for i in 0..t {
                s.push((2.0 * std::f32::consts::PI * hz * i as f32 / fs).sin());
            }
        }
        s
    }

    fn rec(c: usize, fs: f32, samples: Vec<f32>) -> Recording {
        Recording::new(Montage::template(c).unwrap(), fs, samples, None, "t".into()).unwrap()
    }

    #[test]
    fn dc_removed_after_settle() {
        let r = rec(16, 256.0, vec![1.0; 16 * 256 * 20]);
        let f = bandpass_notch(&r).unwrap();
        let t = f.len();
        let mid = &f.channel(0)[t / 4..3 * t / 4];
        let max = mid.iter().fold(0f32, |m, &v| m.max(v.abs()));
        assert!(max <= 1e-2, "residual DC {max}");
    }

    #[test]
    fn notch_attenuates_50hz_by_response_oracle() {
        let fs = 256.0;
        let cascade = eeg_filter_cascade(fs);
        let p50 = cascade_zero_phase_power(&cascade, 50.0, fs);
        let db = 10.0 * p50.log10();
        assert!(db <= -20.0, "50 Hz response {db} dB");

        // and on a real tone: steady-state amplitude ratio
        let r = rec(16, 256.0, tone(16, 256 * 20, 256.0, 50.0));
        let f = bandpass_notch(&r).unwrap();
        let t = f.len();
        let mid = &f.channel(0)[t / 4..3 * t / 4];
        let amp = mid.iter().fold(0f32, |m, &v| m.max(v.abs()));
        assert!(20.0 * (amp.max(1e-9)).log10() <= -20.0, "50 Hz tone residual {amp}");
    }

    #[test]
    fn passband_keeps_10hz_within_1db() {
        let fs = 256.0;
        let cascade = eeg_filter_cascade(fs);
        let p10 = cascade_zero_phase_power(&cascade, 10.0, fs);
        let db = 10.0 * p10.log10();
        assert!(db.abs() <= 1.0, "10 Hz response {db} dB");

        let r = rec(16, 256.0, tone(16, 256 * 20, 256.0, 10.0));
        let f = bandpass_notch(&r).unwrap();
        let t = f.len();
        let mid = &f.channel(0)[t / 4..3 * t / 4];
        let amp = mid.iter().fold(0f32, |m, &v| m.max(v.abs()));
        assert!(20.0 * amp.log10() >= -1.0, "10 Hz tone attenuated to {amp}");
    }

    #[test]
    fn low_fs_rejected() {
        let r = rec(16, 150.0, vec![0.5; 16 * 300]);
        assert!(bandpass_notch(&r).is_err());
    }

    #[test]
    fn resample_identity_at_256() {
        let r = rec(16, 256.0, tone(16, 1024, 256.0, 8.0));
        let out = resample(&r).unwrap();
        assert_eq!(out.samples, r.samples);
    }

    #[test]
    fn resample_length_rule() {
        let r = rec(16, 512.0, tone(16, 1024, 512.0, 8.0));
        let out = resample(&r).unwrap();
        assert_eq!(out.len(), 512);
    }

    #[test]
    fn resample_preserves_tone_bin() {
        // 8 Hz at fs=500 for 4 s -> output 1024 samples at 256 Hz
        let t_in = 2000;
        let r = rec(16, 500.0, tone(16, t_in, 500.0, 8.0));
        let out = resample(&r).unwrap();
        let x = out.channel(0);
        let n = x.len();
        // naive DFT peak over 0..Nyquist
        let mut best = (0usize, 0.0f64);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64;
                re += v as f64 * ph.cos();
                im += v as f64 * ph.sin();
            }
            let mag = re * re + im * im;
            if mag > best.1 {
                best = (k, mag);
            }
        }
        let hz_per_bin = 256.0 / n as f64;
        let peak_hz = best.0 as f64 * hz_per_bin;
        assert!(
            (peak_hz - 8.0).abs() <= hz_per_bin,
            "peak at {peak_hz} Hz (bin width {hz_per_bin})"
        );
    }

    #[test]
    fn window_arithmetic_and_remainder() {
        let r = rec(16, 256.0, vec![0.25; 16 * 2560]);
        let b = window(&r, 5.0).unwrap();
        assert_eq!(b.batch(), 2);
        assert_eq!(b.window_len, 1280);

        let r = rec(16, 256.0, vec![0.25; 16 * 1279]);
        assert_eq!(window(&r, 5.0).unwrap().batch(), 0);

        let r = rec(16, 256.0, vec![0.25; 16 * 1280]);
        let b = window(&r, 1.25).unwrap();
        assert_eq!(b.batch(), 4);
        assert_eq!(b.window_len, 320);

        assert!(window(&r, 0.33).is_err());
    }

    #[test]
    fn window_concat_reconstructs_truncation() {
        let t = 1280 * 2 + 100;
        let samples: Vec<f32> = (0..16 * t).map(|i| (i as f32 * 0.013).sin()).collect();
        let r = rec(16, 256.0, samples);
        let b = window(&r, 5.0).unwrap();
        for c in 0..16 {
            let orig = &r.channel(c)[..2 * 1280];
            let mut cat = Vec::new();
            for bi in 0..b.batch() {
                let w = b.window(bi);
                cat.extend_from_slice(&w[c * 1280..(c + 1) * 1280]);
            }
            assert_eq!(cat.as_slice(), orig);
        }
    }

    #[test]
    fn pipeline_linear_before_windowing() {
        let t = 256 * 10;
        let x: Vec<f32> = tone(16, t, 500.0, 12.0);
        let y: Vec<f32> = tone(16, t, 500.0, 31.0);
        let (a, b) = (0.7f32, -1.3f32);
        let mix: Vec<f32> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let run = |s: Vec<f32>| {
            let r = rec(16, 500.0, s);
            resample(&bandpass_notch(&r).unwrap()).unwrap()
        };
        let (fx, fy, fmix) = (run(x), run(y), run(mix));
        let mut max_rel = 0.0f64;
        for i in 0..fmix.samples.len() {
            let want = a as f64 * fx.samples[i] as f64 + b as f64 * fy.samples[i] as f64;
            let got = fmix.samples[i] as f64;
            let rel = (want - got).abs() / (want.abs() + 1.0);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-4, "linearity violation {max_rel}");
    }

    #[test]
    fn channel_order_independence() {
        let t = 256 * 6;
        let mut samples = Vec::new();
        for c in 0..16 {
            for i in 0..t {
                samples.push(((i * (c + 1)) as f32 * 0.002).sin());
            }
        }
        let r = rec(16, 256.0, samples);
        let perm: Vec<usize> = (0..16).rev().collect();
        let m_perm = r.montage.permuted(&perm).unwrap();
        let mut s_perm = Vec::new();
        for &c in &perm {
            s_perm.extend_from_slice(r.channel(c));
        }
        let rp = Recording::new(m_perm, 256.0, s_perm, None, "t".into()).unwrap();

        let out = bandpass_notch(&r).unwrap();
        let out_p = bandpass_notch(&rp).unwrap();
        for (i, &c) in perm.iter().enumerate() {
            assert_eq!(out_p.channel(i), out.channel(c));
        }
    }
}
