//! Amplitude spectra of heterodyne traces.

use std::f64::consts::PI;

use echo4_core::detection::HeterodyneTrace;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    #[default]
    Hann,
    Rectangular,
}

impl Taper {
    pub fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Taper::Rectangular => vec![1.0; n],
            Taper::Hann if n < 2 => vec![1.0; n],
            // periodic form, so a bin-centred sinusoid keeps exact leakage nulls
            Taper::Hann => (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequency_hz: Vec<f64>,
    pub amplitude: Vec<f64>,
}

impl Spectrum {
    /// Amplitude at the bin nearest `f`.
    pub fn at(&self, f: f64) -> f64 {
        let df = self.frequency_hz.get(1).copied().unwrap_or(1.0);
        let k = (f / df).round().max(0.0) as usize;
        self.amplitude.get(k).copied().unwrap_or(0.0)
    }

    /// Largest amplitude within ±`half_width` of `f`.
    pub fn max_near(&self, f: f64, half_width: f64) -> f64 {
        self.frequency_hz
            .iter()
            .zip(&self.amplitude)
            .filter(|(x, _)| (**x - f).abs() <= half_width)
            .map(|(_, a)| *a)
            .fold(0.0, f64::max)
    }
}

fn window_samples(trace: &HeterodyneTrace, from: f64, to: f64) -> Result<&[f64]> {
    let t0 = trace.start;
    let i0 = ((from - t0) * trace.rate - 1e-9).ceil().max(0.0) as usize;
    let i1 = (((to - t0) * trace.rate + 1e-9).floor() as usize + 1).min(trace.samples.len());
    if !(from <= to) || i0 >= i1 {
        return Err(CliError::Config(format!("empty spectrum window [{from}, {to}] s")));
    }
    Ok(&trace.samples[i0..i1])
}

fn transform(x: &[f64], w: &[f64], n_fft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().zip(w).map(|(a, b)| Complex64::new(a * b, 0.0)).collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    buf
}

/// Single-sided amplitude spectrum of the samples in [`from`, `to`],
/// zero-padded to at least `min_fft` points. Normalized by the taper's
/// coherent gain so a unit-amplitude sinusoid on a bin reports 1.
pub fn amplitude_spectrum(trace: &HeterodyneTrace, from: f64, to: f64, taper: Taper, min_fft: usize) -> Result<Spectrum> {
    let x = window_samples(trace, from, to)?;
    let w = taper.weights(x.len());
    let gain: f64 = w.iter().sum();
    let n_fft = x.len().max(min_fft);
    let spec = transform(x, &w, n_fft);
    let half = n_fft / 2 + 1;
    let df = trace.rate / n_fft as f64;
    let amplitude = (0..half)
        .map(|k| {
            let single = if k == 0 || (n_fft % 2 == 0 && k == n_fft / 2) { 1.0 } else { 2.0 };
            single * spec[k].norm() / gain
        })
        .collect();
    Ok(Spectrum { frequency_hz: (0..half).map(|k| k as f64 * df).collect(), amplitude })
}

/// (Σ|w·x|², Σ|X|²/N) for the tapered window, which agree by Parseval.
pub fn parseval_energies(trace: &HeterodyneTrace, from: f64, to: f64, taper: Taper) -> Result<(f64, f64)> {
    let x = window_samples(trace, from, to)?;
    let w = taper.weights(x.len());
    let time: f64 = x.iter().zip(&w).map(|(a, b)| (a * b).powi(2)).sum();
    let spec = transform(x, &w, x.len());
    let freq = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
    Ok((time, freq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(samples: Vec<f64>, rate: f64) -> HeterodyneTrace {
        HeterodyneTrace { start: 0.0, rate, samples, beats: vec![], noise_sigma: 0.0 }
    }

    #[test]
    fn unit_sinusoid_reads_one() {
        let rate = 100e6;
        let n = 1000;
        let f0 = 12.5e6;
        let x: Vec<f64> = (0..n).map(|k| (2.0 * PI * f0 * k as f64 / rate + 0.4).cos()).collect();
        let tr = trace(x, rate);
        for taper in [Taper::Hann, Taper::Rectangular] {
            let s = amplitude_spectrum(&tr, 0.0, (n - 1) as f64 / rate, taper, 0).unwrap();
            let (k, peak) = s.amplitude.iter().enumerate().fold((0, 0.0), |b, (k, &a)| if a > b.1 { (k, a) } else { b });
            assert!((peak - 1.0).abs() < 1e-9, "{taper:?} peak {peak}");
            assert!((s.frequency_hz[k] - f0).abs() <= rate / n as f64);
        }
    }

    #[test]
    fn empty_window_is_rejected() {
        let tr = trace(vec![0.0; 10], 1e6);
        assert!(amplitude_spectrum(&tr, 5.0, 6.0, Taper::Hann, 0).is_err());
    }

    #[test]
    fn parseval() {
        let x: Vec<f64> = (0..777).map(|k| ((k * 37 % 101) as f64 / 50.0 - 1.0) * (k as f64 * 0.01).sin()).collect();
        let tr = trace(x, 1e6);
        for taper in [Taper::Hann, Taper::Rectangular] {
            let (a, b) = parseval_energies(&tr, 0.0, 1.0, taper).unwrap();
            assert!(((a - b) / a).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_time_bandwidth() {
        let rate = 50e6;
        let fwhm_t = 1e-6;
        let s = fwhm_t / (2.0 * (2.0 * 2f64.ln()).sqrt());
        let n = 4000;
        let t0 = n as f64 / rate / 2.0;
        let x: Vec<f64> = (0..n).map(|k| (-(k as f64 / rate - t0).powi(2) / (2.0 * s * s)).exp()).collect();
        let sp = amplitude_spectrum(&trace(x, rate), 0.0, 1.0, Taper::Rectangular, 1 << 16).unwrap();
        // DC is not doubled in the single-sided spectrum
        let peak = 2.0 * sp.amplitude[0];
        let k = sp.amplitude.iter().skip(1).position(|&a| a < 0.5 * peak).unwrap() + 1;
        let (a0, a1) = (sp.amplitude[k - 1], sp.amplitude[k]);
        let f_half = sp.frequency_hz[k - 1] + (a0 - 0.5 * peak) / (a0 - a1) * (sp.frequency_hz[k] - sp.frequency_hz[k - 1]);
        // single-sided: the two-sided FWHM is twice the half-maximum frequency
        let expected = 4.0 * 2f64.ln() / PI / fwhm_t;
        assert!((2.0 * f_half / expected - 1.0).abs() < 0.05);
    }
}
