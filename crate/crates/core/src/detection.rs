//! Heterodyne synthesis, echo extraction, decay fitting and phase matching.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::ensemble::EmissionRecord;
use crate::error::{Error, Result};
use crate::level::{LevelSystem, Transition};
use crate::sequence::PathwayPrediction;
use crate::TAU;

/// Local-oscillator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeterodyneConfig {
    /// LO frequency in the level-offset convention of
    /// [`LevelSystem::transition_frequency`].
    pub lo_hz: f64,
    /// Signal bandwidth around each beat used for the aliasing check.
    pub bandwidth_hz: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Add the applied pulses to the radiated field.
    pub include_drive: bool,
}

impl Default for HeterodyneConfig {
    fn default() -> Self {
        Self { lo_hz: -40e6, bandwidth_hz: 5e6, noise_sigma: 0.0, seed: 0, include_drive: true }
    }
}

/// Real beat signal for one observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterodyneTrace {
    pub start: f64,
    pub rate: f64,
    pub samples: Vec<f64>,
    /// Beat frequency of every transition that carries field.
    pub beats: Vec<(Transition, f64)>,
    pub noise_sigma: f64,
}

impl HeterodyneTrace {
    pub fn times(&self) -> Vec<f64> {
        (0..self.samples.len()).map(|k| self.start + k as f64 / self.rate).collect()
    }
}

/// Beat frequency of transition `t` against the LO.
pub fn beat_frequency(ls: &LevelSystem, t: Transition, lo_hz: f64) -> Result<f64> {
    Ok(ls.transition_frequency(t.lower, t.upper)? - lo_hz)
}

/// s(t) = Σ Re[E(t)·e^{−i2πf t}] over the transitions carrying field, plus
/// seeded white noise. The sign of the exponent matches the frame, in which
/// a class at detuning Δ evolves as e^{−i2πΔt}; a detuned component then
/// appears at f + Δ.
pub fn heterodyne(record: &EmissionRecord, window: usize, ls: &LevelSystem, cfg: &HeterodyneConfig) -> Result<HeterodyneTrace> {
    let w = record
        .windows
        .get(window)
        .ok_or_else(|| Error::Mismatch(alloc::format!("window {window} of {}", record.windows.len())))?;
    if !(cfg.noise_sigma >= 0.0) || !(cfg.bandwidth_hz >= 0.0) {
        return Err(Error::Mismatch("noise and bandwidth must be ≥ 0".into()));
    }
    let fields: Vec<(Transition, Vec<Complex64>)> = record
        .transitions
        .iter()
        .map(|&t| (t, if cfg.include_drive { record.total(window, t) } else { record.emitted(window, t) }))
        .filter(|(_, e)| e.iter().any(|v| *v != Complex64::new(0.0, 0.0)))
        .collect();
    let mut beats = Vec::with_capacity(fields.len());
    for (t, _) in &fields {
        beats.push((*t, beat_frequency(ls, *t, cfg.lo_hz)?));
    }
    for (i, a) in beats.iter().enumerate() {
        for b in &beats[i + 1..] {
            if (a.1.abs() - b.1.abs()).abs() < 1.0 {
                return Err(Error::Mismatch(alloc::format!("{} and {} share a beat frequency", a.0.name(), b.0.name())));
            }
        }
    }
    let fmax = beats.iter().map(|b| b.1.abs()).fold(0.0, f64::max);
    let required = 2.0 * (fmax + cfg.bandwidth_hz);
    if !fields.is_empty() && !(w.rate > required) {
        return Err(Error::Aliasing { rate: w.rate, required });
    }
    let times = w.times();
    let mut samples = vec![0.0; w.n_samples];
    for ((_, e), &(_, f)) in fields.iter().zip(&beats) {
        for (k, s) in samples.iter_mut().enumerate() {
            *s += (e[k] * Complex64::from_polar(1.0, -TAU * f * times[k])).re;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Mismatch(alloc::format!("{e}")))?;
        samples.iter_mut().for_each(|s| *s += normal.sample(&mut rng));
    }
    Ok(HeterodyneTrace { start: w.start, rate: w.rate, samples, beats, noise_sigma: cfg.noise_sigma })
}

/// Radiated echo at its peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoAmplitude {
    pub transition: Transition,
    pub time: f64,
    pub value: Complex64,
}

impl EchoAmplitude {
    pub fn magnitude(&self) -> f64 {
        self.value.norm()
    }
}

/// Peak radiated |E| on the predicted transition within ±`gate_half_width`
/// of the predicted echo time, searched over every window.
pub fn extract_echo(record: &EmissionRecord, prediction: &PathwayPrediction, gate_half_width: f64, floor: f64) -> Result<EchoAmplitude> {
    let t = prediction.echo_transition;
    if record.pair_index(t).is_none() {
        return Err(Error::NoEcho { peak: 0.0, floor });
    }
    let (lo, hi) = (prediction.echo_time - gate_half_width, prediction.echo_time + gate_half_width);
    let mut best: Option<EchoAmplitude> = None;
    for (wi, w) in record.windows.iter().enumerate() {
        let e = record.emitted(wi, t);
        for (k, time) in w.times().into_iter().enumerate() {
            if time < lo || time > hi {
                continue;
            }
            if best.map_or(true, |b| e[k].norm() > b.magnitude()) {
                best = Some(EchoAmplitude { transition: t, time, value: e[k] });
            }
        }
    }
    match best {
        Some(b) if b.magnitude() > floor => Ok(b),
        b => Err(Error::NoEcho { peak: b.map_or(0.0, |b| b.magnitude()), floor }),
    }
}

/// Default echo gate: ±3 envelope FWHM.
pub fn default_gate(fwhm: f64) -> f64 {
    3.0 * fwhm
}

/// Decay law A·exp(−k t − s t²) in four parameterizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayModel {
    /// A·e^{−t/T2}, fitted in log amplitude.
    Exponential,
    /// A·e^{−(2πσt)²/2}.
    Gaussian,
    /// A·e^{−πΓt}, the transform of a Lorentzian line of FWHM Γ.
    LorentzianFt,
    /// A·e^{−t/T2}·e^{−(2πσt)²/2}.
    VoigtFt,
}

impl DecayModel {
    fn uses(self) -> (bool, bool) {
        match self {
            DecayModel::Exponential | DecayModel::LorentzianFt => (true, false),
            DecayModel::Gaussian => (false, true),
            DecayModel::VoigtFt => (true, true),
        }
    }

    fn n_params(self) -> usize {
        let (k, s) = self.uses();
        1 + k as usize + s as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    /// 95% half-width, 1.96 standard errors.
    pub ci_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    /// Zero-delay amplitude first, then the model's width parameters:
    /// `t2_s`, `fwhm_hz` or `sigma_hz`.
    pub params: Vec<FitParam>,
    /// ‖y − fit‖₂ in amplitude.
    pub residual_norm: f64,
}

impl DecayFit {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn amplitude(&self) -> f64 {
        self.params[0].value
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        let a = self.amplitude();
        let k = match self.model {
            DecayModel::Exponential | DecayModel::VoigtFt => 1.0 / self.get("t2_s").unwrap_or(f64::INFINITY),
            DecayModel::LorentzianFt => core::f64::consts::PI * self.get("fwhm_hz").unwrap_or(0.0),
            DecayModel::Gaussian => 0.0,
        };
        let s = 0.5 * (TAU * self.get("sigma_hz").unwrap_or(0.0)).powi(2);
        a * (-k * t - s * t * t).exp()
    }
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting; `None` if a pivot is negligible relative to the matrix scale.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) {
        return None;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))?;
        if a[p * n + c].abs() <= 1e-13 * scale {
            return None;
        }
        if p != c {
            for j in 0..n {
                a.swap(p * n + j, c * n + j);
            }
            b.swap(p, c);
        }
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for j in c..n {
                a[r * n + j] -= f * a[c * n + j];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r * n + j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = solve(a.to_vec(), e, n)?;
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Some(inv)
}

/// Least squares on columns `cols(t)` against `y`; returns the solution and
/// the inverse normal matrix.
fn linear_lsq(t: &[f64], y: &[f64], cols: impl Fn(f64) -> Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ata = vec![0.0; n * n];
    let mut aty = vec![0.0; n];
    for (&ti, &yi) in t.iter().zip(y) {
        let c = cols(ti);
        for i in 0..n {
            aty[i] += c[i] * yi;
            for j in 0..n {
                ata[i * n + j] += c[i] * c[j];
            }
        }
    }
    let sol = solve(ata.clone(), aty, n).ok_or_else(|| Error::DegenerateFit("singular design matrix".into()))?;
    let cov = invert(&ata, n).ok_or_else(|| Error::DegenerateFit("singular design matrix".into()))?;
    Ok((sol, cov))
}

/// Fits (delay, amplitude) points. The exponential model is a straight line
/// in log amplitude; the others start from the log-linear solution and are
/// refined by Levenberg–Marquardt on the amplitudes.
pub fn fit_decay(points: &[(f64, f64)], model: DecayModel) -> Result<DecayFit> {
    let p = model.n_params();
    if points.len() < p.max(2) {
        return Err(Error::FitInput(alloc::format!("{:?} needs at least {} points", model, p.max(2))));
    }
    if points.iter().any(|&(t, a)| !t.is_finite() || !a.is_finite()) {
        return Err(Error::FitInput("non-finite point".into()));
    }
    if let Some(&(t, a)) = points.iter().find(|&&(_, a)| !(a > 0.0)) {
        return Err(Error::FitInput(alloc::format!("amplitude {a} at delay {t} is not positive")));
    }
    let mut sorted: Vec<f64> = points.iter().map(|p| p.0).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[1] == w[0]) {
        return Err(Error::FitInput("delays must be distinct".into()));
    }
    // fit on delays scaled to O(1), rates converted back at the end
    let ts = sorted.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let t: Vec<f64> = points.iter().map(|p| p.0 / ts).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (use_k, use_s) = model.uses();
    let cols = |ti: f64| {
        let mut c = vec![1.0];
        if use_k {
            c.push(-ti);
        }
        if use_s {
            c.push(-ti * ti);
        }
        c
    };
    let logy: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (lin, lin_cov) = linear_lsq(&t, &logy, cols, p)?;
    // theta = (ln A, k, s) restricted to the model's columns
    let mut theta = lin.clone();
    let mut cov_scaled;
    let unpack = |th: &[f64]| {
        let mut i = 1;
        let k = if use_k {
            i += 1;
            th[i - 1]
        } else {
            0.0
        };
        let s = if use_s { th[i] } else { 0.0 };
        (th[0].exp(), k, s)
    };
    let n = t.len();
    let dof = n.saturating_sub(p);
    if model == DecayModel::Exponential {
        let rss_log: f64 = t.iter().zip(&logy).map(|(&ti, &ly)| (ly - dot(&cols(ti), &theta)).powi(2)).sum();
        let s2 = if dof > 0 { rss_log / dof as f64 } else { 0.0 };
        cov_scaled = lin_cov.iter().map(|c| c * s2).collect::<Vec<_>>();
    } else {
        let model_at = |th: &[f64], ti: f64| {
            let (a, k, s) = unpack(th);
            a * (-k * ti - s * ti * ti).exp()
        };
        let rss = |th: &[f64]| t.iter().zip(&y).map(|(&ti, &yi)| (yi - model_at(th, ti)).powi(2)).sum::<f64>();
        let jac = |th: &[f64]| {
            let mut j = Vec::with_capacity(n * p);
            for &ti in &t {
                let f = model_at(th, ti);
                for c in cols(ti) {
                    // d f / d(ln A) = f, d f / dk = −t f, d f / ds = −t² f
                    j.push(c * f);
                }
            }
            j
        };
        let mut lambda = 1e-3;
        let mut cur = rss(&theta);
        for _ in 0..200 {
            let j = jac(&theta);
            let mut jtj = vec![0.0; p * p];
            let mut jtr = vec![0.0; p];
            for (i, (&ti, &yi)) in t.iter().zip(&y).enumerate() {
                let r = yi - model_at(&theta, ti);
                for a in 0..p {
                    jtr[a] += j[i * p + a] * r;
                    for b in 0..p {
                        jtj[a * p + b] += j[i * p + a] * j[i * p + b];
                    }
                }
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut m = jtj.clone();
                for a in 0..p {
                    m[a * p + a] *= 1.0 + lambda;
                }
                let Some(step) = solve(m, jtr.clone(), p) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = theta.iter().zip(&step).map(|(a, b)| a + b).collect();
                let r = rss(&trial);
                if r <= cur {
                    let rel = (cur - r) / cur.max(1e-300);
                    theta = trial;
                    cur = r;
                    lambda = (lambda * 0.3).max(1e-15);
                    improved = rel > 1e-15;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        let j = jac(&theta);
        let mut jtj = vec![0.0; p * p];
        for i in 0..n {
            for a in 0..p {
                for b in 0..p {
                    jtj[a * p + b] += j[i * p + a] * j[i * p + b];
                }
            }
        }
        let s2 = if dof > 0 { cur / dof as f64 } else { 0.0 };
        cov_scaled = invert(&jtj, p).ok_or_else(|| Error::DegenerateFit("singular Jacobian at the optimum".into()))?;
        cov_scaled.iter_mut().for_each(|c| *c *= s2);
    }
    let (a, k, s) = unpack(&theta);
    let (k, s) = (k / ts, s / (ts * ts));
    let unit = |i: usize| if i == 0 { 1.0 } else if use_k && i == 1 { ts } else { ts * ts };
    let se = |i: usize| cov_scaled[i * p + i].max(0.0).sqrt() / unit(i);
    let mut params = vec![FitParam { name: "amplitude".into(), value: a, ci_half_width: 1.96 * a * se(0) }];
    let mut idx = 1;
    if use_k {
        if !(k > 0.0) {
            return Err(Error::DegenerateFit(alloc::format!("fitted decay rate {k} is not positive")));
        }
        let sk = se(idx);
        idx += 1;
        params.push(match model {
            DecayModel::LorentzianFt => FitParam {
                name: "fwhm_hz".into(),
                value: k / core::f64::consts::PI,
                ci_half_width: 1.96 * sk / core::f64::consts::PI,
            },
            _ => FitParam { name: "t2_s".into(), value: 1.0 / k, ci_half_width: 1.96 * sk / (k * k) },
        });
    }
    if use_s {
        if !(s > 0.0) {
            return Err(Error::DegenerateFit(alloc::format!("fitted Gaussian rate {s} is not positive")));
        }
        // σ = √(2s)/2π
        let sigma = (2.0 * s).sqrt() / TAU;
        params.push(FitParam { name: "sigma_hz".into(), value: sigma, ci_half_width: 1.96 * se(idx) / (TAU * (2.0 * s).sqrt()) });
    }
    let mut fit = DecayFit { model, params, residual_norm: 0.0 };
    fit.residual_norm = points.iter().map(|&(ti, yi)| (yi - fit.evaluate(ti)).powi(2)).sum::<f64>().sqrt();
    Ok(fit)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 4LE amplitude at total delay t = 2τa for optical T2 and equal Gaussian
/// widths σ on δg and δe: e^{−t/T2}·e^{−(πσt)²}.
pub fn four_level_decay(t: f64, t2_opt: f64, sigma_hz: f64) -> f64 {
    (-t / t2_opt - (core::f64::consts::PI * sigma_hz * t).powi(2)).exp()
}

/// Finds the hyperfine width σ for which an exponential fit of
/// [`four_level_decay`] over `delays` gives `target_decay_s`.
pub fn calibrate_sigma(delays: &[f64], t2_opt: f64, target_decay_s: f64) -> Result<f64> {
    if !(target_decay_s > 0.0 && target_decay_s < t2_opt) {
        return Err(Error::FitInput(alloc::format!("target decay {target_decay_s} s must lie in (0, T2 = {t2_opt} s)")));
    }
    let decay_of = |sigma: f64| -> Result<f64> {
        let pts: Vec<(f64, f64)> = delays.iter().map(|&t| (t, four_level_decay(t, t2_opt, sigma))).collect();
        Ok(fit_decay(&pts, DecayModel::Exponential)?.get("t2_s").unwrap_or(f64::NAN))
    };
    let (mut lo, mut hi) = (0.0, 1e3);
    while decay_of(hi)? > target_decay_s {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::DegenerateFit("no width reaches the target decay".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if decay_of(mid)? > target_decay_s {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A beam direction (any length) and vacuum wavelength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub direction: [f64; 3],
    pub wavelength_m: f64,
}

impl Beam {
    pub fn k(&self) -> Result<[f64; 3]> {
        let n = norm(self.direction);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Geometry("beam direction must be a non-zero finite vector".into()));
        }
        if !(self.wavelength_m > 0.0) {
            return Err(Error::Geometry("wavelength must be positive".into()));
        }
        let m = TAU / self.wavelength_m / n;
        Ok(self.direction.map(|d| d * m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "sequence")]
pub enum Geometry {
    /// k_echo = k_π1 + k_π2 − k_in.
    FourLevel { input: Beam, pi1: Beam, pi2: Beam },
    /// k_echo = 2k_π − k_in.
    TwoLevel { input: Beam, pi: Beam },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMatchResult {
    pub k_echo: [f64; 3],
    /// k_echo − (2π/λ_echo)·k̂_echo, rad/m.
    pub delta_k: [f64; 3],
    /// |k_echo| − 2π/λ_echo, rad/m.
    pub delta_k_norm: f64,
    /// sinc²(Δk·L/2).
    pub penalty: f64,
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Phase-matching residual of the echo radiated at `echo_wavelength_m` from
/// a sample of length `length_m`.
pub fn phase_match(geometry: &Geometry, echo_wavelength_m: f64, length_m: f64) -> Result<PhaseMatchResult> {
    if !(echo_wavelength_m > 0.0) || !(length_m >= 0.0) {
        return Err(Error::Geometry("echo wavelength must be positive and length ≥ 0".into()));
    }
    let k_echo = match geometry {
        Geometry::FourLevel { input, pi1, pi2 } => {
            let (a, b, c) = (pi1.k()?, pi2.k()?, input.k()?);
            [0, 1, 2].map(|i| a[i] + b[i] - c[i])
        }
        Geometry::TwoLevel { input, pi } => {
            let (p, c) = (pi.k()?, input.k()?);
            [0, 1, 2].map(|i| 2.0 * p[i] - c[i])
        }
    };
    let kn = norm(k_echo);
    if !(kn > 0.0) {
        return Err(Error::Geometry("echo wavevector vanishes".into()));
    }
    let k0 = TAU / echo_wavelength_m;
    let delta_k_norm = kn - k0;
    let delta_k = k_echo.map(|v| v * delta_k_norm / kn);
    let penalty = sinc(0.5 * delta_k_norm * length_m).powi(2);
    Ok(PhaseMatchResult { k_echo, delta_k, delta_k_norm, penalty })
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Speed of light, m/s.
pub const C: f64 = 299_792_458.0;

/// Wavelength of transition `t` given the optical carrier of the level
/// offsets (the frequency of a transition with zero offset).
pub fn transition_wavelength(ls: &LevelSystem, t: Transition, carrier_hz: f64) -> Result<f64> {
    Ok(C / (carrier_hz + ls.transition_frequency(t.lower, t.upper)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn exponential_recovers_t2() {
        let pts: Vec<(f64, f64)> = (0..12).map(|k| (4e-6 * k as f64 + 2e-6, 0.8 * (-(4e-6 * k as f64 + 2e-6) / 34e-6).exp())).collect();
        let f = fit_decay(&pts, DecayModel::Exponential).unwrap();
        assert_relative_eq!(f.get("t2_s").unwrap(), 34e-6, max_relative = 1e-3);
        assert_relative_eq!(f.amplitude(), 0.8, max_relative = 1e-9);
        assert!(f.residual_norm < 1e-12);
    }

    #[test]
    fn two_points_exact() {
        let f = fit_decay(&[(1.0, 2.0), (3.0, 0.5)], DecayModel::Exponential).unwrap();
        assert_relative_eq!(f.evaluate(1.0), 2.0, max_relative = 1e-12);
        assert_relative_eq!(f.evaluate(3.0), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn gaussian_width() {
        let sigma = 10e3;
        let pts: Vec<(f64, f64)> = (0..15).map(|k| 3e-6 * k as f64).map(|t| (t, 1.3 * (-(TAU * sigma * t).powi(2) / 2.0).exp())).collect();
        let f = fit_decay(&pts, DecayModel::Gaussian).unwrap();
        assert_relative_eq!(f.get("sigma_hz").unwrap(), sigma, max_relative = 1e-2);
    }

    #[test]
    fn all_models_recover_amplitude() {
        let cases: [(DecayModel, fn(f64) -> f64); 4] = [
            (DecayModel::Exponential, |t| (-t / 30e-6).exp()),
            (DecayModel::Gaussian, |t| (-(TAU * 8e3 * t).powi(2) / 2.0).exp()),
            (DecayModel::LorentzianFt, |t| (-core::f64::consts::PI * 5e3 * t).exp()),
            (DecayModel::VoigtFt, |t| (-t / 150e-6 - (TAU * 6e3 * t).powi(2) / 2.0).exp()),
        ];
        for (m, f) in cases {
            let pts: Vec<(f64, f64)> = (1..20).map(|k| 2.5e-6 * k as f64).map(|t| (t, 0.42 * f(t))).collect();
            let fit = fit_decay(&pts, m).unwrap();
            assert_relative_eq!(fit.amplitude(), 0.42, max_relative = 1e-2);
        }
    }

    #[test]
    fn misfit_shows_in_residual() {
        let pts: Vec<(f64, f64)> = (1..20).map(|k| 2.5e-6 * k as f64).map(|t| (t, (-(TAU * 8e3 * t).powi(2) / 2.0).exp())).collect();
        let wrong = fit_decay(&pts, DecayModel::Exponential).unwrap();
        let right = fit_decay(&pts, DecayModel::Gaussian).unwrap();
        assert!(wrong.residual_norm > 10.0 * right.residual_norm.max(1e-12));
    }

    #[test]
    fn fit_input_errors() {
        assert!(matches!(fit_decay(&[(0.0, 1.0)], DecayModel::Exponential), Err(Error::FitInput(_))));
        assert!(matches!(fit_decay(&[(0.0, 1.0), (1.0, -1.0), (2.0, 0.5)], DecayModel::Exponential), Err(Error::FitInput(_))));
        assert!(matches!(fit_decay(&[(1.0, 1.0), (1.0, 0.5), (2.0, 0.4)], DecayModel::Gaussian), Err(Error::FitInput(_))));
    }

    #[test]
    fn calibration_round_trip() {
        let delays: Vec<f64> = (1..=12).map(|k| 5e-6 * k as f64).collect();
        let sigma = calibrate_sigma(&delays, 150e-6, 34e-6).unwrap();
        let pts: Vec<(f64, f64)> = delays.iter().map(|&t| (t, four_level_decay(t, 150e-6, sigma))).collect();
        let t2 = fit_decay(&pts, DecayModel::Exponential).unwrap().get("t2_s").unwrap();
        assert_relative_eq!(t2, 34e-6, max_relative = 1e-6);
        assert!(sigma > 1e3 && sigma < 1e5);
    }

    fn beam(dir: [f64; 3], lambda: f64) -> Beam {
        Beam { direction: dir, wavelength_m: lambda }
    }

    /// |mean over slices of e^{iΔk z}|².
    fn slice_sum(dk: f64, l: f64, n: usize) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for j in 0..n {
            let z = (j as f64 + 0.5) / n as f64 * l - 0.5 * l;
            re += (dk * z).cos();
            im += (dk * z).sin();
        }
        (re * re + im * im) / (n * n) as f64
    }

    #[test]
    fn collinear_four_level_is_matched() {
        let ls = crate::level::build_default_system();
        let carrier = 494.7e12;
        let wl = |g, e| transition_wavelength(&ls, Transition::new(g, e), carrier).unwrap();
        let z = [0.0, 0.0, 1.0];
        let g = Geometry::FourLevel { input: beam(z, wl(2, 5)), pi1: beam(z, wl(3, 5)), pi2: beam(z, wl(2, 4)) };
        let r = phase_match(&g, wl(3, 4), 0.02).unwrap();
        assert!((1.0 - r.penalty).abs() < 1e-4);
        assert!(r.delta_k_norm.abs() * 0.02 < 1e-6);
    }

    #[test]
    fn off_axis_penalty_matches_slice_sum() {
        let lambda = 606e-9;
        let th = 10e-3;
        let z = [0.0, 0.0, 1.0];
        let tilted = [th.sin(), 0.0, th.cos()];
        // tilting the first π pulse keeps |k_echo| = k: matched off axis
        let g = Geometry::FourLevel { input: beam(z, lambda), pi1: beam(tilted, lambda), pi2: beam(z, lambda) };
        let r = phase_match(&g, lambda, 0.02).unwrap();
        assert!(1.0 - r.penalty < 1e-9);
        // tilting the input does not
        let g = Geometry::FourLevel { input: beam(tilted, lambda), pi1: beam(z, lambda), pi2: beam(z, lambda) };
        let r = phase_match(&g, lambda, 0.02).unwrap();
        assert!(r.penalty < 1.0);
        assert_relative_eq!(r.penalty, slice_sum(r.delta_k_norm, 0.02, 200_000), epsilon = 1e-6);
        // two-level echo with the input off the π axis
        let g = Geometry::TwoLevel { input: beam(tilted, lambda), pi: beam(z, lambda) };
        let r = phase_match(&g, lambda, 0.02).unwrap();
        assert!(r.delta_k_norm.abs() > 1.0);
        assert!(matches!(phase_match(&Geometry::TwoLevel { input: beam([0.0; 3], lambda), pi: beam(z, lambda) }, lambda, 0.02), Err(Error::Geometry(_))));
    }

    proptest! {
        #[test]
        fn penalty_bounds(dx in -0.1..0.1f64, dy in -0.1..0.1f64, l in 0.0..0.05f64) {
            let lambda = 606e-9;
            let g = Geometry::TwoLevel { input: beam([dx, dy, 1.0], lambda), pi: beam([0.0, 0.0, 1.0], lambda) };
            let r = phase_match(&g, lambda, l).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.penalty));
        }
    }
}
