//! Weak-field propagation through the prepared absorbing feature.
//!
//! Optical depths are quoted for intensity (transmission e^{−αL}); field
//! exponents carry αL/2. The bright pulses are taken as undepleted, so each
//! class sees the same rotations at every depth. Only the weak input and the
//! emitted fields are propagated. With z measured in units of the sample
//! length, the input reaching depth z is scaled by A(z) = exp(−a_in z), and
//! the field radiated at z is attenuated (or amplified) on the way out by
//! exp(−a_out (1 − z)). A class's emission at the exit is therefore its
//! thin-sample emission times Φ = ∫₀¹ A(z) B(1 − z) dz.

use alloc::vec::Vec;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::Distribution;

/// Absorption lineshape of the prepared feature, peak-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureProfile {
    Analytic(Distribution),
    /// Piecewise-linear table on ascending detunings, 0 outside.
    Tabulated { detuning_hz: Vec<f64>, value: Vec<f64> },
}

impl FeatureProfile {
    pub fn at(&self, x: f64) -> f64 {
        match self {
            FeatureProfile::Analytic(d) => d.profile(x),
            FeatureProfile::Tabulated { detuning_hz, value } => {
                let n = detuning_hz.len();
                if n == 0 || x < detuning_hz[0] || x > detuning_hz[n - 1] {
                    return 0.0;
                }
                let k = detuning_hz.partition_point(|&d| d <= x).clamp(1, n - 1);
                let (x0, x1) = (detuning_hz[k - 1], detuning_hz[k]);
                let f = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
                value[k - 1] + f * (value[k] - value[k - 1])
            }
        }
    }

    /// ∫ profile dx, Hz.
    pub fn equivalent_width(&self) -> f64 {
        match self {
            FeatureProfile::Analytic(d) => d.equivalent_width(),
            FeatureProfile::Tabulated { detuning_hz, value } => detuning_hz
                .windows(2)
                .zip(value.windows(2))
                .map(|(x, v)| 0.5 * (x[1] - x[0]) * (v[0] + v[1]))
                .sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            FeatureProfile::Analytic(d) => d.validate(),
            FeatureProfile::Tabulated { detuning_hz, value } => {
                if detuning_hz.len() != value.len() || detuning_hz.len() < 2 {
                    return Err(Error::InvalidMedium("profile table needs ≥ 2 matching points".into()));
                }
                if detuning_hz.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidMedium("profile detunings must ascend".into()));
                }
                if value.iter().any(|v| !(*v >= 0.0 && *v <= 1.0 + 1e-12)) {
                    return Err(Error::InvalidMedium("profile values must lie in [0, 1]".into()));
                }
                Ok(())
            }
        }
    }
}

/// Optically thick prepared feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    /// Peak intensity optical depth.
    pub alpha_l: f64,
    pub profile: FeatureProfile,
    pub n_slices: usize,
}

impl Medium {
    pub fn new(alpha_l: f64, profile: FeatureProfile) -> Self {
        Self { alpha_l, profile, n_slices: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_l >= 0.0 && self.alpha_l.is_finite()) {
            return Err(Error::InvalidMedium(alloc::format!("alphaL {} must be finite and ≥ 0", self.alpha_l)));
        }
        if self.n_slices < 8 {
            return Err(Error::InvalidMedium("n_slices must be ≥ 8".into()));
        }
        self.profile.validate()
    }

    /// Field exponent a = (αL/2)·profile·s·d² for a transition of relative
    /// dipole `d` and population-difference factor `s`.
    pub fn field_exponent(&self, x: f64, s: f64, d: f64) -> f64 {
        0.5 * self.alpha_l * self.profile.at(x) * s * d * d
    }

    /// Closed-form field transmission exp(−a).
    pub fn transmission(&self, x: f64, s: f64) -> f64 {
        (-self.field_exponent(x, s, 1.0)).exp()
    }
}

/// Applies the closed-form Beer–Lambert factor to each spectral component.
/// `s(x)` is the population-difference factor at detuning x.
pub fn transmit_weak_pulse(m: &Medium, freqs_hz: &[f64], spectrum: &[Complex64], s: impl Fn(f64) -> f64) -> Vec<Complex64> {
    freqs_hz.iter().zip(spectrum).map(|(&x, &e)| e * m.transmission(x, s(x))).collect()
}

/// Integrates dA/dz = −a_in·A, dB/dz = −a_out·B + A over z ∈ [0, 1] with
/// A(0) = 1, B(0) = 0 using `n` RK4 slices; returns (A(1), B(1)).
pub fn integrate_slices(a_in: f64, a_out: f64, n: usize) -> (f64, f64) {
    let h = 1.0 / n as f64;
    let f = |a: f64, b: f64| (-a_in * a, -a_out * b + a);
    let (mut a, mut b) = (1.0, 0.0);
    for _ in 0..n {
        let k1 = f(a, b);
        let k2 = f(a + 0.5 * h * k1.0, b + 0.5 * h * k1.1);
        let k3 = f(a + 0.5 * h * k2.0, b + 0.5 * h * k2.1);
        let k4 = f(a + h * k3.0, b + h * k3.1);
        a += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        b += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (a, b)
}

/// Relative change allowed when the slice count is doubled.
pub const SLICE_TOL: f64 = 1e-6;

/// Depth factor Φ for one class, checked by slice doubling.
pub fn echo_factor(m: &Medium, a_in: f64, a_out: f64) -> Result<f64> {
    let (_, coarse) = integrate_slices(a_in, a_out, m.n_slices);
    let (_, fine) = integrate_slices(a_in, a_out, 2 * m.n_slices);
    let change = ((fine - coarse) / fine.abs().max(1e-300)).abs();
    if !(change <= SLICE_TOL) {
        return Err(Error::SliceConvergence { change });
    }
    Ok(fine)
}

/// Peak |echo| over peak |input|.
pub fn efficiency(echo: &[Complex64], input_peak: f64, floor: f64) -> Result<f64> {
    let peak = echo.iter().map(|e| e.norm()).fold(0.0, f64::max);
    if !(input_peak > 0.0) || !(peak > floor) {
        return Err(Error::NoEcho { peak, floor });
    }
    Ok(peak / input_peak)
}
