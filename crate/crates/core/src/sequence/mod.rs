//! Pulse sequences: timed optical pulses and observation windows.
//!
//! A [`SequenceTimeline`] is what the dynamics consume. It is normally built
//! by parsing the line-oriented sequence language (see [`parse`]) and then
//! resolving it against a [`LevelSystem`](crate::LevelSystem), which lets
//! named timing parameters be overridden for sweeps.

mod parse;
mod pathway;

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::level::Transition;

pub use parse::{parse_program, parse_sequence, Program};
pub use pathway::{predict_pathway, PathwayPrediction};

/// Gaussian envelopes are integrated over ±this many FWHM around the centre.
pub const GAUSS_TRUNCATION_FWHM: f64 = 3.0;

const FOUR_LN2: f64 = 2.772_588_722_239_781;

/// Temporal envelope of the Rabi frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Gaussian { fwhm: f64 },
    Square { duration: f64 },
}

impl Envelope {
    /// Amplitude FWHM (the duration for a square pulse), s.
    pub fn fwhm(&self) -> f64 {
        match *self {
            Envelope::Gaussian { fwhm } => fwhm,
            Envelope::Square { duration } => duration,
        }
    }

    /// Half-length of the integration support around the centre, s.
    pub fn half_support(&self) -> f64 {
        match *self {
            Envelope::Gaussian { fwhm } => GAUSS_TRUNCATION_FWHM * fwhm,
            Envelope::Square { duration } => 0.5 * duration,
        }
    }

    /// Unit-peak shape at offset `dt` from the centre; 0 outside the support.
    pub fn shape(&self, dt: f64) -> f64 {
        if dt.abs() > self.half_support() {
            return 0.0;
        }
        match *self {
            Envelope::Gaussian { fwhm } => (-FOUR_LN2 * dt * dt / (fwhm * fwhm)).exp(),
            Envelope::Square { .. } => 1.0,
        }
    }

    /// Shape without the support cut-off.
    pub fn shape_untruncated(&self, dt: f64) -> f64 {
        match *self {
            Envelope::Gaussian { fwhm } => (-FOUR_LN2 * dt * dt / (fwhm * fwhm)).exp(),
            Envelope::Square { .. } => 1.0,
        }
    }

    /// ∫ shape dt over the truncated support, s.
    pub fn integral(&self) -> f64 {
        match *self {
            Envelope::Gaussian { fwhm } => {
                let a = FOUR_LN2.sqrt() / fwhm;
                PI.sqrt() / a * libm::erf(a * GAUSS_TRUNCATION_FWHM * fwhm)
            }
            Envelope::Square { duration } => duration,
        }
    }
}

/// One optical pulse on a single transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    /// Envelope centre, s.
    pub at: f64,
    pub envelope: Envelope,
    pub transition: Transition,
    /// Pulse area in units of π.
    pub area_pi: f64,
    /// Carrier offset from the nominal transition frequency, Hz.
    pub carrier_detuning: f64,
    /// Carrier phase in units of π.
    pub phase_pi: f64,
    /// Unit propagation direction.
    pub k: [f64; 3],
}

impl Pulse {
    /// Pulse area θ = ∫Ω dt, radians.
    pub fn area(&self) -> f64 {
        self.area_pi * PI
    }

    pub fn phase(&self) -> f64 {
        self.phase_pi * PI
    }

    /// Integration support [start, end], s.
    pub fn support(&self) -> (f64, f64) {
        let h = self.envelope.half_support();
        (self.at - h, self.at + h)
    }

    /// Peak Rabi frequency, rad/s.
    pub fn peak_rabi(&self) -> f64 {
        self.area() / self.envelope.integral()
    }

    /// Rabi frequency at time `t`, rad/s.
    pub fn rabi(&self, t: f64) -> f64 {
        self.peak_rabi() * self.envelope.shape(t - self.at)
    }

    /// Whether this pulse is weak enough to act as the probe input.
    pub fn is_input(&self) -> bool {
        self.area_pi < 0.5
    }
}

/// Time interval sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub start: f64,
    pub end: f64,
    /// Samples per second.
    pub rate: f64,
}

impl ObservationWindow {
    pub fn n_samples(&self) -> usize {
        ((self.end - self.start) * self.rate + 1e-9).floor() as usize + 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples()).map(|k| self.start + k as f64 / self.rate).collect()
    }
}

/// A validated, time-ordered pulse programme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTimeline {
    /// Level-system file named by a `system` line, if any.
    pub system: Option<String>,
    /// Named timing parameters (`let` bindings), in declaration order.
    pub params: Vec<(String, f64)>,
    /// Pulses sorted by centre time.
    pub pulses: Vec<Pulse>,
    pub windows: Vec<ObservationWindow>,
}

impl SequenceTimeline {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Earliest instant touched by a pulse or window.
    pub fn start(&self) -> f64 {
        let p = self.pulses.iter().map(|p| p.support().0);
        let w = self.windows.iter().map(|w| w.start);
        p.chain(w).fold(0.0, f64::min)
    }

    /// Latest instant touched by a pulse or window.
    pub fn total_duration(&self) -> f64 {
        let p = self.pulses.iter().map(|p| p.support().1);
        let w = self.windows.iter().map(|w| w.end);
        p.chain(w).fold(0.0, f64::max)
    }

    /// Index of the weak input pulse, if the first pulse is one.
    pub fn input_index(&self) -> Option<usize> {
        self.pulses.first().filter(|p| p.is_input()).map(|_| 0)
    }

    /// Canonical text form; parsing it reproduces this timeline.
    pub fn to_text(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        if let Some(sys) = &self.system {
            let _ = writeln!(s, "system {sys}");
        }
        for (n, v) in &self.params {
            let _ = writeln!(s, "let {n} = {v}s");
        }
        for p in &self.pulses {
            let env = match p.envelope {
                Envelope::Gaussian { fwhm } => alloc::format!("gauss(fwhm={fwhm}s)"),
                Envelope::Square { duration } => alloc::format!("square(dur={duration}s)"),
            };
            let _ = writeln!(
                s,
                "pulse at={}s trans={} area={}pi env={} phase={}pi detune={}Hz k=({},{},{})",
                p.at,
                p.transition.name(),
                p.area_pi,
                env,
                p.phase_pi,
                p.carrier_detuning,
                p.k[0],
                p.k[1],
                p.k[2]
            );
        }
        for w in &self.windows {
            let _ = writeln!(s, "observe from={}s to={}s rate={}Hz", w.start, w.end, w.rate);
        }
        s
    }

    /// FNV-1a hash of the canonical text.
    pub fn fingerprint(&self) -> u64 {
        crate::hash::fnv1a(self.to_text().as_bytes())
    }
}
