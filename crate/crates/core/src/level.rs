//! Level structure, transition frequencies and the inhomogeneous detuning
//! model.
//!
//! Energies are frequency offsets in Hz. Ground levels are measured from
//! |1⟩, excited levels from the lowest excited level; the optical gap itself
//! never enters because every transition is handled in its own rotating
//! frame.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-splitting + excited-splitting sum of the default system, which is
/// the input-to-echo carrier offset.
pub const DEFAULT_ECHO_OFFSET_HZ: f64 = 14.8e6;

/// An ordered pair of levels (1-based), lower level first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub lower: usize,
    pub upper: usize,
}

impl Transition {
    pub const fn new(lower: usize, upper: usize) -> Self {
        Self { lower, upper }
    }

    /// Name in the sequence language, e.g. `w25`, or `2-5` for levels ≥ 10.
    pub fn name(&self) -> alloc::string::String {
        if self.lower < 10 && self.upper < 10 {
            format!("w{}{}", self.lower, self.upper)
        } else {
            format!("{}-{}", self.lower, self.upper)
        }
    }

    pub fn involves(&self, level: usize) -> bool {
        self.lower == level || self.upper == level
    }

    /// The other end of the transition, if `level` is one of its ends.
    pub fn partner(&self, level: usize) -> Option<usize> {
        if level == self.lower {
            Some(self.upper)
        } else if level == self.upper {
            Some(self.lower)
        } else {
            None
        }
    }
}

impl core::fmt::Display for Transition {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({},{})", self.lower, self.upper)
    }
}

/// The four levels forming the double-Λ loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoubleLambda {
    /// Ground level addressed by the input (|2⟩).
    pub input_ground: usize,
    /// Ground level that carries the echo (|3⟩).
    pub echo_ground: usize,
    /// Excited level that carries the echo (|4⟩).
    pub echo_excited: usize,
    /// Excited level addressed by the input (|5⟩).
    pub input_excited: usize,
}

impl DoubleLambda {
    pub fn input(&self) -> Transition {
        Transition::new(self.input_ground, self.input_excited)
    }
    pub fn first_rephase(&self) -> Transition {
        Transition::new(self.echo_ground, self.input_excited)
    }
    pub fn second_rephase(&self) -> Transition {
        Transition::new(self.input_ground, self.echo_excited)
    }
    pub fn echo(&self) -> Transition {
        Transition::new(self.echo_ground, self.echo_excited)
    }
}

impl Default for DoubleLambda {
    fn default() -> Self {
        Self { input_ground: 2, echo_ground: 3, echo_excited: 4, input_excited: 5 }
    }
}

/// Level structure and material constants.
///
/// Serialized as the `levels.json` document: manifold splittings in Hz,
/// lifetimes in seconds, and the `[ground][excited]` dipole and branching
/// tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSystem {
    /// Successive splittings of the ground manifold, |1⟩→|2⟩, |2⟩→|3⟩, ...
    pub ground_splittings_hz: Vec<f64>,
    /// Successive splittings of the excited manifold.
    pub excited_splittings_hz: Vec<f64>,
    /// Relative transition amplitudes `dipole[g][e]`, maximum 1.
    pub dipole: Vec<Vec<f64>>,
    /// `branching[g][e]`: probability that decay of excited `e` lands in ground `g`.
    pub branching: Vec<Vec<f64>>,
    pub t1_opt_s: f64,
    pub t2_opt_s: f64,
    pub t1_spin_s: f64,
    pub t2_spin_s: f64,
    #[serde(default)]
    pub double_lambda: DoubleLambda,
}

impl Default for LevelSystem {
    fn default() -> Self {
        build_default_system()
    }
}

/// The six-level Pr³⁺:Y₂SiO₅ model with ω23 = 10.2 MHz and ω45 = 4.6 MHz.
pub fn build_default_system() -> LevelSystem {
    LevelSystem::pr_yso(10.2e6, 4.6e6)
}

impl LevelSystem {
    /// Six-level system with the given double-Λ splittings. The outer
    /// splittings (|1⟩→|2⟩ 17.3 MHz, |5⟩→|6⟩ 4.8 MHz) stay fixed.
    pub fn pr_yso(ground_23_hz: f64, excited_45_hz: f64) -> Self {
        Self {
            ground_splittings_hz: vec![17.3e6, ground_23_hz],
            excited_splittings_hz: vec![excited_45_hz, 4.8e6],
            dipole: vec![vec![1.0; 3]; 3],
            branching: vec![vec![1.0 / 3.0; 3]; 3],
            t1_opt_s: 160e-6,
            t2_opt_s: 150e-6,
            t1_spin_s: 100.0,
            t2_spin_s: 1.0,
            double_lambda: DoubleLambda::default(),
        }
    }

    pub fn n_ground(&self) -> usize {
        self.ground_splittings_hz.len() + 1
    }

    pub fn n_excited(&self) -> usize {
        self.excited_splittings_hz.len() + 1
    }

    pub fn n_levels(&self) -> usize {
        self.n_ground() + self.n_excited()
    }

    pub fn is_ground(&self, level: usize) -> bool {
        level >= 1 && level <= self.n_ground()
    }

    pub fn is_excited(&self, level: usize) -> bool {
        level > self.n_ground() && level <= self.n_levels()
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.n_levels() {
            return Err(Error::LevelOutOfRange { level, n_levels: self.n_levels() });
        }
        Ok(())
    }

    /// Energy offset of a level within its manifold, Hz.
    pub fn energy(&self, level: usize) -> Result<f64> {
        self.check_level(level)?;
        let ng = self.n_ground();
        let (splits, k) = if level <= ng {
            (&self.ground_splittings_hz, level - 1)
        } else {
            (&self.excited_splittings_hz, level - ng - 1)
        };
        Ok(splits[..k].iter().sum())
    }

    /// ω_ij = E_j − E_i in the manifold-offset convention (antisymmetric).
    pub fn transition_frequency(&self, i: usize, j: usize) -> Result<f64> {
        Ok(self.energy(j)? - self.energy(i)?)
    }

    /// True for a ground↔excited pair.
    pub fn is_optical(&self, t: Transition) -> bool {
        self.is_ground(t.lower) && self.is_excited(t.upper)
    }

    /// Every ground→excited transition, ordered by ground then excited level.
    pub fn optical_transitions(&self) -> Vec<Transition> {
        let ng = self.n_ground();
        let mut out = Vec::with_capacity(ng * self.n_excited());
        for g in 1..=ng {
            for e in ng + 1..=self.n_levels() {
                out.push(Transition::new(g, e));
            }
        }
        out
    }

    /// Relative dipole amplitude of an optical transition; 0 otherwise.
    pub fn dipole_of(&self, t: Transition) -> f64 {
        if !self.is_optical(t) {
            return 0.0;
        }
        let ng = self.n_ground();
        self.dipole[t.lower - 1][t.upper - ng - 1]
    }

    /// Branching ratio for decay of excited `e` into ground `g`.
    pub fn branching_of(&self, g: usize, e: usize) -> f64 {
        self.branching[g - 1][e - self.n_ground() - 1]
    }

    /// ω23 + ω45 for the configured double-Λ: the carrier offset between the
    /// input and echo transitions.
    pub fn echo_offset_hz(&self) -> f64 {
        let dl = self.double_lambda;
        let input = self.transition_frequency(dl.input_ground, dl.input_excited).unwrap_or(f64::NAN);
        let echo = self.transition_frequency(dl.echo_ground, dl.echo_excited).unwrap_or(f64::NAN);
        input - echo
    }

    /// Checks every structural and physical invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidSystem(m));
        let (ng, ne) = (self.n_ground(), self.n_excited());
        if self.ground_splittings_hz.iter().chain(&self.excited_splittings_hz).any(|s| !s.is_finite()) {
            return bad("splittings must be finite".into());
        }
        if self.dipole.len() != ng || self.dipole.iter().any(|r| r.len() != ne) {
            return bad(format!("dipole table must be {ng}x{ne}"));
        }
        if self.branching.len() != ng || self.branching.iter().any(|r| r.len() != ne) {
            return bad(format!("branching table must be {ng}x{ne}"));
        }
        let dmax = self.dipole.iter().flatten().fold(0.0_f64, |m, &d| m.max(d));
        if self.dipole.iter().flatten().any(|&d| !(d >= 0.0)) || (dmax - 1.0).abs() > 1e-12 {
            return bad("dipole strengths must be non-negative with maximum 1".into());
        }
        for e in 0..ne {
            let col: f64 = (0..ng).map(|g| self.branching[g][e]).sum();
            if (col - 1.0).abs() > 1e-12 || (0..ng).any(|g| !(self.branching[g][e] >= 0.0)) {
                return bad(format!("branching from excited level {} sums to {col}, not 1", ng + e + 1));
            }
        }
        for (name, v) in [
            ("t1_opt", self.t1_opt_s),
            ("t2_opt", self.t2_opt_s),
            ("t1_spin", self.t1_spin_s),
            ("t2_spin", self.t2_spin_s),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive (use infinity to disable)"));
            }
        }
        if 1.0 / self.t2_opt_s < 0.5 / self.t1_opt_s {
            return bad("optical dephasing 1/T2 below the lifetime limit 1/(2 T1)".into());
        }
        if 1.0 / self.t2_spin_s < 0.5 / self.t1_spin_s {
            return bad("spin dephasing 1/T2 below the lifetime limit 1/(2 T1)".into());
        }
        let dl = self.double_lambda;
        for g in [dl.input_ground, dl.echo_ground] {
            if !self.is_ground(g) {
                return bad(format!("double-lambda level {g} is not a ground level"));
            }
        }
        for e in [dl.echo_excited, dl.input_excited] {
            if !self.is_excited(e) {
                return bad(format!("double-lambda level {e} is not an excited level"));
            }
        }
        if dl.input_ground == dl.echo_ground || dl.echo_excited == dl.input_excited {
            return bad("double-lambda levels must be distinct".into());
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the default-only check that the
    /// double-Λ splittings add up to the 14.8 MHz input-echo offset.
    pub fn validate_default(&self) -> Result<()> {
        self.validate()?;
        let off = self.echo_offset_hz();
        if (off - DEFAULT_ECHO_OFFSET_HZ).abs() > 1.0 {
            return Err(Error::InvalidSystem(format!(
                "input-echo offset {off} Hz differs from {DEFAULT_ECHO_OFFSET_HZ} Hz"
            )));
        }
        Ok(())
    }

    /// Per-level frequency shifts of one atom class.
    ///
    /// The optical shift Δ moves the whole excited manifold. The hyperfine
    /// shifts δg and δe perturb the splittings: a ground level moves by
    /// δg times its distance from the input ground level in units of the
    /// double-Λ ground splitting, and likewise for excited levels. On the
    /// double-Λ this gives Δ25 = Δ, Δ35 = Δ − δg, Δ24 = Δ − δe,
    /// Δ34 = Δ − δg − δe and Δ23 = δg.
    pub fn class_detunings(&self, class: &AtomClass) -> DetuningTable {
        let dl = self.double_lambda;
        let e = |l: usize| self.energy(l).unwrap_or(0.0);
        let g_ref = e(dl.input_ground);
        let g_span = e(dl.echo_ground) - g_ref;
        let x_ref = e(dl.input_excited);
        let x_span = x_ref - e(dl.echo_excited);
        let shifts = (1..=self.n_levels())
            .map(|l| {
                if self.is_ground(l) {
                    class.delta_g * (e(l) - g_ref) / g_span
                } else {
                    class.delta_opt + class.delta_e * (e(l) - x_ref) / x_span
                }
            })
            .collect();
        DetuningTable { shifts }
    }
}

/// Per-level frequency shifts (Hz) of one class relative to the nominal
/// level energies. The detuning of transition i→j is `shift[j] − shift[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetuningTable {
    pub shifts: Vec<f64>,
}

impl DetuningTable {
    /// All-zero table for `n` levels.
    pub fn zero(n: usize) -> Self {
        Self { shifts: vec![0.0; n] }
    }

    /// Detuning of the i→j transition from its nominal frequency, Hz.
    pub fn detuning(&self, i: usize, j: usize) -> f64 {
        self.shifts[j - 1] - self.shifts[i - 1]
    }

    pub fn of(&self, t: Transition) -> f64 {
        self.detuning(t.lower, t.upper)
    }

    /// Largest |detuning| over all level pairs, Hz.
    pub fn max_abs(&self) -> f64 {
        let (lo, hi) = self
            .shifts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if self.shifts.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }
}

/// Lineshape of an inhomogeneous distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Gaussian,
    Lorentzian,
    Uniform,
}

/// A zero-centred distribution of frequency shifts.
///
/// `width_hz` is the standard deviation for a Gaussian, the half width at
/// half maximum for a Lorentzian and the half range for a uniform
/// distribution. A zero width is the point mass at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub shape: Shape,
    pub width_hz: f64,
}

impl Distribution {
    pub const fn point() -> Self {
        Self { shape: Shape::Gaussian, width_hz: 0.0 }
    }
    pub const fn gaussian(sigma_hz: f64) -> Self {
        Self { shape: Shape::Gaussian, width_hz: sigma_hz }
    }
    pub const fn lorentzian(hwhm_hz: f64) -> Self {
        Self { shape: Shape::Lorentzian, width_hz: hwhm_hz }
    }
    pub const fn uniform(half_range_hz: f64) -> Self {
        Self { shape: Shape::Uniform, width_hz: half_range_hz }
    }

    pub fn is_point(&self) -> bool {
        self.width_hz == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_hz >= 0.0) || !self.width_hz.is_finite() {
            return Err(Error::InvalidDistribution(format!("width {} must be finite and >= 0", self.width_hz)));
        }
        Ok(())
    }

    /// |E[exp(−i 2π x t)]| for this distribution.
    pub fn characteristic_magnitude(&self, t: f64) -> f64 {
        let w = self.width_hz;
        let x = crate::TAU * w * t;
        match self.shape {
            _ if w == 0.0 => 1.0,
            Shape::Gaussian => (-0.5 * x * x).exp(),
            Shape::Lorentzian => (-x.abs()).exp(),
            Shape::Uniform => {
                if x == 0.0 {
                    1.0
                } else {
                    (x.sin() / x).abs()
                }
            }
        }
    }

    /// ∫ p(x)/max p dx, the equivalent width of the normalized lineshape, Hz.
    pub fn equivalent_width(&self) -> f64 {
        let w = self.width_hz;
        match self.shape {
            Shape::Gaussian => crate::TAU.sqrt() * w,
            Shape::Lorentzian => core::f64::consts::PI * w,
            Shape::Uniform => 2.0 * w,
        }
    }

    /// Lineshape normalized to peak 1 at zero shift.
    pub fn profile(&self, x: f64) -> f64 {
        let w = self.width_hz;
        if w == 0.0 {
            return if x == 0.0 { 1.0 } else { 0.0 };
        }
        match self.shape {
            Shape::Gaussian => (-0.5 * (x / w) * (x / w)).exp(),
            Shape::Lorentzian => 1.0 / (1.0 + (x / w) * (x / w)),
            Shape::Uniform => {
                if x.abs() <= w {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Inhomogeneous detuning model. Δ is common to all optical transitions of
/// one ion; δg and δe are independent of Δ and of each other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetuningModel {
    pub optical: Distribution,
    #[serde(default = "Distribution::point")]
    pub ground: Distribution,
    #[serde(default = "Distribution::point")]
    pub excited: Distribution,
}

impl DetuningModel {
    pub fn validate(&self) -> Result<()> {
        self.optical.validate()?;
        self.ground.validate()?;
        self.excited.validate()
    }
}

/// One inhomogeneous frequency class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomClass {
    pub delta_opt: f64,
    pub delta_g: f64,
    pub delta_e: f64,
    pub weight: f64,
}

impl AtomClass {
    pub const fn resonant() -> Self {
        Self { delta_opt: 0.0, delta_g: 0.0, delta_e: 0.0, weight: 1.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn default_system_constants() {
        let ls = build_default_system();
        ls.validate_default().unwrap();
        assert_eq!(ls.t2_opt_s, 150e-6);
        assert_eq!(ls.t1_opt_s, 160e-6);
        assert_eq!(ls.t1_spin_s, 100.0);
        assert_eq!(ls.n_levels(), 6);
        assert_relative_eq!(ls.echo_offset_hz(), 14.8e6, max_relative = 1e-12);
        let beta5: f64 = (1..=3).map(|g| ls.branching_of(g, 5)).sum();
        assert_relative_eq!(beta5, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn transition_frequency_examples() {
        let ls = build_default_system();
        assert_eq!(ls.transition_frequency(2, 2).unwrap(), 0.0);
        assert_eq!(ls.transition_frequency(2, 3).unwrap(), -ls.transition_frequency(3, 2).unwrap());
        let w25 = ls.transition_frequency(2, 5).unwrap();
        assert_relative_eq!(ls.transition_frequency(3, 4).unwrap(), w25 - 14.8e6, epsilon = 1e-6);
        assert!(matches!(ls.transition_frequency(0, 2), Err(Error::LevelOutOfRange { .. })));
        assert!(matches!(ls.transition_frequency(2, 7), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn validation_rejects_bad_tables() {
        let mut ls = build_default_system();
        ls.branching[0][1] = 0.5;
        assert!(ls.validate().is_err());
        let mut ls = build_default_system();
        ls.t2_opt_s = 1.0;
        assert!(ls.validate().is_err());
        let mut ls = build_default_system();
        ls.dipole[1][1] = 0.5;
        ls.validate().unwrap();
        ls.dipole.iter_mut().flatten().for_each(|d| *d *= 0.5);
        assert!(ls.validate().is_err());
        let custom = LevelSystem::pr_yso(9.0e6, 4.6e6);
        custom.validate().unwrap();
        assert!(custom.validate_default().is_err());
    }

    #[test]
    fn detuning_correlation_rule() {
        let ls = build_default_system();
        let zero = ls.class_detunings(&AtomClass::resonant());
        assert!(zero.shifts.iter().all(|&s| s == 0.0));

        // Δ34 = Δ − δg − δe, recomputed from the single-transition definitions.
        let c = AtomClass { delta_opt: 1e3, delta_g: 2e3, delta_e: 3e3, weight: 1.0 };
        let d = ls.class_detunings(&c);
        let d25 = c.delta_opt;
        let d35 = c.delta_opt - c.delta_g;
        let d24 = c.delta_opt - c.delta_e;
        assert_relative_eq!(d.detuning(2, 5), d25, epsilon = 1e-9);
        assert_relative_eq!(d.detuning(3, 5), d35, epsilon = 1e-9);
        assert_relative_eq!(d.detuning(2, 4), d24, epsilon = 1e-9);
        assert_relative_eq!(d.detuning(3, 4), -4e3, epsilon = 1e-9);
        assert_relative_eq!(d.detuning(3, 4), d35 + d24 - d25, epsilon = 1e-9);
        assert_relative_eq!(d.detuning(2, 3), c.delta_g, epsilon = 1e-9);
    }

    #[test]
    fn characteristic_functions() {
        let g = Distribution::gaussian(10e3);
        let t = 20e-6;
        let x = crate::TAU * 10e3 * t;
        assert_relative_eq!(g.characteristic_magnitude(t), (-0.5 * x * x).exp(), epsilon = 1e-15);
        assert_eq!(Distribution::point().characteristic_magnitude(1.0), 1.0);
        assert_relative_eq!(Distribution::gaussian(1.0).equivalent_width(), (2.0 * core::f64::consts::PI).sqrt());
    }

    proptest! {
        #[test]
        fn closure_identity(dopt in -1e6..1e6f64, dg in -1e5..1e5f64, de in -1e5..1e5f64) {
            let ls = build_default_system();
            let d = ls.class_detunings(&AtomClass { delta_opt: dopt, delta_g: dg, delta_e: de, weight: 1.0 });
            let loop_sum = d.detuning(2, 5) - d.detuning(3, 5) - d.detuning(2, 4) + d.detuning(3, 4);
            prop_assert!(loop_sum.abs() <= 1e-9 * (1.0 + dopt.abs()));
        }

        #[test]
        fn frequency_antisymmetry(i in 1usize..=6, j in 1usize..=6) {
            let ls = build_default_system();
            prop_assert_eq!(ls.transition_frequency(i, j).unwrap(), -ls.transition_frequency(j, i).unwrap());
        }
    }
}
