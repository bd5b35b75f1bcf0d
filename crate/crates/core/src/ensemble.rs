//! Ensemble sampling and reduction to macroscopic emitted fields.
//!
//! Work is split into units, one per (area factor, class) pair, and units
//! into fixed-size chunks. Each chunk sums its units in index order and
//! chunks are combined in chunk order, so the result does not depend on how
//! chunks are scheduled.
//!
//! Field normalization: fields are in units of the input pulse's peak
//! amplitude. A class ensemble with density p(Δ) = profile(Δ)/W radiates
//! E = −i·2·αL·W·d·Σ w·ρ_eg / Ω_ref on each optical pair. For a weak,
//! spectrally narrow input on a broad flat feature this is −(αL/2)·E_in,
//! the first-order Beer–Lambert response.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_class, ClassTraces, DensityMatrix, IntegratorSettings, RelaxationSpec};
use crate::error::{Error, Result};
use crate::level::{AtomClass, DetuningModel, Distribution, LevelSystem, Shape, Transition};
use crate::propagation::{echo_factor, Medium};
use crate::quadrature::{gauss_hermite, gauss_rule, quantile_grid, Rule};
use crate::sequence::SequenceTimeline;
use crate::TAU;

/// Units per reduction chunk.
pub const CHUNK: usize = 64;

/// How classes are drawn from the detuning model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    MonteCarlo { seed: u64 },
    Grid,
    GaussQuadrature,
}

/// Discrete set of multiplicative pulse-area factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSpread {
    pub factors: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for AreaSpread {
    fn default() -> Self {
        Self { factors: vec![1.0], weights: vec![1.0] }
    }
}

impl AreaSpread {
    /// Gauss–Hermite discretization of factors 1 + rel_sigma·x, x ~ N(0,1).
    pub fn gaussian(rel_sigma: f64, n: usize) -> Result<Self> {
        if rel_sigma == 0.0 {
            return Ok(Self::default());
        }
        let r = gauss_hermite(n);
        let s = Self { factors: r.nodes.iter().map(|x| 1.0 + rel_sigma * x).collect(), weights: r.weights };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.factors.len() != self.weights.len() {
            return Err(Error::InvalidEnsemble("area factors and weights must be non-empty and equal length".into()));
        }
        if self.factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidEnsemble("area factors must be > 0".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidEnsemble(format!("area-factor weights must be ≥ 0 and sum to 1 (sum {s})")));
        }
        Ok(())
    }
}

/// Ensemble configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub detuning: DetuningModel,
    /// Optical-axis nodes (grid, quadrature) or total samples (Monte Carlo).
    pub n_classes: usize,
    /// Nodes per active hyperfine axis (grid, quadrature).
    pub hyperfine_nodes: usize,
    pub sampling: Sampling,
    pub area_spread: AreaSpread,
    /// Initial level populations; defaults to the input ground level.
    pub initial_populations: Option<Vec<f64>>,
    /// Optical depth that scales the thin-sample emission.
    pub alpha_l: f64,
    /// When set, emission is propagated through this medium.
    pub medium: Option<Medium>,
    /// Run the step-halving and invariant checks on every n-th class
    /// (plus the first and the most detuned); 0 disables them.
    pub verify_every: usize,
    pub integrator: IntegratorSettings,
    /// Also run every unit with the input phase advanced by π and keep half
    /// the difference, which removes all even orders in the input field
    /// (the rephasing pulses' own free-induction decay among them).
    pub phase_cycle: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            detuning: DetuningModel {
                optical: Distribution::point(),
                ground: Distribution::point(),
                excited: Distribution::point(),
            },
            n_classes: 64,
            hyperfine_nodes: 8,
            sampling: Sampling::GaussQuadrature,
            area_spread: AreaSpread::default(),
            initial_populations: None,
            alpha_l: 1.0,
            medium: None,
            verify_every: 64,
            integrator: IntegratorSettings::default(),
            phase_cycle: false,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        self.detuning.validate()?;
        if self.n_classes == 0 {
            return Err(Error::InvalidEnsemble("n_classes must be ≥ 1".into()));
        }
        if self.hyperfine_nodes == 0 {
            return Err(Error::InvalidEnsemble("hyperfine_nodes must be ≥ 1".into()));
        }
        if !(self.alpha_l >= 0.0) {
            return Err(Error::InvalidEnsemble("alpha_l must be ≥ 0".into()));
        }
        if let Some(m) = &self.medium {
            m.validate()?;
        }
        self.area_spread.validate()
    }

    pub fn seed(&self) -> Option<u64> {
        match self.sampling {
            Sampling::MonteCarlo { seed } => Some(seed),
            _ => None,
        }
    }
}

fn axis_rule(d: &Distribution, n: usize, sampling: Sampling) -> Result<Rule> {
    match sampling {
        Sampling::Grid => Ok(quantile_grid(d, n)),
        Sampling::GaussQuadrature => gauss_rule(d, n).ok_or_else(|| {
            Error::UnsupportedSampling(format!("no Gauss rule for a {:?} distribution; use grid or monte_carlo", d.shape))
        }),
        Sampling::MonteCarlo { .. } => unreachable!(),
    }
}

fn draw(d: &Distribution, rng: &mut ChaCha8Rng) -> f64 {
    let w = d.width_hz;
    if w == 0.0 {
        return 0.0;
    }
    match d.shape {
        Shape::Gaussian => Normal::new(0.0, w).map(|n| n.sample(rng)).unwrap_or(0.0),
        Shape::Lorentzian => Cauchy::new(0.0, w).map(|c| c.sample(rng)).unwrap_or(0.0),
        Shape::Uniform => Uniform::new_inclusive(-w, w).sample(rng),
    }
}

/// Atom classes sampled from `spec`, weights summing to 1.
pub fn sample_classes(spec: &EnsembleSpec) -> Result<Vec<AtomClass>> {
    spec.validate()?;
    let dm = &spec.detuning;
    if let Sampling::MonteCarlo { seed } = spec.sampling {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 1.0 / spec.n_classes as f64;
        return Ok((0..spec.n_classes)
            .map(|_| {
                let delta_opt = draw(&dm.optical, &mut rng);
                let delta_g = draw(&dm.ground, &mut rng);
                let delta_e = draw(&dm.excited, &mut rng);
                AtomClass { delta_opt, delta_g, delta_e, weight: w }
            })
            .collect());
    }
    let optical = if dm.optical.is_point() {
        let n = spec.n_classes;
        Rule { nodes: vec![0.0; n], weights: vec![1.0 / n as f64; n] }
    } else {
        axis_rule(&dm.optical, spec.n_classes, spec.sampling)?
    };
    let ground = axis_rule(&dm.ground, spec.hyperfine_nodes, spec.sampling)?;
    let excited = axis_rule(&dm.excited, spec.hyperfine_nodes, spec.sampling)?;
    let mut classes = Vec::with_capacity(optical.len() * ground.len() * excited.len());
    for (&x, &wx) in optical.nodes.iter().zip(&optical.weights) {
        for (&g, &wg) in ground.nodes.iter().zip(&ground.weights) {
            for (&e, &we) in excited.nodes.iter().zip(&excited.weights) {
                classes.push(AtomClass { delta_opt: x, delta_g: g, delta_e: e, weight: wx * wg * we });
            }
        }
    }
    Ok(classes)
}

/// Fields recorded in one observation window, `[sample * n_pairs + pair]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowField {
    pub start: f64,
    pub rate: f64,
    pub n_samples: usize,
    /// Field radiated by the ensemble.
    pub emitted: Vec<Complex64>,
    /// Applied pulse fields at nominal area.
    pub drive: Vec<Complex64>,
}

impl WindowField {
    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples).map(|k| self.start + k as f64 / self.rate).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionMetadata {
    pub seed: Option<u64>,
    pub n_classes: usize,
    pub n_area_factors: usize,
    pub phase_cycled: bool,
    pub timeline_hash: u64,
    pub alpha_l: f64,
    /// Ω_ref used for normalization, rad/s.
    pub reference_rabi: f64,
    pub propagated: bool,
    /// Largest step-halving difference over verified classes.
    pub max_step_error: f64,
    pub verified_classes: usize,
}

/// Macroscopic fields per window and optical transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub transitions: Vec<Transition>,
    pub windows: Vec<WindowField>,
    pub metadata: EmissionMetadata,
}

impl EmissionRecord {
    pub fn pair_index(&self, t: Transition) -> Option<usize> {
        self.transitions.iter().position(|&p| p == t)
    }

    /// Emitted field on `t` in window `w`.
    pub fn emitted(&self, w: usize, t: Transition) -> Vec<Complex64> {
        self.column(w, t, false)
    }

    /// Drive plus emitted field on `t` in window `w`.
    pub fn total(&self, w: usize, t: Transition) -> Vec<Complex64> {
        self.column(w, t, true)
    }

    fn column(&self, w: usize, t: Transition, with_drive: bool) -> Vec<Complex64> {
        let np = self.transitions.len();
        let Some(p) = self.pair_index(t) else { return vec![Complex64::new(0.0, 0.0); self.windows[w].n_samples] };
        let win = &self.windows[w];
        (0..win.n_samples)
            .map(|k| win.emitted[k * np + p] + if with_drive { win.drive[k * np + p] } else { Complex64::new(0.0, 0.0) })
            .collect()
    }

    /// Time and magnitude of the largest emitted |E| on `t` in window `w`.
    pub fn peak(&self, w: usize, t: Transition) -> (f64, f64) {
        let f = self.emitted(w, t);
        let times = self.windows[w].times();
        f.iter().zip(times).map(|(e, t)| (t, e.norm())).fold((0.0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

/// Partial sums of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Partial {
    /// Σ w·d·Φ·ρ_eg per window, `[sample * n_pairs + pair]`.
    pub sums: Vec<Vec<Complex64>>,
    pub max_step_error: f64,
    pub verified: usize,
}

/// A prepared experiment: sampled classes and per-factor timelines.
pub struct Experiment<'a> {
    ls: &'a LevelSystem,
    relax: &'a RelaxationSpec,
    spec: &'a EnsembleSpec,
    timeline: &'a SequenceTimeline,
    /// Timelines per area factor and cycle step, with their weights.
    variants: Vec<(SequenceTimeline, f64)>,
    classes: Vec<AtomClass>,
    extreme: usize,
    initial: DensityMatrix,
    pairs: Vec<Transition>,
    dipoles: Vec<f64>,
    input_transition: Transition,
    reference_rabi: f64,
    width: f64,
}

impl<'a> Experiment<'a> {
    pub fn new(tl: &'a SequenceTimeline, ls: &'a LevelSystem, spec: &'a EnsembleSpec, r: &'a RelaxationSpec) -> Result<Self> {
        ls.validate()?;
        r.validate()?;
        let classes = sample_classes(spec)?;
        let n = ls.n_levels();
        let initial = match &spec.initial_populations {
            Some(p) => {
                let s: f64 = p.iter().sum();
                if p.len() != n || (s - 1.0).abs() > 1e-9 || p.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidEnsemble(format!("initial populations must be {n} values ≥ 0 summing to 1")));
                }
                DensityMatrix::from_populations(p)
            }
            None => DensityMatrix::pure(n, ls.double_lambda.input_ground),
        };
        let input = tl.input_index();
        let steps: &[(f64, f64)] = if spec.phase_cycle && input.is_some() { &[(0.0, 0.5), (1.0, -0.5)] } else { &[(0.0, 1.0)] };
        let mut variants = Vec::new();
        for (&f, &w) in spec.area_spread.factors.iter().zip(&spec.area_spread.weights) {
            for &(shift, sign) in steps {
                let mut v = tl.clone();
                for (i, p) in v.pulses.iter_mut().enumerate() {
                    if Some(i) == input {
                        p.phase_pi += shift;
                    } else {
                        p.area_pi *= f;
                    }
                }
                variants.push((v, w * sign));
            }
        }
        let extreme = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.delta_opt.abs() + c.delta_g.abs() + c.delta_e.abs()))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
            .0;
        let pairs = ls.optical_transitions();
        let dipoles = pairs.iter().map(|&t| ls.dipole_of(t)).collect();
        let (input_transition, reference_rabi) = match tl.pulses.first() {
            Some(p) => {
                let d = ls.dipole_of(p.transition);
                (p.transition, p.peak_rabi() / if d > 0.0 { d } else { 1.0 })
            }
            None => (ls.double_lambda.input(), 1.0),
        };
        // a zero-area input leaves the field unit undefined; fall back to 1
        let reference_rabi = if reference_rabi > 0.0 { reference_rabi } else { 1.0 };
        let input_transition = if input.is_some() { input_transition } else { ls.double_lambda.input() };
        let opt = spec.detuning.optical;
        let width = if !opt.is_point() {
            opt.equivalent_width()
        } else if ls.t2_opt_s.is_finite() && ls.t2_opt_s > 0.0 {
            0.5 / ls.t2_opt_s
        } else {
            1.0
        };
        Ok(Self {
            ls,
            relax: r,
            spec,
            timeline: tl,
            variants,
            classes,
            extreme,
            initial,
            pairs,
            dipoles,
            input_transition,
            reference_rabi,
            width,
        })
    }

    pub fn classes(&self) -> &[AtomClass] {
        &self.classes
    }

    pub fn n_units(&self) -> usize {
        self.classes.len() * self.variants.len()
    }

    pub fn chunks(&self) -> Vec<Range<usize>> {
        let n = self.n_units();
        (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK..((c + 1) * CHUNK).min(n)).collect()
    }

    fn verifies(&self, class: usize) -> bool {
        let every = self.spec.verify_every;
        every > 0 && (class % every == 0 || class == self.extreme)
    }

    /// Runs one class at one area factor.
    pub fn run_unit(&self, unit: usize) -> Result<ClassTraces> {
        let (f, c) = (unit / self.classes.len(), unit % self.classes.len());
        let settings = IntegratorSettings { verify: self.verifies(c), ..self.spec.integrator };
        run_class(&self.variants[f].0, &self.classes[c], self.ls, self.relax, &self.initial, &settings)
    }

    /// Weight of one unit including its class and area-factor weights.
    fn unit_weight(&self, unit: usize) -> f64 {
        let (f, c) = (unit / self.classes.len(), unit % self.classes.len());
        self.classes[c].weight * self.variants[f].1
    }

    /// Depth factor Φ per window and pair, or all ones in thin-sample mode.
    fn depth_factors(&self, class: &AtomClass, traces: &ClassTraces) -> Result<Vec<Vec<f64>>> {
        let np = self.pairs.len();
        let Some(m) = &self.spec.medium else {
            return Ok(vec![vec![1.0; np]; traces.windows.len()]);
        };
        let ti = self.input_transition;
        let s_in = self.initial.population(ti.lower) - self.initial.population(ti.upper);
        let a_in = m.field_exponent(class.delta_opt, s_in, self.ls.dipole_of(ti));
        traces
            .windows
            .iter()
            .map(|w| {
                (0..np)
                    .map(|p| {
                        if self.dipoles[p] == 0.0 {
                            return Ok(0.0);
                        }
                        let a_out = m.field_exponent(class.delta_opt, w.population_difference[p], self.dipoles[p]);
                        echo_factor(m, a_in, a_out)
                    })
                    .collect()
            })
            .collect()
    }

    /// Sums the units in `range` in index order.
    pub fn run_chunk(&self, range: Range<usize>) -> Result<Partial> {
        let np = self.pairs.len();
        let mut sums: Vec<Vec<Complex64>> =
            self.timeline.windows.iter().map(|w| vec![Complex64::new(0.0, 0.0); w.n_samples() * np]).collect();
        let mut max_step_error: f64 = 0.0;
        let mut verified = 0;
        for unit in range {
            let traces = self.run_unit(unit)?;
            let c = unit % self.classes.len();
            if self.verifies(c) {
                verified += 1;
            }
            max_step_error = max_step_error.max(traces.max_step_error);
            let phi = self.depth_factors(&self.classes[c], &traces)?;
            let w = self.unit_weight(unit);
            accumulate(&mut sums, &traces, w, &self.dipoles, &phi);
        }
        Ok(Partial { sums, max_step_error, verified })
    }

    /// Combines chunk partials in order and scales them to fields.
    pub fn finish(&self, partials: Vec<Partial>) -> Result<EmissionRecord> {
        let np = self.pairs.len();
        let mut total: Vec<Vec<Complex64>> =
            self.timeline.windows.iter().map(|w| vec![Complex64::new(0.0, 0.0); w.n_samples() * np]).collect();
        let mut max_step_error: f64 = 0.0;
        let mut verified = 0;
        for p in partials {
            for (t, s) in total.iter_mut().zip(p.sums) {
                for (a, b) in t.iter_mut().zip(s) {
                    *a += b;
                }
            }
            max_step_error = max_step_error.max(p.max_step_error);
            verified += p.verified;
        }
        let alpha_l = self.spec.medium.as_ref().map_or(self.spec.alpha_l, |m| m.alpha_l);
        let scale = Complex64::new(0.0, -2.0 * alpha_l * self.width / self.reference_rabi);
        let windows = self
            .timeline
            .windows
            .iter()
            .zip(total)
            .map(|(w, sum)| {
                let emitted: Vec<Complex64> = sum.into_iter().map(|v| scale * v).collect();
                let drive = drive_fields(self.timeline, self.ls, &self.pairs, w.start, w.rate, w.n_samples(), self.reference_rabi);
                WindowField { start: w.start, rate: w.rate, n_samples: w.n_samples(), emitted, drive }
            })
            .collect();
        Ok(EmissionRecord {
            transitions: self.pairs.clone(),
            windows,
            metadata: EmissionMetadata {
                seed: self.spec.seed(),
                n_classes: self.classes.len(),
                n_area_factors: self.spec.area_spread.factors.len(),
                phase_cycled: self.variants.len() > self.spec.area_spread.factors.len(),
                timeline_hash: self.timeline.fingerprint(),
                alpha_l,
                reference_rabi: self.reference_rabi,
                propagated: self.spec.medium.is_some(),
                max_step_error,
                verified_classes: verified,
            },
        })
    }
}

fn accumulate(sums: &mut [Vec<Complex64>], traces: &ClassTraces, weight: f64, dipoles: &[f64], phi: &[Vec<f64>]) {
    let np = dipoles.len();
    for ((sum, win), phi) in sums.iter_mut().zip(&traces.windows).zip(phi) {
        let coef: Vec<f64> = (0..np).map(|p| weight * dipoles[p] * phi[p]).collect();
        for (k, rho) in win.coherences.chunks_exact(np).enumerate() {
            for p in 0..np {
                sum[k * np + p] += coef[p] * rho[p];
            }
        }
    }
}

/// Ensemble field from already computed class traces, thin-sample form
/// with unit optical depth and width.
pub fn emit(classes: &[AtomClass], traces: &[ClassTraces], ls: &LevelSystem, reference_rabi: f64) -> Result<Vec<Vec<Complex64>>> {
    if classes.len() != traces.len() || traces.is_empty() {
        return Err(Error::Mismatch(format!("{} classes but {} traces", classes.len(), traces.len())));
    }
    let pairs = &traces[0].pairs;
    let dipoles: Vec<f64> = pairs.iter().map(|&t| ls.dipole_of(t)).collect();
    let mut sums: Vec<Vec<Complex64>> =
        traces[0].windows.iter().map(|w| vec![Complex64::new(0.0, 0.0); w.coherences.len()]).collect();
    let ones = vec![vec![1.0; pairs.len()]; sums.len()];
    for (c, t) in classes.iter().zip(traces) {
        if t.windows.len() != sums.len() || t.windows.iter().zip(&sums).any(|(w, s)| w.coherences.len() != s.len()) {
            return Err(Error::Mismatch("traces have different window layouts".into()));
        }
        accumulate(&mut sums, t, c.weight, &dipoles, &ones);
    }
    let scale = Complex64::new(0.0, -2.0 / reference_rabi);
    Ok(sums.into_iter().map(|s| s.into_iter().map(|v| scale * v).collect()).collect())
}

/// Applied pulse fields per pair, Ω/(d·Ω_ref)·e^{i(φ − 2πδ_c t)}.
fn drive_fields(
    tl: &SequenceTimeline,
    ls: &LevelSystem,
    pairs: &[Transition],
    start: f64,
    rate: f64,
    n: usize,
    reference_rabi: f64,
) -> Vec<Complex64> {
    let np = pairs.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n * np];
    for p in &tl.pulses {
        let Some(pi) = pairs.iter().position(|&t| t == p.transition) else { continue };
        let d = ls.dipole_of(p.transition);
        let d = if d > 0.0 { d } else { 1.0 };
        let (a, b) = p.support();
        for k in 0..n {
            let t = start + k as f64 / rate;
            if t < a || t > b {
                continue;
            }
            let amp = p.rabi(t) / (d * reference_rabi);
            out[k * np + pi] += Complex64::from_polar(amp, p.phase() - TAU * p.carrier_detuning * t);
        }
    }
    out
}

/// Sequential evaluation of all chunks.
pub fn run_experiment(tl: &SequenceTimeline, ls: &LevelSystem, spec: &EnsembleSpec, r: &RelaxationSpec) -> Result<EmissionRecord> {
    let exp = Experiment::new(tl, ls, spec, r)?;
    let partials = exp.chunks().into_iter().map(|c| exp.run_chunk(c)).collect::<Result<Vec<_>>>()?;
    exp.finish(partials)
}
