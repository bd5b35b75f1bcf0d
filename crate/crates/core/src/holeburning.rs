//! Rate-equation model of spectral holeburning.
//!
//! Each grid point is an ion class, labelled by where its input transition
//! (ω25 by default) sits relative to the nominal input frequency. A pump at
//! optical offset f drives ground level g of the class at x through every
//! excited level e with x + s_ge ≈ f, where s_ge is the nominal offset of
//! transition g→e from the input transition. The excited state is eliminated:
//! a pumped ion returns to ground g' with probability β_g'e.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{LevelSystem, Transition};
use crate::linalg::expm;
use crate::propagation::{FeatureProfile, Medium};

/// Finest grid step accepted, Hz.
pub const MAX_GRID_STEP_HZ: f64 = 25e3;

/// Ground-state populations across a grid of ion classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationGrid {
    pub detuning_hz: Vec<f64>,
    pub n_ground: usize,
    pub n_excited: usize,
    /// `[point * n_ground + g]`, g 0-based.
    pub populations: Vec<f64>,
    /// Offset of transition g→e from the input transition, `[g * n_excited + e]`.
    pub offsets_hz: Vec<f64>,
    /// Relative pump strength d², same layout.
    pub strength: Vec<f64>,
    /// β for decay of e into g, same layout.
    pub branching: Vec<f64>,
    /// 0-based ground/excited index of the input transition.
    pub input: (usize, usize),
}

impl PopulationGrid {
    /// Uniform grid over ±`half_window_hz` with step ≤ `max_step_hz`, every
    /// point starting from `initial` (thermal 1/n_ground if `None`).
    pub fn from_system(ls: &LevelSystem, half_window_hz: f64, max_step_hz: f64, initial: Option<&[f64]>) -> Result<Self> {
        ls.validate()?;
        if !(half_window_hz > 0.0 && half_window_hz.is_finite()) {
            return Err(Error::Pump("grid window must be positive".into()));
        }
        if !(max_step_hz > 0.0 && max_step_hz <= MAX_GRID_STEP_HZ) {
            return Err(Error::Pump(alloc::format!("grid step must lie in (0, {MAX_GRID_STEP_HZ}] Hz")));
        }
        let (ng, ne) = (ls.n_ground(), ls.n_excited());
        let init: Vec<f64> = match initial {
            Some(p) => p.to_vec(),
            None => vec![1.0 / ng as f64; ng],
        };
        check_populations(&init, ng)?;
        let intervals = (2.0 * half_window_hz / max_step_hz).ceil() as usize;
        let detuning_hz = (0..=intervals)
            .map(|k| -half_window_hz + 2.0 * half_window_hz * k as f64 / intervals as f64)
            .collect::<Vec<_>>();
        let dl = ls.double_lambda;
        let f_input = ls.transition_frequency(dl.input_ground, dl.input_excited)?;
        let mut offsets_hz = Vec::with_capacity(ng * ne);
        let mut strength = Vec::with_capacity(ng * ne);
        let mut branching = Vec::with_capacity(ng * ne);
        for g in 1..=ng {
            for e in ng + 1..=ng + ne {
                offsets_hz.push(ls.transition_frequency(g, e)? - f_input);
                strength.push(ls.dipole_of(Transition::new(g, e)).powi(2));
                branching.push(ls.branching_of(g, e));
            }
        }
        let populations = detuning_hz.iter().flat_map(|_| init.iter().copied()).collect();
        Ok(Self {
            detuning_hz,
            n_ground: ng,
            n_excited: ne,
            populations,
            offsets_hz,
            strength,
            branching,
            input: (dl.input_ground - 1, dl.input_excited - ng - 1),
        })
    }

    pub fn len(&self) -> usize {
        self.detuning_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detuning_hz.is_empty()
    }

    /// Populations of one grid point.
    pub fn point(&self, k: usize) -> &[f64] {
        &self.populations[k * self.n_ground..(k + 1) * self.n_ground]
    }

    /// Population of ground level `g` (1-based) at every grid point.
    pub fn level(&self, g: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.point(k)[g - 1]).collect()
    }

    /// Optical offset of transition `t` for the class at grid point `k`.
    pub fn transition_offset(&self, k: usize, t: Transition) -> f64 {
        let (g, e) = (t.lower - 1, t.upper - self.n_ground - 1);
        self.detuning_hz[k] + self.offsets_hz[g * self.n_excited + e]
    }

    /// Largest |Σ n − 1| over the grid.
    pub fn conservation_error(&self) -> f64 {
        (0..self.len()).map(|k| (self.point(k).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Optical depth at each grid offset summed over every transition of every
    /// in-grid class, for a sample whose input-transition depth would be
    /// `full_alpha_l` with all ions in the input ground level.
    pub fn absorption_spectrum(&self, full_alpha_l: f64) -> Vec<f64> {
        let (ng, ne) = (self.n_ground, self.n_excited);
        self.detuning_hz
            .iter()
            .map(|&f| {
                let mut total = 0.0;
                for g in 0..ng {
                    for e in 0..ne {
                        let i = g * ne + e;
                        total += self.strength[i] * self.interpolate(g, f - self.offsets_hz[i]);
                    }
                }
                full_alpha_l * total
            })
            .collect()
    }

    /// Rows of (detuning, n_1..n_G, absorption) for export.
    pub fn export_rows(&self, full_alpha_l: f64) -> Vec<Vec<f64>> {
        let abs = self.absorption_spectrum(full_alpha_l);
        (0..self.len())
            .map(|k| {
                let mut row = Vec::with_capacity(self.n_ground + 2);
                row.push(self.detuning_hz[k]);
                row.extend_from_slice(self.point(k));
                row.push(abs[k]);
                row
            })
            .collect()
    }

    fn interpolate(&self, g: usize, x: f64) -> f64 {
        let d = &self.detuning_hz;
        let n = d.len();
        if n == 0 || x < d[0] || x > d[n - 1] {
            return 0.0;
        }
        let k = d.partition_point(|&v| v <= x).clamp(1, n - 1);
        let f = (x - d[k - 1]) / (d[k] - d[k - 1]);
        let (a, b) = (self.point(k - 1)[g], self.point(k)[g]);
        a + f * (b - a)
    }

    fn center_hz(&self, c: &PumpCenter) -> Result<f64> {
        match *c {
            PumpCenter::Hz(f) => Ok(f),
            PumpCenter::Transition(t) => {
                let ng = self.n_ground;
                if t.lower < 1 || t.lower > ng || t.upper <= ng || t.upper > ng + self.n_excited {
                    return Err(Error::Pump(alloc::format!("{} is not an optical transition", t.name())));
                }
                Ok(self.offsets_hz[(t.lower - 1) * self.n_excited + t.upper - ng - 1])
            }
        }
    }

    /// Rate generator for one point, `[to * ng + from]`.
    fn generator(&self, x: f64, center: f64, field: &PumpField) -> Vec<f64> {
        let (ng, ne) = (self.n_ground, self.n_excited);
        let mut m = vec![0.0; ng * ng];
        for g in 0..ng {
            for e in 0..ne {
                let i = g * ne + e;
                let r = field.rate * self.strength[i] * field.overlap(x + self.offsets_hz[i] - center);
                if r == 0.0 {
                    continue;
                }
                for g2 in 0..ng {
                    if g2 != g {
                        let flow = r * self.branching[g2 * ne + e];
                        m[g2 * ng + g] += flow;
                        m[g * ng + g] -= flow;
                    }
                }
            }
        }
        m
    }

    /// One propagator per grid point for `field`, `None` where it does nothing.
    fn propagators(&self, field: &PumpField) -> Result<Vec<Option<Vec<f64>>>> {
        field.validate()?;
        let c = self.center_hz(&field.center)?;
        let ng = self.n_ground;
        Ok(self
            .detuning_hz
            .iter()
            .map(|&x| {
                let mut m = self.generator(x, c, field);
                let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs())) * field.duration_s;
                if !(scale > 1e-18) {
                    return None;
                }
                m.iter_mut().for_each(|v| *v *= field.duration_s);
                Some(expm(&m, ng))
            })
            .collect())
    }

    fn apply_propagators(&mut self, props: &[Option<Vec<f64>>]) {
        let ng = self.n_ground;
        let mut tmp = vec![0.0; ng];
        for (k, p) in props.iter().enumerate() {
            let Some(p) = p else { continue };
            let n = &mut self.populations[k * ng..(k + 1) * ng];
            for (i, t) in tmp.iter_mut().enumerate() {
                *t = (0..ng).map(|j| p[i * ng + j] * n[j]).sum::<f64>().max(0.0);
            }
            n.copy_from_slice(&tmp);
        }
    }
}

fn check_populations(p: &[f64], ng: usize) -> Result<()> {
    if p.len() != ng || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Pump(alloc::format!("initial populations must be {ng} non-negative values summing to 1")));
    }
    Ok(())
}

/// Where a pump field is centred: a nominal transition or an offset from the
/// input transition in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpCenter {
    Transition(Transition),
    Hz(f64),
}

/// A swept pump field. Its time-averaged coverage is a flat top over
/// centre ± `sweep_half_width_hz`, convolved with a Gaussian of FWHM
/// `linewidth_hz` and normalized to 1 at the centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpField {
    pub center: PumpCenter,
    pub sweep_half_width_hz: f64,
    /// Peak pump rate, s⁻¹.
    pub rate: f64,
    pub duration_s: f64,
    pub linewidth_hz: f64,
}

impl PumpField {
    pub fn new(center: PumpCenter, sweep_half_width_hz: f64, rate: f64, duration_s: f64, linewidth_hz: f64) -> Self {
        Self { center, sweep_half_width_hz, rate, duration_s, linewidth_hz }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sweep half-width", self.sweep_half_width_hz),
            ("rate", self.rate),
            ("linewidth", self.linewidth_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Pump(alloc::format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Pump(alloc::format!("duration must be ≥ 0, got {}", self.duration_s)));
        }
        if let PumpCenter::Hz(f) = self.center {
            if !f.is_finite() {
                return Err(Error::Pump("centre must be finite".into()));
            }
        }
        Ok(())
    }

    /// Relative coverage at offset `df` from the centre, in [0, 1].
    pub fn overlap(&self, df: f64) -> f64 {
        let s = self.linewidth_hz / (2.0 * (2.0 * core::f64::consts::LN_2).sqrt()) * core::f64::consts::SQRT_2;
        let w = self.sweep_half_width_hz;
        let band = |x: f64| {
            let (u, v) = ((x + w) / s, (x - w) / s);
            if v > 0.0 {
                libm::erfc(v) - libm::erfc(u)
            } else if u < 0.0 {
                libm::erfc(-u) - libm::erfc(-v)
            } else {
                libm::erf(u) - libm::erf(v)
            }
        };
        (band(df) / band(0.0)).clamp(0.0, 1.0)
    }
}

/// Applies one pump field to every grid point with the exact exponential of
/// its rate generator.
pub fn apply_pump(grid: &mut PopulationGrid, field: &PumpField) -> Result<()> {
    let props = grid.propagators(field)?;
    grid.apply_propagators(&props);
    Ok(())
}

/// Applies `fields` in turn, `cycles` times over. Each field's own duration
/// is the time it is on per cycle.
pub fn apply_cycles(grid: &mut PopulationGrid, fields: &[PumpField], cycles: usize) -> Result<()> {
    let props = fields.iter().map(|f| grid.propagators(f)).collect::<Result<Vec<_>>>()?;
    for _ in 0..cycles {
        for p in &props {
            grid.apply_propagators(p);
        }
    }
    Ok(())
}

/// Two-stage preparation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub half_window_hz: f64,
    pub grid_step_hz: f64,
    /// Peak pump rate of every field, s⁻¹.
    pub rate: f64,
    pub linewidth_hz: f64,
    /// Half-width of the four isolation sweeps.
    pub isolation_sweep_hz: f64,
    pub isolation_duration_s: f64,
    pub isolation_cycles: usize,
    pub burn_duration_s: f64,
    pub burn_cycles: usize,
    /// Requested FWHM of the |2⟩ feature.
    pub feature_width_hz: f64,
    /// Requested peak intensity optical depth; ln 2 is 50% transmission.
    pub target_alpha_l: f64,
    /// Input-transition depth if every class were in the input ground level.
    pub full_alpha_l: f64,
    pub initial_populations: Option<Vec<f64>>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            half_window_hz: 20e6,
            grid_step_hz: MAX_GRID_STEP_HZ,
            rate: 1e4,
            linewidth_hz: 50e3,
            isolation_sweep_hz: 1e6,
            isolation_duration_s: 20e-3,
            isolation_cycles: 20,
            burn_duration_s: 20e-3,
            burn_cycles: 20,
            feature_width_hz: 200e3,
            target_alpha_l: core::f64::consts::LN_2,
            full_alpha_l: 3.0,
            initial_populations: None,
        }
    }
}

impl PrepareConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rate", self.rate),
            ("linewidth", self.linewidth_hz),
            ("isolation sweep", self.isolation_sweep_hz),
            ("feature width", self.feature_width_hz),
            ("target alphaL", self.target_alpha_l),
            ("full alphaL", self.full_alpha_l),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Pump(alloc::format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("isolation duration", self.isolation_duration_s), ("burn duration", self.burn_duration_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Pump(alloc::format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if self.isolation_cycles == 0 || self.burn_cycles == 0 {
            return Err(Error::Pump("cycle counts must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Ground level outside the double-Λ, used for the repump.
    fn spare_ground(ls: &LevelSystem) -> Result<usize> {
        let dl = ls.double_lambda;
        let spare: Vec<usize> = (1..=ls.n_ground()).filter(|&g| g != dl.input_ground && g != dl.echo_ground).collect();
        match spare.as_slice() {
            [g] => Ok(*g),
            _ => Err(Error::Pump("preparation needs exactly one ground level outside the double-lambda".into())),
        }
    }

    fn field(&self, t: Transition, half_width: f64, duration: f64) -> PumpField {
        PumpField::new(PumpCenter::Transition(t), half_width, self.rate, duration, self.linewidth_hz)
    }

    /// Isolation stage: sweeps on the four double-Λ transitions plus the
    /// repump on spare→input-excited, iterated.
    pub fn isolation_fields(&self, ls: &LevelSystem, repump_half_width: f64) -> Result<Vec<PumpField>> {
        let dl = ls.double_lambda;
        let dt = self.isolation_duration_s / (5 * self.isolation_cycles) as f64;
        let w = self.isolation_sweep_hz;
        Ok(vec![
            self.field(dl.input(), w, dt),
            self.field(Transition::new(dl.echo_ground, dl.input_excited), w, dt),
            self.field(Transition::new(dl.input_ground, dl.echo_excited), w, dt),
            self.field(dl.echo(), w, dt),
            self.field(Transition::new(Self::spare_ground(ls)?, dl.input_excited), repump_half_width, dt),
        ])
    }

    /// Burn-back stage: the narrow repump that refills the input ground
    /// level, then the sweeps emptying the echo ground level.
    pub fn burn_fields(&self, ls: &LevelSystem, repump_half_width: f64) -> Result<Vec<PumpField>> {
        let dl = ls.double_lambda;
        let dt = self.burn_duration_s / (3 * self.burn_cycles) as f64;
        let w = self.isolation_sweep_hz;
        Ok(vec![
            self.field(Transition::new(Self::spare_ground(ls)?, dl.input_excited), repump_half_width, dt),
            self.field(Transition::new(dl.echo_ground, dl.input_excited), w, dt),
            self.field(dl.echo(), w, dt),
        ])
    }

    pub fn initial_grid(&self, ls: &LevelSystem) -> Result<PopulationGrid> {
        PopulationGrid::from_system(ls, self.half_window_hz, self.grid_step_hz, self.initial_populations.as_deref())
    }

    /// Runs both stages with the given repump half-width.
    pub fn run(&self, ls: &LevelSystem, repump_half_width: f64) -> Result<PopulationGrid> {
        self.validate()?;
        let mut grid = self.initial_grid(ls)?;
        apply_cycles(&mut grid, &self.isolation_fields(ls, repump_half_width)?, self.isolation_cycles)?;
        apply_cycles(&mut grid, &self.burn_fields(ls, repump_half_width)?, self.burn_cycles)?;
        Ok(grid)
    }
}

/// Result of a preparation run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: PopulationGrid,
    pub medium: Medium,
    pub repump_half_width_hz: f64,
    pub feature_fwhm_hz: f64,
    pub max_alpha_l: f64,
}

/// FWHM of a sampled profile around its maximum, linear interpolation at the
/// half-maximum crossings. Zero for a flat or empty profile.
pub fn fwhm(x: &[f64], y: &[f64]) -> f64 {
    let Some((k, &peak)) = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else { return 0.0 };
    if !(peak > 0.0) {
        return 0.0;
    }
    let half = 0.5 * peak;
    let mut lo = k;
    while lo > 0 && y[lo - 1] >= half {
        lo -= 1;
    }
    let mut hi = k;
    while hi + 1 < y.len() && y[hi + 1] >= half {
        hi += 1;
    }
    let cross = |i: usize, j: usize| x[i] + (half - y[i]) / (y[j] - y[i]) * (x[j] - x[i]);
    let left = if lo > 0 { cross(lo - 1, lo) } else { x[0] };
    let right = if hi + 1 < y.len() { cross(hi, hi + 1) } else { x[y.len() - 1] };
    right - left
}

/// Runs the schedule, choosing the repump half-width by bisection so the
/// input-ground feature has the requested FWHM, and returns the grid with a
/// [`Medium`] scaled to the requested optical depth.
pub fn prepare_feature(ls: &LevelSystem, cfg: &PrepareConfig) -> Result<Prepared> {
    cfg.validate()?;
    let g_in = ls.double_lambda.input_ground;
    let target = cfg.feature_width_hz;
    if cfg.isolation_duration_s == 0.0 && cfg.burn_duration_s == 0.0 {
        let grid = cfg.initial_grid(ls)?;
        return finish_feature(cfg, grid, g_in, 0.5 * target);
    }
    let width_of = |w: f64| -> Result<(PopulationGrid, f64)> {
        let grid = cfg.run(ls, w)?;
        let n = grid.level(g_in);
        let fw = fwhm(&grid.detuning_hz, &n);
        Ok((grid, fw))
    };
    let (mut lo, mut hi) = (1e-3 * target, target);
    let (_, fw_lo) = width_of(lo)?;
    if fw_lo > target {
        return Err(Error::Pump(alloc::format!(
            "feature width {target} Hz below the narrowest achievable {fw_lo:.0} Hz at this linewidth"
        )));
    }
    let mut best = width_of(hi)?;
    while best.1 < target {
        lo = hi;
        hi *= 2.0;
        if hi > cfg.isolation_sweep_hz {
            return Err(Error::Pump(alloc::format!("feature width {target} Hz exceeds the isolation sweep")));
        }
        best = width_of(hi)?;
    }
    let mut w = hi;
    for _ in 0..40 {
        if ((best.1 - target) / target).abs() < 1e-3 {
            break;
        }
        w = 0.5 * (lo + hi);
        best = width_of(w)?;
        if best.1 < target {
            lo = w;
        } else {
            hi = w;
        }
    }
    finish_feature(cfg, best.0, g_in, w)
}

fn finish_feature(cfg: &PrepareConfig, grid: PopulationGrid, g_in: usize, w: f64) -> Result<Prepared> {
    let n = grid.level(g_in);
    let fw = fwhm(&grid.detuning_hz, &n);
    let peak = n.iter().copied().fold(0.0, f64::max);
    let max_alpha_l = cfg.full_alpha_l * peak;
    if cfg.target_alpha_l > max_alpha_l {
        return Err(Error::DepthUnreachable { requested: cfg.target_alpha_l, max_achievable: max_alpha_l });
    }
    let profile = FeatureProfile::Tabulated { detuning_hz: grid.detuning_hz.clone(), value: n.iter().map(|v| v / peak).collect() };
    Ok(Prepared { grid, medium: Medium::new(cfg.target_alpha_l, profile), repump_half_width_hz: w, feature_fwhm_hz: fw, max_alpha_l })
}

/// Largest input-ground population among classes inside ±`window_hz` that
/// lie outside the target subgroup. A class belongs to the target subgroup
/// when the repump reaches its spare ground level with coverage ≥ `min_overlap`.
pub fn off_target_population(grid: &PopulationGrid, repump: &PumpField, window_hz: f64, input_ground: usize, min_overlap: f64) -> Result<f64> {
    let c = grid.center_hz(&repump.center)?;
    let t = match repump.center {
        PumpCenter::Transition(t) => t,
        PumpCenter::Hz(_) => return Err(Error::Pump("repump must be centred on a transition".into())),
    };
    Ok((0..grid.len())
        .filter(|&k| grid.detuning_hz[k].abs() <= window_hz)
        .filter(|&k| repump.overlap(grid.transition_offset(k, t) - c) < min_overlap)
        .map(|k| grid.point(k)[input_ground - 1])
        .fold(0.0, f64::max))
}
