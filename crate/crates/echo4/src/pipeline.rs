//! The work behind each subcommand.

use std::path::Path;

use echo4_core::detection::{self, extract_echo, heterodyne, DecayFit, DecayModel, EchoAmplitude, Geometry, PhaseMatchResult};
use echo4_core::dynamics::RelaxationSpec;
use echo4_core::ensemble::{EmissionMetadata, EmissionRecord};
use echo4_core::holeburning::{off_target_population, prepare_feature, Prepared};
use echo4_core::sequence::{predict_pathway, PathwayPrediction, SequenceTimeline};
use echo4_core::{Error, LevelSystem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Loaded, SweepPoint};
use crate::error::{CliError, Result};
use crate::output::{emission_csv, num, spectrum_csv, RunDir};
use crate::runner::run_parallel;
use crate::spectrum::amplitude_spectrum;

/// Summary of one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct PointSummary {
    pub params: Vec<(String, f64)>,
    pub predicted_echo_time_s: Option<f64>,
    pub echo_transition: Option<String>,
    /// Input-to-echo delay, s.
    pub delay_s: Option<f64>,
    /// |E| at the echo peak in units of the input peak field; `None` when
    /// no echo rose above the floor.
    pub echo_amplitude: Option<f64>,
    pub echo_phase_rad: Option<f64>,
    pub echo_time_s: Option<f64>,
    pub metadata: EmissionMetadata,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_sha256: &'a str,
    seed: u64,
    conventions: &'static str,
    config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    preparation: Option<PreparationSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    points: Vec<PointSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<DecayFit>,
}

const CONVENTIONS: &str = "alpha_l is the intensity optical depth (transmission e^-alphaL); field exponents carry alphaL/2. \
Fields are complex envelopes in units of the input pulse's peak field. Times in s, frequencies in Hz.";

#[derive(Debug, Clone, Serialize)]
pub struct PreparationSummary {
    pub achieved_alpha_l: f64,
    pub max_alpha_l: f64,
    pub feature_fwhm_hz: f64,
    pub repump_half_width_hz: f64,
    pub off_target_n2: f64,
    pub max_n3_in_window: f64,
    pub conservation_error: f64,
}

pub fn run_preparation(l: &Loaded) -> Result<Option<(Prepared, PreparationSummary)>> {
    let Some(cfg) = &l.config.preparation else { return Ok(None) };
    let ls = &l.levels;
    let p = prepare_feature(ls, cfg).map_err(|e| CliError::from_core("preparation", e))?;
    let repump = cfg
        .burn_fields(ls, p.repump_half_width_hz)
        .map_err(|e| CliError::from_core("preparation", e))?
        .remove(0);
    let g_in = ls.double_lambda.input_ground;
    let g_echo = ls.double_lambda.echo_ground;
    let window = cfg.isolation_sweep_hz;
    let off = off_target_population(&p.grid, &repump, window, g_in, 1e-6).map_err(|e| CliError::from_core("preparation", e))?;
    let n3 = (0..p.grid.len())
        .filter(|&k| p.grid.detuning_hz[k].abs() <= window)
        .map(|k| p.grid.point(k)[g_echo - 1])
        .fold(0.0, f64::max);
    let s = PreparationSummary {
        achieved_alpha_l: p.medium.alpha_l,
        max_alpha_l: p.max_alpha_l,
        feature_fwhm_hz: p.feature_fwhm_hz,
        repump_half_width_hz: p.repump_half_width_hz,
        off_target_n2: off,
        max_n3_in_window: n3,
        conservation_error: p.grid.conservation_error(),
    };
    Ok(Some((p, s)))
}

fn write_preparation(dir: &mut RunDir, p: &Prepared, full_alpha_l: f64) -> Result<()> {
    let g = &p.grid;
    let mut header = vec!["detuning_hz".to_string()];
    header.extend((1..=g.n_ground).map(|i| format!("n{i}")));
    header.push("absorption".into());
    let rows = g.export_rows(full_alpha_l).into_iter().map(|r| r.into_iter().map(num).collect());
    dir.write_csv("grid.csv", &header, rows)?;
    if let echo4_core::propagation::FeatureProfile::Tabulated { detuning_hz, value } = &p.medium.profile {
        let rows = detuning_hz.iter().zip(value).map(|(x, v)| vec![num(*x), num(*v)]);
        dir.write_csv("feature.csv", &["detuning_hz".into(), "profile".into()], rows)?;
    }
    dir.write_json("medium.json", &p.medium)
}

/// Everything computed for one sweep point.
pub struct PointRun {
    pub point: SweepPoint,
    pub timeline: SequenceTimeline,
    pub prediction: Option<PathwayPrediction>,
    pub record: EmissionRecord,
    pub echo: Option<EchoAmplitude>,
}

pub fn run_point(l: &Loaded, point: &SweepPoint, prepared: Option<&Prepared>) -> Result<PointRun> {
    let ls = &l.levels;
    let tl = l.program.resolve(ls, &point.params).map_err(|e| CliError::from_core("sequence", e))?;
    let mut spec = l.ensemble();
    if let Some(p) = prepared {
        spec.medium = Some(p.medium.clone());
    }
    if let Some(a) = point.alpha_l {
        spec.alpha_l = a;
        if let Some(m) = spec.medium.as_mut() {
            m.alpha_l = a;
        }
    }
    let r = RelaxationSpec::from_system(ls);
    let record = run_parallel(&tl, ls, &spec, &r).map_err(|e| CliError::from_core("ensemble", e))?;
    let prediction = match predict_pathway(&tl, ls) {
        Ok(p) => Some(p),
        Err(Error::NoPathway(_)) => None,
        Err(e) => return Err(CliError::from_core("pathway", e)),
    };
    let echo = match &prediction {
        Some(pred) => {
            let fwhm = tl.input_index().map_or(0.0, |i| tl.pulses[i].envelope.fwhm());
            let gate = l.config.detection.gate_fwhm * fwhm.max(1.0 / tl.windows.first().map_or(1.0, |w| w.rate));
            match extract_echo(&record, pred, gate, l.config.detection.floor) {
                Ok(e) => Some(e),
                Err(Error::NoEcho { .. }) => None,
                Err(e) => return Err(CliError::from_core("detection", e)),
            }
        }
        None => None,
    };
    Ok(PointRun { point: point.clone(), timeline: tl, prediction, record, echo })
}

fn summarize(run: &PointRun) -> PointSummary {
    let t_in = run.timeline.input_index().map(|i| run.timeline.pulses[i].at);
    PointSummary {
        params: run.point.label(),
        predicted_echo_time_s: run.prediction.as_ref().map(|p| p.echo_time),
        echo_transition: run.prediction.as_ref().map(|p| p.echo_transition.name()),
        delay_s: run.prediction.as_ref().zip(t_in).map(|(p, t)| p.echo_time - t),
        echo_amplitude: run.echo.map(|e| e.magnitude()),
        echo_phase_rad: run.echo.map(|e| e.value.arg()),
        echo_time_s: run.echo.map(|e| e.time),
        metadata: run.record.metadata.clone(),
    }
}

fn write_point(dir: &mut RunDir, l: &Loaded, i: usize, run: &PointRun) -> Result<()> {
    for w in 0..run.record.windows.len() {
        emission_csv(dir, &format!("point_{i:03}/emission_w{w}.csv"), &run.record, w)?;
        if l.config.detection.spectra {
            let tr = heterodyne(&run.record, w, &l.levels, &l.heterodyne()).map_err(|e| CliError::from_core("heterodyne", e))?;
            let win = &run.timeline.windows[w];
            let s = amplitude_spectrum(&tr, win.start, win.end, l.config.detection.taper, l.config.detection.min_fft)?;
            spectrum_csv(dir, &format!("point_{i:03}/spectrum_w{w}.csv"), &s)?;
        }
    }
    Ok(())
}

pub struct SimulateOutcome {
    pub dir: std::path::PathBuf,
    pub points: Vec<PointSummary>,
    pub fit: Option<DecayFit>,
}

pub fn simulate(l: &Loaded, out: &Path) -> Result<SimulateOutcome> {
    let prepared = run_preparation(l)?;
    let points = l.points();
    let runs: Vec<PointRun> =
        points.par_iter().map(|p| run_point(l, p, prepared.as_ref().map(|x| &x.0))).collect::<Result<Vec<_>>>()?;
    let mut dir = RunDir::create(out)?;
    if let (Some((p, _)), Some(cfg)) = (&prepared, &l.config.preparation) {
        write_preparation(&mut dir, p, cfg.full_alpha_l)?;
    }
    for (i, run) in runs.iter().enumerate() {
        write_point(&mut dir, l, i, run)?;
    }
    let summaries: Vec<PointSummary> = runs.iter().map(summarize).collect();
    let axes: Vec<String> = points.first().map(|p| p.label().into_iter().map(|(k, _)| k).collect()).unwrap_or_default();
    let mut header = axes.clone();
    header.extend(
        ["point", "delay_s", "echo_time_s", "echo_amplitude", "echo_phase_rad", "echo_transition"].map(String::from),
    );
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let rows = summaries.iter().enumerate().map(|(i, s)| {
        let mut r: Vec<String> = s.params.iter().map(|(_, v)| num(*v)).collect();
        r.push(i.to_string());
        r.push(opt(s.delay_s));
        r.push(opt(s.echo_time_s));
        r.push(opt(s.echo_amplitude));
        r.push(opt(s.echo_phase_rad));
        r.push(s.echo_transition.clone().unwrap_or_default());
        r
    });
    dir.write_csv("sweep.csv", &header, rows)?;
    let fit = match l.config.detection.fit {
        Some(model) => {
            let pts: Vec<(f64, f64)> =
                summaries.iter().filter_map(|s| Some((s.delay_s?, s.echo_amplitude?))).collect();
            let f = detection::fit_decay(&pts, model).map_err(|e| CliError::from_core("fit", e))?;
            dir.write_json("fit.json", &f)?;
            Some(f)
        }
        None => None,
    };
    let manifest = Manifest {
        tool: "echo4",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        config_sha256: &l.hash,
        seed: l.config.seed,
        conventions: CONVENTIONS,
        config: serde_json::from_str(&l.canonical).expect("canonical config is JSON"),
        preparation: prepared.map(|p| p.1),
        points: summaries.clone(),
        fit: fit.clone(),
    };
    let dir = dir.finish(manifest)?;
    Ok(SimulateOutcome { dir, points: summaries, fit })
}

pub fn prepare(l: &Loaded, out: &Path) -> Result<PreparationSummary> {
    let Some((p, summary)) = run_preparation(l)? else {
        return Err(CliError::Config("config has no `preparation` section".into()));
    };
    let mut dir = RunDir::create(out)?;
    write_preparation(&mut dir, &p, l.config.preparation.as_ref().map_or(1.0, |c| c.full_alpha_l))?;
    let manifest = Manifest {
        tool: "echo4",
        version: env!("CARGO_PKG_VERSION"),
        command: "prepare",
        config_sha256: &l.hash,
        seed: l.config.seed,
        conventions: CONVENTIONS,
        config: serde_json::from_str(&l.canonical).expect("canonical config is JSON"),
        preparation: Some(summary.clone()),
        points: vec![],
        fit: None,
    };
    dir.finish(manifest)?;
    Ok(summary)
}

/// Fit of one model plus the residuals of every model on the same data.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub fit: DecayFit,
    pub residuals: Vec<(DecayModel, Option<f64>)>,
    /// Set when another model fits more than 10× better.
    pub misfit: bool,
}

pub const ALL_MODELS: [DecayModel; 4] =
    [DecayModel::Exponential, DecayModel::Gaussian, DecayModel::LorentzianFt, DecayModel::VoigtFt];

pub fn fit_points(points: &[(f64, f64)], model: DecayModel) -> Result<FitReport> {
    let fit = detection::fit_decay(points, model).map_err(|e| CliError::from_core("fit", e))?;
    let residuals: Vec<(DecayModel, Option<f64>)> =
        ALL_MODELS.iter().map(|&m| (m, detection::fit_decay(points, m).ok().map(|f| f.residual_norm))).collect();
    let best = residuals.iter().filter_map(|r| r.1).fold(f64::INFINITY, f64::min);
    let scale = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let misfit = fit.residual_norm > 10.0 * best.max(1e-12 * scale);
    Ok(FitReport { fit, residuals, misfit })
}

/// Reads (x, y) from a CSV with a header. Columns are picked by name, or the
/// first two columns when no names are given.
pub fn read_points(path: &Path, x: Option<&str>, y: Option<&str>) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    let col = |name: Option<&str>, default: usize| -> Result<usize> {
        match name {
            Some(n) => header.iter().position(|h| h == n).ok_or_else(|| CliError::Config(format!("no column `{n}`"))),
            None if header.len() > default => Ok(default),
            None => Err(CliError::Config("need at least two columns".into())),
        }
    };
    let (ix, iy) = (col(x, 0)?, col(y, 1)?);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| CliError::Config(format!("row {}: `{s}` is not a number", line + 2)))
        };
        if let (Some(a), Some(b)) = (parse(ix)?, parse(iy)?) {
            out.push((a, b));
        }
    }
    Ok(out)
}

/// Phase-matching request: geometry, echo wavelength and sample length.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseMatchRequest {
    pub geometry: Geometry,
    pub echo_wavelength_m: f64,
    pub length_m: f64,
}

pub fn phasematch(req: &PhaseMatchRequest) -> Result<PhaseMatchResult> {
    detection::phase_match(&req.geometry, req.echo_wavelength_m, req.length_m).map_err(|e| CliError::from_core("phasematch", e))
}

/// Resolves every sweep point and predicts its pathway without simulating.
pub fn validate(l: &Loaded) -> Result<Vec<String>> {
    let ls: &LevelSystem = &l.levels;
    let mut notes = Vec::new();
    for p in l.points() {
        let tl = l.program.resolve(ls, &p.params).map_err(|e| CliError::from_core("sequence", e))?;
        match predict_pathway(&tl, ls) {
            Ok(pred) => notes.push(format!(
                "{:?}: echo on {} at {:.6e} s",
                p.label(),
                pred.echo_transition.name(),
                pred.echo_time
            )),
            Err(Error::NoPathway(m)) => notes.push(format!("{:?}: no rephasing pathway ({m})", p.label())),
            Err(e) => return Err(CliError::from_core("pathway", e)),
        }
    }
    Ok(notes)
}
