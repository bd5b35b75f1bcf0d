//! Run configuration: one JSON document, optionally patched by `--set`
//! overrides on dotted paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use echo4_core::detection::{DecayModel, HeterodyneConfig};
use echo4_core::ensemble::{EnsembleSpec, Sampling};
use echo4_core::holeburning::PrepareConfig;
use echo4_core::sequence::{parse_program, Program};
use echo4_core::LevelSystem;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::levels::LevelsFile;
use crate::spectrum::Taper;

/// Level system given by file name (relative to the config) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelsSource {
    File(String),
    Inline(LevelsFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub heterodyne: HeterodyneConfig,
    /// Write heterodyne traces and spectra per window.
    pub spectra: bool,
    pub taper: Taper,
    /// Zero-pad spectra to at least this many points.
    pub min_fft: usize,
    /// Echo gate half-width in units of the input envelope FWHM.
    pub gate_fwhm: f64,
    /// Echoes at or below this |E| are reported as absent.
    pub floor: f64,
    /// Fit echo amplitude against input-to-echo delay over the sweep.
    pub fit: Option<DecayModel>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            heterodyne: HeterodyneConfig::default(),
            spectra: true,
            taper: Taper::Hann,
            min_fft: 4096,
            gate_fwhm: 3.0,
            floor: 1e-12,
            fit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Omitted: the default six-level system.
    #[serde(default)]
    pub levels: Option<LevelsSource>,
    /// Sequence file relative to the config.
    #[serde(default)]
    pub sequence_file: Option<String>,
    /// Inline sequence program.
    #[serde(default)]
    pub sequence: Option<String>,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    /// Holeburning preparation; its medium replaces `ensemble.medium`.
    #[serde(default)]
    pub preparation: Option<PrepareConfig>,
    #[serde(default)]
    pub detection: DetectionConfig,
    /// Sweep axes: `let` parameters in seconds, or `alpha_l`.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_output")]
    pub output_dir: String,
    /// Seeds Monte Carlo sampling and detector noise.
    #[serde(default)]
    pub seed: u64,
}

fn default_output() -> String {
    "runs/out".into()
}

/// A config with its files resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Canonical JSON of `config` after overrides.
    pub canonical: String,
    pub hash: String,
    pub levels: LevelSystem,
    pub program: Program,
    pub sequence_text: String,
}

/// One sweep point: `let` overrides plus an optional depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub params: Vec<(String, f64)>,
    pub alpha_l: Option<f64>,
}

impl SweepPoint {
    pub fn label(&self) -> Vec<(String, f64)> {
        let mut v = self.params.clone();
        if let Some(a) = self.alpha_l {
            v.push(("alpha_l".into(), a));
        }
        v
    }
}

/// Sets `path` (dot separated) in `root` to `value`, creating objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!("`{}` is not an object", keys[..i].join("."))));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            obj.insert((*k).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry((*k).to_owned()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Parses `key=value`; the value is JSON when it parses as such, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.trim().to_owned(), value))
}

impl Loaded {
    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base, overrides)
    }

    pub fn from_str(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config JSON: {e}")))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut value, &k, v)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))?;
        Self::resolve(config, base)
    }

    pub fn resolve(config: RunConfig, base: &Path) -> Result<Self> {
        let levels = match &config.levels {
            None => LevelSystem::default(),
            Some(LevelsSource::Inline(f)) => {
                let ls = LevelSystem::from(f.clone());
                ls.validate().map_err(|e| CliError::from_core("levels", e))?;
                ls
            }
            Some(LevelsSource::File(p)) => crate::levels::load(&base.join(p))?,
        };
        let sequence_text = match (&config.sequence, &config.sequence_file) {
            (Some(s), None) => s.clone(),
            (None, Some(f)) => {
                let p = base.join(f);
                std::fs::read_to_string(&p).map_err(CliError::io(format!("reading {}", p.display())))?
            }
            _ => return Err(CliError::Config("give exactly one of `sequence` and `sequence_file`".into())),
        };
        let program = parse_program(&sequence_text).map_err(|e| CliError::from_core("sequence", e))?;
        if let Some(sys) = &program.system {
            if config.levels.is_none() {
                let ls = crate::levels::load(&base.join(sys))?;
                return Self::finish(config, ls, program, sequence_text);
            }
        }
        Self::finish(config, levels, program, sequence_text)
    }

    fn finish(config: RunConfig, levels: LevelSystem, program: Program, sequence_text: String) -> Result<Self> {
        for (k, v) in &config.sweep {
            if v.is_empty() {
                return Err(CliError::Config(format!("sweep axis `{k}` is empty")));
            }
            if k != "alpha_l" && !program.param_names().any(|n| n == k) {
                return Err(CliError::Config(format!("sweep axis `{k}` is not a `let` parameter of the sequence")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CliError::Config(format!("sweep axis `{k}` has non-finite values")));
            }
        }
        config.ensemble.validate().map_err(|e| CliError::from_core("ensemble", e))?;
        if let Some(p) = &config.preparation {
            p.validate().map_err(|e| CliError::from_core("preparation", e))?;
        }
        let d = &config.detection;
        if !(d.gate_fwhm > 0.0) || !(d.floor >= 0.0) {
            return Err(CliError::Config("detection gate must be > 0 and floor ≥ 0".into()));
        }
        let canonical = serde_json::to_string(&config).map_err(|e| CliError::Config(format!("config: {e}")))?;
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        Ok(Self { config, canonical, hash, levels, program, sequence_text })
    }

    /// Ensemble spec with the run seed applied to Monte Carlo sampling.
    pub fn ensemble(&self) -> EnsembleSpec {
        let mut e = self.config.ensemble.clone();
        if let Sampling::MonteCarlo { .. } = e.sampling {
            e.sampling = Sampling::MonteCarlo { seed: self.config.seed };
        }
        e
    }

    pub fn heterodyne(&self) -> HeterodyneConfig {
        HeterodyneConfig { seed: self.config.seed, ..self.config.detection.heterodyne.clone() }
    }

    /// Cartesian product of the sweep axes in key order, last key fastest.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut points = vec![SweepPoint { params: vec![], alpha_l: None }];
        for (k, values) in &self.config.sweep {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        if k == "alpha_l" {
                            q.alpha_l = Some(v);
                        } else {
                            q.params.push((k.clone(), v));
                        }
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&self.config.output_dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const SEQ: &str = "let ta = 10us\\npulse at=0us trans=w25 area=0.05pi env=gauss(fwhm=0.2us)\\npulse at=ta trans=w25 area=1pi env=gauss(fwhm=0.2us)\\nobserve from=19us to=21us rate=100MHz";

    fn load(extra: &str, overrides: &[&str]) -> Result<Loaded> {
        let text = format!("{{\"sequence\": \"{SEQ}\"{extra}}}");
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        Loaded::from_str(&text, Path::new("."), &o)
    }

    #[test]
    fn dotted_overrides() {
        let mut v = json!({"a": {"b": 1}});
        set_path(&mut v, "a.c.d", json!(2.5)).unwrap();
        set_path(&mut v, "a.b", json!("x")).unwrap();
        assert_eq!(v, json!({"a": {"b": "x", "c": {"d": 2.5}}}));
        assert!(set_path(&mut v, "a.b.z", json!(1)).is_err());
        assert_eq!(parse_override("seed=7").unwrap(), ("seed".into(), json!(7)));
        assert_eq!(parse_override("output_dir=runs/a").unwrap().1, json!("runs/a"));
    }

    #[test]
    fn sweep_expansion() {
        let l = load(", \"sweep\": {\"ta\": [5e-6, 6e-6], \"alpha_l\": [0.1, 0.2, 0.3]}", &[]).unwrap();
        let p = l.points();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0].alpha_l, Some(0.1));
        assert_eq!(p[0].params, vec![("ta".to_string(), 5e-6)]);
        assert_eq!(p[1].params, vec![("ta".to_string(), 6e-6)]);
    }

    #[test]
    fn config_errors() {
        assert_eq!(load(", \"sweep\": {\"ta\": []}", &[]).unwrap_err().exit_code(), 2);
        assert_eq!(load(", \"sweep\": {\"nope\": [1.0]}", &[]).unwrap_err().exit_code(), 2);
        assert_eq!(load(", \"bogus\": 1", &[]).unwrap_err().exit_code(), 2);
        assert_eq!(load("", &["ensemble.n_classes=0"]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = load(", \"ensemble\": {\"sampling\": {\"monte_carlo\": {\"seed\": 1}}}", &[]).unwrap();
        let b = load(", \"ensemble\": {\"sampling\": {\"monte_carlo\": {\"seed\": 1}}}", &["seed=9"]).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(b.ensemble().seed(), Some(9));
        assert_eq!(a.hash, load(", \"ensemble\": {\"sampling\": {\"monte_carlo\": {\"seed\": 1}}}", &[]).unwrap().hash);
    }
}
