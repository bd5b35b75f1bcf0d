//! `levels.json`: the level system with `null` for disabled (infinite) times.

use std::path::Path;

use echo4_core::level::DoubleLambda;
use echo4_core::LevelSystem;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifold {
    /// Successive level splittings, Hz.
    pub splittings_hz: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lifetimes {
    pub t1_opt_s: Option<f64>,
    pub t2_opt_s: Option<f64>,
    pub t1_spin_s: Option<f64>,
    pub t2_spin_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelsFile {
    pub ground: Manifold,
    pub excited: Manifold,
    /// `[ground][excited]` relative amplitudes.
    pub dipole: Vec<Vec<f64>>,
    /// `[ground][excited]` decay probabilities.
    pub branching: Vec<Vec<f64>>,
    pub lifetimes: Lifetimes,
    #[serde(default)]
    pub double_lambda: DoubleLambda,
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl From<&LevelSystem> for LevelsFile {
    fn from(ls: &LevelSystem) -> Self {
        Self {
            ground: Manifold { splittings_hz: ls.ground_splittings_hz.clone() },
            excited: Manifold { splittings_hz: ls.excited_splittings_hz.clone() },
            dipole: ls.dipole.clone(),
            branching: ls.branching.clone(),
            lifetimes: Lifetimes {
                t1_opt_s: finite_or_null(ls.t1_opt_s),
                t2_opt_s: finite_or_null(ls.t2_opt_s),
                t1_spin_s: finite_or_null(ls.t1_spin_s),
                t2_spin_s: finite_or_null(ls.t2_spin_s),
            },
            double_lambda: ls.double_lambda,
        }
    }
}

impl From<LevelsFile> for LevelSystem {
    fn from(f: LevelsFile) -> Self {
        let inf = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
        LevelSystem {
            ground_splittings_hz: f.ground.splittings_hz,
            excited_splittings_hz: f.excited.splittings_hz,
            dipole: f.dipole,
            branching: f.branching,
            t1_opt_s: inf(f.lifetimes.t1_opt_s),
            t2_opt_s: inf(f.lifetimes.t2_opt_s),
            t1_spin_s: inf(f.lifetimes.t1_spin_s),
            t2_spin_s: inf(f.lifetimes.t2_spin_s),
            double_lambda: f.double_lambda,
        }
    }
}

pub fn from_json(text: &str) -> Result<LevelSystem> {
    let f: LevelsFile = serde_json::from_str(text).map_err(|e| CliError::Config(format!("levels: {e}")))?;
    let ls = LevelSystem::from(f);
    ls.validate().map_err(|e| CliError::from_core("levels", e))?;
    Ok(ls)
}

pub fn to_json(ls: &LevelSystem) -> String {
    serde_json::to_string_pretty(&LevelsFile::from(ls)).expect("level system serializes")
}

pub fn load(path: &Path) -> Result<LevelSystem> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    from_json(&text)
}
