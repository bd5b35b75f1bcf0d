//! Coherence-transfer bookkeeping: follows the coherence created by the
//! input pulse through each rephasing pulse and predicts when and on which
//! transition the ensemble rephases.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SequenceTimeline;
use crate::error::{Error, Result};
use crate::level::{LevelSystem, Transition};

/// Predicted echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayPrediction {
    /// Time of exact rephasing of the optical detuning phase, s.
    pub echo_time: f64,
    pub echo_transition: Transition,
    /// Echo direction as a signed sum of pulse directions (unit-free).
    pub echo_k: [f64; 3],
    /// Signed multiplicity of each pulse's wavevector in `echo_k`.
    pub k_terms: Vec<(usize, f64)>,
    /// Number of reversals of the optical phase-accumulation rate.
    pub phase_conjugation_count: u32,
}

/// Tracks the coherence |ket⟩⟨bra| created by the input pulse.
///
/// The accumulated phase is kept as one time coefficient per level (the
/// element picks up exp(−i2π Σ c_l s_l) for level shifts s_l), so the
/// optical part is the sum of the excited-level coefficients.
pub fn predict_pathway(tl: &SequenceTimeline, ls: &LevelSystem) -> Result<PathwayPrediction> {
    let input = tl
        .pulses
        .first()
        .filter(|p| p.is_input())
        .ok_or_else(|| Error::NoPathway("the first pulse must be a weak (< π/2) input".into()))?;
    if tl.pulses.len() < 2 {
        return Err(Error::NoPathway("no rephasing pulse after the input".into()));
    }
    if let Some(i) = tl.pulses.iter().skip(1).position(|p| p.is_input()) {
        return Err(Error::NoPathway(format!("pulse {} is a second sub-π/2 input", i + 1)));
    }
    let n = ls.n_levels();
    let (mut ket, mut bra) = (input.transition.upper, input.transition.lower);
    let mut coeff = vec![0.0; n + 1];
    let mut k_terms: Vec<(usize, f64)> = vec![(0, 1.0)];
    let mut rates: Vec<i32> = Vec::new();
    let mut t = input.at;
    let optical_rate = |ket: usize, bra: usize| i32::from(ls.is_excited(ket)) - i32::from(ls.is_excited(bra));

    for (idx, p) in tl.pulses.iter().enumerate().skip(1) {
        let dt = p.at - t;
        coeff[ket] += dt;
        coeff[bra] -= dt;
        rates.push(optical_rate(ket, bra));
        t = p.at;
        let tr = p.transition;
        let mut kk = 0.0;
        if let Some(to) = tr.partner(ket) {
            kk += if ket == tr.lower { 1.0 } else { -1.0 };
            ket = to;
        }
        if let Some(to) = tr.partner(bra) {
            kk += if bra == tr.lower { -1.0 } else { 1.0 };
            bra = to;
        }
        if kk != 0.0 {
            k_terms.push((idx, kk));
        }
        if ket == bra {
            return Err(Error::NoPathway(format!("pulse {idx} turns the coherence into a population")));
        }
    }

    let sign = if ls.is_excited(ket) && ls.is_ground(bra) {
        1.0
    } else if ls.is_ground(ket) && ls.is_excited(bra) {
        -1.0
    } else {
        return Err(Error::NoPathway(format!("final coherence |{ket}⟩⟨{bra}| is not optical")));
    };
    let (e, g) = if sign > 0.0 { (ket, bra) } else { (bra, ket) };
    rates.push(optical_rate(e, g) * if sign > 0.0 { 1 } else { -1 });

    let optical_phase: f64 = (1..=n).filter(|&l| ls.is_excited(l)).map(|l| coeff[l]).sum();
    let echo_time = t - sign * optical_phase;
    if !(echo_time > t) {
        return Err(Error::NoPathway("optical phase does not rephase after the last pulse".into()));
    }

    let nonzero: Vec<i32> = rates.into_iter().filter(|&r| r != 0).collect();
    let phase_conjugation_count = nonzero.windows(2).filter(|w| w[0] != w[1]).count() as u32;

    let mut echo_k = [0.0; 3];
    for term in k_terms.iter_mut() {
        term.1 *= sign;
        let kv = tl.pulses[term.0].k;
        for (acc, c) in echo_k.iter_mut().zip(kv) {
            *acc += term.1 * c;
        }
    }

    Ok(PathwayPrediction { echo_time, echo_transition: Transition::new(g, e), echo_k, k_terms, phase_conjugation_count })
}
