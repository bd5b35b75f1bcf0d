//! Quadrature rules and quantile functions for sampling detuning
//! distributions.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::level::{Distribution, Shape};

/// Nodes and weights of a one-dimensional rule. Weights sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The single node at 0 with weight 1.
    pub fn point() -> Self {
        Self { nodes: alloc::vec![0.0], weights: alloc::vec![1.0] }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Hermite rule for the standard normal density (probabilists'
/// weight), `n` nodes, ascending.
pub fn gauss_hermite(n: usize) -> Rule {
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&alloc::vec![0.0; n], &off)
}

/// Gauss–Legendre rule on [-1, 1] with weights normalized to sum 1.
pub fn gauss_legendre(n: usize) -> Rule {
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&alloc::vec![0.0; n], &off)
}

/// Nodes and weights from the Jacobi matrix of a unit-mass measure.
fn golub_welsch(diag: &[f64], off: &[f64]) -> Rule {
    let (nodes, first) = crate::linalg::tridiagonal_eigen(diag, off);
    let mut weights: Vec<f64> = first.iter().map(|v| v * v).collect();
    normalize(&mut weights);
    Rule { nodes, weights }
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
}

/// Inverse CDF of the standard normal (Acklam's rational approximation
/// refined by one Halley step).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2,
        -3.066479806614716e1, 2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734,
        4.374664141464968, 2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let plow = 0.02425;
    let x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * core::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Quantile function of a detuning distribution.
pub fn quantile(d: &Distribution, p: f64) -> f64 {
    let w = d.width_hz;
    match d.shape {
        Shape::Gaussian => w * normal_quantile(p),
        Shape::Lorentzian => w * (core::f64::consts::PI * (p - 0.5)).tan(),
        Shape::Uniform => w * (2.0 * p - 1.0),
    }
}

/// Equal-weight midpoint-quantile grid with `n` nodes.
pub fn quantile_grid(d: &Distribution, n: usize) -> Rule {
    if d.is_point() {
        return Rule::point();
    }
    let nodes = (0..n).map(|k| quantile(d, (k as f64 + 0.5) / n as f64)).collect();
    Rule { nodes, weights: alloc::vec![1.0 / n as f64; n] }
}

/// Gaussian quadrature for a Gaussian or uniform distribution; `None` for
/// shapes without a finite-moment Gauss rule.
pub fn gauss_rule(d: &Distribution, n: usize) -> Option<Rule> {
    if d.is_point() {
        return Some(Rule::point());
    }
    let base = match d.shape {
        Shape::Gaussian => gauss_hermite(n),
        Shape::Uniform => gauss_legendre(n),
        Shape::Lorentzian => return None,
    };
    Some(Rule { nodes: base.nodes.iter().map(|x| x * d.width_hz).collect(), weights: base.weights })
}
