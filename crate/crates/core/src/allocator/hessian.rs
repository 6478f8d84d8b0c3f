//! Numerical convexity check of the square-root objective term.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{second_term, second_term_hessian, ProblemConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSample {
    pub point: Vec<f64>,
    /// Finite-difference Hessian, row-major.
    pub numeric: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub min_eigenvalue: f64,
    pub closed_form_min_eigenvalue: f64,
    /// Largest entrywise `|numeric − closed| / max(|closed|, 1e-12)`.
    pub max_relative_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub samples: Vec<HessianSample>,
    /// `(index, reason)` of samples outside the domain.
    pub skipped: Vec<(usize, String)>,
    /// Smallest numeric eigenvalue over all checked samples.
    pub min_eigenvalue: f64,
}

fn min_eig(h: &[f64], k: usize) -> f64 {
    let m = DMatrix::from_row_slice(k, k, h);
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Second differences of function values with one Richardson step.
fn numeric_hessian(a: &[f64], x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let margin = a
        .iter()
        .zip(x)
        .map(|(&ak, &xk)| Float::sqrt(ak) - xk.abs())
        .fold(f64::INFINITY, f64::min);
    let h0 = 1e-3f64.min(0.2 * margin);
    let f = |p: &[f64]| second_term(a, p).unwrap_or(f64::NAN);
    let estimate = |h: f64| {
        let mut out = vec![0.0; k * k];
        let f0 = f(x);
        let mut p = x.to_vec();
        for i in 0..k {
            for j in i..k {
                let v = if i == j {
                    p[i] = x[i] + h;
                    let fp = f(&p);
                    p[i] = x[i] - h;
                    let fm = f(&p);
                    p[i] = x[i];
                    (fp - 2.0 * f0 + fm) / (h * h)
                } else {
                    let mut corner = |si: f64, sj: f64| {
                        p[i] = x[i] + si * h;
                        p[j] = x[j] + sj * h;
                        let v = f(&p);
                        p[i] = x[i];
                        p[j] = x[j];
                        v
                    };
                    (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * h * h)
                };
                out[i * k + j] = v;
                out[j * k + i] = v;
            }
        }
        out
    };
    let coarse = estimate(h0);
    let fine = estimate(0.5 * h0);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

/// Hessian of `sqrt(Σ 1/(a_k − x_k²))` at each sample, by finite differences
/// and in closed form, with the smallest eigenvalue of each.
pub fn hessian_check(c: &ProblemConstants, samples: &[Vec<f64>]) -> HessianReport {
    let k = c.k();
    let mut report = HessianReport {
        samples: Vec::new(),
        skipped: Vec::new(),
        min_eigenvalue: f64::INFINITY,
    };
    for (idx, x) in samples.iter().enumerate() {
        if x.len() != k {
            report
                .skipped
                .push((idx, format!("{} values for {k} devices", x.len())));
            continue;
        }
        let closed = match second_term_hessian(&c.a, x) {
            Ok(h) => h,
            Err(e) => {
                report.skipped.push((idx, format!("{e}")));
                continue;
            }
        };
        let numeric = numeric_hessian(&c.a, x);
        let max_relative_diff = numeric
            .iter()
            .zip(&closed)
            .map(|(n, c)| (n - c).abs() / c.abs().max(1e-12))
            .fold(0.0, f64::max);
        let sample = HessianSample {
            point: x.clone(),
            min_eigenvalue: min_eig(&numeric, k),
            closed_form_min_eigenvalue: min_eig(&closed, k),
            numeric,
            closed_form: closed,
            max_relative_diff,
        };
        report.min_eigenvalue = report.min_eigenvalue.min(sample.min_eigenvalue);
        report.samples.push(sample);
    }
    report
}
