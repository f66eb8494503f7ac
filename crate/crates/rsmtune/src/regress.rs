//! Model matrices over coded designs and ordinary-least-squares fits
//! with coefficient inference (standard errors, t-values, p-values).
//!
//! Term order is fixed so ledgers and reports are byte-stable:
//! intercept, linear terms x1..xp, then for second-order models the
//! squares x1^2..xp^2 followed by pairwise interactions in lexicographic
//! index order (x1*x2, x1*x3, ..., x_{p-1}*x_p).

use serde::{Deserialize, Serialize};

use crate::doe::Design;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Conditioning bound beyond which the normal equations are abandoned
/// for an orthogonal factorization.
const COND_LIMIT: f64 = 1e8;

/// Relative pivot threshold for declaring a model column collinear.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelOrder {
    First,
    Second,
}

/// Number of model terms for `p` factors.
pub fn n_terms(p: usize, order: ModelOrder) -> usize {
    match order {
        ModelOrder::First => 1 + p,
        ModelOrder::Second => 1 + 2 * p + p * (p - 1) / 2,
    }
}

/// Term labels built from the given factor names.
pub fn term_names(names: &[String], order: ModelOrder) -> Vec<String> {
    let mut out = Vec::with_capacity(n_terms(names.len(), order));
    out.push("Intercept".to_string());
    out.extend(names.iter().cloned());
    if order == ModelOrder::Second {
        for n in names {
            out.push(format!("{n}^2"));
        }
        for i in 0..names.len() {
            for j in (i + 1)..names.len() {
                out.push(format!("{}*{}", names[i], names[j]));
            }
        }
    }
    out
}

/// Term labels with placeholder factor names x1..xp.
pub fn term_names_generic(p: usize, order: ModelOrder) -> Vec<String> {
    let names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    term_names(&names, order)
}

/// One model-matrix row for a coded point.
pub fn model_row(coded: &[f64], order: ModelOrder) -> Vec<f64> {
    let p = coded.len();
    let mut row = Vec::with_capacity(n_terms(p, order));
    row.push(1.0);
    row.extend_from_slice(coded);
    if order == ModelOrder::Second {
        for &c in coded {
            row.push(c * c);
        }
        for i in 0..p {
            for j in (i + 1)..p {
                row.push(coded[i] * coded[j]);
            }
        }
    }
    row
}

/// Model matrix over a design, one row per design point.
pub fn model_matrix(design: &Design, order: ModelOrder) -> Mat {
    assert!(!design.is_empty(), "model_matrix over an empty design");
    let rows: Vec<Vec<f64>> = design
        .points()
        .iter()
        .map(|pt| model_row(&pt.coded, order))
        .collect();
    Mat::from_rows(&rows)
}

/// Coefficient inference; absent when the fit is saturated (dof = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct FitInference {
    pub standard_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residual_variance: f64,
}

/// An ordinary-least-squares fit over coded predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub order: ModelOrder,
    pub term_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub inference: Option<FitInference>,
    pub n_runs: usize,
    pub dof: usize,
}

impl RegressionFit {
    /// Linear coefficients (everything after the intercept, up to the
    /// first non-linear term).
    pub fn linear_coefficients(&self, p: usize) -> &[f64] {
        &self.coefficients[1..=p]
    }
}

/// Fits `y = X b` by least squares. Normal equations with a symmetric
/// factorization carry the common case; designs with conditioning above
/// `COND_LIMIT` (clamped or wrapped star points can get close to
/// collinear) fall back to an orthogonal factorization. A saturated
/// system (rows = cols) returns coefficients with no inference.
pub fn ols_fit(
    x: &Mat,
    y: &[f64],
    order: ModelOrder,
    term_names: Vec<String>,
) -> Result<RegressionFit> {
    let (n, m) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if term_names.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: term_names.len(),
        });
    }
    if n < m {
        return Err(Error::Underdetermined { rows: n, cols: m });
    }

    let gram = x.gram();
    let by_cholesky = match linalg::cholesky(&gram) {
        Ok(ch) if ch.condition_estimate() <= COND_LIMIT => {
            Some((ch.solve(&x.t_vec(y)), ch.inverse()))
        }
        _ => None,
    };
    let (b, ginv) = match by_cholesky {
        Some(solution) => solution,
        None => {
            let qr = linalg::householder_qr(x);
            let bad = qr.near_null_columns(RANK_TOL);
            if !bad.is_empty() {
                return Err(Error::RankDeficient {
                    columns: bad.into_iter().map(|j| term_names[j].clone()).collect(),
                });
            }
            (qr.solve(y), qr.gram_inverse())
        }
    };

    let dof = n - m;
    let inference = if dof == 0 {
        None
    } else {
        let fitted = x.mat_vec(&b);
        let rss: f64 = y
            .iter()
            .zip(&fitted)
            .map(|(yi, fi)| (yi - fi) * (yi - fi))
            .sum();
        let residual_variance = rss / dof as f64;
        let mut standard_errors = Vec::with_capacity(m);
        let mut t_values = Vec::with_capacity(m);
        let mut p_values = Vec::with_capacity(m);
        for i in 0..m {
            // rounding can push a variance estimate a hair negative
            let var = (residual_variance * ginv.get(i, i)).max(0.0);
            let se = var.sqrt();
            let t = if se > 0.0 {
                b[i] / se
            } else if b[i] == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(b[i])
            };
            standard_errors.push(se);
            t_values.push(t);
            p_values.push(t_pvalue(t, dof as u32));
        }
        Some(FitInference {
            standard_errors,
            t_values,
            p_values,
            residual_variance,
        })
    };

    Ok(RegressionFit {
        order,
        term_names,
        coefficients: b,
        inference,
        n_runs: n,
        dof,
    })
}

/// Evaluates a fitted surface at a coded point.
pub fn predict(fit: &RegressionFit, coded: &[f64]) -> Result<f64> {
    let row = model_row(coded, fit.order);
    if row.len() != fit.coefficients.len() {
        return Err(Error::DimensionMismatch {
            expected: fit.coefficients.len(),
            got: row.len(),
        });
    }
    Ok(linalg::dot(&row, &fit.coefficients))
}

/// Two-sided Student-t tail probability: P(|T_dof| >= |t|), via the
/// regularized incomplete beta function I_x(dof/2, 1/2) with
/// x = dof / (dof + t^2).
pub fn t_pvalue(t: f64, dof: u32) -> f64 {
    assert!(dof >= 1, "t_pvalue needs dof >= 1");
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    let nu = dof as f64;
    let x = nu / (nu + t * t);
    betai_reg(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// ln Γ(z) for z > 0 (Lanczos approximation, g = 7, 9 coefficients;
/// relative error below 1e-13 on the range used here).
fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    debug_assert!(z > 0.0);
    let z = z - 1.0;
    let mut x = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Regularized incomplete beta I_x(a, b) by continued fraction
/// (modified Lentz), using the symmetry I_x(a,b) = 1 − I_{1−x}(b,a) to
/// stay in the rapidly converging region.
fn betai_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        // even step
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
