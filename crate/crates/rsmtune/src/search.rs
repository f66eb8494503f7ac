//! The two search primitives over fitted surfaces: the path of steepest
//! descent from a first-order fit, and canonical analysis of a
//! second-order fit (stationary point, eigenvalues, classification).

use serde::{Deserialize, Serialize};

use crate::doe::{DecodedSettings, FactorSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::regress::{self, ModelOrder, RegressionFit};

/// One point on the path of steepest descent.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentStep {
    /// Step length along the path; negative walks downhill.
    pub t: f64,
    /// Gradient norm ‖b*‖ used to normalize the direction.
    pub s: f64,
    /// Coded coordinates over the active factors: (t/s)·b*.
    pub coded: Vec<f64>,
    /// Decoded settings for every factor, held ones at their mid levels.
    pub decoded: DecodedSettings,
}

/// Shape of a fitted second-order surface at its stationary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceClass {
    Minimum,
    Maximum,
    Saddle,
    Degenerate,
}

impl std::fmt::Display for SurfaceClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SurfaceClass::Minimum => "minimum",
            SurfaceClass::Maximum => "maximum",
            SurfaceClass::Saddle => "saddle",
            SurfaceClass::Degenerate => "degenerate",
        };
        f.write_str(s)
    }
}

/// Canonical analysis of a second-order fit.
#[derive(Debug, Clone)]
pub struct StationaryAnalysis {
    /// Symmetric matrix of quadratic terms: diagonal holds the squared
    /// coefficients, off-diagonal half the interaction coefficients.
    pub b_matrix: Mat,
    /// Linear coefficients (gradient of the surface at the origin).
    pub b_star: Vec<f64>,
    /// Stationary point −½B⁻¹b* in coded units; absent when B is
    /// numerically singular.
    pub x_o_coded: Option<Vec<f64>>,
    /// Stationary point decoded per factor rules, held factors at mid.
    pub x_o_decoded: Option<DecodedSettings>,
    /// Eigenvalues of B, sorted ascending.
    pub eigenvalues: Vec<f64>,
    pub classification: SurfaceClass,
    /// Fitted response at the stationary point.
    pub predicted_response: Option<f64>,
    /// True when the stationary point lies outside the coded cube
    /// [−1, 1]^p, i.e. the fit is extrapolating.
    pub out_of_region: bool,
}

/// Decodes a held (dropped) factor at its mid level, routed through the
/// same kind rules as any other coded value.
fn held_value(factor: &FactorSpec) -> crate::doe::DecodedValue {
    factor.decode(factor.encode(factor.mid_level()))
}

/// Walks the path of steepest descent of a first-order fit: for each
/// step length t the coded point is (t/s)·b* with s = ‖b*‖, so the
/// point sits at distance |t| from the current center. `active` indexes
/// the factors the fit was built over; the remaining factors are held
/// at their mid levels in the decoded settings.
pub fn steepest_path(
    fit: &RegressionFit,
    factors: &[FactorSpec],
    active: &[usize],
    t_values: &[f64],
) -> Result<Vec<DescentStep>> {
    if fit.order != ModelOrder::First {
        return Err(Error::InvalidDesign(
            "steepest descent needs a first-order fit".into(),
        ));
    }
    if fit.coefficients.len() != 1 + active.len() {
        return Err(Error::DimensionMismatch {
            expected: 1 + active.len(),
            got: fit.coefficients.len(),
        });
    }
    let b_star = &fit.coefficients[1..];
    let s = linalg::norm(b_star);
    if s <= 0.0 {
        return Err(Error::ZeroGradient);
    }

    let mut steps = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let coded: Vec<f64> = b_star.iter().map(|b| t / s * b).collect();
        let mut decoded = Vec::with_capacity(factors.len());
        for (idx, factor) in factors.iter().enumerate() {
            let value = match active.iter().position(|&a| a == idx) {
                Some(k) => factor.decode(coded[k]),
                None => held_value(factor),
            };
            decoded.push((factor.name.clone(), value));
        }
        steps.push(DescentStep {
            t,
            s,
            coded,
            decoded,
        });
    }
    Ok(steps)
}

/// Canonical analysis of a second-order fit: builds B and b*, solves
/// for the stationary point x_o = −½B⁻¹b* through an eigendecomposition
/// of B, and classifies the surface by eigenvalue signs. A numerically
/// singular B yields a degenerate classification instead of an error.
pub fn stationary_point(
    fit: &RegressionFit,
    factors: &[FactorSpec],
    active: &[usize],
) -> Result<StationaryAnalysis> {
    if fit.order != ModelOrder::Second {
        return Err(Error::InvalidDesign(
            "canonical analysis needs a second-order fit".into(),
        ));
    }
    let p = active.len();
    if fit.coefficients.len() != regress::n_terms(p, ModelOrder::Second) {
        return Err(Error::DimensionMismatch {
            expected: regress::n_terms(p, ModelOrder::Second),
            got: fit.coefficients.len(),
        });
    }

    let b_star: Vec<f64> = fit.coefficients[1..=p].to_vec();
    let mut b_matrix = Mat::zeros(p, p);
    for j in 0..p {
        b_matrix.set(j, j, fit.coefficients[1 + p + j]);
    }
    let mut k = 1 + 2 * p;
    for i in 0..p {
        for j in (i + 1)..p {
            let half = fit.coefficients[k] / 2.0;
            b_matrix.set(i, j, half);
            b_matrix.set(j, i, half);
            k += 1;
        }
    }

    let (raw_vals, vecs) = linalg::jacobi_eigen(&b_matrix, 1e-12, 100);
    let mut eigenvalues = raw_vals.clone();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let max_abs = eigenvalues.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
    let tau = 1e-8 * max_abs;
    let classification = if eigenvalues.iter().any(|l| l.abs() <= tau) {
        SurfaceClass::Degenerate
    } else if eigenvalues.iter().all(|l| *l > tau) {
        SurfaceClass::Minimum
    } else if eigenvalues.iter().all(|l| *l < -tau) {
        SurfaceClass::Maximum
    } else {
        SurfaceClass::Saddle
    };

    let (x_o_coded, x_o_decoded, predicted_response, out_of_region) =
        if classification == SurfaceClass::Degenerate {
            (None, None, None, false)
        } else {
            // x_o = −½ V Λ⁻¹ Vᵀ b*, reusing the eigendecomposition
            let mut vt_b = vec![0.0; p];
            for j in 0..p {
                for i in 0..p {
                    vt_b[j] += vecs.get(i, j) * b_star[i];
                }
            }
            for (j, v) in vt_b.iter_mut().enumerate() {
                *v /= raw_vals[j];
            }
            let mut x_o = vec![0.0; p];
            for i in 0..p {
                for j in 0..p {
                    x_o[i] += vecs.get(i, j) * vt_b[j];
                }
                x_o[i] *= -0.5;
            }

            let mut decoded = Vec::with_capacity(factors.len());
            for (idx, factor) in factors.iter().enumerate() {
                let value = match active.iter().position(|&a| a == idx) {
                    Some(pos) => factor.decode(x_o[pos]),
                    None => held_value(factor),
                };
                decoded.push((factor.name.clone(), value));
            }
            let predicted = regress::predict(fit, &x_o)?;
            let outside = x_o.iter().any(|c| c.abs() > 1.0);
            (Some(x_o), Some(decoded), Some(predicted), outside)
        };

    Ok(StationaryAnalysis {
        b_matrix,
        b_star,
        x_o_coded,
        x_o_decoded,
        eigenvalues,
        classification,
        predicted_response,
        out_of_region,
    })
}
