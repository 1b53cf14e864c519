//! Serializable fitted-model artifact: everything needed to report a fit and
//! to predict survival curves for new covariate rows on the original scale.

use crate::data::{Dataset, FactorLevels};
use crate::error::{ConfigError, DataError, Error};
use crate::fit::FitResult;
use crate::model::Design;
use crate::quadrature::{EtaEvaluator, QuadratureRule};
use crate::splines::SplineBasis;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermCoef {
    /// Encoded column label (dummy columns carry "factor=level").
    pub label: String,
    /// Penalty-group label (the factor name for dummies).
    pub group: String,
    /// Coefficient on the original covariate scale.
    pub value: f64,
    pub penalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvTerm {
    pub label: String,
    /// Spline coefficients of the time-varying effect.
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorMap {
    pub column: String,
    /// Levels in training order; the first is the reference.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: u32,
    pub basis_size: usize,
    pub degree: usize,
    pub t_max: f64,
    pub xi: f64,
    pub adaptive_weights: bool,
    pub converged: bool,
    pub objective: f64,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub frailty: bool,
    pub sigma_b_sq: Option<f64>,
    /// Baseline spline coefficients, adjusted for covariate centering.
    pub baseline_coefficients: Vec<f64>,
    pub terms: Vec<TermCoef>,
    pub tv_terms: Vec<TvTerm>,
    pub selected_groups: Vec<String>,
    pub factors: Vec<FactorMap>,
    pub seed: Option<u64>,
}

impl ModelArtifact {
    pub fn from_fit(
        design: &Design,
        data: &Dataset,
        fit: &FitResult,
        xi: f64,
        adaptive_weights: bool,
        seed: Option<u64>,
    ) -> Self {
        let terms = design
            .groups
            .iter()
            .flat_map(|g| {
                g.cols.clone().map(move |j| (g, j))
            })
            .map(|(g, j)| TermCoef {
                label: design.x_labels[j].clone(),
                group: g.label.clone(),
                value: fit.beta_original[j],
                penalized: g.penalized,
            })
            .collect();
        let m = design.m();
        let tv_terms = design
            .tv_labels
            .iter()
            .enumerate()
            .map(|(k, label)| TvTerm {
                label: label.clone(),
                coefficients: fit
                    .params
                    .alpha
                    .rows((1 + k) * m, m)
                    .iter()
                    .copied()
                    .collect(),
            })
            .collect();
        let selected_groups = fit
            .selected
            .iter()
            .map(|&k| design.groups[k].label.clone())
            .collect();
        let factors = data
            .factors
            .iter()
            .map(|f: &FactorLevels| FactorMap {
                column: f.column.clone(),
                levels: f.levels.clone(),
            })
            .collect();
        Self {
            version: 1,
            basis_size: design.m(),
            degree: design.basis.degree(),
            t_max: design.t_max,
            xi,
            adaptive_weights,
            converged: fit.converged,
            objective: fit.objective,
            iterations: fit.iterations,
            final_score_norm: fit.final_score_norm,
            frailty: design.frailty,
            sigma_b_sq: fit.sigma_b_sq,
            baseline_coefficients: fit.alpha0_original.iter().copied().collect(),
            terms,
            tv_terms,
            selected_groups,
            factors,
            seed,
        }
    }

    pub fn basis(&self) -> Result<SplineBasis, ConfigError> {
        SplineBasis::new(self.basis_size, self.degree, self.t_max)
    }

    /// Resolve the linear predictor offset and time-varying covariate values
    /// for one new-data row given as column -> raw string value.
    pub fn encode_row(&self, row: &HashMap<String, String>) -> Result<(f64, Vec<f64>), Error> {
        let factor_of = |group: &str| self.factors.iter().find(|f| f.column == group);
        let mut xbeta = 0.0;
        for term in &self.terms {
            let x = match factor_of(&term.group) {
                Some(f) => {
                    let raw = row
                        .get(&f.column)
                        .ok_or_else(|| DataError::UnknownColumn(f.column.clone()))?;
                    if !f.levels.iter().any(|l| l == raw) {
                        return Err(DataError::UnknownLevel {
                            column: f.column.clone(),
                            level: raw.clone(),
                        }
                        .into());
                    }
                    let level = term
                        .label
                        .split_once('=')
                        .map(|(_, l)| l)
                        .unwrap_or_default();
                    (raw == level) as u8 as f64
                }
                None => {
                    let raw = row
                        .get(&term.label)
                        .ok_or_else(|| DataError::UnknownColumn(term.label.clone()))?;
                    raw.parse::<f64>().map_err(|_| DataError::BadNumber {
                        row: 0,
                        column: term.label.clone(),
                        value: raw.clone(),
                    })?
                }
            };
            xbeta += term.value * x;
        }
        let mut z = Vec::with_capacity(self.tv_terms.len());
        for tv in &self.tv_terms {
            let raw = row
                .get(&tv.label)
                .ok_or_else(|| DataError::UnknownColumn(tv.label.clone()))?;
            let v: f64 = raw.parse().map_err(|_| DataError::BadNumber {
                row: 0,
                column: tv.label.clone(),
                value: raw.clone(),
            })?;
            z.push(v);
        }
        Ok((xbeta, z))
    }

    /// Survival curve S(t) = exp(-integral_0^t exp(eta(s)) ds) on an
    /// equidistant grid, with the frailty at its prior mean. S(0) = 1 and the
    /// curve is non-increasing by construction (prefix sums of positive cell
    /// integrals).
    pub fn survival_curve(
        &self,
        xbeta: f64,
        z: &[f64],
        n_points: usize,
    ) -> Result<Vec<(f64, f64)>, Error> {
        if z.len() != self.tv_terms.len() {
            return Err(ConfigError::Dimension(format!(
                "expected {} time-varying values, got {}",
                self.tv_terms.len(),
                z.len()
            ))
            .into());
        }
        let basis = self.basis()?;
        let m = basis.len();
        let mut alpha = DVector::zeros(m * (1 + self.tv_terms.len()));
        for (i, &a) in self.baseline_coefficients.iter().enumerate() {
            alpha[i] = a;
        }
        for (k, tv) in self.tv_terms.iter().enumerate() {
            for (i, &a) in tv.coefficients.iter().enumerate() {
                alpha[(1 + k) * m + i] = a;
            }
        }
        let eta = EtaEvaluator::new(&basis, &alpha, z, xbeta)?;
        let rule = QuadratureRule::gauss_legendre(10)?;
        let mut out = Vec::with_capacity(n_points);
        let mut cum = 0.0;
        let mut prev_t = 0.0;
        for i in 0..n_points {
            let t = self.t_max * (i as f64 / (n_points - 1) as f64);
            if t > prev_t {
                for (lo, hi) in basis.smooth_spans(prev_t, t) {
                    for (s, w) in rule.scaled_nodes(lo, hi) {
                        cum += w * eta.eta(s)?.exp();
                    }
                }
            }
            out.push((t, (-cum).exp()));
            prev_t = t;
        }
        Ok(out)
    }
}
