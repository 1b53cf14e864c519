//! Adaptive weights, the regularization path over the lasso strength, and
//! K-fold cross-validation over clusters with the one-standard-error rule.

use crate::data::Dataset;
use crate::error::{ConfigError, Error, NumericError};
use crate::fit::{fit_warm, fit_with_frozen, FitResult, FitSettings};
use crate::likelihood::{penalized_loglik, score};
use crate::model::{Design, ModelSpec, ParameterState, PenaltyConfig};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const WEIGHT_CAP: f64 = 1e6;

/// Per-group adaptive weights 1 / ||beta_k||_2 from a coefficient estimate on
/// the standardized scale, capped at [`WEIGHT_CAP`]. Unpenalized groups keep
/// weight zero.
pub fn weights_from_estimate(design: &Design, beta_std: &DVector<f64>) -> Vec<f64> {
    design
        .groups
        .iter()
        .map(|g| {
            if !g.penalized {
                return 0.0;
            }
            let norm = beta_std.rows(g.cols.start, g.cols.len()).norm();
            (1.0 / norm).min(WEIGHT_CAP)
        })
        .collect()
}

/// Weights from the unpenalized maximum-likelihood fit, falling back to a
/// lightly ridge-penalized fit when the unpenalized one fails.
pub fn adaptive_weights(design: &Design, settings: &FitSettings) -> Result<Vec<f64>, Error> {
    let pen0 = PenaltyConfig::unpenalized(design);
    match crate::fit::fit(design, &pen0, settings) {
        Ok(fit) => Ok(weights_from_estimate(design, &fit.params.beta)),
        Err(_) => {
            let mut ridge_pen = pen0;
            ridge_pen.ridge = 1e-4;
            match crate::fit::fit(design, &ridge_pen, settings) {
                Ok(fit) => Ok(weights_from_estimate(design, &fit.params.beta)),
                Err(_) => Err(NumericError::WeightsFitFailed.into()),
            }
        }
    }
}

fn all_selected_out(fit: &FitResult) -> bool {
    fit.selected.is_empty()
}

/// Descending log-spaced grid from xi_max down to xi_max / 1000, where
/// xi_max is found by a doubling search as the smallest tested strength at
/// which every penalized group is selected out.
pub fn make_grid(
    design: &Design,
    weights: &[f64],
    settings: &FitSettings,
    length: usize,
) -> Result<Vec<f64>, Error> {
    if length < 2 {
        return Err(ConfigError::GridTooShort.into());
    }
    if design.penalized_group_indices().next().is_none() {
        return Err(ConfigError::NothingPenalized.into());
    }

    // Null model: every penalized column pinned at zero. Its unpenalized
    // score bounds the entry strength of each group.
    let mut frozen = vec![false; design.p()];
    for k in design.penalized_group_indices() {
        for j in design.groups[k].cols.clone() {
            frozen[j] = true;
        }
    }
    let pen0 = PenaltyConfig::with_weights(design, 0.0, weights.to_vec());
    let null_fit = fit_with_frozen(design, &pen0, settings, None, Some(&frozen))?;
    let s = score(design, &null_fit.params, &pen0)?;
    let mut xi = 1e-4f64;
    for k in design.penalized_group_indices() {
        let g = &design.groups[k];
        let s_norm = s.rows(g.cols.start, g.cols.len()).norm();
        let scale = weights[k] * (g.df as f64).sqrt();
        if scale > 0.0 {
            xi = xi.max(s_norm / scale);
        }
    }

    let test = |xi: f64| -> Result<bool, Error> {
        let pen = PenaltyConfig::with_weights(design, xi, weights.to_vec());
        let fit = fit_warm(design, &pen, settings, Some(&null_fit.params))?;
        Ok(all_selected_out(&fit))
    };
    let mut xi_max = xi;
    if test(xi_max)? {
        for _ in 0..60 {
            let lower = xi_max * 0.5;
            if test(lower)? {
                xi_max = lower;
            } else {
                break;
            }
        }
    } else {
        let mut found = false;
        for _ in 0..60 {
            xi_max *= 2.0;
            if test(xi_max)? {
                found = true;
                break;
            }
        }
        if !found {
            return Err(ConfigError::Invalid(
                "doubling search did not reach a fully selected-out model".into(),
            )
            .into());
        }
    }

    let lo = xi_max * 1e-3;
    let ratio = (lo / xi_max).ln() / (length - 1) as f64;
    Ok((0..length)
        .map(|i| xi_max * (ratio * i as f64).exp())
        .collect())
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub grid: Vec<f64>,
    /// Original-scale coefficients per converged grid point.
    pub coef: Vec<Option<DVector<f64>>>,
    pub selected_counts: Vec<Option<usize>>,
    pub objectives: Vec<Option<f64>>,
    /// Beta column labels matching the coefficient vectors.
    pub labels: Vec<String>,
}

/// Fit the whole path from the largest strength down, warm-starting each
/// point at the previous solution. Non-converged points are recorded as
/// gaps and skipped.
pub fn path(
    design: &Design,
    weights: &[f64],
    grid: &[f64],
    settings: &FitSettings,
) -> Result<PathResult, Error> {
    if grid.len() < 2 {
        return Err(ConfigError::GridTooShort.into());
    }
    if grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(ConfigError::Invalid("grid must be strictly descending".into()).into());
    }
    let mut warm: Option<ParameterState> = None;
    let mut coef = Vec::with_capacity(grid.len());
    let mut selected_counts = Vec::with_capacity(grid.len());
    let mut objectives = Vec::with_capacity(grid.len());
    for &xi in grid {
        let pen = PenaltyConfig::with_weights(design, xi, weights.to_vec());
        match fit_warm(design, &pen, settings, warm.as_ref()) {
            Ok(fit) if fit.converged => {
                coef.push(Some(fit.beta_original.clone()));
                selected_counts.push(Some(fit.selected.len()));
                objectives.push(Some(fit.objective));
                warm = Some(fit.params);
            }
            _ => {
                coef.push(None);
                selected_counts.push(None);
                objectives.push(None);
            }
        }
    }
    Ok(PathResult {
        grid: grid.to_vec(),
        coef,
        selected_counts,
        objectives,
        labels: design.x_labels.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub grid: Vec<f64>,
    /// Mean held-out loss per grid point; NaN where any fold failed.
    pub cv_error: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub xi_opt: f64,
    pub xi_1se: f64,
    pub fold_assignment: Vec<(String, usize)>,
}

/// Deterministic fold assignment: shuffle cluster indices with a seeded
/// generator and deal them round-robin.
pub fn assign_folds(n_clusters: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_clusters).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![0; n_clusters];
    for (pos, &cluster) in order.iter().enumerate() {
        folds[cluster] = pos % k;
    }
    folds
}

fn folds_have_events(data: &Dataset, folds: &[usize], k: usize) -> bool {
    let mut held_out = vec![0usize; k];
    let mut total = 0usize;
    for cluster in &data.clusters {
        let f = folds[data
            .clusters
            .iter()
            .position(|c| c.id == cluster.id)
            .unwrap()];
        let events: usize = cluster
            .subjects
            .iter()
            .filter(|&&si| data.subjects[si].event)
            .count();
        held_out[f] += events;
        total += events;
    }
    (0..k).all(|f| held_out[f] >= 1 && total - held_out[f] >= 1)
}

/// Held-out loss of one fold at one grid point: negative unpenalized
/// log-likelihood of the held-out clusters with frailties at their prior
/// mean zero and (alpha, beta) from the training fit.
fn held_out_loss(ho_design: &Design, trained: &ParameterState) -> Result<f64, Error> {
    let mut state = ParameterState::zeros(ho_design);
    state.beta.copy_from(&trained.beta);
    state.alpha.copy_from(&trained.alpha);
    // zeta and b stay zero: only the data part of the objective remains.
    let pen = PenaltyConfig::unpenalized(ho_design);
    Ok(-penalized_loglik(ho_design, &state, &pen)?)
}

/// K-fold cross-validation over clusters along a descending grid, with warm
/// starts inside each fold and the one-standard-error selection rule.
pub fn cross_validate(
    data: &Dataset,
    spec: &ModelSpec,
    weights: &[f64],
    grid: &[f64],
    k: usize,
    seed: u64,
    settings: &FitSettings,
) -> Result<CvResult, Error> {
    if k < 2 || data.n_clusters() < k {
        return Err(ConfigError::BadFolds.into());
    }
    let mut folds = assign_folds(data.n_clusters(), k, seed);
    if !folds_have_events(data, &folds, k) {
        folds = assign_folds(data.n_clusters(), k, seed.wrapping_add(0x9e3779b97f4a7c15));
        if !folds_have_events(data, &folds, k) {
            return Err(NumericError::FoldWithoutEvents.into());
        }
    }
    let result = cross_validate_with_folds(data, spec, weights, grid, &folds, settings)?;
    Ok(result)
}

/// Cross-validation with an explicit cluster-to-fold assignment.
pub fn cross_validate_with_folds(
    data: &Dataset,
    spec: &ModelSpec,
    weights: &[f64],
    grid: &[f64],
    folds: &[usize],
    settings: &FitSettings,
) -> Result<CvResult, Error> {
    if grid.len() < 2 {
        return Err(ConfigError::GridTooShort.into());
    }
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(ConfigError::BadFolds.into());
    }
    // Shared basis domain: the spline knots come from the full data so no
    // held-out time falls outside a training basis.
    let full_design = spec.resolve(data)?;
    let mut fold_spec = spec.clone();
    fold_spec.t_max = Some(full_design.t_max);

    let fold_losses: Vec<Result<Vec<Option<f64>>, Error>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let keep_train: Vec<bool> = folds.iter().map(|&ff| ff != f).collect();
            let keep_ho: Vec<bool> = folds.iter().map(|&ff| ff == f).collect();
            let train = data.subset_by_clusters(&keep_train);
            let ho = data.subset_by_clusters(&keep_ho);
            let train_design = fold_spec.resolve(&train)?;
            let ho_design =
                fold_spec.resolve_with(&ho, Some(train_design.standardization.clone()))?;
            let mut warm: Option<ParameterState> = None;
            let mut losses = Vec::with_capacity(grid.len());
            for &xi in grid {
                let pen = PenaltyConfig::with_weights(&train_design, xi, weights.to_vec());
                match fit_warm(&train_design, &pen, settings, warm.as_ref()) {
                    Ok(fit) => {
                        losses.push(held_out_loss(&ho_design, &fit.params).ok());
                        warm = Some(fit.params);
                    }
                    Err(_) => losses.push(None),
                }
            }
            Ok(losses)
        })
        .collect();

    let mut per_fold = Vec::with_capacity(k);
    for r in fold_losses {
        per_fold.push(r?);
    }

    let g = grid.len();
    let mut cv_error = vec![f64::NAN; g];
    let mut cv_se = vec![f64::NAN; g];
    for gi in 0..g {
        let vals: Vec<f64> = per_fold.iter().filter_map(|f| f[gi]).collect();
        if vals.len() == k {
            let mean = vals.iter().sum::<f64>() / k as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (k as f64 - 1.0);
            cv_error[gi] = mean;
            cv_se[gi] = (var / k as f64).sqrt();
        }
    }

    let mut opt_idx = None;
    for gi in 0..g {
        if cv_error[gi].is_nan() {
            continue;
        }
        if opt_idx.map_or(true, |oi: usize| cv_error[gi] < cv_error[oi]) {
            opt_idx = Some(gi);
        }
    }
    let opt_idx =
        opt_idx.ok_or_else(|| ConfigError::Invalid("no valid grid point in CV".into()))?;
    let threshold = cv_error[opt_idx] + cv_se[opt_idx];
    let mut one_se_idx = opt_idx;
    for gi in 0..=opt_idx {
        if !cv_error[gi].is_nan() && cv_error[gi] <= threshold {
            one_se_idx = gi;
            break;
        }
    }

    let fold_assignment = data
        .clusters
        .iter()
        .enumerate()
        .map(|(ci, c)| (c.id.clone(), folds[ci]))
        .collect();

    Ok(CvResult {
        grid: grid.to_vec(),
        cv_error,
        cv_se,
        xi_opt: grid[opt_idx],
        xi_1se: grid[one_se_idx],
        fold_assignment,
    })
}
