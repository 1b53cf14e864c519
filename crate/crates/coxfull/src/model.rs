//! Model resolution: binds a dataset to a spline basis, penalty groups,
//! time-varying terms and the frailty design, standardizes covariates, and
//! caches the quadrature nodes used by every likelihood pass.

use crate::data::Dataset;
use crate::error::{ConfigError, DataError, Error};
use crate::quadrature::QuadratureRule;
use crate::splines::{DifferencePenalty, SplineBasis};
use nalgebra::{DMatrix, DVector};
use std::ops::Range;

/// User-facing model description, resolved against a dataset into a [`Design`].
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub basis_size: usize,
    pub degree: usize,
    /// Group labels under the lasso penalty; when all three term lists are
    /// empty every covariate group is penalized.
    pub penalized: Vec<String>,
    pub unpenalized: Vec<String>,
    /// Metric, subject-constant columns whose effect varies over time.
    pub tv: Vec<String>,
    pub frailty: bool,
    pub quad_order: usize,
    pub standardize: bool,
    /// Basis domain end; defaults to the maximum observed stop time.
    pub t_max: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            basis_size: 6,
            degree: 3,
            penalized: Vec::new(),
            unpenalized: Vec::new(),
            tv: Vec::new(),
            frailty: false,
            quad_order: 10,
            standardize: true,
            t_max: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupInfo {
    pub label: String,
    /// Column range inside the beta vector.
    pub cols: Range<usize>,
    pub df: usize,
    pub penalized: bool,
    pub is_factor: bool,
}

/// Cached quadrature node: scaled weight and the basis row at the node.
#[derive(Debug, Clone)]
pub struct QuadNode {
    pub t: f64,
    pub w: f64,
    pub basis: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    /// Standardized covariates in beta layout.
    pub x: DVector<f64>,
    pub nodes: Vec<QuadNode>,
    pub basis_at_stop: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub label: String,
    /// Values of the time-varying-effect covariates.
    pub z: Vec<f64>,
    /// Frailty design (a 1 for the random intercept).
    pub u: DVector<f64>,
    pub episodes: Vec<PreparedEpisode>,
}

#[derive(Debug, Clone)]
pub struct PreparedCluster {
    pub id: String,
    pub subjects: Vec<PreparedSubject>,
}

/// Column-wise centering and scaling applied to the linear covariates.
#[derive(Debug, Clone)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }
}

/// A model resolved against a dataset: dimensions, penalty structure, and
/// per-episode quadrature caches. Immutable once built; fits only read it.
#[derive(Debug, Clone)]
pub struct Design {
    pub basis: SplineBasis,
    pub penalty: Option<DifferencePenalty>,
    pub rule: QuadratureRule,
    pub clusters: Vec<PreparedCluster>,
    pub groups: Vec<GroupInfo>,
    pub x_labels: Vec<String>,
    pub tv_labels: Vec<String>,
    pub frailty: bool,
    pub q: usize,
    pub standardization: Standardization,
    pub n_subjects: usize,
    pub n_events: usize,
    pub total_exposure: f64,
    pub t_max: f64,
}

impl Design {
    pub fn p(&self) -> usize {
        self.x_labels.len()
    }

    pub fn m(&self) -> usize {
        self.basis.len()
    }

    pub fn n_smooth(&self) -> usize {
        1 + self.tv_labels.len()
    }

    pub fn alpha_dim(&self) -> usize {
        self.n_smooth() * self.m()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn b_dim(&self) -> usize {
        if self.frailty {
            self.n_clusters() * self.q
        } else {
            0
        }
    }

    /// Total dimension of the joint parameter vector (beta, alpha, b).
    pub fn dim(&self) -> usize {
        self.p() + self.alpha_dim() + self.b_dim()
    }

    pub fn beta_range(&self) -> Range<usize> {
        0..self.p()
    }

    pub fn alpha_range(&self) -> Range<usize> {
        self.p()..self.p() + self.alpha_dim()
    }

    pub fn b_range(&self) -> Range<usize> {
        self.p() + self.alpha_dim()..self.dim()
    }

    pub fn penalized_group_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.penalized)
            .map(|(i, _)| i)
    }

    /// Report a standardized-scale coefficient vector on the original scale.
    pub fn unstandardize_beta(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(beta.len(), |j, _| beta[j] / self.standardization.scale[j])
    }

    /// Constant absorbed into the baseline by covariate centering:
    /// eta = gamma0_std(t) + x_std' beta_std = [gamma0_std(t) - shift] + x' beta_orig.
    pub fn baseline_shift(&self, beta: &DVector<f64>) -> f64 {
        beta.iter()
            .enumerate()
            .map(|(j, &b)| b * self.standardization.mean[j] / self.standardization.scale[j])
            .sum()
    }
}

/// Frailty covariance Q(theta) in log-Cholesky parametrization: theta packs
/// the lower triangle of L column-wise with logged diagonal, Q = L L'.
#[derive(Debug, Clone)]
pub struct FrailtyCovariance {
    q: usize,
    theta: DVector<f64>,
}

impl FrailtyCovariance {
    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn theta_len(q: usize) -> usize {
        q * (q + 1) / 2
    }

    pub fn from_theta(q: usize, theta: DVector<f64>) -> Result<Self, ConfigError> {
        if theta.len() != Self::theta_len(q) {
            return Err(ConfigError::Dimension(format!(
                "theta has length {}, expected {}",
                theta.len(),
                Self::theta_len(q)
            )));
        }
        Ok(Self { q, theta })
    }

    /// Diagonal covariance with the given variance on every coordinate.
    pub fn diagonal(q: usize, variance: f64) -> Self {
        let mut theta = DVector::zeros(Self::theta_len(q));
        let mut idx = 0;
        for col in 0..q {
            theta[idx] = 0.5 * variance.ln();
            idx += q - col;
        }
        Self { q, theta }
    }

    /// Parametrize a symmetric positive semi-definite matrix, flooring
    /// eigenvalues at `floor` when the Cholesky factorization fails.
    pub fn from_matrix(m: &DMatrix<f64>, floor: f64) -> Self {
        let q = m.nrows();
        let sym = (m + m.transpose()) * 0.5;
        let chol = match sym.clone().cholesky() {
            Some(c) => c,
            None => {
                let eig = nalgebra::SymmetricEigen::new(sym);
                let vals = eig.eigenvalues.map(|l| l.max(floor));
                let rebuilt =
                    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
                rebuilt
                    .cholesky()
                    .expect("eigenvalue-floored matrix is positive definite")
            }
        };
        let l = chol.l();
        let mut theta = DVector::zeros(Self::theta_len(q));
        let mut idx = 0;
        for col in 0..q {
            theta[idx] = l[(col, col)].ln();
            idx += 1;
            for row in col + 1..q {
                theta[idx] = l[(row, col)];
                idx += 1;
            }
        }
        Self { q, theta }
    }

    fn l_matrix(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        let mut idx = 0;
        for col in 0..self.q {
            l[(col, col)] = self.theta[idx].exp();
            idx += 1;
            for row in col + 1..self.q {
                l[(row, col)] = self.theta[idx];
                idx += 1;
            }
        }
        l
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let l = self.l_matrix();
        &l * l.transpose()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.matrix()
            .cholesky()
            .expect("Q is positive definite by construction")
            .inverse()
    }
}

/// The full parameter vector: spline coefficients, linear effects, frailties,
/// variance parameters, and smoothing parameters.
#[derive(Debug, Clone)]
pub struct ParameterState {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub b: DVector<f64>,
    pub theta: DVector<f64>,
    pub zeta: DVector<f64>,
}

impl ParameterState {
    pub fn zeros(design: &Design) -> Self {
        let theta_len = if design.frailty {
            FrailtyCovariance::theta_len(design.q)
        } else {
            0
        };
        Self {
            beta: DVector::zeros(design.p()),
            alpha: DVector::zeros(design.alpha_dim()),
            b: DVector::zeros(design.b_dim()),
            theta: DVector::zeros(theta_len),
            zeta: DVector::from_element(design.n_smooth(), 0.0),
        }
    }

    pub fn frailty_cov(&self, design: &Design) -> Option<FrailtyCovariance> {
        if design.frailty {
            Some(FrailtyCovariance::from_theta(design.q, self.theta.clone()).expect("theta length"))
        } else {
            None
        }
    }

    /// Spline coefficients of smooth term k (0 = baseline).
    pub fn alpha_block(&self, design: &Design, k: usize) -> DVector<f64> {
        let m = design.m();
        self.alpha.rows(k * m, m).into_owned()
    }

    pub fn b_block(&self, design: &Design, cluster: usize) -> DVector<f64> {
        self.b.rows(cluster * design.q, design.q).into_owned()
    }

    /// Flatten (beta, alpha, b) into one vector in block order.
    pub fn flat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.beta.len() + self.alpha.len() + self.b.len());
        v.rows_mut(0, self.beta.len()).copy_from(&self.beta);
        v.rows_mut(self.beta.len(), self.alpha.len())
            .copy_from(&self.alpha);
        v.rows_mut(self.beta.len() + self.alpha.len(), self.b.len())
            .copy_from(&self.b);
        v
    }

    pub fn set_flat(&mut self, v: &DVector<f64>) {
        assert_eq!(v.len(), self.beta.len() + self.alpha.len() + self.b.len());
        self.beta.copy_from(&v.rows(0, self.beta.len()));
        self.alpha
            .copy_from(&v.rows(self.beta.len(), self.alpha.len()));
        self.b
            .copy_from(&v.rows(self.beta.len() + self.alpha.len(), self.b.len()));
    }
}

/// Lasso penalty configuration: strength, per-group adaptive weights and
/// sizes, and the local approximation constant c in sqrt(beta^2 + c).
#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    pub xi: f64,
    pub weights: Vec<f64>,
    pub df: Vec<usize>,
    pub c: f64,
    /// Extra quadratic penalty on beta, used as the ridge fallback when
    /// computing adaptive weights.
    pub ridge: f64,
}

impl PenaltyConfig {
    pub fn uniform(design: &Design, xi: f64) -> Self {
        Self {
            xi,
            weights: design
                .groups
                .iter()
                .map(|g| if g.penalized { 1.0 } else { 0.0 })
                .collect(),
            df: design.groups.iter().map(|g| g.df).collect(),
            c: 1e-5,
            ridge: 0.0,
        }
    }

    pub fn unpenalized(design: &Design) -> Self {
        Self::uniform(design, 0.0)
    }

    pub fn with_weights(design: &Design, xi: f64, weights: Vec<f64>) -> Self {
        Self {
            xi,
            weights,
            df: design.groups.iter().map(|g| g.df).collect(),
            c: 1e-5,
            ridge: 0.0,
        }
    }

    pub fn validate(&self, design: &Design) -> Result<(), ConfigError> {
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(ConfigError::Invalid("xi must be finite and >= 0".into()));
        }
        if !(self.c > 0.0) {
            return Err(ConfigError::Invalid("c must be positive".into()));
        }
        if self.weights.len() != design.groups.len() || self.df.len() != design.groups.len() {
            return Err(ConfigError::Dimension(
                "penalty weights/df must have one entry per group".into(),
            ));
        }
        for (k, g) in design.groups.iter().enumerate() {
            if !self.weights[k].is_finite() || self.weights[k] < 0.0 {
                return Err(ConfigError::BadWeights);
            }
            if self.df[k] != g.df || g.df < 1 {
                return Err(ConfigError::Dimension(format!(
                    "group `{}` df mismatch",
                    g.label
                )));
            }
        }
        Ok(())
    }
}

impl ModelSpec {
    /// Resolve this specification against a dataset, standardizing from the
    /// dataset itself.
    pub fn resolve(&self, data: &Dataset) -> Result<Design, Error> {
        self.resolve_with(data, None)
    }

    /// Resolve with an externally supplied standardization (used to evaluate
    /// held-out folds on the training-fold scale).
    pub fn resolve_with(
        &self,
        data: &Dataset,
        standardization: Option<Standardization>,
    ) -> Result<Design, Error> {
        if data.subjects.is_empty() {
            return Err(DataError::Empty.into());
        }
        let all_unclaimed = self.penalized.is_empty() && self.unpenalized.is_empty() && self.tv.is_empty();

        let mut claims: Vec<(String, Claim)> = Vec::new();
        for l in &self.penalized {
            claims.push((l.clone(), Claim::Penalized));
        }
        for l in &self.unpenalized {
            claims.push((l.clone(), Claim::Unpenalized));
        }
        for l in &self.tv {
            claims.push((l.clone(), Claim::TimeVarying));
        }
        for (i, (l, _)) in claims.iter().enumerate() {
            if claims.iter().skip(i + 1).any(|(m, _)| m == l) {
                return Err(DataError::DuplicateTerm(l.clone()).into());
            }
            if data.group_index(l).is_none() {
                return Err(DataError::UnknownColumn(l.clone()).into());
            }
        }

        // Linear groups in dataset order; time-varying columns extracted.
        let mut groups = Vec::new();
        let mut x_cols: Vec<usize> = Vec::new();
        let mut x_labels = Vec::new();
        let mut tv_cols = Vec::new();
        let mut tv_labels = Vec::new();
        for g in &data.groups {
            let claim = claims
                .iter()
                .find(|(l, _)| l == &g.label)
                .map(|(_, c)| *c)
                .or(if all_unclaimed {
                    Some(Claim::Penalized)
                } else {
                    None
                });
            match claim {
                None => {}
                Some(Claim::TimeVarying) => {
                    if g.is_factor || g.df != 1 {
                        return Err(ConfigError::Invalid(format!(
                            "time-varying term `{}` must be a metric column",
                            g.label
                        ))
                        .into());
                    }
                    tv_cols.push(g.cols.start);
                    tv_labels.push(g.label.clone());
                }
                Some(c) => {
                    let lo = x_labels.len();
                    for col in g.cols.clone() {
                        x_cols.push(col);
                        x_labels.push(data.covariate_names[col].clone());
                    }
                    groups.push(GroupInfo {
                        label: g.label.clone(),
                        cols: lo..x_labels.len(),
                        df: g.df,
                        penalized: matches!(c, Claim::Penalized),
                        is_factor: g.is_factor,
                    });
                }
            }
        }

        let t_max = match self.t_max {
            Some(t) => t,
            None => data.max_stop(),
        };
        let basis = SplineBasis::new(self.basis_size, self.degree, t_max)?;
        let penalty = if self.basis_size >= 3 {
            Some(DifferencePenalty::new(self.basis_size)?)
        } else {
            None
        };
        let rule = QuadratureRule::gauss_legendre(self.quad_order)?;

        // Standardization over episode rows of the selected linear columns.
        let p = x_cols.len();
        let standardization = match standardization {
            Some(s) => {
                if s.mean.len() != p || s.scale.len() != p {
                    return Err(ConfigError::Dimension(
                        "standardization length must match linear columns".into(),
                    )
                    .into());
                }
                s
            }
            None if self.standardize => {
                // Exposure-weighted moments: weighting each episode by its
                // length keeps the scale invariant under episode re-splitting.
                let mut total_w = 0.0;
                let mut mean = vec![0.0; p];
                for ep in &data.episodes {
                    let w = ep.stop - ep.start;
                    total_w += w;
                    for (j, &c) in x_cols.iter().enumerate() {
                        mean[j] += w * ep.x[c];
                    }
                }
                for m in &mut mean {
                    *m /= total_w;
                }
                let mut var = vec![0.0; p];
                for ep in &data.episodes {
                    let w = ep.stop - ep.start;
                    for (j, &c) in x_cols.iter().enumerate() {
                        var[j] += w * (ep.x[c] - mean[j]).powi(2);
                    }
                }
                let scale = var
                    .iter()
                    .map(|v| {
                        let sd = (v / total_w).sqrt();
                        if sd > 1e-12 {
                            sd
                        } else {
                            1.0
                        }
                    })
                    .collect();
                Standardization { mean, scale }
            }
            None => Standardization::identity(p),
        };

        // Subject-constant check for time-varying covariates.
        for (k, &c) in tv_cols.iter().enumerate() {
            for si in 0..data.subjects.len() {
                let range = data.episode_ranges[si].clone();
                let first = data.episodes[range.start].x[c];
                if data.episodes[range].iter().any(|e| e.x[c] != first) {
                    return Err(DataError::NotSubjectConstant(tv_labels[k].clone()).into());
                }
            }
        }

        let q = 1;
        let mut clusters = Vec::with_capacity(data.clusters.len());
        let mut n_events = 0;
        let mut total_exposure = 0.0;
        for cluster in &data.clusters {
            let mut subjects = Vec::with_capacity(cluster.subjects.len());
            for &si in &cluster.subjects {
                let subj = &data.subjects[si];
                let range = data.episode_ranges[si].clone();
                let eps = &data.episodes[range.clone()];
                let z: Vec<f64> = tv_cols.iter().map(|&c| eps[0].x[c]).collect();
                let mut prepared_eps = Vec::with_capacity(eps.len());
                for ep in eps {
                    if ep.stop > t_max + 1e-12 {
                        return Err(ConfigError::OutOfDomain {
                            t: ep.stop,
                            t_max,
                        }
                        .into());
                    }
                    let stop = ep.stop.min(t_max);
                    let x = DVector::from_fn(p, |j, _| {
                        (ep.x[x_cols[j]] - standardization.mean[j]) / standardization.scale[j]
                    });
                    let mut nodes = Vec::new();
                    for (lo, hi) in basis.smooth_spans(ep.start, stop) {
                        for (t, w) in rule.scaled_nodes(lo, hi) {
                            nodes.push(QuadNode {
                                t,
                                w,
                                basis: basis.evaluate(t)?,
                            });
                        }
                    }
                    prepared_eps.push(PreparedEpisode {
                        start: ep.start,
                        stop,
                        event: ep.event,
                        x,
                        nodes,
                        basis_at_stop: basis.evaluate(stop)?,
                    });
                    total_exposure += stop - ep.start;
                    n_events += ep.event as usize;
                }
                subjects.push(PreparedSubject {
                    label: subj.subject_id.clone(),
                    z,
                    u: DVector::from_element(q, 1.0),
                    episodes: prepared_eps,
                });
            }
            clusters.push(PreparedCluster {
                id: cluster.id.clone(),
                subjects,
            });
        }

        Ok(Design {
            basis,
            penalty,
            rule,
            clusters,
            groups,
            x_labels,
            tv_labels,
            frailty: self.frailty,
            q,
            standardization,
            n_subjects: data.subjects.len(),
            n_events,
            total_exposure,
            t_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Claim {
    Penalized,
    Unpenalized,
    TimeVarying,
}
