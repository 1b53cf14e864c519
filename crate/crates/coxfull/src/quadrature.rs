//! Gauss-Legendre quadrature for the cumulative-hazard integrals and their
//! weighted moments. Episodes are subdivided at spline knots so every
//! integrand piece is smooth; the scalar, vector, and matrix moments share
//! one set of nodes so likelihood, score, and Fisher blocks are consistent
//! discretizations of each other.

use crate::error::ConfigError;
use crate::splines::SplineBasis;
use nalgebra::{DMatrix, DVector};

/// Gauss-Legendre rule on [-1, 1]: weights sum to 2 and polynomials up to
/// degree 2*order - 1 integrate exactly.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn gauss_legendre(order: usize) -> Result<Self, ConfigError> {
        if order == 0 {
            return Err(ConfigError::BadQuadratureOrder);
        }
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Chebyshev-based initial guess, refined by Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrate `f` over [a, b].
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Scaled (time, weight) pairs for [a, b].
    pub fn scaled_nodes(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, w * half))
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    if n == 1 {
        return (x, 1.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Evaluates the linear predictor eta(s) = B(s)'alpha_0 + sum_k z_k B(s)'alpha_k + offset
/// on one episode, where `offset` collects the time-constant parts x'beta + u'b_i.
/// Also provides the stacked design Phi(s) = (B(s)', z_1 B(s)', ..., z_K B(s)')'.
pub struct EtaEvaluator<'a> {
    basis: &'a SplineBasis,
    alpha: &'a DVector<f64>,
    z: &'a [f64],
    offset: f64,
}

impl<'a> EtaEvaluator<'a> {
    pub fn new(
        basis: &'a SplineBasis,
        alpha: &'a DVector<f64>,
        z: &'a [f64],
        offset: f64,
    ) -> Result<Self, ConfigError> {
        let m = basis.len();
        if alpha.len() != m * (1 + z.len()) {
            return Err(ConfigError::Dimension(format!(
                "alpha has length {}, expected {} = (1 + {}) * {}",
                alpha.len(),
                m * (1 + z.len()),
                z.len(),
                m
            )));
        }
        Ok(Self {
            basis,
            alpha,
            z,
            offset,
        })
    }

    pub fn phi_dim(&self) -> usize {
        self.basis.len() * (1 + self.z.len())
    }

    pub fn basis(&self) -> &SplineBasis {
        self.basis
    }

    /// Phi(t) stacked over the baseline block and the time-varying blocks.
    pub fn phi(&self, t: f64) -> Result<DVector<f64>, ConfigError> {
        let m = self.basis.len();
        let b = self.basis.evaluate(t)?;
        let mut phi = DVector::zeros(self.phi_dim());
        phi.rows_mut(0, m).copy_from(&b);
        for (k, &zk) in self.z.iter().enumerate() {
            for j in 0..m {
                phi[(1 + k) * m + j] = zk * b[j];
            }
        }
        Ok(phi)
    }

    pub fn eta(&self, t: f64) -> Result<f64, ConfigError> {
        let m = self.basis.len();
        let b = self.basis.evaluate(t)?;
        let mut v = self.offset;
        for j in 0..m {
            let mut coef = self.alpha[j];
            for (k, &zk) in self.z.iter().enumerate() {
                coef += zk * self.alpha[(1 + k) * m + j];
            }
            v += coef * b[j];
        }
        Ok(v)
    }
}

/// Scalar, vector, and matrix moments of exp(eta) against Phi over a set of
/// episodes: (integral exp(eta), integral exp(eta) Phi, integral exp(eta) Phi Phi').
pub struct Moments {
    pub scalar: f64,
    pub vector: DVector<f64>,
    pub matrix: DMatrix<f64>,
}

/// Integral of exp(eta(s)) ds over the given episodes, each subdivided at the
/// spline knots before applying the rule.
pub fn cumulative_hazard(
    eta: &EtaEvaluator<'_>,
    episodes: &[(f64, f64)],
    rule: &QuadratureRule,
) -> Result<f64, ConfigError> {
    if episodes.is_empty() {
        return Err(ConfigError::NoEpisodes);
    }
    let mut total = 0.0;
    for &(a, b) in episodes {
        for (lo, hi) in eta.basis().smooth_spans(a, b) {
            for (t, w) in rule.scaled_nodes(lo, hi) {
                total += w * eta.eta(t)?.exp();
            }
        }
    }
    Ok(total)
}

/// All three moments computed in one pass over the shared quadrature nodes.
pub fn weighted_moments(
    eta: &EtaEvaluator<'_>,
    episodes: &[(f64, f64)],
    rule: &QuadratureRule,
) -> Result<Moments, ConfigError> {
    if episodes.is_empty() {
        return Err(ConfigError::NoEpisodes);
    }
    let dim = eta.phi_dim();
    let mut scalar = 0.0;
    let mut vector = DVector::zeros(dim);
    let mut matrix = DMatrix::zeros(dim, dim);
    for &(a, b) in episodes {
        for (lo, hi) in eta.basis().smooth_spans(a, b) {
            for (t, w) in rule.scaled_nodes(lo, hi) {
                let phi = eta.phi(t)?;
                let we = w * eta.eta(t)?.exp();
                scalar += we;
                vector.axpy(we, &phi, 1.0);
                matrix.syger(we, &phi, &phi, 1.0);
            }
        }
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..dim {
        for j in (i + 1)..dim {
            matrix[(i, j)] = matrix[(j, i)];
        }
    }
    Ok(Moments {
        scalar,
        vector,
        matrix,
    })
}
