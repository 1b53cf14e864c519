//! Penalized full log-likelihood, its score and Fisher blocks, and the two
//! penalty matrices.
//!
//! With parameter layout (beta | alpha | b), the objective is
//!
//!   l_pen = sum_ij [ d_ij eta_ij(t_ij) - integral_0^t_ij exp(eta_ij(s)) ds ]
//!           - 1/2 b' (I kron Q^{-1}) b
//!           - 1/2 sum_k zeta_k alpha_k' (D'D) alpha_k
//!           - xi sum_k w_k sqrt(df_k) sqrt(|beta_k|^2 + c)
//!
//! where the last term is the differentiable local approximation of the
//! (group) lasso penalty. Score and Fisher are exact first and second
//! derivatives of this objective at the current iterate, evaluated with the
//! same quadrature nodes as the objective itself, so finite-difference
//! consistency holds to quadrature precision. The exact lasso curvature is
//! the diagonal matrix A plus its rank-one correction; it coincides with A
//! at beta = 0.

use crate::error::{ConfigError, NumericError};
use crate::model::{Design, ParameterState, PenaltyConfig};
use crate::quadrature::EtaEvaluator;
use crate::splines::DifferencePenalty;
use nalgebra::{DMatrix, DVector};
use std::ops::Range;

/// Linear predictors beyond this value abort the evaluation: exp would
/// overflow well before f64 limits become meaningful.
const ETA_OVERFLOW: f64 = 700.0;

/// Hessian of the penalized log-likelihood in block form. `tt` is the
/// (beta, alpha) square block; `tb`/`bb` hold one block per cluster, the
/// cross-cluster frailty blocks being structurally zero and never stored.
/// The matrix is negative definite; `-F` is the penalized information.
#[derive(Debug, Clone)]
pub struct FisherBlocks {
    pub tt: DMatrix<f64>,
    pub tb: Vec<DMatrix<f64>>,
    pub bb: Vec<DMatrix<f64>>,
    pub q: usize,
}

impl FisherBlocks {
    /// Materialize the full dense Hessian, zeros in cross-cluster blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let t = self.tt.nrows();
        let n = self.bb.len();
        let dim = t + n * self.q;
        let mut full = DMatrix::zeros(dim, dim);
        full.view_mut((0, 0), (t, t)).copy_from(&self.tt);
        for i in 0..n {
            let off = t + i * self.q;
            full.view_mut((0, off), (t, self.q)).copy_from(&self.tb[i]);
            full.view_mut((off, 0), (self.q, t))
                .copy_from(&self.tb[i].transpose());
            full.view_mut((off, off), (self.q, self.q))
                .copy_from(&self.bb[i]);
        }
        full
    }
}

fn group_ranges(df: &[usize]) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(df.len());
    let mut lo = 0;
    for &d in df {
        out.push(lo..lo + d);
        lo += d;
    }
    out
}

/// Value of the approximated lasso penalty
/// xi sum_k w_k sqrt(df_k) sqrt(|beta_k|^2 + c).
pub fn lasso_penalty_value(beta: &DVector<f64>, pen: &PenaltyConfig) -> f64 {
    if pen.xi == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (k, range) in group_ranges(&pen.df).into_iter().enumerate() {
        if pen.weights[k] == 0.0 {
            continue;
        }
        let s: f64 = beta.rows(range.start, range.len()).norm_squared();
        total += pen.weights[k] * (pen.df[k] as f64).sqrt() * (s + pen.c).sqrt();
    }
    pen.xi * total
}

/// Diagonal entries of the penalty matrix A: for group k every coordinate
/// carries xi * w_k * sqrt(df_k) * (|beta_k|^2 + c)^{-1/2}, so that
/// A . beta is the exact gradient of the approximated penalty.
pub fn lasso_matrix(beta: &DVector<f64>, pen: &PenaltyConfig) -> DVector<f64> {
    let mut diag = DVector::zeros(beta.len());
    if pen.xi == 0.0 {
        return diag;
    }
    for (k, range) in group_ranges(&pen.df).into_iter().enumerate() {
        if pen.weights[k] == 0.0 {
            continue;
        }
        let s: f64 = beta.rows(range.start, range.len()).norm_squared();
        let a = pen.xi * pen.weights[k] * (pen.df[k] as f64).sqrt() / (s + pen.c).sqrt();
        for j in range {
            diag[j] = a;
        }
    }
    diag
}

/// Gradient of the approximated lasso penalty: A(beta) . beta.
pub fn lasso_gradient(beta: &DVector<f64>, pen: &PenaltyConfig) -> DVector<f64> {
    let diag = lasso_matrix(beta, pen);
    DVector::from_fn(beta.len(), |j, _| diag[j] * beta[j])
}

/// Exact Hessian of the approximated lasso penalty: block-diagonal with
/// blocks A_k - xi w_k sqrt(df_k) (|beta_k|^2 + c)^{-3/2} beta_k beta_k'.
pub fn lasso_curvature(beta: &DVector<f64>, pen: &PenaltyConfig) -> DMatrix<f64> {
    let p = beta.len();
    let mut h = DMatrix::zeros(p, p);
    if pen.xi == 0.0 {
        return h;
    }
    for (k, range) in group_ranges(&pen.df).into_iter().enumerate() {
        if pen.weights[k] == 0.0 {
            continue;
        }
        let bk = beta.rows(range.start, range.len()).into_owned();
        let s = bk.norm_squared();
        let scale = pen.xi * pen.weights[k] * (pen.df[k] as f64).sqrt();
        let inv = (s + pen.c).sqrt().recip();
        let inv3 = inv * inv * inv;
        for (ri, i) in range.clone().enumerate() {
            for (rj, j) in range.clone().enumerate() {
                let mut v = -scale * inv3 * bk[ri] * bk[rj];
                if i == j {
                    v += scale * inv;
                }
                h[(i, j)] += v;
            }
        }
    }
    h
}

/// Block-diagonal smoothness penalty matrix A_zeta with block k equal to
/// zeta_k (D'D) for the baseline and each time-varying effect.
pub fn smooth_matrix(
    zeta: &DVector<f64>,
    penalty: &DifferencePenalty,
    n_smooth: usize,
) -> Result<DMatrix<f64>, ConfigError> {
    if zeta.len() != n_smooth {
        return Err(ConfigError::Dimension(format!(
            "zeta has length {}, expected {}",
            zeta.len(),
            n_smooth
        )));
    }
    if zeta.iter().any(|&z| z < 0.0 || !z.is_finite()) {
        return Err(ConfigError::NegativeZeta);
    }
    let m = penalty.size();
    let mut a = DMatrix::zeros(n_smooth * m, n_smooth * m);
    for k in 0..n_smooth {
        let gram = penalty.gram();
        for i in 0..m {
            for j in 0..m {
                a[(k * m + i, k * m + j)] = zeta[k] * gram[(i, j)];
            }
        }
    }
    Ok(a)
}

enum Want {
    Value,
    Score,
    ScoreFisher,
}

pub struct Assembled {
    pub value: f64,
    pub score: Option<DVector<f64>>,
    pub fisher: Option<FisherBlocks>,
}

/// Penalized log-likelihood at `state`.
pub fn penalized_loglik(
    design: &Design,
    state: &ParameterState,
    pen: &PenaltyConfig,
) -> Result<f64, NumericError> {
    Ok(assemble(design, state, pen, Want::Value)?.value)
}

/// Penalized score with blocks (s_beta, s_alpha, s_b1..n) in layout order.
pub fn score(
    design: &Design,
    state: &ParameterState,
    pen: &PenaltyConfig,
) -> Result<DVector<f64>, NumericError> {
    Ok(assemble(design, state, pen, Want::Score)?.score.unwrap())
}

/// Penalized Fisher blocks (the exact Hessian of the objective).
pub fn fisher(
    design: &Design,
    state: &ParameterState,
    pen: &PenaltyConfig,
) -> Result<FisherBlocks, NumericError> {
    Ok(assemble(design, state, pen, Want::ScoreFisher)?
        .fisher
        .unwrap())
}

/// Objective, score, and Fisher in one pass over the cached quadrature nodes.
pub fn assemble_all(
    design: &Design,
    state: &ParameterState,
    pen: &PenaltyConfig,
) -> Result<(f64, DVector<f64>, FisherBlocks), NumericError> {
    let a = assemble(design, state, pen, Want::ScoreFisher)?;
    Ok((a.value, a.score.unwrap(), a.fisher.unwrap()))
}

fn assemble(
    design: &Design,
    state: &ParameterState,
    pen: &PenaltyConfig,
    want: Want,
) -> Result<Assembled, NumericError> {
    let p = design.p();
    let m = design.m();
    let n_smooth = design.n_smooth();
    let a_dim = design.alpha_dim();
    let t_dim = p + a_dim;
    let q = design.q;
    let (want_score, want_fisher) = match want {
        Want::Value => (false, false),
        Want::Score => (true, false),
        Want::ScoreFisher => (true, true),
    };

    let q_inv = state.frailty_cov(design).map(|f| f.inverse());

    let mut value = 0.0;
    let mut sc = if want_score {
        Some(DVector::zeros(design.dim()))
    } else {
        None
    };
    let mut tt = if want_fisher {
        Some(DMatrix::zeros(t_dim, t_dim))
    } else {
        None
    };
    let mut tb: Vec<DMatrix<f64>> = Vec::new();
    let mut bb: Vec<DMatrix<f64>> = Vec::new();

    let mut combined = DVector::zeros(m);
    let mut sb = DVector::zeros(m);
    let mut sbb = DMatrix::zeros(m, m);

    for (ci, cluster) in design.clusters.iter().enumerate() {
        let b_i = if design.frailty {
            Some(state.b.rows(ci * q, q).into_owned())
        } else {
            None
        };
        let mut tb_i = if want_fisher && design.frailty {
            Some(DMatrix::zeros(t_dim, q))
        } else {
            None
        };
        let mut bb_i = if want_fisher && design.frailty {
            Some(DMatrix::zeros(q, q))
        } else {
            None
        };

        for subj in &cluster.subjects {
            // Effective spline coefficients for this subject:
            // alpha_0 + sum_k z_k alpha_k.
            combined.copy_from(&state.alpha.rows(0, m));
            for (k, &zk) in subj.z.iter().enumerate() {
                combined.axpy(zk, &state.alpha.rows((1 + k) * m, m).into_owned(), 1.0);
            }
            let ub = match &b_i {
                Some(b) => subj.u.dot(b),
                None => 0.0,
            };

            for ep in &subj.episodes {
                let xbeta = ep.x.dot(&state.beta);
                let offset = xbeta + ub;
                let mut e0 = 0.0;
                if want_score {
                    sb.fill(0.0);
                }
                if want_fisher {
                    sbb.fill(0.0);
                }
                for node in &ep.nodes {
                    let eta = node.basis.dot(&combined) + offset;
                    if eta > ETA_OVERFLOW || !eta.is_finite() {
                        return Err(NumericError::Overflow(subj.label.clone()));
                    }
                    let e = node.w * eta.exp();
                    e0 += e;
                    if want_score {
                        sb.axpy(e, &node.basis, 1.0);
                    }
                    if want_fisher {
                        sbb.ger(e, &node.basis, &node.basis, 1.0);
                    }
                }
                let d = ep.event as u8 as f64;
                if ep.event {
                    let eta_stop = ep.basis_at_stop.dot(&combined) + offset;
                    if eta_stop > ETA_OVERFLOW || !eta_stop.is_finite() {
                        return Err(NumericError::Overflow(subj.label.clone()));
                    }
                    value += eta_stop;
                }
                value -= e0;

                if let Some(s) = sc.as_mut() {
                    s.rows_mut(0, p).axpy(d - e0, &ep.x, 1.0);
                    for k in 0..n_smooth {
                        let zk = if k == 0 { 1.0 } else { subj.z[k - 1] };
                        let mut block = s.rows_mut(p + k * m, m);
                        if ep.event {
                            block.axpy(d * zk, &ep.basis_at_stop, 1.0);
                        }
                        block.axpy(-zk, &sb, 1.0);
                    }
                    if design.frailty {
                        s.rows_mut(t_dim + ci * q, q).axpy(d - e0, &subj.u, 1.0);
                    }
                }

                if let Some(tt) = tt.as_mut() {
                    // beta-beta block.
                    tt.view_mut((0, 0), (p, p)).ger(-e0, &ep.x, &ep.x, 1.0);
                    // beta-alpha rectangles and alpha-alpha blocks.
                    for k in 0..n_smooth {
                        let zk = if k == 0 { 1.0 } else { subj.z[k - 1] };
                        tt.view_mut((0, p + k * m), (p, m))
                            .ger(-zk, &ep.x, &sb, 1.0);
                        for l in 0..n_smooth {
                            let zl = if l == 0 { 1.0 } else { subj.z[l - 1] };
                            let w = -zk * zl;
                            let mut block = tt.view_mut((p + k * m, p + l * m), (m, m));
                            for i in 0..m {
                                for j in 0..m {
                                    block[(i, j)] += w * sbb[(i, j)];
                                }
                            }
                        }
                    }
                    if design.frailty {
                        let tb_i = tb_i.as_mut().unwrap();
                        tb_i.view_mut((0, 0), (p, q)).ger(-e0, &ep.x, &subj.u, 1.0);
                        for k in 0..n_smooth {
                            let zk = if k == 0 { 1.0 } else { subj.z[k - 1] };
                            tb_i.view_mut((p + k * m, 0), (m, q))
                                .ger(-zk, &sb, &subj.u, 1.0);
                        }
                        bb_i.as_mut().unwrap().ger(-e0, &subj.u, &subj.u, 1.0);
                    }
                }
            }
        }

        if design.frailty {
            let b = b_i.as_ref().unwrap();
            let q_inv = q_inv.as_ref().unwrap();
            value -= 0.5 * (q_inv * b).dot(b);
            if let Some(s) = sc.as_mut() {
                s.rows_mut(t_dim + ci * q, q).axpy(-1.0, &(q_inv * b), 1.0);
            }
            if want_fisher {
                let mut bbm = bb_i.take().unwrap();
                bbm -= q_inv;
                bb.push(bbm);
                tb.push(tb_i.take().unwrap());
            }
        }
    }

    // Smoothness penalty on every spline block.
    if let Some(penalty) = &design.penalty {
        for k in 0..n_smooth {
            let ak = state.alpha.rows(k * m, m).into_owned();
            let grad = penalty.gradient_half(&ak);
            let z = state.zeta[k];
            value -= 0.5 * z * grad.dot(&ak);
            if let Some(s) = sc.as_mut() {
                s.rows_mut(p + k * m, m).axpy(-z, &grad, 1.0);
            }
            if let Some(tt) = tt.as_mut() {
                let gram = penalty.gram();
                for i in 0..m {
                    for j in 0..m {
                        tt[(p + k * m + i, p + k * m + j)] -= z * gram[(i, j)];
                    }
                }
            }
        }
    }

    // Lasso penalty (plus optional ridge) on the linear effects.
    value -= lasso_penalty_value(&state.beta, pen);
    if pen.ridge > 0.0 {
        value -= 0.5 * pen.ridge * state.beta.norm_squared();
    }
    if let Some(s) = sc.as_mut() {
        let g = lasso_gradient(&state.beta, pen);
        s.rows_mut(0, p).axpy(-1.0, &g, 1.0);
        if pen.ridge > 0.0 {
            let beta = state.beta.clone();
            s.rows_mut(0, p).axpy(-pen.ridge, &beta, 1.0);
        }
    }
    if let Some(tt) = tt.as_mut() {
        let h = lasso_curvature(&state.beta, pen);
        for i in 0..p {
            for j in 0..p {
                tt[(i, j)] -= h[(i, j)];
            }
            if pen.ridge > 0.0 {
                tt[(i, i)] -= pen.ridge;
            }
        }
        // Mirror the beta-alpha rectangle into alpha-beta.
        for i in 0..p {
            for j in p..t_dim {
                tt[(j, i)] = tt[(i, j)];
            }
        }
    }

    if !value.is_finite() {
        return Err(NumericError::NonFinite);
    }

    Ok(Assembled {
        value,
        score: sc,
        fisher: tt.map(|tt| FisherBlocks { tt, tb, bb, q }),
    })
}

/// Eta evaluator for one episode of one subject, for use with the
/// quadrature operations.
pub fn eta_for_episode<'a>(
    design: &'a Design,
    state: &'a ParameterState,
    cluster: usize,
    subject: usize,
    episode: usize,
) -> Result<EtaEvaluator<'a>, ConfigError> {
    let subj = &design.clusters[cluster].subjects[subject];
    let ep = &subj.episodes[episode];
    let ub = if design.frailty {
        subj.u
            .dot(&state.b.rows(cluster * design.q, design.q).into_owned())
    } else {
        0.0
    };
    EtaEvaluator::new(
        &design.basis,
        &state.alpha,
        &subj.z,
        ep.x.dot(&state.beta) + ub,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset_from_str, Schema};
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_baseline_design(csv: &str, frailty: bool) -> Design {
        let data = load_dataset_from_str(csv, &Schema::default()).unwrap();
        ModelSpec {
            basis_size: 1,
            degree: 0,
            frailty,
            ..Default::default()
        }
        .resolve(&data)
        .unwrap()
    }

    #[test]
    fn exponential_model_loglik() {
        // One subject, event at t = 1, constant baseline alpha0, no covariates:
        // l = alpha0 - exp(alpha0).
        let csv = "id,cluster,start,stop,event\n1,1,0,1,1\n";
        let design = constant_baseline_design(csv, false);
        let pen = PenaltyConfig::unpenalized(&design);
        for alpha0 in [-0.7, 0.0, 0.4] {
            let mut state = ParameterState::zeros(&design);
            state.alpha[0] = alpha0;
            let l = penalized_loglik(&design, &state, &pen).unwrap();
            assert_abs_diff_eq!(l, alpha0 - alpha0.exp(), epsilon = 1e-12);
        }
        let state = ParameterState::zeros(&design);
        assert_abs_diff_eq!(
            penalized_loglik(&design, &state, &pen).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn score_stationary_at_constant_hazard_mle() {
        let csv = "id,cluster,start,stop,event\n\
                   1,1,0,2,1\n2,1,0,3,0\n3,1,0,1.5,1\n";
        let design = constant_baseline_design(csv, false);
        let pen = PenaltyConfig::unpenalized(&design);
        let mut state = ParameterState::zeros(&design);
        state.alpha[0] = (2.0f64 / 6.5).ln();
        let s = score(&design, &state, &pen).unwrap();
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lasso_gradient_vanishes_at_zero_beta() {
        let csv = "id,cluster,start,stop,event,x1,x2\n\
                   1,1,0,2,1,0.5,0.2\n2,1,0,3,0,0.1,0.9\n3,1,0,1,1,0.8,0.4\n";
        let data = load_dataset_from_str(csv, &Schema::default()).unwrap();
        let design = ModelSpec::default().resolve(&data).unwrap();
        let state = ParameterState::zeros(&design);
        let pen0 = PenaltyConfig::unpenalized(&design);
        let pen1 = PenaltyConfig::uniform(&design, 3.0);
        let s0 = score(&design, &state, &pen0).unwrap();
        let s1 = score(&design, &state, &pen1).unwrap();
        assert_abs_diff_eq!((s0 - s1).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lasso_matrix_examples() {
        let mk = |df: Vec<usize>, xi: f64, c: f64| PenaltyConfig {
            xi,
            weights: vec![1.0; df.len()],
            df,
            c,
            ridge: 0.0,
        };
        // xi=1, w=1, beta=0, c=1e-4 -> diagonal entry 100.
        let pen = mk(vec![1], 1.0, 1e-4);
        let a = lasso_matrix(&DVector::zeros(1), &pen);
        assert_abs_diff_eq!(a[0], 100.0, epsilon = 1e-9);
        // xi=0 -> zero matrix.
        let pen = mk(vec![1, 1], 0.0, 1e-5);
        let a = lasso_matrix(&DVector::from_vec(vec![0.3, -0.2]), &pen);
        assert_eq!(a, DVector::zeros(2));
        // Group df=2, beta=(0.3,0.4), w=1, xi=2, c -> 0: entries 2*sqrt(2)*2.
        let pen = mk(vec![2], 2.0, 1e-12);
        let a = lasso_matrix(&DVector::from_vec(vec![0.3, 0.4]), &pen);
        let expect = 2.0 * 2.0f64.sqrt() * 2.0;
        assert_abs_diff_eq!(a[0], expect, epsilon = 1e-6);
        assert_abs_diff_eq!(a[1], expect, epsilon = 1e-6);
    }

    #[test]
    fn lasso_gradient_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pen = PenaltyConfig {
            xi: 1.7,
            weights: vec![0.8, 1.3, 0.0],
            df: vec![2, 1, 1],
            c: 1e-5,
            ridge: 0.0,
        };
        let beta = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
        let a = lasso_matrix(&beta, &pen);
        let g = lasso_gradient(&beta, &pen);
        for j in 0..4 {
            assert_abs_diff_eq!(g[j], a[j] * beta[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn smooth_matrix_shapes() {
        let p = DifferencePenalty::new(6).unwrap();
        let a = smooth_matrix(&DVector::from_vec(vec![2.5]), &p, 1).unwrap();
        assert_eq!(a.shape(), (6, 6));
        assert_abs_diff_eq!(a[(0, 0)], 2.5 * p.gram()[(0, 0)], epsilon = 1e-14);

        let a = smooth_matrix(&DVector::zeros(2), &p, 2).unwrap();
        assert_eq!(a.shape(), (12, 12));
        assert_eq!(a.amax(), 0.0);

        let a = smooth_matrix(&DVector::from_vec(vec![1.0, 3.0]), &p, 2).unwrap();
        for i in 0..6 {
            for j in 6..12 {
                assert_eq!(a[(i, j)], 0.0);
                assert_eq!(a[(j, i)], 0.0);
            }
        }
        assert_abs_diff_eq!(a[(7, 7)], 3.0 * p.gram()[(1, 1)], epsilon = 1e-14);

        assert!(matches!(
            smooth_matrix(&DVector::from_vec(vec![-1.0]), &p, 1),
            Err(ConfigError::NegativeZeta)
        ));
    }

    fn small_mixed_design() -> Design {
        let csv = "id,cluster,start,stop,event,x1,x2,zc\n\
                   1,a,0,1.1,0,0.4,0.2,0.3\n\
                   1,a,1.1,2.4,1,0.9,0.2,0.3\n\
                   2,a,0,3.1,0,0.1,0.8,0.6\n\
                   3,b,0,1.9,1,0.7,0.5,0.1\n\
                   4,b,0,2.8,1,0.2,0.9,0.9\n\
                   5,c,0,2.2,0,0.6,0.1,0.5\n";
        let data = load_dataset_from_str(csv, &Schema::default()).unwrap();
        ModelSpec {
            penalized: vec!["x1".into(), "x2".into()],
            tv: vec!["zc".into()],
            frailty: true,
            ..Default::default()
        }
        .resolve(&data)
        .unwrap()
    }

    fn random_state(design: &Design, rng: &mut ChaCha8Rng) -> ParameterState {
        let mut state = ParameterState::zeros(design);
        state.beta = DVector::from_fn(design.p(), |_, _| rng.random::<f64>() - 0.5);
        state.alpha = DVector::from_fn(design.alpha_dim(), |_, _| 0.6 * rng.random::<f64>() - 0.3);
        state.b = DVector::from_fn(design.b_dim(), |_, _| 0.4 * rng.random::<f64>() - 0.2);
        state.theta = crate::model::FrailtyCovariance::diagonal(design.q, 0.3)
            .theta()
            .clone();
        state.zeta = DVector::from_fn(design.n_smooth(), |_, _| 0.5 + rng.random::<f64>());
        state
    }

    #[test]
    fn score_matches_finite_differences() {
        let design = small_mixed_design();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pen = PenaltyConfig {
            xi: 0.8,
            weights: vec![1.2, 0.7],
            df: vec![1, 1],
            c: 1e-5,
            ridge: 0.0,
        };
        let state = random_state(&design, &mut rng);
        let s = score(&design, &state, &pen).unwrap();
        let flat = state.flat();
        for j in 0..design.dim() {
            let h = 1e-5 * flat[j].abs().max(1.0);
            let mut up = state.clone();
            let mut dn = state.clone();
            let mut v = flat.clone();
            v[j] += h;
            up.set_flat(&v);
            v[j] -= 2.0 * h;
            dn.set_flat(&v);
            let fd = (penalized_loglik(&design, &up, &pen).unwrap()
                - penalized_loglik(&design, &dn, &pen).unwrap())
                / (2.0 * h);
            let rel = (s[j] - fd).abs() / s[j].abs().max(1.0);
            assert!(rel < 1e-6, "coord {j}: score {} vs fd {fd}", s[j]);
        }
    }

    #[test]
    fn fisher_matches_score_jacobian() {
        let design = small_mixed_design();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pen = PenaltyConfig {
            xi: 1.1,
            weights: vec![0.9, 1.4],
            df: vec![1, 1],
            c: 1e-5,
            ridge: 0.0,
        };
        let state = random_state(&design, &mut rng);
        let f = fisher(&design, &state, &pen).unwrap().to_dense();
        let flat = state.flat();
        for j in 0..design.dim() {
            let h = 1e-5 * flat[j].abs().max(1.0);
            let mut up = state.clone();
            let mut dn = state.clone();
            let mut v = flat.clone();
            v[j] += h;
            up.set_flat(&v);
            v[j] -= 2.0 * h;
            dn.set_flat(&v);
            let su = score(&design, &up, &pen).unwrap();
            let sd = score(&design, &dn, &pen).unwrap();
            for i in 0..design.dim() {
                let fd = (su[i] - sd[i]) / (2.0 * h);
                let rel = (f[(i, j)] - fd).abs() / f[(i, j)].abs().max(1.0);
                assert!(rel < 1e-4, "({i},{j}): fisher {} vs fd {fd}", f[(i, j)]);
            }
        }
    }

    #[test]
    fn fisher_is_symmetric() {
        let design = small_mixed_design();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pen = PenaltyConfig::uniform(&design, 0.6);
        let state = random_state(&design, &mut rng);
        let f = fisher(&design, &state, &pen).unwrap().to_dense();
        for i in 0..f.nrows() {
            for j in 0..f.ncols() {
                assert!((f[(i, j)] - f[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exponential_fisher_scalar() {
        // One subject, t = 1, alpha0 = 0, M = 1: F_aa = -1.
        let csv = "id,cluster,start,stop,event\n1,1,0,1,1\n";
        let design = constant_baseline_design(csv, false);
        let pen = PenaltyConfig::unpenalized(&design);
        let state = ParameterState::zeros(&design);
        let f = fisher(&design, &state, &pen).unwrap();
        assert_abs_diff_eq!(f.tt[(0, 0)], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn penalty_monotone_in_xi() {
        let design = small_mixed_design();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = random_state(&design, &mut rng);
        let mut prev = f64::INFINITY;
        for xi in [0.0, 0.5, 1.0, 5.0, 50.0] {
            let pen = PenaltyConfig::uniform(&design, xi);
            let l = penalized_loglik(&design, &state, &pen).unwrap();
            assert!(l <= prev + 1e-12);
            prev = l;
        }
    }

    #[test]
    fn approximation_error_bounded_by_sqrt_c() {
        let c = 1e-5f64;
        for &b in &[0.0, 1e-4, 0.01, 0.5, -2.0, 100.0] {
            let approx = (b * b + c).sqrt();
            assert!((approx - b.abs()).abs() <= c.sqrt() + 1e-15);
        }
    }

    #[test]
    fn episode_resplit_invariance() {
        // Inserting an artificial change point with the same covariate values
        // must leave the objective unchanged.
        let base = "id,cluster,start,stop,event,x1\n\
                    1,a,0,2.4,1,0.4\n\
                    2,a,0,3.1,0,0.1\n\
                    3,b,0,1.9,1,0.7\n";
        let split = "id,cluster,start,stop,event,x1\n\
                     1,a,0,1.3,0,0.4\n\
                     1,a,1.3,2.4,1,0.4\n\
                     2,a,0,3.1,0,0.1\n\
                     3,b,0,0.4,0,0.7\n\
                     3,b,0.4,1.9,1,0.7\n";
        let d1 = load_dataset_from_str(base, &Schema::default()).unwrap();
        let d2 = load_dataset_from_str(split, &Schema::default()).unwrap();
        let spec = ModelSpec {
            frailty: true,
            ..Default::default()
        };
        let g1 = spec.resolve(&d1).unwrap();
        let g2 = spec.resolve(&d2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let state = random_state(&g1, &mut rng);
        let pen1 = PenaltyConfig::uniform(&g1, 0.7);
        let pen2 = PenaltyConfig::uniform(&g2, 0.7);
        let l1 = penalized_loglik(&g1, &state, &pen1).unwrap();
        let l2 = penalized_loglik(&g2, &state, &pen2).unwrap();
        assert!(
            ((l1 - l2) / l1.abs().max(1.0)).abs() < 1e-10,
            "{l1} vs {l2}"
        );
    }

    #[test]
    fn overflow_reports_subject() {
        let csv = "id,cluster,start,stop,event\nbad_subject,1,0,1,1\n";
        let design = constant_baseline_design(csv, false);
        let pen = PenaltyConfig::unpenalized(&design);
        let mut state = ParameterState::zeros(&design);
        state.alpha[0] = 800.0;
        match penalized_loglik(&design, &state, &pen) {
            Err(NumericError::Overflow(id)) => assert_eq!(id, "bad_subject"),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn cached_integral_matches_quadrature_op() {
        let design = small_mixed_design();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let state = random_state(&design, &mut rng);
        // Cached-node integral of episode (0,0,0) vs the generic operation.
        let ep = &design.clusters[0].subjects[0].episodes[0];
        let mut combined = state.alpha.rows(0, design.m()).into_owned();
        for (k, &zk) in design.clusters[0].subjects[0].z.iter().enumerate() {
            combined.axpy(
                zk,
                &state.alpha.rows((1 + k) * design.m(), design.m()).into_owned(),
                1.0,
            );
        }
        let offset = ep.x.dot(&state.beta) + state.b[0];
        let mut cached = 0.0;
        for node in &ep.nodes {
            cached += node.w * (node.basis.dot(&combined) + offset).exp();
        }
        let eta = eta_for_episode(&design, &state, 0, 0, 0).unwrap();
        let generic =
            crate::quadrature::cumulative_hazard(&eta, &[(ep.start, ep.stop)], &design.rule)
                .unwrap();
        assert_abs_diff_eq!(cached, generic, epsilon = 1e-12);
    }
}
