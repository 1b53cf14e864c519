//! Partial-likelihood Cox regression with the Breslow baseline, used as the
//! internal comparator for the full-likelihood estimator. Works directly on
//! counting-process episodes (start, stop, event, x) with risk sets
//! {j : start_j < t <= stop_j}, Breslow handling of ties, and a Newton
//! optimizer with step halving.
//!
//! This module is intentionally independent of the spline/quadrature
//! machinery: it touches only the raw dataset.

use crate::data::Dataset;
use crate::error::{Error, NumericError};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BreslowSettings {
    pub max_iter: usize,
    pub tol_grad: f64,
    pub step_halving_max: usize,
}

impl Default for BreslowSettings {
    fn default() -> Self {
        Self {
            max_iter: 60,
            tol_grad: 1e-8,
            step_halving_max: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BreslowFit {
    /// Coefficients on the original covariate scale.
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    /// Distinct event times, ascending.
    pub event_times: Vec<f64>,
    /// Breslow increment of the cumulative baseline hazard at each event time.
    pub increments: Vec<f64>,
    cumulative: Vec<f64>,
}

impl BreslowFit {
    /// Step-function estimate of the cumulative baseline hazard.
    pub fn cumulative_baseline(&self, t: f64) -> f64 {
        match self.event_times.partition_point(|&e| e <= t) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }

    /// Baseline hazard recovered by differencing the cumulative step
    /// function between the event times bracketing `t`; flat (zero) after
    /// the last event.
    pub fn step_hazard(&self, t: f64) -> f64 {
        let times = &self.event_times;
        if times.is_empty() {
            return 0.0;
        }
        if t < times[0] {
            return self.increments[0] / times[0];
        }
        let k = times.partition_point(|&e| e <= t);
        if k >= times.len() {
            return 0.0;
        }
        self.increments[k] / (times[k] - times[k - 1])
    }
}

struct EpisodeRow {
    start: f64,
    stop: f64,
    event: bool,
    x: DVector<f64>,
}

struct Sweep<'a> {
    rows: &'a [EpisodeRow],
    /// Distinct event times, descending while sweeping.
    event_times: Vec<f64>,
    /// Episode indices of events, grouped per distinct time.
    event_groups: Vec<Vec<usize>>,
    by_stop_desc: Vec<usize>,
    by_start_desc: Vec<usize>,
}

impl<'a> Sweep<'a> {
    fn new(rows: &'a [EpisodeRow]) -> Self {
        let mut times: Vec<f64> = rows
            .iter()
            .filter(|r| r.event)
            .map(|r| r.stop)
            .collect();
        times.sort_by(|a, b| b.partial_cmp(a).unwrap());
        times.dedup();
        let event_groups = times
            .iter()
            .map(|&t| {
                rows.iter()
                    .enumerate()
                    .filter(|(_, r)| r.event && r.stop == t)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let mut by_stop_desc: Vec<usize> = (0..rows.len()).collect();
        by_stop_desc.sort_by(|&a, &b| rows[b].stop.partial_cmp(&rows[a].stop).unwrap());
        let mut by_start_desc: Vec<usize> = (0..rows.len()).collect();
        by_start_desc.sort_by(|&a, &b| rows[b].start.partial_cmp(&rows[a].start).unwrap());
        Self {
            rows,
            event_times: times,
            event_groups,
            by_stop_desc,
            by_start_desc,
        }
    }

    /// One pass over the descending event times, maintaining running risk
    /// sums S0, S1, S2. The callback receives
    /// (event time index, tied count, sum of event x, S0, S1, S2).
    fn run<F>(&self, beta: &DVector<f64>, want_s2: bool, mut visit: F) -> Result<f64, NumericError>
    where
        F: FnMut(usize, usize, &DVector<f64>, f64, &DVector<f64>, &DMatrix<f64>),
    {
        let p = beta.len();
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        let mut add_ptr = 0;
        let mut rem_ptr = 0;
        let mut loglik = 0.0;
        for (ti, &t) in self.event_times.iter().enumerate() {
            while add_ptr < self.by_stop_desc.len() {
                let idx = self.by_stop_desc[add_ptr];
                if self.rows[idx].stop < t {
                    break;
                }
                let eta = self.rows[idx].x.dot(beta);
                if eta > 700.0 || !eta.is_finite() {
                    return Err(NumericError::NonFinite);
                }
                let w = eta.exp();
                s0 += w;
                s1.axpy(w, &self.rows[idx].x, 1.0);
                if want_s2 {
                    s2.ger(w, &self.rows[idx].x, &self.rows[idx].x, 1.0);
                }
                add_ptr += 1;
            }
            while rem_ptr < self.by_start_desc.len() {
                let idx = self.by_start_desc[rem_ptr];
                if self.rows[idx].start < t {
                    break;
                }
                let w = self.rows[idx].x.dot(beta).exp();
                s0 -= w;
                s1.axpy(-w, &self.rows[idx].x, 1.0);
                if want_s2 {
                    s2.ger(-w, &self.rows[idx].x, &self.rows[idx].x, 1.0);
                }
                rem_ptr += 1;
            }
            let group = &self.event_groups[ti];
            let mut x_sum = DVector::zeros(p);
            for &idx in group {
                x_sum += &self.rows[idx].x;
                loglik += self.rows[idx].x.dot(beta);
            }
            if s0 <= 0.0 {
                return Err(NumericError::NonFinite);
            }
            loglik -= group.len() as f64 * s0.ln();
            visit(ti, group.len(), &x_sum, s0, &s1, &s2);
        }
        Ok(loglik)
    }
}

fn rows_from_dataset(data: &Dataset) -> Vec<EpisodeRow> {
    data.episodes
        .iter()
        .map(|e| EpisodeRow {
            start: e.start,
            stop: e.stop,
            event: e.event,
            x: DVector::from_vec(e.x.clone()),
        })
        .collect()
}

/// Fit the partial likelihood by Newton-Raphson from beta = 0 and compute
/// the Breslow cumulative-baseline increments at the estimate.
pub fn fit_partial_likelihood(
    data: &Dataset,
    settings: &BreslowSettings,
) -> Result<BreslowFit, Error> {
    let rows = rows_from_dataset(data);
    let p = data.n_covariates();
    let sweep = Sweep::new(&rows);
    let mut beta = DVector::zeros(p);

    let eval = |beta: &DVector<f64>| -> Result<(f64, DVector<f64>, DMatrix<f64>), NumericError> {
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let ll = sweep.run(beta, true, |_, m, x_sum, s0, s1, s2| {
            let mean = s1 / s0;
            grad += x_sum - m as f64 * &mean;
            hess -= m as f64 * (s2 / s0 - &mean * mean.transpose());
        })?;
        Ok((ll, grad, hess))
    };

    let mut converged = false;
    let mut iterations = 0;
    let loglik;
    if p > 0 && !sweep.event_times.is_empty() {
        let (mut ll, mut grad, mut hess) = eval(&beta).map_err(Error::from)?;
        for iter in 0..settings.max_iter {
            iterations = iter + 1;
            if grad.amax() < settings.tol_grad {
                converged = true;
                break;
            }
            let mut neg_h = -&hess;
            let delta = loop {
                match neg_h.clone().cholesky() {
                    Some(c) => break c.solve(&grad),
                    None => {
                        for d in 0..p {
                            neg_h[(d, d)] += 1e-8;
                        }
                    }
                }
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=settings.step_halving_max {
                let cand = &beta + &delta * t;
                match eval(&cand) {
                    Ok((ll_new, g_new, h_new)) if ll_new >= ll - 1e-11 * (1.0 + ll.abs()) => {
                        beta = cand;
                        ll = ll_new;
                        grad = g_new;
                        hess = h_new;
                        accepted = true;
                        break;
                    }
                    _ => t *= 0.5,
                }
            }
            if !accepted {
                break;
            }
        }
        if grad.amax() < settings.tol_grad {
            converged = true;
        }
        loglik = ll;
    } else {
        converged = true;
        loglik = sweep.run(&beta, false, |_, _, _, _, _, _| {})?;
    }

    // Breslow increments at the estimate: dLambda = m_t / S0(t).
    let n_times = sweep.event_times.len();
    let mut increments_desc = vec![0.0; n_times];
    sweep.run(&beta, false, |ti, m, _, s0, _, _| {
        increments_desc[ti] = m as f64 / s0;
    })?;
    let mut event_times: Vec<f64> = sweep.event_times.clone();
    event_times.reverse();
    let mut increments = increments_desc;
    increments.reverse();
    let mut cumulative = increments.clone();
    for i in 1..cumulative.len() {
        cumulative[i] += cumulative[i - 1];
    }

    Ok(BreslowFit {
        beta,
        converged,
        iterations,
        loglik,
        event_times,
        increments,
        cumulative,
    })
}
