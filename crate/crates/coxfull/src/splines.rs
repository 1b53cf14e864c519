//! B-spline bases on [0, t_max] for the log baseline hazard and time-varying
//! effects, together with the second-order difference penalty.

use crate::error::ConfigError;
use nalgebra::{DMatrix, DVector};

/// Clamped B-spline basis with `m` functions of degree `degree` and
/// equidistant interior knots on `[0, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    m: usize,
    degree: usize,
    t_max: f64,
    /// Full knot vector of length m + degree + 1 with boundary knots
    /// repeated degree + 1 times.
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(m: usize, degree: usize, t_max: f64) -> Result<Self, ConfigError> {
        if m < degree + 1 {
            return Err(ConfigError::BasisTooSmall { m, degree });
        }
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(ConfigError::BadDomain(t_max));
        }
        let n_interior = m - degree - 1;
        let mut knots = Vec::with_capacity(m + degree + 1);
        for _ in 0..=degree {
            knots.push(0.0);
        }
        for i in 1..=n_interior {
            knots.push(t_max * i as f64 / (n_interior + 1) as f64);
        }
        for _ in 0..=degree {
            knots.push(t_max);
        }
        Ok(Self {
            m,
            degree,
            t_max,
            knots,
        })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Interior knots (strictly inside the domain), where the integrand
    /// exp(spline) loses smoothness.
    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.m]
    }

    fn span_of(&self, t: f64) -> usize {
        // Largest index k in [degree, m-1] with knots[k] <= t < knots[k+1];
        // t == t_max maps to the last non-empty span.
        let d = self.degree;
        if t >= self.t_max {
            return self.m - 1;
        }
        let mut lo = d;
        let mut hi = self.m - 1;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Evaluate all m basis functions at `t`. Values are nonnegative, sum to
    /// one, and at most degree + 1 of them are nonzero.
    pub fn evaluate(&self, t: f64) -> Result<DVector<f64>, ConfigError> {
        let mut out = DVector::zeros(self.m);
        self.evaluate_into(t, &mut out)?;
        Ok(out)
    }

    /// Evaluate into a preallocated vector of length m.
    pub fn evaluate_into(&self, t: f64, out: &mut DVector<f64>) -> Result<(), ConfigError> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(ConfigError::OutOfDomain {
                t,
                t_max: self.t_max,
            });
        }
        debug_assert_eq!(out.len(), self.m);
        out.fill(0.0);
        let d = self.degree;
        let span = self.span_of(t);
        // Cox-de Boor triangle for the d+1 nonzero functions on the span.
        let mut vals = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        vals[0] = 1.0;
        for j in 1..=d {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        for (r, &v) in vals.iter().enumerate() {
            out[span - d + r] = v;
        }
        Ok(())
    }

    /// Split `[a, b]` at the interior knots so each returned piece is free of
    /// knots in its interior. Used to keep quadrature on smooth segments.
    pub fn smooth_spans(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let mut bounds = vec![a];
        for &k in self.interior_knots() {
            if k > a && k < b {
                bounds.push(k);
            }
        }
        bounds.push(b);
        bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Second-order difference penalty for m spline coefficients: the
/// (m-2) x m matrix `d` maps coefficients to second differences and
/// `gram = d' d` is the m x m quadratic-form matrix of rank m-2.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferencePenalty {
    d: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl DifferencePenalty {
    pub fn new(m: usize) -> Result<Self, ConfigError> {
        if m < 3 {
            return Err(ConfigError::PenaltyTooSmall(m));
        }
        let mut d = DMatrix::zeros(m - 2, m);
        for r in 0..m - 2 {
            d[(r, r)] = 1.0;
            d[(r, r + 1)] = -2.0;
            d[(r, r + 2)] = 1.0;
        }
        let gram = d.transpose() * &d;
        Ok(Self { d, gram })
    }

    pub fn order(&self) -> usize {
        2
    }

    pub fn size(&self) -> usize {
        self.gram.nrows()
    }

    pub fn rank(&self) -> usize {
        self.size() - 2
    }

    pub fn difference_matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// alpha' (D'D) alpha: the sum of squared second differences.
    pub fn quadratic_form(&self, alpha: &DVector<f64>) -> f64 {
        let diffs = &self.d * alpha;
        diffs.norm_squared()
    }

    /// Gradient of the quadratic form scaled by 1/2: (D'D) alpha.
    pub fn gradient_half(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.gram * alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Textbook recursive Cox-de Boor definition, used as an independent oracle.
    fn naive_bspline(knots: &[f64], i: usize, d: usize, t: f64, t_max: f64) -> f64 {
        if d == 0 {
            let hi_closed = (knots[i + 1] - t_max).abs() < 1e-300;
            if (knots[i] <= t && t < knots[i + 1]) || (hi_closed && t == t_max && knots[i] < knots[i + 1]) {
                return 1.0;
            }
            return 0.0;
        }
        let mut v = 0.0;
        let den1 = knots[i + d] - knots[i];
        if den1 > 0.0 {
            v += (t - knots[i]) / den1 * naive_bspline(knots, i, d - 1, t, t_max);
        }
        let den2 = knots[i + d + 1] - knots[i + 1];
        if den2 > 0.0 {
            v += (knots[i + d + 1] - t) / den2 * naive_bspline(knots, i + 1, d - 1, t, t_max);
        }
        v
    }

    #[test]
    fn knots_without_interior() {
        let b = SplineBasis::new(4, 3, 10.0).unwrap();
        assert_eq!(b.knots(), &[0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0]);
        assert!(b.interior_knots().is_empty());
    }

    #[test]
    fn knots_equidistant_interior() {
        let b = SplineBasis::new(6, 3, 10.0).unwrap();
        let interior = b.interior_knots();
        assert_eq!(interior.len(), 2);
        assert_abs_diff_eq!(interior[0], 10.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(interior[1], 20.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn too_small_basis_rejected() {
        assert!(matches!(
            SplineBasis::new(3, 3, 10.0),
            Err(ConfigError::BasisTooSmall { .. })
        ));
        assert!(SplineBasis::new(4, 3, 10.0).is_ok());
    }

    #[test]
    fn partition_of_unity_at_random_points() {
        let b = SplineBasis::new(6, 3, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let t = rng.random::<f64>() * 10.0;
            let v = b.evaluate(t).unwrap();
            assert!(v.iter().all(|&x| x >= 0.0));
            assert!((v.sum() - 1.0).abs() < 1e-10, "sum off at t={t}");
            assert!(v.iter().filter(|&&x| x != 0.0).count() <= 4);
        }
    }

    #[test]
    fn clamped_boundaries() {
        let b = SplineBasis::new(6, 3, 10.0).unwrap();
        let v0 = b.evaluate(0.0).unwrap();
        assert_abs_diff_eq!(v0[0], 1.0, epsilon = 1e-14);
        assert!(v0.iter().skip(1).all(|&x| x.abs() < 1e-14));
        let v1 = b.evaluate(10.0).unwrap();
        assert_abs_diff_eq!(v1[5], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn degree_zero_indicator() {
        let b = SplineBasis::new(2, 0, 1.0).unwrap();
        let v = b.evaluate(0.25).unwrap();
        assert_eq!((v[0], v[1]), (1.0, 0.0));
        let v = b.evaluate(0.75).unwrap();
        assert_eq!((v[0], v[1]), (0.0, 1.0));
    }

    #[test]
    fn out_of_domain_rejected() {
        let b = SplineBasis::new(6, 3, 10.0).unwrap();
        assert!(matches!(
            b.evaluate(10.0001),
            Err(ConfigError::OutOfDomain { .. })
        ));
        assert!(matches!(
            b.evaluate(-0.0001),
            Err(ConfigError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn matches_naive_recursion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, d) in &[(4usize, 3usize), (6, 3), (6, 2), (8, 3), (5, 1), (2, 0)] {
            let b = SplineBasis::new(m, d, 7.5).unwrap();
            for _ in 0..200 {
                let t = rng.random::<f64>() * 7.5;
                let fast = b.evaluate(t).unwrap();
                for i in 0..m {
                    let slow = naive_bspline(b.knots(), i, d, t, 7.5);
                    assert!(
                        (fast[i] - slow).abs() < 1e-12,
                        "mismatch m={m} d={d} i={i} t={t}: {} vs {}",
                        fast[i],
                        slow
                    );
                }
            }
        }
    }

    #[test]
    fn difference_matrix_m4() {
        let p = DifferencePenalty::new(4).unwrap();
        let d = p.difference_matrix();
        let expected = DMatrix::from_row_slice(
            2,
            4,
            &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0],
        );
        assert_eq!(d, &expected);
    }

    #[test]
    fn penalty_null_space() {
        let p = DifferencePenalty::new(6).unwrap();
        let constant = DVector::from_element(6, 3.7);
        assert_abs_diff_eq!(p.quadratic_form(&constant), 0.0, epsilon = 1e-20);
        let affine = DVector::from_fn(6, |i, _| 1.5 + 0.25 * i as f64);
        assert_abs_diff_eq!(p.quadratic_form(&affine), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn quadratic_form_example() {
        let p = DifferencePenalty::new(4).unwrap();
        let alpha = DVector::from_vec(vec![0.0, 1.0, 4.0, 9.0]);
        assert_abs_diff_eq!(p.quadratic_form(&alpha), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn penalty_rank_and_psd() {
        let p = DifferencePenalty::new(7).unwrap();
        let eig = nalgebra::SymmetricEigen::new(p.gram().clone());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(vals[0] > -1e-12 && vals[1] > -1e-12);
        assert!(vals[0].abs() < 1e-10 && vals[1].abs() < 1e-10);
        assert!(vals[2] > 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = DVector::from_fn(7, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            assert!(p.quadratic_form(&a) >= -1e-12);
        }
    }

    #[test]
    fn too_small_penalty_rejected() {
        assert!(matches!(
            DifferencePenalty::new(2),
            Err(ConfigError::PenaltyTooSmall(2))
        ));
    }

    #[test]
    fn smooth_spans_split_at_interior_knots() {
        let b = SplineBasis::new(6, 3, 10.0).unwrap();
        let spans = b.smooth_spans(1.0, 9.0);
        assert_eq!(spans.len(), 3);
        assert_abs_diff_eq!(spans[0].1, 10.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spans[2].0, 20.0 / 3.0, epsilon = 1e-12);
        let inner = b.smooth_spans(4.0, 5.0);
        assert_eq!(inner, vec![(4.0, 5.0)]);
    }
}
