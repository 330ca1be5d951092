//! Dense numerical primitives shared by every stage of the pipeline.
//!
//! Everything here works in `f64`. Matrices are row-major [`Tensor2`]s; the
//! heavy products go through [`gemm`], a thin row-major wrapper over the
//! `matrixmultiply` kernels. Gradients elsewhere in the crate are written by
//! hand, and [`grad_check`] is the central-difference harness that keeps them
//! honest.

use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};

/// Vectors with an L2 norm at or below this are rejected by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ElsaError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ElsaError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; an empty-column tensor has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        self.product(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        self.product(other, false, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        self.product(other, true, false)
    }

    fn product(&self, other: &Tensor2, ta: bool, tb: bool) -> Result<Tensor2> {
        let (m, k) = if ta {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k2, n) = if tb {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        if k != k2 {
            return Err(ElsaError::DimensionMismatch { expected: k, got: k2 });
        }
        let mut out = Tensor2::zeros(m, n);
        gemm(ta, tb, m, n, k, 1.0, &self.data, &other.data, 0.0, &mut out.data);
        Ok(out)
    }

    /// Normalizes every row to unit length, returning the pre-normalization norms.
    pub fn normalize_rows(&mut self) -> Result<Vec<f64>> {
        let cols = self.cols;
        let mut norms = Vec::with_capacity(self.rows);
        for r in self.data.chunks_exact_mut(cols.max(1)) {
            let n = norm(r);
            if !(n > EPS_NORM) {
                return Err(ElsaError::DegenerateVector { norm: n });
            }
            r.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(norms)
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        ensure_finite(&self.data, context)
    }
}

/// Row-major GEMM: `C (m×n) = alpha · op(A) · op(B) + beta · C`.
///
/// `op(A)` is `m×k`; when `trans_a` is set, `A` is stored as a `k×m` row-major
/// buffer. Likewise for `B`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index addressed through the
    // given strides lies inside the respective slices, and `c` is uniquely
    // borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn ensure_finite(values: &[f64], context: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ElsaError::NonFinite { context })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `log Σ exp(v_i)`, shifted by the maximum so no finite input overflows.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(ElsaError::EmptyReduction);
    }
    ensure_finite(values, "logsumexp")?;
    Ok(logsumexp_unchecked(values))
}

/// [`logsumexp`] without the emptiness and finiteness checks. Hot loops call
/// this on rows they built themselves.
#[inline]
pub fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `values`, written into a new vector.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(values)?;
    Ok(values.iter().map(|v| (v - lse).exp()).collect())
}

/// Softmax in place given an already computed log-partition.
#[inline]
pub fn softmax_with_lse(values: &mut [f64], lse: f64) {
    values.iter_mut().for_each(|v| *v = (*v - lse).exp());
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(ElsaError::NonFinite {
            context: "l2_normalize",
        });
    }
    if n <= EPS_NORM {
        return Err(ElsaError::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pulls a gradient back through `u = v / ‖v‖`: returns `(I − u uᵀ) g / ‖v‖`.
#[inline]
pub fn normalize_backward(u: &[f64], norm_v: f64, grad_u: &[f64], grad_v: &mut [f64]) {
    let proj = dot(u, grad_u);
    for ((gv, gu), ui) in grad_v.iter_mut().zip(grad_u).zip(u) {
        *gv = (gu - proj * ui) / norm_v;
    }
}

/// Worst coordinate of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub argmax_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative errors are measured against `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`
/// so coordinates whose true gradient is zero do not divide by noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares the analytic gradient returned by `f` at `point` against central
/// differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` on every coordinate.
///
/// `f` returns `(value, gradient)`; only the value is used at the perturbed
/// points.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) || point.is_empty() {
        return Err(ElsaError::invalid("grad_check needs h > 0 and a nonempty point"));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(ElsaError::NonFinite {
            context: "grad_check evaluation",
        });
    }
    if analytic.len() != point.len() {
        return Err(ElsaError::DimensionMismatch {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    ensure_finite(&analytic, "grad_check analytic gradient")?;

    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        argmax_coordinate: 0,
        analytic: analytic[0],
        numeric: f64::NAN,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?.0;
        x[i] = orig - h;
        let minus = f(&x)?.0;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(ElsaError::NonFinite {
                context: "grad_check evaluation",
            });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (analytic[i] - numeric).abs() / scale;
        if i == 0 || rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                argmax_coordinate: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        // e^1.8 + e^-0.4 + e^1.0 = 6.049647464 + 0.670320046 + 2.718281828
        let direct = (1.8f64.exp() + (-0.4f64).exp() + 1.0f64.exp()).ln();
        let v = logsumexp(&[1.8, -0.4, 1.0]).unwrap();
        assert!((v - direct).abs() < 1e-14);
        assert!((v - 2.2447).abs() < 1e-4);
    }

    #[test]
    fn logsumexp_rejects_empty_and_nan() {
        assert!(matches!(logsumexp(&[]), Err(ElsaError::EmptyReduction)));
        assert!(logsumexp(&[1.0, f64::NAN]).is_err());
        assert_eq!(ElsaError::EmptyReduction.to_string(), "empty reduction");
    }

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&u).unwrap();
        assert_eq!(u, again);
        let err = l2_normalize(&[1e-30, 0.0]).unwrap_err();
        assert!(err.to_string().starts_with("degenerate vector"));
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        let r = grad_check(|x| Ok((x[0] * x[0], vec![3.0 * x[0]])), &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn grad_check_logsumexp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = grad_check(|x| Ok((logsumexp(x)?, softmax(x)?)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_through_normalization() {
        // f(v) = w · normalize(v)
        let w = [0.3, -1.2, 0.7, 2.0];
        let f = |v: &[f64]| {
            let u = l2_normalize(v)?;
            let mut g = vec![0.0; v.len()];
            normalize_backward(&u, norm(v), &w, &mut g);
            Ok((dot(&w, &u), g))
        };
        let r = grad_check(f, &[0.5, 0.1, -0.9, 0.4], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn gemm_matches_naive() {
        let a = Tensor2::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor2::new(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let bt = Tensor2::new(2, 3, vec![7., 9., 11., 8., 10., 12.]).unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap().data(), c.data());
        let at = Tensor2::new(3, 2, vec![1., 4., 2., 5., 3., 6.]).unwrap();
        assert_eq!(at.matmul_tn(&b).unwrap().data(), c.data());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor2::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor2::new(1, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let base = logsumexp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s = logsumexp(&shifted).unwrap();
            prop_assert!((s - (base + c)).abs() < 1e-12 * (1.0 + base.abs() + c.abs()) * 10.0);
        }

        #[test]
        fn logsumexp_bounds(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let s = logsumexp(&v).unwrap();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= max - 1e-12);
            prop_assert!(s <= max + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalize_scale_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..10), alpha in 1e-3f64..1e3) {
            prop_assume!(norm(&v) > 1e-6);
            let a = l2_normalize(&v).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let b = l2_normalize(&scaled).unwrap();
            prop_assert!((norm(&a) - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let again = l2_normalize(&a).unwrap();
            for (x, y) in a.iter().zip(&again) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
