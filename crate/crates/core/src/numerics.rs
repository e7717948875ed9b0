//! Dense-tensor arithmetic and the shared differentiable primitives.
//!
//! Everything here is a pure function on immutable values in f64. Precision
//! headroom matters more than speed at desk scale: the finite-difference
//! gradient oracle in [`finite_diff_grad`] is used to check every analytic
//! gradient this crate ships.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major numeric array with an explicit shape.
///
/// Invariants, enforced on construction and deserialization:
/// - `data.len()` equals the product of `shape`
/// - every dimension is positive
/// - every entry is finite
///
/// Tensors are immutable values; operations return new tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                expect
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor entries must be finite"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Matrix-vector product for a rank-2 tensor: `m[R x C] * v[C] -> [R]`.
pub fn matvec(m: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(Error::invalid("matvec expects a rank-2 tensor"));
    }
    if m.cols() != v.len() {
        return Err(Error::invalid(format!(
            "matvec dimension mismatch: matrix is {}x{}, vector has length {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    Ok((0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

/// Transposed matrix-vector product: `m[R x C]^T * v[R] -> [C]`.
pub fn matvec_transpose(m: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(Error::invalid("matvec_transpose expects a rank-2 tensor"));
    }
    if m.rows() != v.len() {
        return Err(Error::invalid(format!(
            "matvec_transpose dimension mismatch: matrix is {}x{}, vector has length {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    let mut out = vec![0.0; m.cols()];
    for (r, &vr) in v.iter().enumerate() {
        for (o, &mrc) in out.iter_mut().zip(m.row(r)) {
            *o += mrc * vr;
        }
    }
    Ok(out)
}

/// Order-canonical sum: sorts the addends by total order before folding,
/// so the result is identical for any permutation of the inputs.
pub fn canonical_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Per-known-category classification logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    logits: Vec<f64>,
}

impl ClassScores {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("class scores need at least one category"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("class score logits must be finite"));
        }
        Ok(ClassScores { logits })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_categories(&self) -> usize {
        self.logits.len()
    }
}

/// Numerically stable softmax (max-subtraction before exponentiation).
///
/// The output has the same length as the input, every entry lies in (0, 1],
/// and the entries sum to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector is undefined"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Layer normalization with population variance:
/// `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::invalid(format!(
            "layer_norm length mismatch: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("layer_norm of an empty vector is undefined"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((&v, &g), &b)| g * (v - mean) / denom + b)
        .collect())
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Cosine distance `1 - a.b / (|a||b|)`, in [0, 2].
///
/// Zero-norm inputs are rejected rather than silently mapped to 0.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine_distance length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate(
            "cosine_distance is undefined for zero-norm vectors",
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Euclidean distance `|a - b|_2`.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "euclidean_distance length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Smooth-L1 (Huber-style) loss on a scalar residual.
///
/// `0.5 d^2 / beta` for `|d| < beta`, else `|d| - 0.5 beta`, with
/// `d = pred - target`. Requires `beta > 0`.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    assert!(beta > 0.0, "smooth_l1 beta must be positive");
    let d = (pred - target).abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Cross-entropy of a softmax classifier with its analytic gradient.
///
/// Returns `(-log softmax(logits)[label], softmax(logits) - one_hot(label))`.
pub fn softmax_cross_entropy(scores: &ClassScores, label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= scores.num_categories() {
        return Err(Error::invalid(format!(
            "label {} out of range for {} categories",
            label,
            scores.num_categories()
        )));
    }
    let probs = softmax(scores.logits())?;
    let loss = -probs[label].ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Central-difference gradient estimate: `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// per coordinate. This is the verification oracle the analytic gradients in
/// this crate are checked against; it must stay independent of them.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_grad step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::degenerate(
                "finite_diff_grad evaluated f to a non-finite value",
            ));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_close(p[0], 0.5, 1e-15);
        assert_close(p[1], 0.5, 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in &p {
            assert_close(*v, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_exponentials() {
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        assert_close(p[0], 1.0 / 6.0, 1e-12);
        assert_close(p[1], 2.0 / 6.0, 1e-12);
        assert_close(p[2], 3.0 / 6.0, 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn layer_norm_two_point() {
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        // mean 0, population var 1, so x / sqrt(1 + eps)
        assert_close(out[0], 0.9999950000374997, 1e-9);
        assert_close(out[1], -0.9999950000374997, 1e-9);
    }

    #[test]
    fn layer_norm_constant_input_returns_bias() {
        let out = layer_norm(&[3.0, 3.0, 3.0], &[1.0, 1.0, 1.0], &[0.5, -0.5, 0.0], 1e-5).unwrap();
        assert_close(out[0], 0.5, 1e-12);
        assert_close(out[1], -0.5, 1e-12);
        assert_close(out[2], 0.0, 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let out = layer_norm(&[1.0, 2.0, 5.0], &[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-3.0, -0.5]), vec![0.0, 0.0]);
        assert_eq!(relu(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn cosine_distance_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_close(cosine_distance(&a, &a).unwrap(), 0.0, 1e-12);
        assert_close(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, 1e-12);
        assert_close(cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 2.0, 1e-12);
    }

    #[test]
    fn cosine_distance_rejects_zero_norm() {
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn euclidean_distance_examples() {
        assert_close(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0, 1e-15);
        assert_close(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0, 1e-12);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(1.0, 1.0, 1.0), 0.0);
        assert_close(smooth_l1(0.5, 0.0, 1.0), 0.125, 1e-15);
        assert_close(smooth_l1(2.0, 0.0, 1.0), 1.5, 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let scores = ClassScores::new(vec![0.0; 5]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&scores, 2).unwrap();
        assert_close(loss, 5f64.ln(), 1e-12);
        assert_close(grad.iter().sum::<f64>(), 0.0, 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits_approach_zero_loss() {
        let scores = ClassScores::new(vec![30.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&scores, 0).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let scores = ClassScores::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&scores, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn finite_diff_on_squared_norm() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[3.0], 1e-4).unwrap();
        assert_close(g[0], 6.0, 1e-6);
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let g = finite_diff_grad(|_| 7.5, &[1.0, -2.0, 0.3], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_on_linear_recovers_coefficients() {
        let a = [2.0, -1.5, 0.25];
        let g = finite_diff_grad(
            |x| x.iter().zip(&a).map(|(v, c)| v * c).sum(),
            &[0.4, 0.6, -1.0],
            1e-5,
        )
        .unwrap();
        for (gi, ai) in g.iter().zip(&a) {
            assert_close(*gi, *ai, 1e-8);
        }
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matvec_roundtrip_with_transpose() {
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 4.0]);
        assert_eq!(matvec_transpose(&m, &[1.0, 0.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matvec(&m, &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..16),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_unit_variance_for_non_constant_input(
            x in proptest::collection::vec(-100.0f64..100.0, 2..32),
        ) {
            let n = x.len();
            let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - x.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let out = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 1e-5).unwrap();
            let mean = out.iter().sum::<f64>() / n as f64;
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            // eps shifts the variance slightly below 1
            prop_assert!((var - 1.0).abs() < 1e-3);
        }

        #[test]
        fn cosine_distance_is_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 2..8),
            b in proptest::collection::vec(-10.0f64..10.0, 2..8),
            lambda in 0.01f64..100.0,
            mu in 0.01f64..100.0,
        ) {
            prop_assume!(a.len() == b.len());
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let d = cosine_distance(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * mu).collect();
            let ds = cosine_distance(&sa, &sb).unwrap();
            prop_assert!((d - ds).abs() < 1e-12);
        }

        #[test]
        fn euclidean_distance_is_homogeneous(
            a in proptest::collection::vec(-10.0f64..10.0, 2..8),
            b in proptest::collection::vec(-10.0f64..10.0, 2..8),
            k in -4.0f64..4.0,
        ) {
            prop_assume!(a.len() == b.len());
            let d = euclidean_distance(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * k).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * k).collect();
            let ds = euclidean_distance(&sa, &sb).unwrap();
            prop_assert!((ds - k.abs() * d).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_grad_matches_finite_differences(
            logits in proptest::collection::vec(-3.0f64..3.0, 2..8),
            label_pick in 0usize..1000,
        ) {
            let label = label_pick % logits.len();
            let scores = ClassScores::new(logits.clone()).unwrap();
            let (_, grad) = softmax_cross_entropy(&scores, label).unwrap();
            let fd = finite_diff_grad(
                |x| {
                    let s = ClassScores::new(x.to_vec()).unwrap();
                    softmax_cross_entropy(&s, label).unwrap().0
                },
                &logits,
                1e-6,
            )
            .unwrap();
            for (a, n) in grad.iter().zip(&fd) {
                let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
                prop_assert!(rel < 1e-6, "rel error {rel}");
            }
        }

        #[test]
        fn canonical_sum_is_permutation_invariant(
            mut values in proptest::collection::vec(-1e6f64..1e6, 1..32),
            rotate in 0usize..32,
        ) {
            let s1 = canonical_sum(&values);
            let r = rotate % values.len();
            values.rotate_left(r);
            values.reverse();
            let s2 = canonical_sum(&values);
            prop_assert_eq!(s1, s2);
        }
    }
}
