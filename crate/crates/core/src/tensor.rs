//! Dense row-major f64 tensors and the distribution-level primitives built on
//! them (stable softmax, clamped KL divergence, one-hot cross-entropy,
//! inverted dropout).

use rand::Rng;

use crate::error::{Error, Result};

/// Clamp applied inside every log in KL and cross-entropy terms. Keeps the
/// losses finite without measurably perturbing training.
pub const EPS_LOG: f64 = 1e-12;

/// Dense tensor: a shape vector and a row-major f64 buffer.
///
/// Rank 1 tensors are vectors `[n]`, rank 2 are matrices `[rows, cols]`.
/// Every public constructor rejects non-finite values and shape/length
/// mismatches.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Unvalidated constructor for internal op outputs whose shape is already
    /// known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Tensor { shape, values }
    }

    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::numerics(format!("zero-sized dimension in shape {shape:?}")));
        }
        if values.len() != numel {
            return Err(Error::numerics(format!(
                "shape {shape:?} expects {numel} values, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numerics("non-finite value in tensor".to_string()));
        }
        Ok(Tensor { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::from_vec(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], values: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Number of rows of a rank-2 tensor, or the length of a vector.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape[1] + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.values[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Fill with samples from `U[lo, hi)`.
    pub fn fill_uniform<R: Rng>(&mut self, lo: f64, hi: f64, rng: &mut R) {
        for v in &mut self.values {
            *v = rng.gen_range(lo..hi);
        }
    }

    /// Fill with samples from `N(0, std)` via Box-Muller (keeps the RNG stream
    /// independent of distribution-crate internals).
    pub fn fill_normal<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for v in &mut self.values {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Numerically stable softmax over a logit vector.
///
/// Subtracts the max before exponentiating; the output is a distribution
/// (nonnegative, sums to 1 within 1e-9).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.numel() == 0 {
        return Err(Error::numerics("empty distribution"));
    }
    let vals = logits.values();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::from_vec(logits.shape().to_vec(), exps.iter().map(|&e| e / sum).collect())
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)` with both logs clamped at [`EPS_LOG`].
///
/// Zero entries of `p` contribute exactly zero.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.numel() != q.numel() {
        return Err(Error::numerics(format!(
            "KL length mismatch: {} vs {}",
            p.numel(),
            q.numel()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.values().iter().zip(q.values()) {
        if pi == 0.0 {
            continue;
        }
        total += pi * (pi.max(EPS_LOG).ln() - qi.max(EPS_LOG).ln());
    }
    Ok(total)
}

/// `-ln(pred[gold])` with the probability clamped at [`EPS_LOG`].
pub fn cross_entropy_onehot(pred: &Tensor, gold: usize) -> Result<f64> {
    if gold >= pred.numel() {
        return Err(Error::numerics(format!(
            "gold index {gold} out of range for distribution of length {}",
            pred.numel()
        )));
    }
    Ok(-pred.values()[gold].max(EPS_LOG).ln())
}

/// Inverted dropout: in training mode each element is zeroed independently
/// with probability `rate` and survivors are scaled by `1/(1-rate)`; in eval
/// mode the input passes through unchanged.
pub fn dropout_apply<R: Rng>(
    x: &Tensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::numerics(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let scale = 1.0 / (1.0 - rate);
    let values = x
        .values()
        .iter()
        .map(|&v| if rng.gen::<f64>() < rate { 0.0 } else { v * scale })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_bad_inputs() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn softmax_uniform_logits() {
        let out = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        for &v in out.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]).unwrap()).unwrap();
        let b = softmax(&Tensor::vector(vec![100.3, 98.8, 102.0, 100.0]).unwrap()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_two_logits_hand_value() {
        // e^1 / (e^1 + e^0) = 0.731058...
        let out = softmax(&Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        assert!((out.values()[0] - 0.7311).abs() < 1e-4);
        assert!((out.values()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_empty() {
        let t = Tensor { shape: vec![], values: vec![] };
        assert!(softmax(&t).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_onehot_vs_uniform_is_ln2() {
        let p = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let q = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut p = Tensor::zeros(vec![5]);
            let mut q = Tensor::zeros(vec![5]);
            p.fill_uniform(0.01, 1.0, &mut rng);
            q.fill_uniform(0.01, 1.0, &mut rng);
            let ps: f64 = p.values().iter().sum();
            let qs: f64 = q.values().iter().sum();
            for v in p.values_mut() {
                *v /= ps;
            }
            for v in q.values_mut() {
                *v /= qs;
            }
            let direct: f64 = p
                .values()
                .iter()
                .zip(q.values())
                .map(|(&pi, &qi)| pi * (pi / qi).ln())
                .sum();
            let got = kl_divergence(&p, &q).unwrap();
            assert!((got - direct).abs() < 1e-12, "got {got}, direct {direct}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn kl_length_mismatch_errors() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        let q = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let sure = Tensor::vector(vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy_onehot(&sure, 0).unwrap() <= 1e-12);

        let even = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy_onehot(&even, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let skew = Tensor::vector(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((cross_entropy_onehot(&skew, 0).unwrap() - 1.6094).abs() < 1e-4);

        assert!(cross_entropy_onehot(&even, 2).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = dropout_apply(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = dropout_apply(&x, 0.2, &mut rng, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_preserves_mean_statistically() {
        let x = Tensor::full(vec![100_000], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let y = dropout_apply(&x, 0.5, &mut rng, true).unwrap();
        let mean: f64 = y.values().iter().sum::<f64>() / y.numel() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout_apply(&x, 1.0, &mut rng, true).is_err());
    }
}
