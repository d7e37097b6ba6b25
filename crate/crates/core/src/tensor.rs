//! Dense row-major tensors in double precision.
//!
//! Every numeric object in the toolkit (inputs, features, parameters,
//! gradients) is a [`Tensor`]. Shapes are explicit, data is flat, and all
//! constructors are deterministic for a fixed seed.

use crate::error::{FcxError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Initialization scheme for [`Tensor::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform(f64, f64),
    /// Normal draw with std = sqrt(2 / fan_in).
    HeNormal { fan_in: usize },
}

/// Dense n-dimensional array, row-major, f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from an explicit shape and initializer. Deterministic
    /// for fixed `(init, seed)`.
    pub fn new(shape: &[usize], init: Init, seed: u64) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Uniform(a, b) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let dist = Uniform::new(a, b);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::HeNormal { fan_in } => {
                if fan_in == 0 {
                    return Err(FcxError::InvalidShape("he_normal fan_in must be >= 1".into()));
                }
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("std is finite and positive");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Wraps existing data; length must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(FcxError::InvalidShape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FcxError::ShapeMismatch { expected: self.shape.clone(), got: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise sum, `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise difference, `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Squared Euclidean norm of the flattened data.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(FcxError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Rows `indices` of a batch tensor (axis 0), preserving trailing dims.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(FcxError::InvalidShape("gather_rows on rank-0 tensor".into()));
        }
        let row = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            debug_assert!(i < self.shape[0]);
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Single row `i` of a batch tensor, keeping a leading axis of 1.
    pub fn row(&self, i: usize) -> Result<Self> {
        self.gather_rows(&[i])
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(FcxError::InvalidShape("shape must be non-empty".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(FcxError::InvalidShape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// Variance of a feature set: mean over samples of the squared Euclidean
/// distance to the elementwise mean feature. Flattens over every non-sample
/// axis.
pub fn variance_of(features: &[Tensor]) -> Result<f64> {
    if features.is_empty() {
        return Err(FcxError::EmptyInput("variance_of needs at least one sample"));
    }
    let shape = features[0].shape().to_vec();
    for t in features {
        if t.shape() != shape.as_slice() {
            return Err(FcxError::ShapeMismatch { expected: shape, got: t.shape().to_vec() });
        }
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; features[0].len()];
    for t in features {
        for (m, v) in mean.iter_mut().zip(t.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut acc = 0.0;
    for t in features {
        let mut d = 0.0;
        for (m, v) in mean.iter().zip(t.data()) {
            let e = v - m;
            d += e * e;
        }
        acc += d;
    }
    Ok(acc / n)
}

/// Variance over axis 0 of a stacked batch tensor; same statistic as
/// [`variance_of`] on the individual rows.
pub fn variance_of_batch(batch: &Tensor) -> Result<f64> {
    let n = batch.shape()[0];
    if n == 0 {
        return Err(FcxError::EmptyInput("variance_of_batch needs at least one row"));
    }
    let row = batch.len() / n;
    let data = batch.data();
    let mut mean = vec![0.0; row];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(&data[i * row..(i + 1) * row]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let mut d = 0.0;
        for (m, v) in mean.iter().zip(&data[i * row..(i + 1) * row]) {
            let e = v - m;
            d += e * e;
        }
        acc += d;
    }
    Ok(acc / n as f64)
}

/// Complement and canonical target for an additive split.
///
/// For arbitrary floats no residual `r` with `part + r == target` bit-exact
/// is guaranteed to exist (the sum's rounding window can be finer than the
/// residual's ulp), so additive identities in this crate are anchored on the
/// *canonical* target `fl(part + complement)` instead. It differs from the
/// requested target by at most one rounding of the larger operand.
#[derive(Debug, Clone)]
pub struct ExactSplit {
    /// `fl(target - part)`, elementwise.
    pub complement: Tensor,
    /// `fl(part + complement)`; the value the additive identity is exact for.
    pub canonical: Tensor,
    /// Largest |canonical - target| over all elements.
    pub canonicalization_err: f64,
}

/// Splits `target` into `part + complement` with a canonical target for
/// which the sum is bit-exact under left-to-right IEEE-754 addition.
pub fn exact_split(target: &Tensor, part: &Tensor) -> Result<ExactSplit> {
    target.check_same_shape(part)?;
    let mut complement = vec![0.0; target.len()];
    let mut canonical = vec![0.0; target.len()];
    let mut err = 0.0_f64;
    for i in 0..target.len() {
        let t = target.data()[i];
        let p = part.data()[i];
        let c = t - p;
        let canon = p + c;
        complement[i] = c;
        canonical[i] = canon;
        err = err.max((canon - t).abs());
    }
    Ok(ExactSplit {
        complement: Tensor::from_vec(target.shape(), complement)?,
        canonical: Tensor::from_vec(target.shape(), canonical)?,
        canonicalization_err: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_and_constant() {
        let z = Tensor::new(&[2, 2], Init::Zeros, 0).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0, 0.0]);
        let c = Tensor::new(&[3], Init::Constant(1.5), 0).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_is_deterministic() {
        let a = Tensor::new(&[4], Init::Uniform(0.0, 1.0), 7).unwrap();
        let b = Tensor::new(&[4], Init::Uniform(0.0, 1.0), 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = Tensor::new(&[4], Init::Uniform(0.0, 1.0), 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn he_normal_std_matches_fan_in() {
        let t = Tensor::new(&[20_000], Init::HeNormal { fan_in: 8 }, 3).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let var: f64 =
            t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        let expect = 2.0 / 8.0;
        assert!((var - expect).abs() < 0.02, "var {var} vs {expect}");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::new(&[2, 0], Init::Zeros, 0),
            Err(FcxError::InvalidShape(_))
        ));
        assert!(matches!(Tensor::new(&[], Init::Zeros, 0), Err(FcxError::InvalidShape(_))));
    }

    #[test]
    fn variance_identical_samples_is_zero() {
        let t = Tensor::new(&[3], Init::Constant(2.0), 0).unwrap();
        let v = variance_of(&[t.clone(), t.clone(), t]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn variance_hand_case() {
        let a = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        // mean is [1], distances are 1 and 1, Var = 1
        assert_eq!(variance_of(&[a, b]).unwrap(), 1.0);
    }

    #[test]
    fn variance_empty_rejected() {
        assert!(matches!(variance_of(&[]), Err(FcxError::EmptyInput(_))));
    }

    // Independent oracle: per-coordinate two-pass variance, summed.
    fn variance_oracle(samples: &[Vec<f64>]) -> f64 {
        let n = samples.len();
        let d = samples[0].len();
        let mut total = 0.0;
        for j in 0..d {
            let mean: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
            total += samples.iter().map(|s| (s[j] - mean) * (s[j] - mean)).sum::<f64>() / n as f64;
        }
        total
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let dist = Uniform::new(-3.0, 3.0);
        let samples: Vec<Vec<f64>> =
            (0..17).map(|_| (0..9).map(|_| dist.sample(&mut rng)).collect()).collect();
        let tensors: Vec<Tensor> =
            samples.iter().map(|s| Tensor::from_vec(&[3, 3], s.clone()).unwrap()).collect();
        let got = variance_of(&tensors).unwrap();
        let want = variance_oracle(&samples);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn variance_batch_agrees_with_list() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let dist = Uniform::new(-1.0, 1.0);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..8).map(|_| dist.sample(&mut rng)).collect()).collect();
        let tensors: Vec<Tensor> =
            rows.iter().map(|r| Tensor::from_vec(&[2, 4], r.clone()).unwrap()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let batch = Tensor::from_vec(&[6, 2, 4], flat).unwrap();
        assert_eq!(variance_of(&tensors).unwrap(), variance_of_batch(&batch).unwrap());
    }

    proptest! {
        #[test]
        fn variance_translation_invariant(
            base in proptest::collection::vec(-5.0f64..5.0, 4 * 6),
            shift in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let samples: Vec<Tensor> = base
                .chunks(6)
                .map(|c| Tensor::from_vec(&[6], c.to_vec()).unwrap())
                .collect();
            let shift_t = Tensor::from_vec(&[6], shift).unwrap();
            let shifted: Vec<Tensor> = samples.iter().map(|s| s.add(&shift_t).unwrap()).collect();
            let v0 = variance_of(&samples).unwrap();
            let v1 = variance_of(&shifted).unwrap();
            prop_assert!((v0 - v1).abs() <= 1e-10 * v0.abs().max(1.0));
        }

        #[test]
        fn variance_scales_quadratically(
            base in proptest::collection::vec(-5.0f64..5.0, 4 * 6),
            s in -4.0f64..4.0,
        ) {
            let samples: Vec<Tensor> = base
                .chunks(6)
                .map(|c| Tensor::from_vec(&[6], c.to_vec()).unwrap())
                .collect();
            let scaled: Vec<Tensor> = samples.iter().map(|t| t.scale(s)).collect();
            let v0 = variance_of(&samples).unwrap();
            let v1 = variance_of(&scaled).unwrap();
            prop_assert!((v1 - s * s * v0).abs() <= 1e-10 * (s * s * v0).abs().max(1e-12));
        }

        #[test]
        fn exact_split_is_bitwise_on_canonical_target(
            t in proptest::collection::vec(-1e12f64..1e12, 16),
            a in proptest::collection::vec(-1e12f64..1e12, 16),
        ) {
            let target = Tensor::from_vec(&[16], t).unwrap();
            let part = Tensor::from_vec(&[16], a).unwrap();
            let split = exact_split(&target, &part).unwrap();
            for i in 0..16 {
                let sum = part.data()[i] + split.complement.data()[i];
                prop_assert!(sum == split.canonical.data()[i], "bit mismatch at {i}");
                // canonicalization is within one rounding of the operands
                let scale = part.data()[i].abs().max(target.data()[i].abs());
                prop_assert!((split.canonical.data()[i] - target.data()[i]).abs() <= scale * 1e-15);
            }
        }
    }
}
