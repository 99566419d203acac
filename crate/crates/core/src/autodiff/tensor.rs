//! Dense f64 tensors with row-major layout, rank 1 to 4.

use crate::rng::Rng;
use crate::{Error, Result};

/// Tensor shape. Invariants: rank between 1 and 4, every dim nonzero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidShape(format!(
                "rank must be 1..=4, got {:?}",
                dims
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero-sized dim in {:?}", dims)));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// (rows, cols) of a rank-2 shape.
    pub fn as_2d(&self) -> Result<(usize, usize)> {
        match self.0[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!("expected rank 2, got {:?}", self.0))),
        }
    }

    /// (n, c, h, w) of a rank-4 shape.
    pub fn as_4d(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!("expected rank 4, got {:?}", self.0))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Initialization schemes for `Tensor::create`.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Kaiming-uniform: bound = sqrt(6 / fan_in), with fan_in read from the
    /// shape (rank 2: dims[0]; rank 4: dims[1] * dims[2] * dims[3]; rank 1:
    /// dims[0]).
    Kaiming { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from raw data. Rejects length mismatches and non-finite
    /// entries; this is the checkpoint every op result passes through, so NaN
    /// and Inf cannot propagate silently.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {} wants {} values, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite value {bad} in tensor of shape {shape}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn create(dims: &[usize], init: Init) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::InvalidHyperparameter(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = Rng::new(seed);
                (0..n).map(|_| rng.uniform(lo, hi)).collect()
            }
            Init::Kaiming { seed } => {
                let fan_in = match shape.dims() {
                    [d0] => *d0,
                    [d0, _] => *d0,
                    [_, c, h, w] => c * h * w,
                    dims => {
                        return Err(Error::InvalidShape(format!(
                            "kaiming init undefined for shape {:?}",
                            dims
                        )))
                    }
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = Rng::new(seed);
                (0..n).map(|_| rng.uniform(-bound, bound)).collect()
            }
        };
        Tensor::from_vec(shape, data)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Tensor::create(dims, Init::Zeros)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::from_vec(Shape::new(&[1])?, vec![v])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.to_string()));
        }
        Ok(self.data[0])
    }
}

/// A named, trainable tensor. Naming is what the optimizer, the freeze masks
/// and the checkpoint format key on, so names must be unique within a model.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dim_and_bad_rank() {
        assert!(matches!(Shape::new(&[3, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(Shape::new(&[]), Err(Error::InvalidShape(_))));
        assert!(matches!(Shape::new(&[1, 1, 1, 1, 1]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn rejects_non_finite_data() {
        let s = Shape::new(&[2]).unwrap();
        assert!(matches!(
            Tensor::from_vec(s.clone(), vec![1.0, f64::NAN]),
            Err(Error::NumericalFailure(_))
        ));
        assert!(matches!(
            Tensor::from_vec(s, vec![f64::INFINITY, 0.0]),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn rejects_length_mismatch() {
        let s = Shape::new(&[2, 2]).unwrap();
        assert!(matches!(
            Tensor::from_vec(s, vec![0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn create_is_deterministic_per_seed() {
        let a = Tensor::create(&[4, 3], Init::Kaiming { seed: 11 }).unwrap();
        let b = Tensor::create(&[4, 3], Init::Kaiming { seed: 11 }).unwrap();
        let c = Tensor::create(&[4, 3], Init::Kaiming { seed: 12 }).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn kaiming_bound_follows_fan_in() {
        // Conv kernel [8, 4, 3, 3]: fan_in = 4 * 9 = 36, bound = sqrt(6/36).
        let t = Tensor::create(&[8, 4, 3, 3], Init::Kaiming { seed: 0 }).unwrap();
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        // Draws should actually approach the bound.
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.8 * bound, "max |w| = {max}, bound = {bound}");
    }

    #[test]
    fn item_requires_single_element() {
        let t = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(t.item(), Err(Error::NotScalar(_))));
        assert_eq!(Tensor::scalar(4.5).unwrap().item().unwrap(), 4.5);
    }
}
