use crate::error::{Error, Result};
use crate::rng::Rng;

/// Initial contents for [`Tensor::new`].
pub enum Fill<'a> {
    Zeros,
    Constant(f32),
    Uniform {
        rng: &'a mut Rng,
        lo: f32,
        hi: f32,
    },
    Normal {
        rng: &'a mut Rng,
        mean: f32,
        std: f32,
    },
    /// Normal resampled into `mean ± 2·std`.
    TruncatedNormal {
        rng: &'a mut Rng,
        mean: f32,
        std: f32,
    },
}

/// Dense row-major `f32` array with an optional gradient buffer.
///
/// A frozen tensor (`trainable == false`) never allocates a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    trainable: bool,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty dimension list".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!("zero dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: Fill<'_>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Constant(v) => vec![v; n],
            Fill::Uniform { rng, lo, hi } => (0..n)
                .map(|_| rng.uniform(f64::from(lo), f64::from(hi)) as f32)
                .collect(),
            Fill::Normal { rng, mean, std } => (0..n)
                .map(|_| (f64::from(mean) + f64::from(std) * rng.normal()) as f32)
                .collect(),
            Fill::TruncatedNormal { rng, mean, std } => (0..n)
                .map(|_| (f64::from(mean) + f64::from(std) * rng.truncated_normal()) as f32)
                .collect(),
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            trainable: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, Fill::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            trainable: false,
        })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            trainable: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Freezing drops any existing gradient.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad = None;
        }
    }

    pub fn with_trainable(mut self, trainable: bool) -> Tensor {
        self.set_trainable(trainable);
        self
    }

    /// Adds `g` into the gradient buffer. No-op on frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        if !self.trainable {
            return;
        }
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::from_vec(shape, self.data.clone())?;
        t.trainable = self.trainable;
        Ok(t)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
