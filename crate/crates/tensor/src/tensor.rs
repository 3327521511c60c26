use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};

/// Storage precision of a tensor.
///
/// Arithmetic always runs in `f64`; an `F32` tensor keeps its values rounded
/// to the nearest `f32` so that it behaves like single-precision storage and
/// serializes without loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    /// Tag byte used by the tensor archive format.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    /// Result precision of an operation over operands of `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F32 || other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Dense row-major N-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {} values but {} were given",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data, dtype))
    }

    /// Unchecked constructor for kernels that already validated the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        if dtype == DType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Tensor { shape, dtype, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            dtype: DType::F64,
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data,
        }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Normal samples with standard deviation `std`, redrawn until they fall
    /// within two standard deviations of zero.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer. Writes to an `F32` tensor are not
    /// re-rounded until [`Tensor::round_to_dtype`] is called.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), dtype)
    }

    pub fn round_to_dtype(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(TensorError::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape, dtype and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_leading(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            dtype: self.dtype,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn select_leading(&self, indices: &[usize]) -> Result<Tensor> {
        let lead = self.shape[0];
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(TensorError::shape(
                    "select_leading",
                    format!("index {i} out of range for leading dim {lead}"),
                ));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        if indices.is_empty() {
            return Err(TensorError::shape("select_leading", "no indices"));
        }
        Ok(Tensor {
            shape,
            dtype: self.dtype,
            data,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::shape("stack", "nothing to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut dtype = first.dtype;
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::mismatch("stack", &first.shape, &t.shape));
            }
            dtype = dtype.promote(t.dtype);
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data, dtype))
    }
}
