//! Dense `f32` tensors in batch-outermost row-major layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a rank-3 `(C, H, W)` or rank-4 `(N, C, H, W)` tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() != 3 && dims.len() != 4 {
            return Err(Error::Shape(format!("rank must be 3 or 4, got {} ({dims:?})", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Shape::new(&[n, c, h, w])
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

    /// The shape viewed as `(N, C, H, W)`; rank-3 shapes get `N = 1`.
    pub fn dims4(&self) -> [usize; 4] {
        match *self.0.as_slice() {
            [c, h, w] => [1, c, h, w],
            [n, c, h, w] => [n, c, h, w],
            _ => unreachable!("rank checked at construction"),
        }
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(&dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join("×"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} values supplied for shape {shape} ({} elements)",
                values.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn new(dims: &[usize], values: Vec<f32>) -> Result<Self> {
        Tensor::from_vec(Shape::new(dims)?, values)
    }

    pub fn zeros(shape: Shape) -> Self {
        let values = vec![0.0; shape.numel()];
        Tensor { shape, values, grad: None }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        let values = vec![value; shape.numel()];
        Tensor { shape, values, grad: None }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims4(&self) -> [usize; 4] {
        self.shape.dims4()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// The gradient buffer, allocated (zero-filled) on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let len = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same values under a different shape of equal element count.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.values.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// One `(H, W)` plane of a rank-4 (or rank-3, with `n = 0`) tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let [_, channels, h, w] = self.dims4();
        let start = (n * channels + c) * h * w;
        &self.values[start..start + h * w]
    }

    /// Channels `[start, start + count)` of every batch item.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4();
        if count == 0 || start + count > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {}",
                start + count,
                self.shape
            )));
        }
        let plane = h * w;
        let mut values = Vec::with_capacity(n * count * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            values.extend_from_slice(&self.values[base..base + count * plane]);
        }
        Tensor::new(&[n, count, h, w], values)
    }
}
