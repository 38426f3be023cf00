//! Single-channel 2-D rasters: probability maps, masks, and label images.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Map<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// A `{0, 1}` mask.
pub type BinaryMap = Map<bool>;
/// Real-valued map, typically probabilities in `[0, 1]`.
pub type RealMap = Map<f32>;

impl<T: Clone> Map<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Map { height, width, data: vec![value; height * width] }
    }
}

impl<T> Map<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} samples for a {height}×{width} map", data.len())));
        }
        Ok(Map { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Map<U> {
        Map { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }

    pub fn ensure_same_dims<U>(&self, other: &Map<U>, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Data(format!(
                "{what}: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

impl BinaryMap {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

impl RealMap {
    /// Pixels with value `>= threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMap {
        self.map(|&v| v >= threshold)
    }
}
