use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rank-3 array in row-major order, used for `batch × T × F` inputs
/// and `batch × C × T` activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor3 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Contiguous innermost row at `(i, j)`.
    pub fn lane(&self, i: usize, j: usize) -> &[f64] {
        let n = self.shape[2];
        let start = (i * self.shape[1] + j) * n;
        &self.data[start..start + n]
    }

    pub fn lane_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let n = self.shape[2];
        let start = (i * self.shape[1] + j) * n;
        &mut self.data[start..start + n]
    }

    /// Contiguous `shape[1] × shape[2]` block of batch item `i`.
    pub fn item(&self, i: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Swaps the two inner axes: `[b, x, y] → [b, y, x]`.
    pub fn transpose_inner(&self) -> Tensor3 {
        let [b, x, y] = self.shape;
        let mut out = Tensor3::zeros([b, y, x]);
        for bi in 0..b {
            let src = self.item(bi);
            let dst = out.item_mut(bi);
            for i in 0..x {
                for j in 0..y {
                    dst[j * x + i] = src[i * y + j];
                }
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

impl std::ops::Index<[usize; 3]> for Tensor3 {
    type Output = f64;

    fn index(&self, [i, j, k]: [usize; 3]) -> &f64 {
        &self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}

impl std::ops::IndexMut<[usize; 3]> for Tensor3 {
    fn index_mut(&mut self, [i, j, k]: [usize; 3]) -> &mut f64 {
        &mut self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}
