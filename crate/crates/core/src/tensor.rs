//! Dense row-major f32 matrices and their wire encoding.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("payload of {bytes} bytes does not hold {rows}x{cols} f32 values")]
    Shape { rows: usize, cols: usize, bytes: usize },
    #[error("invalid base64: {0}")]
    Base64(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                rows,
                cols,
                bytes: data.len() * 4,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `top` above `bottom`; both must have the same width.
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Option<Matrix> {
        if top.cols != bottom.cols {
            return None;
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Some(Matrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        f32_to_le_bytes(&self.data)
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() != rows * cols * 4 {
            return Err(TensorError::Shape {
                rows,
                cols,
                bytes: bytes.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data: f32_from_le_bytes(bytes),
        })
    }

    pub fn to_b64(&self) -> String {
        B64.encode(self.to_le_bytes())
    }

    pub fn from_b64(rows: usize, cols: usize, text: &str) -> Result<Self, TensorError> {
        Self::from_le_bytes(rows, cols, &b64_decode(text)?)
    }

    /// SHA-256 over shape and little-endian contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn b64_encode(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, TensorError> {
    B64.decode(text).map_err(|e| TensorError::Base64(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vstack_and_wire_roundtrip() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![3.0, 4.0, 5.0, -0.0]).unwrap();
        let s = Matrix::vstack(&a, &b).unwrap();
        assert_eq!(s.rows(), 3);
        assert_eq!(s.row(2), &[5.0, -0.0]);
        let back = Matrix::from_b64(3, 2, &s.to_b64()).unwrap();
        assert_eq!(back.to_le_bytes(), s.to_le_bytes());
        assert!(Matrix::from_b64(2, 2, &s.to_b64()).is_err());
    }
}
