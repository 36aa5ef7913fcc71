//! Flat real tensors with an optional channel axis, plus file I/O.
//!
//! The on-disk format is raw little-endian binary32 in row-major order with a
//! JSON sidecar carrying the shape and channel axis. Rank-1 tensors may also
//! be read from CSV (one value per line).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor over binary64, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
    channel_axis: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    channel_axis: Option<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>, channel_axis: Option<usize>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("bad shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        if let Some(axis) = channel_axis {
            if axis >= shape.len() {
                return Err(Error::InvalidTensor(format!(
                    "channel axis {axis} out of range for rank {}",
                    shape.len()
                )));
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        Ok(Self {
            data,
            shape,
            channel_axis,
        })
    }

    /// Rank-1 tensor without a channel axis.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n], None)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channel_axis(&self) -> Option<usize> {
        self.channel_axis
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of channels along the channel axis, or 1 when absent.
    pub fn channel_count(&self) -> usize {
        match self.channel_axis {
            Some(axis) => self.shape[axis],
            None => 1,
        }
    }

    /// Channel index of the flat element `i` (0 when no channel axis is set).
    pub fn channel_of(&self, i: usize) -> usize {
        match self.channel_axis {
            Some(axis) => {
                let inner: usize = self.shape[axis + 1..].iter().product();
                (i / inner) % self.shape[axis]
            }
            None => 0,
        }
    }

    /// Flat indices of every element in channel `ch`.
    pub fn channel_indices(&self, ch: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.channel_of(i) == ch).collect()
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(data, self.shape.clone(), self.channel_axis)
    }

    /// Mean of squared elementwise differences against `other`.
    pub fn mse_against(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes raw little-endian binary32 data plus the JSON sidecar.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = Sidecar {
        shape: t.shape().to_vec(),
        channel_axis: t.channel_axis(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`]. Falls back to CSV (one value
/// per line, rank-1) when no sidecar exists and the payload is valid UTF-8.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let meta: Sidecar = serde_json::from_slice(&fs::read(sidecar)?)?;
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::InvalidTensor(format!(
                "binary payload length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(data, meta.shape, meta.channel_axis)
    } else {
        let text = fs::read_to_string(path).map_err(|_| {
            Error::InvalidTensor(format!(
                "{}: no JSON sidecar and not a readable CSV",
                path.display()
            ))
        })?;
        let mut data = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                Error::InvalidTensor(format!("{}:{}: bad value", path.display(), lineno + 1))
            })?;
            data.push(v);
        }
        if data.is_empty() {
            return Err(Error::InvalidTensor(format!(
                "{}: empty tensor file",
                path.display()
            )));
        }
        Tensor::from_vec(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_indexing() {
        // Shape [2, 3], channel axis 1: channels are columns.
        let t = Tensor::new((0..6).map(|v| v as f64).collect(), vec![2, 3], Some(1)).unwrap();
        assert_eq!(t.channel_count(), 3);
        assert_eq!(t.channel_indices(0), vec![0, 3]);
        assert_eq!(t.channel_indices(2), vec![2, 5]);
    }

    #[test]
    fn mse_basics() {
        let a = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        assert_eq!(a.mse_against(&a).unwrap(), 0.0);
        assert_eq!(a.mse_against(&b).unwrap(), 1.0);
        let c = Tensor::from_vec(vec![0.0]).unwrap();
        assert!(a.mse_against(&c).is_err());
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(Tensor::new(vec![1.0], vec![2], None).is_err());
        assert!(Tensor::new(vec![1.0, 2.0], vec![2], Some(1)).is_err());
        assert!(Tensor::from_vec(vec![f64::NAN]).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let dir = std::env::temp_dir().join("fpquant_tensor_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bin");
        let t = Tensor::new(vec![0.5, -1.25, 3.0, 0.0], vec![2, 2], Some(0)).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn csv_rank1_read() {
        let dir = std::env::temp_dir().join("fpquant_tensor_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        std::fs::write(&path, "1.5\n-2.0\n0.25\n").unwrap();
        let t = read_tensor(&path).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0, 0.25]);
    }
}
