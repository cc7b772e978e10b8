//! Dense row-major `f64` tensors and the TSR1 file format.
//!
//! TSR1 layout: 8-byte magic `TSR1\0\0\0\0`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the row-major payload as
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const TSR1_MAGIC: [u8; 8] = *b"TSR1\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    /// Samples every element uniformly from `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(low..high)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Config(format!(
                "expected a C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_tsr1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(&TSR1_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &extent in &self.shape {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_tsr1_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor> {
        let bad = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 12 || bytes[..8] != TSR1_MAGIC {
            return Err(bad("missing TSR1 magic"));
        }
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let rank = word(8)? as usize;
        if rank == 0 {
            return Err(bad("rank must be at least 1"));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(word(12 + 4 * i)? as usize);
        }
        let payload = &bytes[12 + 4 * rank..];
        let numel: usize = shape.iter().product();
        if payload.len() != numel * 8 {
            return Err(bad(&format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                numel * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
    }

    pub fn save_tsr1(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsr1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_tsr1(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_tsr1_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_payload() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_tsr1_bytes();
        assert_eq!(&bytes[..8], b"TSR1\0\0\0\0");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let t = Tensor::ones(&[3, 2]);
        let bytes = t.to_tsr1_bytes();
        let err = Tensor::from_tsr1_bytes(&bytes[..bytes.len() - 1], Path::new("x.tsr"));
        assert!(matches!(err, Err(Error::Format { .. })));
        let err = Tensor::from_tsr1_bytes(b"TSR0\0\0\0\0\0\0\0\0", Path::new("x.tsr"));
        assert!(matches!(err, Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn tsr1_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(&shape, -1e3, 1e3, &mut rng);
            let back = Tensor::from_tsr1_bytes(&t.to_tsr1_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
