use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fft;
use crate::error::{Error, Result};

/// Frozen hash and sign tables of a tensor sketch over `C_a × C_p` outer products.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchParams {
    pub input_dims: (usize, usize),
    pub output_dim: usize,
    pub h_a: Vec<usize>,
    pub s_a: Vec<i8>,
    pub h_p: Vec<usize>,
    pub s_p: Vec<i8>,
    pub seed: u64,
}

impl SketchParams {
    /// Draws independent uniform buckets and Rademacher signs from `seed`.
    pub fn generate(c_a: usize, c_p: usize, d: usize, seed: u64) -> Result<Self> {
        check_dims(c_a, c_p, d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = |n: usize| -> (Vec<usize>, Vec<i8>) {
            let h = (0..n).map(|_| rng.gen_range(0..d)).collect();
            let s = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            (h, s)
        };
        let (h_a, s_a) = table(c_a);
        let (h_p, s_p) = table(c_p);
        Ok(SketchParams {
            input_dims: (c_a, c_p),
            output_dim: d,
            h_a,
            s_a,
            h_p,
            s_p,
            seed,
        })
    }

    /// Collision-free tables with `d = C_a·C_p`: appearance channel `i` maps
    /// to bucket `i·C_p` and part channel `j` to bucket `j`, so product
    /// `(i, j)` lands in bucket `i·C_p + j` with sign `s_a[i]·s_p[j]`.
    pub fn aligned(c_a: usize, c_p: usize, seed: u64) -> Result<Self> {
        let d = c_a * c_p;
        let mut params = Self::generate(c_a, c_p, d, seed)?;
        params.h_a = (0..c_a).map(|i| i * c_p).collect();
        params.h_p = (0..c_p).collect();
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (c_a, c_p) = self.input_dims;
        check_dims(c_a, c_p, self.output_dim)?;
        let mut problems = Vec::new();
        for (name, h, s, n) in [("a", &self.h_a, &self.s_a, c_a), ("p", &self.h_p, &self.s_p, c_p)] {
            if h.len() != n || s.len() != n {
                problems.push(format!(
                    "table {name} has {}/{} entries, expected {n}",
                    h.len(),
                    s.len()
                ));
            }
            if let Some(b) = h.iter().find(|&&b| b >= self.output_dim) {
                problems.push(format!("table h_{name} bucket {b} outside [0, {})", self.output_dim));
            }
            if s.iter().any(|&v| v != 1 && v != -1) {
                problems.push(format!("table s_{name} holds a value other than ±1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("sketch tables serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: SketchParams = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub(crate) fn sketch_a(&self, x: impl Iterator<Item = f64>) -> Vec<f64> {
        scatter(x, &self.h_a, &self.s_a, self.output_dim)
    }

    pub(crate) fn sketch_p(&self, x: impl Iterator<Item = f64>) -> Vec<f64> {
        scatter(x, &self.h_p, &self.s_p, self.output_dim)
    }
}

fn check_dims(c_a: usize, c_p: usize, d: usize) -> Result<()> {
    if c_a == 0 || c_p == 0 {
        return Err(Error::Config(format!(
            "sketch input dims must be positive, got ({c_a}, {c_p})"
        )));
    }
    if !fft::supported_length(d) {
        return Err(Error::Config(format!(
            "sketch dimension {d} must be in 1..={} or a power of two",
            fft::DIRECT_MAX
        )));
    }
    Ok(())
}

fn scatter(x: impl Iterator<Item = f64>, h: &[usize], s: &[i8], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for ((v, &bucket), &sign) in x.zip(h).zip(s) {
        out[bucket] += f64::from(sign) * v;
    }
    out
}

/// `out[k] = Σ_{i : h[i] = k} s[i]·x[i]`.
pub fn count_sketch(x: &[f64], h: &[usize], s: &[i8], d: usize) -> Result<Vec<f64>> {
    if h.len() != x.len() || s.len() != x.len() {
        return Err(Error::Config(format!(
            "count sketch tables have {}/{} entries for an input of length {}",
            h.len(),
            s.len(),
            x.len()
        )));
    }
    if d == 0 || h.iter().any(|&b| b >= d) {
        return Err(Error::Config(format!("count sketch buckets must lie in [0, {d})")));
    }
    Ok(scatter(x.iter().copied(), h, s, d))
}

/// Tensor sketch of `vec(a ⊗ p)`: circular convolution of the two count sketches.
pub fn compact_bilinear(a: &[f64], p: &[f64], params: &SketchParams) -> Result<Vec<f64>> {
    let (c_a, c_p) = params.input_dims;
    if a.len() != c_a || p.len() != c_p {
        return Err(Error::Config(format!(
            "compact bilinear expects vectors of length ({c_a}, {c_p}), got ({}, {})",
            a.len(),
            p.len()
        )));
    }
    let sa = params.sketch_a(a.iter().copied());
    let sp = params.sketch_p(p.iter().copied());
    if params.output_dim <= fft::DIRECT_MAX {
        return Ok(fft::circular_convolve_direct(&sa, &sp));
    }
    let (fa, fp) = (fft::real_fft(&sa), fft::real_fft(&sp));
    let spectrum: Vec<Complex64> = fa.iter().zip(&fp).map(|(x, y)| x * y).collect();
    real_part_checked(spectrum)
}

/// Inverse transform whose imaginary residue must vanish for real inputs.
pub(crate) fn real_part_checked(spectrum: Vec<Complex64>) -> Result<Vec<f64>> {
    let (out, residue) = fft::inverse_to_real(spectrum);
    let scale = out.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if residue > 1e-9 * scale {
        return Err(Error::Numeric(format!(
            "inverse FFT left imaginary residue {residue:e}"
        )));
    }
    Ok(out)
}
