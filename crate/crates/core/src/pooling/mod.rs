//! Fusion of the appearance and part streams.
//!
//! Exact bilinear pooling averages the per-location outer products
//! `a_xy ⊗ p_xy` over all `S = H·W` locations and vectorizes them row-major
//! with the appearance index outer: `f[i·C_p + j] = (1/S)·Σ_xy a[i,xy]·p[j,xy]`.
//! The compact variant replaces each outer product by its tensor sketch.

pub mod check;
pub mod fft;
mod sketch;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use sketch::{compact_bilinear, count_sketch, SketchParams};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::streams::FeatureMap;
use crate::tensor::Tensor;

/// Floor applied to the norm in [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Exact,
    Compact,
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(PoolingMode::Exact),
            "compact" => Ok(PoolingMode::Compact),
            other => Err(Error::Config(format!(
                "unknown pooling mode `{other}` (expected exact|compact)"
            ))),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Exact => "exact",
            PoolingMode::Compact => "compact",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledDescriptor {
    pub vector: Tensor,
    pub normalized: bool,
}

pub fn bilinear_pool_exact(a: &FeatureMap, p: &FeatureMap) -> Result<PooledDescriptor> {
    let mut tape = Tape::new();
    let (av, pv) = (tape.constant(a.tensor.clone()), tape.constant(p.tensor.clone()));
    let f = tape.bilinear_pool_exact(av, pv)?;
    Ok(PooledDescriptor {
        vector: tape.value(f).clone(),
        normalized: false,
    })
}

pub fn compact_bilinear_pool(a: &FeatureMap, p: &FeatureMap, params: &Arc<SketchParams>) -> Result<PooledDescriptor> {
    let mut tape = Tape::new();
    let (av, pv) = (tape.constant(a.tensor.clone()), tape.constant(p.tensor.clone()));
    let f = tape.compact_bilinear_pool(av, pv, params)?;
    Ok(PooledDescriptor {
        vector: tape.value(f).clone(),
        normalized: false,
    })
}

/// Scales to unit L2 norm; the denominator is `max(‖f‖₂, 1e−12)`, so the zero
/// vector maps to itself.
pub fn l2_normalize(f: PooledDescriptor) -> PooledDescriptor {
    let norm = f.vector.l2_norm().max(NORM_EPS);
    let data = f.vector.data().iter().map(|v| v / norm).collect();
    PooledDescriptor {
        vector: Tensor::new(f.vector.shape().to_vec(), data).expect("shape preserved"),
        normalized: true,
    }
}

/// Channel vector at flat location `xy` of a `C×S` map.
fn column(data: &[f64], c: usize, s: usize, xy: usize) -> impl Iterator<Item = f64> + '_ {
    (0..c).map(move |k| data[k * s + xy])
}

fn spatial_pair(tape: &Tape, a: Var, p: Var) -> Result<(usize, usize, usize)> {
    let (c_a, ha, wa) = tape.value(a).chw()?;
    let (c_p, hp, wp) = tape.value(p).chw()?;
    if (ha, wa) != (hp, wp) {
        return Err(Error::Config(format!(
            "appearance map is {ha}×{wa} but part map is {hp}×{wp}"
        )));
    }
    Ok((c_a, c_p, ha * wa))
}

impl Tape {
    /// Exact bilinear pooling of `C_a×H×W` and `C_p×H×W` maps into a
    /// length-`C_a·C_p` vector.
    pub fn bilinear_pool_exact(&mut self, a: Var, p: Var) -> Result<Var> {
        let (c_a, c_p, s) = spatial_pair(self, a, p)?;
        let inv = 1.0 / s as f64;
        let (ad, pd) = (self.value(a).data(), self.value(p).data());
        let mut out = vec![0.0; c_a * c_p];
        for i in 0..c_a {
            let ai = &ad[i * s..(i + 1) * s];
            for j in 0..c_p {
                let pj = &pd[j * s..(j + 1) * s];
                out[i * c_p + j] = ai.iter().zip(pj).map(|(x, y)| x * y).sum::<f64>() * inv;
            }
        }
        Ok(self.record(
            &[a, p],
            Tensor::new(vec![c_a * c_p], out)?,
            Box::new(move |inputs, _, g, needs| {
                let (ad, pd) = (inputs[0].data(), inputs[1].data());
                // grad_a[i, xy] = (1/S)·Σ_j g[i, j]·p[j, xy]
                let grad_a = needs[0].then(|| {
                    let mut ga = vec![0.0; c_a * s];
                    for i in 0..c_a {
                        let row = &mut ga[i * s..(i + 1) * s];
                        for j in 0..c_p {
                            let w = g[i * c_p + j] * inv;
                            row.iter_mut()
                                .zip(&pd[j * s..(j + 1) * s])
                                .for_each(|(r, v)| *r += w * v);
                        }
                    }
                    ga
                });
                let grad_p = needs[1].then(|| {
                    let mut gp = vec![0.0; c_p * s];
                    for j in 0..c_p {
                        let row = &mut gp[j * s..(j + 1) * s];
                        for i in 0..c_a {
                            let w = g[i * c_p + j] * inv;
                            row.iter_mut()
                                .zip(&ad[i * s..(i + 1) * s])
                                .for_each(|(r, v)| *r += w * v);
                        }
                    }
                    gp
                });
                vec![grad_a, grad_p]
            }),
        ))
    }

    /// Spatial average of the per-location tensor sketches, a length-`d` vector.
    pub fn compact_bilinear_pool(&mut self, a: Var, p: Var, params: &Arc<SketchParams>) -> Result<Var> {
        let (c_a, c_p, s) = spatial_pair(self, a, p)?;
        if (c_a, c_p) != params.input_dims {
            return Err(Error::Config(format!(
                "sketch expects ({}, {}) channels, maps have ({c_a}, {c_p})",
                params.input_dims.0, params.input_dims.1
            )));
        }
        let d = params.output_dim;
        let inv = 1.0 / s as f64;
        let (ad, pd) = (self.value(a).data(), self.value(p).data());
        let out = if d <= fft::DIRECT_MAX {
            let mut acc = vec![0.0; d];
            for xy in 0..s {
                let sa = params.sketch_a(column(ad, c_a, s, xy));
                let sp = params.sketch_p(column(pd, c_p, s, xy));
                for (o, v) in acc.iter_mut().zip(fft::circular_convolve_direct(&sa, &sp)) {
                    *o += v * inv;
                }
            }
            acc
        } else {
            // the inverse transform is linear, so products are summed in the
            // frequency domain and inverted once
            let mut spectrum = vec![Complex64::new(0.0, 0.0); d];
            for xy in 0..s {
                let fa = fft::real_fft(&params.sketch_a(column(ad, c_a, s, xy)));
                let fp = fft::real_fft(&params.sketch_p(column(pd, c_p, s, xy)));
                for ((acc, x), y) in spectrum.iter_mut().zip(&fa).zip(&fp) {
                    *acc += x * y * inv;
                }
            }
            sketch::real_part_checked(spectrum)?
        };
        let params = Arc::clone(params);
        Ok(self.record(
            &[a, p],
            Tensor::new(vec![d], out)?,
            Box::new(move |inputs, _, g, needs| {
                let (ad, pd) = (inputs[0].data(), inputs[1].data());
                let g_scaled: Vec<f64> = g.iter().map(|v| v * inv).collect();
                let g_spec = (d > fft::DIRECT_MAX).then(|| fft::real_fft(&g_scaled));
                let correlate = |other: &[f64]| match &g_spec {
                    None => fft::circular_correlate_direct(&g_scaled, other),
                    Some(gs) => {
                        let fo = fft::real_fft(other);
                        fft::inverse_to_real(gs.iter().zip(&fo).map(|(x, y)| x * y.conj()).collect()).0
                    }
                };
                let mut grad_a = needs[0].then(|| vec![0.0; c_a * s]);
                let mut grad_p = needs[1].then(|| vec![0.0; c_p * s]);
                for xy in 0..s {
                    let sa = params.sketch_a(column(ad, c_a, s, xy));
                    let sp = params.sketch_p(column(pd, c_p, s, xy));
                    if let Some(ga) = grad_a.as_mut() {
                        let gsa = correlate(&sp);
                        for i in 0..c_a {
                            ga[i * s + xy] = f64::from(params.s_a[i]) * gsa[params.h_a[i]];
                        }
                    }
                    if let Some(gp) = grad_p.as_mut() {
                        let gsp = correlate(&sa);
                        for j in 0..c_p {
                            gp[j * s + xy] = f64::from(params.s_p[j]) * gsp[params.h_p[j]];
                        }
                    }
                }
                vec![grad_a, grad_p]
            }),
        ))
    }

    /// `x / max(‖x‖₂, 1e−12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let raw_norm = src.l2_norm();
        let norm = raw_norm.max(NORM_EPS);
        let value =
            Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v / norm).collect()).expect("shape preserved");
        self.record(
            &[x],
            value,
            Box::new(move |_, y, g, _| {
                if raw_norm <= NORM_EPS {
                    return vec![Some(g.iter().map(|v| v / NORM_EPS).collect())];
                }
                let yd = y.data();
                let proj: f64 = yd.iter().zip(g).map(|(a, b)| a * b).sum();
                vec![Some(g.iter().zip(yd).map(|(gv, yv)| (gv - yv * proj) / norm).collect())]
            }),
        )
    }
}
