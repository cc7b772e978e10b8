//! Differentiable primitives: convolution, activations, dense algebra and
//! spatial reshaping.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution over a `C_in×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[ci, h, w], &[co, kci, kh, kw]) = (input, kernel) else {
            return Err(Error::Config(format!(
                "conv2d expects C×H×W input and C_out×C_in×k×k kernels, got {input:?} and {kernel:?}"
            )));
        };
        if kci != ci {
            return Err(Error::Config(format!(
                "conv2d kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if kh != kw {
            return Err(Error::Config(format!("conv2d kernels must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        if kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(Error::Config(format!(
                "conv2d kernel {kh} exceeds padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            in_channels: ci,
            in_height: h,
            in_width: w,
            out_channels: co,
            kernel: kh,
            stride,
            padding,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output indices `o` with `0 <= o*stride + offset - padding < extent`.
    fn valid_range(&self, offset: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.padding as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= extent - 1
        let hi_incl = (extent as isize - 1 - shift).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_extent as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    /// Visits every (output offset, input offset) pair touched by tap
    /// `(ky, kx)`, row by row, as `(out_row_start, in_row_start, len, in_step)`.
    #[inline]
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (oy_lo, oy_hi) = self.valid_range(ky, self.in_height, oh);
        let (ox_lo, ox_hi) = self.valid_range(kx, self.in_width, ow);
        if ox_lo >= ox_hi {
            return;
        }
        let len = ox_hi - ox_lo;
        for oy in oy_lo..oy_hi {
            let iy = oy * self.stride + ky - self.padding;
            let ix0 = ox_lo * self.stride + kx - self.padding;
            f(oy * ow + ox_lo, iy * self.in_width + ix0, len);
        }
    }
}

/// Patch matrix with one row per kernel tap `(ci, ky, kx)` and one column
/// per output position; padding positions stay zero.
fn im2col(geom: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let plane = geom.out_height() * geom.out_width();
    let in_plane = geom.in_height * geom.in_width;
    let (k, s) = (geom.kernel, geom.stride);
    let mut cols = vec![0.0; geom.in_channels * k * k * plane];
    for ci in 0..geom.in_channels {
        let src = &input[ci * in_plane..(ci + 1) * in_plane];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                geom.for_each_row(ky, kx, |o, i, len| {
                    if s == 1 {
                        dst[o..o + len].copy_from_slice(&src[i..i + len]);
                    } else {
                        for (j, d) in dst[o..o + len].iter_mut().enumerate() {
                            *d = src[i + j * s];
                        }
                    }
                });
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
fn col2im(geom: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let plane = geom.out_height() * geom.out_width();
    let in_plane = geom.in_height * geom.in_width;
    let (k, s) = (geom.kernel, geom.stride);
    let mut grad_in = vec![0.0; geom.in_channels * in_plane];
    for ci in 0..geom.in_channels {
        let dst = &mut grad_in[ci * in_plane..(ci + 1) * in_plane];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &cols[r * plane..(r + 1) * plane];
                geom.for_each_row(ky, kx, |o, i, len| {
                    for (j, v) in src[o..o + len].iter().enumerate() {
                        dst[i + j * s] += v;
                    }
                });
            }
        }
    }
    grad_in
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += alpha * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Zero-padded strided cross-correlation plus per-channel bias.
pub fn conv2d_forward(geom: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = geom.out_height() * geom.out_width();
    let taps = geom.in_channels * geom.kernel * geom.kernel;
    let cols = im2col(geom, input);
    let mut out = vec![0.0; geom.out_channels * plane];
    for co in 0..geom.out_channels {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.fill(bias[co]);
        for (r, &w) in kernel[co * taps..(co + 1) * taps].iter().enumerate() {
            if w != 0.0 {
                axpy(dst, w, &cols[r * plane..(r + 1) * plane]);
            }
        }
    }
    out
}

fn conv2d_backward_input(geom: &ConvGeometry, kernel: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let plane = geom.out_height() * geom.out_width();
    let taps = geom.in_channels * geom.kernel * geom.kernel;
    let mut grad_cols = vec![0.0; taps * plane];
    for co in 0..geom.out_channels {
        let g = &grad_out[co * plane..(co + 1) * plane];
        for (r, &w) in kernel[co * taps..(co + 1) * taps].iter().enumerate() {
            axpy(&mut grad_cols[r * plane..(r + 1) * plane], w, g);
        }
    }
    col2im(geom, &grad_cols)
}

fn conv2d_backward_kernel(geom: &ConvGeometry, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let plane = geom.out_height() * geom.out_width();
    let taps = geom.in_channels * geom.kernel * geom.kernel;
    let cols = im2col(geom, input);
    let mut grad_k = vec![0.0; geom.out_channels * taps];
    for co in 0..geom.out_channels {
        let g = &grad_out[co * plane..(co + 1) * plane];
        for r in 0..taps {
            grad_k[co * taps + r] = dot(g, &cols[r * plane..(r + 1) * plane]);
        }
    }
    grad_k
}

/// Naive `m×n · n×p` product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            for (o, bv) in row.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Config(format!("{op}: shape mismatch {sa:?} vs {sb:?}")));
    }
    Ok(sa.to_vec())
}

impl Tape {
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        if self.value(bias).numel() != geom.out_channels {
            return Err(Error::Config(format!(
                "conv2d bias has {} entries for {} output channels",
                self.value(bias).numel(),
                geom.out_channels
            )));
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![geom.out_channels, geom.out_height(), geom.out_width()], out)?;
        Ok(self.record(
            &[input, kernel, bias],
            value,
            Box::new(move |inputs, _, g, needs| {
                let plane = geom.out_height() * geom.out_width();
                vec![
                    needs[0].then(|| conv2d_backward_input(&geom, inputs[1].data(), g)),
                    needs[1].then(|| conv2d_backward_kernel(&geom, inputs[0].data(), g)),
                    needs[2].then(|| g.chunks(plane).map(|c| c.iter().sum()).collect()),
                ]
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.record(
            &[x],
            value,
            Box::new(|inputs, _, g, _| {
                let grad = inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, n], &[n2, p]) = (self.value(a).shape(), self.value(b).shape()) else {
            return Err(Error::Config(format!(
                "matmul expects two matrices, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        };
        if n != n2 {
            return Err(Error::Config(format!(
                "matmul inner dimensions differ: {m}×{n} · {n2}×{p}"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, n, p);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.record(
            &[a, b],
            value,
            Box::new(move |inputs, _, g, needs| {
                vec![
                    needs[0].then(|| matmul_raw(g, &transpose(inputs[1].data(), n, p), m, p, n)),
                    needs[1].then(|| matmul_raw(&transpose(inputs[0].data(), m, n), g, n, m, p)),
                ]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_shape(self, a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.record(
            &[a, b],
            Tensor::new(shape, data)?,
            Box::new(|_, _, g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_shape(self, a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.record(
            &[a, b],
            Tensor::new(shape, data)?,
            Box::new(|inputs, _, g, needs| {
                let prod = |other: &Tensor| other.data().iter().zip(g).map(|(o, gv)| o * gv).collect();
                vec![needs[0].then(|| prod(inputs[1])), needs[1].then(|| prod(inputs[0]))]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * factor).collect())
            .expect("shape preserved");
        self.record(
            &[x],
            value,
            Box::new(move |_, _, g, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let n = self.value(x).numel();
        self.record(
            &[x],
            Tensor::scalar(total),
            Box::new(move |_, _, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.record(&[x], value, Box::new(|_, _, g, _| vec![Some(g.to_vec())])))
    }

    /// `Σ_i weight_i · term_i` over scalar terms, accumulated left to right
    /// starting from zero.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let value = self.value(v);
            if !value.is_scalar() {
                return Err(Error::Usage(format!(
                    "weighted_sum terms must be scalars, got shape {:?}",
                    value.shape()
                )));
            }
            total += w * value.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        Ok(self.record(
            &vars,
            Tensor::scalar(total),
            Box::new(move |_, _, g, needs| {
                weights
                    .iter()
                    .zip(needs)
                    .map(|(w, &need)| need.then(|| vec![w * g[0]]))
                    .collect()
            }),
        ))
    }

    /// Mean over the spatial extents of a `C×H×W` map, giving a length-`C` vector.
    pub fn spatial_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.record(
            &[x],
            Tensor::new(vec![c], data)?,
            Box::new(move |_, _, g, _| {
                let inv = 1.0 / plane as f64;
                vec![Some(
                    g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect(),
                )]
            }),
        ))
    }

    /// Stacks `C_i×H×W` maps along the channel axis in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Config("concat_channels needs at least one tensor".into()));
        };
        let (_, h, w) = self.value(first).chw()?;
        let mut sizes = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            let (c, hx, wx) = self.value(x).chw()?;
            if (hx, wx) != (h, w) {
                return Err(Error::Config(format!(
                    "concat_channels: spatial extents {hx}×{wx} differ from {h}×{w}"
                )));
            }
            sizes.push(c * h * w);
            data.extend_from_slice(self.value(x).data());
        }
        let channels = data.len() / (h * w);
        Ok(self.record(
            xs,
            Tensor::new(vec![channels, h, w], data)?,
            Box::new(move |_, _, g, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let part = need.then(|| g[offset..offset + n].to_vec());
                        offset += n;
                        part
                    })
                    .collect()
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct six-loop convolution with explicit zero padding.
    fn naive_conv(input: &Tensor, kernel: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
        let (ci, h, w) = input.chw().unwrap();
        let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel.data()[((o * ci + c) * k + ky) * k + kx]
                                    * input.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        t(&[co, oh, ow], &out)
    }

    fn run_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (i, k, b) = (
            tape.constant(input.clone()),
            tape.constant(kernel.clone()),
            tape.constant(bias.clone()),
        );
        let out = tape.conv2d(i, k, b, stride, pad)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn conv_scaled_identity() {
        let out = run_conv(
            &Tensor::ones(&[1, 3, 3]),
            &t(&[1, 1, 1, 1], &[2.0]),
            &t(&[1], &[0.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out, Tensor::full(&[1, 3, 3], 2.0));
    }

    #[test]
    fn conv_full_window_sum() {
        let out = run_conv(
            &t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]),
            &Tensor::ones(&[1, 1, 2, 2]),
            &t(&[1], &[0.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out, t(&[1, 1, 1], &[10.0]));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (3, 8, 8, 4, 3, 2, 1),
            (4, 8, 8, 4, 3, 1, 1),
            (2, 7, 5, 3, 3, 2, 0),
            (1, 5, 6, 2, 1, 1, 0),
            (4, 8, 8, 2, 5, 3, 2),
            (2, 4, 4, 3, 3, 1, 2),
        ];
        for (ci, h, w, co, k, s, p) in cases {
            let input = Tensor::uniform(&[ci, h, w], -1.0, 1.0, &mut rng);
            let kernel = Tensor::uniform(&[co, ci, k, k], -1.0, 1.0, &mut rng);
            let bias = Tensor::uniform(&[co], -1.0, 1.0, &mut rng);
            let got = run_conv(&input, &kernel, &bias, s, p).unwrap();
            let want = naive_conv(&input, &kernel, bias.data(), s, p);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        let input = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let out = run_conv(
            &input,
            &Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng),
            &Tensor::zeros(&[4]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[4, 4, 4]);
    }

    #[test]
    fn conv_rejects_bad_configuration() {
        let input = Tensor::ones(&[2, 4, 4]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(
            run_conv(&input, &Tensor::ones(&[1, 3, 3, 3]), &bias, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(run_conv(&input, &Tensor::ones(&[1, 2, 5, 5]), &bias, 1, 0).is_err());
        assert!(run_conv(&input, &Tensor::ones(&[1, 2, 3, 3]), &bias, 0, 0).is_err());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            Tensor::uniform(&[2, 5, 6], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[3], -1.0, 1.0, &mut rng),
        ];
        let weights = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let report = finite_diff_check(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
                let w = tape.constant(weights.clone());
                let z = tape.mul(y, w)?;
                Ok(tape.sum(z))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let neg = tape.constant(Tensor::full(&[2, 2], -3.0));
        let z = tape.relu(neg);
        assert_eq!(tape.value(z), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn relu_symmetry_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 5], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let nx = tape.scale(xv, -1.0);
        let (a, b) = (tape.relu(xv), tape.relu(nx));
        let s = tape.add(a, b).unwrap();
        for (v, orig) in tape.value(s).data().iter().zip(x.data()) {
            assert_eq!(*v, orig.abs());
        }
    }

    #[test]
    fn matmul_cases() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bv = tape.constant(b.clone());
        let prod = tape.matmul(eye, bv).unwrap();
        assert_eq!(tape.value(prod), &b);
        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let dot = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(dot), &t(&[1, 1], &[11.0]));
        assert!(matches!(tape.matmul(row, row), Err(Error::Config(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::uniform(&[5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[7, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((tape.value(c).data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[5.0]));
        let p = tape.spatial_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.spatial_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        let x = tape.constant(t(&[1, 2, 2], &[4.0, 2.0, 1.0, 3.0]));
        let p = tape.spatial_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::ones(&[1, 2, 2]));
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let single = tape.concat_channels(&[ones]).unwrap();
        assert_eq!(tape.value(single), &Tensor::ones(&[1, 2, 2]));
        let both = tape.concat_channels(&[ones, zeros]).unwrap();
        assert_eq!(tape.value(both).data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let a = tape.constant(Tensor::zeros(&[3, 8, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 8, 4]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[5, 8, 4]);
        let d = tape.constant(Tensor::zeros(&[2, 8, 3]));
        assert!(matches!(tape.concat_channels(&[a, d]), Err(Error::Config(_))));
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let grad_of = |wf: f64, wg: f64| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let sq = tape.mul(xv, xv).unwrap();
            let f = tape.sum(sq);
            let r = tape.relu(xv);
            let g = tape.sum(r);
            let loss = tape.weighted_sum(&[(f, wf), (g, wg)]).unwrap();
            tape.backward(loss).unwrap().wrt(xv)
        };
        let (gf, gg, combined) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(alpha, beta));
        for i in 0..6 {
            let expect = alpha * gf.data()[i] + beta * gg.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-15);
        }
    }
}
