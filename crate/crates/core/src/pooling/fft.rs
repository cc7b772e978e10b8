//! Circular convolution and correlation of real sequences, by direct
//! summation for short lengths and an in-place radix-2 FFT otherwise.

use num_complex::Complex64;

/// Lengths at or below this use the O(d²) direct sum.
pub const DIRECT_MAX: usize = 64;

pub fn supported_length(d: usize) -> bool {
    d >= 1 && (d <= DIRECT_MAX || d.is_power_of_two())
}

/// `out[k] = Σ_i x[i]·y[(k − i) mod d]`.
pub fn circular_convolve_direct(x: &[f64], y: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (j, &yv) in y.iter().enumerate() {
            out[(i + j) % d] += xv * yv;
        }
    }
    out
}

/// `out[i] = Σ_k g[k]·y[(k − i) mod d]`, the adjoint of convolving with `y`.
pub fn circular_correlate_direct(g: &[f64], y: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..d).map(|k| g[k] * y[(k + d - i) % d]).sum();
    }
    out
}

/// In-place iterative Cooley–Tukey transform; `inverse` applies the 1/n scale.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 {
            0
        } else {
            i.reverse_bits() >> (usize::BITS - bits)
        };
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let angle = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, angle * k as f64))
            .collect();
        for block in buf.chunks_mut(len) {
            let (lo, hi) = block.split_at_mut(half);
            for ((a, b), w) in lo.iter_mut().zip(hi.iter_mut()).zip(&twiddles) {
                let t = *b * w;
                *b = *a - t;
                *a += t;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }
}

pub fn real_fft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf
}

/// Inverse transform, returning real parts and the largest imaginary residue.
pub fn inverse_to_real(mut spectrum: Vec<Complex64>) -> (Vec<f64>, f64) {
    fft_in_place(&mut spectrum, true);
    let residue = spectrum.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    (spectrum.into_iter().map(|c| c.re).collect(), residue)
}

pub fn circular_convolve(x: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() <= DIRECT_MAX {
        return circular_convolve_direct(x, y);
    }
    let (fx, fy) = (real_fft(x), real_fft(y));
    let (out, _) = inverse_to_real(fx.iter().zip(&fy).map(|(a, b)| a * b).collect());
    out
}

pub fn circular_correlate(g: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(g.len(), y.len());
    if g.len() <= DIRECT_MAX {
        return circular_correlate_direct(g, y);
    }
    let (fg, fy) = (real_fft(g), real_fft(y));
    let (out, _) = inverse_to_real(fg.iter().zip(&fy).map(|(a, b)| a * b.conj()).collect());
    out
}
