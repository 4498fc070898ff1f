//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::Tensor;

pub(crate) const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub(crate) const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `sum(a[i] * b[i])` over the shorter length, in four interleaved lanes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `y += a * x` over `y.len()` elements.
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    let n = y.len();
    for (yv, xv) in y.iter_mut().zip(&x[..n]) {
        *yv += a * xv;
    }
}

/// Direct-summation 2-D convolution (cross-correlation) of a
/// `[c_in, h, w]` input with a `[c_out, c_in, kh, kw]` kernel.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    padding: usize,
) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let oh = h + 2 * padding + 1 - kh;
    let ow = w + 2 * padding + 1 - kw;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; c_out * oh * ow];
    for oc in 0..c_out {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        for ic in 0..c_in {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((oc * c_in + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = valid_range(kx, padding, w, ow);
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        let row = &src[(iy - padding) * w + x_lo + kx - padding..];
                        axpy(&mut plane[oy * ow + x_lo..oy * ow + x_hi], wv, row);
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, oh, ow], out).expect("conv output shape")
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; c_out];
    for oc in 0..c_out {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] = gplane.iter().sum();
        for ic in 0..c_in {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            let gsrc = &mut gx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((oc * c_in + ic) * kh + ky) * kw + kx;
                    let wv = k[kidx];
                    let (x_lo, x_hi) = valid_range(kx, padding, w, ow);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        let start = (iy - padding) * w + x_lo + kx - padding;
                        let len = x_hi - x_lo;
                        let grow = &gplane[oy * ow + x_lo..oy * ow + x_hi];
                        acc += dot(grow, &src[start..start + len]);
                        axpy(&mut gsrc[start..start + len], wv, grow);
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape(), gx).expect("shape"),
        Tensor::new(kernel.shape(), gk).expect("shape"),
        Tensor::new(&[c_out], gb).expect("shape"),
    )
}

/// Output columns `ox` for which `ox + kx - padding` lands inside `[0, w)`.
fn valid_range(kx: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx);
    let hi = (w + padding).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n < 8 {
        // Narrow outputs: dot products against the transposed (small) right factor.
        return matmul_nt(a, &transpose(b, k, n), m, k, n);
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            axpy(orow, av, brow);
        }
    }
    out
}

/// `a [m, k]` times the transpose of `b [n, k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// Transpose of `a [m, k]` times `b [m, n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[p * n..(p + 1) * n], av, brow);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    const BLOCK: usize = 32;
    let mut out = vec![0.0; a.len()];
    for i0 in (0..rows).step_by(BLOCK) {
        for j0 in (0..cols).step_by(BLOCK) {
            for i in i0..(i0 + BLOCK).min(rows) {
                for j in j0..(j0 + BLOCK).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// Decompose `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(input: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(input.shape(), axis);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                out[base + a * inner] /= sum;
            }
        }
    }
    Tensor::new(input.shape(), out).expect("shape")
}

pub(crate) fn softmax_backward(output: &Tensor, grad_out: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(output.shape(), axis);
    let y = output.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                dot += y[base + a * inner] * g[base + a * inner];
            }
            for a in 0..len {
                let idx = base + a * inner;
                gx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    Tensor::new(output.shape(), gx).expect("shape")
}
