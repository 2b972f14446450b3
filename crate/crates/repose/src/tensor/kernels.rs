//! Raw numeric kernels shared by the tape ops and the no-grad paths.
//!
//! Convolutions are lowered to im2col + gemm. `col2im` is the exact adjoint
//! of `im2col`, which is what makes transposed convolution and the conv
//! backward passes line up with each other.

use super::Tensor;

/// Row-major C = alpha * A(m,k) * B(k,n) + beta * C.
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 2);
    assert_eq!(b.shape().len(), 2);
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul {:?} x {:?}", a.shape(), b.shape());
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, 1.0, a.data(), b.data(), 0.0, out.data_mut());
    out
}

pub fn transpose2d(a: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 2);
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = Tensor::zeros(&[c, r]);
    let dst = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "input {input} smaller than kernel {kernel} with pad {pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower `[C,H,W]` into `[C*kh*kw, Ho*Wo]` patches (zero padding).
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let cols_w = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * cols_w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ci * kh + dy) * kw + dx) * cols_w;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst_row + ox] = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add patches back into `[C,H,W]`.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let cols_w = ho * wo;
    debug_assert_eq!(cols.len(), c * kh * kw * cols_w);
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ci * kh + dy) * kw + dx) * cols_w;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst_row + ix as usize] += cols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// conv2d forward. x: [Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout].
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin2, "conv2d channels: input {cin}, weight {cin2}");
    assert_eq!(b.len(), cout);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let cols = im2col(x.data(), cin, h, wd, kh, kw, stride, pad);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    gemm(cout, cin * kh * kw, ho * wo, 1.0, w.data(), &cols, 0.0, out.data_mut());
    let dst = out.data_mut();
    for co in 0..cout {
        let bias = b.data()[co];
        for v in &mut dst[co * ho * wo..(co + 1) * ho * wo] {
            *v += bias;
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_grad_x(g: &Tensor, w: &Tensor, in_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    // cols_grad = W^T (Cin*k*k, Cout) * g (Cout, Ho*Wo)
    let wt = transpose2d(&w.reshaped(&[cout, cin * kh * kw]));
    let mut cols = vec![0.0; cin * kh * kw * ho * wo];
    gemm(cin * kh * kw, cout, ho * wo, 1.0, wt.data(), g.data(), 0.0, &mut cols);
    Tensor::from_vec(in_shape, col2im(&cols, cin, h, wd, kh, kw, stride, pad))
}

/// Gradient of conv2d w.r.t. its weights.
pub fn conv2d_grad_w(g: &Tensor, x: &Tensor, w_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let cols = im2col(x.data(), cin, h, wd, kh, kw, stride, pad);
    // gw = g (Cout, P) * cols^T (P, Cin*k*k)
    let cols_t = transpose2d(&Tensor::from_vec(&[cin * kh * kw, ho * wo], cols));
    let mut gw = Tensor::zeros(w_shape);
    gemm(cout, ho * wo, cin * kh * kw, 1.0, g.data(), cols_t.data(), 0.0, gw.data_mut());
    gw
}

/// Per-output-channel sum of the gradient (conv bias gradient).
pub fn grad_bias(g: &Tensor) -> Tensor {
    let (cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut gb = Tensor::zeros(&[cout]);
    let dst = gb.data_mut();
    for co in 0..cout {
        dst[co] = g.data()[co * ho * wo..(co + 1) * ho * wo].iter().sum();
    }
    gb
}

/// Transposed conv forward. x: [Cin,H,W], w: [Cin,Cout,kh,kw], b: [Cout].
/// Output spatial size: (H-1)*stride + k - 2*pad.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cin2, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin2, "conv_transpose2d channels: input {cin}, weight {cin2}");
    assert_eq!(b.len(), cout);
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    // cols = W^T (Cout*k*k, Cin) * x (Cin, H*W), then scatter onto the output grid.
    let wt = transpose2d(&w.reshaped(&[cin, cout * kh * kw]));
    let mut cols = vec![0.0; cout * kh * kw * h * wd];
    gemm(cout * kh * kw, cin, h * wd, 1.0, wt.data(), x.data(), 0.0, &mut cols);
    let mut out = Tensor::from_vec(&[cout, ho, wo], col2im(&cols, cout, ho, wo, kh, kw, stride, pad));
    let dst = out.data_mut();
    for co in 0..cout {
        let bias = b.data()[co];
        for v in &mut dst[co * ho * wo..(co + 1) * ho * wo] {
            *v += bias;
        }
    }
    out
}

pub fn conv_transpose2d_grad_x(g: &Tensor, w: &Tensor, in_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    // gx = W (Cin, Cout*k*k) * im2col(g)
    let cols = im2col(g.data(), cout, ho, wo, kh, kw, stride, pad);
    let mut gx = Tensor::zeros(in_shape);
    gemm(cin, cout * kh * kw, h * wd, 1.0, w.data(), &cols, 0.0, gx.data_mut());
    gx
}

pub fn conv_transpose2d_grad_w(g: &Tensor, x: &Tensor, w_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (cin, cout, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    // gw = x (Cin, H*W) * im2col(g)^T (H*W, Cout*k*k)
    let cols = im2col(g.data(), cout, ho, wo, kh, kw, stride, pad);
    let cols_t = transpose2d(&Tensor::from_vec(&[cout * kh * kw, h * wd], cols));
    let mut gw = Tensor::zeros(w_shape);
    gemm(cin, h * wd, cout * kh * kw, 1.0, x.data(), cols_t.data(), 0.0, gw.data_mut());
    gw
}

/// 2x2 max pool, stride 2. Returns (output, argmax flat indices into the input plane).
pub fn maxpool2x2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2 needs even spatial size, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut idx = vec![0u32; c * ho * wo];
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                dst[o] = best;
                idx[o] = best_i as u32;
            }
        }
    }
    (out, idx)
}
