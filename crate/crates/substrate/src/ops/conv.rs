//! Stride-1 "same"-padded 2-D convolution and its transpose.
//!
//! Both operators lower to `im2col` + gemm. Column buffers are rebuilt in
//! `backward` instead of being cached: at 256 channels and a 7×7 kernel a
//! cached batch would run to hundreds of megabytes.

use std::any::Any;

use super::basic::arity;
use super::linalg::gemm;
use crate::graph::{OpContext, Operator};
use crate::tensor::Tensor;

type Grads = Vec<Option<Tensor>>;
type AnyCache<'a> = Option<&'a (dyn Any + Send + Sync)>;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, H*W]` column matrix.
fn im2col(img: &[f64], g: Geometry, col: &mut [f64]) {
    let (h, w, k, p) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        out[x as usize] = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
fn col2im(col: &[f64], g: Geometry, img: &mut [f64]) {
    let (h, w, k, p) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.channels {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// `y[Cout, HW] = W[Cout, Cin*k*k] * im2col(x)` for one image.
fn conv_image(x: &[f64], weight: &[f64], cout: usize, g: Geometry, col: &mut Vec<f64>, y: &mut [f64]) {
    if g.k == 1 {
        gemm(cout, g.channels, g.hw(), 1.0, weight, false, x, false, 1.0, y);
    } else {
        col.resize(g.col_rows() * g.hw(), 0.0);
        im2col(x, g, col);
        gemm(cout, g.col_rows(), g.hw(), 1.0, weight, false, col, false, 1.0, y);
    }
}

/// Accumulates `dx += col2im(W^T dy)` for one image.
fn conv_image_input_grad(dy: &[f64], weight: &[f64], cout: usize, g: Geometry, col: &mut Vec<f64>, dx: &mut [f64]) {
    if g.k == 1 {
        gemm(g.channels, cout, g.hw(), 1.0, weight, true, dy, false, 1.0, dx);
    } else {
        col.resize(g.col_rows() * g.hw(), 0.0);
        gemm(g.col_rows(), cout, g.hw(), 1.0, weight, true, dy, false, 0.0, col);
        col2im(col, g, dx);
    }
}

/// Accumulates `dW += dy * im2col(x)^T` for one image.
fn conv_image_weight_grad(x: &[f64], dy: &[f64], cout: usize, g: Geometry, col: &mut Vec<f64>, dw: &mut [f64]) {
    if g.k == 1 {
        gemm(cout, g.hw(), g.channels, 1.0, dy, false, x, true, 1.0, dw);
    } else {
        col.resize(g.col_rows() * g.hw(), 0.0);
        im2col(x, g, col);
        gemm(cout, g.hw(), g.col_rows(), 1.0, dy, false, col, true, 1.0, dw);
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], hw: usize) {
    for (plane, b) in y.chunks_mut(hw).zip(bias.iter().cycle()) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(grad: &Tensor, channels: usize, hw: usize) -> Tensor {
    let mut db = vec![0.0; channels];
    for (i, plane) in grad.data().chunks(hw).enumerate() {
        db[i % channels] += plane.iter().sum::<f64>();
    }
    Tensor::new(&[channels], db).expect("bias grad")
}

fn conv_shape(inputs: &[&[usize]], k: usize, transposed: bool) -> Result<Vec<usize>, String> {
    arity(inputs, 3)?;
    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
    if x.len() != 4 || w.len() != 4 || b.len() != 1 {
        return Err(format!("need x [B,C,H,W], w rank 4, b rank 1; got {x:?}, {w:?}, {b:?}"));
    }
    if k % 2 == 0 {
        return Err(format!("same padding needs an odd kernel, got {k}"));
    }
    if w[2] != k || w[3] != k {
        return Err(format!("weight {w:?} does not match kernel {k}"));
    }
    let (cin, cout) = if transposed { (w[0], w[1]) } else { (w[1], w[0]) };
    if x[1] != cin {
        return Err(format!("input has {} channels, weight {w:?} expects {cin}", x[1]));
    }
    if b[0] != cout {
        return Err(format!("bias length {} does not match {cout} output channels", b[0]));
    }
    Ok(vec![x[0], cout, x[2], x[3]])
}

/// Convolution: `x [B,Cin,H,W]`, `w [Cout,Cin,k,k]`, `b [Cout]` -> `[B,Cout,H,W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: usize,
}

impl Operator for Conv2d {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        conv_shape(inputs, self.kernel, false)
    }

    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let s = x.shape();
        let cout = w.shape()[0];
        let g = Geometry { channels: s[1], h: s[2], w: s[3], k: self.kernel };
        let mut y = Tensor::zeros(&[s[0], cout, s[2], s[3]]);
        let mut col = Vec::new();
        let out_len = cout * g.hw();
        for (img, out) in x.data().chunks(x.row_len()).zip(y.data_mut().chunks_mut(out_len)) {
            conv_image(img, w.data(), cout, g, &mut col, out);
        }
        add_channel_bias(y.data_mut(), b.data(), g.hw());
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let (x, w) = (inputs[0], inputs[1]);
        let s = x.shape();
        let cout = w.shape()[0];
        let g = Geometry { channels: s[1], h: s[2], w: s[3], k: self.kernel };
        let mut dx = Tensor::zeros(s);
        let mut dw = Tensor::zeros(w.shape());
        let mut col = Vec::new();
        let out_len = cout * g.hw();
        let in_len = x.row_len();
        for i in 0..s[0] {
            let dy = &grad.data()[i * out_len..(i + 1) * out_len];
            let img = &x.data()[i * in_len..(i + 1) * in_len];
            conv_image_weight_grad(img, dy, cout, g, &mut col, dw.data_mut());
            let dimg = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
            conv_image_input_grad(dy, w.data(), cout, g, &mut col, dimg);
        }
        let db = channel_bias_grad(grad, cout, g.hw());
        vec![Some(dx), Some(dw), Some(db)]
    }
}

/// Transposed convolution: `x [B,Cin,H,W]`, `w [Cin,Cout,k,k]`, `b [Cout]` -> `[B,Cout,H,W]`.
///
/// With stride 1 and same padding this is the adjoint of [`Conv2d`] with the
/// weight read as a `[Cin, Cout]` convolution kernel.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kernel: usize,
}

impl Operator for ConvTranspose2d {
    fn name(&self) -> &str {
        "conv_transpose2d"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        conv_shape(inputs, self.kernel, true)
    }

    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let s = x.shape();
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        // Geometry of the adjoint convolution, which maps Cout -> Cin.
        let g = Geometry { channels: cout, h: s[2], w: s[3], k: self.kernel };
        let mut y = Tensor::zeros(&[s[0], cout, s[2], s[3]]);
        let mut col = Vec::new();
        let in_len = x.row_len();
        let out_len = cout * g.hw();
        for i in 0..s[0] {
            let img = &x.data()[i * in_len..(i + 1) * in_len];
            let out = &mut y.data_mut()[i * out_len..(i + 1) * out_len];
            conv_image_input_grad(img, w.data(), cin, g, &mut col, out);
        }
        add_channel_bias(y.data_mut(), b.data(), g.hw());
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let (x, w) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let g = Geometry { channels: cout, h: s[2], w: s[3], k: self.kernel };
        let mut dx = Tensor::zeros(s);
        let mut dw = Tensor::zeros(w.shape());
        let mut col = Vec::new();
        let in_len = x.row_len();
        let out_len = cout * g.hw();
        for i in 0..s[0] {
            let dy = &grad.data()[i * out_len..(i + 1) * out_len];
            let img = &x.data()[i * in_len..(i + 1) * in_len];
            let dimg = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
            conv_image(dy, w.data(), cin, g, &mut col, dimg);
            conv_image_weight_grad(dy, img, cin, g, &mut col, dw.data_mut());
        }
        let db = channel_bias_grad(grad, cout, g.hw());
        vec![Some(dx), Some(dw), Some(db)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Tensor {
        let s = x.shape();
        let (bs, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let cout = w.shape()[0];
        let p = (k / 2) as isize;
        let mut y = Tensor::zeros(&[bs, cout, h, wd]);
        for n in 0..bs {
            for o in 0..cout {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for a in 0..k {
                                for bb in 0..k {
                                    let si = i as isize + a as isize - p;
                                    let sj = j as isize + bb as isize - p;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * cin + c) * h + si as usize) * wd + sj as usize];
                                    let wv = w.data()[((o * cin + c) * k + a) * k + bb];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((n * cout + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for k in [1, 3, 5] {
            let x = seq(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
            let w = seq(&[4, 3, k, k], |i| (i as f64 * 0.11).cos());
            let b = seq(&[4], |i| i as f64 * 0.1);
            let mut ctx = OpContext::new(crate::graph::Mode::Eval);
            let y = Conv2d { kernel: k }.forward(&[&x, &w, &b], &mut ctx);
            let want = naive_conv(&x, &w, &b, k);
            for (a, e) in y.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for zero bias.
        let k = 3;
        let x = seq(&[1, 2, 4, 4], |i| (i as f64 * 0.7).sin());
        let y = seq(&[1, 3, 4, 4], |i| (i as f64 * 0.3).cos());
        let w = seq(&[3, 2, k, k], |i| (i as f64 * 0.19).sin());
        let mut ctx = OpContext::new(crate::graph::Mode::Eval);
        let cx = Conv2d { kernel: k }.forward(&[&x, &w, &Tensor::zeros(&[3])], &mut ctx);
        let ty = ConvTranspose2d { kernel: k }.forward(&[&y, &w, &Tensor::zeros(&[2])], &mut ctx);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
