//! Pooling and nearest-neighbour unpooling over `[B, C, H, W]` tensors.
//!
//! A 1×1 pool is the identity. Larger (odd) kernels use stride 2 with
//! `(k-1)/2` padding, so each spatial side becomes `ceil(side / 2)`.
//! Padded cells never win a max and are excluded from averages.

use std::any::Any;

use super::basic::arity;
use crate::graph::{OpContext, Operator};
use crate::tensor::Tensor;

type Grads = Vec<Option<Tensor>>;
type AnyCache<'a> = Option<&'a (dyn Any + Send + Sync)>;

pub fn pool_stride(kernel: usize) -> usize {
    if kernel == 1 {
        1
    } else {
        2
    }
}

/// Spatial side length after pooling.
pub fn pooled_len(len: usize, kernel: usize) -> usize {
    if kernel == 1 {
        len
    } else {
        len.div_ceil(2)
    }
}

fn pool_shape(inputs: &[&[usize]], kernel: usize) -> Result<Vec<usize>, String> {
    arity(inputs, 1)?;
    let s = inputs[0];
    if s.len() != 4 {
        return Err(format!("pooling needs [B,C,H,W], got {s:?}"));
    }
    if kernel % 2 == 0 {
        return Err(format!("pool kernel must be odd, got {kernel}"));
    }
    Ok(vec![s[0], s[1], pooled_len(s[2], kernel), pooled_len(s[3], kernel)])
}

/// Visits each output cell with the in-bounds input offsets of its window.
fn for_each_window(h: usize, w: usize, kernel: usize, mut f: impl FnMut(usize, &[usize])) {
    let (oh, ow) = (pooled_len(h, kernel), pooled_len(w, kernel));
    let stride = pool_stride(kernel) as isize;
    let pad = (kernel / 2) as isize;
    let mut window = Vec::with_capacity(kernel * kernel);
    for oy in 0..oh {
        for ox in 0..ow {
            window.clear();
            for a in 0..kernel as isize {
                let y = oy as isize * stride - pad + a;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for b in 0..kernel as isize {
                    let x = ox as isize * stride - pad + b;
                    if x >= 0 && x < w as isize {
                        window.push(y as usize * w + x as usize);
                    }
                }
            }
            f(oy * ow + ox, &window);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub kernel: usize,
}

impl Operator for MaxPool {
    fn name(&self) -> &str {
        "max_pool"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        pool_shape(inputs, self.kernel)
    }

    fn forward(&self, inputs: &[&Tensor], ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (pooled_len(h, self.kernel), pooled_len(w, self.kernel));
        let mut y = Tensor::zeros(&[s[0], s[1], oh, ow]);
        let mut argmax = vec![0usize; y.len()];
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            let out = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            let arg = &mut argmax[p * oh * ow..(p + 1) * oh * ow];
            for_each_window(h, w, self.kernel, |o, window| {
                let mut best = window[0];
                for &i in &window[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out[o] = plane[best];
                arg[o] = p * h * w + best;
            });
        }
        ctx.save(argmax);
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, cache: AnyCache) -> Grads {
        let argmax = cache
            .and_then(|c| c.downcast_ref::<Vec<usize>>())
            .expect("max_pool forward cache");
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (g, &i) in grad.data().iter().zip(argmax) {
            dx.data_mut()[i] += g;
        }
        vec![Some(dx)]
    }
}

#[derive(Debug, Clone)]
pub struct AvgPool {
    pub kernel: usize,
}

impl Operator for AvgPool {
    fn name(&self) -> &str {
        "avg_pool"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        pool_shape(inputs, self.kernel)
    }

    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (pooled_len(h, self.kernel), pooled_len(w, self.kernel));
        let mut y = Tensor::zeros(&[s[0], s[1], oh, ow]);
        for (plane, out) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(oh * ow)) {
            for_each_window(h, w, self.kernel, |o, window| {
                out[o] = window.iter().map(|&i| plane[i]).sum::<f64>() / window.len() as f64;
            });
        }
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (pooled_len(h, self.kernel), pooled_len(w, self.kernel));
        let mut dx = Tensor::zeros(s);
        for (g, d) in grad.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
            for_each_window(h, w, self.kernel, |o, window| {
                let share = g[o] / window.len() as f64;
                for &i in window {
                    d[i] += share;
                }
            });
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbour unpooling back to a target spatial size.
///
/// Inverts the shape change of a pool with the same kernel: identity for a
/// 1×1 kernel, otherwise each input cell is copied into a 2×2 block and the
/// result is cropped to `height × width`.
#[derive(Debug, Clone)]
pub struct Unpool {
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl Operator for Unpool {
    fn name(&self) -> &str {
        "unpool"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        let s = inputs[0];
        if s.len() != 4 {
            return Err(format!("unpooling needs [B,C,H,W], got {s:?}"));
        }
        let (eh, ew) = (pooled_len(self.height, self.kernel), pooled_len(self.width, self.kernel));
        if s[2] != eh || s[3] != ew {
            return Err(format!(
                "cannot unpool {}x{} to {}x{} with kernel {}",
                s[2], s[3], self.height, self.width, self.kernel
            ));
        }
        Ok(vec![s[0], s[1], self.height, self.width])
    }

    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let s = x.shape();
        let (ih, iw) = (s[2], s[3]);
        let (h, w) = (self.height, self.width);
        let stride = pool_stride(self.kernel);
        let mut y = Tensor::zeros(&[s[0], s[1], h, w]);
        for (src, dst) in x.data().chunks(ih * iw).zip(y.data_mut().chunks_mut(h * w)) {
            for yy in 0..h {
                for xx in 0..w {
                    dst[yy * w + xx] = src[(yy / stride) * iw + xx / stride];
                }
            }
        }
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let s = inputs[0].shape();
        let (ih, iw) = (s[2], s[3]);
        let (h, w) = (self.height, self.width);
        let stride = pool_stride(self.kernel);
        let mut dx = Tensor::zeros(s);
        for (g, d) in grad.data().chunks(h * w).zip(dx.data_mut().chunks_mut(ih * iw)) {
            for yy in 0..h {
                for xx in 0..w {
                    d[(yy / stride) * iw + xx / stride] += g[yy * w + xx];
                }
            }
        }
        vec![Some(dx)]
    }
}
