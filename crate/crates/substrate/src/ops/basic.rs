//! Elementwise arithmetic, reductions, reshaping and dense layers.

use std::any::Any;

use super::linalg::gemm;
use crate::graph::{OpContext, Operator};
use crate::tensor::Tensor;

type Grads = Vec<Option<Tensor>>;
type AnyCache<'a> = Option<&'a (dyn Any + Send + Sync)>;

pub(crate) fn arity(inputs: &[&[usize]], n: usize) -> Result<(), String> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(format!("expects {n} inputs, got {}", inputs.len()))
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
pub struct Add;
#[derive(Debug, Clone)]
pub struct Sub;
#[derive(Debug, Clone)]
pub struct Mul;

fn same_shape(inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
    arity(inputs, 2)?;
    if inputs[0] != inputs[1] {
        return Err(format!("operand shapes differ: {:?} vs {:?}", inputs[0], inputs[1]));
    }
    Ok(inputs[0].to_vec())
}

fn binary_forward(kind: Binary, a: &Tensor, b: &Tensor) -> Tensor {
    match kind {
        Binary::Add => a.zip_map(b, |x, y| x + y),
        Binary::Sub => a.zip_map(b, |x, y| x - y),
        Binary::Mul => a.zip_map(b, |x, y| x * y),
    }
}

fn binary_backward(kind: Binary, a: &Tensor, b: &Tensor, g: &Tensor) -> Grads {
    match kind {
        Binary::Add => vec![Some(g.clone()), Some(g.clone())],
        Binary::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Binary::Mul => vec![Some(g.zip_map(b, |x, y| x * y)), Some(g.zip_map(a, |x, y| x * y))],
    }
}

macro_rules! binary_op {
    ($ty:ident, $kind:expr, $name:literal) => {
        impl Operator for $ty {
            fn name(&self) -> &str {
                $name
            }
            fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
                same_shape(inputs)
            }
            fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
                binary_forward($kind, inputs[0], inputs[1])
            }
            fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
                binary_backward($kind, inputs[0], inputs[1], grad)
            }
        }
    };
}

binary_op!(Add, Binary::Add, "add");
binary_op!(Sub, Binary::Sub, "sub");
binary_op!(Mul, Binary::Mul, "mul");

/// Multiplies by a constant.
#[derive(Debug, Clone)]
pub struct Scale(pub f64);

impl Operator for Scale {
    fn name(&self) -> &str {
        "scale"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        Ok(inputs[0].to_vec())
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        inputs[0].map(|v| v * self.0)
    }
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        vec![Some(grad.map(|v| v * self.0))]
    }
}

/// Sum of all elements, producing shape `[1]`.
#[derive(Debug, Clone)]
pub struct Sum;

/// Mean of all elements, producing shape `[1]`.
#[derive(Debug, Clone)]
pub struct Mean;

impl Operator for Sum {
    fn name(&self) -> &str {
        "sum"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        Ok(vec![1])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        Tensor::scalar(inputs[0].sum())
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

impl Operator for Mean {
    fn name(&self) -> &str {
        "mean"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        Ok(vec![1])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        Tensor::scalar(inputs[0].sum() / inputs[0].len() as f64)
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let n = inputs[0].len() as f64;
        vec![Some(Tensor::full(inputs[0].shape(), grad.item() / n))]
    }
}

/// Collapses all non-leading dimensions: `[B, ...] -> [B, prod(...)]`.
#[derive(Debug, Clone)]
pub struct Flatten;

impl Operator for Flatten {
    fn name(&self) -> &str {
        "flatten"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        let s = inputs[0];
        Ok(vec![s[0], s[1..].iter().product::<usize>().max(1)])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        Tensor::new(&[x.batch(), x.row_len()], x.data().to_vec()).expect("flatten keeps length")
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        vec![Some(grad.reshaped(inputs[0].shape()).expect("flatten keeps length"))]
    }
}

/// Columns `[start, start + len)` of a rank-2 tensor.
#[derive(Debug, Clone)]
pub struct SliceCols {
    pub start: usize,
    pub len: usize,
}

impl Operator for SliceCols {
    fn name(&self) -> &str {
        "slice_cols"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        let s = inputs[0];
        if s.len() != 2 || self.start + self.len > s[1] || self.len == 0 {
            return Err(format!(
                "cannot take columns {}..{} of {:?}",
                self.start,
                self.start + self.len,
                s
            ));
        }
        Ok(vec![s[0], self.len])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let mut data = Vec::with_capacity(x.batch() * self.len);
        for b in 0..x.batch() {
            data.extend_from_slice(&x.row(b)[self.start..self.start + self.len]);
        }
        Tensor::new(&[x.batch(), self.len], data).expect("slice shape")
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let x = inputs[0];
        let cols = x.shape()[1];
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..x.batch() {
            let dst = &mut dx.data_mut()[b * cols + self.start..b * cols + self.start + self.len];
            dst.copy_from_slice(grad.row(b));
        }
        vec![Some(dx)]
    }
}

/// Picks one column per row: `[B, K] -> [B]`.
#[derive(Debug, Clone)]
pub struct Pick {
    pub indices: Vec<usize>,
}

impl Operator for Pick {
    fn name(&self) -> &str {
        "pick"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        let s = inputs[0];
        if s.len() != 2 || s[0] != self.indices.len() {
            return Err(format!("need [{}, K] input, got {:?}", self.indices.len(), s));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= s[1]) {
            return Err(format!("index {bad} out of range for width {}", s[1]));
        }
        Ok(vec![s[0]])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let v = self.indices.iter().enumerate().map(|(b, &i)| x.row(b)[i]).collect();
        Tensor::from_vec(v)
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let x = inputs[0];
        let k = x.shape()[1];
        let mut dx = Tensor::zeros(x.shape());
        for (b, &i) in self.indices.iter().enumerate() {
            dx.data_mut()[b * k + i] = grad.data()[b];
        }
        vec![Some(dx)]
    }
}

/// Row lookup in an embedding table: `table [V, D] -> [len(indices), D]`.
#[derive(Debug, Clone)]
pub struct Gather {
    pub indices: Vec<usize>,
}

impl Operator for Gather {
    fn name(&self) -> &str {
        "gather"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        let s = inputs[0];
        if s.len() != 2 {
            return Err(format!("embedding table must be rank 2, got {s:?}"));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= s[0]) {
            return Err(format!("row {bad} out of range for {} rows", s[0]));
        }
        Ok(vec![self.indices.len(), s[1]])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        inputs[0].select_rows(&self.indices).expect("indices checked")
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let table = inputs[0];
        let d = table.shape()[1];
        let mut dt = Tensor::zeros(table.shape());
        for (r, &i) in self.indices.iter().enumerate() {
            for j in 0..d {
                dt.data_mut()[i * d + j] += grad.data()[r * d + j];
            }
        }
        vec![Some(dt)]
    }
}

/// Affine map `x W^T + b` with `x [B, in]`, `W [out, in]`, `b [out]`.
#[derive(Debug, Clone)]
pub struct Dense;

impl Operator for Dense {
    fn name(&self) -> &str {
        "dense"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 3)?;
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        if x.len() != 2 || w.len() != 2 || b.len() != 1 {
            return Err(format!("dense needs [B,in], [out,in], [out]; got {x:?}, {w:?}, {b:?}"));
        }
        if x[1] != w[1] || w[0] != b[0] {
            return Err(format!("dense dimension mismatch: {x:?}, {w:?}, {b:?}"));
        }
        Ok(vec![x[0], w[0]])
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (bs, din, dout) = (x.batch(), x.shape()[1], w.shape()[0]);
        let mut y = vec![0.0; bs * dout];
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
        gemm(bs, din, dout, 1.0, x.data(), false, w.data(), true, 1.0, &mut y);
        Tensor::new(&[bs, dout], y).expect("dense shape")
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let (x, w) = (inputs[0], inputs[1]);
        let (bs, din, dout) = (x.batch(), x.shape()[1], w.shape()[0]);
        let mut dx = vec![0.0; bs * din];
        gemm(bs, dout, din, 1.0, grad.data(), false, w.data(), false, 0.0, &mut dx);
        let mut dw = vec![0.0; dout * din];
        gemm(dout, bs, din, 1.0, grad.data(), true, x.data(), false, 0.0, &mut dw);
        let mut db = vec![0.0; dout];
        for row in grad.data().chunks(dout) {
            for (acc, g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        vec![
            Some(Tensor::new(x.shape(), dx).expect("dx")),
            Some(Tensor::new(w.shape(), dw).expect("dw")),
            Some(Tensor::new(&[dout], db).expect("db")),
        ]
    }
}

/// Softmax over the last dimension.
#[derive(Debug, Clone)]
pub struct Softmax;

/// Log-softmax over the last dimension.
#[derive(Debug, Clone)]
pub struct LogSoftmax;

pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

impl Operator for Softmax {
    fn name(&self) -> &str {
        "softmax"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        Ok(inputs[0].to_vec())
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let k = last_dim(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(k).zip(y.data_mut().chunks_mut(k)) {
            log_softmax_row(src, dst);
            dst.iter_mut().for_each(|v| *v = v.exp());
        }
        y
    }
    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let k = last_dim(out.shape());
        let mut dx = Tensor::zeros(out.shape());
        for ((y, g), d) in out
            .data()
            .chunks(k)
            .zip(grad.data().chunks(k))
            .zip(dx.data_mut().chunks_mut(k))
        {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for i in 0..k {
                d[i] = y[i] * (g[i] - dot);
            }
        }
        vec![Some(dx)]
    }
}

impl Operator for LogSoftmax {
    fn name(&self) -> &str {
        "log_softmax"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        arity(inputs, 1)?;
        Ok(inputs[0].to_vec())
    }
    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let x = inputs[0];
        let k = last_dim(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(k).zip(y.data_mut().chunks_mut(k)) {
            log_softmax_row(src, dst);
        }
        y
    }
    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _c: AnyCache) -> Grads {
        let k = last_dim(out.shape());
        let mut dx = Tensor::zeros(out.shape());
        for ((y, g), d) in out
            .data()
            .chunks(k)
            .zip(grad.data().chunks(k))
            .zip(dx.data_mut().chunks_mut(k))
        {
            let gsum: f64 = g.iter().sum();
            for i in 0..k {
                d[i] = g[i] - y[i].exp() * gsum;
            }
        }
        vec![Some(dx)]
    }
}
