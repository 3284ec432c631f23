//! A single LSTM step.

use std::any::Any;

use super::activation::sigmoid;
use super::linalg::gemm;
use crate::graph::{OpContext, Operator};
use crate::tensor::Tensor;

/// One LSTM step with gate order (input, forget, cell, output).
///
/// Inputs: `x [B, I]`, `h [B, H]`, `c [B, H]`, `weight [4H, I+H]`, `bias [4H]`.
/// The output `[B, 2H]` holds the new hidden state in its first `H` columns
/// and the new cell state in the last `H`.
#[derive(Debug, Clone, Default)]
pub struct LstmCell;

struct LstmCache {
    xh: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn split(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

impl Operator for LstmCell {
    fn name(&self) -> &str {
        "lstm_cell"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x, h, c, w, b] = inputs else {
            return Err(format!("expects 5 inputs, got {}", inputs.len()));
        };
        if x.len() != 2 || h.len() != 2 || c.len() != 2 {
            return Err("x, h and c must be rank 2".into());
        }
        let (batch, hid) = split(h);
        if x[0] != batch || *c != [batch, hid] {
            return Err(format!("inconsistent state shapes x {x:?}, h {h:?}, c {c:?}"));
        }
        if *w != [4 * hid, x[1] + hid] || *b != [4 * hid] {
            return Err(format!("weight {w:?} / bias {b:?} do not fit hidden size {hid}"));
        }
        Ok(vec![batch, 2 * hid])
    }

    fn forward(&self, inputs: &[&Tensor], ctx: &mut OpContext) -> Tensor {
        let (x, h, c, w, b) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (batch, ni) = split(x.shape());
        let hid = h.shape()[1];
        let width = ni + hid;
        let mut xh = Vec::with_capacity(batch * width);
        for r in 0..batch {
            xh.extend_from_slice(x.row(r));
            xh.extend_from_slice(h.row(r));
        }
        let mut gates = Vec::with_capacity(batch * 4 * hid);
        for _ in 0..batch {
            gates.extend_from_slice(b.data());
        }
        gemm(batch, width, 4 * hid, 1.0, &xh, false, w.data(), true, 1.0, &mut gates);
        let mut out = Tensor::zeros(&[batch, 2 * hid]);
        let mut tanh_c = vec![0.0; batch * hid];
        for r in 0..batch {
            let z = &mut gates[r * 4 * hid..(r + 1) * 4 * hid];
            for j in 0..hid {
                z[j] = sigmoid(z[j]);
                z[hid + j] = sigmoid(z[hid + j]);
                z[2 * hid + j] = z[2 * hid + j].tanh();
                z[3 * hid + j] = sigmoid(z[3 * hid + j]);
            }
            let row = &mut out.data_mut()[r * 2 * hid..(r + 1) * 2 * hid];
            for j in 0..hid {
                let cn = z[hid + j] * c.data()[r * hid + j] + z[j] * z[2 * hid + j];
                let tc = cn.tanh();
                tanh_c[r * hid + j] = tc;
                row[j] = z[3 * hid + j] * tc;
                row[hid + j] = cn;
            }
        }
        ctx.save(LstmCache { xh, gates, tanh_c });
        out
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, cache: AnyCache) -> Grads {
        let cache = cache
            .and_then(|c| c.downcast_ref::<LstmCache>())
            .expect("lstm_cell forward cache");
        let (x, c, w) = (inputs[0], inputs[2], inputs[3]);
        let (batch, ni) = split(x.shape());
        let hid = c.shape()[1];
        let width = ni + hid;
        let mut dz = vec![0.0; batch * 4 * hid];
        let mut dc = Tensor::zeros(c.shape());
        for r in 0..batch {
            let g = &grad.data()[r * 2 * hid..(r + 1) * 2 * hid];
            let z = &cache.gates[r * 4 * hid..(r + 1) * 4 * hid];
            let d = &mut dz[r * 4 * hid..(r + 1) * 4 * hid];
            for j in 0..hid {
                let (i, f, gg, o) = (z[j], z[hid + j], z[2 * hid + j], z[3 * hid + j]);
                let tc = cache.tanh_c[r * hid + j];
                let dh = g[j];
                let dcn = g[hid + j] + dh * o * (1.0 - tc * tc);
                d[j] = dcn * gg * i * (1.0 - i);
                d[hid + j] = dcn * c.data()[r * hid + j] * f * (1.0 - f);
                d[2 * hid + j] = dcn * i * (1.0 - gg * gg);
                d[3 * hid + j] = dh * tc * o * (1.0 - o);
                dc.data_mut()[r * hid + j] = dcn * f;
            }
        }
        let mut dw = Tensor::zeros(w.shape());
        gemm(4 * hid, batch, width, 1.0, &dz, true, &cache.xh, false, 0.0, dw.data_mut());
        let mut db = Tensor::zeros(&[4 * hid]);
        for row in dz.chunks(4 * hid) {
            for (a, v) in db.data_mut().iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut dxh = vec![0.0; batch * width];
        gemm(batch, 4 * hid, width, 1.0, &dz, false, w.data(), false, 0.0, &mut dxh);
        let mut dx = Tensor::zeros(x.shape());
        let mut dh = Tensor::zeros(c.shape());
        for r in 0..batch {
            dx.data_mut()[r * ni..(r + 1) * ni].copy_from_slice(&dxh[r * width..r * width + ni]);
            dh.data_mut()[r * hid..(r + 1) * hid].copy_from_slice(&dxh[r * width + ni..(r + 1) * width]);
        }
        vec![Some(dx), Some(dh), Some(dc), Some(dw), Some(db)]
    }
}

type Grads = Vec<Option<Tensor>>;
type AnyCache<'a> = Option<&'a (dyn Any + Send + Sync)>;
