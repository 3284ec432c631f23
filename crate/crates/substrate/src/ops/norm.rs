//! Batch and instance normalization with affine parameters.

use std::any::Any;

use crate::graph::{Mode, OpContext, Operator};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic per training step.
pub const RUNNING_MOMENTUM: f64 = 0.99;

type Grads = Vec<Option<Tensor>>;
type AnyCache<'a> = Option<&'a (dyn Any + Send + Sync)>;

/// `[B, C, ...]` viewed as `(batch, channels, spatial)`.
fn dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn check_affine(inputs: &[&[usize]], n: usize) -> Result<Vec<usize>, String> {
    if inputs.len() != n {
        return Err(format!("expects {n} inputs, got {}", inputs.len()));
    }
    let x = inputs[0];
    if x.len() < 2 {
        return Err(format!("normalization needs [B,C,...], got {x:?}"));
    }
    for (i, s) in inputs[1..].iter().enumerate() {
        if *s != [x[1]] {
            return Err(format!("input {} must be [{}], got {s:?}", i + 1, x[1]));
        }
    }
    Ok(x.to_vec())
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Batch normalization over every axis except the channel axis.
///
/// Inputs: `x, gamma, beta, running_mean, running_var`. In training mode the
/// batch statistics are used and the running statistics are moved towards
/// them; in evaluation mode the running statistics are used as constants.
#[derive(Debug, Clone, Default)]
pub struct BatchNorm;

impl BatchNorm {
    fn visit(shape: &[usize], mut f: impl FnMut(usize, usize)) {
        let (b, c, s) = dims(shape);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for i in base..base + s {
                    f(ci, i);
                }
            }
        }
    }
}

impl Operator for BatchNorm {
    fn name(&self) -> &str {
        "batch_norm"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        check_affine(inputs, 5)
    }

    fn forward(&self, inputs: &[&Tensor], ctx: &mut OpContext) -> Tensor {
        let (x, gamma, beta) = (inputs[0], inputs[1].data(), inputs[2].data());
        let (b, c, s) = dims(x.shape());
        let count = (b * s) as f64;
        let batch_stats = ctx.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            Self::visit(x.shape(), |ci, i| mean[ci] += x.data()[i]);
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0.0; c];
            Self::visit(x.shape(), |ci, i| var[ci] += (x.data()[i] - mean[ci]).powi(2));
            var.iter_mut().for_each(|v| *v /= count);
            let blend = |old: &Tensor, new: &[f64]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| RUNNING_MOMENTUM * o + (1.0 - RUNNING_MOMENTUM) * n)
                    .collect();
                Tensor::new(old.shape(), data).expect("running statistic shape")
            };
            ctx.update_input(3, blend(inputs[3], &mean));
            ctx.update_input(4, blend(inputs[4], &var));
            (mean, var)
        } else {
            (inputs[3].data().to_vec(), inputs[4].data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = Tensor::zeros(x.shape());
        Self::visit(x.shape(), |ci, i| {
            xhat[i] = (x.data()[i] - mean[ci]) * inv_std[ci];
            y.data_mut()[i] = gamma[ci] * xhat[i] + beta[ci];
        });
        ctx.save(NormCache {
            xhat,
            inv_std,
            batch_stats,
        });
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, cache: AnyCache) -> Grads {
        let cache = cache
            .and_then(|c| c.downcast_ref::<NormCache>())
            .expect("batch_norm forward cache");
        let x = inputs[0];
        let gamma = inputs[1].data();
        let (b, c, s) = dims(x.shape());
        let count = (b * s) as f64;
        let g = grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        Self::visit(x.shape(), |ci, i| {
            dgamma[ci] += g[i] * cache.xhat[i];
            dbeta[ci] += g[i];
        });
        let mut dx = Tensor::zeros(x.shape());
        if cache.batch_stats {
            Self::visit(x.shape(), |ci, i| {
                let dxhat = g[i] * gamma[ci];
                dx.data_mut()[i] = cache.inv_std[ci] / count
                    * (count * dxhat - gamma[ci] * dbeta[ci] - cache.xhat[i] * gamma[ci] * dgamma[ci]);
            });
        } else {
            Self::visit(x.shape(), |ci, i| {
                dx.data_mut()[i] = g[i] * gamma[ci] * cache.inv_std[ci];
            });
        }
        vec![
            Some(dx),
            Some(Tensor::from_vec(dgamma)),
            Some(Tensor::from_vec(dbeta)),
            None,
            None,
        ]
    }
}

/// Instance normalization: statistics per sample and channel over the
/// spatial axes, followed by a per-channel affine map. Inputs: `x, gamma, beta`.
#[derive(Debug, Clone, Default)]
pub struct InstanceNorm;

impl Operator for InstanceNorm {
    fn name(&self) -> &str {
        "instance_norm"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        check_affine(inputs, 3)
    }

    fn forward(&self, inputs: &[&Tensor], ctx: &mut OpContext) -> Tensor {
        let (x, gamma, beta) = (inputs[0], inputs[1].data(), inputs[2].data());
        let (_, c, s) = dims(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / s);
        for (p, plane) in x.data().chunks(s).enumerate() {
            let mean = plane.iter().sum::<f64>() / s as f64;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            let ci = p % c;
            for (j, v) in plane.iter().enumerate() {
                let i = p * s + j;
                xhat[i] = (v - mean) * inv;
                y.data_mut()[i] = gamma[ci] * xhat[i] + beta[ci];
            }
        }
        ctx.save(NormCache {
            xhat,
            inv_std,
            batch_stats: true,
        });
        y
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, cache: AnyCache) -> Grads {
        let cache = cache
            .and_then(|c| c.downcast_ref::<NormCache>())
            .expect("instance_norm forward cache");
        let x = inputs[0];
        let gamma = inputs[1].data();
        let (_, c, s) = dims(x.shape());
        let n = s as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = Tensor::zeros(x.shape());
        for (p, g) in grad.data().chunks(s).enumerate() {
            let ci = p % c;
            let xhat = &cache.xhat[p * s..(p + 1) * s];
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
            dgamma[ci] += sum_gx;
            dbeta[ci] += sum_g;
            let scale = gamma[ci] * cache.inv_std[p] / n;
            let out = &mut dx.data_mut()[p * s..(p + 1) * s];
            for j in 0..s {
                out[j] = scale * (n * g[j] - sum_g - xhat[j] * sum_gx);
            }
        }
        vec![Some(dx), Some(Tensor::from_vec(dgamma)), Some(Tensor::from_vec(dbeta))]
    }
}
