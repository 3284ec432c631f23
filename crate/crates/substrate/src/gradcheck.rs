//! Central finite-difference gradient checks.
//!
//! Relative error for one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; every check
//! returns the maximum over the coordinates it visits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SubstrateError};
use crate::graph::{Feed, Graph, Mode, NodeId, OpContext, Operator, ParamSet};
use crate::tensor::Tensor;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(SubstrateError::Contract(format!("eps must be in (0, 1e-2], got {eps}")))
    }
}

/// Compares `analytic` with central differences of the scalar function `f` at `x`.
pub fn check_fn(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if x.len() != analytic.len() {
        return Err(SubstrateError::Contract("gradient length differs from point".into()));
    }
    let mut point = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let up = f(&point);
        point[i] = x[i] - eps;
        let down = f(&point);
        point[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Checks a single operator at `inputs`.
///
/// The output is reduced to a scalar through a fixed random projection so every
/// output element contributes. Only inputs flagged in `differentiable` are
/// perturbed.
pub fn grad_check_op(
    op: &dyn Operator,
    inputs: &[Tensor],
    differentiable: &[bool],
    eps: f64,
    mode: Mode,
    seed: u64,
) -> Result<f64> {
    check_eps(eps)?;
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = op.output_shape(&shapes).map_err(SubstrateError::Contract)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out: usize = out_shape.iter().product();
    let proj = Tensor::new(&out_shape, (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let eval = |args: &[Tensor]| -> f64 {
        let refs: Vec<&Tensor> = args.iter().collect();
        let mut ctx = OpContext::new(mode);
        let y = op.forward(&refs, &mut ctx);
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let refs: Vec<&Tensor> = inputs.iter().collect();
    let mut ctx = OpContext::new(mode);
    let y = op.forward(&refs, &mut ctx);
    let cache = ctx.take_cache();
    let grads = op.backward(&refs, &y, &proj, cache.as_deref());

    let mut worst: f64 = 0.0;
    let mut point = inputs.to_vec();
    for (slot, flag) in differentiable.iter().enumerate() {
        if !flag {
            continue;
        }
        let analytic = grads
            .get(slot)
            .and_then(|g| g.clone())
            .ok_or_else(|| SubstrateError::Contract(format!("operator gave no gradient for input {slot}")))?;
        for i in 0..inputs[slot].len() {
            let x0 = inputs[slot].data()[i];
            point[slot].data_mut()[i] = x0 + eps;
            let up = eval(&point);
            point[slot].data_mut()[i] = x0 - eps;
            let down = eval(&point);
            point[slot].data_mut()[i] = x0;
            worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Checks the gradient of a scalar graph node with respect to every
/// trainable parameter.
pub fn grad_check_graph(
    graph: &Graph,
    params: &ParamSet,
    feed: &Feed,
    loss: NodeId,
    mode: Mode,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let eval = graph.forward(params, feed, mode)?;
    let grads = graph.backward(&eval, loss)?.into_params();
    drop(eval);
    let mut point = params.clone();
    let mut worst: f64 = 0.0;
    for (name, analytic) in &grads {
        for i in 0..analytic.len() {
            let x0 = params[name].data()[i];
            point.get_mut(name).expect("param").data_mut()[i] = x0 + eps;
            let up = graph.forward(&point, feed, mode)?.value(loss).item();
            point.get_mut(name).expect("param").data_mut()[i] = x0 - eps;
            let down = graph.forward(&point, feed, mode)?.value(loss).item();
            point.get_mut(name).expect("param").data_mut()[i] = x0;
            worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Worst relative error of one operator across several random points.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub max_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values pushed away from `kinks` by at least `margin`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Distinct values spaced at least `1 / n` apart, so a small perturbation
/// never changes which element wins a max.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 2.0 - 1.0).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("shape")
}

type Case = (String, Box<dyn Operator>, Vec<Tensor>, Vec<bool>, Mode);

fn suite_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    use crate::ops::*;
    let mut cases: Vec<Case> = Vec::new();
    let mut push = |name: &str, op: Box<dyn Operator>, inputs: Vec<Tensor>, diff: Vec<bool>, mode: Mode| {
        cases.push((name.to_string(), op, inputs, diff, mode));
    };
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);

    let a = u(rng, &[3, 4]);
    let b = u(rng, &[3, 4]);
    push("add", Box::new(Add), vec![a.clone(), b.clone()], vec![true, true], Mode::Eval);
    push("sub", Box::new(Sub), vec![a.clone(), b.clone()], vec![true, true], Mode::Eval);
    push("mul", Box::new(Mul), vec![a.clone(), b], vec![true, true], Mode::Eval);
    push("scale", Box::new(Scale(-1.7)), vec![a.clone()], vec![true], Mode::Eval);
    push("sum", Box::new(Sum), vec![a.clone()], vec![true], Mode::Eval);
    push("mean", Box::new(Mean), vec![a.clone()], vec![true], Mode::Eval);
    push("flatten", Box::new(Flatten), vec![u(rng, &[2, 2, 3, 3])], vec![true], Mode::Eval);
    push("slice_cols", Box::new(SliceCols { start: 1, len: 2 }), vec![a.clone()], vec![true], Mode::Eval);
    push("pick", Box::new(Pick { indices: vec![3, 0, 2] }), vec![a.clone()], vec![true], Mode::Eval);
    push("gather", Box::new(Gather { indices: vec![2, 0, 2] }), vec![a], vec![true], Mode::Eval);
    push(
        "dense",
        Box::new(Dense),
        vec![u(rng, &[3, 4]), u(rng, &[5, 4]), u(rng, &[5])],
        vec![true; 3],
        Mode::Eval,
    );
    for k in [1, 3, 5] {
        push(
            &format!("conv2d_k{k}"),
            Box::new(Conv2d { kernel: k }),
            vec![u(rng, &[2, 2, 8, 8]), u(rng, &[3, 2, k, k]), u(rng, &[3])],
            vec![true; 3],
            Mode::Eval,
        );
        push(
            &format!("conv_transpose2d_k{k}"),
            Box::new(ConvTranspose2d { kernel: k }),
            vec![u(rng, &[2, 3, 6, 6]), u(rng, &[3, 2, k, k]), u(rng, &[2])],
            vec![true; 3],
            Mode::Eval,
        );
    }
    for k in [1, 3, 7] {
        push(&format!("max_pool_k{k}"), Box::new(MaxPool { kernel: k }), vec![distinct(rng, &[2, 2, 7, 7])], vec![true], Mode::Eval);
        push(&format!("avg_pool_k{k}"), Box::new(AvgPool { kernel: k }), vec![u(rng, &[2, 2, 7, 7])], vec![true], Mode::Eval);
        let side = pooled_len(7, k);
        push(
            &format!("unpool_k{k}"),
            Box::new(Unpool { kernel: k, height: 7, width: 7 }),
            vec![u(rng, &[2, 2, side, side])],
            vec![true],
            Mode::Eval,
        );
    }
    let stats = vec![u(rng, &[3]), uniform(rng, &[3], 0.5, 1.5)];
    for mode in [Mode::Train, Mode::Eval] {
        let mut inputs = vec![uniform(rng, &[4, 3, 3, 3], -2.0, 2.0), uniform(rng, &[3], 0.5, 1.5), u(rng, &[3])];
        inputs.extend(stats.iter().cloned());
        let name = if mode == Mode::Train { "batch_norm_train" } else { "batch_norm_eval" };
        push(name, Box::new(BatchNorm), inputs, vec![true, true, true, false, false], mode);
    }
    push(
        "instance_norm",
        Box::new(InstanceNorm),
        vec![uniform(rng, &[2, 3, 4, 4], -2.0, 2.0), uniform(rng, &[3], 0.5, 1.5), u(rng, &[3])],
        vec![true; 3],
        Mode::Train,
    );
    for act in Activation::ALL {
        // Saturated tails make the central difference itself inaccurate.
        let hi = if act == Activation::Relu6 { 8.0 } else { 3.0 };
        let x = away_from(rng, &[4, 5], -3.0, hi, act.kinks(), 1e-3);
        let op = Act(act);
        let name = op.name().to_string();
        push(&name, Box::new(op), vec![x], vec![true], Mode::Eval);
    }
    push("softmax", Box::new(Softmax), vec![uniform(rng, &[3, 6], -3.0, 3.0)], vec![true], Mode::Eval);
    push("log_softmax", Box::new(LogSoftmax), vec![uniform(rng, &[3, 6], -3.0, 3.0)], vec![true], Mode::Eval);
    push(
        "lstm_cell",
        Box::new(LstmCell),
        vec![u(rng, &[2, 3]), u(rng, &[2, 4]), u(rng, &[2, 4]), u(rng, &[16, 7]), u(rng, &[16])],
        vec![true; 5],
        Mode::Eval,
    );
    cases
}

/// Runs [`grad_check_op`] on every operator of this crate at `points`
/// random points each and reports the worst error per operator.
pub fn operator_suite(points: usize, eps: f64, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<OpReport> = Vec::new();
    for p in 0..points {
        for (i, (name, op, inputs, diff, mode)) in suite_cases(&mut rng).into_iter().enumerate() {
            let err = grad_check_op(op.as_ref(), &inputs, &diff, eps, mode, seed ^ (p as u64) << 20 ^ i as u64)?;
            if p == 0 {
                reports.push(OpReport { name, max_error: err });
            } else {
                reports[i].max_error = reports[i].max_error.max(err);
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{Act, Activation, Dense};

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.1, 0.2, -0.3, 1.0, -1.0, 0.5]).unwrap();
        let w = Tensor::new(&[2, 3], vec![0.3, -0.2, 0.1, 0.7, 0.0, -0.4]).unwrap();
        let b = Tensor::new(&[2], vec![0.05, -0.05]).unwrap();
        let err = grad_check_op(&Dense, &[x, w, b], &[true, true, true], 1e-5, Mode::Eval, 1).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let err = grad_check_op(&Act(Activation::Sigmoid), &[x], &[true], 1e-5, Mode::Eval, 2).unwrap();
        assert!(err < 1e-6);
        let numeric = (crate::ops::sigmoid(1e-5) - crate::ops::sigmoid(-1e-5)) / 2e-5;
        assert!(relative_error(0.25, numeric) < 1e-6);
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        assert!(check_fn(|x| x[0], &[0.0], &[1.0], 0.1).is_err());
    }
}
