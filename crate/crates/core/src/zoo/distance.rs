//! Reconstruction distances with per-pixel maps and analytic gradients.
//!
//! Every distance is a per-sample sum, except SSIM which is `1 - mean SSIM`
//! over channels and pixels. Residuals are `xhat - x`.

use std::any::Any;

use aod_substrate::{OpContext, Operator, Tensor};

use crate::error::{AodError, Result};
use crate::space::Distance;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Inclusive-exclusive 2-D prefix sums for clipped box filters.
struct BoxFilter {
    h: usize,
    w: usize,
    radius: usize,
}

impl BoxFilter {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, radius: SSIM_WINDOW / 2 }
    }

    fn bounds(&self, y: usize, x: usize) -> (usize, usize, usize, usize) {
        (
            y.saturating_sub(self.radius),
            (y + self.radius + 1).min(self.h),
            x.saturating_sub(self.radius),
            (x + self.radius + 1).min(self.w),
        )
    }

    fn count(&self, y: usize, x: usize) -> f64 {
        let (y0, y1, x0, x1) = self.bounds(y, x);
        ((y1 - y0) * (x1 - x0)) as f64
    }

    /// Sum of `v` over the clipped window around every pixel.
    fn sums(&self, v: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut pre = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += v[y * w + x];
                pre[(y + 1) * (w + 1) + x + 1] = pre[y * (w + 1) + x + 1] + row;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (y0, y1, x0, x1) = self.bounds(y, x);
                out[y * w + x] = pre[y1 * (w + 1) + x1] - pre[y0 * (w + 1) + x1] - pre[y1 * (w + 1) + x0]
                    + pre[y0 * (w + 1) + x0];
            }
        }
        out
    }
}

struct SsimPlane {
    s: Vec<f64>,
    /// Partial derivatives of each pixel's SSIM with respect to the local
    /// statistics of `xhat`: (mean, variance, covariance).
    partials: Vec<(f64, f64, f64)>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    counts: Vec<f64>,
}

/// SSIM map of one channel; `x` is the reference and `y` the reconstruction.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> SsimPlane {
    let f = BoxFilter::new(h, w);
    let counts: Vec<f64> = (0..h * w).map(|p| f.count(p / w, p % w)).collect();
    let mean = |v: Vec<f64>| -> Vec<f64> { v.iter().zip(&counts).map(|(s, n)| s / n).collect() };
    let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mu_x = mean(f.sums(x));
    let mu_y = mean(f.sums(y));
    let exx = mean(f.sums(&sq(x, x)));
    let eyy = mean(f.sums(&sq(y, y)));
    let exy = mean(f.sums(&sq(x, y)));
    let mut s = vec![0.0; h * w];
    let mut partials = vec![(0.0, 0.0, 0.0); h * w];
    for p in 0..h * w {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let vx = exx[p] - mx * mx;
        let vy = eyy[p] - my * my;
        let cxy = exy[p] - mx * my;
        let n1 = 2.0 * mx * my + SSIM_C1;
        let n2 = 2.0 * cxy + SSIM_C2;
        let d1 = mx * mx + my * my + SSIM_C1;
        let d2 = vx + vy + SSIM_C2;
        let sp = n1 * n2 / (d1 * d2);
        s[p] = sp;
        partials[p] = (
            2.0 * mx * n2 / (d1 * d2) - sp * 2.0 * my / d1,
            -sp / d2,
            2.0 * n1 / (d1 * d2),
        );
    }
    SsimPlane {
        s,
        partials,
        mu_x,
        mu_y,
        counts,
    }
}

/// Gradient of `sum_p weight * S_p` with respect to `y`, added into `out`.
fn ssim_plane_grad(x: &[f64], y: &[f64], h: usize, w: usize, weight: f64, out: &mut [f64]) {
    let plane = ssim_plane(x, y, h, w);
    let f = BoxFilter::new(h, w);
    let n = h * w;
    let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..n {
        let (d_mu, d_var, d_cov) = plane.partials[p];
        let k = weight / plane.counts[p];
        a[p] = k * (d_mu - 2.0 * plane.mu_y[p] * d_var - plane.mu_x[p] * d_cov);
        b[p] = k * 2.0 * d_var;
        c[p] = k * d_cov;
    }
    let (sa, sb, sc) = (f.sums(&a), f.sums(&b), f.sums(&c));
    for q in 0..n {
        out[q] += sa[q] + y[q] * sb[q] + x[q] * sc[q];
    }
}

fn check_shape(shape: [usize; 3], x: &[f64], xhat: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if x.len() != n || xhat.len() != n {
        return Err(AodError::Contract(format!(
            "distance needs two samples of shape {shape:?}, got {} and {} values",
            x.len(),
            xhat.len()
        )));
    }
    Ok(())
}

/// Distance between one sample `x` and its reconstruction `xhat`, with the
/// per-pixel map (channels folded in).
pub fn distance(kind: Distance, x: &[f64], xhat: &[f64], shape: [usize; 3]) -> Result<(f64, Vec<f64>)> {
    check_shape(shape, x, xhat)?;
    let [c, h, w] = shape;
    let hw = h * w;
    let mut map = vec![0.0; hw];
    match kind {
        Distance::L1 | Distance::L2 | Distance::L21 => {
            for ch in 0..c {
                for p in 0..hw {
                    let r = xhat[ch * hw + p] - x[ch * hw + p];
                    map[p] += if kind == Distance::L1 { r.abs() } else { r * r };
                }
            }
            if kind == Distance::L21 {
                map.iter_mut().for_each(|v| *v = v.sqrt());
            }
            Ok((map.iter().sum(), map))
        }
        Distance::Ssim => {
            for ch in 0..c {
                let plane = ssim_plane(&x[ch * hw..(ch + 1) * hw], &xhat[ch * hw..(ch + 1) * hw], h, w);
                for p in 0..hw {
                    map[p] += (1.0 - plane.s[p]) / c as f64;
                }
            }
            Ok((map.iter().sum::<f64>() / hw as f64, map))
        }
    }
}

/// Gradient of [`distance`] with respect to `xhat`, scaled by `scale` and
/// added into `out`.
pub fn distance_grad(kind: Distance, x: &[f64], xhat: &[f64], shape: [usize; 3], scale: f64, out: &mut [f64]) {
    let [c, h, w] = shape;
    let hw = h * w;
    match kind {
        Distance::L1 => {
            for i in 0..x.len() {
                let r = xhat[i] - x[i];
                out[i] += scale * if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
            }
        }
        Distance::L2 => {
            for i in 0..x.len() {
                out[i] += scale * 2.0 * (xhat[i] - x[i]);
            }
        }
        Distance::L21 => {
            for p in 0..hw {
                let norm = (0..c).map(|ch| (xhat[ch * hw + p] - x[ch * hw + p]).powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for ch in 0..c {
                        let i = ch * hw + p;
                        out[i] += scale * (xhat[i] - x[i]) / norm;
                    }
                }
            }
        }
        Distance::Ssim => {
            let weight = -scale / (c * hw) as f64;
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                ssim_plane_grad(&x[r.clone()], &xhat[r.clone()], h, w, weight, &mut out[r]);
            }
        }
    }
}

/// Per-sample distances `[B]` from inputs `(xhat, x)`, both `[B, C, H, W]`.
/// Only `xhat` receives a gradient.
#[derive(Debug, Clone)]
pub struct DistanceOp(pub Distance);

fn sample_shape(s: &[usize]) -> [usize; 3] {
    [s[1], s[2], s[3]]
}

impl Operator for DistanceOp {
    fn name(&self) -> &str {
        "distance"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        match inputs {
            [a, b] if a.len() == 4 && a == b => Ok(vec![a[0]]),
            _ => Err(format!("distance needs two equal [B,C,H,W] inputs, got {inputs:?}")),
        }
    }

    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let (xhat, x) = (inputs[0], inputs[1]);
        let shape = sample_shape(x.shape());
        let d = (0..x.batch())
            .map(|i| distance(self.0, x.row(i), xhat.row(i), shape).expect("shapes checked").0)
            .collect();
        Tensor::from_vec(d)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _cache: Option<&(dyn Any + Send + Sync)>,
    ) -> Vec<Option<Tensor>> {
        let (xhat, x) = (inputs[0], inputs[1]);
        let shape = sample_shape(x.shape());
        let n = x.row_len();
        let mut dx = Tensor::zeros(xhat.shape());
        for i in 0..x.batch() {
            let out = &mut dx.data_mut()[i * n..(i + 1) * n];
            distance_grad(self.0, x.row(i), xhat.row(i), shape, grad.data()[i], out);
        }
        vec![Some(dx), None]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_zero_distance() {
        let x: Vec<f64> = (0..2 * 9 * 9).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        for kind in Distance::ALL {
            let (d, map) = distance(kind, &x, &x, [2, 9, 9]).unwrap();
            assert!(d.abs() < 1e-12, "{kind:?} {d}");
            assert!(map.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn l21_takes_channel_norm_per_pixel() {
        // Two channels, two pixels: residual rows [3,4] and [0,0].
        let x = [0.0; 4];
        let xhat = [3.0, 0.0, 4.0, 0.0];
        let (d, map) = distance(Distance::L21, &x, &xhat, [2, 1, 2]).unwrap();
        assert_eq!(d, 5.0);
        assert_eq!(map, vec![5.0, 0.0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        assert!(distance(Distance::L2, &[0.0; 4], &[0.0; 3], [1, 2, 2]).is_err());
    }
}
