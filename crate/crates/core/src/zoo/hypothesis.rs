//! Outlier definition-hypotheses: regularizers on the latent code and the
//! state each one estimates from latent batches.

use std::any::Any;
use std::f64::consts::PI;

use aod_substrate::{OpContext, Operator, Tensor};

use crate::error::{AodError, Result};
use crate::metrics::quantile_sorted;
use crate::space::Hypothesis;

/// Lower bound on mixture weights before renormalisation.
const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisConfig {
    pub mixture_components: usize,
    pub cluster_centroids: usize,
    pub sigma_min: f64,
    pub radius_quantile: f64,
    pub kmeans_iters: usize,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            mixture_components: 4,
            cluster_centroids: 4,
            sigma_min: 1e-3,
            radius_quantile: 0.9,
            kmeans_iters: 5,
        }
    }
}

/// Diagonal Gaussian mixture, row-major `[K, d]` means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HypothesisState {
    Density(Mixture),
    Cluster { centroids: Vec<f64>, dim: usize },
    Centroid { center: Vec<f64>, radius: f64 },
    Reconstruction,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn rows(z: &[f64], dim: usize) -> impl Iterator<Item = &[f64]> {
    z.chunks(dim)
}

/// Deterministic farthest-point seeding: the first row, then repeatedly the
/// row farthest from every chosen centre.
fn farthest_points(z: &[f64], dim: usize, k: usize) -> Vec<f64> {
    let n = z.len() / dim;
    let mut chosen = vec![0usize];
    let mut nearest: Vec<f64> = rows(z, dim).map(|r| sq_dist(r, &z[..dim])).collect();
    while chosen.len() < k {
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        chosen.push(next);
        let c = &z[next * dim..(next + 1) * dim];
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(&z[i * dim..(i + 1) * dim], c));
        }
    }
    chosen.iter().flat_map(|&i| z[i * dim..(i + 1) * dim].iter().copied()).collect()
}

fn nearest_centre(row: &[f64], centres: &[f64], dim: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centres.chunks(dim).enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn kmeans(z: &[f64], dim: usize, k: usize, iters: usize) -> Vec<f64> {
    let mut centres = farthest_points(z, dim, k);
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for row in rows(z, dim) {
            let j = nearest_centre(row, &centres, dim);
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centres[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            }
        }
    }
    centres
}

impl Mixture {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// `log phi_k + log N(z; mu_k, diag var_k)` for every component.
    fn log_joint(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let (mu, var) = (&self.means[k * d..(k + 1) * d], &self.vars[k * d..(k + 1) * d]);
            let mut acc = 0.0;
            for i in 0..d {
                acc += (2.0 * PI * var[i]).ln() + (z[i] - mu[i]).powi(2) / var[i];
            }
            *o = self.weights[k].ln() - 0.5 * acc;
        }
    }

    /// Negative log-likelihood of one latent vector.
    pub fn energy(&self, z: &[f64]) -> f64 {
        let mut lj = vec![0.0; self.components()];
        self.log_joint(z, &mut lj);
        -log_sum_exp(&lj)
    }

    /// Gradient of [`Mixture::energy`], scaled and added into `out`.
    pub fn energy_grad(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim;
        let mut lj = vec![0.0; self.components()];
        self.log_joint(z, &mut lj);
        let lse = log_sum_exp(&lj);
        for k in 0..self.components() {
            let gamma = (lj[k] - lse).exp();
            for i in 0..d {
                out[i] += scale * gamma * (z[i] - self.means[k * d + i]) / self.vars[k * d + i];
            }
        }
    }

    /// Seeds means by farthest points and shares the batch variance.
    fn seed(z: &[f64], dim: usize, k: usize, sigma_min: f64) -> Self {
        let n = (z.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows(z, dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in rows(z, dim) {
            for i in 0..dim {
                var[i] += (row[i] - mean[i]).powi(2) / n;
            }
        }
        let var: Vec<f64> = var.iter().map(|v| v.max(sigma_min)).collect();
        Self {
            weights: vec![1.0 / k as f64; k],
            means: farthest_points(z, dim, k),
            vars: (0..k).flat_map(|_| var.iter().copied()).collect(),
            dim,
        }
    }

    /// One expectation-maximisation sweep over the batch `z`.
    pub fn em_sweep(&mut self, z: &[f64], sigma_min: f64) {
        let (d, k) = (self.dim, self.components());
        let mut resp_sum = vec![0.0; k];
        let mut first = vec![0.0; k * d];
        let mut second = vec![0.0; k * d];
        let mut lj = vec![0.0; k];
        for row in rows(z, d) {
            self.log_joint(row, &mut lj);
            let lse = log_sum_exp(&lj);
            for j in 0..k {
                let g = (lj[j] - lse).exp();
                resp_sum[j] += g;
                for i in 0..d {
                    first[j * d + i] += g * row[i];
                    second[j * d + i] += g * row[i] * row[i];
                }
            }
        }
        let n = (z.len() / d) as f64;
        for j in 0..k {
            let nj = resp_sum[j];
            if nj > 1e-12 {
                for i in 0..d {
                    let mu = first[j * d + i] / nj;
                    self.means[j * d + i] = mu;
                    self.vars[j * d + i] = (second[j * d + i] / nj - mu * mu).max(sigma_min);
                }
            }
            self.weights[j] = (nj / n).max(WEIGHT_FLOOR);
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
    }
}

/// Student-t soft assignments of one batch and the sharpened targets.
struct Assignment {
    /// kernel values `1 / (1 + d_ij)`
    k: Vec<f64>,
    q: Vec<f64>,
    p: Vec<f64>,
    row_kernel_sum: Vec<f64>,
    column_mass: Vec<f64>,
    row_target_sum: Vec<f64>,
}

fn assign(z: &[f64], centroids: &[f64], dim: usize) -> Assignment {
    let n = z.len() / dim;
    let j = centroids.len() / dim;
    let mut k = vec![0.0; n * j];
    let mut q = vec![0.0; n * j];
    let mut row_kernel_sum = vec![0.0; n];
    for (i, row) in rows(z, dim).enumerate() {
        for (c, mu) in centroids.chunks(dim).enumerate() {
            k[i * j + c] = 1.0 / (1.0 + sq_dist(row, mu));
        }
        row_kernel_sum[i] = k[i * j..(i + 1) * j].iter().sum();
        for c in 0..j {
            q[i * j + c] = k[i * j + c] / row_kernel_sum[i];
        }
    }
    let mut column_mass = vec![0.0; j];
    for i in 0..n {
        for c in 0..j {
            column_mass[c] += q[i * j + c];
        }
    }
    let mut p = vec![0.0; n * j];
    let mut row_target_sum = vec![0.0; n];
    for i in 0..n {
        for c in 0..j {
            p[i * j + c] = q[i * j + c].powi(2) / column_mass[c];
        }
        row_target_sum[i] = p[i * j..(i + 1) * j].iter().sum();
        for c in 0..j {
            p[i * j + c] /= row_target_sum[i];
        }
    }
    Assignment {
        k,
        q,
        p,
        row_kernel_sum,
        column_mass,
        row_target_sum,
    }
}

/// Per-sample `KL(P_i || Q_i)` for a batch.
pub fn cluster_kl(z: &[f64], centroids: &[f64], dim: usize) -> Vec<f64> {
    let a = assign(z, centroids, dim);
    let j = centroids.len() / dim;
    (0..z.len() / dim)
        .map(|i| {
            (0..j)
                .map(|c| {
                    let (p, q) = (a.p[i * j + c], a.q[i * j + c]);
                    if p > 0.0 {
                        p * (p / q).ln()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Gradient of `sum_i w_i KL_i` with respect to the whole batch, including
/// the dependence of the targets on the batch.
pub fn cluster_kl_grad(z: &[f64], centroids: &[f64], dim: usize, w: &[f64]) -> Vec<f64> {
    let a = assign(z, centroids, dim);
    let n = z.len() / dim;
    let j = centroids.len() / dim;
    let mut gq = vec![0.0; n * j];
    let mut gr = vec![0.0; n * j];
    for i in 0..n {
        let r = i * j..(i + 1) * j;
        let gp: Vec<f64> = r
            .clone()
            .map(|x| {
                let (p, q) = (a.p[x], a.q[x]);
                gq[x] -= w[i] * p / q;
                if p > 0.0 {
                    w[i] * ((p / q).ln() + 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let dot: f64 = gp.iter().zip(&a.p[r.clone()]).map(|(g, p)| g * p).sum();
        for (c, x) in r.enumerate() {
            gr[x] = (gp[c] - dot) / a.row_target_sum[i];
        }
    }
    let mut gf = vec![0.0; j];
    for i in 0..n {
        for c in 0..j {
            let x = i * j + c;
            let q = a.q[x];
            let f = a.column_mass[c];
            gq[x] += gr[x] * 2.0 * q / f;
            gf[c] -= gr[x] * q * q / (f * f);
        }
    }
    let mut gz = vec![0.0; z.len()];
    for i in 0..n {
        let r = i * j..(i + 1) * j;
        for x in r.clone() {
            gq[x] += gf[x - i * j];
        }
        let dot: f64 = r.clone().map(|x| gq[x] * a.q[x]).sum();
        let zi = &z[i * dim..(i + 1) * dim];
        for (c, x) in r.enumerate() {
            let gk = (gq[x] - dot) / a.row_kernel_sum[i];
            let gd = -gk * a.k[x] * a.k[x];
            let mu = &centroids[c * dim..(c + 1) * dim];
            for t in 0..dim {
                gz[i * dim + t] += gd * 2.0 * (zi[t] - mu[t]);
            }
        }
    }
    gz
}

fn check_batch(z: &[f64], dim: usize, needed: usize) -> Result<usize> {
    if dim == 0 || z.is_empty() || z.len() % dim != 0 {
        return Err(AodError::Contract("empty or ragged latent batch".into()));
    }
    let n = z.len() / dim;
    if n < needed {
        return Err(AodError::Contract(format!(
            "latent batch of {n} is smaller than the {needed} components to fit"
        )));
    }
    Ok(n)
}

fn radius(z: &[f64], center: &[f64], q: f64) -> f64 {
    let mut d: Vec<f64> = rows(z, center.len()).map(|r| sq_dist(r, center).sqrt()).collect();
    d.sort_by(f64::total_cmp);
    quantile_sorted(&d, q)
}

impl HypothesisState {
    /// Fits the initial state from the first latent batch `z` (rows of `dim`).
    pub fn init(h: Hypothesis, z: &[f64], dim: usize, cfg: &HypothesisConfig) -> Result<Self> {
        match h {
            Hypothesis::Density => {
                check_batch(z, dim, cfg.mixture_components)?;
                let mut m = Mixture::seed(z, dim, cfg.mixture_components, cfg.sigma_min);
                m.em_sweep(z, cfg.sigma_min);
                Ok(Self::Density(m))
            }
            Hypothesis::Cluster => {
                check_batch(z, dim, cfg.cluster_centroids)?;
                Ok(Self::Cluster {
                    centroids: kmeans(z, dim, cfg.cluster_centroids, cfg.kmeans_iters),
                    dim,
                })
            }
            Hypothesis::Centroid => {
                let n = check_batch(z, dim, 1)? as f64;
                let mut center = vec![0.0; dim];
                for row in rows(z, dim) {
                    for (c, v) in center.iter_mut().zip(row) {
                        *c += v / n;
                    }
                }
                let radius = radius(z, &center, cfg.radius_quantile);
                Ok(Self::Centroid { center, radius })
            }
            Hypothesis::Reconstruction => Ok(Self::Reconstruction),
        }
    }

    /// Per-step refresh: one EM sweep for the mixture, a new radius for the
    /// centroid; cluster centroids are held.
    pub fn update(&mut self, z: &[f64], cfg: &HypothesisConfig) -> Result<()> {
        match self {
            Self::Density(m) => {
                check_batch(z, m.dim, m.components())?;
                m.em_sweep(z, cfg.sigma_min);
            }
            Self::Centroid { center, radius: r } => {
                check_batch(z, center.len(), 1)?;
                *r = radius(z, center, cfg.radius_quantile);
            }
            Self::Cluster { .. } | Self::Reconstruction => {}
        }
        Ok(())
    }

    pub fn hypothesis(&self) -> Hypothesis {
        match self {
            Self::Density(_) => Hypothesis::Density,
            Self::Cluster { .. } => Hypothesis::Cluster,
            Self::Centroid { .. } => Hypothesis::Centroid,
            Self::Reconstruction => Hypothesis::Reconstruction,
        }
    }

    /// Named tensors bound as graph inputs and stored in checkpoints.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let t = |shape: &[usize], v: &[f64]| Tensor::new(shape, v.to_vec()).expect("state shapes are consistent");
        match self {
            Self::Density(m) => {
                let k = m.components();
                vec![
                    ("hyp/weights".into(), t(&[k], &m.weights)),
                    ("hyp/means".into(), t(&[k, m.dim], &m.means)),
                    ("hyp/vars".into(), t(&[k, m.dim], &m.vars)),
                ]
            }
            Self::Cluster { centroids, dim } => {
                vec![("hyp/centroids".into(), t(&[centroids.len() / dim, *dim], centroids))]
            }
            Self::Centroid { center, radius } => vec![
                ("hyp/center".into(), t(&[1, center.len()], center)),
                ("hyp/radius".into(), Tensor::scalar(*radius)),
            ],
            Self::Reconstruction => Vec::new(),
        }
    }

    pub fn from_tensors(h: Hypothesis, tensors: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| AodError::Contract(format!("checkpoint lacks `{name}`")))
        };
        let state = match h {
            Hypothesis::Density => {
                let means = get("hyp/means")?;
                Self::Density(Mixture {
                    weights: get("hyp/weights")?.data().to_vec(),
                    dim: *means.shape().last().unwrap_or(&0),
                    means: means.data().to_vec(),
                    vars: get("hyp/vars")?.data().to_vec(),
                })
            }
            Hypothesis::Cluster => {
                let c = get("hyp/centroids")?;
                Self::Cluster {
                    dim: *c.shape().last().unwrap_or(&0),
                    centroids: c.data().to_vec(),
                }
            }
            Hypothesis::Centroid => Self::Centroid {
                center: get("hyp/center")?.data().to_vec(),
                radius: get("hyp/radius")?.item(),
            },
            Hypothesis::Reconstruction => Self::Reconstruction,
        };
        state.validate()?;
        Ok(state)
    }

    /// Checks the state invariants (finite, normalised weights, floored variances).
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Self::Density(m) => {
                let k = m.components();
                k > 0
                    && m.dim > 0
                    && m.means.len() == k * m.dim
                    && m.vars.len() == k * m.dim
                    && finite(&m.means)
                    && m.vars.iter().all(|v| v.is_finite() && *v > 0.0)
                    && m.weights.iter().all(|w| *w >= 0.0)
                    && (m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
            Self::Cluster { centroids, dim } => *dim > 0 && !centroids.is_empty() && centroids.len() % dim == 0 && finite(centroids),
            Self::Centroid { center, radius } => finite(center) && radius.is_finite() && *radius >= 0.0,
            Self::Reconstruction => true,
        };
        if ok {
            Ok(())
        } else {
            Err(AodError::Contract(format!("invalid {:?} state", self.hypothesis())))
        }
    }
}

/// Per-sample regularizer values `[B]`.
///
/// Inputs: latent `[B, d]` followed by the state tensors of
/// [`HypothesisState::to_tensors`], or `(xhat, x)` for reconstruction.
/// Only the first input is differentiated.
#[derive(Debug, Clone, Copy)]
pub struct RegularizerOp(pub Hypothesis);

fn mixture_from(inputs: &[&Tensor]) -> Mixture {
    Mixture {
        weights: inputs[1].data().to_vec(),
        means: inputs[2].data().to_vec(),
        vars: inputs[3].data().to_vec(),
        dim: inputs[0].row_len(),
    }
}

impl Operator for RegularizerOp {
    fn name(&self) -> &str {
        "regularizer"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        let z = inputs.first().ok_or("regularizer needs inputs")?;
        let d: usize = z.iter().skip(1).product();
        let fits = match (self.0, inputs) {
            (Hypothesis::Density, [_, w, m, v]) => m.len() == 2 && m[1] == d && m == v && w == &[m[0]],
            (Hypothesis::Cluster, [_, c]) => c.len() == 2 && c[1] == d,
            (Hypothesis::Centroid, [_, c, r]) => c == &[1, d] && r == &[1],
            (Hypothesis::Reconstruction, [a, b]) => a == b,
            _ => false,
        };
        if fits && z.len() >= 2 {
            Ok(vec![z[0]])
        } else {
            Err(format!("{:?} regularizer cannot take inputs {inputs:?}", self.0))
        }
    }

    fn forward(&self, inputs: &[&Tensor], _ctx: &mut OpContext) -> Tensor {
        let z = inputs[0];
        let d = z.row_len();
        let vals: Vec<f64> = match self.0 {
            Hypothesis::Density => {
                let m = mixture_from(inputs);
                rows(z.data(), d).map(|r| m.energy(r)).collect()
            }
            Hypothesis::Cluster => cluster_kl(z.data(), inputs[1].data(), d),
            Hypothesis::Centroid => {
                let (c, r2) = (inputs[1].data(), inputs[2].item().powi(2));
                rows(z.data(), d).map(|row| r2 + (sq_dist(row, c) - r2).max(0.0)).collect()
            }
            Hypothesis::Reconstruction => {
                let x = inputs[1];
                (0..z.batch()).map(|i| sq_dist(z.row(i), x.row(i))).collect()
            }
        };
        Tensor::from_vec(vals)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _cache: Option<&(dyn Any + Send + Sync)>,
    ) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let d = z.row_len();
        let w = grad.data();
        let mut dz = Tensor::zeros(z.shape());
        match self.0 {
            Hypothesis::Density => {
                let m = mixture_from(inputs);
                for (i, out) in dz.data_mut().chunks_mut(d).enumerate() {
                    m.energy_grad(z.row(i), w[i], out);
                }
            }
            Hypothesis::Cluster => {
                let g = cluster_kl_grad(z.data(), inputs[1].data(), d, w);
                dz.data_mut().copy_from_slice(&g);
            }
            Hypothesis::Centroid => {
                let (c, r2) = (inputs[1].data(), inputs[2].item().powi(2));
                for (i, out) in dz.data_mut().chunks_mut(d).enumerate() {
                    let row = z.row(i);
                    if sq_dist(row, c) > r2 {
                        for t in 0..d {
                            out[t] = w[i] * 2.0 * (row[t] - c[t]);
                        }
                    }
                }
            }
            Hypothesis::Reconstruction => {
                let x = inputs[1];
                for (i, out) in dz.data_mut().chunks_mut(d).enumerate() {
                    for (t, (a, b)) in z.row(i).iter().zip(x.row(i)).enumerate() {
                        out[t] = w[i] * 2.0 * (a - b);
                    }
                }
            }
        }
        let mut grads = vec![Some(dz)];
        grads.extend((1..inputs.len()).map(|_| None));
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_at_the_point_gives_half_d_log_two_pi() {
        let d = 5;
        let z = vec![0.3; d];
        let m = Mixture {
            weights: vec![1.0],
            means: z.clone(),
            vars: vec![1.0; d],
            dim: d,
        };
        let expected = d as f64 / 2.0 * (2.0 * PI).ln();
        assert!((m.energy(&z) - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_point_floors_variance() {
        let z = vec![1.5; 4 * 3];
        let cfg = HypothesisConfig {
            mixture_components: 2,
            ..Default::default()
        };
        let HypothesisState::Density(m) = HypothesisState::init(Hypothesis::Density, &z, 3, &cfg).unwrap() else {
            unreachable!()
        };
        assert!(m.vars.iter().all(|&v| v == cfg.sigma_min));
    }

    #[test]
    fn single_centroid_has_zero_divergence() {
        let z = [0.1, 2.0, -1.0, 0.5, 3.0, 3.0];
        let kl = cluster_kl(&z, &[0.0, 0.0], 2);
        assert!(kl.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn centroid_inside_radius_is_radius_squared() {
        let op = RegularizerOp(Hypothesis::Centroid);
        let z = Tensor::new(&[3, 2], vec![0.1, 0.0, 0.0, -0.2, 0.3, 0.3]).unwrap();
        let c = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let r = Tensor::scalar(0.5);
        let out = op.forward(&[&z, &c, &r], &mut OpContext::new(aod_substrate::Mode::Eval));
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn radius_uses_linear_quantile() {
        // distances 1..10 along one axis
        let z: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let r = radius(&z, &[0.0], 0.9);
        assert!(r > 9.0 && r < 10.0, "{r}");
    }

    #[test]
    fn undersized_batch_is_rejected() {
        let cfg = HypothesisConfig::default();
        assert!(HypothesisState::init(Hypothesis::Density, &[0.0; 6], 2, &cfg).is_err());
        assert!(HypothesisState::init(Hypothesis::Centroid, &[], 2, &cfg).is_err());
    }
}
