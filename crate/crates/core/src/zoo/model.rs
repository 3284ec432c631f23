//! Graph construction for one child autoencoder.

use aod_substrate::ops::{
    pool_stride, pooled_len, Act, Add, AvgPool, BatchNorm, Conv2d, ConvTranspose2d, Flatten, InstanceNorm, MaxPool,
    Mean, Scale, Unpool,
};
use aod_substrate::{Feed, Graph, Mode, NodeId, Tensor};

use super::distance::{distance, DistanceOp};
use super::hypothesis::{HypothesisState, RegularizerOp};
use super::store::{Init, ParamStore};
use super::ZooConfig;
use crate::error::{AodError, Result};
use crate::space::{Hypothesis, LayerSpec, ModelSpec, NormType, PoolType};

/// Per-sample scores of one batch, with optional per-pixel maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Vec<f64>,
    pub distances: Vec<f64>,
    pub regularizers: Vec<f64>,
    pub pixels: Option<Vec<Vec<f64>>>,
}

pub struct ChildModel {
    pub spec: ModelSpec,
    pub input_shape: [usize; 3],
    pub state: Option<HypothesisState>,
    lambda_reg: f64,
    graph: Graph,
    recon: NodeId,
    latent: NodeId,
    distance: NodeId,
    regularizer: NodeId,
    score: NodeId,
    loss: NodeId,
    keys: Vec<String>,
}

/// Multiply-accumulates of the convolutions and transposed convolutions for
/// one sample, the dominant cost of a child.
pub fn conv_macs(spec: &ModelSpec, input_shape: [usize; 3]) -> u64 {
    let [mut cin, mut h, mut w] = input_shape;
    let mut total = 0u64;
    for l in &spec.layers {
        let per_pixel = (cin * l.out_channels * l.conv_kernel * l.conv_kernel) as u64;
        let (ph, pw) = (pooled_len(h, l.pool_kernel), pooled_len(w, l.pool_kernel));
        total += per_pixel * ((h * w) as u64 + (ph * pw) as u64);
        (cin, h, w) = (l.out_channels, ph, pw);
    }
    total
}

/// Store keys used by layer `i` (1-based) of a spec on `in_channels` input
/// channels. Activation never enters a key, so specs differing only there
/// share every tensor.
pub fn layer_keys(spec: &ModelSpec, in_channels: usize, i: usize) -> Vec<String> {
    let l = &spec.layers[i - 1];
    let cin = if i == 1 { in_channels } else { spec.layers[i - 2].out_channels };
    let cout = l.out_channels;
    let k = l.conv_kernel;
    let mut keys = vec![
        format!("enc/L{i}/conv/{cin}x{cout}/k{k}/weight"),
        format!("enc/L{i}/conv/{cin}x{cout}/k{k}/bias"),
        format!("dec/L{i}/deconv/{cout}x{cin}/k{k}/weight"),
        format!("dec/L{i}/deconv/{cout}x{cin}/k{k}/bias"),
    ];
    let norm_keys = |role: &str, c: usize| -> Vec<String> {
        match l.norm {
            NormType::Batch => ["gamma", "beta", "running_mean", "running_var"]
                .iter()
                .map(|p| format!("{role}/L{i}/bn/{c}/{p}"))
                .collect(),
            NormType::Instance => ["gamma", "beta"].iter().map(|p| format!("{role}/L{i}/in/{c}/{p}")).collect(),
            NormType::None => Vec::new(),
        }
    };
    keys.extend(norm_keys("enc", cout));
    keys.extend(norm_keys("dec", cin));
    keys
}

struct Builder<'a> {
    g: Graph,
    store: &'a mut ParamStore,
    keys: Vec<String>,
}

impl Builder<'_> {
    fn param(&mut self, key: &str, shape: &[usize], init: Init, trainable: bool) -> Result<NodeId> {
        self.store.ensure(key, shape, init, trainable)?;
        self.keys.push(key.to_string());
        Ok(self.g.param(key, shape))
    }

    fn apply(&mut self, label: &str, op: impl aod_substrate::Operator + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        Ok(self.g.apply_labeled(label, op, inputs)?)
    }

    fn norm(&mut self, role: &str, i: usize, l: &LayerSpec, c: usize, x: NodeId) -> Result<NodeId> {
        let label = format!("{role}/L{i}/norm");
        match l.norm {
            NormType::None => Ok(x),
            NormType::Batch => {
                let p = |n: &str| format!("{role}/L{i}/bn/{c}/{n}");
                let gamma = self.param(&p("gamma"), &[c], Init::Const(1.0), true)?;
                let beta = self.param(&p("beta"), &[c], Init::Const(0.0), true)?;
                let rm = self.param(&p("running_mean"), &[c], Init::Const(0.0), false)?;
                let rv = self.param(&p("running_var"), &[c], Init::Const(1.0), false)?;
                self.apply(&label, BatchNorm, &[x, gamma, beta, rm, rv])
            }
            NormType::Instance => {
                let p = |n: &str| format!("{role}/L{i}/in/{c}/{n}");
                let gamma = self.param(&p("gamma"), &[c], Init::Const(1.0), true)?;
                let beta = self.param(&p("beta"), &[c], Init::Const(0.0), true)?;
                self.apply(&label, InstanceNorm, &[x, gamma, beta])
            }
        }
    }
}

fn state_inputs(g: &mut Graph, h: Hypothesis, dim: usize, cfg: &ZooConfig) -> Vec<NodeId> {
    match h {
        Hypothesis::Density => {
            let k = cfg.mixture_components;
            vec![
                g.input("hyp/weights", &[k]),
                g.input("hyp/means", &[k, dim]),
                g.input("hyp/vars", &[k, dim]),
            ]
        }
        Hypothesis::Cluster => vec![g.input("hyp/centroids", &[cfg.cluster_centroids, dim])],
        Hypothesis::Centroid => vec![g.input("hyp/center", &[1, dim]), g.input("hyp/radius", &[1])],
        Hypothesis::Reconstruction => Vec::new(),
    }
}

impl ChildModel {
    /// Builds the graph of `spec` for samples of `input_shape`, creating any
    /// missing parameters in `store`.
    pub fn build(spec: &ModelSpec, input_shape: [usize; 3], store: &mut ParamStore, cfg: &ZooConfig) -> Result<Self> {
        let [c0, h0, w0] = input_shape;
        if spec.layers.is_empty() {
            return Err(AodError::Contract("spec has no layers".into()));
        }
        let mut b = Builder {
            g: Graph::new(),
            store,
            keys: Vec::new(),
        };
        let x = b.g.input("x", &[1, c0, h0, w0]);
        let mut sizes = vec![(h0, w0)];
        let mut channels = vec![c0];
        let mut h = x;
        for (idx, l) in spec.layers.iter().enumerate() {
            let i = idx + 1;
            let (cin, cout, k) = (channels[idx], l.out_channels, l.conv_kernel);
            let (sh, sw) = sizes[idx];
            if pool_stride(l.pool_kernel) > 1 && (sh < 2 || sw < 2) {
                return Err(AodError::Build {
                    layer: i,
                    detail: format!("cannot pool a {sh}x{sw} map with stride 2"),
                });
            }
            let base = format!("enc/L{i}/conv/{cin}x{cout}/k{k}");
            let w = b.param(&format!("{base}/weight"), &[cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k }, true)?;
            let bias = b.param(&format!("{base}/bias"), &[cout], Init::Const(0.0), true)?;
            h = b.apply(&format!("enc/L{i}/conv"), Conv2d { kernel: k }, &[h, w, bias])?;
            let pool_label = format!("enc/L{i}/pool");
            h = match l.pool_type {
                PoolType::Max => b.apply(&pool_label, MaxPool { kernel: l.pool_kernel }, &[h])?,
                PoolType::Average => b.apply(&pool_label, AvgPool { kernel: l.pool_kernel }, &[h])?,
            };
            h = b.norm("enc", i, l, cout, h)?;
            h = b.apply(&format!("enc/L{i}/act"), Act(l.activation.to_op()), &[h])?;
            sizes.push((pooled_len(sh, l.pool_kernel), pooled_len(sw, l.pool_kernel)));
            channels.push(cout);
        }
        let latent = b.apply("latent", Flatten, &[h])?;
        for i in (1..=spec.layers.len()).rev() {
            let l = &spec.layers[i - 1];
            let (cin, cout, k) = (channels[i], channels[i - 1], l.conv_kernel);
            let base = format!("dec/L{i}/deconv/{cin}x{cout}/k{k}");
            let w = b.param(&format!("{base}/weight"), &[cin, cout, k, k], Init::HeUniform { fan_in: cin * k * k }, true)?;
            let bias = b.param(&format!("{base}/bias"), &[cout], Init::Const(0.0), true)?;
            h = b.apply(&format!("dec/L{i}/deconv"), ConvTranspose2d { kernel: k }, &[h, w, bias])?;
            let (th, tw) = sizes[i - 1];
            h = b.apply(
                &format!("dec/L{i}/unpool"),
                Unpool {
                    kernel: l.pool_kernel,
                    height: th,
                    width: tw,
                },
                &[h],
            )?;
            h = b.norm("dec", i, l, cout, h)?;
            h = b.apply(&format!("dec/L{i}/act"), Act(l.activation.to_op()), &[h])?;
        }
        let recon = h;
        let dim = b.g.shape(latent)[1];
        let state = state_inputs(&mut b.g, spec.hypothesis, dim, cfg);
        let distance = b.apply("distance", DistanceOp(spec.distance), &[recon, x])?;
        let reg_inputs: Vec<NodeId> = match spec.hypothesis {
            Hypothesis::Reconstruction => vec![recon, x],
            _ => std::iter::once(latent).chain(state).collect(),
        };
        let regularizer = b.apply("regularizer", RegularizerOp(spec.hypothesis), &reg_inputs)?;
        let weighted = b.apply("weighted_regularizer", Scale(cfg.lambda_reg), &[regularizer])?;
        let score = b.apply("score", Add, &[distance, weighted])?;
        let loss = b.apply("loss", Mean, &[score])?;
        let mut keys = b.keys;
        keys.dedup();
        Ok(Self {
            spec: spec.clone(),
            input_shape,
            state: (spec.hypothesis == Hypothesis::Reconstruction).then_some(HypothesisState::Reconstruction),
            lambda_reg: cfg.lambda_reg,
            graph: b.g,
            recon,
            latent,
            distance,
            regularizer,
            score,
            loss,
            keys,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Store keys this model reads, in first-use order.
    pub fn param_keys(&self) -> &[String] {
        &self.keys
    }

    /// Operator names in evaluation order, for auditing the graph against the spec.
    pub fn audit(&self) -> Vec<String> {
        self.graph.op_nodes().into_iter().map(|(_, op)| op.to_string()).collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.graph.shape(self.latent)[1]
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    pub(crate) fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub(crate) fn latent_node(&self) -> NodeId {
        self.latent
    }

    /// Feed with the batch and the hypothesis state bound.
    pub fn feed(&self, batch: &Tensor) -> Result<Feed> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| AodError::Contract(format!("{:?} state is not initialized", self.spec.hypothesis)))?;
        let mut feed = Feed::new();
        feed.insert("x".to_string(), batch.clone());
        for (name, t) in state.to_tensors() {
            feed.insert(name, t);
        }
        Ok(feed)
    }

    /// Latent codes of a batch, without the decoder or hypothesis state.
    pub fn latent(&self, store: &ParamStore, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut feed = Feed::new();
        feed.insert("x".to_string(), batch.clone());
        let eval = self.graph.forward_until(store.params(), &feed, mode, self.latent)?;
        Ok(eval.value(self.latent).clone())
    }

    /// Mean score of a batch.
    pub fn loss(&self, store: &ParamStore, batch: &Tensor, mode: Mode) -> Result<f64> {
        let feed = self.feed(batch)?;
        let eval = self.graph.forward(store.params(), &feed, mode)?;
        Ok(eval.value(self.loss).item())
    }

    /// Reconstruction of a batch.
    pub fn reconstruct(&self, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        let feed = self.feed(batch)?;
        let eval = self.graph.forward(store.params(), &feed, Mode::Eval)?;
        Ok(eval.value(self.recon).clone())
    }

    /// Scores a batch in evaluation mode.
    pub fn score(&self, store: &ParamStore, batch: &Tensor, with_pixels: bool) -> Result<ScoreMap> {
        let feed = self.feed(batch)?;
        let eval = self.graph.forward(store.params(), &feed, Mode::Eval)?;
        let term = |id: NodeId, name: &str| -> Result<Vec<f64>> {
            let v = eval.value(id).data().to_vec();
            if v.iter().all(|s| s.is_finite()) {
                Ok(v)
            } else {
                Err(AodError::Numeric(name.to_string()))
            }
        };
        let pixels = if with_pixels {
            let xhat = eval.value(self.recon);
            let maps = (0..batch.batch())
                .map(|i| distance(self.spec.distance, batch.row(i), xhat.row(i), self.input_shape).map(|(_, m)| m))
                .collect::<Result<Vec<_>>>()?;
            Some(maps)
        } else {
            None
        };
        Ok(ScoreMap {
            scores: term(self.score, "score")?,
            distances: term(self.distance, "distance")?,
            regularizers: term(self.regularizer, "regularizer")?,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{ActivationKind, Distance};
    use aod_substrate::OptimizerKind;

    fn layer(c: usize, pool: usize) -> LayerSpec {
        LayerSpec {
            out_channels: c,
            conv_kernel: 3,
            pool_type: PoolType::Max,
            pool_kernel: pool,
            norm: NormType::None,
            activation: ActivationKind::Relu,
        }
    }

    fn store() -> ParamStore {
        ParamStore::new(OptimizerKind::adam(), 0.01, 0).unwrap()
    }

    #[test]
    fn unit_pools_keep_spatial_size() {
        let spec = ModelSpec {
            hypothesis: Hypothesis::Reconstruction,
            distance: Distance::L2,
            layers: vec![layer(8, 1), layer(8, 1), layer(8, 1)],
        };
        let m = ChildModel::build(&spec, [1, 16, 16], &mut store(), &ZooConfig::default()).unwrap();
        assert_eq!(m.latent_dim(), 8 * 16 * 16);
    }

    #[test]
    fn stride_two_pool_on_unit_map_names_layer() {
        let spec = ModelSpec {
            hypothesis: Hypothesis::Reconstruction,
            distance: Distance::L2,
            layers: vec![layer(8, 3), layer(8, 3), layer(8, 3)],
        };
        match ChildModel::build(&spec, [1, 2, 2], &mut store(), &ZooConfig::default()) {
            Err(AodError::Build { layer, .. }) => assert_eq!(layer, 2),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("built a collapsed model"),
        }
    }
}
