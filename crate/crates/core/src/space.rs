//! The search space: action vocabularies, the `6N + 2` token encoding of a
//! model, and the size of the space.
//!
//! Vocabulary order is part of the external contract because controller
//! heads index choices by position.

use std::fmt;

use aod_substrate::ops::Activation;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{AodError, Result};

pub const CHANNELS: [usize; 7] = [3, 8, 16, 32, 64, 128, 256];
pub const CONV_KERNELS: [usize; 4] = [1, 3, 5, 7];
pub const POOL_KERNELS: [usize; 4] = [1, 3, 5, 7];
pub const GLOBAL_SLOTS: usize = 2;
pub const SLOTS_PER_LAYER: usize = 6;
pub const DEFAULT_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hypothesis {
    Density,
    Cluster,
    Centroid,
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L1,
    L2,
    L21,
    Ssim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolType {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormType {
    Batch,
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
    Linear,
    Softplus,
    LeakyRelu,
    Relu6,
    Elu,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 4] = [
        Hypothesis::Density,
        Hypothesis::Cluster,
        Hypothesis::Centroid,
        Hypothesis::Reconstruction,
    ];
}

impl Distance {
    pub const ALL: [Distance; 4] = [Distance::L1, Distance::L2, Distance::L21, Distance::Ssim];
}

impl PoolType {
    pub const ALL: [PoolType; 2] = [PoolType::Max, PoolType::Average];
}

impl NormType {
    pub const ALL: [NormType; 3] = [NormType::Batch, NormType::Instance, NormType::None];
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 8] = [
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Relu,
        ActivationKind::Linear,
        ActivationKind::Softplus,
        ActivationKind::LeakyRelu,
        ActivationKind::Relu6,
        ActivationKind::Elu,
    ];

    pub fn to_op(self) -> Activation {
        Activation::ALL[self as usize]
    }
}

/// Lowercase token as it appears in JSON.
fn token<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("enum serializes") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub conv_kernel: usize,
    pub pool_type: PoolType,
    pub pool_kernel: usize,
    pub norm: NormType,
    pub activation: ActivationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hypothesis: Hypothesis,
    pub distance: Distance,
    pub layers: Vec<LayerSpec>,
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", token(&self.hypothesis), token(&self.distance))?;
        for l in &self.layers {
            write!(
                f,
                " [{}c k{} {}{} {} {}]",
                l.out_channels,
                l.conv_kernel,
                token(&l.pool_type),
                l.pool_kernel,
                token(&l.norm),
                token(&l.activation)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    DefinitionHypothesis,
    Distance,
    OutputChannel,
    ConvKernel,
    PoolType,
    PoolKernel,
    NormType,
    Activation,
}

impl SlotKind {
    const LOCAL: [SlotKind; SLOTS_PER_LAYER] = [
        SlotKind::OutputChannel,
        SlotKind::ConvKernel,
        SlotKind::PoolType,
        SlotKind::PoolKernel,
        SlotKind::NormType,
        SlotKind::Activation,
    ];

    pub fn choices(self) -> Vec<String> {
        match self {
            SlotKind::DefinitionHypothesis => Hypothesis::ALL.iter().map(token).collect(),
            SlotKind::Distance => Distance::ALL.iter().map(token).collect(),
            SlotKind::OutputChannel => CHANNELS.iter().map(|c| c.to_string()).collect(),
            SlotKind::ConvKernel => CONV_KERNELS.iter().map(|k| k.to_string()).collect(),
            SlotKind::PoolType => PoolType::ALL.iter().map(token).collect(),
            SlotKind::PoolKernel => POOL_KERNELS.iter().map(|k| k.to_string()).collect(),
            SlotKind::NormType => NormType::ALL.iter().map(token).collect(),
            SlotKind::Activation => ActivationKind::ALL.iter().map(token).collect(),
        }
    }

    pub fn size(self) -> usize {
        match self {
            SlotKind::DefinitionHypothesis | SlotKind::Distance => 4,
            SlotKind::OutputChannel => CHANNELS.len(),
            SlotKind::ConvKernel => CONV_KERNELS.len(),
            SlotKind::PoolType => PoolType::ALL.len(),
            SlotKind::PoolKernel => POOL_KERNELS.len(),
            SlotKind::NormType => NormType::ALL.len(),
            SlotKind::Activation => ActivationKind::ALL.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotVocabulary {
    pub slot_id: usize,
    /// Layer the slot belongs to; `None` for the two global slots.
    pub layer: Option<usize>,
    pub kind: SlotKind,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSequence(pub Vec<usize>);

impl ActionSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_layers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(AodError::Contract("the model needs at least one layer".into()));
    }
    Ok(())
}

pub fn slot_count(n: usize) -> usize {
    GLOBAL_SLOTS + SLOTS_PER_LAYER * n
}

pub fn slot_kinds(n: usize) -> Result<Vec<SlotKind>> {
    check_layers(n)?;
    let mut kinds = vec![SlotKind::DefinitionHypothesis, SlotKind::Distance];
    for _ in 0..n {
        kinds.extend_from_slice(&SlotKind::LOCAL);
    }
    Ok(kinds)
}

pub fn slot_sizes(n: usize) -> Result<Vec<usize>> {
    Ok(slot_kinds(n)?.into_iter().map(SlotKind::size).collect())
}

pub fn vocabularies(n: usize) -> Result<Vec<SlotVocabulary>> {
    Ok(slot_kinds(n)?
        .into_iter()
        .enumerate()
        .map(|(slot_id, kind)| SlotVocabulary {
            slot_id,
            layer: (slot_id >= GLOBAL_SLOTS).then(|| (slot_id - GLOBAL_SLOTS) / SLOTS_PER_LAYER),
            kind,
            choices: kind.choices(),
        })
        .collect())
}

pub fn decode(actions: &ActionSequence) -> Result<ModelSpec> {
    let t = actions.tokens();
    if t.len() < slot_count(1) || (t.len() - GLOBAL_SLOTS) % SLOTS_PER_LAYER != 0 {
        return Err(AodError::Decode {
            slot: t.len(),
            detail: format!("sequence length {} is not 6N+2 with N >= 1", t.len()),
        });
    }
    let kinds = slot_kinds((t.len() - GLOBAL_SLOTS) / SLOTS_PER_LAYER)?;
    for (slot, (&tok, kind)) in t.iter().zip(&kinds).enumerate() {
        if tok >= kind.size() {
            return Err(AodError::Decode {
                slot,
                detail: format!("token {tok} out of range for {} choices", kind.size()),
            });
        }
    }
    let layers = t[GLOBAL_SLOTS..]
        .chunks(SLOTS_PER_LAYER)
        .map(|l| LayerSpec {
            out_channels: CHANNELS[l[0]],
            conv_kernel: CONV_KERNELS[l[1]],
            pool_type: PoolType::ALL[l[2]],
            pool_kernel: POOL_KERNELS[l[3]],
            norm: NormType::ALL[l[4]],
            activation: ActivationKind::ALL[l[5]],
        })
        .collect();
    Ok(ModelSpec {
        hypothesis: Hypothesis::ALL[t[0]],
        distance: Distance::ALL[t[1]],
        layers,
    })
}

fn position(values: &[usize], v: usize, what: &str, layer: usize) -> Result<usize> {
    values
        .iter()
        .position(|&x| x == v)
        .ok_or_else(|| AodError::Encode(format!("layer {layer}: {what} {v} is not one of {values:?}")))
}

pub fn encode(spec: &ModelSpec) -> Result<ActionSequence> {
    if spec.layers.is_empty() {
        return Err(AodError::Encode("spec has no layers".into()));
    }
    let mut t = vec![spec.hypothesis as usize, spec.distance as usize];
    for (i, l) in spec.layers.iter().enumerate() {
        t.push(position(&CHANNELS, l.out_channels, "output channels", i)?);
        t.push(position(&CONV_KERNELS, l.conv_kernel, "conv kernel", i)?);
        t.push(l.pool_type as usize);
        t.push(position(&POOL_KERNELS, l.pool_kernel, "pool kernel", i)?);
        t.push(l.norm as usize);
        t.push(l.activation as usize);
    }
    Ok(ActionSequence(t))
}

/// `16 * 5376^n`, the number of distinct models with `n` layers.
pub fn cardinality(n: usize) -> BigUint {
    let per_layer: usize = SlotKind::LOCAL.iter().map(|k| k.size()).product();
    BigUint::from(16u32) * BigUint::from(per_layer).pow(n as u32)
}

/// Human-readable slot listing used by the golden-file test.
pub fn render_slots(n: usize) -> Result<String> {
    let mut out = String::new();
    for v in vocabularies(n)? {
        let layer = v.layer.map_or("global".to_string(), |l| format!("layer{}", l + 1));
        out.push_str(&format!("{:>2} {:<7} {:?}: {}\n", v.slot_id, layer, v.kind, v.choices.join(",")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_sizes() {
        assert_eq!(slot_sizes(1).unwrap(), vec![4, 4, 7, 4, 2, 4, 3, 8]);
        assert_eq!(slot_count(2), 14);
        assert_eq!(vocabularies(6).unwrap().len(), 38);
        assert!(vocabularies(0).is_err());
    }

    #[test]
    fn all_zero_tokens_pick_first_choices() {
        let spec = decode(&ActionSequence(vec![0; 8])).unwrap();
        assert_eq!(spec.hypothesis, Hypothesis::Density);
        assert_eq!(spec.distance, Distance::L1);
        assert_eq!(
            spec.layers[0],
            LayerSpec {
                out_channels: 3,
                conv_kernel: 1,
                pool_type: PoolType::Max,
                pool_kernel: 1,
                norm: NormType::Batch,
                activation: ActivationKind::Sigmoid,
            }
        );
    }

    #[test]
    fn out_of_range_token_names_its_slot() {
        let mut t = vec![0; 8];
        t[5] = 4;
        match decode(&ActionSequence(t)) {
            Err(AodError::Decode { slot, .. }) => assert_eq!(slot, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cardinality_values() {
        assert_eq!(cardinality(1), BigUint::from(86016u32));
        assert_eq!(cardinality(2), BigUint::from(462_422_016u64));
    }

    #[test]
    fn json_uses_lowercase_tokens() {
        let spec = decode(&ActionSequence(vec![3, 2, 0, 0, 1, 0, 2, 5])).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"reconstruction\""));
        assert!(json.contains("\"l21\""));
        assert!(json.contains("\"average\""));
        assert!(json.contains("\"leakyrelu\""));
        assert!(json.contains("\"none\""));
    }
}
