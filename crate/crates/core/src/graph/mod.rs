//! Layer-graph IR: typed nodes in topological order, a parameter/buffer
//! registry keyed by `(node, role)`, and per-slot origin maps that track
//! where each current channel sat in the unpruned model.

mod builder;
mod exec;
pub mod zoo;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use builder::GraphBuilder;
pub use exec::{Mode, Trace};
pub use zoo::{ArchPlan, ArchSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Add,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl Role {
    /// Persistent statistics rather than trainable parameters.
    pub fn is_buffer(self) -> bool {
        matches!(self, Role::RunningMean | Role::RunningVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::Gamma => "gamma",
            Role::Beta => "beta",
            Role::RunningMean => "running_mean",
            Role::RunningVar => "running_var",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub node: NodeId,
    pub role: Role,
}

impl ParamKey {
    pub fn new(node: NodeId, role: Role) -> Self {
        ParamKey { node, role }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node.0, self.role.as_str())
    }
}

/// Which channel dimension of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotDim {
    Out,
    In,
    Channel,
}

/// One channel dimension of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub node: NodeId,
    pub dim: SlotDim,
}

impl Slot {
    pub fn new(node: NodeId, dim: SlotDim) -> Self {
        Slot { node, dim }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.dim {
            SlotDim::Out => "out",
            SlotDim::In => "in",
            SlotDim::Channel => "ch",
        };
        write!(f, "{}.{}", self.node.0, d)
    }
}

/// A registry tensor touched by a slot: channel `c` of the slot covers
/// positions `c*block .. (c+1)*block` along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotAxis {
    pub key: ParamKey,
    pub axis: usize,
    pub block: usize,
}

#[derive(Clone)]
pub struct ModelGraph<T> {
    arch: Option<ArchSpec>,
    nodes: Vec<LayerNode>,
    output: NodeId,
    params: BTreeMap<ParamKey, Tensor<T>>,
    origin: BTreeMap<Slot, Vec<usize>>,
}

impl<T> std::fmt::Debug for ModelGraph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGraph")
            .field("arch", &self.arch.as_ref().map(|a| a.name.as_str()))
            .field("nodes", &self.nodes.len())
            .field("tensors", &self.params.len())
            .finish()
    }
}

/// Serializable graph topology (everything except tensor values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub arch: Option<ArchSpec>,
    pub nodes: Vec<LayerNode>,
    pub output: NodeId,
    pub origin: Vec<(Slot, Vec<usize>)>,
    pub params: Vec<ParamKey>,
}

impl<T: Scalar> ModelGraph<T> {
    pub(crate) fn from_parts(
        arch: Option<ArchSpec>,
        nodes: Vec<LayerNode>,
        output: NodeId,
        params: BTreeMap<ParamKey, Tensor<T>>,
        origin: BTreeMap<Slot, Vec<usize>>,
    ) -> Result<Self> {
        let g = ModelGraph {
            arch,
            nodes,
            output,
            params,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.nodes[0].kind {
            LayerKind::Input {
                channels,
                height,
                width,
            } => [channels, height, width],
            _ => unreachable!("validated: node 0 is the input"),
        }
    }

    pub fn classes(&self) -> usize {
        match self.nodes[self.output.0].kind {
            LayerKind::Linear { out_features, .. } => out_features,
            _ => unreachable!("validated: output is linear"),
        }
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key)
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        self.params.get_mut(&key)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn count_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !k.role.is_buffer())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn count_buffers(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.role.is_buffer())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Bytes for 32-bit storage of parameters and persistent buffers.
    pub fn model_size_bytes(&self) -> usize {
        4 * (self.count_params() + self.count_buffers())
    }

    pub fn origin(&self, slot: Slot) -> Option<&[usize]> {
        self.origin.get(&slot).map(Vec::as_slice)
    }

    pub fn origins(&self) -> impl Iterator<Item = (&Slot, &Vec<usize>)> {
        self.origin.iter()
    }

    pub(crate) fn set_origin(&mut self, slot: Slot, map: Vec<usize>) {
        self.origin.insert(slot, map);
    }

    /// Current channel count of a slot.
    pub fn slot_width(&self, slot: Slot) -> Option<usize> {
        self.origin.get(&slot).map(Vec::len)
    }

    /// Every channel slot of the graph.
    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.origin.keys().copied()
    }

    /// Registry tensors sliced by `slot`.
    pub fn slot_axes(&self, slot: Slot) -> Vec<SlotAxis> {
        let node = self.node(slot.node);
        let width = self.slot_width(slot).unwrap_or(0);
        let mut axes = Vec::new();
        let mut push = |role, axis, block| {
            let key = ParamKey::new(slot.node, role);
            if self.params.contains_key(&key) {
                axes.push(SlotAxis { key, axis, block });
            }
        };
        match (&node.kind, slot.dim) {
            (LayerKind::Conv2d { .. }, SlotDim::Out) | (LayerKind::Linear { .. }, SlotDim::Out) => {
                push(Role::Weight, 0, 1);
                push(Role::Bias, 0, 1);
            }
            (LayerKind::Conv2d { .. }, SlotDim::In) => push(Role::Weight, 1, 1),
            (LayerKind::Linear { in_features, .. }, SlotDim::In) => push(Role::Weight, 1, in_features / width.max(1)),
            (LayerKind::BatchNorm2d { .. }, SlotDim::Channel) => {
                for role in [Role::Gamma, Role::Beta, Role::RunningMean, Role::RunningVar] {
                    push(role, 0, 1);
                }
            }
            _ => {}
        }
        axes
    }

    /// Columns per channel for a linear layer's input slot; 1 otherwise.
    pub fn slot_block(&self, slot: Slot) -> usize {
        match (&self.node(slot.node).kind, slot.dim) {
            (LayerKind::Linear { in_features, .. }, SlotDim::In) => {
                in_features / self.slot_width(slot).unwrap_or(1).max(1)
            }
            _ => 1,
        }
    }

    /// Rewrites a layer's channel attribute after slicing.
    pub(crate) fn set_slot_extent(&mut self, slot: Slot, width: usize, block: usize) {
        match (&mut self.nodes[slot.node.0].kind, slot.dim) {
            (LayerKind::Conv2d { out_channels, .. }, SlotDim::Out) => *out_channels = width,
            (LayerKind::Conv2d { in_channels, .. }, SlotDim::In) => *in_channels = width,
            (LayerKind::BatchNorm2d { channels }, SlotDim::Channel) => *channels = width,
            (LayerKind::Linear { out_features, .. }, SlotDim::Out) => *out_features = width,
            (LayerKind::Linear { in_features, .. }, SlotDim::In) => *in_features = width * block,
            _ => {}
        }
    }

    pub(crate) fn replace_param(&mut self, key: ParamKey, t: Tensor<T>) {
        self.params.insert(key, t);
    }

    /// Per-node output shapes (without batch dimension) for the graph's input.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let err = |message: String| Error::NodeShape {
                node: node.id.0,
                kind: node.kind.name(),
                message,
            };
            let inp = node.inputs.first().map(|i| shapes[i.0].clone());
            let spatial = |s: &Option<Vec<usize>>| -> Result<(usize, usize, usize)> {
                match s.as_deref() {
                    Some([c, h, w]) => Ok((*c, *h, *w)),
                    other => Err(err(format!("expected [C, H, W] input, got {:?}", other))),
                }
            };
            let shape = match &node.kind {
                LayerKind::Input {
                    channels,
                    height,
                    width,
                } => vec![*channels, *height, *width],
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let (c, h, w) = spatial(&inp)?;
                    if c != *in_channels {
                        return Err(err(format!("input has {} channels, layer expects {}", c, in_channels)));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(err(format!("kernel {} exceeds input {}x{}", kernel, h, w)));
                    }
                    vec![
                        *out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ]
                }
                LayerKind::BatchNorm2d { channels } => {
                    let (c, h, w) = spatial(&inp)?;
                    if c != *channels {
                        return Err(err(format!("input has {} channels, layer expects {}", c, channels)));
                    }
                    vec![c, h, w]
                }
                LayerKind::Relu => inp.clone().unwrap_or_default(),
                LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                    let (c, h, w) = spatial(&inp)?;
                    if *kernel > h || *kernel > w {
                        return Err(err(format!("kernel {} exceeds input {}x{}", kernel, h, w)));
                    }
                    vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerKind::Add => {
                    let a = &shapes[node.inputs[0].0];
                    let b = &shapes[node.inputs[1].0];
                    if a != b {
                        return Err(err(format!("operands differ: {:?} vs {:?}", a, b)));
                    }
                    a.clone()
                }
                LayerKind::Flatten => vec![inp.as_ref().map(|s| s.iter().product()).unwrap_or(0)],
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => match inp.as_deref() {
                    Some([f]) if f == in_features => vec![*out_features],
                    other => return Err(err(format!("expected [{}] input, got {:?}", in_features, other))),
                },
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    fn validate(&self) -> Result<()> {
        let bad = |node: &LayerNode, message: String| Error::NodeShape {
            node: node.id.0,
            kind: node.kind.name(),
            message,
        };
        if !matches!(self.nodes.first().map(|n| &n.kind), Some(LayerKind::Input { .. })) {
            return Err(Error::InvalidArgument("graph must start with an input node".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 != i {
                return Err(bad(node, format!("id does not match position {}", i)));
            }
            if node.inputs.len() != node.kind.arity() {
                return Err(bad(node, format!("expected {} inputs", node.kind.arity())));
            }
            if node.inputs.iter().any(|p| p.0 >= i) {
                return Err(bad(node, "inputs must precede the node (acyclic order)".into()));
            }
            if i > 0 && matches!(node.kind, LayerKind::Input { .. }) {
                return Err(bad(node, "only node 0 may be an input".into()));
            }
        }
        let out = self
            .nodes
            .get(self.output.0)
            .ok_or_else(|| Error::InvalidArgument("output node out of range".into()))?;
        if !matches!(out.kind, LayerKind::Linear { .. }) {
            return Err(bad(out, "classification output must be a linear layer".into()));
        }
        for (key, t) in &self.params {
            let node = self
                .nodes
                .get(key.node.0)
                .ok_or_else(|| Error::InvalidArgument(format!("param {} has no node", key)))?;
            let expected = expected_param_shape(&node.kind, key.role)
                .ok_or_else(|| bad(node, format!("unexpected parameter role {}", key.role.as_str())))?;
            if t.shape() != expected.as_slice() {
                return Err(bad(
                    node,
                    format!(
                        "{} has shape {:?}, attributes imply {:?}",
                        key.role.as_str(),
                        t.shape(),
                        expected
                    ),
                ));
            }
        }
        for node in &self.nodes {
            for role in required_roles(&node.kind) {
                if !self.params.contains_key(&ParamKey::new(node.id, role)) {
                    return Err(bad(node, format!("missing {}", role.as_str())));
                }
            }
        }
        for (slot, map) in &self.origin {
            if map.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "origin map for {} is not strictly increasing",
                    slot
                )));
            }
        }
        self.infer_shapes()?;
        Ok(())
    }

    pub fn header(&self) -> GraphHeader {
        GraphHeader {
            arch: self.arch.clone(),
            nodes: self.nodes.clone(),
            output: self.output,
            origin: self.origin.iter().map(|(s, m)| (*s, m.clone())).collect(),
            params: self.params.keys().copied().collect(),
        }
    }

    pub fn from_header(header: GraphHeader, mut tensors: BTreeMap<ParamKey, Tensor<T>>) -> Result<Self> {
        let mut params = BTreeMap::new();
        for key in &header.params {
            let t = tensors
                .remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor for {}", key)))?;
            params.insert(*key, t);
        }
        Self::from_parts(
            header.arch,
            header.nodes,
            header.output,
            params,
            header.origin.into_iter().collect(),
        )
    }

    /// Same graph with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch.clone(),
            nodes: self.nodes.clone(),
            output: self.output,
            params: self.params.iter().map(|(k, t)| (*k, t.cast())).collect(),
            origin: self.origin.clone(),
        }
    }

    /// SHA-256 over registry keys, shapes and raw values.
    pub fn registry_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (key, t) in &self.params {
            h.update(key.to_string().as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex_digest(h)
    }

    /// SHA-256 over topology, layer attributes and origin maps (not values).
    pub fn structure_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let nodes = serde_json::to_vec(&self.nodes).expect("nodes serialize");
        h.update(&nodes);
        for (slot, map) in &self.origin {
            h.update(slot.to_string().as_bytes());
            for v in map {
                h.update((*v as u64).to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Bitwise equality of topology, origin maps and every registry tensor.
    pub fn bit_eq(&self, other: &ModelGraph<T>) -> bool {
        self.nodes == other.nodes
            && self.output == other.output
            && self.origin == other.origin
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

fn required_roles(kind: &LayerKind) -> Vec<Role> {
    match kind {
        LayerKind::Conv2d { bias, .. } | LayerKind::Linear { bias, .. } => {
            if *bias {
                vec![Role::Weight, Role::Bias]
            } else {
                vec![Role::Weight]
            }
        }
        LayerKind::BatchNorm2d { .. } => {
            vec![Role::Gamma, Role::Beta, Role::RunningMean, Role::RunningVar]
        }
        _ => Vec::new(),
    }
}

fn expected_param_shape(kind: &LayerKind, role: Role) -> Option<Vec<usize>> {
    match (kind, role) {
        (
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            },
            Role::Weight,
        ) => Some(vec![*out_channels, *in_channels, *kernel, *kernel]),
        (
            LayerKind::Conv2d {
                out_channels,
                bias: true,
                ..
            },
            Role::Bias,
        ) => Some(vec![*out_channels]),
        (LayerKind::BatchNorm2d { channels }, Role::Gamma | Role::Beta | Role::RunningMean | Role::RunningVar) => {
            Some(vec![*channels])
        }
        (
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            },
            Role::Weight,
        ) => Some(vec![*out_features, *in_features]),
        (
            LayerKind::Linear {
                out_features,
                bias: true,
                ..
            },
            Role::Bias,
        ) => Some(vec![*out_features]),
        _ => None,
    }
}
