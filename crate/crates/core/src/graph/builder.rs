use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, LayerNode, ModelGraph, NodeId, ParamKey, Role, Slot, SlotDim};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Incremental graph construction. Channel counts are inferred from the
/// producing node, so callers only give output widths.
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
}

impl GraphBuilder {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        GraphBuilder {
            nodes: vec![LayerNode {
                id: NodeId(0),
                name: "input".into(),
                kind: LayerKind::Input {
                    channels,
                    height,
                    width,
                },
                inputs: vec![],
            }],
            shapes: vec![vec![channels, height, width]],
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    fn push(&mut self, prefix: &str, kind: LayerKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = format!("{}{}", prefix, id.0);
        self.nodes.push(LayerNode { id, name, kind, inputs });
        self.shapes.push(shape);
        id
    }

    fn chw(&self, x: NodeId) -> (usize, usize, usize) {
        match self.shapes[x.0].as_slice() {
            [c, h, w] => (*c, *h, *w),
            [f] => (*f, 1, 1),
            _ => (0, 0, 0),
        }
    }

    pub fn conv(&mut self, x: NodeId, out: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> NodeId {
        let (c, h, w) = self.chw(x);
        let shape = vec![
            out,
            (h + 2 * pad).saturating_sub(kernel) / stride.max(1) + 1,
            (w + 2 * pad).saturating_sub(kernel) / stride.max(1) + 1,
        ];
        let kind = LayerKind::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel,
            stride,
            pad,
            bias,
        };
        self.push("conv", kind, vec![x], shape)
    }

    pub fn batchnorm(&mut self, x: NodeId) -> NodeId {
        let shape = self.shapes[x.0].clone();
        let kind = LayerKind::BatchNorm2d { channels: shape[0] };
        self.push("bn", kind, vec![x], shape)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shapes[x.0].clone();
        self.push("relu", LayerKind::Relu, vec![x], shape)
    }

    pub fn maxpool(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        let (c, h, w) = self.chw(x);
        let shape = vec![
            c,
            h.saturating_sub(kernel) / stride.max(1) + 1,
            w.saturating_sub(kernel) / stride.max(1) + 1,
        ];
        self.push("maxpool", LayerKind::MaxPool2d { kernel, stride }, vec![x], shape)
    }

    pub fn avgpool(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        let (c, h, w) = self.chw(x);
        let shape = vec![
            c,
            h.saturating_sub(kernel) / stride.max(1) + 1,
            w.saturating_sub(kernel) / stride.max(1) + 1,
        ];
        self.push("avgpool", LayerKind::AvgPool2d { kernel, stride }, vec![x], shape)
    }

    /// Average pool over the full spatial extent.
    pub fn global_avgpool(&mut self, x: NodeId) -> NodeId {
        let (_, h, _) = self.chw(x);
        self.avgpool(x, h, h)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.shapes[a.0].clone();
        self.push("add", LayerKind::Add, vec![a, b], shape)
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let numel = self.shapes[x.0].iter().product();
        self.push("flatten", LayerKind::Flatten, vec![x], vec![numel])
    }

    pub fn linear(&mut self, x: NodeId, out: usize, bias: bool) -> NodeId {
        let in_features = self.shapes[x.0].iter().product();
        let kind = LayerKind::Linear {
            in_features,
            out_features: out,
            bias,
        };
        self.push("fc", kind, vec![x], vec![out])
    }

    /// Channel width seen by a linear layer's input (the producer's channel
    /// count before flattening).
    fn linear_in_width(&self, node: &LayerNode) -> usize {
        let LayerKind::Linear { in_features, .. } = node.kind else {
            return 0;
        };
        let producer = &self.nodes[node.inputs[0].0];
        if let LayerKind::Flatten = producer.kind {
            if let [c, _, _] = self.shapes[producer.inputs[0].0].as_slice() {
                return *c;
            }
        }
        in_features
    }

    /// Initializes parameters (Kaiming-uniform weights, unit batchnorm) and
    /// identity origin maps.
    pub fn finish<T: Scalar>(self, output: NodeId, seed: u64) -> Result<ModelGraph<T>> {
        self.finish_with(None, output, seed)
    }

    pub(crate) fn finish_with<T: Scalar>(
        self,
        arch: Option<super::ArchSpec>,
        output: NodeId,
        seed: u64,
    ) -> Result<ModelGraph<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut origin = BTreeMap::new();
        let uniform = |shape: &[usize], bound: f64, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape, data).expect("shape matches generated data")
        };
        for node in &self.nodes {
            let id = node.id;
            match node.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let fan_in = (in_channels * kernel * kernel).max(1) as f64;
                    let w = uniform(
                        &[out_channels, in_channels, kernel, kernel],
                        (6.0 / fan_in).sqrt(),
                        &mut rng,
                    );
                    params.insert(ParamKey::new(id, Role::Weight), w);
                    if bias {
                        let b = uniform(&[out_channels], 1.0 / fan_in.sqrt(), &mut rng);
                        params.insert(ParamKey::new(id, Role::Bias), b);
                    }
                    origin.insert(Slot::new(id, SlotDim::Out), (0..out_channels).collect());
                    origin.insert(Slot::new(id, SlotDim::In), (0..in_channels).collect());
                }
                LayerKind::BatchNorm2d { channels } => {
                    params.insert(ParamKey::new(id, Role::Gamma), Tensor::full(&[channels], T::one()));
                    params.insert(ParamKey::new(id, Role::Beta), Tensor::zeros(&[channels]));
                    params.insert(ParamKey::new(id, Role::RunningMean), Tensor::zeros(&[channels]));
                    params.insert(ParamKey::new(id, Role::RunningVar), Tensor::full(&[channels], T::one()));
                    origin.insert(Slot::new(id, SlotDim::Channel), (0..channels).collect());
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    bias,
                } => {
                    let fan_in = in_features.max(1) as f64;
                    let w = uniform(&[out_features, in_features], (6.0 / fan_in).sqrt(), &mut rng);
                    params.insert(ParamKey::new(id, Role::Weight), w);
                    if bias {
                        let b = uniform(&[out_features], 1.0 / fan_in.sqrt(), &mut rng);
                        params.insert(ParamKey::new(id, Role::Bias), b);
                    }
                    origin.insert(Slot::new(id, SlotDim::Out), (0..out_features).collect());
                    origin.insert(Slot::new(id, SlotDim::In), (0..self.linear_in_width(node)).collect());
                }
                _ => {}
            }
        }
        ModelGraph::from_parts(arch, self.nodes, output, params, origin)
    }
}
