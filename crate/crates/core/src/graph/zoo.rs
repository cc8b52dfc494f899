//! Architecture plans and their realization into graphs.

use serde::{Deserialize, Serialize};

use super::{GraphBuilder, ModelGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const KNOWN_ARCHS: &[&str] = &[
    "vgg16_bn_cifar10",
    "resnet20_cifar10",
    "resnet56_cifar10",
    "alexnet_10class",
    "tinynet",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VggItem {
    Conv(usize),
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResStage {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlexConv {
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchPlan {
    /// Conv(3x3, pad 1, no bias)-BN-ReLU stacks with 2x2 max pools, then an MLP head.
    Vgg { features: Vec<VggItem>, hidden: Vec<usize> },
    /// Basic-block residual network; stride-2 stages use 1x1 conv + BN shortcuts.
    ResNet {
        stem: usize,
        stem_pool: bool,
        stages: Vec<ResStage>,
    },
    /// Biased convs with ReLU and 3x3/2 max pools, then an MLP head.
    AlexNet { convs: Vec<AlexConv>, hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub plan: ArchPlan,
}

fn resnet_cifar(name: &str, blocks: usize) -> ArchSpec {
    ArchSpec {
        name: name.into(),
        input: [3, 32, 32],
        classes: 10,
        plan: ArchPlan::ResNet {
            stem: 16,
            stem_pool: false,
            stages: vec![
                ResStage {
                    width: 16,
                    blocks,
                    stride: 1,
                },
                ResStage {
                    width: 32,
                    blocks,
                    stride: 2,
                },
                ResStage {
                    width: 64,
                    blocks,
                    stride: 2,
                },
            ],
        },
    }
}

impl ArchSpec {
    pub fn named(name: &str) -> Result<ArchSpec> {
        use VggItem::{Conv, Pool};
        let spec = match name {
            "vgg16_bn_cifar10" => ArchSpec {
                name: name.into(),
                input: [3, 32, 32],
                classes: 10,
                plan: ArchPlan::Vgg {
                    #[rustfmt::skip]
                    features: vec![
                        Conv(64), Conv(64), Pool,
                        Conv(128), Conv(128), Pool,
                        Conv(256), Conv(256), Conv(256), Pool,
                        Conv(512), Conv(512), Conv(512), Pool,
                        Conv(512), Conv(512), Conv(512), Pool,
                    ],
                    hidden: vec![512, 512],
                },
            },
            "resnet20_cifar10" => resnet_cifar(name, 3),
            "resnet56_cifar10" => resnet_cifar(name, 9),
            "alexnet_10class" => {
                let c = |out, kernel, stride, pad, pool| AlexConv {
                    out,
                    kernel,
                    stride,
                    pad,
                    pool,
                };
                ArchSpec {
                    name: name.into(),
                    input: [3, 224, 224],
                    classes: 10,
                    plan: ArchPlan::AlexNet {
                        convs: vec![
                            c(64, 11, 4, 2, true),
                            c(192, 5, 1, 2, true),
                            c(384, 3, 1, 1, false),
                            c(256, 3, 1, 1, false),
                            c(256, 3, 1, 1, true),
                        ],
                        hidden: vec![4096, 4096],
                    },
                }
            }
            "tinynet" => ArchSpec {
                name: name.into(),
                input: [3, 16, 16],
                classes: 4,
                plan: ArchPlan::ResNet {
                    stem: 16,
                    stem_pool: true,
                    stages: vec![
                        ResStage {
                            width: 16,
                            blocks: 1,
                            stride: 1,
                        },
                        ResStage {
                            width: 48,
                            blocks: 1,
                            stride: 2,
                        },
                    ],
                },
            },
            _ => {
                return Err(Error::UnknownArch {
                    name: name.into(),
                    known: KNOWN_ARCHS.iter().map(|s| s.to_string()).collect(),
                })
            }
        };
        Ok(spec)
    }

    /// Same plan with a different class count.
    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }
}

fn conv_bn_relu(b: &mut GraphBuilder, x: NodeId, out: usize, stride: usize) -> NodeId {
    let c = b.conv(x, out, 3, stride, 1, false);
    let n = b.batchnorm(c);
    b.relu(n)
}

/// Realizes `spec` with parameters drawn from `seed`.
pub fn build<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<ModelGraph<T>> {
    let [c, h, w] = spec.input;
    if c == 0 || h == 0 || w == 0 || spec.classes == 0 {
        return Err(Error::InvalidArgument(format!("degenerate spec {:?}", spec)));
    }
    let mut b = GraphBuilder::new(c, h, w);
    let mut x = b.input();
    let head_hidden: &[usize];
    match &spec.plan {
        ArchPlan::Vgg { features, hidden } => {
            for item in features {
                x = match *item {
                    VggItem::Conv(width) => conv_bn_relu(&mut b, x, width, 1),
                    VggItem::Pool => b.maxpool(x, 2, 2),
                };
            }
            x = b.flatten(x);
            head_hidden = hidden;
        }
        ArchPlan::AlexNet { convs, hidden } => {
            for conv in convs {
                x = b.conv(x, conv.out, conv.kernel, conv.stride, conv.pad, true);
                x = b.relu(x);
                if conv.pool {
                    x = b.maxpool(x, 3, 2);
                }
            }
            x = b.flatten(x);
            head_hidden = hidden;
        }
        ArchPlan::ResNet {
            stem,
            stem_pool,
            stages,
        } => {
            x = conv_bn_relu(&mut b, x, *stem, 1);
            if *stem_pool {
                x = b.maxpool(x, 2, 2);
            }
            let mut width = *stem;
            for stage in stages {
                for i in 0..stage.blocks {
                    let stride = if i == 0 { stage.stride } else { 1 };
                    let y = conv_bn_relu(&mut b, x, stage.width, stride);
                    let y = b.conv(y, stage.width, 3, 1, 1, false);
                    let y = b.batchnorm(y);
                    let shortcut = if stride != 1 || width != stage.width {
                        let s = b.conv(x, stage.width, 1, stride, 0, false);
                        b.batchnorm(s)
                    } else {
                        x
                    };
                    let sum = b.add(y, shortcut);
                    x = b.relu(sum);
                    width = stage.width;
                }
            }
            x = b.global_avgpool(x);
            x = b.flatten(x);
            head_hidden = &[];
        }
    }
    for &width in head_hidden {
        x = b.linear(x, width, true);
        x = b.relu(x);
    }
    let out = b.linear(x, spec.classes, true);
    b.finish_with(Some(spec.clone()), out, seed)
}
