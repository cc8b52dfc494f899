//! Reverse-mode differentiation over a recorded tape.
//!
//! Every primitive appends one node holding its output value plus whatever
//! the backward rule needs. Nodes are appended in evaluation order, so a
//! reverse sweep is a valid topological order.

pub mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use kernels::{BnCache, ConvGeom, PoolGeom};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Param,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank(op: &str, t: &[usize], rank: usize) -> Result<()> {
    if t.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "{} expects rank-{} input, got shape {:?}",
            op, rank, t
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives a gradient (inputs, fixed data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        expect_rank("conv2d", &xs, 4)?;
        expect_rank("conv2d weight", &ws, 4)?;
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d input channels", ws[1], xs[1]));
        }
        if ws[2] != ws[3] || ws[2] == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be square and nonempty, got {:?}",
                ws
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {} larger than padded input {}x{}",
                ws[2], xs[2], xs[3]
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [ws[0]] {
                return Err(Error::shape("conv2d bias", ws[0], bs.iter().product()));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let (oh, ow) = geom.out_hw();
        let value = Tensor::new(&[geom.batch, geom.out_ch, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        expect_rank("linear", &xs, 2)?;
        expect_rank("linear weight", &ws, 2)?;
        if xs[1] != ws[1] {
            return Err(Error::shape("linear input features", ws[1], xs[1]));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != ws[0] {
                return Err(Error::shape("linear bias", ws[0], self.value(b).numel()));
            }
        }
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            xs[0],
            ws[1],
            ws[0],
        );
        let value = Tensor::new(&[xs[0], ws[0]], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    /// Batch normalization over NCHW. In training mode the batch statistics
    /// are used and exposed through [`batch_stats`](Self::batch_stats).
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        training: bool,
    ) -> Result<Var> {
        self.batchnorm2d_fixed(input, gamma, beta, running_mean, running_var, training, None)
    }

    /// Like [`batchnorm2d`](Self::batchnorm2d), but channels flagged in
    /// `fixed` use the stored statistics even in training mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_fixed(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        training: bool,
        fixed: Option<&[bool]>,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        expect_rank("batchnorm2d", &xs, 4)?;
        let channels = xs[1];
        for (name, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.numel() != channels {
                return Err(Error::shape(format!("batchnorm2d {}", name), channels, t.numel()));
            }
        }
        if let Some(f) = fixed {
            if f.len() != channels {
                return Err(Error::shape("batchnorm2d fixed flags", channels, f.len()));
            }
        }
        let plane = xs[2] * xs[3];
        let (out, cache) = kernels::batchnorm_forward(
            self.value(input).data(),
            xs[0],
            channels,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean.data(),
            running_var.data(),
            training,
            fixed,
        );
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// Batch mean and unbiased variance of a training-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { cache, .. } if cache.training => Some((&cache.batch_mean, &cache.batch_var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { input })
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("maxpool2d", input, kernel, stride)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), &geom);
        let (oh, ow) = geom.out_hw();
        let value = Tensor::new(&[geom.batch, geom.channels, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("avgpool2d", input, kernel, stride)?;
        let out = kernels::avgpool_forward(self.value(input).data(), &geom);
        let (oh, ow) = geom.out_hw();
        let value = Tensor::new(&[geom.batch, geom.channels, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { input, geom }))
    }

    fn pool_geom(&self, op: &str, input: Var, kernel: usize, stride: usize) -> Result<PoolGeom> {
        let xs = self.value(input).shape();
        expect_rank(op, xs, 4)?;
        if kernel == 0 || stride == 0 || kernel > xs[2] || kernel > xs[3] {
            return Err(Error::InvalidArgument(format!(
                "{} kernel {} stride {} invalid for input {:?}",
                op, kernel, stride, xs
            )));
        }
        Ok(PoolGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel,
            stride,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::InvalidArgument(format!(
                "add operands differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::InvalidArgument(format!(
                "mul operands differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Collapses all non-batch dimensions: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.shape()[0];
        let rest = x.numel() / n;
        let value = x.clone().reshape(&[n, rest]).expect("flatten preserves numel");
        self.push(value, Op::Reshape { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        expect_rank("cross_entropy", &ls, 2)?;
        if labels.len() != ls[0] {
            return Err(Error::shape("cross_entropy labels", ls[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= ls[1]) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, ls[1]
            )));
        }
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits).data(), labels, ls[1]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every
    /// [`param`](Self::param) leaf (zeros where the root does not depend on
    /// it) and stores it in that leaf's grad buffer.
    pub fn backward(&mut self, root: Var) -> Result<BTreeMap<Var, Tensor<T>>> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::Autodiff(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param) {
                // Parameters are leaves; keep the accumulated gradient.
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Vec<T>| match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let w = self.nodes[weight.0].value.data();
                    let (dx, dw, db) = kernels::conv2d_backward(&g, cols, w, bias.is_some(), geom);
                    acc(*input, dx);
                    acc(*weight, dw);
                    if let (Some(b), Some(db)) = (bias, db) {
                        acc(*b, db);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (dx, dw, db) = kernels::linear_backward(
                        &g,
                        x.data(),
                        w.data(),
                        bias.is_some(),
                        x.shape()[0],
                        x.shape()[1],
                        w.shape()[0],
                    );
                    acc(*input, dx);
                    acc(*weight, dw);
                    if let (Some(b), Some(db)) = (bias, db) {
                        acc(*b, db);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let xs = self.nodes[input.0].value.shape();
                    let (dx, dg, db) = kernels::batchnorm_backward(
                        &g,
                        cache,
                        self.nodes[gamma.0].value.data(),
                        xs[0],
                        xs[1],
                        xs[2] * xs[3],
                    );
                    acc(*input, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(*input, d);
                }
                Op::MaxPool { input, argmax } => {
                    let len = self.nodes[input.0].value.numel();
                    acc(*input, kernels::maxpool_backward(&g, argmax, len));
                }
                Op::AvgPool { input, geom } => {
                    acc(*input, kernels::avgpool_backward(&g, geom));
                }
                Op::Add { a, b } => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul { a, b } => {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    acc(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                    acc(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
                Op::Reshape { input } => acc(*input, g),
                Op::Sum { input } => {
                    let n = self.nodes[input.0].value.numel();
                    acc(*input, vec![g[0]; n]);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let classes = self.nodes[logits.0].value.shape()[1];
                    acc(*logits, kernels::cross_entropy_backward(probs, labels, classes, g[0]));
                }
            }
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Param) {
                continue;
            }
            let g = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            let t = Tensor::new(node.value.shape(), g)?;
            node.value.set_grad(t.data().to_vec())?;
            out.insert(Var(idx), t);
        }
        Ok(out)
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}
