use std::collections::BTreeMap;

use super::{LayerKind, ModelGraph, NodeId, ParamKey, Role};
use crate::autodiff::kernels::BN_MOMENTUM;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; running statistics get updated.
    Train,
    /// Stored statistics; nothing is mutated.
    Eval,
}

/// Handles into a tape produced by [`ModelGraph::record`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: Var,
    pub params: BTreeMap<ParamKey, Var>,
    pub batchnorms: Vec<(NodeId, Var)>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Records one forward pass on `tape`. Registry tensors enter the tape as
    /// gradient-tracked leaves.
    pub fn record(&self, tape: &mut Tape<T>, batch: &Tensor<T>, mode: Mode) -> Result<Trace> {
        self.record_with(tape, batch, mode, None)
    }

    /// [`record`](Self::record) where batchnorm channels flagged in `fixed_bn`
    /// normalize with their stored statistics in training mode too.
    pub fn record_with(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        mode: Mode,
        fixed_bn: Option<&BTreeMap<NodeId, Vec<bool>>>,
    ) -> Result<Trace> {
        let [c, h, w] = self.input_shape();
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::NodeShape {
                node: 0,
                kind: "input",
                message: format!(
                    "batch shape {:?} does not match [N, {}, {}, {}]",
                    batch.shape(),
                    c,
                    h,
                    w
                ),
            });
        }
        let mut params = BTreeMap::new();
        for (key, t) in self.params() {
            if !key.role.is_buffer() {
                params.insert(*key, tape.param(t.clone()));
            }
        }
        let mut batchnorms = Vec::new();
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let training = mode == Mode::Train;
        for node in &self.nodes {
            let wrap = |e: Error| match e {
                e @ Error::NodeShape { .. } => e,
                other => Error::NodeShape {
                    node: node.id.0,
                    kind: node.kind.name(),
                    message: other.to_string(),
                },
            };
            let input = node.inputs.first().map(|i| vars[i.0]);
            let p = |role| params.get(&ParamKey::new(node.id, role)).copied();
            let v = match node.kind {
                LayerKind::Input { .. } => tape.constant(batch.clone()),
                LayerKind::Conv2d { stride, pad, .. } => tape
                    .conv2d(input.unwrap(), p(Role::Weight).unwrap(), p(Role::Bias), stride, pad)
                    .map_err(wrap)?,
                LayerKind::BatchNorm2d { .. } => {
                    let mean = &self.params[&ParamKey::new(node.id, Role::RunningMean)];
                    let var = &self.params[&ParamKey::new(node.id, Role::RunningVar)];
                    let fixed = fixed_bn.and_then(|f| f.get(&node.id)).map(Vec::as_slice);
                    let v = tape
                        .batchnorm2d_fixed(
                            input.unwrap(),
                            p(Role::Gamma).unwrap(),
                            p(Role::Beta).unwrap(),
                            mean,
                            var,
                            training,
                            fixed,
                        )
                        .map_err(wrap)?;
                    batchnorms.push((node.id, v));
                    v
                }
                LayerKind::Relu => tape.relu(input.unwrap()),
                LayerKind::MaxPool2d { kernel, stride } => {
                    tape.maxpool2d(input.unwrap(), kernel, stride).map_err(wrap)?
                }
                LayerKind::AvgPool2d { kernel, stride } => {
                    tape.avgpool2d(input.unwrap(), kernel, stride).map_err(wrap)?
                }
                LayerKind::Add => tape.add(vars[node.inputs[0].0], vars[node.inputs[1].0]).map_err(wrap)?,
                LayerKind::Flatten => tape.flatten(input.unwrap()),
                LayerKind::Linear { .. } => tape
                    .linear(input.unwrap(), p(Role::Weight).unwrap(), p(Role::Bias))
                    .map_err(wrap)?,
            };
            vars.push(v);
        }
        Ok(Trace {
            logits: vars[self.output.0],
            params,
            batchnorms,
        })
    }

    /// Runs the network. In [`Mode::Train`] batchnorm running statistics are
    /// updated; in [`Mode::Eval`] the model is left untouched.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, batch, mode)?;
        if mode == Mode::Train {
            self.update_running_stats(&tape, &trace, None);
        }
        Ok(tape.value(trace.logits).clone())
    }

    /// Eval-mode forward through a shared reference.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// `running ← (1 − momentum)·running + momentum·batch` for every
    /// training-mode batchnorm on the tape, skipping channels flagged in
    /// `frozen`.
    pub fn update_running_stats(
        &mut self,
        tape: &Tape<T>,
        trace: &Trace,
        frozen: Option<&BTreeMap<NodeId, Vec<bool>>>,
    ) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (node, v) in &trace.batchnorms {
            let Some((mean, var)) = tape.batch_stats(*v) else {
                continue;
            };
            let skip = frozen.and_then(|f| f.get(node));
            for (role, stat) in [(Role::RunningMean, mean), (Role::RunningVar, var)] {
                let running = self
                    .params
                    .get_mut(&ParamKey::new(*node, role))
                    .expect("batchnorm buffers present");
                for (c, (r, &s)) in running.data_mut().iter_mut().zip(stat).enumerate() {
                    if skip.is_some_and(|f| f[c]) {
                        continue;
                    }
                    *r = keep * *r + m * s;
                }
            }
        }
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Mean cross-entropy on one labeled batch and the gradient of every
    /// trainable registry tensor. Runs in eval mode, so nothing is mutated.
    pub fn loss_gradients(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(T, BTreeMap<ParamKey, Tensor<T>>)> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, batch, Mode::Eval)?;
        let loss = tape.cross_entropy(trace.logits, labels)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let out = trace
            .params
            .iter()
            .map(|(k, v)| (*k, grads.remove(v).expect("every param leaf has a gradient")))
            .collect();
        Ok((value, out))
    }
}
