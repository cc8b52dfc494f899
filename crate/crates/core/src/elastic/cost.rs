use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{LayerKind, ModelGraph};
use crate::tensor::Scalar;

/// Size and compute of one model at its declared input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub params: usize,
    pub buffers: usize,
    /// Multiply-accumulates of conv and linear layers; pools, activations and
    /// normalization are not counted.
    pub flops: u64,
    pub bytes: usize,
}

impl CostReport {
    pub fn megabytes(&self) -> f64 {
        self.bytes as f64 / (1024.0 * 1024.0)
    }
}

/// `m_out·k²·m_in·h_out·w_out` for a conv producing an `h_out × w_out` map.
pub fn conv_flops(out_ch: usize, kernel: usize, in_ch: usize, out_h: usize, out_w: usize) -> u64 {
    (out_ch * kernel * kernel * in_ch) as u64 * (out_h * out_w) as u64
}

pub fn cost_report<T: Scalar>(model: &ModelGraph<T>) -> Result<CostReport> {
    let shapes = model.infer_shapes()?;
    let mut flops = 0u64;
    for node in model.nodes() {
        match node.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let s = &shapes[node.id.0];
                flops += conv_flops(out_channels, kernel, in_channels, s[1], s[2]);
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => flops += (in_features * out_features) as u64,
            _ => {}
        }
    }
    Ok(CostReport {
        params: model.count_params(),
        buffers: model.count_buffers(),
        flops,
        bytes: model.model_size_bytes(),
    })
}
