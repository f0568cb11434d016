//! Parameter and FLOP accounting.
//!
//! Convolutions and fully connected layers count two FLOPs per
//! multiply-accumulate. Elementwise operations count one FLOP per output
//! element, transcendental functions included.

use super::params::layout;
use super::PipelineConfig;

pub fn count_params(config: &PipelineConfig) -> usize {
    layout(config).iter().map(|s| s.numel()).sum()
}

/// One accounting line. `scaled` grows with the image area; `fixed` is
/// independent of it (the small MLPs and softmaxes over global vectors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopItem {
    pub stage: String,
    pub scaled: u64,
    pub fixed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub items: Vec<FlopItem>,
}

impl FlopReport {
    pub fn scaled(&self) -> u64 {
        self.items.iter().map(|i| i.scaled).sum()
    }

    pub fn fixed(&self) -> u64 {
        self.items.iter().map(|i| i.fixed).sum()
    }

    pub fn total(&self) -> u64 {
        self.scaled() + self.fixed()
    }
}

fn mlp_flops(input: u64, hidden: u64, output: u64) -> u64 {
    // Two layers of MACs with biases, ReLU on the hidden layer, softplus and
    // the +1 shift on the output.
    2 * input * hidden + hidden + hidden + 2 * hidden * output + output + 2 * output
}

/// Analytic FLOP count of one forward pass on a `height x width` mosaic.
pub fn flop_report(config: &PipelineConfig, height: usize, width: usize) -> FlopReport {
    let p = ((height / 2) * (width / 2)) as u64;
    let n = (height * width) as u64;
    let c = config.channels as u64;
    let k = config.mask_count as u64;
    let b = config.branches() as u64;
    let item = |stage: &str, scaled: u64, fixed: u64| FlopItem {
        stage: stage.to_string(),
        scaled,
        fixed,
    };
    let mut items = vec![
        // Mean: one add per value. Variance: subtract, square, add.
        item("glc.statistics", 4 * c * p, 2 * c),
        item("glc.gains", 0, mlp_flops(2 * c, config.glc_hidden as u64, c)),
        item("glc.apply", c * p, 0),
        // Channel sum and channel max.
        item("hsa.descriptors", 2 * c * p, 0),
    ];
    for &kk in &config.attention_kernels {
        let kk = kk as u64;
        // 2 input planes x k^2 taps of MACs, plus bias and sigmoid.
        items.push(item(&format!("hsa.branch{kk}"), p * (4 * kk * kk + 2), 0));
    }
    items.extend([
        // GAP of X_g, then a 1x1 projection and a softmax over branches.
        item("hsa.branch_weights", c * p, 2 * b * c + b + 3 * b),
        // Weighted sum of branch maps, then broadcast multiply.
        item("hsa.fuse", 2 * b * p + c * p, 0),
        item("rgfc.mask_head", k * p * (18 * c + 1), 0),
        // Noise add, temperature scale, max subtraction, exp, normalization.
        item("rgfc.gumbel_softmax", 5 * k * p, 0),
        item("rgfc.pool", k * p, k),
        item("rgfc.weights", 0, mlp_flops(k, config.rgfc_hidden as u64, k) + k),
        // Clamp, then per region: power, mask multiply, accumulate.
        item("rgfc.apply", c * p + 3 * k * c * p, 0),
        item("output.clamp", c * p, 0),
        // Green average, then 4 multiplies + 3 adds + 2 row weights per
        // output value and channel.
        item("unpack", 2 * p + 27 * n, 0),
    ]);
    FlopReport {
        height,
        width,
        items,
    }
}

pub fn count_flops(config: &PipelineConfig, height: usize, width: usize) -> u64 {
    flop_report(config, height, width).total()
}
