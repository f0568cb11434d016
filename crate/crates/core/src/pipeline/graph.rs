//! Differentiable forward pass on the autodiff tape.
//!
//! Each stage is a free function over graph variables so tests and the
//! gradient checker can drive stages in isolation.

use rand::Rng;

use super::params::conv_name;
use super::{PipelineConfig, PipelineParams};
use crate::autodiff::{gumbel_softmax, Graph, Var};
use crate::error::Result;

/// Graph handles for every parameter tensor, in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub all: Vec<(String, Var)>,
    pub glc_fc1: (Var, Var),
    pub glc_fc2: (Var, Var),
    pub hsa_convs: Vec<(Var, Var)>,
    pub hsa_mix: (Var, Var),
    pub rgfc_mask: (Var, Var),
    pub rgfc_fc1: (Var, Var),
    pub rgfc_fc2: (Var, Var),
}

impl ParamVars {
    /// Registers every tensor as a trainable leaf.
    pub fn register(graph: &mut Graph, params: &PipelineParams, config: &PipelineConfig) -> Result<Self> {
        params.check(config)?;
        let mut all = Vec::with_capacity(params.tensors.len());
        for t in &params.tensors {
            all.push((t.name.clone(), graph.param(&t.shape, t.data.clone())?));
        }
        let find = |name: &str| all.iter().find(|(n, _)| n == name).map(|(_, v)| *v).expect("checked");
        let layer = |name: &str| (find(&format!("{name}.weight")), find(&format!("{name}.bias")));
        Ok(ParamVars {
            glc_fc1: layer("glc.fc1"),
            glc_fc2: layer("glc.fc2"),
            hsa_convs: config.attention_kernels.iter().map(|&k| layer(&conv_name(k))).collect(),
            hsa_mix: layer("hsa.mix"),
            rgfc_mask: layer("rgfc.mask"),
            rgfc_fc1: layer("rgfc.fc1"),
            rgfc_fc2: layer("rgfc.fc2"),
            all,
        })
    }
}

/// Per-channel mean and population variance: [C,H,W] -> ([C], [C]).
pub fn glc_statistics(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    Ok((g.mean_spatial(x)?, g.var_spatial(x)?))
}

/// `softplus(fc2(relu(fc1([mu; var])))) + 1`.
pub fn glc_gains(g: &mut Graph, mu: Var, var: Var, p: &ParamVars) -> Result<Var> {
    let stats = g.concat(&[mu, var])?;
    let h = g.linear(stats, p.glc_fc1.0, p.glc_fc1.1)?;
    let h = g.relu(h);
    let r = g.linear(h, p.glc_fc2.0, p.glc_fc2.1)?;
    let s = g.softplus(r);
    Ok(g.add_scalar(s, 1.0))
}

pub fn glc_apply(g: &mut Graph, x: Var, gains: Var) -> Result<Var> {
    g.mul_channels(x, gains)
}

/// Channel-mean plane stacked on channel-max plane: [2,H,W].
pub fn hsa_pooled_descriptors(g: &mut Graph, xg: Var) -> Result<Var> {
    let avg = g.mean_channels(xg)?;
    let max = g.max_channels(xg)?;
    g.concat(&[avg, max])
}

/// One sigmoid attention map [1,H,W] per kernel size.
pub fn hsa_branch_maps(g: &mut Graph, m: Var, p: &ParamVars) -> Result<Vec<Var>> {
    p.hsa_convs
        .iter()
        .map(|&(w, b)| {
            let k = g.shape(w)[2];
            let z = g.conv2d(m, w, b, (k - 1) / 2)?;
            Ok(g.sigmoid(z))
        })
        .collect()
}

/// Softmax over branches of a 1x1 projection of the pooled input: [B].
pub fn hsa_branch_weights(g: &mut Graph, xg: Var, p: &ParamVars) -> Result<Var> {
    let d = g.mean_spatial(xg)?;
    let z = g.linear(d, p.hsa_mix.0, p.hsa_mix.1)?;
    g.softmax(z, 0)
}

/// Fused map `A = sum_b w_b A_b` and the attended tensor `X_g * A`.
pub fn hsa_fuse_apply(g: &mut Graph, xg: Var, maps: &[Var], weights: Var) -> Result<(Var, Var)> {
    let mut fused: Option<Var> = None;
    for (b, &map) in maps.iter().enumerate() {
        let wb = g.index(weights, b)?;
        let term = g.mul_scalar(map, wb)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let a = fused.expect("at least one branch");
    Ok((a, g.mul_plane(xg, a)?))
}

/// Full attention stage; returns (fused map, X_s).
pub fn hsa(g: &mut Graph, xg: Var, p: &ParamVars) -> Result<(Var, Var)> {
    let m = hsa_pooled_descriptors(g, xg)?;
    let maps = hsa_branch_maps(g, m, p)?;
    let w = hsa_branch_weights(g, xg, p)?;
    hsa_fuse_apply(g, xg, &maps, w)
}

/// Mask-head logits: 3x3 conv C -> K.
pub fn rgfc_logits(g: &mut Graph, xs: Var, p: &ParamVars) -> Result<Var> {
    g.conv2d(xs, p.rgfc_mask.0, p.rgfc_mask.1, 1)
}

/// Relaxed region masks [K,H,W] from the logits.
pub fn rgfc_masks<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    tau: f64,
    rng: &mut R,
    inference: bool,
) -> Result<Var> {
    gumbel_softmax(g, logits, tau, rng, inference)
}

/// `w = 1 + softplus(fc2(relu(fc1(GAP(logits)))))`: [K].
pub fn rgfc_weights(g: &mut Graph, logits: Var, p: &ParamVars) -> Result<Var> {
    let pooled = g.mean_spatial(logits)?;
    let h = g.linear(pooled, p.rgfc_fc1.0, p.rgfc_fc1.1)?;
    let h = g.relu(h);
    let r = g.linear(h, p.rgfc_fc2.0, p.rgfc_fc2.1)?;
    let s = g.softplus(r);
    Ok(g.add_scalar(s, 1.0))
}

/// `sum_k M_k * clamp(X_s, eps)^(1 / w_k)`.
pub fn rgfc_apply(g: &mut Graph, xs: Var, masks: Var, weights: Var, epsilon: f64) -> Result<Var> {
    let base = g.clamp_min(xs, epsilon);
    let exponents = g.reciprocal(weights);
    let mut out: Option<Var> = None;
    for k in 0..g.shape(weights)[0] {
        let e = g.index(exponents, k)?;
        let powered = g.pow(base, e)?;
        let mk = g.slice0(masks, k)?;
        let term = g.mul_plane(powered, mk)?;
        out = Some(match out {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(out.expect("at least one mask"))
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Stages {
    pub gains: Var,
    pub xg: Var,
    pub attention: Var,
    pub xs: Var,
    pub logits: Var,
    pub masks: Var,
    pub weights: Var,
    pub xo: Var,
    /// `X_o` clamped to [0, 1], still on the packed grid.
    pub packed_out: Var,
    /// Full-resolution RGB [3, 2H, 2W].
    pub rgb: Var,
}

/// Packed input -> RGB with every intermediate recorded on the tape.
pub fn forward_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    p: &ParamVars,
    config: &PipelineConfig,
    rng: &mut R,
    inference: bool,
) -> Result<Stages> {
    let (mu, var) = glc_statistics(g, x)?;
    let gains = glc_gains(g, mu, var, p)?;
    let xg = glc_apply(g, x, gains)?;
    let (attention, xs) = hsa(g, xg, p)?;
    let logits = rgfc_logits(g, xs, p)?;
    let masks = rgfc_masks(g, logits, config.tau, rng, inference)?;
    let weights = rgfc_weights(g, logits, p)?;
    let xo = rgfc_apply(g, xs, masks, weights, config.epsilon)?;
    let packed_out = g.clamp(xo, 0.0, 1.0);
    let rgb = g.unpack_rgb(packed_out)?;
    Ok(Stages {
        gains,
        xg,
        attention,
        xs,
        logits,
        masks,
        weights,
        xo,
        packed_out,
        rgb,
    })
}
