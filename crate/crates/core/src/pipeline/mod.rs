//! The learned RAW-to-RGB pipeline: global luminance calibration (GLC),
//! hierarchical spatial attention (HSA) and region-guided feature
//! conditioning (RGFC) on the packed Bayer grid, followed by the fixed
//! unpacking to full-resolution RGB.
//!
//! [`graph`] builds the differentiable version on the autodiff tape;
//! [`infer`] holds the tape-free kernels used for inference.

mod accounting;
mod config;
pub mod graph;
pub mod infer;
pub mod params;

use rand::Rng;

pub use accounting::{count_flops, count_params, flop_report, FlopItem, FlopReport};
pub use config::PipelineConfig;
pub use infer::{FastModel, Planes, Trace};
pub use params::{load_params, save_params, ParamTensor, PipelineParams};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raw_io::{pack, RawImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Records the tape and perturbs the masks with Gumbel noise.
    Train,
    /// Deterministic, tape-free.
    Infer,
}

/// Runs the pipeline on a RAW mosaic.
///
/// Train mode records the autodiff graph (and discards it; see
/// [`graph::forward_graph`] to keep it) and draws mask noise from `rng`.
/// Infer mode ignores `rng`.
pub fn forward<R: Rng + ?Sized>(
    raw: &RawImage,
    params: &PipelineParams,
    config: &PipelineConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<RgbImage> {
    match mode {
        Mode::Infer => FastModel::<f64>::new(params, config)?.run(raw, Exec::default()),
        Mode::Train => {
            if config.channels != 4 {
                return Err(Error::Config(format!(
                    "a Bayer mosaic packs into 4 channels, config has {}",
                    config.channels
                )));
            }
            let packed = pack::<f64>(raw, Exec::default());
            let mut g = Graph::new();
            let p = graph::ParamVars::register(&mut g, params, config)?;
            let x = g.constant(&packed.shape(), packed.values)?;
            let stages = graph::forward_graph(&mut g, x, &p, config, rng, false)?;
            let (h, w) = (2 * packed.height, 2 * packed.width);
            let mut rgb = RgbImage::new(h, w, g.value(stages.rgb).to_vec())?;
            rgb.clamp_unit();
            Ok(rgb)
        }
    }
}

#[cfg(test)]
mod tests;
