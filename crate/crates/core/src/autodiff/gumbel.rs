use rand::distributions::Open01;
use rand::Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};

/// `n` standard Gumbel draws, `-ln(-ln u)` with `u` uniform on (0, 1).
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed categorical sample along the leading axis of `logits`.
///
/// Training draws Gumbel noise from `rng` (row-major order over the logits)
/// and returns `softmax((logits + g) / tau)`; gradients flow through the
/// soft output. Inference skips the noise: `softmax(logits / tau)`.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    graph: &mut Graph,
    logits: Var,
    tau: f64,
    rng: &mut R,
    inference: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = if inference {
        logits
    } else {
        let shape = graph.shape(logits).to_vec();
        let noise = gumbel_noise(rng, graph.value(logits).len());
        let noise = graph.constant(&shape, noise)?;
        graph.add(logits, noise)?
    };
    let scaled = graph.scale(perturbed, 1.0 / tau);
    graph.softmax(scaled, 0)
}
