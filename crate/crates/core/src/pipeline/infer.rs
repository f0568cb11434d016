//! Tape-free inference kernels, generic over the scalar type.
//!
//! Work is split into independent output rows so [`Exec`] can spread it over
//! threads. Global statistics accumulate per row in `f64` and are combined in
//! row order, which keeps results identical under both execution policies.
//! The mask planes are never stored: each output row recomputes its K logits,
//! and the pooled logits needed for the region weights come from border sums
//! of `X_s` instead of a full pass over the logit volume.

use super::params::conv_name;
use super::{PipelineConfig, PipelineParams};
use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raw_io::{pack, unpack_to_rgb, PackedTensor, RawImage, RgbImage};
use crate::real::{with_simd, Real};

/// Dense `[C, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "[{channels},{height},{width}] needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Planes {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn row(&self, c: usize, i: usize) -> &[T] {
        let start = (c * self.height + i) * self.width;
        &self.values[start..start + self.width]
    }
}

impl<T: Real> From<PackedTensor<T>> for Planes<T> {
    fn from(p: PackedTensor<T>) -> Self {
        Planes {
            channels: 4,
            height: p.height,
            width: p.width,
            values: p.values,
        }
    }
}

/// Output columns per register-blocked strip of the mask head.
const STRIP: usize = 16;

/// Per-row buffers reused inside one task.
#[derive(Default)]
struct RowScratch<T> {
    pad: Vec<T>,
    taps: Vec<(usize, [T; 3])>,
    a: Vec<T>,
    b: Vec<T>,
}

/// `out[x] += w * src[x + dx]` wherever `x + dx` is in range.
#[inline(always)]
fn axpy_shifted<T: Real>(out: &mut [T], src: &[T], w: T, dx: isize) {
    let n = out.len() as isize;
    let lo = (-dx).max(0);
    let hi = (n - dx).min(n);
    if lo >= hi {
        return;
    }
    let o = &mut out[lo as usize..hi as usize];
    let s = &src[(lo + dx) as usize..(hi + dx) as usize];
    for (a, &b) in o.iter_mut().zip(s) {
        *a = *a + w * b;
    }
}

/// Adds one output row of a same-padded `cin -> 1` convolution to `out`.
/// `weights` is `[cin, k, k]`; `row(ci, sy)` yields input rows.
#[inline(always)]
fn conv_row<'a, T: Real + 'a>(
    out: &mut [T],
    weights: &[T],
    cin: usize,
    k: usize,
    i: usize,
    height: usize,
    row: impl Fn(usize, usize) -> &'a [T],
) {
    let p = (k / 2) as isize;
    for ci in 0..cin {
        for ky in 0..k {
            let sy = i as isize + ky as isize - p;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            let src = row(ci, sy as usize);
            for kx in 0..k {
                axpy_shifted(out, src, weights[(ci * k + ky) * k + kx], kx as isize - p);
            }
        }
    }
}

/// `fc2(relu(fc1(x)))` in `f64`.
fn mlp(x: &[f64], fc1: (&[f64], &[f64]), fc2: (&[f64], &[f64])) -> Vec<f64> {
    let hidden: Vec<f64> = linear(x, fc1.0, fc1.1).into_iter().map(|v| v.max(0.0)).collect();
    linear(&hidden, fc2.0, fc2.1)
}

fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| bias + w[r * n..(r + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Parameters unpacked for the inference kernels.
#[derive(Debug, Clone)]
pub struct FastModel<T> {
    config: PipelineConfig,
    glc_fc1: (Vec<f64>, Vec<f64>),
    glc_fc2: (Vec<f64>, Vec<f64>),
    /// Per kernel size: `[2, k, k]` weights and the bias.
    hsa_convs: Vec<(usize, Vec<T>, T)>,
    hsa_mix: (Vec<f64>, Vec<f64>),
    mask_w: Vec<T>,
    mask_w64: Vec<f64>,
    mask_b: Vec<f64>,
    rgfc_fc1: (Vec<f64>, Vec<f64>),
    rgfc_fc2: (Vec<f64>, Vec<f64>),
}

/// Intermediate results of one inference pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub gains: Vec<f64>,
    pub branch_weights: Vec<f64>,
    pub attention: Vec<T>,
    pub xs: Planes<T>,
    pub pooled_logits: Vec<f64>,
    pub region_weights: Vec<f64>,
    pub output: Planes<T>,
}

impl<T: Real> FastModel<T> {
    pub fn new(params: &PipelineParams, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        params.check(config)?;
        let f64s = |name: &str| params.data(name).map(|d| d.to_vec());
        let layer = |name: &str| -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((f64s(&format!("{name}.weight"))?, f64s(&format!("{name}.bias"))?))
        };
        let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let hsa_convs = config
            .attention_kernels
            .iter()
            .map(|&k| {
                let (w, b) = layer(&conv_name(k))?;
                Ok((k, cast(&w), T::of(b[0])))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mask_w64, mask_b) = layer("rgfc.mask")?;
        Ok(FastModel {
            config: config.clone(),
            glc_fc1: layer("glc.fc1")?,
            glc_fc2: layer("glc.fc2")?,
            hsa_convs,
            hsa_mix: layer("hsa.mix")?,
            mask_w: cast(&mask_w64),
            mask_w64,
            mask_b,
            rgfc_fc1: layer("rgfc.fc1")?,
            rgfc_fc2: layer("rgfc.fc2")?,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn check_input(&self, x: &Planes<T>) -> Result<()> {
        if x.channels != self.config.channels || x.height == 0 || x.width == 0 {
            return Err(Error::Dimension(format!(
                "input [{},{},{}] does not match {} configured channels",
                x.channels, x.height, x.width, self.config.channels
            )));
        }
        Ok(())
    }

    /// Per-channel mean and population variance, accumulated in `f64`.
    pub fn channel_statistics(&self, x: &Planes<T>, exec: Exec) -> (Vec<f64>, Vec<f64>) {
        let (c, h) = (x.channels, x.height);
        let n = (h * x.width) as f64;
        let sums = exec.map(c * h, |r| x.row(r / h, r % h).iter().map(|v| v.as_f64()).sum::<f64>());
        let mean: Vec<f64> = sums.chunks(h).map(|s| s.iter().sum::<f64>() / n).collect();
        let sq = exec.map(c * h, |r| {
            let mu = mean[r / h];
            x.row(r / h, r % h).iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>()
        });
        let var = sq.chunks(h).map(|s| s.iter().sum::<f64>() / n).collect();
        (mean, var)
    }

    /// GLC gains `softplus(F_g([mu; var])) + 1` from precomputed statistics.
    pub fn gains_from_stats(&self, mean: &[f64], var: &[f64]) -> Vec<f64> {
        let stats: Vec<f64> = mean.iter().chain(var).copied().collect();
        mlp(
            &stats,
            (&self.glc_fc1.0, &self.glc_fc1.1),
            (&self.glc_fc2.0, &self.glc_fc2.1),
        )
        .into_iter()
        .map(|r| softplus(r) + 1.0)
        .collect()
    }

    /// HSA branch weights from the pooled calibrated input `alpha * mean`.
    pub fn branch_weights(&self, pooled: &[f64]) -> Vec<f64> {
        softmax(&linear(pooled, &self.hsa_mix.0, &self.hsa_mix.1))
    }

    /// Fused attention map and `X_s = (alpha * X) * A`.
    pub fn hsa(&self, x: &Planes<T>, gains: &[f64], branch: &[f64], exec: Exec) -> (Vec<T>, Planes<T>) {
        let (c, h, w) = (x.channels, x.height, x.width);
        let alpha: Vec<T> = gains.iter().map(|&g| T::of(g)).collect();
        let inv_c = T::of(c as f64).recip();

        // Descriptor planes of X_g: rows 0..h hold the channel mean, h..2h the max.
        let mut desc = vec![T::zero(); 2 * h * w];
        exec.for_each_chunk(&mut desc, w, |idx, out| {
            let (kind, i) = (idx / h, idx % h);
            if kind == 0 {
                for ch in 0..c {
                    let a = alpha[ch];
                    for (o, &v) in out.iter_mut().zip(x.row(ch, i)) {
                        *o = *o + v * a;
                    }
                }
                for o in out.iter_mut() {
                    *o = *o * inv_c;
                }
            } else {
                let a = alpha[0];
                for (o, &v) in out.iter_mut().zip(x.row(0, i)) {
                    *o = v * a;
                }
                for ch in 1..c {
                    let a = alpha[ch];
                    for (o, &v) in out.iter_mut().zip(x.row(ch, i)) {
                        *o = o.max(v * a);
                    }
                }
            }
        });

        let branch: Vec<T> = branch.iter().map(|&b| T::of(b)).collect();
        let desc_row = |ci: usize, sy: usize| &desc[(ci * h + sy) * w..(ci * h + sy + 1) * w];
        let mut attention = vec![T::zero(); h * w];
        exec.for_each_chunk(&mut attention, w, |i, out| with_simd(|| {
            let mut z = vec![T::zero(); w];
            let mut t = vec![T::zero(); w];
            for (b, (k, weights, bias)) in self.hsa_convs.iter().enumerate() {
                z.fill(*bias);
                conv_row(&mut z, weights, 2, *k, i, h, desc_row);
                // Two-branch logistic: exp(-|z|) never overflows.
                for (tv, &zv) in t.iter_mut().zip(&z) {
                    *tv = -zv.abs();
                }
                T::exp_in_place(&mut t);
                let wb = branch[b];
                for ((o, &zv), &e) in out.iter_mut().zip(&z).zip(&t) {
                    let s = if zv >= T::zero() {
                        T::one() / (T::one() + e)
                    } else {
                        e / (T::one() + e)
                    };
                    *o = if b == 0 { s * wb } else { *o + s * wb };
                }
            }
        }));

        let mut xs = vec![T::zero(); c * h * w];
        exec.for_each_chunk(&mut xs, w, |idx, out| {
            let (ch, i) = (idx / h, idx % h);
            let a = alpha[ch];
            let att = &attention[i * w..(i + 1) * w];
            for ((o, &v), &m) in out.iter_mut().zip(x.row(ch, i)).zip(att) {
                *o = v * a * m;
            }
        });
        (
            attention,
            Planes {
                channels: c,
                height: h,
                width: w,
                values: xs,
            },
        )
    }

    /// Spatial mean of the mask-head logits without materializing them.
    ///
    /// A tap at offset `(dy, dx)` reads every pixel except the row and
    /// column that fall off the far edge, so its contribution to the total
    /// is the plane sum minus those border sums plus their shared corner.
    pub fn pooled_logits(&self, xs: &Planes<T>, exec: Exec) -> Vec<f64> {
        let (c, h, w) = (xs.channels, xs.height, xs.width);
        let k = self.config.mask_count;
        // Per channel: [total, first row, last row, first col, last col].
        let rows = exec.map(c * h, |r| {
            let row = xs.row(r / h, r % h);
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            (sum, row[0].as_f64(), row[w - 1].as_f64())
        });
        let border: Vec<[f64; 5]> = (0..c)
            .map(|ch| {
                let part = &rows[ch * h..(ch + 1) * h];
                [
                    part.iter().map(|r| r.0).sum(),
                    part[0].0,
                    part[h - 1].0,
                    part.iter().map(|r| r.1).sum(),
                    part.iter().map(|r| r.2).sum(),
                ]
            })
            .collect();
        let at = |ch: usize, i: usize, j: usize| xs.values[(ch * h + i) * w + j].as_f64();
        let n = (h * w) as f64;
        (0..k)
            .map(|kk| {
                let mut acc = 0.0;
                for (ch, b) in border.iter().enumerate() {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            // Row (column) left out: last for a -1 offset, first for +1.
                            let skip_row = match ky {
                                0 => Some((b[2], h - 1)),
                                2 => Some((b[1], 0)),
                                _ => None,
                            };
                            let skip_col = match kx {
                                0 => Some((b[4], w - 1)),
                                2 => Some((b[3], 0)),
                                _ => None,
                            };
                            let mut s = b[0];
                            if let Some((r, _)) = skip_row {
                                s -= r;
                            }
                            if let Some((cs, _)) = skip_col {
                                s -= cs;
                            }
                            if let (Some((_, i)), Some((_, j))) = (skip_row, skip_col) {
                                s += at(ch, i, j);
                            }
                            acc += self.mask_w64[((kk * c + ch) * 3 + ky) * 3 + kx] * s;
                        }
                    }
                }
                self.mask_b[kk] + acc / n
            })
            .collect()
    }

    /// Region weights `w = 1 + softplus(F_w(pooled))`.
    pub fn region_weights(&self, pooled: &[f64]) -> Vec<f64> {
        mlp(
            pooled,
            (&self.rgfc_fc1.0, &self.rgfc_fc1.1),
            (&self.rgfc_fc2.0, &self.rgfc_fc2.1),
        )
        .into_iter()
        .map(|r| softplus(r) + 1.0)
        .collect()
    }

    /// Softmax masks for row `i`, written into `masks` as `[K, w]`.
    ///
    /// The 3x3 mask head runs over zero-padded copies of the three input
    /// rows in strips of [`STRIP`] outputs, so each strip's accumulators stay
    /// in registers across all `9C` taps.
    #[inline(always)]
    fn mask_row(&self, xs: &Planes<T>, i: usize, masks: &mut [T], scratch: &mut RowScratch<T>) {
        let (c, h, w) = (xs.channels, xs.height, xs.width);
        let k = self.config.mask_count;
        let inv_tau = T::of(1.0 / self.config.tau);
        let stride = w + 2 + STRIP;
        let pad = &mut scratch.pad;
        pad.clear();
        pad.resize(3 * c * stride, T::zero());
        let mut valid = [false; 3];
        for ky in 0..3 {
            let sy = i as isize + ky as isize - 1;
            valid[ky] = sy >= 0 && sy < h as isize;
            if valid[ky] {
                for ci in 0..c {
                    let r = (ci * 3 + ky) * stride;
                    pad[r + 1..r + 1 + w].copy_from_slice(xs.row(ci, sy as usize));
                }
            }
        }
        // One entry per (channel, in-range row): padded row offset and its three weights.
        let taps = &mut scratch.taps;
        taps.clear();
        for kk in 0..k {
            for ci in 0..c {
                for ky in (0..3).filter(|&ky| valid[ky]) {
                    let wv = &self.mask_w[((kk * c + ci) * 3 + ky) * 3..][..3];
                    taps.push(((ci * 3 + ky) * stride, [wv[0], wv[1], wv[2]]));
                }
            }
        }
        let per = taps.len() / k;
        for kk in 0..k {
            let bias = T::of(self.mask_b[kk]);
            let kt = &taps[kk * per..(kk + 1) * per];
            let out = &mut masks[kk * w..(kk + 1) * w];
            for x0 in (0..w).step_by(STRIP) {
                let mut acc = [bias; STRIP];
                for &(off, wv) in kt {
                    let src = &pad[off + x0..off + x0 + STRIP + 2];
                    for t in 0..STRIP {
                        acc[t] = acc[t] + wv[0] * src[t] + wv[1] * src[t + 1] + wv[2] * src[t + 2];
                    }
                }
                let n = STRIP.min(w - x0);
                for (o, a) in out[x0..x0 + n].iter_mut().zip(&acc) {
                    *o = *a * inv_tau;
                }
            }
        }
        let max = &mut scratch.a;
        max.clear();
        max.resize(w, T::neg_infinity());
        for kk in 0..k {
            for (m, &l) in max.iter_mut().zip(&masks[kk * w..(kk + 1) * w]) {
                *m = m.max(l);
            }
        }
        let total = &mut scratch.b;
        total.clear();
        total.resize(w, T::zero());
        for kk in 0..k {
            for ((l, &m), t) in masks[kk * w..(kk + 1) * w].iter_mut().zip(max.iter()).zip(total.iter_mut()) {
                *l = (*l - m).fast_exp();
                *t = *t + *l;
            }
        }
        for kk in 0..k {
            for (e, &t) in masks[kk * w..(kk + 1) * w].iter_mut().zip(total.iter()) {
                *e = *e / t;
            }
        }
    }

    /// Inference-mode region masks `[K, H, W]`.
    pub fn masks(&self, xs: &Planes<T>, exec: Exec) -> Planes<T> {
        let (h, w) = (xs.height, xs.width);
        let k = self.config.mask_count;
        let rows = exec.map(h, |i| {
            let mut m = vec![T::zero(); k * w];
            with_simd(|| self.mask_row(xs, i, &mut m, &mut RowScratch::default()));
            m
        });
        let mut values = vec![T::zero(); k * h * w];
        for (i, row) in rows.iter().enumerate() {
            for kk in 0..k {
                values[(kk * h + i) * w..(kk * h + i + 1) * w].copy_from_slice(&row[kk * w..(kk + 1) * w]);
            }
        }
        Planes {
            channels: k,
            height: h,
            width: w,
            values,
        }
    }

    /// `clamp(sum_k M_k * max(X_s, eps)^(1 / w_k), 0, 1)`.
    pub fn rgfc_apply(&self, xs: &Planes<T>, weights: &[f64], exec: Exec) -> Planes<T> {
        let (c, h, w) = (xs.channels, xs.height, xs.width);
        let k = self.config.mask_count;
        let exponents: Vec<T> = weights.iter().map(|&wk| T::of(1.0 / wk)).collect();
        let eps = T::of(self.config.epsilon);
        let rows = exec.map(h, |i| with_simd(|| {
            let mut masks = vec![T::zero(); k * w];
            let mut scratch = RowScratch::default();
            self.mask_row(xs, i, &mut masks, &mut scratch);
            let mut out = vec![T::zero(); c * w];
            let log_base = &mut scratch.a;
            for ch in 0..c {
                log_base.clear();
                log_base.extend(xs.row(ch, i).iter().map(|&v| v.max(eps).fast_ln()));
                let acc = &mut out[ch * w..(ch + 1) * w];
                for (kk, &e) in exponents.iter().enumerate() {
                    let m = &masks[kk * w..(kk + 1) * w];
                    for ((a, &lb), &mk) in acc.iter_mut().zip(log_base.iter()).zip(m) {
                        *a = *a + (lb * e).fast_exp() * mk;
                    }
                }
                for a in acc.iter_mut() {
                    *a = a.max(T::zero()).min(T::one());
                }
            }
            out
        }));
        let mut values = vec![T::zero(); c * h * w];
        for (i, row) in rows.iter().enumerate() {
            for ch in 0..c {
                values[(ch * h + i) * w..(ch * h + i + 1) * w].copy_from_slice(&row[ch * w..(ch + 1) * w]);
            }
        }
        Planes {
            channels: c,
            height: h,
            width: w,
            values,
        }
    }

    /// Every stage on the packed grid, keeping the intermediates.
    pub fn trace(&self, x: &Planes<T>, exec: Exec) -> Result<Trace<T>> {
        self.check_input(x)?;
        let (mean, var) = self.channel_statistics(x, exec);
        let gains = self.gains_from_stats(&mean, &var);
        let pooled: Vec<f64> = gains.iter().zip(&mean).map(|(a, m)| a * m).collect();
        let branch_weights = self.branch_weights(&pooled);
        let (attention, xs) = self.hsa(x, &gains, &branch_weights, exec);
        let pooled_logits = self.pooled_logits(&xs, exec);
        let region_weights = self.region_weights(&pooled_logits);
        let output = self.rgfc_apply(&xs, &region_weights, exec);
        Ok(Trace {
            gains,
            branch_weights,
            attention,
            xs,
            pooled_logits,
            region_weights,
            output,
        })
    }

    /// Packed input to packed output in [0, 1].
    pub fn run_packed(&self, x: &Planes<T>, exec: Exec) -> Result<Planes<T>> {
        Ok(self.trace(x, exec)?.output)
    }

    /// RAW mosaic to full-resolution RGB.
    pub fn run(&self, raw: &RawImage, exec: Exec) -> Result<RgbImage<T>> {
        if self.config.channels != 4 {
            return Err(Error::Config(format!(
                "a Bayer mosaic packs into 4 channels, config has {}",
                self.config.channels
            )));
        }
        let packed: Planes<T> = pack::<T>(raw, exec).into();
        let out = self.run_packed(&packed, exec)?;
        Ok(unpack_to_rgb(
            &PackedTensor {
                height: out.height,
                width: out.width,
                values: out.values,
            },
            exec,
        ))
    }
}
