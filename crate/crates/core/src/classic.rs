//! Conventional fixed-function ISP used as the baseline engine and as the
//! distillation teacher.
//!
//! Stage order: black level, linearization (a no-op for linear sensors),
//! defective-pixel correction, bilinear demosaic, box denoise, white
//! balance, color correction, tone mapping, gamma encoding and unsharp
//! sharpening. Encoding is left to [`crate::raw_io::write_ppm`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kv::KvFile;
use crate::raw_io::{BayerPattern, RawImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WhiteBalance {
    GrayWorld,
    Manual([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Srgb,
    Power(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicIspConfig {
    pub wb_mode: WhiteBalance,
    pub ccm: [[f64; 3]; 3],
    pub gamma_mode: Gamma,
    /// 0 disables denoising.
    pub denoise_radius: usize,
    pub sharpen_amount: f64,
    /// `None` disables tone mapping.
    pub tone_knee: Option<f64>,
    pub hot_pixel_fix: bool,
}

pub const IDENTITY_CCM: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for ClassicIspConfig {
    fn default() -> Self {
        ClassicIspConfig {
            wb_mode: WhiteBalance::GrayWorld,
            ccm: IDENTITY_CCM,
            gamma_mode: Gamma::Srgb,
            denoise_radius: 1,
            sharpen_amount: 0.5,
            tone_knee: Some(1.0),
            hot_pixel_fix: true,
        }
    }
}

impl ClassicIspConfig {
    /// Only black level, demosaic and gamma remain.
    pub fn minimal() -> Self {
        ClassicIspConfig {
            wb_mode: WhiteBalance::Manual([1.0; 3]),
            ccm: IDENTITY_CCM,
            gamma_mode: Gamma::Srgb,
            denoise_radius: 0,
            sharpen_amount: 0.0,
            tone_knee: None,
            hot_pixel_fix: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let WhiteBalance::Manual(g) = self.wb_mode {
            if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!("white-balance gains must be positive, got {g:?}")));
            }
        }
        if self.ccm.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("ccm entries must be finite".into()));
        }
        if let Gamma::Power(g) = self.gamma_mode {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if !(self.sharpen_amount.is_finite() && self.sharpen_amount >= 0.0) {
            return Err(Error::Config(format!(
                "sharpen_amount must be >= 0, got {}",
                self.sharpen_amount
            )));
        }
        if let Some(k) = self.tone_knee {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Config(format!("tone_knee must lie in (0, 1], got {k}")));
            }
        }
        Ok(())
    }

    /// Reads `wb_mode`, `wb_gains`, `ccm`, `gamma_mode`, `gamma`,
    /// `denoise_radius`, `sharpen_amount`, `tone_knee` and `hot_pixel_fix`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = ClassicIspConfig::default();
        let wb_mode = match kv.get("wb_mode") {
            None | Some("gray_world") => WhiteBalance::GrayWorld,
            Some("manual") => {
                let g: Vec<f64> = kv
                    .list("wb_gains")?
                    .ok_or_else(|| Error::Config("wb_mode=manual needs wb_gains".into()))?;
                WhiteBalance::Manual(
                    g.try_into()
                        .map_err(|_| Error::Config("wb_gains needs 3 values".into()))?,
                )
            }
            Some(other) => return Err(Error::Config(format!("unknown wb_mode {other:?}"))),
        };
        let ccm = match kv.list::<f64>("ccm")? {
            None => d.ccm,
            Some(v) if v.len() == 9 => [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
            Some(v) => return Err(Error::Config(format!("ccm needs 9 values, got {}", v.len()))),
        };
        let gamma_mode = match kv.get("gamma_mode") {
            None | Some("srgb") => Gamma::Srgb,
            Some("power") => Gamma::Power(kv.parsed("gamma")?.unwrap_or(2.2)),
            Some(other) => return Err(Error::Config(format!("unknown gamma_mode {other:?}"))),
        };
        let tone_knee = match kv.get("tone_knee") {
            None => d.tone_knee,
            Some("none") => None,
            Some(_) => kv.parsed("tone_knee")?,
        };
        let cfg = ClassicIspConfig {
            wb_mode,
            ccm,
            gamma_mode,
            denoise_radius: kv.parsed("denoise_radius")?.unwrap_or(d.denoise_radius),
            sharpen_amount: kv.parsed("sharpen_amount")?.unwrap_or(d.sharpen_amount),
            tone_knee,
            hot_pixel_fix: kv.parsed("hot_pixel_fix")?.unwrap_or(d.hot_pixel_fix),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Full-resolution single-channel mosaic, normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub height: usize,
    pub width: usize,
    pub pattern: BayerPattern,
    pub values: Vec<f64>,
}

impl Mosaic {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

pub fn black_level_correct(raw: &RawImage) -> Mosaic {
    Mosaic {
        height: raw.height,
        width: raw.width,
        pattern: raw.pattern,
        values: raw.data.iter().map(|&dn| raw.normalized(dn)).collect(),
    }
}

/// Linear sensors need no correction.
pub fn linearize(m: Mosaic) -> Mosaic {
    m
}

/// Mirrors `i` into `0..n` without repeating the edge sample; preserves
/// parity, so same-color neighbors stay same-color.
fn reflect(mut i: isize, n: usize) -> usize {
    let last = n as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Replaces pixels that differ from the median of their eight same-color
/// neighbors by more than six median absolute deviations.
pub fn defective_pixel_fix(m: &Mosaic, exec: Exec) -> Mosaic {
    const THRESHOLD: f64 = 6.0;
    const RING: [(isize, isize); 8] = [(-2, -2), (-2, 0), (-2, 2), (0, -2), (0, 2), (2, -2), (2, 0), (2, 2)];
    let (h, w) = (m.height, m.width);
    let mut values = m.values.clone();
    exec.for_each_chunk(&mut values, w, |i, row| {
        for (j, out) in row.iter_mut().enumerate() {
            let mut ring = RING.map(|(di, dj)| {
                m.at(reflect(i as isize + di, h), reflect(j as isize + dj, w))
            });
            let med = median(&mut ring);
            let mut dev = ring.map(|v| (v - med).abs());
            let mad = median(&mut dev);
            if (*out - med).abs() > THRESHOLD * mad {
                *out = med;
            }
        }
    });
    Mosaic { values, ..m.clone() }
}

/// Bilinear demosaic: each missing color is the mean of the same-color
/// samples inside the in-bounds 3x3 neighborhood.
pub fn demosaic_bilinear(m: &Mosaic, exec: Exec) -> RgbImage {
    let (h, w) = (m.height, m.width);
    let mut values = vec![0.0; 3 * h * w];
    exec.for_each_chunk(&mut values, w, |idx, row| {
        let (c, i) = (idx / h, idx % h);
        for (j, out) in row.iter_mut().enumerate() {
            if m.pattern.color_at(i, j) == c {
                *out = m.at(i, j);
                continue;
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for y in i.saturating_sub(1)..(i + 2).min(h) {
                for x in j.saturating_sub(1)..(j + 2).min(w) {
                    if m.pattern.color_at(y, x) == c {
                        sum += m.at(y, x);
                        count += 1;
                    }
                }
            }
            *out = sum / count as f64;
        }
    });
    RgbImage {
        height: h,
        width: w,
        values,
    }
}

/// Per-channel mean over the in-bounds `(2r+1)^2` window.
fn box_filter(img: &RgbImage, radius: usize, exec: Exec) -> RgbImage {
    let (h, w) = (img.height, img.width);
    // Horizontal pass, then vertical; both normalize by the in-bounds count,
    // which factorizes over rows and columns.
    let mut horiz = vec![0.0; 3 * h * w];
    exec.for_each_chunk(&mut horiz, w, |idx, row| {
        let src = &img.values[idx * w..(idx + 1) * w];
        for (j, out) in row.iter_mut().enumerate() {
            let (lo, hi) = (j.saturating_sub(radius), (j + radius + 1).min(w));
            *out = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
    });
    let mut values = vec![0.0; 3 * h * w];
    exec.for_each_chunk(&mut values, w, |idx, row| {
        let (c, i) = (idx / h, idx % h);
        let (lo, hi) = (i.saturating_sub(radius), (i + radius + 1).min(h));
        for y in lo..hi {
            let src = &horiz[(c * h + y) * w..(c * h + y + 1) * w];
            for (o, s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
        let n = (hi - lo) as f64;
        for o in row.iter_mut() {
            *o /= n;
        }
    });
    RgbImage {
        height: h,
        width: w,
        values,
    }
}

pub fn denoise_box(img: &RgbImage, radius: usize, exec: Exec) -> RgbImage {
    if radius == 0 {
        return img.clone();
    }
    box_filter(img, radius, exec)
}

/// Channel means, summed sequentially in pixel order.
pub fn channel_means(img: &RgbImage) -> [f64; 3] {
    let n = (img.height * img.width) as f64;
    [0, 1, 2].map(|c| img.plane(c).iter().sum::<f64>() / n)
}

/// Gray-world gains `mean(G) / mean(c)`; a channel with zero mean keeps gain 1.
pub fn gray_world_gains(img: &RgbImage) -> [f64; 3] {
    let m = channel_means(img);
    m.map(|mc| if mc > 0.0 { m[1] / mc } else { 1.0 })
}

/// Scales each channel; no clamping.
pub fn white_balance(img: &RgbImage, mode: WhiteBalance) -> RgbImage {
    let gains = match mode {
        WhiteBalance::GrayWorld => gray_world_gains(img),
        WhiteBalance::Manual(g) => g,
    };
    let mut out = img.clone();
    for (c, g) in gains.iter().enumerate() {
        for v in out.plane_mut(c) {
            *v *= g;
        }
    }
    out
}

pub fn color_correct(img: &RgbImage, ccm: &[[f64; 3]; 3]) -> RgbImage {
    let n = img.height * img.width;
    let mut out = img.clone();
    for p in 0..n {
        let v = [img.values[p], img.values[n + p], img.values[2 * n + p]];
        for (r, row) in ccm.iter().enumerate() {
            out.values[r * n + p] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
    out
}

/// `v / (v + k) * (1 + k)`, so 0 -> 0 and 1 -> 1. Negative inputs map to 0.
#[inline]
pub fn tone_curve(v: f64, knee: f64) -> f64 {
    let v = v.max(0.0);
    v / (v + knee) * (1.0 + knee)
}

pub fn tone_map(img: &RgbImage, knee: f64) -> RgbImage {
    map_values(img, |v| tone_curve(v, knee))
}

/// Where the sRGB curve switches from the linear segment to the power law.
pub const SRGB_THRESHOLD: f64 = 0.003_130_8;

/// Linear-segment slope. The nominal 12.92 leaves a 3e-8 step at the
/// threshold; this value makes both branches agree there.
pub const SRGB_SLOPE: f64 = 12.919_990_891_366_469;

/// sRGB transfer, or `v^(1/gamma)`. Negative inputs map to 0.
#[inline]
pub fn gamma_curve(v: f64, mode: Gamma) -> f64 {
    let v = v.max(0.0);
    match mode {
        Gamma::Srgb if v <= SRGB_THRESHOLD => SRGB_SLOPE * v,
        Gamma::Srgb => 1.055 * v.powf(1.0 / 2.4) - 0.055,
        Gamma::Power(g) => v.powf(1.0 / g),
    }
}

pub fn gamma_encode(img: &RgbImage, mode: Gamma) -> RgbImage {
    map_values(img, |v| gamma_curve(v, mode))
}

/// `v + amount * (v - box3(v))`, clamped to [0, 1].
pub fn sharpen_unsharp(img: &RgbImage, amount: f64, exec: Exec) -> RgbImage {
    if amount == 0.0 {
        return img.clone();
    }
    let blur = box_filter(img, 1, exec);
    let mut out = img.clone();
    for (o, b) in out.values.iter_mut().zip(&blur.values) {
        *o = (*o + amount * (*o - b)).clamp(0.0, 1.0);
    }
    out
}

fn map_values(img: &RgbImage, f: impl Fn(f64) -> f64) -> RgbImage {
    RgbImage {
        height: img.height,
        width: img.width,
        values: img.values.iter().map(|&v| f(v)).collect(),
    }
}

/// Runs every stage in order; output lies in [0, 1].
pub fn run_classic(raw: &RawImage, config: &ClassicIspConfig, exec: Exec) -> Result<RgbImage> {
    config.validate()?;
    raw.validate()?;
    let mut mosaic = linearize(black_level_correct(raw));
    if config.hot_pixel_fix {
        mosaic = defective_pixel_fix(&mosaic, exec);
    }
    let mut img = demosaic_bilinear(&mosaic, exec);
    img = denoise_box(&img, config.denoise_radius, exec);
    img = white_balance(&img, config.wb_mode);
    if config.ccm != IDENTITY_CCM {
        img = color_correct(&img, &config.ccm);
    }
    if let Some(knee) = config.tone_knee {
        img = tone_map(&img, knee);
    }
    img = gamma_encode(&img, config.gamma_mode);
    img = sharpen_unsharp(&img, config.sharpen_amount, exec);
    img.clamp_unit();
    Ok(img)
}

/// Which engine turns a mosaic into RGB.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Taisp,
    Classic,
    Demosaic,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taisp" => Ok(Engine::Taisp),
            "classic" => Ok(Engine::Classic),
            "demosaic" => Ok(Engine::Demosaic),
            _ => Err(Error::Config(format!(
                "unknown engine {s:?} (expected taisp, classic or demosaic)"
            ))),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Taisp => "taisp",
            Engine::Classic => "classic",
            Engine::Demosaic => "demosaic",
        })
    }
}

/// Black level plus bilinear demosaic only, clamped to [0, 1].
pub fn run_demosaic(raw: &RawImage, exec: Exec) -> Result<RgbImage> {
    raw.validate()?;
    let mut img = demosaic_bilinear(&black_level_correct(raw), exec);
    img.clamp_unit();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::raw_io::write_ppm;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn mosaic_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Mosaic {
        Mosaic {
            height: h,
            width: w,
            pattern: BayerPattern::Rggb,
            values: (0..h * w).map(|p| f(p / w, p % w)).collect(),
        }
    }

    fn rgb_from(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> RgbImage {
        let values = (0..3 * h * w).map(|p| f(p / (h * w), (p / w) % h, p % w)).collect();
        RgbImage::new(h, w, values).unwrap()
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> RgbImage {
        rgb_from(h, w, |_, i, j| f(i, j))
    }

    fn max_diff(a: &RgbImage, b: &RgbImage) -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn max_chroma(img: &RgbImage) -> f64 {
        (0..img.height * img.width)
            .map(|p| {
                let n = img.height * img.width;
                let (r, g, b) = (img.values[p], img.values[n + p], img.values[2 * n + p]);
                (r - g).abs().max((g - b).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn black_level_examples() {
        let raw = RawImage::new(2, 2, 12, BayerPattern::Rggb, 100, 4000, vec![100, 4000, 2050, 50]).unwrap();
        let m = black_level_correct(&raw);
        assert_eq!(m.values[0], 0.0);
        assert_eq!(m.values[1], 1.0);
        assert!((m.values[2] - 1950.0 / 3900.0).abs() < 1e-15);
        assert_eq!(m.values[3], 0.0);
    }

    #[test]
    fn clean_mosaic_is_left_alone() {
        let level = [0.25, 0.5, 0.75];
        let m = mosaic_from(8, 10, |i, j| level[BayerPattern::Rggb.color_at(i, j)]);
        assert_eq!(defective_pixel_fix(&m, Exec::default()), m);
    }

    #[test]
    fn hot_pixels_are_replaced() {
        let flat = mosaic_from(10, 10, |_, _| 0.3);
        let mut hot = flat.clone();
        hot.values[4 * 10 + 5] = 1.0;
        assert_eq!(defective_pixel_fix(&hot, Exec::default()), flat);
        // Neighbors in the mosaic belong to different color planes.
        hot.values[4 * 10 + 6] = 1.0;
        hot.values[0] = 0.0;
        assert_eq!(defective_pixel_fix(&hot, Exec::default()), flat);
    }

    /// Textbook bilinear weights written out per Bayer class (RGGB), with
    /// out-of-range neighbors dropped.
    fn bilinear_oracle(m: &Mosaic) -> RgbImage {
        let (h, w) = (m.height as isize, m.width as isize);
        let avg = |i: isize, j: isize, offs: &[(isize, isize)]| {
            let pts: Vec<f64> = offs
                .iter()
                .map(|(di, dj)| (i + di, j + dj))
                .filter(|&(y, x)| y >= 0 && y < h && x >= 0 && x < w)
                .map(|(y, x)| m.values[(y * w + x) as usize])
                .collect();
            pts.iter().sum::<f64>() / pts.len() as f64
        };
        let cross = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        let diag = [(-1, -1), (-1, 1), (1, -1), (1, 1)];
        let horiz = [(0, -1), (0, 1)];
        let vert = [(-1, 0), (1, 0)];
        rgb_from(m.height, m.width, |c, i, j| {
            let (i, j) = (i as isize, j as isize);
            let own = m.values[(i * w + j) as usize];
            match ((i % 2, j % 2), c) {
                ((0, 0), 0) | ((0, 1), 1) | ((1, 0), 1) | ((1, 1), 2) => own,
                ((0, 0), 1) | ((1, 1), 1) => avg(i, j, &cross),
                ((0, 0), 2) | ((1, 1), 0) => avg(i, j, &diag),
                ((0, 1), 0) | ((1, 0), 2) => avg(i, j, &horiz),
                _ => avg(i, j, &vert),
            }
        })
    }

    #[test]
    fn demosaic_matches_per_class_oracle() {
        let m = mosaic_from(4, 4, |i, j| ((i * 4 + j) * 7 % 16) as f64 / 16.0);
        let got = demosaic_bilinear(&m, Exec::default());
        assert!(max_diff(&got, &bilinear_oracle(&m)) < 1e-15);
        let m = mosaic_from(6, 8, |i, j| ((i * 31 + j * 17) % 23) as f64 / 23.0);
        assert!(max_diff(&demosaic_bilinear(&m, Exec::Sequential), &bilinear_oracle(&m)) < 1e-15);
    }

    #[test]
    fn demosaic_constant_scene_is_exact() {
        let level = [0.25, 0.5, 0.75];
        let m = mosaic_from(6, 6, |i, j| level[BayerPattern::Rggb.color_at(i, j)]);
        let img = demosaic_bilinear(&m, Exec::default());
        for c in 0..3 {
            assert!(img.plane(c).iter().all(|&v| v == level[c]));
        }
    }

    #[test]
    fn gray_ramp_has_no_interior_fringes() {
        let m = mosaic_from(12, 16, |i, j| 0.02 * j as f64 + 0.01 * i as f64);
        let img = demosaic_bilinear(&m, Exec::default());
        for i in 1..11 {
            for j in 1..15 {
                let [r, g, b] = img.pixel(i, j);
                assert!((r - g).abs() < 1e-12 && (g - b).abs() < 1e-12, "({i},{j}) {r} {g} {b}");
            }
        }
    }

    #[test]
    fn denoise_examples() {
        let img = rgb_from(5, 7, |c, i, j| (c + i * j) as f64 * 0.01);
        assert_eq!(denoise_box(&img, 0, Exec::default()), img);
        let flat = RgbImage::filled(5, 7, [0.25, 0.5, 0.75]);
        assert!(max_diff(&denoise_box(&flat, 2, Exec::default()), &flat) < 1e-15);
        let impulse = rgb_from(9, 9, |_, i, j| if (i, j) == (4, 4) { 1.0 } else { 0.0 });
        let out = denoise_box(&impulse, 2, Exec::default());
        for c in 0..3 {
            let mass: f64 = out.plane(c).iter().sum();
            assert!((mass - 1.0).abs() < 1e-12);
            assert!((out.get(c, 4, 4) - 1.0 / 25.0).abs() < 1e-15);
            assert_eq!(out.get(c, 1, 4), 0.0);
        }
    }

    #[test]
    fn white_balance_examples() {
        let neutral = gray(4, 4, |i, j| 0.1 + 0.05 * (i + j) as f64);
        assert_eq!(gray_world_gains(&neutral), [1.0, 1.0, 1.0]);
        let tinted = rgb_from(2, 2, |c, _, _| [0.2, 0.4, 0.8][c]);
        let g = gray_world_gains(&tinted);
        assert!((g[0] - 2.0).abs() < 1e-15 && g[1] == 1.0 && (g[2] - 0.5).abs() < 1e-15);
        let manual = white_balance(&tinted, WhiteBalance::Manual([1.0, 2.0, 3.0]));
        assert!((manual.get(1, 0, 0) - 0.8).abs() < 1e-15 && (manual.get(2, 1, 1) - 2.4).abs() < 1e-15);
    }

    #[test]
    fn gray_world_is_idempotent_and_equalizes_means() {
        let img = demosaic_bilinear(&black_level_correct(&fixtures::golden_scene()), Exec::default());
        let once = white_balance(&img, WhiteBalance::GrayWorld);
        let twice = white_balance(&once, WhiteBalance::GrayWorld);
        assert!(max_diff(&once, &twice) < 1e-9);
        let m = channel_means(&once);
        assert!((m[0] - m[1]).abs() < 1e-9 && (m[2] - m[1]).abs() < 1e-9);
    }

    #[test]
    fn color_correction_examples() {
        let img = rgb_from(3, 4, |c, i, j| (c * 12 + i * 4 + j) as f64 / 36.0);
        assert_eq!(color_correct(&img, &IDENTITY_CCM), img);
        let swap = color_correct(&img, &[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(swap.plane(0), img.plane(1));
        assert_eq!(swap.plane(1), img.plane(0));
        let ccm = [[1.2, -0.1, -0.1], [0.3, 0.9, -0.2], [-0.05, 0.25, 0.8]];
        let got = color_correct(&img, &ccm);
        for i in 0..3 {
            for j in 0..4 {
                let v = img.pixel(i, j);
                for r in 0..3 {
                    let want = ccm[r][0] * v[0] + ccm[r][1] * v[1] + ccm[r][2] * v[2];
                    assert!((got.get(r, i, j) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn tone_curve_examples() {
        for knee in [0.1, 0.5, 1.0] {
            assert_eq!(tone_curve(0.0, knee), 0.0);
            assert!((tone_curve(1.0, knee) - 1.0).abs() < 1e-15);
            let grid: Vec<f64> = (0..=10_000).map(|k| tone_curve(k as f64 * 1e-4, knee)).collect();
            assert!(grid.windows(2).all(|p| p[1] > p[0]));
            assert!(tone_curve(1e9, knee) < 1.0 + knee);
        }
    }

    #[test]
    fn srgb_transfer_examples() {
        assert_eq!(gamma_curve(0.0, Gamma::Srgb), 0.0);
        assert!((gamma_curve(1.0, Gamma::Srgb) - 1.0).abs() < 1e-15);
        let t = SRGB_THRESHOLD;
        assert!((SRGB_SLOPE - 12.92).abs() < 1e-4);
        let linear = SRGB_SLOPE * t;
        let power = 1.055 * t.powf(1.0 / 2.4) - 0.055;
        assert!((linear - power).abs() < 1e-9, "{linear} vs {power}");
        assert!((gamma_curve(t, Gamma::Srgb) - linear).abs() < 1e-15);
        let above = gamma_curve(t + 1e-12, Gamma::Srgb);
        assert!((above - linear).abs() < 1e-9);
        for v in [0.0, 0.1, 0.5, 1.0] {
            assert_eq!(gamma_curve(v, Gamma::Power(1.0)), v);
        }
        for mode in [Gamma::Srgb, Gamma::Power(2.2)] {
            let grid: Vec<f64> = (0..=10_000).map(|k| gamma_curve(k as f64 * 1e-4, mode)).collect();
            assert!(grid.windows(2).all(|p| p[1] > p[0]));
        }
    }

    #[test]
    fn sharpen_examples() {
        let img = rgb_from(4, 5, |c, i, j| (c + i + j) as f64 * 0.05);
        assert_eq!(sharpen_unsharp(&img, 0.0, Exec::default()), img);
        let flat = RgbImage::filled(4, 5, [0.25, 0.5, 0.75]);
        assert!(max_diff(&sharpen_unsharp(&flat, 3.0, Exec::default()), &flat) < 1e-15);
        // One-row step: box3 means are 0.2, 0.2, 0.4, 0.6, 0.8, 0.8.
        let step = gray(1, 6, |_, j| if j < 3 { 0.2 } else { 0.8 });
        let out = sharpen_unsharp(&step, 0.5, Exec::default());
        let want = [0.2, 0.2, 0.1, 0.9, 0.8, 0.8];
        for (j, w) in want.iter().enumerate() {
            assert!((out.get(0, 0, j) - w).abs() < 1e-12, "{j}: {}", out.get(0, 0, j));
        }
        let hard = sharpen_unsharp(&step, 2.0, Exec::default());
        assert_eq!((hard.get(1, 0, 2), hard.get(1, 0, 3)), (0.0, 1.0));
    }

    #[test]
    fn neutral_scene_stays_neutral() {
        for level in [0.05, 0.3, 0.9] {
            let out = run_classic(&fixtures::neutral_field(16, 12, level), &ClassicIspConfig::default(), Exec::default()).unwrap();
            assert!(max_chroma(&out) < 1e-6);
        }
    }

    #[test]
    fn minimal_config_is_black_level_demosaic_gamma() {
        let raw = fixtures::golden_scene();
        let got = run_classic(&raw, &ClassicIspConfig::minimal(), Exec::default()).unwrap();
        let m = black_level_correct(&raw);
        let want = demosaic_bilinear(&m, Exec::default());
        let want = gamma_encode(&want, Gamma::Srgb);
        assert!(max_diff(&got, &want) < 1e-15);
    }

    #[test]
    fn golden_output_is_reproducible() {
        let raw = fixtures::golden_scene();
        let run = || write_ppm(&run_classic(&raw, &ClassicIspConfig::default(), Exec::default()).unwrap());
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(write_ppm(&run_classic(&raw, &ClassicIspConfig::default(), Exec::Sequential).unwrap()), a);
        let digest: String = Sha256::digest(&a).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(digest, GOLDEN_SHA256);
    }

    const GOLDEN_SHA256: &str = "0029b28b1977ced9bfcf1bf9faabb784ceec02b89b9fa4d29141c739582502a4";

    #[test]
    fn config_from_text() {
        let kv = KvFile::parse(
            "wb_mode=manual\nwb_gains=2,1,1.5\nccm=1,0,0,0,1,0,0,0,1\ngamma_mode=power\ngamma=2.4\n\
             denoise_radius=0\nsharpen_amount=0\ntone_knee=none\nhot_pixel_fix=false\n",
        )
        .unwrap();
        let cfg = ClassicIspConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.wb_mode, WhiteBalance::Manual([2.0, 1.0, 1.5]));
        assert_eq!(cfg.gamma_mode, Gamma::Power(2.4));
        assert_eq!((cfg.denoise_radius, cfg.tone_knee, cfg.hot_pixel_fix), (0, None, false));
        assert_eq!(ClassicIspConfig::from_kv(&KvFile::default()).unwrap(), ClassicIspConfig::default());
        for bad in ["wb_mode=auto", "wb_mode=manual", "ccm=1,2", "tone_knee=1.5", "sharpen_amount=-1", "gamma_mode=power\ngamma=0"] {
            assert!(ClassicIspConfig::from_kv(&KvFile::parse(bad).unwrap()).is_err(), "{bad}");
        }
        assert!("fancy".parse::<Engine>().is_err());
        assert_eq!("demosaic".parse::<Engine>().unwrap().to_string(), "demosaic");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn stages_preserve_achromatic_images(seed in 0u64..1000, amount in 0.0f64..3.0, knee in 0.05f64..1.0, radius in 0usize..3) {
            let img = gray(6, 8, |i, j| ((seed as usize + i * 13 + j * 7) % 29) as f64 / 29.0);
            let ex = Exec::default();
            for out in [
                denoise_box(&img, radius, ex),
                white_balance(&img, WhiteBalance::GrayWorld),
                tone_map(&img, knee),
                gamma_encode(&img, Gamma::Srgb),
                gamma_encode(&img, Gamma::Power(2.2)),
                sharpen_unsharp(&img, amount, ex),
            ] {
                prop_assert!(max_chroma(&out) < 1e-9);
            }
        }

        #[test]
        fn classic_output_is_in_unit_range(seed in 0u64..1000, amount in 0.0f64..4.0) {
            let raw = fixtures::scene(12, 10, seed);
            let cfg = ClassicIspConfig { sharpen_amount: amount, ccm: [[1.5, -0.3, -0.2], [-0.2, 1.4, -0.2], [0.0, -0.5, 1.5]], ..ClassicIspConfig::default() };
            let out = run_classic(&raw, &cfg, Exec::default()).unwrap();
            prop_assert!(out.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
