//! RAW containers, Bayer packing, and RGB output.
//!
//! Two input containers are understood: the purpose-built RAWI format
//! (little-endian, 22-byte header followed by row-major `u16` samples) and
//! binary 16-bit PGM (`P5`), whose sensor metadata has to be supplied by the
//! caller. Output is binary PPM (`P6`, maxval 255).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;

pub const RAWI_MAGIC: [u8; 4] = *b"RAWI";
pub const RAWI_VERSION: u16 = 1;
pub const RAWI_HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BayerPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ];

    pub fn code(self) -> u8 {
        match self {
            BayerPattern::Rggb => 0,
            BayerPattern::Bggr => 1,
            BayerPattern::Grbg => 2,
            BayerPattern::Gbrg => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Offsets `(row, col)` inside a 2x2 quad of the R, G1, G2 and B sites.
    /// G1 is the green that shares a row with red.
    pub fn quad_offsets(self) -> [(usize, usize); 4] {
        match self {
            BayerPattern::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            BayerPattern::Bggr => [(1, 1), (1, 0), (0, 1), (0, 0)],
            BayerPattern::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            BayerPattern::Gbrg => [(1, 0), (1, 1), (0, 0), (0, 1)],
        }
    }

    /// Color sampled at `(row, col)`: 0 = red, 1 = green, 2 = blue.
    pub fn color_at(self, row: usize, col: usize) -> usize {
        let [r, _, _, b] = self.quad_offsets();
        let site = (row & 1, col & 1);
        if site == r {
            0
        } else if site == b {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Bggr => "BGGR",
            BayerPattern::Grbg => "GRBG",
            BayerPattern::Gbrg => "GBRG",
        })
    }
}

impl FromStr for BayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RGGB" => Ok(BayerPattern::Rggb),
            "BGGR" => Ok(BayerPattern::Bggr),
            "GRBG" => Ok(BayerPattern::Grbg),
            "GBRG" => Ok(BayerPattern::Gbrg),
            other => Err(Error::Config(format!("unknown bayer pattern {other:?}"))),
        }
    }
}

/// Single-plane Bayer mosaic with its sensor levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u16,
    pub pattern: BayerPattern,
    pub black_level: u16,
    pub white_level: u16,
    pub data: Vec<u16>,
}

impl RawImage {
    pub fn new(
        width: usize,
        height: usize,
        bit_depth: u16,
        pattern: BayerPattern,
        black_level: u16,
        white_level: u16,
        data: Vec<u16>,
    ) -> Result<Self> {
        let raw = RawImage {
            width,
            height,
            bit_depth,
            pattern,
            black_level,
            white_level,
            data,
        };
        raw.validate()?;
        Ok(raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::Dimension(format!(
                "mosaic must have positive even dimensions, got {}x{}",
                self.width, self.height
            )));
        }
        if !(8..=16).contains(&self.bit_depth) {
            return Err(Error::Parameter(format!(
                "bit depth {} outside [8, 16]",
                self.bit_depth
            )));
        }
        let max = self.max_value();
        if self.black_level >= self.white_level || u32::from(self.white_level) > max {
            return Err(Error::Parameter(format!(
                "levels must satisfy black < white <= {max}, got black={} white={}",
                self.black_level, self.white_level
            )));
        }
        if self.data.len() != self.width * self.height {
            return Err(Error::Dimension(format!(
                "expected {} samples, found {}",
                self.width * self.height,
                self.data.len()
            )));
        }
        if let Some(pos) = self.data.iter().position(|&v| u32::from(v) > max) {
            return Err(Error::Parameter(format!(
                "sample {} at index {pos} exceeds {max}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub fn max_value(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    /// Normalized value `(dn - black) / (white - black)` clamped to [0, 1].
    #[inline]
    pub fn normalized(&self, dn: u16) -> f64 {
        let span = f64::from(self.white_level - self.black_level);
        ((f64::from(dn) - f64::from(self.black_level)) / span).clamp(0.0, 1.0)
    }
}

/// Sensor metadata for containers that do not carry it (PGM).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RawMeta {
    pub pattern: BayerPattern,
    pub black_level: Option<u16>,
    pub white_level: Option<u16>,
}

/// Four-channel half-resolution tensor in R, G1, G2, B order.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor<T = f64> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> PackedTensor<T> {
    pub const CHANNELS: usize = 4;

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.height, self.width]
    }
}

/// Planar RGB image (3 x H x W), values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T = f64> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> RgbImage<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "rgb image {height}x{width} needs {} values, got {}",
                3 * height * width,
                values.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        let n = height * width;
        let mut values = Vec::with_capacity(3 * n);
        for v in rgb {
            values.extend(std::iter::repeat(v).take(n));
        }
        RgbImage {
            height,
            width,
            values,
        }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.values[(c * self.height + row) * self.width + col]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [T; 3] {
        [0, 1, 2].map(|c| self.get(c, row, col))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.values {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    pub fn to_f64(&self) -> RgbImage<f64> {
        RgbImage {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| Real::as_f64(*v)).collect(),
        }
    }
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses a RAWI container, or a binary PGM with default metadata.
pub fn parse_raw(bytes: &[u8]) -> Result<RawImage> {
    parse_raw_with(bytes, &RawMeta::default())
}

/// Parses a RAWI container or a binary PGM; `meta` only applies to PGM.
pub fn parse_raw_with(bytes: &[u8], meta: &RawMeta) -> Result<RawImage> {
    if bytes.starts_with(&RAWI_MAGIC) {
        parse_rawi(bytes)
    } else if bytes.starts_with(b"P5") {
        parse_pgm(bytes, meta)
    } else {
        Err(Error::format(0, "expected RAWI magic or binary PGM header"))
    }
}

fn parse_rawi(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < RAWI_HEADER_LEN {
        return Err(Error::Truncated {
            expected: RAWI_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = read_u16(bytes, 4);
    if version != RAWI_VERSION {
        return Err(Error::format(4, format!("unsupported RAWI version {version}")));
    }
    let width = read_u32(bytes, 6) as usize;
    let height = read_u32(bytes, 10) as usize;
    let bit_depth = read_u16(bytes, 14);
    let pattern = BayerPattern::from_code(bytes[16])
        .ok_or_else(|| Error::format(16, format!("unknown bayer code {}", bytes[16])))?;
    if bytes[17] != 0 {
        return Err(Error::format(17, "reserved byte must be zero"));
    }
    let black_level = read_u16(bytes, 18);
    let white_level = read_u16(bytes, 20);
    if width % 2 != 0 || height % 2 != 0 || width == 0 || height == 0 {
        return Err(Error::Dimension(format!(
            "mosaic must have positive even dimensions, got {width}x{height}"
        )));
    }
    let expected = RAWI_HEADER_LEN + width * height * 2;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[RAWI_HEADER_LEN..expected]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    RawImage::new(width, height, bit_depth, pattern, black_level, white_level, data)
}

pub fn write_raw(image: &RawImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAWI_HEADER_LEN + image.data.len() * 2);
    out.extend_from_slice(&RAWI_MAGIC);
    out.extend_from_slice(&RAWI_VERSION.to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&image.bit_depth.to_le_bytes());
    out.push(image.pattern.code());
    out.push(0);
    out.extend_from_slice(&image.black_level.to_le_bytes());
    out.extend_from_slice(&image.white_level.to_le_bytes());
    for v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if !bytes.starts_with(magic) {
        return Err(Error::format(0, "bad PNM magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(pos, "header ended early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(pos, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(PnmHeader {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

fn parse_pgm(bytes: &[u8], meta: &RawMeta) -> Result<RawImage> {
    let header = parse_pnm_header(bytes, b"P5")?;
    let (width, height) = (header.width, header.height);
    if width % 2 != 0 || height % 2 != 0 || width == 0 || height == 0 {
        return Err(Error::Dimension(format!(
            "mosaic must have positive even dimensions, got {width}x{height}"
        )));
    }
    let sample_bytes = if header.maxval > 255 { 2 } else { 1 };
    let expected = header.data_offset + width * height * sample_bytes;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[header.data_offset..expected];
    let data: Vec<u16> = if sample_bytes == 2 {
        payload
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        payload.iter().map(|&b| u16::from(b)).collect()
    };
    let bit_depth = (32 - header.maxval.leading_zeros()).max(8) as u16;
    RawImage::new(
        width,
        height,
        bit_depth,
        meta.pattern,
        meta.black_level.unwrap_or(0),
        meta.white_level.unwrap_or(header.maxval as u16),
        data,
    )
}

/// Writes the mosaic as a 16-bit binary PGM (big-endian samples).
pub fn write_pgm(image: &RawImage) -> Vec<u8> {
    let mut out = format!(
        "P5\n{} {}\n{}\n",
        image.width,
        image.height,
        image.max_value().max(256)
    )
    .into_bytes();
    for v in &image.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Packs the mosaic into R, G1, G2, B planes at half resolution.
pub fn pack<T: Real>(raw: &RawImage, exec: Exec) -> PackedTensor<T> {
    let (h, w) = (raw.height / 2, raw.width / 2);
    let offsets = raw.pattern.quad_offsets();
    let mut values = vec![T::zero(); 4 * h * w];
    // One chunk per (channel, row).
    exec.for_each_chunk(&mut values, w, |idx, row| {
        let (c, i) = (idx / h, idx % h);
        let (di, dj) = offsets[c];
        let src = &raw.data[(2 * i + di) * raw.width..];
        for (j, v) in row.iter_mut().enumerate() {
            *v = T::of(raw.normalized(src[2 * j + dj]));
        }
    });
    PackedTensor {
        height: h,
        width: w,
        values,
    }
}

/// Two-tap bilinear weights for 2x upsampling with half-pixel centers and
/// edge clamping: output index `o` reads `(i0, w0)` and `(i1, w1)`.
pub fn upsample_taps(src_len: usize) -> Vec<[(usize, f64); 2]> {
    let last = src_len as isize - 1;
    (0..2 * src_len)
        .map(|o| {
            let pos = (o as f64 + 0.5) / 2.0 - 0.5;
            let base = pos.floor();
            let frac = pos - base;
            let i0 = (base as isize).clamp(0, last) as usize;
            let i1 = (base as isize + 1).clamp(0, last) as usize;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

/// Fixed conversion from the packed grid to full-resolution RGB: greens are
/// averaged, then each plane is bilinearly upsampled by two.
pub fn unpack_to_rgb<T: Real>(packed: &PackedTensor<T>, exec: Exec) -> RgbImage<T> {
    let (h, w) = (packed.height, packed.width);
    let half = T::of(0.5);
    let green: Vec<T> = packed
        .plane(1)
        .iter()
        .zip(packed.plane(2))
        .map(|(&a, &b)| (a + b) * half)
        .collect();
    let sources = [packed.plane(0), &green[..], packed.plane(3)];
    let row_taps = upsample_taps(h);
    let col_taps: Vec<[(usize, T); 2]> = upsample_taps(w)
        .into_iter()
        .map(|t| t.map(|(i, wt)| (i, T::of(wt))))
        .collect();
    let (oh, ow) = (2 * h, 2 * w);
    let mut values = vec![T::zero(); 3 * oh * ow];
    exec.for_each_chunk(&mut values, ow, |idx, out| {
        let (c, oi) = (idx / oh, idx % oh);
        let src = sources[c];
        let [(r0, wr0), (r1, wr1)] = row_taps[oi];
        let (wr0, wr1) = (T::of(wr0), T::of(wr1));
        let a = &src[r0 * w..(r0 + 1) * w];
        let b = &src[r1 * w..(r1 + 1) * w];
        for (o, &[(c0, wc0), (c1, wc1)]) in out.iter_mut().zip(&col_taps) {
            let top = a[c0] * wc0 + a[c1] * wc1;
            let bottom = b[c0] * wc0 + b[c1] * wc1;
            *o = (top * wr0 + bottom * wr1).max(T::zero()).min(T::one());
        }
    });
    RgbImage {
        height: oh,
        width: ow,
        values,
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary PPM, maxval 255, `q = floor(v * 255 + 0.5)` after clamping.
pub fn write_ppm<T: Real>(rgb: &RgbImage<T>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
    let n = rgb.width * rgb.height;
    out.reserve(3 * n);
    let (r, g, b) = (rgb.plane(0), rgb.plane(1), rgb.plane(2));
    for i in 0..n {
        out.push(quantize(r[i].as_f64()));
        out.push(quantize(g[i].as_f64()));
        out.push(quantize(b[i].as_f64()));
    }
    out
}

/// Reads a binary PPM produced by [`write_ppm`] back into `[0, 1]` values.
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage<f64>> {
    let header = parse_pnm_header(bytes, b"P6")?;
    if header.maxval != 255 {
        return Err(Error::format(header.data_offset, "only maxval 255 is supported"));
    }
    let n = header.width * header.height;
    let expected = header.data_offset + 3 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[header.data_offset..expected];
    let mut values = vec![0.0; 3 * n];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            values[c * n + i] = f64::from(px[c]) / 255.0;
        }
    }
    RgbImage::new(header.height, header.width, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(width: usize, height: usize, pattern: BayerPattern, data: Vec<u16>) -> RawImage {
        RawImage::new(width, height, 10, pattern, 64, 1023, data).unwrap()
    }

    #[test]
    fn constant_rawi_round_trips() {
        let img = raw(4, 4, BayerPattern::Rggb, vec![64; 16]);
        let parsed = parse_raw(&write_raw(&img)).unwrap();
        assert_eq!(parsed, img);
        assert!(parsed.data.iter().all(|&v| v == 64));
    }

    #[test]
    fn odd_width_is_a_dimension_error() {
        let mut bytes = write_raw(&raw(4, 4, BayerPattern::Rggb, vec![64; 16]));
        bytes[6..10].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(parse_raw(&bytes), Err(Error::Dimension(_))));
    }

    #[test]
    fn header_layout_is_byte_exact() {
        let img = RawImage::new(2, 2, 16, BayerPattern::Rggb, 0, 65535, vec![100, 200, 300, 400])
            .unwrap();
        let bytes = write_raw(&img);
        let mut expected = Vec::new();
        expected.extend_from_slice(b"RAWI");
        expected.extend_from_slice(&[1, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[16, 0]);
        expected.extend_from_slice(&[0, 0]);
        expected.extend_from_slice(&[0, 0]);
        expected.extend_from_slice(&[0xff, 0xff]);
        expected.extend_from_slice(&[100, 0, 200, 0, 0x2c, 0x01, 0x90, 0x01]);
        assert_eq!(bytes.len(), 30);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn one_pixel_change_touches_two_bytes() {
        let (w, h) = (6, 4);
        let a = raw(w, h, BayerPattern::Rggb, (0..24).map(|v| 100 + v).collect());
        let mut b = a.clone();
        let (row, col) = (2, 3);
        b.data[row * w + col] = 0x3ff;
        let (ba, bb) = (write_raw(&a), write_raw(&b));
        let diffs: Vec<usize> = (0..ba.len()).filter(|&i| ba[i] != bb[i]).collect();
        let offset = RAWI_HEADER_LEN + 2 * (row * w + col);
        assert_eq!(diffs, vec![offset, offset + 1]);
    }

    #[test]
    fn truncated_and_malformed_inputs() {
        let bytes = write_raw(&raw(4, 4, BayerPattern::Rggb, vec![64; 16]));
        assert!(matches!(
            parse_raw(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(parse_raw(&bytes[..10]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[16] = 9;
        assert!(matches!(parse_raw(&bad), Err(Error::Format { offset: 16, .. })));
        assert!(matches!(parse_raw(b"JUNK"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn levels_and_samples_are_validated() {
        assert!(RawImage::new(2, 2, 10, BayerPattern::Rggb, 100, 100, vec![0; 4]).is_err());
        assert!(RawImage::new(2, 2, 10, BayerPattern::Rggb, 0, 1024, vec![0; 4]).is_err());
        assert!(RawImage::new(2, 2, 10, BayerPattern::Rggb, 0, 1023, vec![0, 0, 0, 1024]).is_err());
    }

    #[test]
    fn pgm_input_uses_supplied_metadata() {
        let img = RawImage::new(4, 2, 16, BayerPattern::Gbrg, 0, 4095, (0..8).collect()).unwrap();
        let bytes = write_pgm(&img);
        let meta = RawMeta {
            pattern: BayerPattern::Gbrg,
            black_level: Some(16),
            white_level: Some(4095),
        };
        let parsed = parse_raw_with(&bytes, &meta).unwrap();
        assert_eq!(parsed.data, img.data);
        assert_eq!(parsed.pattern, BayerPattern::Gbrg);
        assert_eq!(parsed.black_level, 16);
        let commented = b"P5 # sensor dump\n2 2\n# levels\n255\n\x01\x02\x03\x04";
        let parsed = parse_raw(commented).unwrap();
        assert_eq!(parsed.data, vec![1, 2, 3, 4]);
        assert_eq!(parsed.white_level, 255);
    }

    #[test]
    fn pack_normalizes_rggb_quad() {
        let img = raw(2, 2, BayerPattern::Rggb, vec![1023, 512, 512, 64]);
        let p: PackedTensor = pack(&img, Exec::Sequential);
        let g = (512.0 - 64.0) / (1023.0 - 64.0);
        assert_eq!(p.values, vec![1.0, g, g, 0.0]);
        assert!((g - 0.4671).abs() < 1e-4);
    }

    #[test]
    fn black_maps_to_zero_and_below_black_clamps() {
        let img = raw(4, 4, BayerPattern::Bggr, vec![64; 16]);
        let p: PackedTensor = pack(&img, Exec::Sequential);
        assert!(p.values.iter().all(|&v| v == 0.0));
        let img = raw(2, 2, BayerPattern::Rggb, vec![0, 10, 1023, 63]);
        let p: PackedTensor = pack(&img, Exec::Sequential);
        assert_eq!(p.values, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn color_at_matches_quad_offsets() {
        for pattern in BayerPattern::ALL {
            let [r, g1, g2, b] = pattern.quad_offsets();
            assert_eq!(pattern.color_at(r.0, r.1), 0);
            assert_eq!(pattern.color_at(g1.0, g1.1), 1);
            assert_eq!(pattern.color_at(g2.0, g2.1), 1);
            assert_eq!(pattern.color_at(b.0, b.1), 2);
            assert_eq!(g1.0, r.0, "G1 shares the red row");
        }
    }

    #[test]
    fn green_planes_are_averaged() {
        let (h, w) = (3, 5);
        let n = h * w;
        let mut values = vec![0.7f64; 4 * n];
        values[n..2 * n].fill(0.2);
        values[2 * n..3 * n].fill(0.6);
        let rgb = unpack_to_rgb(&PackedTensor { height: h, width: w, values }, Exec::Sequential);
        assert!(rgb.plane(1).iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(rgb.plane(0).iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn ppm_quantization_rule() {
        let rgb = RgbImage::new(1, 1, vec![1.0, 0.5, 0.0]).unwrap();
        let bytes = write_ppm(&rgb);
        assert!(bytes.starts_with(b"P6\n1 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 128, 0]);
        let zero = RgbImage::<f64>::filled(3, 2, [0.0; 3]);
        let bytes = write_ppm(&zero);
        assert!(bytes[b"P6\n2 3\n255\n".len()..].iter().all(|&b| b == 0));
        let back = parse_ppm(&write_ppm(&rgb)).unwrap();
        assert_eq!(back.pixel(0, 0), [1.0, 128.0 / 255.0, 0.0]);
    }
}
