use super::{numel, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::raw_io::upsample_taps;

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Graph {
    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push_node(shape, value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn chw(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(dim_err(format!("{what}: expected [C,H,W], got {s:?}"))),
        }
    }

    /// Same-size 2D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (cin, h, w) = self.chw(input, "conv2d input")?;
        let (cout, k) = match *self.shape(weight) {
            [co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            ref s => {
                return Err(dim_err(format!(
                    "conv2d weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        if k % 2 == 0 || padding != (k - 1) / 2 {
            return Err(dim_err(format!(
                "conv2d needs an odd kernel with padding (k-1)/2, got k={k} padding={padding}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(dim_err(format!(
                "conv2d bias {:?} does not match {cout} outputs",
                self.shape(bias)
            )));
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![0.0; cout * h * w];
        let p = padding as isize;
        for co in 0..cout {
            let plane = &mut out[co * h * w..(co + 1) * h * w];
            plane.fill(b[co]);
            for ci in 0..cin {
                let src = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                        let (dy, dx) = (ky as isize - p, kx as isize - p);
                        for y in 0..h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w as isize {
                                let sx = xx + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                plane[(y * w as isize + xx) as usize] +=
                                    wv * src[(sy * w as isize + sx) as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push_node(
            vec![cout, h, w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            rg,
        ))
    }

    /// `weight · input + bias` for a vector input.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = match *self.shape(input) {
            [n] => n,
            ref s => return Err(dim_err(format!("linear input must be a vector, got {s:?}"))),
        };
        let m = match *self.shape(weight) {
            [m, k] if k == n => m,
            ref s => return Err(dim_err(format!("linear weight {s:?} incompatible with input {n}"))),
        };
        if self.shape(bias) != [m] {
            return Err(dim_err(format!("linear bias {:?} does not match {m}", self.shape(bias))));
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let out = (0..m)
            .map(|i| b[i] + wt[i * n..(i + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push_node(vec![m], out, Op::Linear { input, weight, bias }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.push_node(self.shape(a).to_vec(), value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn reciprocal(&mut self, x: Var) -> Var {
        self.unary(x, Op::Reciprocal(x), |v| 1.0 / v)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.requires(&[x]);
        Ok(self.push_node(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// `base ^ exponent` elementwise with a single-element exponent.
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var> {
        if self.value(exponent).len() != 1 {
            return Err(dim_err("pow exponent must hold one element"));
        }
        let e = self.scalar(exponent);
        if let Some(bad) = self.value(base).iter().find(|&&b| b < 0.0) {
            return Err(Error::Domain(format!("pow of negative base {bad}")));
        }
        let value = self.value(base).iter().map(|b| b.powf(e)).collect();
        let rg = self.requires(&[base, exponent]);
        Ok(self.push_node(self.shape(base).to_vec(), value, Op::Pow { base, exponent }, rg))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    /// Per-channel spatial mean: [C,H,W] -> [C].
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "mean_spatial")?;
        let n = h * w;
        let src = self.value(x);
        let out = (0..c).map(|ch| src[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![c], out, Op::MeanSpatial(x), rg))
    }

    /// Per-channel population variance (divides by H*W): [C,H,W] -> [C].
    pub fn var_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "var_spatial")?;
        let n = h * w;
        let src = self.value(x);
        let out = (0..c)
            .map(|ch| {
                let plane = &src[ch * n..(ch + 1) * n];
                let mu = plane.iter().sum::<f64>() / n as f64;
                plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64
            })
            .collect();
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![c], out, Op::VarSpatial(x), rg))
    }

    /// Mean across channels: [C,H,W] -> [1,H,W].
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "mean_channels")?;
        let n = h * w;
        let src = self.value(x);
        let out = (0..n)
            .map(|i| (0..c).map(|ch| src[ch * n + i]).sum::<f64>() / c as f64)
            .collect();
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![1, h, w], out, Op::MeanChannels(x), rg))
    }

    /// Max across channels: [C,H,W] -> [1,H,W]. Ties resolve to the lowest
    /// channel index, which is where the subgradient is routed.
    pub fn max_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "max_channels")?;
        let n = h * w;
        let src = self.value(x);
        let mut argmax = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = 0;
            for ch in 1..c {
                if src[ch * n + i] > src[best * n + i] {
                    best = ch;
                }
            }
            argmax.push(best);
            out.push(src[best * n + i]);
        }
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![1, h, w], out, Op::MaxChannels { x, argmax }, rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(dim_err(format!("concat: {s:?} does not match trailing {tail:?}")));
            }
            lead += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.requires(parts);
        Ok(self.push_node(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Element `i` of a flat tensor as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .get(i)
            .ok_or_else(|| dim_err(format!("index {i} out of range")))?;
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![], vec![v], Op::Index { x, i }, rg))
    }

    /// Slab `i` of the leading axis, keeping a unit leading dimension.
    pub fn slice0(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || i >= shape[0] {
            return Err(dim_err(format!("slice {i} out of range for {shape:?}")));
        }
        let n = numel(&shape[1..]);
        let value = self.value(x)[i * n..(i + 1) * n].to_vec();
        let mut out_shape = shape;
        out_shape[0] = 1;
        let rg = self.requires(&[x]);
        Ok(self.push_node(out_shape, value, Op::Slice0 { x, i }, rg))
    }

    /// Scales channel c of a [C,H,W] tensor by `gains[c]`.
    pub fn mul_channels(&mut self, x: Var, gains: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "mul_channels")?;
        if self.shape(gains) != [c] {
            return Err(dim_err(format!("gains {:?} do not match {c} channels", self.shape(gains))));
        }
        let n = h * w;
        let g = self.value(gains);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v * g[i / n]).collect();
        let rg = self.requires(&[x, gains]);
        Ok(self.push_node(vec![c, h, w], value, Op::MulChannels { x, gains }, rg))
    }

    /// Multiplies every channel of a [C,H,W] tensor by a [1,H,W] plane.
    pub fn mul_plane(&mut self, x: Var, plane: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "mul_plane")?;
        if self.shape(plane) != [1, h, w] {
            return Err(dim_err(format!("plane {:?} does not broadcast over [{c},{h},{w}]", self.shape(plane))));
        }
        let n = h * w;
        let p = self.value(plane);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v * p[i % n]).collect();
        let rg = self.requires(&[x, plane]);
        Ok(self.push_node(vec![c, h, w], value, Op::MulPlane { x, plane }, rg))
    }

    /// Multiplies by a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar factor must hold one element"));
        }
        let k = self.scalar(s);
        let value = self.value(x).iter().map(|v| v * k).collect();
        let rg = self.requires(&[x, s]);
        Ok(self.push_node(self.shape(x).to_vec(), value, Op::MulScalar { x, s }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.requires(&[x]);
        self.push_node(vec![], vec![total], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(&[x]);
        self.push_node(vec![], vec![m], Op::Mean(x), rg)
    }

    /// Differentiable form of [`crate::raw_io::unpack_to_rgb`] without the
    /// final clamp: [4,h,w] -> [3,2h,2w].
    pub fn unpack_rgb(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "unpack_rgb")?;
        if c != 4 {
            return Err(dim_err(format!("unpack_rgb needs 4 channels, got {c}")));
        }
        let n = h * w;
        let src = self.value(x);
        let green: Vec<f64> = (0..n).map(|i| 0.5 * (src[n + i] + src[2 * n + i])).collect();
        let planes = [&src[..n], &green[..], &src[3 * n..]];
        let (rows, cols) = (upsample_taps(h), upsample_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; 3 * oh * ow];
        for (ch, plane) in planes.iter().enumerate() {
            for (oi, &[(r0, wr0), (r1, wr1)]) in rows.iter().enumerate() {
                for (oj, &[(c0, wc0), (c1, wc1)]) in cols.iter().enumerate() {
                    let top = plane[r0 * w + c0] * wc0 + plane[r0 * w + c1] * wc1;
                    let bottom = plane[r1 * w + c0] * wc0 + plane[r1 * w + c1] * wc1;
                    out[(ch * oh + oi) * ow + oj] = top * wr0 + bottom * wr1;
                }
            }
        }
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![3, oh, ow], out, Op::UnpackRgb(x), rg))
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse_const(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(dim_err(format!(
                "mse: {} predictions vs {} targets",
                self.value(x).len(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let loss = self.value(x).iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.requires(&[x]);
        Ok(self.push_node(
            vec![],
            vec![loss],
            Op::MseConst {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Negative entropy `sum p log p` of a soft histogram over [0, 1].
    ///
    /// Bin centers sit at `b / (bins - 1)`; each value splits unit mass
    /// between its two nearest centers with triangular (hat) weights.
    pub fn neg_entropy_histogram(&mut self, x: Var, bins: usize) -> Result<Var> {
        if bins < 2 {
            return Err(Error::Parameter(format!("histogram needs at least 2 bins, got {bins}")));
        }
        let p = soft_histogram(self.value(x), bins);
        let loss = p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum();
        let rg = self.requires(&[x]);
        Ok(self.push_node(vec![], vec![loss], Op::NegEntropy { x, bins }, rg))
    }
}

/// Lower bin and upper-bin weight of a value under the hat kernel.
#[inline]
pub(crate) fn hat_bin(v: f64, bins: usize) -> (usize, f64) {
    let t = v.clamp(0.0, 1.0) * (bins - 1) as f64;
    let lower = (t.floor() as usize).min(bins - 2);
    (lower, t - lower as f64)
}

pub(crate) fn soft_histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut p = vec![0.0; bins];
    let n = values.len() as f64;
    for &v in values {
        let (b, frac) = hat_bin(v, bins);
        p[b] += (1.0 - frac) / n;
        p[b + 1] += frac / n;
    }
    p
}
