use super::ops::{axis_extents, hat_bin, sigmoid, soft_histogram};
use super::{Graph, Op, Var};
use crate::raw_io::upsample_taps;

/// Vector-Jacobian products of node `i` given its output gradient.
pub(super) fn input_grads(graph: &Graph, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let node = graph.node(Var(i));
    let out = &node.value;
    let val = |v: Var| graph.value(v);
    let elementwise = |x: Var, d: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
        vec![(x, (0..g.len()).map(|j| g[j] * d(j)).collect())]
    };

    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d {
            input,
            weight,
            bias,
            padding,
        } => {
            let (cout, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
            let wshape = graph.shape(*weight);
            let (cin, k) = (wshape[1], wshape[2]);
            let x = val(*input);
            let wt = val(*weight);
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; wt.len()];
            let mut gb = vec![0.0; cout];
            let p = *padding as isize;
            for co in 0..cout {
                let go = &g[co * h * w..(co + 1) * h * w];
                gb[co] = go.iter().sum();
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((co * cin + ci) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let (dy, dx) = (ky as isize - p, kx as isize - p);
                            let mut acc = 0.0;
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
                                    let o = go[(y * w as isize + xx) as usize];
                                    let s = ci * h * w + (sy * w as isize + sx) as usize;
                                    acc += o * x[s];
                                    gx[s] += o * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            vec![(*input, gx), (*weight, gw), (*bias, gb)]
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let x = val(*input);
            let wt = val(*weight);
            let n = x.len();
            let mut gx = vec![0.0; n];
            let mut gw = vec![0.0; wt.len()];
            for (r, &go) in g.iter().enumerate() {
                for c in 0..n {
                    gx[c] += go * wt[r * n + c];
                    gw[r * n + c] = go * x[c];
                }
            }
            vec![(*input, gx), (*weight, gw), (*bias, g.to_vec())]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            vec![
                (*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()),
                (*b, g.iter().zip(va).map(|(x, y)| x * y).collect()),
            ]
        }
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::Relu(x) => {
            let xv = val(*x);
            elementwise(*x, &|j| if xv[j] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Softplus(x) => {
            let xv = val(*x);
            elementwise(*x, &|j| sigmoid(xv[j]))
        }
        Op::Sigmoid(x) => elementwise(*x, &|j| out[j] * (1.0 - out[j])),
        Op::Reciprocal(x) => elementwise(*x, &|j| -out[j] * out[j]),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_extents(&node.shape, *axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Pow { base, exponent } => {
            let b = val(*base);
            let e = graph.scalar(*exponent);
            let gb = (0..g.len())
                .map(|j| if b[j] > 0.0 { g[j] * e * out[j] / b[j] } else { 0.0 })
                .collect();
            let ge = (0..g.len())
                .filter(|&j| b[j] > 0.0)
                .map(|j| g[j] * out[j] * b[j].ln())
                .sum();
            vec![(*base, gb), (*exponent, vec![ge])]
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            elementwise(*x, &|j| if xv[j] >= *lo && xv[j] <= *hi { 1.0 } else { 0.0 })
        }
        Op::MeanSpatial(x) => {
            let n = val(*x).len() / g.len();
            let gx = (0..val(*x).len()).map(|j| g[j / n] / n as f64).collect();
            vec![(*x, gx)]
        }
        Op::VarSpatial(x) => {
            let xv = val(*x);
            let n = xv.len() / g.len();
            let means: Vec<f64> = xv.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
            let gx = (0..xv.len())
                .map(|j| g[j / n] * 2.0 * (xv[j] - means[j / n]) / n as f64)
                .collect();
            vec![(*x, gx)]
        }
        Op::MeanChannels(x) => {
            let len = val(*x).len();
            let n = g.len();
            let c = len / n;
            vec![(*x, (0..len).map(|j| g[j % n] / c as f64).collect())]
        }
        Op::MaxChannels { x, argmax } => {
            let n = g.len();
            let mut gx = vec![0.0; val(*x).len()];
            for (i, &ch) in argmax.iter().enumerate() {
                gx[ch * n + i] = g[i];
            }
            vec![(*x, gx)]
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).len();
                    let slice = g[offset..offset + len].to_vec();
                    offset += len;
                    (p, slice)
                })
                .collect()
        }
        Op::Index { x, i } => {
            let mut gx = vec![0.0; val(*x).len()];
            gx[*i] = g[0];
            vec![(*x, gx)]
        }
        Op::Slice0 { x, i } => {
            let mut gx = vec![0.0; val(*x).len()];
            let n = g.len();
            gx[i * n..(i + 1) * n].copy_from_slice(g);
            vec![(*x, gx)]
        }
        Op::MulChannels { x, gains } => {
            let xv = val(*x);
            let gv = val(*gains);
            let n = xv.len() / gv.len();
            let gx = (0..xv.len()).map(|j| g[j] * gv[j / n]).collect();
            let mut gg = vec![0.0; gv.len()];
            for j in 0..xv.len() {
                gg[j / n] += g[j] * xv[j];
            }
            vec![(*x, gx), (*gains, gg)]
        }
        Op::MulPlane { x, plane } => {
            let xv = val(*x);
            let pv = val(*plane);
            let n = pv.len();
            let gx = (0..xv.len()).map(|j| g[j] * pv[j % n]).collect();
            let mut gp = vec![0.0; n];
            for j in 0..xv.len() {
                gp[j % n] += g[j] * xv[j];
            }
            vec![(*x, gx), (*plane, gp)]
        }
        Op::MulScalar { x, s } => {
            let xv = val(*x);
            let k = graph.scalar(*s);
            let gs = g.iter().zip(xv).map(|(a, b)| a * b).sum();
            vec![(*x, g.iter().map(|v| v * k).collect()), (*s, vec![gs])]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::Mean(x) => {
            let n = val(*x).len();
            vec![(*x, vec![g[0] / n as f64; n])]
        }
        Op::UnpackRgb(x) => {
            let shape = graph.shape(*x);
            let (h, w) = (shape[1], shape[2]);
            let n = h * w;
            let (oh, ow) = (2 * h, 2 * w);
            let (rows, cols) = (upsample_taps(h), upsample_taps(w));
            let mut planes = vec![vec![0.0; n]; 3];
            for (ch, plane) in planes.iter_mut().enumerate() {
                for (oi, &[(r0, wr0), (r1, wr1)]) in rows.iter().enumerate() {
                    for (oj, &[(c0, wc0), (c1, wc1)]) in cols.iter().enumerate() {
                        let go = g[(ch * oh + oi) * ow + oj];
                        plane[r0 * w + c0] += go * wr0 * wc0;
                        plane[r0 * w + c1] += go * wr0 * wc1;
                        plane[r1 * w + c0] += go * wr1 * wc0;
                        plane[r1 * w + c1] += go * wr1 * wc1;
                    }
                }
            }
            let mut gx = vec![0.0; 4 * n];
            gx[..n].copy_from_slice(&planes[0]);
            for j in 0..n {
                gx[n + j] = 0.5 * planes[1][j];
                gx[2 * n + j] = 0.5 * planes[1][j];
            }
            gx[3 * n..].copy_from_slice(&planes[2]);
            vec![(*x, gx)]
        }
        Op::MseConst { x, target } => {
            let xv = val(*x);
            let n = xv.len() as f64;
            vec![(*x, xv.iter().zip(target).map(|(a, b)| g[0] * 2.0 * (a - b) / n).collect())]
        }
        Op::NegEntropy { x, bins } => {
            let xv = val(*x);
            let p = soft_histogram(xv, *bins);
            let dl: Vec<f64> = p.iter().map(|&q| if q > 0.0 { q.ln() + 1.0 } else { 0.0 }).collect();
            let scale = g[0] * (*bins - 1) as f64 / xv.len() as f64;
            let gx = xv
                .iter()
                .map(|&v| {
                    if !(0.0..=1.0).contains(&v) {
                        return 0.0;
                    }
                    let (b, _) = hat_bin(v, *bins);
                    scale * (dl[b + 1] - dl[b])
                })
                .collect();
            vec![(*x, gx)]
        }
    }
}
