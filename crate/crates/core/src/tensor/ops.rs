use super::gemm::gemm;
use super::{numel, GradSink, Node, Tensor};
use crate::error::{Error, Result};

/// Variance floor added inside layer and RMS normalization.
pub const NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    MatMul {
        a: Tensor,
        b: Tensor,
        plan: MatPlan,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        a: Tensor,
        c: f64,
    },
    Gelu {
        a: Tensor,
        tanh: Vec<f64>,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    RmsNorm {
        x: Tensor,
        gain: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        a: Tensor,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Reshape {
        a: Tensor,
    },
    Permute {
        a: Tensor,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Narrow {
        a: Tensor,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    Rope {
        a: Tensor,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Sum {
        a: Tensor,
    },
    Mean {
        a: Tensor,
    },
}

pub(crate) enum MatPlan {
    /// `b` is a plain matrix; `a`'s leading dims fold into rows.
    Flat { rows: usize, k: usize, n: usize },
    /// One `(a_batch, b_batch)` pair per output batch.
    Batched {
        m: usize,
        k: usize,
        n: usize,
        pairs: Vec<(usize, usize)>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::Scale { a, .. }
            | Op::Gelu { a, .. }
            | Op::Softmax { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Narrow { a, .. }
            | Op::Rope { a, .. }
            | Op::Sum { a }
            | Op::Mean { a } => vec![a],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::RmsNorm { x, gain, .. } => vec![x, gain],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Embedding { table, .. } => vec![table],
        }
    }

    pub(crate) fn backward(&self, out: &Node, g: &[f64], sink: &mut GradSink) {
        match self {
            Op::MatMul { a, b, plan } => match plan {
                MatPlan::Flat { rows, k, n } => {
                    if let Some(ga) = sink.acc(a) {
                        gemm(*rows, *n, *k, g, false, &b.data(), true, ga, 1.0);
                    }
                    if let Some(gb) = sink.acc(b) {
                        gemm(*k, *rows, *n, &a.data(), true, g, false, gb, 1.0);
                    }
                }
                MatPlan::Batched { m, k, n, pairs } => {
                    let (m, k, n) = (*m, *k, *n);
                    if let Some(ga) = sink.acc(a) {
                        let bd = b.data();
                        for (o, &(ai, bi)) in pairs.iter().enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                &g[o * m * n..],
                                false,
                                &bd[bi * k * n..],
                                true,
                                &mut ga[ai * m * k..],
                                1.0,
                            );
                        }
                    }
                    if let Some(gb) = sink.acc(b) {
                        let ad = a.data();
                        for (o, &(ai, bi)) in pairs.iter().enumerate() {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[ai * m * k..],
                                true,
                                &g[o * m * n..],
                                false,
                                &mut gb[bi * k * n..],
                                1.0,
                            );
                        }
                    }
                }
            },
            Op::Add { a, b } => {
                if let Some(ga) = sink.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = sink.acc(b) {
                    reduce_into(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = sink.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = sink.acc(b) {
                    let n = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] -= gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = sink.acc(a) {
                    let bd = b.data();
                    let n = bd.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[i % n];
                    }
                }
                if let Some(gb) = sink.acc(b) {
                    let ad = a.data();
                    let n = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi * ad[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = sink.acc(a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += c * gi;
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                if let Some(ga) = sink.acc(a) {
                    let ad = a.data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(ad[i], tanh[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = gain.numel();
                let gd = gain.data().clone();
                if let Some(gx) = sink.acc(x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, xh) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let out = &mut gx[row];
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            out[j] += rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(gg) = sink.acc(gain) {
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                }
                if let Some(gb) = sink.acc(bias) {
                    reduce_into(gb, g);
                }
            }
            Op::RmsNorm {
                x,
                gain,
                xhat,
                rstd,
            } => {
                let d = gain.numel();
                let gd = gain.data().clone();
                if let Some(gx) = sink.acc(x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, xh) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            mean_dxh_xh += gr[j] * gd[j] * xh[j];
                        }
                        mean_dxh_xh /= d as f64;
                        let out = &mut gx[row];
                        for j in 0..d {
                            out[j] += rs * (gr[j] * gd[j] - xh[j] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(gg) = sink.acc(gain) {
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = sink.acc(a) {
                    let y = out.data.borrow();
                    let d = *out.shape.last().unwrap_or(&1);
                    for r in 0..y.len() / d.max(1) {
                        let row = r * d..(r + 1) * d;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in row {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = sink.acc(logits) {
                    let v = *logits.shape().last().unwrap();
                    let scale = g[0] / *count as f64;
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        let p = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += scale * p[j];
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = sink.acc(a) {
                    add_into(ga, g);
                }
            }
            Op::Permute { a, perm } => {
                if let Some(ga) = sink.acc(a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_copy(g, &out.shape, &inv);
                    add_into(ga, &back);
                }
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&out.shape[..*axis]);
                let inner = numel(&out.shape[axis + 1..]);
                let total = out.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = p.shape()[*axis] * inner;
                    if let Some(gp) = sink.acc(p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { a, axis, start } => {
                if let Some(ga) = sink.acc(a) {
                    let shape = a.shape();
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(&shape[axis + 1..]);
                    let full = shape[*axis] * inner;
                    let chunk = out.shape[*axis] * inner;
                    for o in 0..outer {
                        let dst =
                            &mut ga[o * full + start * inner..o * full + start * inner + chunk];
                        add_into(dst, &g[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = sink.acc(table) {
                    let d = table.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Rope { a, cos, sin } => {
                if let Some(ga) = sink.acc(a) {
                    rope_apply(g, &out.shape, cos, sin, true, ga);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = sink.acc(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = sink.acc(a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sum `src` into a shorter `dst` whose shape is a suffix of `src`'s.
fn reduce_into(dst: &mut [f64], src: &[f64]) {
    let n = dst.len();
    for chunk in src.chunks(n) {
        add_into(dst, chunk);
    }
}

fn gelu_inner_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

/// Derivative at `x`, given `t = gelu_inner_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        }
        // advance all but the last axis
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Rotate `(…, S, H, hd)` pairs `(i, i + hd/2)` by the per-position angles.
fn rope_apply(
    src: &[f64],
    shape: &[usize],
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
    dst: &mut [f64],
) {
    let r = shape.len();
    let (s, h, hd) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let half = hd / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (blk, (xs, ys)) in src.chunks(hd).zip(dst.chunks_mut(hd)).enumerate() {
        let pos = (blk / h) % s;
        let (c, sn) = (
            &cos[pos * half..(pos + 1) * half],
            &sin[pos * half..(pos + 1) * half],
        );
        for i in 0..half {
            let (x1, x2) = (xs[i], xs[i + half]);
            let si = sign * sn[i];
            ys[i] += x1 * c[i] - x2 * si;
            ys[i + half] += x2 * c[i] + x1 * si;
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat batch index into `shape` for a multi-index over the broadcast shape.
fn broadcast_offset(idx: &[usize], shape: &[usize]) -> usize {
    let skip = idx.len() - shape.len();
    let mut off = 0;
    for (i, &d) in shape.iter().enumerate() {
        let v = if d == 1 { 0 } else { idx[skip + i] };
        off = off * d + v;
    }
    off
}

impl Tensor {
    /// Matrix product over the trailing two dims with broadcast leading dims.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), b.shape());
        let mismatch = || Error::dim("matmul", format!("cannot multiply {:?} by {:?}", sa, sb));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        if sb.len() == 2 {
            let rows = self.numel() / k.max(1);
            let mut out = vec![0.0; rows * n];
            gemm(
                rows,
                k,
                n,
                &self.data(),
                false,
                &b.data(),
                false,
                &mut out,
                0.0,
            );
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            let plan = MatPlan::Flat { rows, k, n };
            return Ok(Tensor::from_op(
                out,
                shape,
                Op::MatMul {
                    a: self.clone(),
                    b: b.clone(),
                    plan,
                },
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_batch(ba, bb).ok_or_else(mismatch)?;
        let nb = numel(&batch);
        let mut pairs = Vec::with_capacity(nb);
        let mut idx = vec![0usize; batch.len()];
        for _ in 0..nb {
            pairs.push((broadcast_offset(&idx, ba), broadcast_offset(&idx, bb)));
            for ax in (0..batch.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out = vec![0.0; nb * m * n];
        {
            let (ad, bd) = (self.data(), b.data());
            for (o, &(ai, bi)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &ad[ai * m * k..],
                    false,
                    &bd[bi * k * n..],
                    false,
                    &mut out[o * m * n..],
                    0.0,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let plan = MatPlan::Batched { m, k, n, pairs };
        Ok(Tensor::from_op(
            out,
            shape,
            Op::MatMul {
                a: self.clone(),
                b: b.clone(),
                plan,
            },
        ))
    }

    fn broadcast_binary(
        &self,
        b: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if !is_suffix(b.shape(), self.shape()) {
            return Err(Error::dim(
                name,
                format!("{:?} does not broadcast onto {:?}", b.shape(), self.shape()),
            ));
        }
        let (ad, bd) = (self.data(), b.data());
        let n = bd.len().max(1);
        Ok(ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect())
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `self`'s (or vice versa).
    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        if self.rank() < b.rank() {
            return b.add(self);
        }
        let out = self.broadcast_binary(b, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Add {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor> {
        let out = self.broadcast_binary(b, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Sub {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        if self.rank() < b.rank() {
            return b.mul(self);
        }
        let out = self.broadcast_binary(b, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Mul {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale { a: self.clone(), c })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let tanh: Vec<f64> = self.data().iter().map(|&x| gelu_inner_tanh(x)).collect();
        let out = self
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, t)| 0.5 * x * (1.0 + t))
            .collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Gelu {
                a: self.clone(),
                tanh,
            },
        )
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if d < 1 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(),
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let x = self.data();
        let (gd, bd) = (gain.data(), bias.data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        drop((x, gd, bd));
        let op = Op::LayerNorm {
            x: self.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            xhat,
            rstd,
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    /// RMS normalization over the last axis followed by `gain * x`.
    pub fn rms_norm(&self, gain: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if d < 1 || gain.shape() != [d] {
            return Err(Error::dim(
                "rms_norm",
                format!("input {:?}, gain {:?}", self.shape(), gain.shape()),
            ));
        }
        let x = self.data();
        let gd = gain.data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let rs = 1.0 / (ms + NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = row[j] * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j];
            }
        }
        drop((x, gd));
        let op = Op::RmsNorm {
            x: self.clone(),
            gain: gain.clone(),
            xhat,
            rstd,
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().unwrap_or(&1);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (xs, ys) in x.chunks(d.max(1)).zip(out.chunks_mut(d.max(1))) {
            softmax_row(xs, ys);
        }
        drop(x);
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { a: self.clone() })
    }

    /// Mean negative log-likelihood of `targets` over positions where `mask`
    /// is set. `targets` and `mask` index the rows of `logits` flattened to
    /// `(N, V)`.
    pub fn softmax_cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let v = *self.shape().last().unwrap_or(&0);
        let rows = if v == 0 { 0 } else { self.numel() / v };
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!(
                    "logits {:?} vs {} targets / {} mask entries",
                    self.shape(),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Input(
                "cross entropy mask selects no positions".into(),
            ));
        }
        if let Some(t) = targets.iter().zip(mask).find(|(t, m)| **m && **t >= v) {
            return Err(Error::Input(format!(
                "target {} outside vocabulary of {}",
                t.0, v
            )));
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &x[r * v..(r + 1) * v];
            let lse = softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            total += lse - row[targets[r]];
        }
        drop(x);
        let op = Op::CrossEntropy {
            logits: self.clone(),
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(Tensor::from_op(vec![total / count as f64], vec![], op))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape { a: self.clone() },
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("invalid axes {:?} for shape {:?}", perm, self.shape()),
            ));
        }
        let out = permute_copy(&self.data(), self.shape(), perm);
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Permute {
                a: self.clone(),
                perm: perm.to_vec(),
            },
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no parts"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim(
                "concat",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!(
                        "{:?} incompatible with {:?} along axis {}",
                        p.shape(),
                        first.shape(),
                        axis
                    ),
                ));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (p, d) in parts.iter().zip(&datas) {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        let rank = parts.first().map(|p| p.rank()).unwrap_or(0);
        if rank == 0 {
            return Err(Error::dim("concat_last", "no parts or scalar parts"));
        }
        Tensor::concat(parts, rank - 1)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!(
                    "range {}..{} on axis {} of {:?}",
                    start,
                    start + len,
                    axis,
                    shape
                ),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis] * inner;
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[o * full + start * inner..o * full + (start + len) * inner]);
        }
        drop(d);
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            new_shape,
            Op::Narrow {
                a: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Split into consecutive pieces of the given sizes along `axis`.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Gather rows of a `(V, d)` table; output shape is `lead ++ [d]`.
    pub fn embedding(table: &Tensor, ids: &[usize], lead: &[usize]) -> Result<Tensor> {
        if table.rank() != 2 || numel(lead) != ids.len() {
            return Err(Error::dim(
                "embedding",
                format!(
                    "table {:?}, {} ids for lead shape {:?}",
                    table.shape(),
                    ids.len(),
                    lead
                ),
            ));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token {} outside vocabulary of {}",
                bad, v
            )));
        }
        let td = table.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        drop(td);
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position embedding on a `(…, S, H, hd)` tensor; `positions`
    /// gives the absolute position of each of the `S` rows.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Tensor> {
        let r = self.rank();
        if r < 3 || self.shape()[r - 3] != positions.len() || self.shape()[r - 1] % 2 != 0 {
            return Err(Error::dim(
                "rope",
                format!(
                    "shape {:?} with {} positions",
                    self.shape(),
                    positions.len()
                ),
            ));
        }
        let hd = self.shape()[r - 1];
        let half = hd / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let mut out = vec![0.0; self.numel()];
        rope_apply(&self.data(), self.shape(), &cos, &sin, false, &mut out);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Rope {
                a: self.clone(),
                cos,
                sin,
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], Op::Sum { a: self.clone() })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(vec![s], vec![], Op::Mean { a: self.clone() })
    }

    /// Mean of squared differences.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::dim(
                "mse",
                format!("{:?} vs {:?}", self.shape(), target.shape()),
            ));
        }
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }
}

/// Writes softmax of `x` into `y`; returns log-sum-exp.
fn softmax_row(x: &[f64], y: &mut [f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = (xi - max).exp();
        z += *yi;
    }
    for yi in y.iter_mut() {
        *yi /= z;
    }
    max + z.ln()
}
