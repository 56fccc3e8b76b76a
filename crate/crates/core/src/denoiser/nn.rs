//! Small f32 layer kit with hand-written backward passes.
//!
//! Activations are stored channel-major across the batch, element
//! `(c, b, y, x)` at `((c * n + b) * h + y) * w + x`. With this layout a
//! channel slice is a contiguous `(n*h*w)` row and channel concatenation is
//! plain vector append.

use std::ops::Range;

use super::kernels::{self, dispatch, sigmoid, Padded};

/// Batch of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Width of one channel row, `n * h * w`.
    #[inline]
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn concat(a: &Act, b: &Act) -> Act {
        debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Act {
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Splits a gradient of a concatenation back into its two halves.
    pub fn split(self, first_channels: usize) -> (Act, Act) {
        let at = first_channels * self.cols();
        let mut data = self.data;
        let tail = data.split_off(at);
        (
            Act {
                c: first_channels,
                n: self.n,
                h: self.h,
                w: self.w,
                data,
            },
            Act {
                c: self.c - first_channels,
                n: self.n,
                h: self.h,
                w: self.w,
                data: tail,
            },
        )
    }
}

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Hands out consecutive slots and remembers their names and fan-in.
#[derive(Debug, Default, Clone)]
pub(crate) struct ParamLayout {
    pub entries: Vec<(String, Slot, usize)>,
    pub total: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: String, len: usize, fan_in: usize) -> Slot {
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.total += len;
        self.entries.push((name, slot, fan_in));
        slot
    }
}

/// `c = a * b + beta * c` on row-major `m x k` by `k x n` views with
/// arbitrary strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            beta != 0.0,
            a.as_ptr(),
            csa as isize,
            rsa as isize,
            b.as_ptr(),
            csb as isize,
            rsb as isize,
            beta,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// 3x3 (padding 1) or 1x1 convolution with bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k == 1 || k == 3);
        let fan_in = cin * k * k;
        let weight = layout.alloc(format!("{name}.weight"), cout * fan_in, fan_in);
        let bias = layout.alloc(format!("{name}.bias"), cout, fan_in);
        Self {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Returns the output and the zero-bordered input needed by `backward`
    /// (empty for 1x1 kernels, which read the input itself).
    pub fn forward(&self, p: &[f32], x: &Act) -> (Act, Vec<f32>) {
        debug_assert_eq!(x.c, self.cin);
        let np = x.cols();
        let w = &p[self.weight.range()];
        let bias = &p[self.bias.range()];
        if self.k == 3 {
            let geo = Padded {
                c: x.c,
                n: x.n,
                h: x.h,
                w: x.w,
            };
            let xp = kernels::pad(&x.data, geo);
            let (wb, bb, blocked) = kernels::blocked_weights(w, bias, self.cout, self.taps());
            let mut data = vec![0.0f32; blocked * np];
            kernels::conv3_forward(&xp, geo, &wb, &bb, blocked, &mut data);
            data.truncate(self.cout * np);
            let out = Act {
                c: self.cout,
                n: x.n,
                h: x.h,
                w: x.w,
                data,
            };
            return (out, xp);
        }
        let mut out = Act::zeros(self.cout, x.n, x.h, x.w);
        gemm(self.cout, self.cin, np, w, (self.cin, 1), &x.data, (np, 1), 0.0, &mut out.data);
        for (row, &b) in out.data.chunks_exact_mut(np).zip(bias) {
            for v in row {
                *v += b;
            }
        }
        (out, Vec::new())
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient
    /// when `need_dx`.
    pub fn backward(
        &self,
        p: &[f32],
        g: &mut [f32],
        x: &Act,
        padded: &[f32],
        dout: &Act,
        need_dx: bool,
    ) -> Option<Act> {
        let np = dout.cols();
        for (gb, row) in g[self.bias.range()].iter_mut().zip(dout.data.chunks_exact(np)) {
            *gb += row.iter().sum::<f32>();
        }
        let w = &p[self.weight.range()];
        if self.k == 1 {
            gemm(
                self.cout,
                np,
                self.cin,
                &dout.data,
                (np, 1),
                &x.data,
                (1, np),
                1.0,
                &mut g[self.weight.range()],
            );
            if !need_dx {
                return None;
            }
            let mut dx = Act::zeros(self.cin, x.n, x.h, x.w);
            gemm(self.cin, self.cout, np, w, (1, self.cin), &dout.data, (np, 1), 0.0, &mut dx.data);
            return Some(dx);
        }
        let geo = Padded {
            c: self.cin,
            n: x.n,
            h: x.h,
            w: x.w,
        };
        kernels::conv3_weight_grad(padded, geo, &dout.data, self.cout, &mut g[self.weight.range()]);
        if !need_dx {
            return None;
        }
        let dgeo = Padded { c: self.cout, ..geo };
        let dp = kernels::pad(&dout.data, dgeo);
        let (wa, blocked) = kernels::adjoint_weights(w, self.cin, self.cout);
        let zeros = vec![0.0f32; blocked];
        let mut data = vec![0.0f32; blocked * np];
        kernels::conv3_forward(&dp, dgeo, &wa, &zeros, blocked, &mut data);
        data.truncate(self.cin * np);
        Some(Act {
            c: self.cin,
            n: x.n,
            h: x.h,
            w: x.w,
            data,
        })
    }
}

#[inline(always)]
fn silu(u: f32) -> f32 {
    u * sigmoid(u)
}

#[inline(always)]
fn silu_grad(u: f32) -> f32 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

/// Group normalization with per-channel affine transform, followed by SiLU.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNormSilu {
    pub c: usize,
    pub groups: usize,
    pub gamma: Slot,
    pub beta: Slot,
}

pub(crate) struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNormSilu {
    pub fn new(layout: &mut ParamLayout, name: &str, c: usize, groups: usize) -> Self {
        assert!(groups > 0 && c.is_multiple_of(groups), "{c} channels into {groups} groups");
        Self {
            c,
            groups,
            gamma: layout.alloc(format!("{name}.gamma"), c, 0),
            beta: layout.alloc(format!("{name}.beta"), c, 0),
        }
    }

    pub fn forward(&self, p: &[f32], x: &Act) -> (Act, NormCache) {
        gn_forward(self, p, x)
    }

    pub fn backward(&self, p: &[f32], g: &mut [f32], cache: &NormCache, dout: &Act) -> Act {
        gn_backward(self, p, g, cache, dout)
    }
}

dispatch! {
    fn gn_forward => gn_forward_body(gn: &GroupNormSilu, p: &[f32], x: &Act) -> (Act, NormCache)
}

dispatch! {
    fn gn_backward => gn_backward_body(
        gn: &GroupNormSilu,
        p: &[f32],
        g: &mut [f32],
        cache: &NormCache,
        dout: &Act,
    ) -> Act
}

#[inline(always)]
fn gn_forward_body(gn: &GroupNormSilu, p: &[f32], x: &Act) -> (Act, NormCache) {
    let (n, plane) = (x.n, x.plane());
    let cpg = gn.c / gn.groups;
    let count = (cpg * plane) as f64;
    let gamma = &p[gn.gamma.range()];
    let beta = &p[gn.beta.range()];
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut inv_std = vec![0.0f32; n * gn.groups];
    let mut out = Act::zeros(x.c, n, x.h, x.w);
    for b in 0..n {
        for g in 0..gn.groups {
            let chans = g * cpg..(g + 1) * cpg;
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for c in chans.clone() {
                for &v in &x.data[(c * n + b) * plane..][..plane] {
                    let v = v as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            let inv = (1.0 / (var + GN_EPS).sqrt()) as f32;
            let mean = mean as f32;
            inv_std[b * gn.groups + g] = inv;
            for c in chans {
                let r = (c * n + b) * plane..(c * n + b + 1) * plane;
                for ((xh, o), &v) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out.data[r.clone()])
                    .zip(&x.data[r])
                {
                    *xh = (v - mean) * inv;
                    *o = silu(gamma[c] * *xh + beta[c]);
                }
            }
        }
    }
    (out, NormCache { xhat, inv_std })
}

#[inline(always)]
fn gn_backward_body(gn: &GroupNormSilu, p: &[f32], g: &mut [f32], cache: &NormCache, dout: &Act) -> Act {
    let (n, plane) = (dout.n, dout.plane());
    let cpg = gn.c / gn.groups;
    let count = (cpg * plane) as f32;
    let gamma = &p[gn.gamma.range()];
    let beta = &p[gn.beta.range()];
    let mut dgamma = vec![0.0f32; gn.c];
    let mut dbeta = vec![0.0f32; gn.c];
    let mut dx = Act::zeros(dout.c, n, dout.h, dout.w);
    let mut dxhat = vec![0.0f32; cpg * plane];
    for b in 0..n {
        for grp in 0..gn.groups {
            let (mut m1, mut m2) = (0.0f32, 0.0f32);
            for (j, c) in (grp * cpg..(grp + 1) * cpg).enumerate() {
                let r = (c * n + b) * plane..(c * n + b + 1) * plane;
                let (mut dg, mut db) = (0.0f32, 0.0f32);
                for ((dh, &xh), &d) in dxhat[j * plane..][..plane]
                    .iter_mut()
                    .zip(&cache.xhat[r.clone()])
                    .zip(&dout.data[r])
                {
                    let du = d * silu_grad(gamma[c] * xh + beta[c]);
                    dg += du * xh;
                    db += du;
                    *dh = du * gamma[c];
                    m1 += *dh;
                    m2 += *dh * xh;
                }
                dgamma[c] += dg;
                dbeta[c] += db;
            }
            m1 /= count;
            m2 /= count;
            let inv = cache.inv_std[b * gn.groups + grp];
            for (j, c) in (grp * cpg..(grp + 1) * cpg).enumerate() {
                let r = (c * n + b) * plane..(c * n + b + 1) * plane;
                for ((o, &dh), &xh) in dx.data[r.clone()]
                    .iter_mut()
                    .zip(&dxhat[j * plane..][..plane])
                    .zip(&cache.xhat[r])
                {
                    *o = inv * (dh - m1 - xh * m2);
                }
            }
        }
    }
    for (a, d) in g[gn.gamma.range()].iter_mut().zip(dgamma) {
        *a += d;
    }
    for (a, d) in g[gn.beta.range()].iter_mut().zip(dbeta) {
        *a += d;
    }
    dx
}

/// Dense layer on a batch of row vectors (`n x fin` to `n x fout`).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, fin: usize, fout: usize) -> Self {
        Self {
            fin,
            fout,
            weight: layout.alloc(format!("{name}.weight"), fin * fout, fin),
            bias: layout.alloc(format!("{name}.bias"), fout, fin),
        }
    }

    pub fn forward(&self, p: &[f32], x: &[f32], n: usize) -> Vec<f32> {
        let w = &p[self.weight.range()];
        let bias = &p[self.bias.range()];
        let mut out = vec![0.0f32; n * self.fout];
        for b in 0..n {
            let xi = &x[b * self.fin..][..self.fin];
            for (o, (wr, bb)) in out[b * self.fout..][..self.fout]
                .iter_mut()
                .zip(w.chunks_exact(self.fin).zip(bias))
            {
                *o = bb + wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        out
    }

    pub fn backward(&self, p: &[f32], g: &mut [f32], x: &[f32], dout: &[f32], n: usize) -> Vec<f32> {
        let w = &p[self.weight.range()];
        let mut dx = vec![0.0f32; n * self.fin];
        for b in 0..n {
            let xi = &x[b * self.fin..][..self.fin];
            let di = &dout[b * self.fout..][..self.fout];
            let dxi = &mut dx[b * self.fin..][..self.fin];
            for (o, &d) in di.iter().enumerate() {
                let gw = &mut g[self.weight.offset + o * self.fin..][..self.fin];
                for (gv, &xv) in gw.iter_mut().zip(xi) {
                    *gv += d * xv;
                }
                g[self.bias.offset + o] += d;
                for (dv, &wv) in dxi.iter_mut().zip(&w[o * self.fin..][..self.fin]) {
                    *dv += d * wv;
                }
            }
        }
        dx
    }
}

pub(crate) fn silu_vec(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&u| silu(u)).collect()
}

pub(crate) fn silu_vec_backward(pre: &[f32], dout: &[f32]) -> Vec<f32> {
    pre.iter().zip(dout).map(|(&u, &d)| d * silu_grad(u)).collect()
}

/// Adds `bias[b * c + ch]` to every pixel of channel `ch`, sample `b`.
pub(crate) fn add_channel_bias(x: &mut Act, bias: &[f32]) {
    let (n, plane) = (x.n, x.plane());
    for ch in 0..x.c {
        for b in 0..n {
            let v = bias[b * x.c + ch];
            for o in &mut x.data[(ch * n + b) * plane..][..plane] {
                *o += v;
            }
        }
    }
}

pub(crate) fn channel_bias_backward(dout: &Act) -> Vec<f32> {
    let (n, plane) = (dout.n, dout.plane());
    let mut d = vec![0.0f32; n * dout.c];
    for ch in 0..dout.c {
        for b in 0..n {
            d[b * dout.c + ch] = dout.data[(ch * n + b) * plane..][..plane].iter().sum();
        }
    }
    d
}

pub(crate) fn avg_pool2(x: &Act) -> Act {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.n, h2, w2);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(out.data.chunks_exact_mut(h2 * w2)) {
        for y in 0..h2 {
            let r0 = &src[2 * y * x.w..][..x.w];
            let r1 = &src[(2 * y + 1) * x.w..][..x.w];
            for (xo, d) in dst[y * w2..][..w2].iter_mut().enumerate() {
                *d = 0.25 * (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dout: &Act) -> Act {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let mut dx = Act::zeros(dout.c, dout.n, h, w);
    for (src, dst) in dout.data.chunks_exact(dout.plane()).zip(dx.data.chunks_exact_mut(h * w)) {
        for y in 0..h {
            let s = &src[(y / 2) * dout.w..][..dout.w];
            for (x, d) in dst[y * w..][..w].iter_mut().enumerate() {
                *d = 0.25 * s[x / 2];
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.n, h, w);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(out.data.chunks_exact_mut(h * w)) {
        for y in 0..h {
            let s = &src[(y / 2) * x.w..][..x.w];
            for (xo, d) in dst[y * w..][..w].iter_mut().enumerate() {
                *d = s[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &Act) -> Act {
    let (h2, w2) = (dout.h / 2, dout.w / 2);
    let mut dx = Act::zeros(dout.c, dout.n, h2, w2);
    for (src, dst) in dout.data.chunks_exact(dout.plane()).zip(dx.data.chunks_exact_mut(h2 * w2)) {
        for y in 0..dout.h {
            let s = &src[y * dout.w..][..dout.w];
            let d = &mut dst[(y / 2) * w2..][..w2];
            for (x, &v) in s.iter().enumerate() {
                d[x / 2] += v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, n: usize, h: usize, w: usize) -> Act {
        let mut a = Act::zeros(c, n, h, w);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f32 / 50.0) - 1.0;
        }
        a
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let mut layout = ParamLayout::default();
        let conv = Conv::new(&mut layout, "c", 2, 3, 3);
        let p: Vec<f32> = (0..layout.total).map(|i| ((i * 13 % 17) as f32 - 8.0) / 10.0).collect();
        let x = ramp(2, 2, 5, 6);
        let (y, _) = conv.forward(&p, &x);
        let w = &p[conv.weight.range()];
        for co in 0..3 {
            for b in 0..2 {
                for yy in 0..5isize {
                    for xx in 0..6isize {
                        let mut acc = p[conv.bias.offset + co];
                        for ci in 0..2 {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if !(0..5).contains(&sy) || !(0..6).contains(&sx) {
                                        continue;
                                    }
                                    let xv = x.data[((ci * 2 + b) * 5 + sy as usize) * 6 + sx as usize];
                                    acc += w[co * 18 + ci * 9 + (ky * 3 + kx) as usize] * xv;
                                }
                            }
                        }
                        let got = y.data[((co * 2 + b) * 5 + yy as usize) * 6 + xx as usize];
                        assert!((got - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <pool(x), y> = <x, pool^T(y)>, same for upsampling.
        let x = ramp(2, 1, 4, 4);
        let y = ramp(2, 1, 2, 2);
        let lhs: f32 = avg_pool2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&avg_pool2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
        let lhs: f32 = upsample2(&y).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = y.data.iter().zip(&upsample2_backward(&x).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = ramp(2, 2, 3, 3);
        let b = ramp(3, 2, 3, 3);
        let (a2, b2) = Act::concat(&a, &b).split(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
