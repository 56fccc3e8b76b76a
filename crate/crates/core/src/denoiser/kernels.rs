//! Hot loops of the network: direct 3x3 convolution and its gradients,
//! plus a vectorizable sigmoid.
//!
//! Every kernel is written once as an `#[inline(always)]` body and
//! instantiated twice: a baseline build and an AVX2 build selected at
//! runtime. Both builds perform the same sequence of IEEE operations
//! (separate multiply and add, no contraction), so results are identical
//! whichever path runs.

/// Output lanes held in registers per output channel.
const LANES: usize = 16;
/// Output channels computed together.
const CO_BLOCK: usize = 4;

macro_rules! dispatch {
    ($(#[$m:meta])* $vis:vis fn $name:ident => $body:ident ( $($arg:ident : $ty:ty),* $(,)? )) => {
        dispatch! { $(#[$m])* $vis fn $name => $body ( $($arg: $ty),* ) -> () }
    };
    ($(#[$m:meta])* $vis:vis fn $name:ident => $body:ident ( $($arg:ident : $ty:ty),* $(,)? ) -> $ret:ty) => {
        $(#[$m])*
        #[allow(clippy::unused_unit)]
        $vis fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    #[target_feature(enable = "avx2")]
                    unsafe fn wide($($arg: $ty),*) -> $ret {
                        $body($($arg),*)
                    }
                    // SAFETY: the CPU supports AVX2, checked above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

pub(crate) use dispatch;

/// Geometry of a batch of zero-bordered planes: channel `c`, sample `b`
/// occupies `(h + 2) x (w + 2)` floats starting at `(c * n + b) * padded_plane`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Padded {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Padded {
    #[inline]
    pub fn row(&self) -> usize {
        self.w + 2
    }

    #[inline]
    pub fn plane(&self) -> usize {
        (self.h + 2) * (self.w + 2)
    }

    /// Buffer length including read slack for the last lane block.
    pub fn len(&self) -> usize {
        self.c * self.n * self.plane() + LANES
    }
}

/// Copies channel-major planes into a zero-bordered buffer.
pub(crate) fn pad(src: &[f32], geo: Padded) -> Vec<f32> {
    let mut out = vec![0.0f32; geo.len()];
    let (h, w) = (geo.h, geo.w);
    for (i, plane) in src.chunks_exact(h * w).enumerate() {
        let base = i * geo.plane();
        for y in 0..h {
            let dst = base + (y + 1) * geo.row() + 1;
            out[dst..dst + w].copy_from_slice(&plane[y * w..][..w]);
        }
    }
    out
}

/// `out[co] = bias[co] + sum_ci sum_taps weight[co][ci][tap] * x[ci](shifted)`
/// for `cout` outputs; `weight` is `cout x (cin * 9)` with `cout` a multiple of
/// `CO_BLOCK`. `out` receives `cout` unpadded channel-major planes.
pub(crate) fn conv3_forward(xp: &[f32], geo: Padded, weight: &[f32], bias: &[f32], cout: usize, out: &mut [f32]) {
    let (cin, n, h, w) = (geo.c, geo.n, geo.h, geo.w);
    assert_eq!(cout % CO_BLOCK, 0);
    assert!(xp.len() >= geo.len() && weight.len() >= cout * cin * 9 && bias.len() >= cout);
    assert!(out.len() >= cout * n * h * w);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 is available and the buffer sizes were checked above.
            return unsafe { avx2::conv3_forward(xp, geo, weight, bias, cout, out) };
        }
    }
    conv3_forward_body(xp, geo, weight, bias, cout, out)
}

fn conv3_forward_body(xp: &[f32], geo: Padded, weight: &[f32], bias: &[f32], cout: usize, out: &mut [f32]) {
    let Padded { c: cin, n, h, w } = geo;
    let (row, pplane, plane, taps) = (geo.row(), geo.plane(), h * w, cin * 9);
    for co in (0..cout).step_by(CO_BLOCK) {
        for b in 0..n {
            for y in 0..h {
                for x0 in (0..w).step_by(LANES) {
                    let mut acc: [[f32; LANES]; CO_BLOCK] = std::array::from_fn(|j| [bias[co + j]; LANES]);
                    for ci in 0..cin {
                        let base = (ci * n + b) * pplane + y * row + x0;
                        for t in 0..9 {
                            let src = &xp[base + (t / 3) * row + t % 3..][..LANES];
                            for (j, a) in acc.iter_mut().enumerate() {
                                let wj = weight[(co + j) * taps + ci * 9 + t];
                                for l in 0..LANES {
                                    a[l] += wj * src[l];
                                }
                            }
                        }
                    }
                    let valid = LANES.min(w - x0);
                    for (j, a) in acc.iter().enumerate() {
                        let o = ((co + j) * n + b) * plane + y * w + x0;
                        out[o..o + valid].copy_from_slice(&a[..valid]);
                    }
                }
            }
        }
    }
}

/// Accumulates `dw[co][ci][tap] += sum_pixels dout[co] * x[ci](shifted)`.
pub(crate) fn conv3_weight_grad(xp: &[f32], geo: Padded, dout: &[f32], cout: usize, dw: &mut [f32]) {
    let (cin, n, h, w) = (geo.c, geo.n, geo.h, geo.w);
    assert!(xp.len() >= geo.len() && dout.len() >= cout * n * h * w && dw.len() >= cout * cin * 9);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 is available and the buffer sizes were checked above.
            return unsafe { avx2::conv3_weight_grad(xp, geo, dout, cout, dw) };
        }
    }
    conv3_weight_grad_body(xp, geo, dout, cout, dw)
}

const GRAD_LANES: usize = 8;

fn conv3_weight_grad_body(xp: &[f32], geo: Padded, dout: &[f32], cout: usize, dw: &mut [f32]) {
    const V: usize = GRAD_LANES;
    let Padded { c: cin, n, h, w } = geo;
    let (row, pplane, plane, taps) = (geo.row(), geo.plane(), h * w, cin * 9);
    let full = w / V * V;
    for co in 0..cout {
        for ci in 0..cin {
            let mut acc = [[0.0f32; V]; 9];
            let mut tail = [0.0f32; 9];
            for b in 0..n {
                let d_plane = &dout[(co * n + b) * plane..][..plane];
                let x_plane = &xp[(ci * n + b) * pplane..][..pplane];
                for y in 0..h {
                    let d_row = &d_plane[y * w..][..w];
                    for x0 in (0..full).step_by(V) {
                        for (t, a) in acc.iter_mut().enumerate() {
                            let s = &x_plane[(y + t / 3) * row + x0 + t % 3..][..V];
                            for l in 0..V {
                                a[l] += d_row[x0 + l] * s[l];
                            }
                        }
                    }
                    weight_grad_tail(d_row, x_plane, row, y, full, &mut tail);
                }
            }
            finish_weight_grad(&acc, &tail, &mut dw[co * taps + ci * 9..][..9]);
        }
    }
}

#[inline]
fn weight_grad_tail(d_row: &[f32], x_plane: &[f32], row: usize, y: usize, from: usize, tail: &mut [f32; 9]) {
    for (x, &d) in d_row.iter().enumerate().skip(from) {
        for (t, v) in tail.iter_mut().enumerate() {
            *v += d * x_plane[(y + t / 3) * row + x + t % 3];
        }
    }
}

#[inline]
fn finish_weight_grad(acc: &[[f32; GRAD_LANES]; 9], tail: &[f32; 9], g: &mut [f32]) {
    for t in 0..9 {
        g[t] += acc[t].iter().sum::<f32>() + tail[t];
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{finish_weight_grad, weight_grad_tail, Padded, CO_BLOCK, GRAD_LANES, LANES};

    /// # Safety
    /// Requires AVX2 and the buffer sizes asserted by the safe wrapper.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn conv3_forward(
        xp: &[f32],
        geo: Padded,
        weight: &[f32],
        bias: &[f32],
        cout: usize,
        out: &mut [f32],
    ) {
        let Padded { c: cin, n, h, w } = geo;
        let (row, pplane, plane, taps) = (geo.row(), geo.plane(), h * w, cin * 9);
        let xptr = xp.as_ptr();
        for co in (0..cout).step_by(CO_BLOCK) {
            let wq: Vec<[f32; CO_BLOCK]> = (0..taps)
                .map(|t| std::array::from_fn(|j| weight[(co + j) * taps + t]))
                .collect();
            for b in 0..n {
                for y in 0..h {
                    for x0 in (0..w).step_by(LANES) {
                        let bv: [__m256; CO_BLOCK] = std::array::from_fn(|j| _mm256_set1_ps(bias[co + j]));
                        let (mut a00, mut a01, mut a10, mut a11) = (bv[0], bv[0], bv[1], bv[1]);
                        let (mut a20, mut a21, mut a30, mut a31) = (bv[2], bv[2], bv[3], bv[3]);
                        for ci in 0..cin {
                            // The largest offset read is cin*n*pplane - 1 + LANES,
                            // inside the slack of a padded buffer.
                            let base = xptr.add((ci * n + b) * pplane + y * row + x0);
                            let wt = wq.as_ptr().add(ci * 9);
                            macro_rules! tap {
                                ($t:expr, $off:expr) => {{
                                    let p = base.add($off);
                                    let s0 = _mm256_loadu_ps(p);
                                    let s1 = _mm256_loadu_ps(p.add(8));
                                    let wv = &*wt.add($t);
                                    let k = _mm256_set1_ps(wv[0]);
                                    a00 = _mm256_add_ps(a00, _mm256_mul_ps(k, s0));
                                    a01 = _mm256_add_ps(a01, _mm256_mul_ps(k, s1));
                                    let k = _mm256_set1_ps(wv[1]);
                                    a10 = _mm256_add_ps(a10, _mm256_mul_ps(k, s0));
                                    a11 = _mm256_add_ps(a11, _mm256_mul_ps(k, s1));
                                    let k = _mm256_set1_ps(wv[2]);
                                    a20 = _mm256_add_ps(a20, _mm256_mul_ps(k, s0));
                                    a21 = _mm256_add_ps(a21, _mm256_mul_ps(k, s1));
                                    let k = _mm256_set1_ps(wv[3]);
                                    a30 = _mm256_add_ps(a30, _mm256_mul_ps(k, s0));
                                    a31 = _mm256_add_ps(a31, _mm256_mul_ps(k, s1));
                                }};
                            }
                            tap!(0, 0);
                            tap!(1, 1);
                            tap!(2, 2);
                            tap!(3, row);
                            tap!(4, row + 1);
                            tap!(5, row + 2);
                            tap!(6, 2 * row);
                            tap!(7, 2 * row + 1);
                            tap!(8, 2 * row + 2);
                        }
                        let acc = [[a00, a01], [a10, a11], [a20, a21], [a30, a31]];
                        let valid = LANES.min(w - x0);
                        for (j, a) in acc.iter().enumerate() {
                            let o = ((co + j) * n + b) * plane + y * w + x0;
                            if valid == LANES {
                                let q = out.as_mut_ptr().add(o);
                                _mm256_storeu_ps(q, a[0]);
                                _mm256_storeu_ps(q.add(8), a[1]);
                            } else {
                                let mut tmp = [0.0f32; LANES];
                                _mm256_storeu_ps(tmp.as_mut_ptr(), a[0]);
                                _mm256_storeu_ps(tmp.as_mut_ptr().add(8), a[1]);
                                out[o..o + valid].copy_from_slice(&tmp[..valid]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// # Safety
    /// Requires AVX2 and the buffer sizes asserted by the safe wrapper.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn conv3_weight_grad(xp: &[f32], geo: Padded, dout: &[f32], cout: usize, dw: &mut [f32]) {
        const V: usize = GRAD_LANES;
        let Padded { c: cin, n, h, w } = geo;
        let (row, pplane, plane, taps) = (geo.row(), geo.plane(), h * w, cin * 9);
        let full = w / V * V;
        for co in 0..cout {
            for ci in 0..cin {
                let z = _mm256_setzero_ps();
                let (mut a0, mut a1, mut a2, mut a3, mut a4) = (z, z, z, z, z);
                let (mut a5, mut a6, mut a7, mut a8) = (z, z, z, z);
                let mut tail = [0.0f32; 9];
                for b in 0..n {
                    let d_plane = &dout[(co * n + b) * plane..][..plane];
                    let x_plane = &xp[(ci * n + b) * pplane..][..pplane];
                    for y in 0..h {
                        let d_row = &d_plane[y * w..][..w];
                        let dptr = d_row.as_ptr();
                        // Offsets stay below (h + 1) * row + w + 1 - V < pplane.
                        let r0 = x_plane.as_ptr().add(y * row);
                        let r1 = r0.add(row);
                        let r2 = r1.add(row);
                        let mut x0 = 0;
                        while x0 < full {
                            let d = _mm256_loadu_ps(dptr.add(x0));
                            macro_rules! tap {
                                ($a:ident, $r:ident, $k:expr) => {
                                    $a = _mm256_add_ps($a, _mm256_mul_ps(d, _mm256_loadu_ps($r.add(x0 + $k))));
                                };
                            }
                            tap!(a0, r0, 0);
                            tap!(a1, r0, 1);
                            tap!(a2, r0, 2);
                            tap!(a3, r1, 0);
                            tap!(a4, r1, 1);
                            tap!(a5, r1, 2);
                            tap!(a6, r2, 0);
                            tap!(a7, r2, 1);
                            tap!(a8, r2, 2);
                            x0 += V;
                        }
                        weight_grad_tail(d_row, x_plane, row, y, full, &mut tail);
                    }
                }
                let acc = [a0, a1, a2, a3, a4, a5, a6, a7, a8];
                let mut lanes = [[0.0f32; V]; 9];
                for (l, a) in lanes.iter_mut().zip(&acc) {
                    _mm256_storeu_ps(l.as_mut_ptr(), *a);
                }
                finish_weight_grad(&lanes, &tail, &mut dw[co * taps + ci * 9..][..9]);
            }
        }
    }
}

/// Weights of the adjoint convolution: input and output channels swapped
/// and taps flipped, padded to a multiple of `CO_BLOCK` outputs.
pub(crate) fn adjoint_weights(weight: &[f32], cin: usize, cout: usize) -> (Vec<f32>, usize) {
    let cin_blocked = cin.div_ceil(CO_BLOCK) * CO_BLOCK;
    let taps_adj = cout * 9;
    let mut out = vec![0.0f32; cin_blocked * taps_adj];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..9 {
                out[ci * taps_adj + co * 9 + (8 - t)] = weight[co * cin * 9 + ci * 9 + t];
            }
        }
    }
    (out, cin_blocked)
}

/// Pads the output-channel dimension of a `cout x taps` matrix to a
/// multiple of `CO_BLOCK` (zero rows, zero bias).
pub(crate) fn blocked_weights(weight: &[f32], bias: &[f32], cout: usize, taps: usize) -> (Vec<f32>, Vec<f32>, usize) {
    let blocked = cout.div_ceil(CO_BLOCK) * CO_BLOCK;
    let mut w = weight[..cout * taps].to_vec();
    w.resize(blocked * taps, 0.0);
    let mut b = bias[..cout].to_vec();
    b.resize(blocked, 0.0);
    (w, b, blocked)
}

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;

/// `exp(x)` to about 2 ulp using a degree-6 polynomial on the reduced
/// argument; vectorizes because it avoids libm calls.
#[inline(always)]
pub(crate) fn exp_approx(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let k = (x * LOG2E + 0.5).floor();
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits(((k as i32 + 127) as u32) << 23);
    p * scale
}

#[inline(always)]
pub(crate) fn sigmoid(u: f32) -> f32 {
    1.0 / (1.0 + exp_approx(-u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_approx_is_accurate() {
        let mut worst = 0.0f64;
        let mut x = -80.0f32;
        while x < 80.0 {
            let e = (x as f64).exp();
            let rel = ((exp_approx(x) as f64 - e) / e).abs();
            worst = worst.max(rel);
            x += 0.013;
        }
        assert!(worst < 1e-6, "{worst}");
        assert!(sigmoid(-1000.0) < 1e-30);
        assert!(sigmoid(1000.0) > 0.999_999);
    }

    #[test]
    fn weight_grad_matches_naive() {
        let geo = Padded { c: 2, n: 2, h: 5, w: 11 };
        let plane = 55;
        let x: Vec<f32> = (0..2 * 2 * plane).map(|i| ((i * 7 % 13) as f32) / 13.0 - 0.5).collect();
        let d: Vec<f32> = (0..3 * 2 * plane).map(|i| ((i * 5 % 11) as f32) / 11.0 - 0.5).collect();
        let xp = pad(&x, geo);
        let mut dw = vec![0.0f32; 3 * 18];
        conv3_weight_grad(&xp, geo, &d, 3, &mut dw);
        for co in 0..3 {
            for ci in 0..2 {
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let mut s = 0.0f64;
                        for b in 0..2 {
                            for y in 0..5i64 {
                                for xx in 0..11i64 {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if !(0..5).contains(&sy) || !(0..11).contains(&sx) {
                                        continue;
                                    }
                                    s += d[((co * 2 + b) * plane) + (y * 11 + xx) as usize] as f64
                                        * x[((ci * 2 + b) * plane) + (sy * 11 + sx) as usize] as f64;
                                }
                            }
                        }
                        let got = dw[co * 18 + ci * 9 + (ky * 3 + kx) as usize] as f64;
                        assert!((got - s).abs() < 1e-4, "{got} vs {s}");
                    }
                }
            }
        }
    }
}
