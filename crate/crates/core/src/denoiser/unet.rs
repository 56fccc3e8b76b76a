//! Three-level time-conditioned U-Net noise predictor.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_bias_backward, silu_vec,
    silu_vec_backward, upsample2, upsample2_backward, Act, Conv, GroupNormSilu, Linear,
    NormCache, ParamLayout,
};
use crate::error::{Error, Result};
use crate::sampler::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel widths of the three resolution levels.
    pub widths: [usize; 3],
    /// Group-norm groups; must divide every width.
    pub groups: usize,
    /// Number of sinusoidal timestep features (even).
    pub time_features: usize,
    /// Width of the learned timestep embedding.
    pub embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32],
            groups: 4,
            time_features: 32,
            embed_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0 || w % self.groups.max(1) != 0) || self.groups == 0 {
            return Err(Error::invalid(format!(
                "widths {:?} must be positive multiples of groups {}",
                self.widths, self.groups
            )));
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) || self.embed_dim == 0 {
            return Err(Error::invalid("time_features must be even and positive, embed_dim positive"));
        }
        Ok(())
    }
}

/// conv - norm/SiLU - (+time) - conv - norm/SiLU
#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    norm1: GroupNormSilu,
    time: Linear,
    conv2: Conv,
    norm2: GroupNormSilu,
}

struct BlockCache {
    input: Act,
    pad1: Vec<f32>,
    norm1: NormCache,
    mid: Act,
    pad2: Vec<f32>,
    norm2: NormCache,
}

impl Block {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> Self {
        Self {
            conv1: Conv::new(layout, &format!("{name}.conv1"), cin, cout, 3),
            norm1: GroupNormSilu::new(layout, &format!("{name}.norm1"), cout, cfg.groups),
            time: Linear::new(layout, &format!("{name}.time"), cfg.embed_dim, cout),
            conv2: Conv::new(layout, &format!("{name}.conv2"), cout, cout, 3),
            norm2: GroupNormSilu::new(layout, &format!("{name}.norm2"), cout, cfg.groups),
        }
    }

    fn forward(&self, p: &[f32], input: Act, temb: &[f32]) -> (Act, BlockCache) {
        let (a1, pad1) = self.conv1.forward(p, &input);
        let (mut mid, norm1) = self.norm1.forward(p, &a1);
        drop(a1);
        let shift = self.time.forward(p, temb, input.n);
        add_channel_bias(&mut mid, &shift);
        let (a2, pad2) = self.conv2.forward(p, &mid);
        let (out, norm2) = self.norm2.forward(p, &a2);
        let cache = BlockCache {
            input,
            pad1,
            norm1,
            mid,
            pad2,
            norm2,
        };
        (out, cache)
    }

    /// Returns the input gradient (if requested) and the time-embedding gradient.
    fn backward(
        &self,
        p: &[f32],
        g: &mut [f32],
        cache: BlockCache,
        dout: &Act,
        temb: &[f32],
        need_dx: bool,
    ) -> (Option<Act>, Vec<f32>) {
        let da2 = self.norm2.backward(p, g, &cache.norm2, dout);
        let dmid = self
            .conv2
            .backward(p, g, &cache.mid, &cache.pad2, &da2, true)
            .expect("input gradient requested");
        let dshift = channel_bias_backward(&dmid);
        let dtemb = self.time.backward(p, g, temb, &dshift, dout.n);
        let da1 = self.norm1.backward(p, g, &cache.norm1, &dmid);
        let dx = self.conv1.backward(p, g, &cache.input, &cache.pad1, &da1, need_dx);
        (dx, dtemb)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    time_mlp: Linear,
    enc1: Block,
    enc2: Block,
    mid: Block,
    dec2: Block,
    dec1: Block,
    out: Conv,
    layout: ParamLayout,
}

impl Arch {
    fn new(cfg: &UNetConfig) -> Self {
        let [w0, w1, w2] = cfg.widths;
        let mut l = ParamLayout::default();
        let time_mlp = Linear::new(&mut l, "time_mlp", cfg.time_features, cfg.embed_dim);
        let enc1 = Block::new(&mut l, "enc1", 1, w0, cfg);
        let enc2 = Block::new(&mut l, "enc2", w0, w1, cfg);
        let mid = Block::new(&mut l, "mid", w1, w2, cfg);
        let dec2 = Block::new(&mut l, "dec2", w2 + w1, w1, cfg);
        let dec1 = Block::new(&mut l, "dec1", w1 + w0, w0, cfg);
        let out = Conv::new(&mut l, "out", w0, 1, 1);
        Self {
            time_mlp,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            out,
            layout: l,
        }
    }
}

struct ForwardCache {
    time_feats: Vec<f32>,
    time_pre: Vec<f32>,
    temb: Vec<f32>,
    enc1: BlockCache,
    enc2: BlockCache,
    mid: BlockCache,
    dec2: BlockCache,
    dec1: BlockCache,
    dec1_out: Act,
    w0: usize,
    w1: usize,
}

/// Sinusoidal features `[sin(t f_i), cos(t f_i)]`, `f_i = 10000^(-i/half)`.
fn timestep_features(ts: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let (mut s, mut c) = (Vec::with_capacity(half), Vec::with_capacity(half));
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            s.push((t * f).sin() as f32);
            c.push((t * f).cos() as f32);
        }
        out.extend(s);
        out.extend(c);
    }
    out
}

/// The trainable noise-prediction network. Weights are read-only during
/// inference, so one instance can serve many threads.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    arch: Arch,
    params: Vec<f32>,
}

impl UNet {
    /// Fresh network with uniform `+-1/sqrt(fan_in)` weights and unit
    /// group-norm scales.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(&config);
        let mut rng = rng_from_seed(seed);
        let mut params = vec![0.0f32; arch.layout.total];
        for (name, slot, fan_in) in &arch.layout.entries {
            let dst = &mut params[slot.range()];
            if name.ends_with(".gamma") {
                dst.fill(1.0);
            } else if name.ends_with(".beta") {
                dst.fill(0.0);
            } else {
                let bound = 1.0 / (*fan_in as f32).sqrt();
                for v in dst {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Self {
            config,
            arch,
            params,
        })
    }

    pub(crate) fn from_params(config: UNetConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(&config);
        if params.len() != arch.layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                arch.layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            arch,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<f32> {
        &mut self.params
    }

    /// Parameter ranges subject to weight decay (convolution and dense
    /// weights; biases and norm affines are excluded).
    pub(crate) fn decayed_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.arch
            .layout
            .entries
            .iter()
            .filter(|(name, _, _)| name.ends_with(".weight"))
            .map(|(_, slot, _)| slot.range())
            .collect()
    }

    fn forward_cached(&self, x: Act, ts: &[usize]) -> (Act, ForwardCache) {
        let p = &self.params;
        let a = &self.arch;
        let n = x.n;
        let time_feats = timestep_features(ts, self.config.time_features);
        let time_pre = a.time_mlp.forward(p, &time_feats, n);
        let temb = silu_vec(&time_pre);

        let (h1, enc1) = a.enc1.forward(p, x, &temb);
        let (h2, enc2) = a.enc2.forward(p, avg_pool2(&h1), &temb);
        let (h3, mid) = a.mid.forward(p, avg_pool2(&h2), &temb);
        let (g2, dec2) = a.dec2.forward(p, Act::concat(&upsample2(&h3), &h2), &temb);
        let (g1, dec1) = a.dec1.forward(p, Act::concat(&upsample2(&g2), &h1), &temb);
        let (y, _) = a.out.forward(p, &g1);
        let cache = ForwardCache {
            time_feats,
            time_pre,
            temb,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            dec1_out: g1,
            w0: h1.c,
            w1: h2.c,
        };
        (y, cache)
    }

    fn backward(&self, grad: &mut [f32], cache: ForwardCache, dy: &Act) {
        let p = &self.params;
        let a = &self.arch;
        let n = dy.n;
        let ForwardCache {
            time_feats,
            time_pre,
            temb,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            dec1_out,
            w0,
            w1,
        } = cache;
        let mut dtemb = vec![0.0f32; temb.len()];
        let mut acc = |d: Vec<f32>| {
            for (a, b) in dtemb.iter_mut().zip(d) {
                *a += b;
            }
        };

        let dg1 = a.out.backward(p, grad, &dec1_out, &[], dy, true).expect("dx");
        let (dcat1, dt) = a.dec1.backward(p, grad, dec1, &dg1, &temb, true);
        acc(dt);
        let (dup2, dskip1) = dcat1.expect("dx").split(w1);
        let dg2 = upsample2_backward(&dup2);
        let (dcat2, dt) = a.dec2.backward(p, grad, dec2, &dg2, &temb, true);
        acc(dt);
        let (dup3, mut dh2) = dcat2.expect("dx").split(dcat2_first(&a.mid));
        let dh3 = upsample2_backward(&dup3);
        let (dmid_in, dt) = a.mid.backward(p, grad, mid, &dh3, &temb, true);
        acc(dt);
        for (d, v) in dh2.data.iter_mut().zip(avg_pool2_backward(&dmid_in.expect("dx")).data) {
            *d += v;
        }
        let (denc2_in, dt) = a.enc2.backward(p, grad, enc2, &dh2, &temb, true);
        acc(dt);
        let mut dh1 = dskip1;
        debug_assert_eq!(dh1.c, w0);
        for (d, v) in dh1.data.iter_mut().zip(avg_pool2_backward(&denc2_in.expect("dx")).data) {
            *d += v;
        }
        let (_, dt) = a.enc1.backward(p, grad, enc1, &dh1, &temb, false);
        acc(dt);

        let dpre = silu_vec_backward(&time_pre, &dtemb);
        a.time_mlp.backward(p, grad, &time_feats, &dpre, n);
    }

    /// Mean squared error against `target` and its gradient, accumulated
    /// into `grad`. `x` and `target` hold single-channel batches whose sides
    /// are multiples of 4.
    pub(crate) fn loss_and_grad(&self, x: Act, ts: &[usize], target: &Act, grad: &mut [f32]) -> f64 {
        debug_assert_eq!(grad.len(), self.params.len());
        let (y, cache) = self.forward_cached(x, ts);
        let count = y.data.len() as f64;
        let mut loss = 0.0f64;
        let scale = 2.0 / count as f32;
        let mut dy = Act::zeros(1, y.n, y.h, y.w);
        for ((d, &yv), &tv) in dy.data.iter_mut().zip(&y.data).zip(&target.data) {
            let e = yv - tv;
            loss += (e as f64) * (e as f64);
            *d = scale * e;
        }
        self.backward(grad, cache, &dy);
        loss / count
    }

    /// Predicts standardized noise for a batch of equally sized fields.
    /// Sides that are not multiples of 4 are mirror-padded and cropped back.
    pub fn predict_batch(&self, inputs: &[&Array2<f64>], ts: &[usize]) -> Result<Vec<Array2<f64>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        if inputs.len() != ts.len() {
            return Err(Error::invalid("one timestep per input is required"));
        }
        let (h, w) = inputs[0].dim();
        if let Some(bad) = inputs.iter().find(|a| a.dim() != (h, w)) {
            return Err(Error::ShapeMismatch {
                left: (h, w),
                right: bad.dim(),
            });
        }
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let n = inputs.len();
        let mut x = Act::zeros(1, n, ph, pw);
        for (b, img) in inputs.iter().enumerate() {
            let dst = &mut x.data[b * ph * pw..][..ph * pw];
            for y in 0..ph {
                let sy = reflect(y, h);
                for xx in 0..pw {
                    dst[y * pw + xx] = img[[sy, reflect(xx, w)]] as f32;
                }
            }
        }
        let (y, _) = self.forward_cached(x, ts);
        Ok((0..n)
            .map(|b| {
                let src = &y.data[b * ph * pw..][..ph * pw];
                Array2::from_shape_fn((h, w), |(r, c)| src[r * pw + c] as f64)
            })
            .collect())
    }
}

fn dcat2_first(mid: &Block) -> usize {
    mid.conv2.cout
}

/// Mirror index for padding past the far edge (`i < 2 * len - 1`).
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}
