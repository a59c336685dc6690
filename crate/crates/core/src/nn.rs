//! Compact convolutional encoder-decoder with feature-wise modulation and
//! hand-written reverse-mode gradients.
//!
//! Activations are stored channel-major, `[C][B][H*W]`, so every 3x3
//! convolution over a batch is a single GEMM against an im2col buffer.
//! Callers see sample-major tensors, `[B][C][H*W]`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Channels of the noised input and of the predicted noise.
    pub data_channels: usize,
    /// Extra conditioning channels concatenated to the input.
    pub cond_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel count at full resolution; doubles at each downsampling stage.
    pub base_width: usize,
    /// Number of stride-2 downsampling stages.
    pub levels: usize,
    /// Semantic classes; the embedding table has one extra row for the null label.
    pub classes: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
}

impl NetConfig {
    pub fn validate(&self) -> CoreResult<()> {
        let bad = |m: &str| Err(CoreError::InvalidRange(m.to_string()));
        if self.data_channels == 0 || self.base_width == 0 || self.classes == 0 {
            return bad("channel and class counts must be positive");
        }
        if self.levels == 0 || self.levels > 4 {
            return bad("model.depth must be in 1..=4");
        }
        let div = 1usize << self.levels;
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(div)
            || !self.width.is_multiple_of(div)
        {
            return bad("frame size must be divisible by 2^depth");
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) || self.emb_dim == 0 {
            return bad("embedding sizes must be positive, time_dim even");
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Index of the null semantic label in the embedding table.
    pub fn null_class(&self) -> usize {
        self.classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named, contiguous slices of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, len: usize) -> usize {
        let offset = self.total;
        self.segments.push(Segment { name, offset, len });
        self.total += len;
        offset
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone)]
struct Block {
    cin: usize,
    cout: usize,
    stride: usize,
    upsample: bool,
    skip: Option<usize>,
    modulated: bool,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    w: usize,
    b: usize,
    fw: usize,
    fb: usize,
}

impl Block {
    fn k(&self) -> usize {
        self.cin * 9
    }
    fn p_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    layout: ParamLayout,
    blocks: Vec<Block>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    table: usize,
}

/// One batch of network inputs, sample-major.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a, R> {
    /// `[B][data_channels][H*W]`
    pub x: &'a [R],
    /// `[B][cond_channels][H*W]`
    pub cond: &'a [R],
    pub t: &'a [usize],
    /// Class index per sample; `classes` selects the null row.
    pub class: &'a [usize],
}

impl<R> NetInput<'_, R> {
    pub fn batch(&self) -> usize {
        self.t.len()
    }
}

struct BlockCache<R> {
    cols: Vec<R>,
    pre: Vec<R>,
    gb: Vec<R>,
    z: Vec<R>,
}

/// Intermediate values retained by [`Network::forward_cached`].
pub struct Cache<R> {
    batch: usize,
    sin: Vec<R>,
    fc1: Vec<R>,
    fc1_act: Vec<R>,
    e: Vec<R>,
    s: Vec<R>,
    class: Vec<usize>,
    blocks: Vec<BlockCache<R>>,
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

#[inline]
fn silu<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<R: Real>(x: R) -> R {
    let s = sigmoid(x);
    s * (R::one() + x * (R::one() - s))
}

/// `y[b][o] = sum_i w[o][i] x[b][i] + bias[o]`
fn linear<R: Real>(x: &[R], w: &[R], bias: &[R], batch: usize, din: usize, dout: usize) -> Vec<R> {
    let mut y = Vec::with_capacity(batch * dout);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    R::gemm(
        batch,
        din,
        dout,
        R::one(),
        x,
        din as isize,
        1,
        w,
        1,
        din as isize,
        R::one(),
        &mut y,
        dout as isize,
        1,
    );
    y
}

/// Accumulates weight/bias gradients of [`linear`] and returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<R: Real>(
    x: &[R],
    w: &[R],
    dy: &[R],
    dw: &mut [R],
    db: &mut [R],
    batch: usize,
    din: usize,
    dout: usize,
) -> Vec<R> {
    R::gemm(
        dout,
        batch,
        din,
        R::one(),
        dy,
        1,
        dout as isize,
        x,
        din as isize,
        1,
        R::one(),
        dw,
        din as isize,
        1,
    );
    for row in dy.chunks_exact(dout) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![R::zero(); batch * din];
    R::gemm(
        batch,
        dout,
        din,
        R::one(),
        dy,
        dout as isize,
        1,
        w,
        din as isize,
        1,
        R::zero(),
        &mut dx,
        din as isize,
        1,
    );
    dx
}

/// 3x3, zero padding 1. Input `[cin][B][h*w]`, output `[cin*9][B*p_out]`.
fn im2col<R: Real>(x: &[R], blk: &Block, batch: usize) -> Vec<R> {
    let (hi, wi, ho, wo, s) = (blk.h_in, blk.w_in, blk.h_out, blk.w_out, blk.stride);
    let pin = hi * wi;
    let n = batch * ho * wo;
    let mut cols = vec![R::zero(); blk.k() * n];
    for c in 0..blk.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * n..][..n];
                for b in 0..batch {
                    let src = &x[(c * batch + b) * pin..][..pin];
                    let dst = &mut row[b * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * wi..][..wi];
                        let drow = &mut dst[oy * wo..][..wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < wi as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<R: Real>(cols: &[R], blk: &Block, batch: usize) -> Vec<R> {
    let (hi, wi, ho, wo, s) = (blk.h_in, blk.w_in, blk.h_out, blk.w_out, blk.stride);
    let pin = hi * wi;
    let n = batch * ho * wo;
    let mut x = vec![R::zero(); blk.cin * batch * pin];
    for c in 0..blk.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * n..][..n];
                for b in 0..batch {
                    let dst = &mut x[(c * batch + b) * pin..][..pin];
                    let src = &row[b * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < wi as isize {
                                dst[iy as usize * wi + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Nearest-neighbour 2x upsampling of `[C*B][h][w]` planes.
fn upsample2<R: Real>(x: &[R], planes: usize, h: usize, w: usize) -> Vec<R> {
    let mut y = vec![R::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut y[p * 4 * h * w..][..4 * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

fn upsample2_backward<R: Real>(dy: &[R], planes: usize, h: usize, w: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * 4 * h * w..][..4 * h * w];
        let dst = &mut dx[p * h * w..][..h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
            }
        }
    }
    dx
}

fn sinusoidal<R: Real>(t: usize, dim: usize, out: &mut [R]) {
    let half = dim / 2;
    for j in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half as f64);
        let arg = t as f64 * freq;
        out[j] = R::of(libm::sin(arg));
        out[half + j] = R::of(libm::cos(arg));
    }
}

impl Network {
    pub fn new(cfg: NetConfig) -> CoreResult<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let (td, e) = (cfg.time_dim, cfg.emb_dim);
        let fc1_w = layout.push("time.fc1.weight".into(), e * td);
        let fc1_b = layout.push("time.fc1.bias".into(), e);
        let fc2_w = layout.push("time.fc2.weight".into(), e * e);
        let fc2_b = layout.push("time.fc2.bias".into(), e);
        let table = layout.push("class.embedding".into(), (cfg.classes + 1) * e);

        let ch = |l: usize| cfg.base_width << l;
        let mut blocks = Vec::new();
        let mut add = |layout: &mut ParamLayout,
                       name: String,
                       cin: usize,
                       cout: usize,
                       stride: usize,
                       upsample: bool,
                       skip: Option<usize>,
                       modulated: bool,
                       h_in: usize,
                       w_in: usize| {
            let w = layout.push(alloc::format!("{name}.weight"), cout * cin * 9);
            let b = layout.push(alloc::format!("{name}.bias"), cout);
            let (fw, fb) = if modulated {
                (
                    layout.push(alloc::format!("{name}.film.weight"), 2 * cout * e),
                    layout.push(alloc::format!("{name}.film.bias"), 2 * cout),
                )
            } else {
                (0, 0)
            };
            blocks.push(Block {
                cin,
                cout,
                stride,
                upsample,
                skip,
                modulated,
                h_in,
                w_in,
                h_out: h_in / stride,
                w_out: w_in / stride,
                w,
                b,
                fw,
                fb,
            });
            blocks.len() - 1
        };
        let (h, w) = (cfg.height, cfg.width);
        let cin = cfg.data_channels + cfg.cond_channels;
        let mut skips = Vec::new();
        add(
            &mut layout,
            "enc0.conv0".into(),
            cin,
            ch(0),
            1,
            false,
            None,
            true,
            h,
            w,
        );
        skips.push(add(
            &mut layout,
            "enc0.conv1".into(),
            ch(0),
            ch(0),
            1,
            false,
            None,
            true,
            h,
            w,
        ));
        for l in 1..=cfg.levels {
            let (hl, wl) = (h >> (l - 1), w >> (l - 1));
            add(
                &mut layout,
                alloc::format!("enc{l}.down"),
                ch(l - 1),
                ch(l),
                2,
                false,
                None,
                true,
                hl,
                wl,
            );
            let id = add(
                &mut layout,
                alloc::format!("enc{l}.conv"),
                ch(l),
                ch(l),
                1,
                false,
                None,
                true,
                hl / 2,
                wl / 2,
            );
            skips.push(id);
        }
        for l in (0..cfg.levels).rev() {
            let (hl, wl) = (h >> l, w >> l);
            add(
                &mut layout,
                alloc::format!("dec{l}.up"),
                ch(l + 1),
                ch(l),
                1,
                true,
                Some(skips[l]),
                true,
                hl,
                wl,
            );
            add(
                &mut layout,
                alloc::format!("dec{l}.conv"),
                ch(l),
                ch(l),
                1,
                false,
                None,
                true,
                hl,
                wl,
            );
        }
        add(
            &mut layout,
            "out".into(),
            ch(0),
            cfg.data_channels,
            1,
            false,
            None,
            false,
            h,
            w,
        );
        Ok(Network {
            cfg,
            layout,
            blocks,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            table,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Truncated normal (std 0.02, cut at 2 std) for weights and embeddings;
    /// zero biases.
    pub fn init<R: Real>(&self, rng: &mut Rng) -> Vec<R> {
        let mut theta = vec![R::zero(); self.layout.total];
        for seg in &self.layout.segments {
            if seg.name.ends_with(".bias") {
                continue;
            }
            for v in &mut theta[seg.offset..seg.offset + seg.len] {
                *v = R::of(0.02 * rng.truncated_normal());
            }
        }
        theta
    }

    fn check_input<R>(&self, theta: &[R], inp: &NetInput<'_, R>) -> CoreResult<()> {
        let b = inp.batch();
        let p = self.cfg.pixels();
        if theta.len() != self.layout.total {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "parameter vector has {} entries, layout needs {}",
                theta.len(),
                self.layout.total
            )));
        }
        if inp.x.len() != b * self.cfg.data_channels * p
            || inp.cond.len() != b * self.cfg.cond_channels * p
            || inp.class.len() != b
        {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "batch of {b}: x {} cond {} class {}",
                inp.x.len(),
                inp.cond.len(),
                inp.class.len()
            )));
        }
        if let Some(&c) = inp.class.iter().find(|&&c| c > self.cfg.classes) {
            return Err(CoreError::InvalidRange(alloc::format!("class index {c}")));
        }
        Ok(())
    }

    pub fn forward<R: Real>(&self, theta: &[R], inp: &NetInput<'_, R>) -> CoreResult<Vec<R>> {
        self.forward_cached(theta, inp).map(|(y, _)| y)
    }

    pub fn forward_cached<R: Real>(
        &self,
        theta: &[R],
        inp: &NetInput<'_, R>,
    ) -> CoreResult<(Vec<R>, Cache<R>)> {
        self.check_input(theta, inp)?;
        let cfg = &self.cfg;
        let bsz = inp.batch();
        let p = cfg.pixels();
        let (td, e) = (cfg.time_dim, cfg.emb_dim);

        let mut sin = vec![R::zero(); bsz * td];
        for (b, &t) in inp.t.iter().enumerate() {
            sinusoidal(t, td, &mut sin[b * td..(b + 1) * td]);
        }
        let fc1 = linear(
            &sin,
            &theta[self.fc1_w..][..e * td],
            &theta[self.fc1_b..][..e],
            bsz,
            td,
            e,
        );
        let fc1_act: Vec<R> = fc1.iter().map(|&v| silu(v)).collect();
        let mut emb = linear(
            &fc1_act,
            &theta[self.fc2_w..][..e * e],
            &theta[self.fc2_b..][..e],
            bsz,
            e,
            e,
        );
        for (b, &c) in inp.class.iter().enumerate() {
            let row = &theta[self.table + c * e..][..e];
            for (v, &r) in emb[b * e..(b + 1) * e].iter_mut().zip(row) {
                *v += r;
            }
        }
        let s: Vec<R> = emb.iter().map(|&v| silu(v)).collect();

        // Channel-major network input.
        let (dc, cc) = (cfg.data_channels, cfg.cond_channels);
        let cin = dc + cc;
        let mut h = vec![R::zero(); cin * bsz * p];
        for b in 0..bsz {
            for c in 0..dc {
                h[(c * bsz + b) * p..][..p].copy_from_slice(&inp.x[(b * dc + c) * p..][..p]);
            }
            for c in 0..cc {
                h[((dc + c) * bsz + b) * p..][..p]
                    .copy_from_slice(&inp.cond[(b * cc + c) * p..][..p]);
            }
        }

        let mut outs: Vec<Vec<R>> = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let input = if blk.upsample {
                upsample2(&h, blk.cin * bsz, blk.h_in / 2, blk.w_in / 2)
            } else {
                h
            };
            let cols = im2col(&input, blk, bsz);
            let n = bsz * blk.p_out();
            let mut pre = vec![R::zero(); blk.cout * n];
            for (o, bias) in theta[blk.b..blk.b + blk.cout].iter().enumerate() {
                pre[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *bias);
            }
            let k = blk.k();
            R::gemm(
                blk.cout,
                k,
                n,
                R::one(),
                &theta[blk.w..][..blk.cout * k],
                k as isize,
                1,
                &cols,
                n as isize,
                1,
                R::one(),
                &mut pre,
                n as isize,
                1,
            );
            if let Some(src) = blk.skip {
                for (v, &sv) in pre.iter_mut().zip(&outs[src]) {
                    *v += sv;
                }
            }
            let (out, gb, z) = if blk.modulated {
                let gb = linear(
                    &s,
                    &theta[blk.fw..][..2 * blk.cout * e],
                    &theta[blk.fb..][..2 * blk.cout],
                    bsz,
                    e,
                    2 * blk.cout,
                );
                let po = blk.p_out();
                let mut z = pre.clone();
                for c in 0..blk.cout {
                    for b in 0..bsz {
                        let g = R::one() + gb[b * 2 * blk.cout + c];
                        let be = gb[b * 2 * blk.cout + blk.cout + c];
                        for v in &mut z[(c * bsz + b) * po..][..po] {
                            *v = *v * g + be;
                        }
                    }
                }
                let out: Vec<R> = z.iter().map(|&v| silu(v)).collect();
                (out, gb, z)
            } else {
                (pre.clone(), Vec::new(), Vec::new())
            };
            caches.push(BlockCache { cols, pre, gb, z });
            h = out.clone();
            outs.push(out);
        }

        // Back to sample-major.
        let mut y = vec![R::zero(); bsz * dc * p];
        for b in 0..bsz {
            for c in 0..dc {
                y[(b * dc + c) * p..][..p].copy_from_slice(&h[(c * bsz + b) * p..][..p]);
            }
        }
        Ok((
            y,
            Cache {
                batch: bsz,
                sin,
                fc1,
                fc1_act,
                e: emb,
                s,
                class: inp.class.to_vec(),
                blocks: caches,
            },
        ))
    }

    /// Accumulates `d<dy, f(theta)>/d theta` into `grad`.
    pub fn backward<R: Real>(&self, theta: &[R], cache: &Cache<R>, dy: &[R], grad: &mut [R]) {
        let cfg = &self.cfg;
        let bsz = cache.batch;
        let p = cfg.pixels();
        let dc = cfg.data_channels;
        let (td, e) = (cfg.time_dim, cfg.emb_dim);
        assert_eq!(dy.len(), bsz * dc * p);
        assert_eq!(grad.len(), self.layout.total);

        let nb = self.blocks.len();
        let mut acc: Vec<Option<Vec<R>>> = (0..nb).map(|_| None).collect();
        let mut d_last = vec![R::zero(); dc * bsz * p];
        for b in 0..bsz {
            for c in 0..dc {
                d_last[(c * bsz + b) * p..][..p].copy_from_slice(&dy[(b * dc + c) * p..][..p]);
            }
        }
        acc[nb - 1] = Some(d_last);
        let mut ds = vec![R::zero(); bsz * e];

        for i in (0..nb).rev() {
            let blk = &self.blocks[i];
            let bc = &cache.blocks[i];
            let po = blk.p_out();
            let n = bsz * po;
            let mut d = acc[i].take().expect("gradient reaches every block");
            if blk.modulated {
                for (dv, &zv) in d.iter_mut().zip(&bc.z) {
                    *dv *= silu_grad(zv);
                }
                let mut dgb = vec![R::zero(); bsz * 2 * blk.cout];
                for c in 0..blk.cout {
                    for b in 0..bsz {
                        let g = R::one() + bc.gb[b * 2 * blk.cout + c];
                        let (mut dg, mut dbe) = (R::zero(), R::zero());
                        let off = (c * bsz + b) * po;
                        for (dv, &hv) in d[off..off + po].iter_mut().zip(&bc.pre[off..off + po]) {
                            dg += *dv * hv;
                            dbe += *dv;
                            *dv *= g;
                        }
                        dgb[b * 2 * blk.cout + c] = dg;
                        dgb[b * 2 * blk.cout + blk.cout + c] = dbe;
                    }
                }
                let (fw_len, fb_len) = (2 * blk.cout * e, 2 * blk.cout);
                let (gw, gb) = split_two(grad, blk.fw, fw_len, blk.fb, fb_len);
                let dsi = linear_backward(
                    &cache.s,
                    &theta[blk.fw..][..fw_len],
                    &dgb,
                    gw,
                    gb,
                    bsz,
                    e,
                    2 * blk.cout,
                );
                for (a, v) in ds.iter_mut().zip(dsi) {
                    *a += v;
                }
            }
            if let Some(src) = blk.skip {
                add_into(&mut acc[src], &d);
            }
            let k = blk.k();
            R::gemm(
                blk.cout,
                n,
                k,
                R::one(),
                &d,
                n as isize,
                1,
                &bc.cols,
                1,
                n as isize,
                R::one(),
                &mut grad[blk.w..][..blk.cout * k],
                k as isize,
                1,
            );
            for (o, g) in grad[blk.b..blk.b + blk.cout].iter_mut().enumerate() {
                *g += d[o * n..(o + 1) * n].iter().copied().sum::<R>();
            }
            if i == 0 {
                continue;
            }
            let mut dcols = vec![R::zero(); k * n];
            R::gemm(
                k,
                blk.cout,
                n,
                R::one(),
                &theta[blk.w..][..blk.cout * k],
                1,
                k as isize,
                &d,
                n as isize,
                1,
                R::zero(),
                &mut dcols,
                n as isize,
                1,
            );
            let mut dx = col2im(&dcols, blk, bsz);
            if blk.upsample {
                dx = upsample2_backward(&dx, blk.cin * bsz, blk.h_in / 2, blk.w_in / 2);
            }
            add_into(&mut acc[i - 1], &dx);
        }

        // Embedding path.
        let mut de = ds;
        for (dv, &ev) in de.iter_mut().zip(&cache.e) {
            *dv *= silu_grad(ev);
        }
        for (b, &c) in cache.class.iter().enumerate() {
            for (g, &dv) in grad[self.table + c * e..][..e]
                .iter_mut()
                .zip(&de[b * e..(b + 1) * e])
            {
                *g += dv;
            }
        }
        let (gw, gb) = split_two(grad, self.fc2_w, e * e, self.fc2_b, e);
        let mut dh = linear_backward(
            &cache.fc1_act,
            &theta[self.fc2_w..][..e * e],
            &de,
            gw,
            gb,
            bsz,
            e,
            e,
        );
        for (dv, &hv) in dh.iter_mut().zip(&cache.fc1) {
            *dv *= silu_grad(hv);
        }
        let (gw, gb) = split_two(grad, self.fc1_w, e * td, self.fc1_b, e);
        linear_backward(
            &cache.sin,
            &theta[self.fc1_w..][..e * td],
            &dh,
            gw,
            gb,
            bsz,
            td,
            e,
        );
    }
}

fn add_into<R: Real>(slot: &mut Option<Vec<R>>, v: &[R]) {
    match slot {
        Some(a) => a.iter_mut().zip(v).for_each(|(x, &y)| *x += y),
        None => *slot = Some(v.to_vec()),
    }
}

/// Two disjoint mutable windows of `grad`; `a` must precede `b`.
fn split_two<R>(
    grad: &mut [R],
    a: usize,
    alen: usize,
    b: usize,
    blen: usize,
) -> (&mut [R], &mut [R]) {
    debug_assert!(a + alen <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}
