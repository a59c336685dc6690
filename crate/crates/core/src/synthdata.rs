//! Synthetic toy videos: rigid shapes moving along parametric paths, with
//! closed-form flows back to the reference frame.

use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::clip::{Clip, FlowField, FrameGeometry, LabeledClip, SemanticCond, TemporalCond};
use crate::error::{CoreError, CoreResult};
use crate::rng::{Rng, StreamKey};

/// Shapes by class id. Sizes are in pixels at a 16-pixel frame and scale
/// with the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Cross,
    Ring,
    Diamond,
}

pub const MAX_CLASSES: usize = 5;

impl Shape {
    pub fn from_class(class: usize) -> Option<Shape> {
        [
            Shape::Disc,
            Shape::Square,
            Shape::Cross,
            Shape::Ring,
            Shape::Diamond,
        ]
        .get(class)
        .copied()
    }

    /// Half-extent along either axis at a 16-pixel frame.
    fn extent(self) -> f64 {
        match self {
            Shape::Disc => 3.0,
            Shape::Square => 2.5,
            Shape::Cross => 3.0,
            Shape::Ring => 3.2,
            Shape::Diamond => 3.2,
        }
    }

    /// Point test in shape-local coordinates at a 16-pixel frame.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disc => x * x + y * y <= 9.0,
            Shape::Square => x.abs() <= 2.5 && y.abs() <= 2.5,
            Shape::Cross => {
                (x.abs() <= 3.0 && y.abs() <= 1.0) || (x.abs() <= 1.0 && y.abs() <= 3.0)
            }
            Shape::Ring => {
                let r2 = x * x + y * y;
                (1.8 * 1.8..=3.2 * 3.2).contains(&r2)
            }
            Shape::Diamond => x.abs() + y.abs() <= 3.2,
        }
    }
}

/// `position(i) = start + i * velocity + i^2 / 2 * accel`, frames indexed from 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub accel: (f64, f64),
}

impl Trajectory {
    pub fn position(&self, i: usize) -> (f64, f64) {
        let k = i as f64;
        (
            self.start.0 + k * self.velocity.0 + 0.5 * k * k * self.accel.0,
            self.start.1 + k * self.velocity.1 + 0.5 * k * k * self.accel.1,
        )
    }

    pub fn is_translational(&self) -> bool {
        self.accel == (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyClipSpec {
    pub shape_class: usize,
    pub trajectory: Trajectory,
    /// Frames are `frame_size x frame_size`.
    pub frame_size: usize,
    pub frames: usize,
    /// Shape brightness in `(0, 1]`; maps to pixel value `2 * intensity - 1`.
    pub intensity: f64,
}

const SUPERSAMPLE: usize = 4;

impl ToyClipSpec {
    fn shape(&self) -> CoreResult<Shape> {
        Shape::from_class(self.shape_class).ok_or_else(|| {
            CoreError::InvalidRange(alloc::format!("shape class {}", self.shape_class))
        })
    }

    fn scale(&self) -> f64 {
        self.frame_size as f64 / 16.0
    }

    pub fn validate(&self) -> CoreResult<()> {
        let shape = self.shape()?;
        if self.frames == 0 || self.frame_size == 0 {
            return Err(CoreError::InvalidRange("empty clip spec".into()));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(CoreError::InvalidRange(alloc::format!(
                "intensity {}",
                self.intensity
            )));
        }
        let r = shape.extent() * self.scale();
        let size = self.frame_size as f64;
        for i in 0..self.frames {
            let (x, y) = self.trajectory.position(i);
            if x - r < 0.0 || y - r < 0.0 || x + r > size || y + r > size {
                return Err(CoreError::OutOfFrame(alloc::format!(
                    "frame {i} centre ({x:.2}, {y:.2})"
                )));
            }
        }
        Ok(())
    }
}

/// Anti-aliased rendering, background -1. Each pixel integrates the shape
/// against a two-pixel-wide tent, sampled four times per pixel along each axis.
pub fn render_clip(spec: &ToyClipSpec) -> CoreResult<Clip> {
    spec.validate()?;
    let shape = spec.shape()?;
    let s = spec.frame_size;
    let inv = 1.0 / spec.scale();
    let level = (2.0 * spec.intensity - 1.0) as f32;
    let sub = 1.0 / SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(spec.frames * s * s);
    for i in 0..spec.frames {
        let (cx, cy) = spec.trajectory.position(i);
        for py in 0..s {
            for px in 0..s {
                let mut cov = 0.0f64;
                for sy in 0..2 * SUPERSAMPLE {
                    let v = (sy as f64 + 0.5) * sub - 1.0;
                    for sx in 0..2 * SUPERSAMPLE {
                        let u = (sx as f64 + 0.5) * sub - 1.0;
                        let x = px as f64 + 0.5 + u - cx;
                        let y = py as f64 + 0.5 + v - cy;
                        if shape.contains(x * inv, y * inv) {
                            cov += (1.0 - u.abs()) * (1.0 - v.abs());
                        }
                    }
                }
                let cov = (cov * sub * sub) as f32;
                data.push(-1.0 + cov * (1.0 + level));
            }
        }
    }
    Clip::new(FrameGeometry::new(1, s, s), data, 0)
}

/// Uniform displacement from frame `i` back to frame 0 (frames indexed from 0).
pub fn analytic_flow(spec: &ToyClipSpec, i: usize) -> CoreResult<FlowField> {
    if i >= spec.frames {
        return Err(CoreError::IndexOutOfRange {
            index: i,
            len: spec.frames,
        });
    }
    let (x0, y0) = spec.trajectory.position(0);
    let (xi, yi) = spec.trajectory.position(i);
    Ok(FlowField::uniform(
        spec.frame_size,
        spec.frame_size,
        (x0 - xi) as f32,
        (y0 - yi) as f32,
    ))
}

pub fn temporal_cond(spec: &ToyClipSpec) -> CoreResult<TemporalCond> {
    TemporalCond::new(
        (0..spec.frames)
            .map(|i| analytic_flow(spec, i))
            .collect::<CoreResult<_>>()?,
    )
}

/// Moves `frame` content along `flow`: `out(p) = frame(p - flow(p))`,
/// sampled bilinearly with edge clamping. Warping frame `i` with its flow to
/// the reference frame reproduces the reference frame.
pub fn warp(frame: &[f32], geometry: FrameGeometry, flow: &FlowField) -> CoreResult<Vec<f32>> {
    let (h, w) = (geometry.height, geometry.width);
    if frame.len() != geometry.len() || flow.height() != h || flow.width() != w {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "frame of {} values ({}x{}x{}) vs flow {}x{}",
            frame.len(),
            geometry.channels,
            h,
            w,
            flow.height(),
            flow.width()
        )));
    }
    let p = h * w;
    let mut out = vec![0.0f32; frame.len()];
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            let sx = x as f32 - flow.dx()[y * w + x];
            let sy = y as f32 - flow.dy()[y * w + x];
            let (fx0, fy0) = (libm::floorf(sx), libm::floorf(sy));
            let (ax, ay) = (sx - fx0, sy - fy0);
            let (x0, y0) = (fx0 as isize, fy0 as isize);
            let (xa, xb) = (clampi(x0, w), clampi(x0 + 1, w));
            let (ya, yb) = (clampi(y0, h), clampi(y0 + 1, h));
            for c in 0..geometry.channels {
                let src = &frame[c * p..(c + 1) * p];
                let top = src[ya * w + xa] + (src[ya * w + xb] - src[ya * w + xa]) * ax;
                let bot = src[yb * w + xa] + (src[yb * w + xb] - src[yb * w + xa]) * ax;
                out[c * p + y * w + x] = top + (bot - top) * ay;
            }
        }
    }
    Ok(out)
}

/// Parameters of the random clip generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecDistribution {
    pub classes: usize,
    pub frame_size: usize,
    pub frames: usize,
    pub speed: (f64, f64),
    /// Probability that a trajectory bends.
    pub curved_fraction: f64,
    pub max_accel: f64,
    pub intensity: (f64, f64),
}

/// Background pixels kept between sampled shapes and the frame edge, so
/// edge-clamped warps only ever replicate background.
const MARGIN: f64 = 1.5;

/// Motion directions are bucketed into quadrants centred on +x, +y, -x, -y.
pub const DIRECTION_BUCKETS: usize = 4;

impl SpecDistribution {
    pub fn toy(classes: usize, frame_size: usize, frames: usize) -> Self {
        SpecDistribution {
            classes,
            frame_size,
            frames,
            speed: (0.25, 0.8),
            curved_fraction: 0.25,
            max_accel: 0.04,
            intensity: (0.6, 1.0),
        }
    }

    pub fn validate(&self) -> CoreResult<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(CoreError::InvalidRange(alloc::format!(
                "data.K must be in 2..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.frames == 0 || self.frame_size < 8 {
            return Err(CoreError::InvalidRange(
                "need >= 1 frame of >= 8 pixels".into(),
            ));
        }
        let scale = self.frame_size as f64 / 16.0;
        let travel = (self.frames - 1) as f64;
        let reach = travel * self.speed.1 * scale + 0.5 * travel * travel * self.max_accel * scale;
        if 2.0 * (3.2 + MARGIN) * scale + reach > self.frame_size as f64 {
            return Err(CoreError::InvalidRange(alloc::format!(
                "{} frames at speed {} leave a {}-pixel frame",
                self.frames,
                self.speed.1,
                self.frame_size
            )));
        }
        Ok(())
    }

    /// Draws a class, a direction bucket and a trajectory that stays inside the frame.
    pub fn sample(&self, rng: &mut Rng) -> (ToyClipSpec, usize) {
        let class = rng.below(self.classes);
        let bucket = rng.below(DIRECTION_BUCKETS);
        let scale = self.frame_size as f64 / 16.0;
        let angle = (bucket as f64 + rng.range(-0.5, 0.5)) * core::f64::consts::FRAC_PI_2;
        let speed = rng.range(self.speed.0, self.speed.1) * scale;
        let velocity = (speed * libm::cos(angle), speed * libm::sin(angle));
        let accel = if rng.bernoulli(self.curved_fraction) {
            let a = rng.range(0.0, self.max_accel) * scale;
            let phi = rng.range(0.0, core::f64::consts::TAU);
            (a * libm::cos(phi), a * libm::sin(phi))
        } else {
            (0.0, 0.0)
        };
        let intensity = rng.range(self.intensity.0, self.intensity.1);
        let r = (Shape::from_class(class)
            .expect("validated class count")
            .extent()
            + MARGIN)
            * scale;
        let size = self.frame_size as f64;
        let probe = Trajectory {
            start: (0.0, 0.0),
            velocity,
            accel,
        };
        let (mut lo, mut hi) = ((0.0f64, 0.0f64), (0.0f64, 0.0f64));
        for i in 0..self.frames {
            let (x, y) = probe.position(i);
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        let start = (
            rng.range(r - lo.0, size - r - hi.0),
            rng.range(r - lo.1, size - r - hi.1),
        );
        let spec = ToyClipSpec {
            shape_class: class,
            trajectory: Trajectory {
                start,
                velocity,
                accel,
            },
            frame_size: self.frame_size,
            frames: self.frames,
            intensity,
        };
        (spec, bucket)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub spec: ToyClipSpec,
    pub bucket: usize,
    pub sample: LabeledClip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SynthItem>,
    pub test: Vec<SynthItem>,
    /// `(class, direction bucket)` combinations that only appear in `test`.
    pub held_out: Vec<(usize, usize)>,
}

/// Picks `max(1, K * buckets / 6)` held-out combinations from the split stream.
pub fn held_out_combinations(split_seed: u64, classes: usize) -> Vec<(usize, usize)> {
    let mut combos: Vec<(usize, usize)> = (0..classes)
        .flat_map(|c| (0..DIRECTION_BUCKETS).map(move |b| (c, b)))
        .collect();
    let mut rng = StreamKey::root(split_seed).child("split").rng();
    for i in (1..combos.len()).rev() {
        combos.swap(i, rng.below(i + 1));
    }
    let keep = (combos.len() / 6).max(1);
    let mut held: Vec<_> = combos.into_iter().take(keep).collect();
    held.sort_unstable();
    held
}

pub fn render_item(spec: ToyClipSpec, bucket: usize, id: u64) -> CoreResult<SynthItem> {
    let mut clip = render_clip(&spec)?;
    clip.id = id;
    Ok(SynthItem {
        spec,
        bucket,
        sample: LabeledClip {
            clip,
            temporal: temporal_cond(&spec)?,
            semantic: SemanticCond::Class(spec.shape_class),
        },
    })
}

/// `num_clips` clips drawn from `dist`, split by held-out (class, bucket) pairs.
pub fn build_dataset(
    seed: u64,
    split_seed: u64,
    num_clips: usize,
    dist: &SpecDistribution,
) -> CoreResult<Dataset> {
    dist.validate()?;
    if num_clips == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let held_out = held_out_combinations(split_seed, dist.classes);
    let key = StreamKey::root(seed).child("data");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..num_clips {
        let (spec, bucket) = dist.sample(&mut key.indexed("clip", k as u64).rng());
        let item = render_item(spec, bucket, k as u64)?;
        if held_out.contains(&(spec.shape_class, bucket)) {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    Ok(Dataset {
        train,
        test,
        held_out,
    })
}

impl Dataset {
    pub fn train_samples(&self) -> Vec<LabeledClip> {
        self.train.iter().map(|i| i.sample.clone()).collect()
    }

    pub fn test_samples(&self) -> Vec<LabeledClip> {
        self.test.iter().map(|i| i.sample.clone()).collect()
    }

    /// SHA-256 over frames, flows and labels of both splits.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (tag, split) in [(0u8, &self.train), (1u8, &self.test)] {
            h.update([tag]);
            h.update((split.len() as u64).to_le_bytes());
            for item in split {
                let s = &item.sample;
                h.update(s.clip.id.to_le_bytes());
                for v in s.clip.data() {
                    h.update(v.to_le_bytes());
                }
                for f in s.temporal.flows() {
                    for v in f.data() {
                        h.update(v.to_le_bytes());
                    }
                }
                h.update(
                    (s.semantic.index(MAX_CLASSES).unwrap_or(usize::MAX) as u64).to_le_bytes(),
                );
            }
        }
        h.finalize().into()
    }
}
