//! Shared-noise forward process over clips, minibatch construction and the
//! training loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::clip::{Clip, FlowCond, LabeledClip, SemanticCond};
use crate::denoiser::{drop_conditions, Adam, EpsBatch, EpsModel};
use crate::error::{CoreError, CoreResult};
use crate::real::Real;
use crate::rng::StreamKey;
use crate::schedule::NoiseSchedule;

/// How noise is drawn for the frames of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    /// One tensor broadcast to every frame.
    Shared,
    /// Independent tensors per frame (the standard per-image process).
    PerFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseDraw {
    Shared(Vec<f32>),
    PerFrame(Vec<f32>),
}

impl NoiseDraw {
    /// Noise applied to frame `i`.
    pub fn frame(&self, i: usize, frame_len: usize) -> &[f32] {
        match self {
            NoiseDraw::Shared(nu) => nu,
            NoiseDraw::PerFrame(all) => &all[i * frame_len..(i + 1) * frame_len],
        }
    }
}

/// `x_t^i = sqrt(ab_t) x_0^i + sqrt(1 - ab_t) nu` with one `nu` for all frames.
pub fn q_sample_shared(
    schedule: &NoiseSchedule,
    clip: &Clip,
    t: usize,
    nu: &[f32],
) -> CoreResult<Vec<f32>> {
    q_sample_clip(schedule, clip, t, &NoiseDraw::Shared(nu.to_vec()))
}

pub fn q_sample_clip(
    schedule: &NoiseSchedule,
    clip: &Clip,
    t: usize,
    noise: &NoiseDraw,
) -> CoreResult<Vec<f32>> {
    let fl = clip.geometry().len();
    let expected = match noise {
        NoiseDraw::Shared(_) => fl,
        NoiseDraw::PerFrame(_) => fl * clip.len(),
    };
    let got = match noise {
        NoiseDraw::Shared(v) | NoiseDraw::PerFrame(v) => v.len(),
    };
    if got != expected {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "noise has {got} values, expected {expected}"
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32);
    let mut out = Vec::with_capacity(clip.data().len());
    for (i, frame) in clip.frames().enumerate() {
        let nu = noise.frame(i, fl);
        out.extend(frame.iter().zip(nu).map(|(&x, &n)| a * x + s * n));
    }
    Ok(out)
}

/// One clip of a training minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorItem {
    /// Index into the dataset.
    pub clip: usize,
    pub t: usize,
    pub noise: NoiseDraw,
    /// `[N][C][H][W]` noised frames.
    pub noised: Vec<f32>,
    /// Whether the flow condition survived dropout.
    pub keep_flow: bool,
    pub semantic: SemanticCond,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectorBatch {
    pub items: Vec<SectorItem>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub clips: usize,
    pub mode: NoiseMode,
    /// Per-condition dropout probability.
    pub p_drop: f64,
}

/// Samples clips with replacement, one diffusion step and one noise draw per
/// clip. Each clip uses its own derived stream, so the batch is a pure
/// function of `key`.
pub fn make_batch(
    key: StreamKey,
    schedule: &NoiseSchedule,
    dataset: &[LabeledClip],
    spec: BatchSpec,
) -> CoreResult<SectorBatch> {
    if dataset.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if spec.clips == 0 {
        return Err(CoreError::InvalidRange(
            "batch must hold at least one clip".into(),
        ));
    }
    let mut items = Vec::with_capacity(spec.clips);
    for k in 0..spec.clips {
        let mut rng = key.indexed("batch-clip", k as u64).rng();
        let idx = rng.below(dataset.len());
        let item = &dataset[idx];
        let t = rng.below(schedule.steps());
        let fl = item.clip.geometry().len();
        let noise = match spec.mode {
            NoiseMode::Shared => {
                let mut nu = vec![0.0f32; fl];
                rng.fill_normal(&mut nu);
                NoiseDraw::Shared(nu)
            }
            NoiseMode::PerFrame => {
                let mut all = vec![0.0f32; fl * item.clip.len()];
                rng.fill_normal(&mut all);
                NoiseDraw::PerFrame(all)
            }
        };
        let noised = q_sample_clip(schedule, &item.clip, t, &noise)?;
        let (y, semantic) = drop_conditions(
            &mut rng,
            Some(item.temporal.flow(0)),
            item.semantic,
            spec.p_drop,
        );
        items.push(SectorItem {
            clip: idx,
            t,
            noise,
            noised,
            keep_flow: y.is_some(),
            semantic,
        });
    }
    Ok(SectorBatch { items })
}

/// Mean squared noise-prediction error over every clip, frame and element,
/// with its exact gradient.
pub fn sector_loss<R: Real, M: EpsModel<R>>(
    model: &M,
    theta: &[R],
    batch: &SectorBatch,
    dataset: &[LabeledClip],
) -> CoreResult<(f64, Vec<R>)> {
    let fl = model.geometry().len();
    let mut x = Vec::new();
    let mut target = Vec::new();
    let mut t = Vec::new();
    let mut flows: Vec<FlowCond<'_>> = Vec::new();
    let mut classes = Vec::new();
    for item in &batch.items {
        let lc = dataset.get(item.clip).ok_or(CoreError::IndexOutOfRange {
            index: item.clip,
            len: dataset.len(),
        })?;
        let n = lc.clip.len();
        if lc.clip.geometry().len() != fl || item.noised.len() != n * fl || lc.temporal.len() != n {
            return Err(CoreError::ShapeMismatch(
                "batch item does not match model geometry".into(),
            ));
        }
        x.extend(item.noised.iter().map(|&v| R::of(v as f64)));
        for i in 0..n {
            target.extend(item.noise.frame(i, fl).iter().map(|&v| R::of(v as f64)));
            t.push(item.t);
            flows.push(item.keep_flow.then(|| lc.temporal.flow(i)));
            classes.push(item.semantic);
        }
    }
    let eb = EpsBatch {
        x: &x,
        t: &t,
        flows: &flows,
        classes: &classes,
    };
    let (eps, tape) = model.eps_forward(theta, &eb)?;
    let count = R::of(eps.len() as f64);
    let mut loss = R::zero();
    let mut dy = Vec::with_capacity(eps.len());
    for (&e, &g) in eps.iter().zip(&target) {
        let r = e - g;
        loss += r * r;
        dy.push((r + r) / count);
    }
    let loss = (loss / count).f64();
    if !loss.is_finite() {
        return Err(CoreError::NonFinite("sector loss"));
    }
    let mut grad = vec![R::zero(); theta.len()];
    model.eps_backward(theta, &tape, &dy, &mut grad);
    Ok((loss, grad))
}

/// One optimizer step on a fresh minibatch drawn from `key`; returns the
/// minibatch loss before the update.
pub fn train_step<M: EpsModel<f32>>(
    model: &M,
    theta: &mut [f32],
    adam: &mut Adam<f32>,
    schedule: &NoiseSchedule,
    dataset: &[LabeledClip],
    spec: BatchSpec,
    key: StreamKey,
) -> CoreResult<f64> {
    let batch = make_batch(key, schedule, dataset, spec)?;
    let (loss, grad) = sector_loss(model, theta, &batch, dataset)?;
    adam.update(theta, &grad)?;
    Ok(loss)
}
