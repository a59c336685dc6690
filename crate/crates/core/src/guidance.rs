//! Classifier-free guidance over the joint (flow, class) condition and the
//! DDIM sampler that grows a whole clip from one starting noise.

use alloc::vec;
use alloc::vec::Vec;

use crate::clip::{Clip, FlowCond, FrameGeometry, SemanticCond, TemporalCond};
use crate::denoiser::{EpsBatch, EpsModel};
use crate::error::{CoreError, CoreResult};
use crate::real::Real;
use crate::rng::StreamKey;
use crate::schedule::NoiseSchedule;
use crate::sector::{NoiseDraw, NoiseMode};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    /// 0 is deterministic DDIM, 1 matches ancestral DDPM variance.
    pub eta: f64,
    /// Whether the per-step noise for `eta > 0` is shared by all frames.
    pub step_noise: NoiseMode,
}

impl SamplerConfig {
    /// 20 deterministic steps at guidance scale 7.5.
    pub fn standard() -> Self {
        SamplerConfig {
            num_steps: 20,
            guidance_scale: 7.5,
            eta: 0.0,
            step_noise: NoiseMode::Shared,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> CoreResult<()> {
        if self.num_steps == 0 || self.num_steps > schedule.steps() {
            return Err(CoreError::InvalidRange(alloc::format!(
                "sample.num_steps must be in 1..={}, got {}",
                schedule.steps(),
                self.num_steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(CoreError::InvalidRange(
                "sample.guidance_scale must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(CoreError::InvalidRange(
                "sample.eta must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Evenly strided steps from `T - 1` down to exactly 0.
pub fn step_indices(steps: usize, num_steps: usize) -> Vec<usize> {
    if num_steps <= 1 {
        return vec![steps - 1];
    }
    let last = (steps - 1) as f64;
    (0..num_steps)
        .map(|k| libm::round(last * (num_steps - 1 - k) as f64 / (num_steps - 1) as f64) as usize)
        .collect()
}

/// `eps_u + scale * (eps_c - eps_u)` where `eps_u` uses the joint null label.
pub fn combine_guidance<R: Real>(cond: &[R], uncond: &[R], scale: f64) -> Vec<R> {
    let s = R::of(scale);
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| u + s * (c - u))
        .collect()
}

/// Guided noise prediction for one frame: two network evaluations.
#[allow(clippy::too_many_arguments)]
pub fn cfg_epsilon<R: Real, M: EpsModel<R>>(
    model: &M,
    theta: &[R],
    x_t: &[R],
    t: usize,
    y: FlowCond<'_>,
    c: SemanticCond,
    scale: f64,
) -> CoreResult<Vec<R>> {
    guided_batch(model, theta, x_t, &[t], &[y], &[c], scale)
}

/// Guided predictions for a batch of frames; conditional and unconditional
/// halves go through the network as one batch of `2B`.
fn guided_batch<R: Real, M: EpsModel<R>>(
    model: &M,
    theta: &[R],
    x: &[R],
    t: &[usize],
    flows: &[FlowCond<'_>],
    classes: &[SemanticCond],
    scale: f64,
) -> CoreResult<Vec<R>> {
    if !(scale >= 0.0) {
        return Err(CoreError::InvalidRange(alloc::format!(
            "guidance scale {scale}"
        )));
    }
    let b = t.len();
    let mut xx = Vec::with_capacity(2 * x.len());
    xx.extend_from_slice(x);
    xx.extend_from_slice(x);
    let tt: Vec<usize> = t.iter().chain(t).copied().collect();
    let mut ff: Vec<FlowCond<'_>> = flows.to_vec();
    ff.extend(core::iter::repeat_n(None, b));
    let mut cc = classes.to_vec();
    cc.extend(core::iter::repeat_n(SemanticCond::Null, b));
    let eps = model.eps(
        theta,
        &EpsBatch {
            x: &xx,
            t: &tt,
            flows: &ff,
            classes: &cc,
        },
    )?;
    let (cond, uncond) = eps.split_at(x.len());
    Ok(combine_guidance(cond, uncond, scale))
}

/// One generalized DDIM update from `t_from` to `t_to` (`None` is clean data).
///
/// `sigma = eta * sqrt((1 - ab_to) / (1 - ab_from)) * sqrt(1 - ab_from / ab_to)`;
/// `z` is required whenever `sigma > 0`.
pub fn ddim_step<R: Real>(
    schedule: &NoiseSchedule,
    x_t: &[R],
    eps: &[R],
    t_from: usize,
    t_to: Option<usize>,
    eta: f64,
    z: Option<&[R]>,
) -> CoreResult<Vec<R>> {
    if let Some(to) = t_to {
        if to >= t_from {
            return Err(CoreError::StepOrder { from: t_from, to });
        }
    }
    if x_t.len() != eps.len() {
        return Err(CoreError::ShapeMismatch(
            "x_t and eps differ in length".into(),
        ));
    }
    let ab_from = schedule.alpha_bar(t_from)?;
    let ab_to = match t_to {
        Some(to) => schedule.alpha_bar(to)?,
        None => 1.0,
    };
    let sigma =
        eta * libm::sqrt((1.0 - ab_to) / (1.0 - ab_from)) * libm::sqrt(1.0 - ab_from / ab_to);
    let dir = libm::sqrt((1.0 - ab_to - sigma * sigma).max(0.0));
    let (inv_a, s_from, a_to) = (
        R::of(1.0 / libm::sqrt(ab_from)),
        R::of(libm::sqrt(1.0 - ab_from)),
        R::of(libm::sqrt(ab_to)),
    );
    let (dir, sig) = (R::of(dir), R::of(sigma));
    let mut out: Vec<R> = x_t
        .iter()
        .zip(eps)
        .map(|(&x, &e)| {
            let x0 = (x - s_from * e) * inv_a;
            a_to * x0 + dir * e
        })
        .collect();
    if sigma > 0.0 {
        let z = z.ok_or_else(|| CoreError::ShapeMismatch("stochastic step needs noise".into()))?;
        if z.len() != out.len() {
            return Err(CoreError::ShapeMismatch("step noise length".into()));
        }
        for (o, &zv) in out.iter_mut().zip(z) {
            *o += sig * zv;
        }
    }
    Ok(out)
}

/// Runs one reverse trajectory per frame. `init` is either a single noise
/// shared by every frame or one noise per frame. Output is clamped to
/// `[-1, 1]` only after the final step.
#[allow(clippy::too_many_arguments)]
pub fn sample_frames<M: EpsModel<f32>>(
    model: &M,
    theta: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: &NoiseDraw,
    flows: &[FlowCond<'_>],
    semantic: SemanticCond,
    step_key: StreamKey,
) -> CoreResult<Clip> {
    cfg.validate(schedule)?;
    let g: FrameGeometry = model.geometry();
    let fl = g.len();
    let n = flows.len();
    if n == 0 {
        return Err(CoreError::ConditionCount {
            expected: 1,
            got: 0,
        });
    }
    let mut x = match init {
        NoiseDraw::Shared(nu) if nu.len() == fl => nu.repeat(n),
        NoiseDraw::PerFrame(all) if all.len() == n * fl => all.clone(),
        _ => {
            return Err(CoreError::ShapeMismatch(
                "initial noise does not match frame shape".into(),
            ))
        }
    };
    let classes = vec![semantic; n];
    let steps = step_indices(schedule.steps(), cfg.num_steps);
    for (k, &t) in steps.iter().enumerate() {
        let ts = vec![t; n];
        let eps = guided_batch(model, theta, &x, &ts, flows, &classes, cfg.guidance_scale)?;
        let t_to = steps.get(k + 1).copied();
        let z = if cfg.eta > 0.0 && t_to.is_some() {
            let mut rng = step_key.indexed("ddim-step", k as u64).rng();
            let mut z = vec![0.0f32; n * fl];
            match cfg.step_noise {
                NoiseMode::Shared => {
                    rng.fill_normal(&mut z[..fl]);
                    let (head, tail) = z.split_at_mut(fl);
                    tail.chunks_exact_mut(fl)
                        .for_each(|c| c.copy_from_slice(head));
                }
                NoiseMode::PerFrame => rng.fill_normal(&mut z),
            }
            Some(z)
        } else {
            None
        };
        x = ddim_step(schedule, &x, &eps, t, t_to, cfg.eta, z.as_deref())?;
    }
    Clip::clamped(g, x, 0)
}

/// Generates a clip whose frames all start from the same `nu_t`, frame `i`
/// guided by `temporal.flow(i)` and the shared `semantic` condition.
#[allow(clippy::too_many_arguments)]
pub fn sample_clip<M: EpsModel<f32>>(
    model: &M,
    theta: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    nu_t: &[f32],
    temporal: &TemporalCond,
    semantic: SemanticCond,
    frames: usize,
    step_key: StreamKey,
) -> CoreResult<Clip> {
    if temporal.len() != frames {
        return Err(CoreError::ConditionCount {
            expected: frames,
            got: temporal.len(),
        });
    }
    let flows: Vec<FlowCond<'_>> = temporal.flows().iter().map(Some).collect();
    sample_frames(
        model,
        theta,
        schedule,
        cfg,
        &NoiseDraw::Shared(nu_t.to_vec()),
        &flows,
        semantic,
        step_key,
    )
}
