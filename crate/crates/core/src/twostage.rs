//! The flow-sequence model (stage one) and text-to-video inference that
//! chains it with the frame sampler.

use alloc::vec;
use alloc::vec::Vec;

use crate::clip::{Clip, FlowField, FrameGeometry, LabeledClip, SemanticCond, TemporalCond};
use crate::denoiser::{Adam, FrameDenoiser, EMB_DIM, TIME_DIM};
use crate::error::{CoreError, CoreResult};
use crate::guidance::{ddim_step, sample_clip, step_indices, SamplerConfig};
use crate::nn::{Cache, NetConfig, NetInput, Network, ParamLayout};
use crate::real::Real;
use crate::rng::{Rng, StreamKey};
use crate::schedule::NoiseSchedule;

/// `N` flow fields stacked as `[N][2][H][W]`, in pixels; the first field is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> CoreResult<Self> {
        if frames == 0 || height * width == 0 || data.len() != frames * 2 * height * width {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "{} values for {frames} flows of {height}x{width}",
                data.len()
            )));
        }
        let seq = FlowSequence {
            frames,
            height,
            width,
            data,
        };
        seq.fields().map(|_| seq)
    }

    fn fields(&self) -> CoreResult<TemporalCond> {
        TemporalCond::new(
            self.data
                .chunks_exact(2 * self.height * self.width)
                .map(|c| FlowField::from_planes(self.height, self.width, c.to_vec()))
                .collect::<CoreResult<Vec<_>>>()?,
        )
    }

    pub fn from_temporal(temporal: &TemporalCond) -> CoreResult<Self> {
        let first = temporal.flow(0);
        let (height, width) = (first.height(), first.width());
        Ok(FlowSequence {
            frames: temporal.len(),
            height,
            width,
            data: temporal
                .flows()
                .iter()
                .flat_map(|f| f.data().iter().copied())
                .collect(),
        })
    }

    pub fn to_temporal(&self) -> TemporalCond {
        self.fields()
            .expect("sequence invariants imply a valid temporal condition")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Zeroes the reference slice and shrinks any displacement longer than
    /// `max(H, W)` onto that length.
    pub fn project(
        frames: usize,
        height: usize,
        width: usize,
        mut raw: Vec<f32>,
    ) -> CoreResult<Self> {
        let p = height * width;
        if raw.len() != frames * 2 * p || frames == 0 {
            return Err(CoreError::ShapeMismatch("raw flow sequence size".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("flow sequence"));
        }
        raw[..2 * p].iter_mut().for_each(|v| *v = 0.0);
        let bound = height.max(width) as f32;
        for field in raw.chunks_exact_mut(2 * p) {
            let (dx, dy) = field.split_at_mut(p);
            for (x, y) in dx.iter_mut().zip(dy.iter_mut()) {
                let norm = libm::hypotf(*x, *y);
                if norm > bound {
                    let k = bound / norm;
                    *x *= k;
                    *y *= k;
                }
            }
        }
        Ok(FlowSequence {
            frames,
            height,
            width,
            data: raw,
        })
    }
}

/// Stage-one parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneParams {
    pub phi: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceConfig {
    /// Geometry of the reference frame.
    pub geometry: FrameGeometry,
    pub frames: usize,
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
}

/// Noise predictor over a whole flow sequence, conditioned on the reference
/// frame (extra input channels) and the class (embedding).
///
/// The `2N` flow planes are the data channels, scaled by `4 / max(H, W)`.
#[derive(Debug, Clone)]
pub struct SequenceDenoiser {
    cfg: SequenceConfig,
    net: Network,
    scale: f32,
}

impl SequenceDenoiser {
    pub fn new(cfg: SequenceConfig) -> CoreResult<Self> {
        let g = cfg.geometry;
        if cfg.frames == 0 {
            return Err(CoreError::InvalidRange("sequence needs >= 1 frame".into()));
        }
        let net = Network::new(NetConfig {
            data_channels: 2 * cfg.frames,
            cond_channels: g.channels,
            height: g.height,
            width: g.width,
            base_width: cfg.width,
            levels: cfg.depth,
            classes: cfg.classes,
            time_dim: TIME_DIM,
            emb_dim: EMB_DIM,
        })?;
        Ok(SequenceDenoiser {
            cfg,
            net,
            scale: 4.0 / g.height.max(g.width) as f32,
        })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        self.net.layout()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn init<R: Real>(&self, rng: &mut Rng) -> Vec<R> {
        self.net.init(rng)
    }

    /// Values per sequence.
    pub fn seq_len(&self) -> usize {
        2 * self.cfg.frames * self.cfg.geometry.pixels()
    }

    /// Pixel flows to network units.
    pub fn normalise(&self, flows: &FlowSequence) -> Vec<f32> {
        flows.data().iter().map(|v| v * self.scale).collect()
    }

    fn check(&self, seq: &FlowSequence) -> CoreResult<()> {
        let g = self.cfg.geometry;
        if seq.frames != self.cfg.frames || seq.height != g.height || seq.width != g.width {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "sequence of {} {}x{} flows, model expects {} of {}x{}",
                seq.frames,
                seq.height,
                seq.width,
                self.cfg.frames,
                g.height,
                g.width
            )));
        }
        Ok(())
    }
}

/// A differentiable noise predictor over flow sequences.
pub trait SequenceEps<R: Real> {
    type Tape;

    /// `x` is `[B][2N][H*W]`, `reference` is `[B][C][H*W]`.
    fn eps_forward(
        &self,
        theta: &[R],
        x: &[R],
        t: &[usize],
        reference: &[R],
        classes: &[SemanticCond],
    ) -> CoreResult<(Vec<R>, Self::Tape)>;

    /// Accumulates the vector-Jacobian product into `grad`.
    fn eps_backward(&self, theta: &[R], tape: &Self::Tape, dy: &[R], grad: &mut [R]);
}

impl<R: Real> SequenceEps<R> for SequenceDenoiser {
    type Tape = Cache<R>;

    fn eps_forward(
        &self,
        theta: &[R],
        x: &[R],
        t: &[usize],
        reference: &[R],
        classes: &[SemanticCond],
    ) -> CoreResult<(Vec<R>, Cache<R>)> {
        let b = t.len();
        if x.len() != b * self.seq_len()
            || reference.len() != b * self.cfg.geometry.len()
            || classes.len() != b
        {
            return Err(CoreError::ShapeMismatch("sequence batch".into()));
        }
        let class = classes
            .iter()
            .map(|c| c.index(self.cfg.classes))
            .collect::<CoreResult<Vec<_>>>()?;
        let out = self.net.forward_cached(
            theta,
            &NetInput {
                x,
                cond: reference,
                t,
                class: &class,
            },
        )?;
        if out.0.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("sequence noise prediction"));
        }
        Ok(out)
    }

    fn eps_backward(&self, theta: &[R], cache: &Cache<R>, dy: &[R], grad: &mut [R]) {
        self.net.backward(theta, cache, dy, grad)
    }
}

/// A stage-one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExample {
    pub reference: Vec<f32>,
    pub class: SemanticCond,
    pub flows: FlowSequence,
}

pub fn flow_examples(dataset: &[LabeledClip]) -> CoreResult<Vec<FlowExample>> {
    dataset
        .iter()
        .map(|lc| {
            Ok(FlowExample {
                reference: lc.clip.frame(0).to_vec(),
                class: lc.semantic,
                flows: FlowSequence::from_temporal(&lc.temporal)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowItem {
    pub example: usize,
    pub t: usize,
    /// Independent noise for every element of the sequence.
    pub noise: Vec<f32>,
    pub noised: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub items: Vec<FlowItem>,
}

/// Samples `clips` examples with replacement, one step and one noise tensor each.
pub fn make_flow_batch(
    key: StreamKey,
    model: &SequenceDenoiser,
    schedule: &NoiseSchedule,
    examples: &[FlowExample],
    clips: usize,
) -> CoreResult<FlowBatch> {
    if examples.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if clips == 0 {
        return Err(CoreError::InvalidRange(
            "batch must hold at least one clip".into(),
        ));
    }
    let mut items = Vec::with_capacity(clips);
    for k in 0..clips {
        let mut rng = key.indexed("flow-batch", k as u64).rng();
        let idx = rng.below(examples.len());
        let ex = &examples[idx];
        model.check(&ex.flows)?;
        let t = rng.below(schedule.steps());
        let mut noise = vec![0.0f32; model.seq_len()];
        rng.fill_normal(&mut noise);
        let noised = schedule.q_sample(&model.normalise(&ex.flows), t, &noise)?;
        items.push(FlowItem {
            example: idx,
            t,
            noise,
            noised,
        });
    }
    Ok(FlowBatch { items })
}

/// Mean squared noise-prediction error per element, with its exact gradient.
pub fn flow_loss<R: Real, M: SequenceEps<R>>(
    model: &M,
    theta: &[R],
    batch: &FlowBatch,
    examples: &[FlowExample],
) -> CoreResult<(f64, Vec<R>)> {
    let mut x = Vec::new();
    let mut reference = Vec::new();
    let mut target = Vec::new();
    let mut t = Vec::new();
    let mut classes = Vec::new();
    for item in &batch.items {
        let ex = examples
            .get(item.example)
            .ok_or(CoreError::IndexOutOfRange {
                index: item.example,
                len: examples.len(),
            })?;
        x.extend(item.noised.iter().map(|&v| R::of(v as f64)));
        reference.extend(ex.reference.iter().map(|&v| R::of(v as f64)));
        target.extend(item.noise.iter().map(|&v| R::of(v as f64)));
        t.push(item.t);
        classes.push(ex.class);
    }
    let (eps, cache) = model.eps_forward(theta, &x, &t, &reference, &classes)?;
    if eps.len() != target.len() {
        return Err(CoreError::ShapeMismatch("noise target size".into()));
    }
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
        return Err(CoreError::NonFinite("flow-sequence loss"));
    }
    let mut grad = vec![R::zero(); theta.len()];
    model.eps_backward(theta, &cache, &dy, &mut grad);
    Ok((loss, grad))
}

/// One optimizer step on a fresh minibatch drawn from `key`; returns the
/// minibatch loss before the update.
pub fn flow_train_step(
    model: &SequenceDenoiser,
    phi: &mut [f32],
    adam: &mut Adam<f32>,
    schedule: &NoiseSchedule,
    examples: &[FlowExample],
    clips: usize,
    key: StreamKey,
) -> CoreResult<f64> {
    let batch = make_flow_batch(key, model, schedule, examples, clips)?;
    let (loss, grad) = flow_loss(model, phi, &batch, examples)?;
    adam.update(phi, &grad)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTraining {
    pub steps: usize,
    pub batch_clips: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains from a fresh initialisation; `on_step` sees each step's loss.
pub fn train_flow_model(
    model: &SequenceDenoiser,
    schedule: &NoiseSchedule,
    examples: &[FlowExample],
    settings: FlowTraining,
    mut on_step: impl FnMut(usize, f64),
) -> CoreResult<StageOneParams> {
    let key = StreamKey::root(settings.seed).child("stage-one");
    let mut phi: Vec<f32> = model.init(&mut key.child("init").rng());
    let mut adam = Adam::new(phi.len(), settings.lr);
    for step in 0..settings.steps {
        let loss = flow_train_step(
            model,
            &mut phi,
            &mut adam,
            schedule,
            examples,
            settings.batch_clips,
            key.indexed("step", step as u64),
        )?;
        on_step(step, loss);
    }
    Ok(StageOneParams { phi })
}

/// Deterministic DDIM sample of a flow sequence in pixels, before the
/// reference slice is projected.
pub fn sample_flow_raw(
    model: &SequenceDenoiser,
    params: &StageOneParams,
    schedule: &NoiseSchedule,
    num_steps: usize,
    reference: &[f32],
    c: SemanticCond,
    key: StreamKey,
) -> CoreResult<Vec<f32>> {
    if reference.len() != model.cfg.geometry.len() {
        return Err(CoreError::ShapeMismatch("reference frame size".into()));
    }
    if reference.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(CoreError::InvalidRange(
            "reference frame must lie in [-1, 1]".into(),
        ));
    }
    if num_steps == 0 || num_steps > schedule.steps() {
        return Err(CoreError::InvalidRange(alloc::format!(
            "{num_steps} sampling steps"
        )));
    }
    let mut x = vec![0.0f32; model.seq_len()];
    key.child("flow-noise").rng().fill_normal(&mut x);
    let steps = step_indices(schedule.steps(), num_steps);
    for (k, &t) in steps.iter().enumerate() {
        let (eps, _) =
            SequenceEps::<f32>::eps_forward(model, &params.phi, &x, &[t], reference, &[c])?;
        x = ddim_step(schedule, &x, &eps, t, steps.get(k + 1).copied(), 0.0, None)?;
    }
    let inv = 1.0 / model.scale;
    Ok(x.into_iter().map(|v| v * inv).collect())
}

/// Samples a flow sequence for `reference` and projects it onto the
/// sequence invariants.
pub fn generate_flow_sequence(
    model: &SequenceDenoiser,
    params: &StageOneParams,
    schedule: &NoiseSchedule,
    num_steps: usize,
    reference: &[f32],
    c: SemanticCond,
    key: StreamKey,
) -> CoreResult<FlowSequence> {
    let raw = sample_flow_raw(model, params, schedule, num_steps, reference, c, key)?;
    let g = model.cfg.geometry;
    FlowSequence::project(model.cfg.frames, g.height, g.width, raw)
}

/// Everything produced by one text-to-video run.
#[derive(Debug, Clone, PartialEq)]
pub struct T2vOutput {
    /// The single reference frame from step one.
    pub reference: Clip,
    pub flows: FlowSequence,
    pub clip: Clip,
    /// The starting noise shared by steps one and three.
    pub nu: Vec<f32>,
}

/// Starting noise and sampler stream of a text-to-video run.
pub fn t2v_noise(geometry: FrameGeometry, seed: u64) -> (Vec<f32>, StreamKey) {
    let key = StreamKey::root(seed).child("t2v");
    let mut nu = vec![0.0f32; geometry.len()];
    key.child("nu").rng().fill_normal(&mut nu);
    (nu, key)
}

/// Step one alone: the reference frame for `c` generated from the run's noise.
pub fn t2v_reference(
    frame_model: &FrameDenoiser,
    theta: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    c: SemanticCond,
    seed: u64,
) -> CoreResult<Clip> {
    let g = frame_model.geometry();
    let (nu, key) = t2v_noise(g, seed);
    sample_clip(
        frame_model,
        theta,
        schedule,
        cfg,
        &nu,
        &TemporalCond::zeros(1, g.height, g.width),
        c,
        1,
        key.child("frames"),
    )
}

/// Step three alone: the clip for `c` under the given flows, from the run's noise.
pub fn t2v_frames(
    frame_model: &FrameDenoiser,
    theta: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    c: SemanticCond,
    seed: u64,
    flows: &TemporalCond,
) -> CoreResult<Clip> {
    let (nu, key) = t2v_noise(frame_model.geometry(), seed);
    sample_clip(
        frame_model,
        theta,
        schedule,
        cfg,
        &nu,
        flows,
        c,
        flows.len(),
        key.child("frames"),
    )
}

/// Reference frame, then its flow sequence, then the full clip grown from
/// the same starting noise as the reference frame.
#[allow(clippy::too_many_arguments)]
pub fn t2v_pipeline(
    frame_model: &FrameDenoiser,
    theta: &[f32],
    seq_model: &SequenceDenoiser,
    params: &StageOneParams,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    c: SemanticCond,
    seed: u64,
) -> CoreResult<T2vOutput> {
    let g = frame_model.geometry();
    if seq_model.cfg.geometry != g {
        return Err(CoreError::ConfigMismatch(alloc::format!(
            "stage-one frames are {:?}, stage-two frames are {:?}",
            seq_model.cfg.geometry,
            g
        )));
    }
    let (nu, key) = t2v_noise(g, seed);
    let reference = t2v_reference(frame_model, theta, schedule, cfg, c, seed)?;
    let flows = generate_flow_sequence(
        seq_model,
        params,
        schedule,
        cfg.num_steps,
        reference.frame(0),
        c,
        key.child("stage-one"),
    )?;
    let clip = t2v_frames(
        frame_model,
        theta,
        schedule,
        cfg,
        c,
        seed,
        &flows.to_temporal(),
    )?;
    Ok(T2vOutput {
        reference,
        flows,
        clip,
        nu,
    })
}
