//! Training loops with logging, periodic checkpoints and resumption.
//!
//! Stream layout under `train.seed`: the frame model draws its initial
//! parameters from `stage-two/init` and the minibatch of step `k` from
//! `stage-two/step[k]`; the flow-sequence model uses `stage-one/init` and
//! `stage-one/step[k]`. Both noise modes share the same streams, so the two
//! ablation models start from identical weights and see identical clips and
//! diffusion steps. Because every step has its own stream and its learning
//! rate depends only on the step index, a resumed run produces the same
//! parameters as an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use s2dm_core::sector::{train_step, BatchSpec, NoiseMode};
use s2dm_core::synthdata::{build_dataset, Dataset};
use s2dm_core::twostage::{flow_examples, flow_train_step, SequenceDenoiser};
use s2dm_core::{Adam, CoreError, FrameDenoiser, StreamKey};

use crate::checkpoint::{layout_table, Checkpoint, ModelKind};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// The configured toy dataset; `data.split_seed` drives both the clips and
/// the held-out split.
pub fn dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let d = &cfg.data;
    Ok(build_dataset(
        d.split_seed,
        d.split_seed,
        d.num_clips,
        &cfg.spec_distribution(),
    )?)
}

pub fn mode_label(mode: NoiseMode) -> &'static str {
    match mode {
        NoiseMode::Shared => "shared",
        NoiseMode::PerFrame => "nonshared",
    }
}

/// File name of the final checkpoint for a model in an output directory.
pub fn checkpoint_path(dir: &Path, kind: ModelKind, mode: NoiseMode) -> PathBuf {
    match kind {
        ModelKind::Frame => dir.join(format!("{}.ckpt", mode_label(mode))),
        ModelKind::Sequence => dir.join("flow.ckpt"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub digest: String,
    /// Losses of the steps run by this call, in order.
    pub losses: Vec<f64>,
}

struct Job<'a> {
    cfg: &'a ExperimentConfig,
    kind: ModelKind,
    mode: Option<NoiseMode>,
    steps: usize,
    key: StreamKey,
    path: PathBuf,
    log_tag: &'static str,
}

/// Runs `job`, continuing from an existing checkpoint at `job.path` when it
/// was written for the same config and model.
fn run(
    job: Job<'_>,
    init: impl FnOnce(&StreamKey) -> (Vec<f32>, Vec<(String, usize, usize)>),
    mut step: impl FnMut(&mut [f32], &mut Adam<f32>, StreamKey) -> Result<f64, CoreError>,
    log: &mut dyn Write,
) -> CliResult<TrainReport> {
    let (params, layout) = init(&job.key.child("init"));
    let fresh = Checkpoint {
        kind: job.kind,
        mode: job.mode,
        config: job.cfg.clone(),
        steps_done: 0,
        adam: Adam::new(params.len(), job.cfg.train.lr),
        layout,
        params,
    };
    let mut ckpt = match Checkpoint::load(&job.path) {
        Ok((old, _))
            if old.config == fresh.config
                && old.kind == fresh.kind
                && old.mode == fresh.mode
                && old.layout == fresh.layout
                && old.steps_done <= job.steps =>
        {
            old
        }
        _ => fresh,
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    let interval = job.cfg.train.checkpoint_interval;
    let mut digest = None;
    while ckpt.steps_done < job.steps {
        let k = ckpt.steps_done;
        ckpt.adam.lr = job.cfg.train.learning_rate(k, job.steps);
        let loss = step(
            &mut ckpt.params,
            &mut ckpt.adam,
            job.key.indexed("step", k as u64),
        )
        .map_err(|e| match e {
            CoreError::NonFinite(_) => CliError::Divergence {
                step: k,
                loss: f64::NAN,
            },
            other => other.into(),
        })?;
        if !loss.is_finite() {
            return Err(CliError::Divergence { step: k, loss });
        }
        ckpt.steps_done += 1;
        losses.push(loss);
        writeln!(
            log,
            "{} step {} loss {:.6} wall {:.3}",
            job.log_tag,
            k,
            loss,
            start.elapsed().as_secs_f64()
        )
        .map_err(|e| CliError::io(&job.path, e))?;
        if ckpt.steps_done % interval == 0 || ckpt.steps_done == job.steps {
            digest = Some(ckpt.save(&job.path)?);
        }
    }
    let digest = match digest {
        Some(d) => d,
        None => ckpt.save(&job.path)?,
    };
    Ok(TrainReport {
        checkpoint: ckpt,
        digest,
        losses,
    })
}

/// Trains the frame denoiser with the given noise mode, saving to
/// `checkpoint_path(dir, Frame, mode)`.
pub fn train_frame_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mode: NoiseMode,
    dir: &Path,
    log: &mut dyn Write,
) -> CliResult<TrainReport> {
    let model = FrameDenoiser::new(cfg.denoiser())?;
    let schedule = cfg.noise_schedule()?;
    let train = data.train_samples();
    let spec = BatchSpec {
        clips: cfg.train.batch_clips,
        mode,
        p_drop: cfg.model.p_drop,
    };
    let job = Job {
        cfg,
        kind: ModelKind::Frame,
        mode: Some(mode),
        steps: cfg.train.steps,
        key: StreamKey::root(cfg.train.seed).child("stage-two"),
        path: checkpoint_path(dir, ModelKind::Frame, mode),
        log_tag: mode_label(mode),
    };
    run(
        job,
        |key| (model.init(&mut key.rng()), layout_table(model.layout())),
        |theta, adam, key| train_step(&model, theta, adam, &schedule, &train, spec, key),
        log,
    )
}

/// Trains the flow-sequence model for `train.flow_steps` steps, saving to
/// `checkpoint_path(dir, Sequence, _)`.
pub fn train_sequence_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    dir: &Path,
    log: &mut dyn Write,
) -> CliResult<TrainReport> {
    let model = SequenceDenoiser::new(cfg.sequence())?;
    let schedule = cfg.noise_schedule()?;
    let examples = flow_examples(&data.train_samples())?;
    let job = Job {
        cfg,
        kind: ModelKind::Sequence,
        mode: None,
        steps: cfg.train.flow_steps,
        key: StreamKey::root(cfg.train.seed).child("stage-one"),
        path: checkpoint_path(dir, ModelKind::Sequence, NoiseMode::Shared),
        log_tag: "flow",
    };
    run(
        job,
        |key| (model.init(&mut key.rng()), layout_table(model.layout())),
        |phi, adam, key| {
            flow_train_step(
                &model,
                phi,
                adam,
                &schedule,
                &examples,
                cfg.train.batch_clips,
                key,
            )
        },
        log,
    )
}

/// Appends to `dir/train.log`.
pub fn open_log(dir: &Path) -> CliResult<std::fs::File> {
    let path = dir.join("train.log");
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))
}
