//! The work behind each subcommand, callable without going through argv.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use s2dm_core::eval::{evaluate_model, median_report, run_ablation, AblationTable, MetricReport};
use s2dm_core::guidance::sample_clip;
use s2dm_core::sector::NoiseMode;
use s2dm_core::twostage::{
    t2v_pipeline, t2v_reference, FlowSequence, SequenceDenoiser, StageOneParams,
};
use s2dm_core::{
    Clip, FlowField, FrameDenoiser, LabeledClip, SemanticCond, StreamKey, TemporalCond,
};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::fsutil::{write_atomic, DirLock};
use crate::pgm;
use crate::report::{write_report, ReportRow};
use crate::train::{
    dataset, mode_label, open_log, train_frame_model, train_sequence_model, TrainReport,
};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads a checkpoint of the given kind, checking it against `cfg` when one
/// is supplied. Without `cfg` the checkpoint's embedded config is used.
pub fn load_checkpoint(
    path: &Path,
    kind: ModelKind,
    cfg: Option<&ExperimentConfig>,
) -> CliResult<(Checkpoint, String)> {
    let (ckpt, digest) = Checkpoint::load(path)?;
    if ckpt.kind != kind {
        return Err(CliError::checkpoint(
            path,
            format!("expected a {kind:?} model, found {:?}", ckpt.kind),
        ));
    }
    if let Some(cfg) = cfg {
        if cfg.digest() != ckpt.config.digest() {
            return Err(CliError::DigestMismatch(format!(
                "config {} does not match {} (trained under config {})",
                cfg.digest_hex(),
                path.display(),
                ckpt.config.digest_hex()
            )));
        }
    }
    Ok((ckpt, digest))
}

fn check_class(cfg: &ExperimentConfig, class: usize) -> CliResult<SemanticCond> {
    if class >= cfg.data.classes {
        return Err(CliError::Range {
            field: "class".into(),
            msg: format!("must be below data.K = {}, got {class}", cfg.data.classes),
        });
    }
    Ok(SemanticCond::Class(class))
}

/// Writes the frames (plus a contact sheet when asked). The returned manifest
/// lines name every file with its SHA-256.
fn export_clip(out: &Path, clip: &Clip, contact_sheet: bool) -> CliResult<(Vec<PathBuf>, String)> {
    let g = clip.geometry();
    let mut files = Vec::new();
    let mut lines = String::new();
    for (i, frame) in clip.frames().enumerate() {
        let name = pgm::frame_name(i);
        let bytes = pgm::encode(g.width, g.height, frame);
        let path = out.join(&name);
        write_atomic(&path, &bytes)?;
        let _ = writeln!(lines, "file {name} {}", sha_hex(&bytes));
        files.push(path);
    }
    if contact_sheet {
        let bytes = pgm::contact_sheet(clip);
        let path = out.join("contact_sheet.pgm");
        write_atomic(&path, &bytes)?;
        let _ = writeln!(lines, "file contact_sheet.pgm {}", sha_hex(&bytes));
        files.push(path);
    }
    Ok((files, lines))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub frame: TrainReport,
    pub flow: Option<TrainReport>,
}

/// Trains the frame model (and with `with_flow` the flow-sequence model)
/// into `out`, which receives `config.txt`, `train.log` and checkpoints.
pub fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    mode: NoiseMode,
    with_flow: bool,
) -> CliResult<TrainOutcome> {
    let _lock = DirLock::acquire(out)?;
    write_atomic(&out.join("config.txt"), cfg.canonical().as_bytes())?;
    let data = dataset(cfg)?;
    let mut log = open_log(out)?;
    let frame = train_frame_model(cfg, &data, mode, out, &mut log)?;
    let flow = if with_flow {
        Some(train_sequence_model(cfg, &data, out, &mut log)?)
    } else {
        None
    };
    Ok(TrainOutcome { frame, flow })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub class: usize,
    /// Pixels per frame along x and y.
    pub velocity: (f32, f32),
    /// Defaults to `data.N`.
    pub frames: Option<usize>,
    /// Defaults to `sample.seed`.
    pub seed: Option<u64>,
    pub contact_sheet: bool,
}

#[derive(Debug)]
pub struct SampleOutcome {
    pub clip: Clip,
    pub files: Vec<PathBuf>,
}

/// Flows of a uniformly translating clip: frame `i` looks back `i` steps.
pub fn translation_flows(
    frames: usize,
    height: usize,
    width: usize,
    (vx, vy): (f32, f32),
) -> CliResult<TemporalCond> {
    let flows = (0..frames)
        .map(|i| FlowField::uniform(height, width, -(i as f32) * vx, -(i as f32) * vy))
        .collect();
    Ok(TemporalCond::new(flows)?)
}

/// Generates one clip from the shared-noise sampler. Starting noise comes
/// from stream `sample/nu` under the seed and per-step noise from
/// `sample/steps`.
pub fn sample(
    checkpoint: &Path,
    cfg: Option<&ExperimentConfig>,
    req: &SampleRequest,
    out: &Path,
) -> CliResult<SampleOutcome> {
    let (ckpt, ckpt_digest) = load_checkpoint(checkpoint, ModelKind::Frame, cfg)?;
    let cfg = &ckpt.config;
    let model = FrameDenoiser::new(cfg.denoiser())?;
    ckpt.check_layout(model.layout(), checkpoint)?;
    let semantic = check_class(cfg, req.class)?;
    let frames = req.frames.unwrap_or(cfg.data.frames);
    if frames == 0 {
        return Err(CliError::Range {
            field: "frames".into(),
            msg: "must be >= 1".into(),
        });
    }
    let seed = req.seed.unwrap_or(cfg.sample.seed);
    let g = model.geometry();
    let temporal = translation_flows(frames, g.height, g.width, req.velocity)?;
    let key = StreamKey::root(seed).child("sample");
    let mut nu = vec![0.0f32; g.len()];
    key.child("nu").rng().fill_normal(&mut nu);
    let schedule = cfg.noise_schedule()?;
    let clip = sample_clip(
        &model,
        &ckpt.params,
        &schedule,
        &cfg.sampler(),
        &nu,
        &temporal,
        semantic,
        frames,
        key.child("steps"),
    )?;

    let _lock = DirLock::acquire(out)?;
    let (files, file_lines) = export_clip(out, &clip, req.contact_sheet)?;
    let mut m = String::new();
    let _ = writeln!(m, "command = sample");
    let _ = writeln!(m, "config_digest = {}", cfg.digest_hex());
    let _ = writeln!(m, "checkpoint = {}", checkpoint.display());
    let _ = writeln!(m, "checkpoint_digest = {ckpt_digest}");
    let _ = writeln!(m, "class = {}", req.class);
    let _ = writeln!(m, "velocity = {} {}", req.velocity.0, req.velocity.1);
    let _ = writeln!(m, "frames = {frames}");
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "num_steps = {}", cfg.sample.num_steps);
    let _ = writeln!(m, "guidance_scale = {:?}", cfg.sample.guidance_scale);
    let _ = writeln!(m, "eta = {:?}", cfg.sample.eta);
    m.push_str(&file_lines);
    write_atomic(&out.join("manifest.txt"), m.as_bytes())?;
    Ok(SampleOutcome { clip, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2vRequest {
    pub class: usize,
    pub seed: Option<u64>,
    /// Export only the reference frame of the run.
    pub reference_only: bool,
    pub contact_sheet: bool,
}

#[derive(Debug)]
pub struct T2vOutcome {
    pub clip: Clip,
    pub flows: Option<FlowSequence>,
}

/// Header line of `flows.bin`; `[N][2][H][W]` little-endian f32 pixels follow.
pub fn flows_header(flows: &FlowSequence) -> String {
    format!(
        "S2DMFLOW 1 frames={} height={} width={} layout=N,2,H,W dtype=f32le\n",
        flows.frames(),
        flows.height(),
        flows.width()
    )
}

pub fn encode_flows(flows: &FlowSequence) -> Vec<u8> {
    let mut out = flows_header(flows).into_bytes();
    for v in flows.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flows(bytes: &[u8]) -> Result<FlowSequence, String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not UTF-8")?;
    let mut dims = [0usize; 3];
    let mut parts = header.split_whitespace();
    if parts.next() != Some("S2DMFLOW") || parts.next() != Some("1") {
        return Err("not a version 1 flow file".into());
    }
    for part in parts {
        let (k, v) = part.split_once('=').ok_or("malformed header field")?;
        let slot = match k {
            "frames" => 0,
            "height" => 1,
            "width" => 2,
            _ => continue,
        };
        dims[slot] = v.parse().map_err(|_| format!("bad {k}"))?;
    }
    let data: Vec<f32> = bytes[nl + 1..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.len() * 4 != bytes.len() - nl - 1 {
        return Err("trailing bytes after the flow data".into());
    }
    FlowSequence::new(dims[0], dims[1], dims[2], data).map_err(|e| e.to_string())
}

/// Runs the two-stage text-to-video pipeline for one class and exports the
/// frames, the generated flows and a manifest naming both checkpoints.
pub fn t2v(
    frame_checkpoint: &Path,
    flow_checkpoint: Option<&Path>,
    cfg: Option<&ExperimentConfig>,
    req: &T2vRequest,
    out: &Path,
) -> CliResult<T2vOutcome> {
    let (ckpt, digest) = load_checkpoint(frame_checkpoint, ModelKind::Frame, cfg)?;
    let cfg = &ckpt.config;
    let model = FrameDenoiser::new(cfg.denoiser())?;
    ckpt.check_layout(model.layout(), frame_checkpoint)?;
    let semantic = check_class(cfg, req.class)?;
    let seed = req.seed.unwrap_or(cfg.sample.seed);
    let schedule = cfg.noise_schedule()?;
    let sampler = cfg.sampler();

    let mut flow_info = None;
    let (clip, flows) = if req.reference_only {
        (
            t2v_reference(&model, &ckpt.params, &schedule, &sampler, semantic, seed)?,
            None,
        )
    } else {
        let path = flow_checkpoint.ok_or_else(|| CliError::Range {
            field: "flow-checkpoint".into(),
            msg: "required unless --reference-only is given".into(),
        })?;
        let (fckpt, fdigest) = load_checkpoint(path, ModelKind::Sequence, Some(cfg))?;
        let seq = SequenceDenoiser::new(cfg.sequence())?;
        fckpt.check_layout(seq.layout(), path)?;
        let params = StageOneParams { phi: fckpt.params };
        let run = t2v_pipeline(
            &model,
            &ckpt.params,
            &seq,
            &params,
            &schedule,
            &sampler,
            semantic,
            seed,
        )?;
        flow_info = Some((path.to_path_buf(), fdigest));
        (run.clip, Some(run.flows))
    };

    let _lock = DirLock::acquire(out)?;
    let (_, file_lines) = export_clip(out, &clip, req.contact_sheet)?;
    let mut m = String::new();
    let _ = writeln!(m, "command = t2v");
    let _ = writeln!(m, "config_digest = {}", cfg.digest_hex());
    let _ = writeln!(m, "checkpoint = {}", frame_checkpoint.display());
    let _ = writeln!(m, "checkpoint_digest = {digest}");
    if let Some((path, fdigest)) = &flow_info {
        let _ = writeln!(m, "flow_checkpoint = {}", path.display());
        let _ = writeln!(m, "flow_checkpoint_digest = {fdigest}");
    }
    let _ = writeln!(m, "class = {}", req.class);
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "reference_only = {}", req.reference_only);
    let _ = writeln!(m, "num_steps = {}", cfg.sample.num_steps);
    let _ = writeln!(m, "guidance_scale = {:?}", cfg.sample.guidance_scale);
    let _ = writeln!(m, "eta = {:?}", cfg.sample.eta);
    m.push_str(&file_lines);
    if let Some(f) = &flows {
        let bytes = encode_flows(f);
        write_atomic(&out.join("flows.bin"), &bytes)?;
        let _ = writeln!(m, "file flows.bin {}", sha_hex(&bytes));
    }
    write_atomic(&out.join("manifest.txt"), m.as_bytes())?;
    Ok(T2vOutcome { clip, flows })
}

/// Conditions scored by `eval` and `ablate`: the held-out clips first, then
/// training clips, truncated to `eval.clips`.
pub fn eval_conditions(cfg: &ExperimentConfig) -> CliResult<Vec<LabeledClip>> {
    let data = dataset(cfg)?;
    let mut all = data.test_samples();
    all.extend(data.train_samples());
    all.truncate(cfg.eval.clips);
    Ok(all)
}

/// Trains (or resumes from checkpoints cached in `out`) the shared and
/// per-frame models, then compares schedules (I), (II) and (III).
pub fn ablate(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    progress: &mut dyn Write,
) -> CliResult<AblationTable> {
    let _lock = DirLock::acquire(out)?;
    write_atomic(&out.join("config.txt"), cfg.canonical().as_bytes())?;
    let data = dataset(cfg)?;
    let mut log = open_log(out)?;
    let shared = train_frame_model(cfg, &data, NoiseMode::Shared, out, &mut log)?;
    let _ = writeln!(progress, "shared model ready ({})", shared.digest);
    let nonshared = train_frame_model(cfg, &data, NoiseMode::PerFrame, out, &mut log)?;
    let _ = writeln!(progress, "nonshared model ready ({})", nonshared.digest);
    let model = FrameDenoiser::new(cfg.denoiser())?;
    let conditions = eval_conditions(cfg)?;
    let table = run_ablation(
        &model,
        &shared.checkpoint.params,
        &nonshared.checkpoint.params,
        &cfg.noise_schedule()?,
        &cfg.sampler(),
        &conditions,
        seeds,
        |s, seed, r| {
            let _ = writeln!(
                progress,
                "{} seed {seed}: fd {:.4} flow {:.4} consistency {:.5}",
                s.label(),
                r.toy_fd,
                r.flow_mse,
                r.consistency
            );
        },
    )?;
    let digest = cfg.digest_hex();
    let medians: Vec<ReportRow> = table
        .rows
        .iter()
        .map(|r| ReportRow {
            label: r.schedule.label().to_string(),
            seed: None,
            metrics: r.median,
        })
        .collect();
    let per_seed: Vec<ReportRow> = table
        .rows
        .iter()
        .flat_map(|r| {
            table
                .seeds
                .iter()
                .zip(&r.per_seed)
                .map(|(&seed, m)| ReportRow {
                    label: r.schedule.label().to_string(),
                    seed: Some(seed),
                    metrics: *m,
                })
        })
        .collect();
    write_report(out, "ablation", "schedule", &medians, &digest)?;
    write_report(out, "ablation_seeds", "schedule", &per_seed, &digest)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub trained: MetricReport,
    pub untrained: MetricReport,
    pub rows: Vec<ReportRow>,
}

/// Scores a trained frame model against its own untrained initialisation,
/// sampling in the noise mode it was trained with.
pub fn eval(
    checkpoint: &Path,
    cfg: Option<&ExperimentConfig>,
    seeds: &[u64],
    out: &Path,
) -> CliResult<EvalOutcome> {
    if seeds.is_empty() {
        return Err(CliError::Range {
            field: "seeds".into(),
            msg: "need at least one seed".into(),
        });
    }
    let (ckpt, _) = load_checkpoint(checkpoint, ModelKind::Frame, cfg)?;
    let cfg = &ckpt.config;
    let model = FrameDenoiser::new(cfg.denoiser())?;
    ckpt.check_layout(model.layout(), checkpoint)?;
    let mode = ckpt.mode.unwrap_or(NoiseMode::Shared);
    let untrained: Vec<f32> = model.init(
        &mut StreamKey::root(cfg.train.seed)
            .child("stage-two")
            .child("init")
            .rng(),
    );
    let conditions = eval_conditions(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let sampler = cfg.sampler();
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for (label, theta) in [("trained", &ckpt.params), ("untrained", &untrained)] {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let r = evaluate_model(&model, theta, &schedule, &sampler, &conditions, mode, seed)?;
            rows.push(ReportRow {
                label: label.to_string(),
                seed: Some(seed),
                metrics: r,
            });
            per_seed.push(r);
        }
        let m = median_report(&per_seed);
        rows.push(ReportRow {
            label: label.to_string(),
            seed: None,
            metrics: m,
        });
        medians.push(m);
    }
    let _lock = DirLock::acquire(out)?;
    write_report(
        out,
        &format!("eval_{}", mode_label(mode)),
        "model",
        &rows,
        &cfg.digest_hex(),
    )?;
    Ok(EvalOutcome {
        trained: medians[0],
        untrained: medians[1],
        rows,
    })
}
