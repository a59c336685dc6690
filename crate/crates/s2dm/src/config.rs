//! Experiment configuration: a line-oriented `section.key = value` format.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, so an
//! empty file is a complete configuration. Unknown keys are rejected. The
//! digest is the SHA-256 of [`ExperimentConfig::canonical`], which lists
//! every key in a fixed order, so two files that differ only in comments,
//! ordering or spelled-out defaults share a digest.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use s2dm_core::denoiser::DenoiserConfig;
use s2dm_core::guidance::SamplerConfig;
use s2dm_core::sector::NoiseMode;
use s2dm_core::synthdata::SpecDistribution;
use s2dm_core::twostage::SequenceConfig;
use s2dm_core::{FrameGeometry, NoiseSchedule};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub classes: usize,
    pub num_clips: usize,
    /// Seeds both clip generation and the held-out split.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub p_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_clips: usize,
    pub lr: f64,
    /// The learning rate follows a half cosine from `lr` at the first step
    /// down to `lr_min` at the last; `lr_min = lr` keeps it constant.
    pub lr_min: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
    /// Optimizer steps for the flow-sequence model.
    pub flow_steps: usize,
}

impl TrainSection {
    /// Learning rate for step `k` of a run of `total` steps.
    pub fn learning_rate(&self, k: usize, total: usize) -> f64 {
        let progress = k as f64 / total.max(1) as f64;
        self.lr_min
            + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Clips generated per schedule and seed.
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schedule: ScheduleSection {
                steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            data: DataSection {
                height: 16,
                width: 16,
                frames: 8,
                classes: 3,
                num_clips: 500,
                split_seed: 1,
            },
            model: ModelSection {
                width: 16,
                depth: 2,
                p_drop: 0.1,
            },
            train: TrainSection {
                steps: 6000,
                batch_clips: 4,
                lr: 1e-3,
                lr_min: 0.0,
                checkpoint_interval: 500,
                seed: 0,
                flow_steps: 1500,
            },
            sample: SampleSection {
                num_steps: 20,
                guidance_scale: 7.5,
                eta: 0.0,
                seed: 0,
            },
            eval: EvalSection { clips: 128 },
        }
    }
}

enum Slot<'a> {
    Count(&'a mut usize),
    Seed(&'a mut u64),
    Real(&'a mut f64),
}

impl ExperimentConfig {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let ExperimentConfig {
            schedule,
            data,
            model,
            train,
            sample,
            eval,
        } = self;
        vec![
            ("schedule.T", Slot::Count(&mut schedule.steps)),
            ("schedule.beta_start", Slot::Real(&mut schedule.beta_start)),
            ("schedule.beta_end", Slot::Real(&mut schedule.beta_end)),
            ("data.H", Slot::Count(&mut data.height)),
            ("data.W", Slot::Count(&mut data.width)),
            ("data.N", Slot::Count(&mut data.frames)),
            ("data.K", Slot::Count(&mut data.classes)),
            ("data.num_clips", Slot::Count(&mut data.num_clips)),
            ("data.split_seed", Slot::Seed(&mut data.split_seed)),
            ("model.width", Slot::Count(&mut model.width)),
            ("model.depth", Slot::Count(&mut model.depth)),
            ("model.p_drop", Slot::Real(&mut model.p_drop)),
            ("train.steps", Slot::Count(&mut train.steps)),
            ("train.batch_clips", Slot::Count(&mut train.batch_clips)),
            ("train.lr", Slot::Real(&mut train.lr)),
            ("train.lr_min", Slot::Real(&mut train.lr_min)),
            (
                "train.checkpoint_interval",
                Slot::Count(&mut train.checkpoint_interval),
            ),
            ("train.seed", Slot::Seed(&mut train.seed)),
            ("train.flow_steps", Slot::Count(&mut train.flow_steps)),
            ("sample.num_steps", Slot::Count(&mut sample.num_steps)),
            (
                "sample.guidance_scale",
                Slot::Real(&mut sample.guidance_scale),
            ),
            ("sample.eta", Slot::Real(&mut sample.eta)),
            ("sample.seed", Slot::Seed(&mut sample.seed)),
            ("eval.clips", Slot::Count(&mut eval.clips)),
        ]
    }

    /// Parses `text`, applies defaults and checks every range.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Parse {
                line: line_no,
                msg: format!("expected `section.key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let mut slots = cfg.slots();
            let slot = slots
                .iter_mut()
                .find(|(name, _)| *name == key)
                .map(|(_, s)| s)
                .ok_or_else(|| CliError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                })?;
            let bad = |what: &str| CliError::Parse {
                line: line_no,
                msg: format!("`{key}` expects {what}, got `{value}`"),
            };
            match slot {
                Slot::Count(v) => **v = value.parse().map_err(|_| bad("a non-negative integer"))?,
                Slot::Seed(v) => {
                    **v = value
                        .parse()
                        .map_err(|_| bad("an unsigned 64-bit integer"))?
                }
                Slot::Real(v) => {
                    let x: f64 = value.parse().map_err(|_| bad("a real number"))?;
                    if !x.is_finite() {
                        return Err(bad("a finite real number"));
                    }
                    **v = x;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut me = self.clone();
        let mut out = String::new();
        for (name, slot) in me.slots() {
            let _ = match slot {
                Slot::Count(v) => writeln!(out, "{name} = {v}"),
                Slot::Seed(v) => writeln!(out, "{name} = {v}"),
                Slot::Real(v) => writeln!(out, "{name} = {v:?}"),
            };
        }
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    fn validate(&self) -> CliResult<()> {
        let range = |field: &str, msg: String| {
            Err(CliError::Range {
                field: field.to_string(),
                msg,
            })
        };
        let s = &self.schedule;
        if s.steps < 2 {
            return range("schedule.T", format!("must be >= 2, got {}", s.steps));
        }
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return range(
                "schedule.beta_start",
                format!(
                    "need 0 < beta_start <= beta_end < 1, got {} and {}",
                    s.beta_start, s.beta_end
                ),
            );
        }
        self.noise_schedule().map_err(|e| CliError::Range {
            field: "schedule".into(),
            msg: e.to_string(),
        })?;
        let d = &self.data;
        if d.width != d.height {
            return range(
                "data.W",
                format!("frames must be square, got {}x{}", d.height, d.width),
            );
        }
        if d.frames == 0 {
            return range("data.N", "must be >= 1".into());
        }
        if d.num_clips == 0 {
            return range("data.num_clips", "must be >= 1".into());
        }
        self.spec_distribution()
            .validate()
            .map_err(|e| CliError::Range {
                field: if !(2..=s2dm_core::synthdata::MAX_CLASSES).contains(&d.classes) {
                    "data.K".into()
                } else {
                    "data".into()
                },
                msg: e.to_string(),
            })?;
        let m = &self.model;
        if m.width == 0 {
            return range("model.width", "must be >= 1".into());
        }
        if m.depth > 4 || !d.height.is_multiple_of(1 << m.depth) {
            return range(
                "model.depth",
                format!(
                    "{} halvings do not divide a {}-pixel frame",
                    m.depth, d.height
                ),
            );
        }
        if !(0.0..1.0).contains(&m.p_drop) {
            return range(
                "model.p_drop",
                format!("must be in [0, 1), got {}", m.p_drop),
            );
        }
        let t = &self.train;
        if t.batch_clips == 0 {
            return range("train.batch_clips", "must be >= 1".into());
        }
        if !(t.lr > 0.0) {
            return range("train.lr", format!("must be > 0, got {}", t.lr));
        }
        if !(0.0..=t.lr).contains(&t.lr_min) {
            return range(
                "train.lr_min",
                format!("must be in [0, train.lr], got {}", t.lr_min),
            );
        }
        if t.checkpoint_interval == 0 {
            return range("train.checkpoint_interval", "must be >= 1".into());
        }
        let p = &self.sample;
        if p.num_steps == 0 || p.num_steps > s.steps {
            return range(
                "sample.num_steps",
                format!("must be in 1..={}, got {}", s.steps, p.num_steps),
            );
        }
        if !(p.guidance_scale >= 0.0) {
            return range(
                "sample.guidance_scale",
                format!("must be >= 0, got {}", p.guidance_scale),
            );
        }
        if !(0.0..=1.0).contains(&p.eta) {
            return range("sample.eta", format!("must be in [0, 1], got {}", p.eta));
        }
        if self.eval.clips == 0 {
            return range("eval.clips", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> s2dm_core::CoreResult<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry::new(1, self.data.height, self.data.width)
    }

    pub fn spec_distribution(&self) -> SpecDistribution {
        SpecDistribution::toy(self.data.classes, self.data.height, self.data.frames)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            geometry: self.geometry(),
            classes: self.data.classes,
            width: self.model.width,
            depth: self.model.depth,
        }
    }

    pub fn sequence(&self) -> SequenceConfig {
        SequenceConfig {
            geometry: self.geometry(),
            frames: self.data.frames,
            classes: self.data.classes,
            width: self.model.width,
            depth: self.model.depth,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sample.num_steps,
            guidance_scale: self.sample.guidance_scale,
            eta: self.sample.eta,
            step_noise: NoiseMode::Shared,
        }
    }
}
