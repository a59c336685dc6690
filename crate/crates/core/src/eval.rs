//! Clip metrics and the shared/non-shared noise ablation.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::clip::{Clip, FlowCond, FlowField, FrameGeometry, LabeledClip, TemporalCond};
use crate::denoiser::FrameDenoiser;
use crate::error::{CoreError, CoreResult};
use crate::guidance::{sample_frames, SamplerConfig};
use crate::rng::StreamKey;
use crate::schedule::NoiseSchedule;
use crate::sector::{NoiseDraw, NoiseMode};
use crate::synthdata::warp;

/// Pixels more than this far above the clip's median value are foreground.
/// With the median at the background level of -1 the cut sits at -0.5.
pub const BACKGROUND_MARGIN: f32 = 0.5;
/// Ridge added to both covariances in [`frechet_distance`].
pub const COVARIANCE_EPS: f64 = 1e-6;
const HIST_BINS: usize = 4;

/// Per-pixel foreground weight in `[0, 1]`.
fn weight(v: f32) -> f64 {
    ((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// `(mass, cx, cy, var_x, var_y)` of one frame's first channel.
fn moments(frame: &[f32], g: FrameGeometry) -> [f64; 5] {
    let (h, w) = (g.height, g.width);
    let (mut m, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = weight(frame[y * w + x]);
            let (fx, fy) = (x as f64, y as f64);
            m += p;
            sx += p * fx;
            sy += p * fy;
            sxx += p * fx * fx;
            syy += p * fy * fy;
        }
    }
    if m <= 1e-9 {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        return [0.0, cx, cy, 0.0, 0.0];
    }
    let (cx, cy) = (sx / m, sy / m);
    [
        m / g.pixels() as f64,
        cx,
        cy,
        (sxx / m - cx * cx).max(0.0),
        (syy / m - cy * cy).max(0.0),
    ]
}

/// Fixed-length clip descriptor. Per frame it holds the foreground mass,
/// centroid and spatial variances; these are followed by the consecutive
/// centroid displacements and a four-bin histogram over `[-1, 1]`.
pub fn clip_features(clip: &Clip) -> Vec<f64> {
    let g = clip.geometry();
    let n = clip.len();
    let mom: Vec<[f64; 5]> = clip.frames().map(|f| moments(f, g)).collect();
    let mut out = Vec::with_capacity(5 * n + 2 * n.saturating_sub(1) + HIST_BINS);
    for m in &mom {
        out.extend_from_slice(m);
    }
    for w in mom.windows(2) {
        out.push(w[1][1] - w[0][1]);
        out.push(w[1][2] - w[0][2]);
    }
    let mut hist = [0.0f64; HIST_BINS];
    for &v in clip.data() {
        let bin = (((v as f64 + 1.0) * 0.5 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        hist[bin] += 1.0;
    }
    out.extend(hist.iter().map(|c| c / clip.data().len() as f64));
    out
}

fn gaussian_stats(feats: &[Vec<f64>]) -> CoreResult<(DVector<f64>, DMatrix<f64>)> {
    let dim = feats.first().map_or(0, Vec::len);
    if feats.len() < dim + 1 || dim == 0 {
        return Err(CoreError::InsufficientSamples {
            need: dim + 1,
            got: feats.len(),
        });
    }
    if feats.iter().any(|f| f.len() != dim) {
        return Err(CoreError::ShapeMismatch(
            "feature vectors differ in length".into(),
        ));
    }
    let n = feats.len() as f64;
    let mut mu = DVector::zeros(dim);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in feats {
        let d = DVector::from_column_slice(f) - &mu;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    for i in 0..dim {
        cov[(i, i)] += COVARIANCE_EPS;
    }
    Ok((mu, cov))
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `tr sqrt(A B)` evaluated as `tr sqrt(sqrt(A) B sqrt(A))`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrtm_psd(a);
    let mut inner = &ra * b * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| libm::sqrt(v.max(0.0)))
        .sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> CoreResult<f64> {
    let (ma, ca) = gaussian_stats(a)?;
    let (mb, cb) = gaussian_stats(b)?;
    if ma.len() != mb.len() {
        return Err(CoreError::ShapeMismatch(
            "feature sets differ in dimension".into(),
        ));
    }
    let mean_term = (&ma - &mb).norm_squared();
    // Averaging both orders makes the result exactly symmetric.
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Mean over all frames of `MSE(warp(frame_i, f^i), frame_0)`.
pub fn flow_faithfulness(clip: &Clip, temporal: &TemporalCond) -> CoreResult<f64> {
    if temporal.len() != clip.len() {
        return Err(CoreError::ConditionCount {
            expected: clip.len(),
            got: temporal.len(),
        });
    }
    let g = clip.geometry();
    let mut total = 0.0;
    for (i, frame) in clip.frames().enumerate() {
        total += mse(&warp(frame, g, temporal.flow(i))?, clip.frame(0));
    }
    Ok(total / clip.len() as f64)
}

fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Frame-to-frame variability of the background: over the pixels that are
/// background (within [`BACKGROUND_MARGIN`] of the clip median) in every frame, the mean
/// per-pixel variance across frames plus the across-frame variance of the
/// background contrast (standard deviation). Zero when every frame has the
/// same background.
pub fn stochastic_consistency(clip: &Clip) -> f64 {
    let fl = clip.geometry().len();
    let mut sorted = clip.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let cut = sorted[sorted.len() / 2] + BACKGROUND_MARGIN;
    let mask: Vec<usize> = (0..fl)
        .filter(|&p| clip.frames().all(|f| f[p] < cut))
        .collect();
    if mask.is_empty() || clip.len() < 2 {
        return 0.0;
    }
    let pixel_var = mask
        .iter()
        .map(|&p| variance(&clip.frames().map(|f| f[p] as f64).collect::<Vec<_>>()))
        .sum::<f64>()
        / mask.len() as f64;
    let contrast: Vec<f64> = clip
        .frames()
        .map(|f| {
            libm::sqrt(variance(
                &mask.iter().map(|&p| f[p] as f64).collect::<Vec<_>>(),
            ))
        })
        .collect();
    pixel_var + variance(&contrast)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub toy_fd: f64,
    pub flow_mse: f64,
    pub consistency: f64,
    pub n_clips: usize,
}

/// Scores generated clips against real clips; `generated[k]` was produced
/// under the flows `temporal[k]`.
pub fn evaluate(
    generated: &[Clip],
    temporal: &[&TemporalCond],
    real: &[Clip],
) -> CoreResult<MetricReport> {
    if generated.len() != temporal.len() {
        return Err(CoreError::ConditionCount {
            expected: generated.len(),
            got: temporal.len(),
        });
    }
    let gf: Vec<_> = generated.iter().map(clip_features).collect();
    let rf: Vec<_> = real.iter().map(clip_features).collect();
    let toy_fd = frechet_distance(&gf, &rf)?;
    let mut flow = 0.0;
    let mut cons = 0.0;
    for (c, t) in generated.iter().zip(temporal) {
        flow += flow_faithfulness(c, t)?;
        cons += stochastic_consistency(c);
    }
    let n = generated.len() as f64;
    Ok(MetricReport {
        toy_fd,
        flow_mse: flow / n,
        consistency: cons / n,
        n_clips: generated.len(),
    })
}

/// Training/sampling noise pairings compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationSchedule {
    /// Shared-noise training, one starting noise per clip.
    I,
    /// Shared-noise training, independent starting noise per frame.
    II,
    /// Per-frame noise training, independent starting noise per frame.
    III,
}

impl AblationSchedule {
    pub const ALL: [AblationSchedule; 3] = [
        AblationSchedule::I,
        AblationSchedule::II,
        AblationSchedule::III,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationSchedule::I => "(I)",
            AblationSchedule::II => "(II)",
            AblationSchedule::III => "(III)",
        }
    }

    pub fn train_mode(self) -> NoiseMode {
        match self {
            AblationSchedule::I | AblationSchedule::II => NoiseMode::Shared,
            AblationSchedule::III => NoiseMode::PerFrame,
        }
    }

    pub fn sample_mode(self) -> NoiseMode {
        match self {
            AblationSchedule::I => NoiseMode::Shared,
            AblationSchedule::II | AblationSchedule::III => NoiseMode::PerFrame,
        }
    }
}

/// Samples one clip per condition in `conditions`; clip `k` starts from
/// noise drawn on stream `(seed, k)` in the given mode.
#[allow(clippy::too_many_arguments)]
pub fn sample_for_conditions(
    model: &FrameDenoiser,
    theta: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    conditions: &[LabeledClip],
    mode: NoiseMode,
    seed: u64,
) -> CoreResult<Vec<Clip>> {
    let fl = model.geometry().len();
    let key = StreamKey::root(seed).child("eval");
    conditions
        .iter()
        .enumerate()
        .map(|(k, lc)| {
            let n = lc.temporal.len();
            let clip_key = key.indexed("clip", k as u64);
            let mut rng = clip_key.child("init").rng();
            let init = match mode {
                NoiseMode::Shared => {
                    let mut nu = vec![0.0f32; fl];
                    rng.fill_normal(&mut nu);
                    NoiseDraw::Shared(nu)
                }
                NoiseMode::PerFrame => {
                    let mut all = vec![0.0f32; n * fl];
                    rng.fill_normal(&mut all);
                    NoiseDraw::PerFrame(all)
                }
            };
            let flows: Vec<FlowCond<'_>> = lc.temporal.flows().iter().map(Some).collect();
            let mut step_cfg = cfg.clone();
            step_cfg.step_noise = mode;
            let mut clip = sample_frames(
                model,
                theta,
                schedule,
                &step_cfg,
                &init,
                &flows,
                lc.semantic,
                clip_key.child("steps"),
            )?;
            clip.id = k as u64;
            Ok(clip)
        })
        .collect()
}

/// Samples clips for `conditions` and scores them against the real clips of
/// the same conditions.
pub fn evaluate_model(
    model: &FrameDenoiser,
    theta: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    conditions: &[LabeledClip],
    mode: NoiseMode,
    seed: u64,
) -> CoreResult<MetricReport> {
    let clips = sample_for_conditions(model, theta, schedule, cfg, conditions, mode, seed)?;
    let temporal: Vec<&TemporalCond> = conditions.iter().map(|c| &c.temporal).collect();
    let real: Vec<Clip> = conditions.iter().map(|c| c.clip.clone()).collect();
    evaluate(&clips, &temporal, &real)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub schedule: AblationSchedule,
    /// Per-metric medians over seeds.
    pub median: MetricReport,
    pub per_seed: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn row(&self, schedule: AblationSchedule) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.schedule == schedule)
            .expect("table holds every schedule")
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Per-metric medians over seeds.
pub fn median_report(reports: &[MetricReport]) -> MetricReport {
    let pick = |f: fn(&MetricReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    MetricReport {
        toy_fd: pick(|r| r.toy_fd),
        flow_mse: pick(|r| r.flow_mse),
        consistency: pick(|r| r.consistency),
        n_clips: reports.first().map_or(0, |r| r.n_clips),
    }
}

/// Evaluates schedules (I), (II) and (III) on `conditions` for each seed.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    model: &FrameDenoiser,
    theta_shared: &[f32],
    theta_nonshared: &[f32],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    conditions: &[LabeledClip],
    seeds: &[u64],
    mut on_result: impl FnMut(AblationSchedule, u64, &MetricReport),
) -> CoreResult<AblationTable> {
    let expected = model.param_count();
    for (name, th) in [("shared", theta_shared), ("non-shared", theta_nonshared)] {
        if th.len() != expected {
            return Err(CoreError::ConfigMismatch(alloc::format!(
                "{name} parameters have {} entries, the model has {expected}",
                th.len()
            )));
        }
    }
    if seeds.is_empty() {
        return Err(CoreError::InvalidRange(
            "ablation needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for sched in AblationSchedule::ALL {
        let theta = match sched.train_mode() {
            NoiseMode::Shared => theta_shared,
            NoiseMode::PerFrame => theta_nonshared,
        };
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let r = evaluate_model(
                model,
                theta,
                schedule,
                cfg,
                conditions,
                sched.sample_mode(),
                seed,
            )?;
            on_result(sched, seed, &r);
            per_seed.push(r);
        }
        rows.push(AblationRow {
            schedule: sched,
            median: median_report(&per_seed),
            per_seed,
        });
    }
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
    })
}

/// Nearest-template shape classifier. Each frame is recentred on its
/// centroid and normalised to unit foreground energy before being matched
/// against the per-class mean of training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateClassifier {
    geometry: FrameGeometry,
    templates: Vec<Vec<f64>>,
}

impl TemplateClassifier {
    fn canonical(frame: &[f32], g: FrameGeometry) -> CoreResult<Vec<f64>> {
        let [_, cx, cy, _, _] = moments(frame, g);
        let (mx, my) = ((g.width as f64 - 1.0) / 2.0, (g.height as f64 - 1.0) / 2.0);
        let shift = FlowField::uniform(g.height, g.width, (mx - cx) as f32, (my - cy) as f32);
        let centred = warp(frame, g, &shift)?;
        let w: Vec<f64> = centred.iter().map(|&v| weight(v)).collect();
        let norm = libm::sqrt(w.iter().map(|v| v * v).sum::<f64>()).max(1e-9);
        Ok(w.into_iter().map(|v| v / norm).collect())
    }

    pub fn fit(data: &[LabeledClip], classes: usize) -> CoreResult<Self> {
        let g = data.first().ok_or(CoreError::EmptyDataset)?.clip.geometry();
        let mut templates = vec![vec![0.0f64; g.len()]; classes];
        let mut counts = vec![0usize; classes];
        for lc in data {
            let c = lc.semantic.index(classes)?;
            if c == classes {
                continue;
            }
            for frame in lc.clip.frames() {
                for (t, v) in templates[c].iter_mut().zip(Self::canonical(frame, g)?) {
                    *t += v;
                }
                counts[c] += 1;
            }
        }
        if counts.contains(&0) {
            return Err(CoreError::InsufficientSamples { need: 1, got: 0 });
        }
        for (t, n) in templates.iter_mut().zip(counts) {
            t.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(TemplateClassifier {
            geometry: g,
            templates,
        })
    }

    pub fn predict(&self, frame: &[f32]) -> CoreResult<usize> {
        let x = Self::canonical(frame, self.geometry)?;
        let score = |t: &Vec<f64>| t.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        Ok((0..self.templates.len())
            .max_by(|&a, &b| score(&self.templates[a]).total_cmp(&score(&self.templates[b])))
            .expect("at least one class"))
    }
}
