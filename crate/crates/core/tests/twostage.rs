use s2dm_core::denoiser::DenoiserConfig;
use s2dm_core::guidance::SamplerConfig;
use s2dm_core::synthdata::{build_dataset, SpecDistribution};
use s2dm_core::twostage::*;
use s2dm_core::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn seq_model(frames: usize) -> SequenceDenoiser {
    SequenceDenoiser::new(SequenceConfig {
        geometry: FrameGeometry::new(1, 16, 16),
        frames,
        classes: 3,
        width: 4,
        depth: 2,
    })
    .unwrap()
}

fn examples(n: usize, frames: usize) -> Vec<FlowExample> {
    let data = build_dataset(4, 4, n, &SpecDistribution::toy(3, 16, frames)).unwrap();
    flow_examples(&data.train_samples()).unwrap()
}

fn rough<R: Real>(m: &SequenceDenoiser, seed: u64) -> Vec<R> {
    let mut rng = StreamKey::root(seed).rng();
    let mut th: Vec<R> = m.init(&mut rng);
    th.iter_mut().for_each(|v| *v += R::of(0.1 * rng.normal()));
    th
}

/// Knows the clean sequence of a single-example dataset and inverts the
/// forward process exactly.
struct Oracle<'a> {
    schedule: &'a NoiseSchedule,
    clean: Vec<f64>,
}

impl SequenceEps<f64> for Oracle<'_> {
    type Tape = ();

    fn eps_forward(
        &self,
        _: &[f64],
        x: &[f64],
        t: &[usize],
        _: &[f64],
        _: &[SemanticCond],
    ) -> CoreResult<(Vec<f64>, ())> {
        let n = self.clean.len();
        let mut out = Vec::with_capacity(x.len());
        for (b, &tb) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bars()[tb];
            out.extend(
                x[b * n..(b + 1) * n]
                    .iter()
                    .zip(&self.clean)
                    .map(|(xv, c)| (xv - ab.sqrt() * c) / (1.0 - ab).sqrt()),
            );
        }
        Ok((out, ()))
    }

    fn eps_backward(&self, _: &[f64], _: &(), _: &[f64], _: &mut [f64]) {}
}

#[test]
fn sequence_invariants_are_checked_and_projected() {
    let mut data = vec![0.0f32; 3 * 2 * 4];
    data[9] = 1.5;
    assert!(FlowSequence::new(3, 2, 2, data.clone()).is_ok());
    data[1] = 0.2;
    assert!(FlowSequence::new(3, 2, 2, data.clone()).is_err());
    assert!(FlowSequence::new(3, 2, 2, data[..20].to_vec()).is_err());
    data[12] = 30.0;
    data[16] = 40.0;
    let p = FlowSequence::project(3, 2, 2, data).unwrap();
    assert!(p.data()[..8].iter().all(|&v| v == 0.0));
    assert_eq!(p.data()[9], 1.5);
    let (x, y) = (p.data()[12], p.data()[14]);
    assert!((libm::hypotf(x, y) - 2.0).abs() < 1e-6);
    let back = FlowSequence::from_temporal(&p.to_temporal()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn oracle_sequence_denoiser_has_zero_loss() {
    let s = schedule();
    let m = seq_model(4);
    let ex = examples(12, 4);
    let one = vec![ex[0].clone()];
    let batch = make_flow_batch(StreamKey::root(1), &m, &s, &one, 3).unwrap();
    let oracle = Oracle {
        schedule: &s,
        clean: m
            .normalise(&one[0].flows)
            .iter()
            .map(|&v| v as f64)
            .collect(),
    };
    let (loss, grad) = flow_loss(&oracle, &[0.0f64; 2], &batch, &one).unwrap();
    assert!(loss < 1e-8, "{loss}");
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn flow_loss_gradient_matches_finite_differences() {
    let s = schedule();
    let m = seq_model(3);
    let ex = examples(10, 3);
    let batch = make_flow_batch(StreamKey::root(2), &m, &s, &ex, 2).unwrap();
    let theta: Vec<f64> = rough(&m, 3);
    let (_, grad) = flow_loss(&m, &theta, &batch, &ex).unwrap();
    let mut rng = StreamKey::root(4).rng();
    for _ in 0..100 {
        let i = rng.below(theta.len());
        let h = 1e-4;
        let mut tp = theta.clone();
        tp[i] += h;
        let lp = flow_loss(&m, &tp, &batch, &ex).unwrap().0;
        tp[i] -= 2.0 * h;
        let lm = flow_loss(&m, &tp, &batch, &ex).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-7);
        assert!(rel <= 1e-3, "coord {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn training_reduces_the_flow_loss() {
    let s = schedule();
    let m = seq_model(4);
    let ex = examples(40, 4);
    let mut losses = Vec::new();
    train_flow_model(
        &m,
        &s,
        &ex,
        FlowTraining {
            steps: 60,
            batch_clips: 4,
            lr: 2e-3,
            seed: 5,
        },
        |_, l| losses.push(l),
    )
    .unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!((head - 1.0).abs() < 0.3, "{head}");
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn generated_sequences_are_deterministic_and_projected() {
    let s = schedule();
    let m = seq_model(4);
    let params = StageOneParams { phi: rough(&m, 6) };
    let reference = examples(5, 4)[0].reference.clone();
    let gen = |seed| {
        generate_flow_sequence(
            &m,
            &params,
            &s,
            5,
            &reference,
            SemanticCond::Class(1),
            StreamKey::root(seed),
        )
        .unwrap()
    };
    let a = gen(7);
    assert_eq!(a, gen(7));
    assert_ne!(a, gen(8));
    assert!(a.data()[..512].iter().all(|&v| v == 0.0));
    assert!(a.data().iter().all(|v| v.abs() <= 16.0));
    let raw = sample_flow_raw(
        &m,
        &params,
        &s,
        5,
        &reference,
        SemanticCond::Class(1),
        StreamKey::root(7),
    )
    .unwrap();
    assert_eq!(FlowSequence::project(4, 16, 16, raw).unwrap(), a);
    let bad = vec![1.5f32; 256];
    assert!(generate_flow_sequence(
        &m,
        &params,
        &s,
        5,
        &bad,
        SemanticCond::Class(1),
        StreamKey::root(7)
    )
    .is_err());
}

#[test]
fn t2v_reuses_the_reference_noise() {
    let s = schedule();
    let g = FrameGeometry::new(1, 16, 16);
    let fm = FrameDenoiser::new(DenoiserConfig {
        geometry: g,
        classes: 3,
        width: 4,
        depth: 2,
    })
    .unwrap();
    let mut rng = StreamKey::root(9).rng();
    let mut theta: Vec<f32> = fm.init(&mut rng);
    theta
        .iter_mut()
        .for_each(|v| *v += (0.1 * rng.normal()) as f32);
    let sm = seq_model(4);
    let params = StageOneParams {
        phi: rough(&sm, 10),
    };
    let cfg = SamplerConfig {
        num_steps: 4,
        ..SamplerConfig::standard()
    };
    let out = t2v_pipeline(
        &fm,
        &theta,
        &sm,
        &params,
        &s,
        &cfg,
        SemanticCond::Class(2),
        11,
    )
    .unwrap();
    assert_eq!(out.clip.len(), 4);
    assert_eq!(out.clip.frame(0), out.reference.frame(0));
    let again = t2v_reference(&fm, &theta, &s, &cfg, SemanticCond::Class(2), 11).unwrap();
    assert_eq!(again, out.reference);
    assert_eq!(
        out,
        t2v_pipeline(
            &fm,
            &theta,
            &sm,
            &params,
            &s,
            &cfg,
            SemanticCond::Class(2),
            11
        )
        .unwrap()
    );
    let stochastic = SamplerConfig {
        eta: 0.7,
        ..cfg.clone()
    };
    let out = t2v_pipeline(
        &fm,
        &theta,
        &sm,
        &params,
        &s,
        &stochastic,
        SemanticCond::Class(0),
        12,
    )
    .unwrap();
    assert_eq!(out.clip.frame(0), out.reference.frame(0));

    let small = SequenceDenoiser::new(SequenceConfig {
        geometry: FrameGeometry::new(1, 8, 8),
        frames: 4,
        classes: 3,
        width: 4,
        depth: 2,
    })
    .unwrap();
    let p8 = StageOneParams {
        phi: small.init(&mut rng),
    };
    let err = t2v_pipeline(
        &fm,
        &theta,
        &small,
        &p8,
        &s,
        &cfg,
        SemanticCond::Class(0),
        1,
    );
    assert!(matches!(err, Err(CoreError::ConfigMismatch(_))));
}
