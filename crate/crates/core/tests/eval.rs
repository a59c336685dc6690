use s2dm_core::clip::SemanticCond;
use s2dm_core::denoiser::DenoiserConfig;
use s2dm_core::eval::*;
use s2dm_core::guidance::SamplerConfig;
use s2dm_core::sector::NoiseMode;
use s2dm_core::synthdata::{build_dataset, render_item, SpecDistribution, ToyClipSpec, Trajectory};
use s2dm_core::*;

fn item(velocity: (f64, f64)) -> LabeledClip {
    let spec = ToyClipSpec {
        shape_class: 0,
        trajectory: Trajectory {
            start: (4.5, 8.0),
            velocity,
            accel: (0.0, 0.0),
        },
        frame_size: 16,
        frames: 8,
        intensity: 0.9,
    };
    render_item(spec, 0, 0).unwrap().sample
}

fn gaussian(seed: u64, n: usize, mean: &[f64]) -> Vec<Vec<f64>> {
    let mut rng = StreamKey::root(seed).rng();
    (0..n)
        .map(|_| mean.iter().map(|m| m + rng.normal()).collect())
        .collect()
}

#[test]
fn features_track_motion() {
    let still = clip_features(&item((0.0, 0.0)).clip);
    let moving = clip_features(&item((1.0, 0.0)).clip);
    assert_eq!(still.len(), 5 * 8 + 2 * 7 + 4);
    assert_eq!(moving.len(), still.len());
    for k in 0..7 {
        assert_eq!(still[40 + 2 * k], 0.0);
        assert_eq!(still[41 + 2 * k], 0.0);
        assert!((moving[40 + 2 * k] - 1.0).abs() <= 0.1);
        assert!(moving[41 + 2 * k].abs() <= 0.1);
    }
    let hist: f64 = moving[54..].iter().sum();
    assert!((hist - 1.0).abs() < 1e-12);
}

#[test]
fn frechet_distance_oracles() {
    let a = gaussian(1, 10_000, &[0.0; 4]);
    let b = gaussian(2, 10_000, &[1.0, -1.0, 0.5, 1.5]);
    assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
    let d = frechet_distance(&a, &b).unwrap();
    let expected = 1.0 + 1.0 + 0.25 + 2.25;
    assert!((d - expected).abs() <= 0.05 * expected, "{d}");
    assert_eq!(d, frechet_distance(&b, &a).unwrap());
    assert!(matches!(
        frechet_distance(&a[..4], &b),
        Err(CoreError::InsufficientSamples { need: 5, got: 4 })
    ));
}

#[test]
fn ground_truth_flows_are_faithful() {
    let data = build_dataset(5, 5, 60, &SpecDistribution::toy(3, 16, 8)).unwrap();
    for it in data
        .train
        .iter()
        .filter(|i| i.spec.trajectory.is_translational())
    {
        let v = flow_faithfulness(&it.sample.clip, &it.sample.temporal).unwrap();
        assert!(v <= 0.01, "{v}");
    }
    let still = item((0.0, 0.0));
    assert_eq!(
        flow_faithfulness(&still.clip, &TemporalCond::zeros(8, 16, 16)).unwrap(),
        0.0
    );
}

#[test]
fn noise_clips_are_unfaithful() {
    let g = FrameGeometry::new(1, 16, 16);
    let mut rng = StreamKey::root(3).rng();
    let sd = 0.4;
    let data: Vec<f32> = (0..8 * 256).map(|_| (sd * rng.normal()) as f32).collect();
    let clip = Clip::new(g, data, 0).unwrap();
    let flows = TemporalCond::new(
        (0..8)
            .map(|i| FlowField::uniform(16, 16, -(i as f32), 0.0))
            .collect(),
    )
    .unwrap();
    let v = flow_faithfulness(&clip, &flows).unwrap();
    let expected = 2.0 * sd * sd * 7.0 / 8.0;
    assert!((v - expected).abs() <= 0.1 * expected, "{v} vs {expected}");
}

#[test]
fn consistency_measures_background_flicker() {
    let g = FrameGeometry::new(1, 16, 16);
    assert_eq!(stochastic_consistency(&item((0.0, 0.0)).clip), 0.0);
    let moving = item((0.7, 0.2)).clip;

    let mut rng = StreamKey::root(4).rng();
    let mut noisy = moving.data().to_vec();
    for v in noisy.iter_mut().filter(|v| **v < -0.99) {
        *v = -0.8 + (0.1 * rng.normal()) as f32;
    }
    let noisy = Clip::new(g, noisy, 0).unwrap();
    let c = stochastic_consistency(&noisy);
    assert!((0.006..0.014).contains(&c), "{c}");

    let shifted = Clip::new(g, noisy.data().iter().map(|v| v + 0.05).collect(), 0).unwrap();
    assert!((stochastic_consistency(&shifted) - c).abs() <= 1e-6);
}

#[test]
fn medians_and_schedules() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    use AblationSchedule::*;
    assert_eq!(
        ALL_PAIRINGS,
        [
            (I, NoiseMode::Shared, NoiseMode::Shared),
            (II, NoiseMode::Shared, NoiseMode::PerFrame),
            (III, NoiseMode::PerFrame, NoiseMode::PerFrame),
        ]
    );
    assert_eq!(
        [I.label(), II.label(), III.label()],
        ["(I)", "(II)", "(III)"]
    );
}

const ALL_PAIRINGS: [(AblationSchedule, NoiseMode, NoiseMode); 3] = [
    (AblationSchedule::I, NoiseMode::Shared, NoiseMode::Shared),
    (AblationSchedule::II, NoiseMode::Shared, NoiseMode::PerFrame),
    (
        AblationSchedule::III,
        NoiseMode::PerFrame,
        NoiseMode::PerFrame,
    ),
];

#[test]
fn pairings_match_the_schedule_methods() {
    for (s, train, sample) in ALL_PAIRINGS {
        assert_eq!((s.train_mode(), s.sample_mode()), (train, sample));
    }
}

#[test]
fn ablation_harness_self_check() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let m = FrameDenoiser::new(DenoiserConfig {
        geometry: FrameGeometry::new(1, 16, 16),
        classes: 3,
        width: 4,
        depth: 2,
    })
    .unwrap();
    let theta: Vec<f32> = m.init(&mut StreamKey::root(1).rng());
    let data = build_dataset(6, 6, 70, &SpecDistribution::toy(3, 16, 4)).unwrap();
    let cond: Vec<_> = data
        .train_samples()
        .into_iter()
        .chain(data.test_samples())
        .collect();
    let cfg = SamplerConfig {
        num_steps: 2,
        ..SamplerConfig::standard()
    };
    let mut calls = 0;
    let table = run_ablation(
        &m,
        &theta,
        &theta,
        &s,
        &cfg,
        &cond,
        &[1, 2, 3],
        |_, _, _| calls += 1,
    )
    .unwrap();
    assert_eq!(calls, 9);
    assert_eq!(table.rows.len(), 3);
    assert_eq!(
        table.row(AblationSchedule::II).per_seed,
        table.row(AblationSchedule::III).per_seed
    );
    assert_ne!(
        table.row(AblationSchedule::I).per_seed,
        table.row(AblationSchedule::II).per_seed
    );
    assert!(table
        .rows
        .iter()
        .all(|r| r.per_seed.len() == 3 && r.median.n_clips == 70));
    let err = run_ablation(&m, &theta, &theta[1..], &s, &cfg, &cond, &[1], |_, _, _| {});
    assert!(matches!(err, Err(CoreError::ConfigMismatch(_))));
}

#[test]
fn template_classifier_recognises_real_frames() {
    let data = build_dataset(7, 7, 200, &SpecDistribution::toy(3, 16, 8)).unwrap();
    let clf = TemplateClassifier::fit(&data.train_samples(), 3).unwrap();
    let test = build_dataset(8, 7, 100, &SpecDistribution::toy(3, 16, 8)).unwrap();
    let (mut hit, mut total) = (0, 0);
    for lc in test.train_samples().iter().chain(&test.test_samples()) {
        let SemanticCond::Class(c) = lc.semantic else {
            unreachable!()
        };
        for f in lc.clip.frames() {
            hit += (clf.predict(f).unwrap() == c) as usize;
            total += 1;
        }
    }
    assert!(hit as f64 >= 0.95 * total as f64, "{hit}/{total}");
}
