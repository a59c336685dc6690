use proptest::prelude::*;
use s2dm_core::clip::{FlowField, FrameGeometry, TemporalCond};
use s2dm_core::denoiser::{DenoiserConfig, FrameDenoiser};
use s2dm_core::rng::StreamKey;
use s2dm_core::sector::*;
use s2dm_core::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn random_clip(seed: u64, n: usize, g: FrameGeometry) -> Clip {
    let mut rng = StreamKey::root(seed).child("clip").rng();
    let data = (0..n * g.len())
        .map(|_| rng.range(-1.0, 1.0) as f32)
        .collect();
    Clip::new(g, data, seed).unwrap()
}

fn labeled(seed: u64, n: usize, g: FrameGeometry) -> LabeledClip {
    let flows = (0..n)
        .map(|i| FlowField::uniform(g.height, g.width, -(i as f32) * 0.5, 0.25 * i as f32))
        .collect();
    LabeledClip {
        clip: random_clip(seed, n, g),
        temporal: TemporalCond::new(flows).unwrap(),
        semantic: SemanticCond::Class((seed % 3) as usize),
    }
}

fn model(g: FrameGeometry) -> FrameDenoiser {
    FrameDenoiser::new(DenoiserConfig {
        geometry: g,
        classes: 3,
        width: 4,
        depth: 2,
    })
    .unwrap()
}

#[test]
fn zero_noise_scales_frames() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let clip = random_clip(1, 3, g);
    let out = q_sample_shared(&s, &clip, 400, &[0.0; 16]).unwrap();
    let a = libm::sqrt(s.alpha_bars()[400]) as f32;
    for (o, x) in out.iter().zip(clip.data()) {
        assert_eq!(*o, a * x);
    }
}

#[test]
fn terminal_step_collapses_frames() {
    let s = schedule();
    let g = FrameGeometry::new(1, 8, 8);
    let clip = random_clip(2, 5, g);
    let mut nu = vec![0.0f32; 64];
    StreamKey::root(3).rng().fill_normal(&mut nu);
    let out = q_sample_shared(&s, &clip, 999, &nu).unwrap();
    let a = libm::sqrt(s.alpha_bars()[999]);
    let mut worst = 0.0f64;
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..64 {
                let d = (out[i * 64 + k] - out[j * 64 + k]) as f64;
                let expect = a * (clip.frame(i)[k] - clip.frame(j)[k]) as f64;
                assert!((d - expect).abs() <= 1e-6);
                worst = worst.max(d.abs());
            }
        }
    }
    assert!(worst <= 2.0 * a + 1e-6 && 2.0 * a < 0.0128, "{worst}");
}

#[test]
fn single_frame_is_the_image_forward_process() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let clip = random_clip(4, 1, g);
    let mut nu = vec![0.0f32; 16];
    StreamKey::root(5).rng().fill_normal(&mut nu);
    assert_eq!(
        q_sample_shared(&s, &clip, 123, &nu).unwrap(),
        s.q_sample(clip.data(), 123, &nu).unwrap()
    );
    assert!(q_sample_shared(&s, &clip, 123, &nu[..8]).is_err());
}

#[test]
fn batches_are_seeded_and_independent() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let data: Vec<_> = (0..6).map(|i| labeled(i, 3, g)).collect();
    let spec = BatchSpec {
        clips: 4,
        mode: NoiseMode::Shared,
        p_drop: 0.1,
    };
    let a = make_batch(StreamKey::root(8), &s, &data, spec).unwrap();
    let b = make_batch(StreamKey::root(8), &s, &data, spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.items.len(), 4);
    for (i, x) in a.items.iter().enumerate() {
        for y in &a.items[i + 1..] {
            assert_ne!(x.noise, y.noise);
        }
        let NoiseDraw::Shared(nu) = &x.noise else {
            panic!()
        };
        let clip = &data[x.clip].clip;
        assert_eq!(x.noised, q_sample_shared(&s, clip, x.t, nu).unwrap());
    }
    let ts: std::collections::BTreeSet<_> = a.items.iter().map(|i| i.t).collect();
    assert!(ts.len() > 1);
    let c = make_batch(StreamKey::root(9), &s, &data, spec).unwrap();
    assert_ne!(a, c);
}

#[test]
fn degenerate_batch_and_empty_dataset() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let data = [labeled(1, 2, g)];
    let spec = BatchSpec {
        clips: 1,
        mode: NoiseMode::Shared,
        p_drop: 0.0,
    };
    let b = make_batch(StreamKey::root(1), &s, &data, spec).unwrap();
    assert_eq!(b.items[0].clip, 0);
    assert!(matches!(
        make_batch(StreamKey::root(1), &s, &[], spec),
        Err(CoreError::EmptyDataset)
    ));
}

/// Returns a fixed output regardless of parameters.
struct Constant(Vec<f64>, FrameGeometry);

impl EpsModel<f64> for Constant {
    type Tape = ();
    fn geometry(&self) -> FrameGeometry {
        self.1
    }
    fn param_count(&self) -> usize {
        2
    }
    fn eps_forward(&self, _: &[f64], b: &EpsBatch<'_, f64>) -> CoreResult<(Vec<f64>, ())> {
        if self.0.is_empty() {
            Ok((vec![0.0; b.x.len()], ()))
        } else {
            Ok((self.0.clone(), ()))
        }
    }
    fn eps_backward(&self, _: &[f64], _: &(), _: &[f64], _: &mut [f64]) {}
}

#[test]
fn oracle_denoiser_has_zero_loss() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let data: Vec<_> = (0..3).map(|i| labeled(i, 3, g)).collect();
    let b = make_batch(
        StreamKey::root(2),
        &s,
        &data,
        BatchSpec {
            clips: 4,
            mode: NoiseMode::Shared,
            p_drop: 0.1,
        },
    )
    .unwrap();
    let target: Vec<f64> = b
        .items
        .iter()
        .flat_map(|it| {
            (0..3).flat_map(|i| {
                it.noise
                    .frame(i, 16)
                    .iter()
                    .map(|&v| v as f64)
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let (loss, grad) = sector_loss(&Constant(target, g), &[0.0, 0.0], &b, &data).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad, [0.0, 0.0]);
}

#[test]
fn zero_denoiser_loss_is_unit_per_element() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let data: Vec<_> = (0..3).map(|i| labeled(i, 2, g)).collect();
    let spec = BatchSpec {
        clips: 4,
        mode: NoiseMode::Shared,
        p_drop: 0.0,
    };
    // 2500 batches x 4 clips = 10^4 shared-noise draws.
    let losses: Vec<f64> = (0..2500)
        .map(|k| {
            let b = make_batch(StreamKey::root(77).indexed("mc", k), &s, &data, spec).unwrap();
            sector_loss(&Constant(Vec::new(), g), &[0.0, 0.0], &b, &data)
                .unwrap()
                .0
        })
        .collect();
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = libm::sqrt(var / n);
    assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let s = schedule();
    let g = FrameGeometry::new(1, 8, 8);
    let m = model(g);
    let data: Vec<_> = (0..3).map(|i| labeled(i, 3, g)).collect();
    let b = make_batch(
        StreamKey::root(5),
        &s,
        &data,
        BatchSpec {
            clips: 2,
            mode: NoiseMode::Shared,
            p_drop: 0.3,
        },
    )
    .unwrap();
    let mut rng = StreamKey::root(6).rng();
    let theta: Vec<f64> = (0..m.param_count()).map(|_| 0.1 * rng.normal()).collect();
    let (_, grad) = sector_loss(&m, &theta, &b, &data).unwrap();
    for _ in 0..100 {
        let i = rng.below(theta.len());
        let h = 1e-4;
        let mut tp = theta.clone();
        tp[i] += h;
        let lp = sector_loss(&m, &tp, &b, &data).unwrap().0;
        tp[i] -= 2.0 * h;
        let lm = sector_loss(&m, &tp, &b, &data).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-7);
        assert!(rel <= 1e-3, "coord {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn loss_ignores_frame_order() {
    let s = schedule();
    let g = FrameGeometry::new(1, 8, 8);
    let m = model(g);
    let theta: Vec<f64> = m.init(&mut StreamKey::root(3).rng());
    let lc = labeled(4, 4, g);
    let perm = [0usize, 3, 1, 2];
    let data = [lc.clone()];
    let b = make_batch(
        StreamKey::root(1),
        &s,
        &data,
        BatchSpec {
            clips: 1,
            mode: NoiseMode::Shared,
            p_drop: 0.0,
        },
    )
    .unwrap();
    let frames: Vec<f32> = perm
        .iter()
        .flat_map(|&i| lc.clip.frame(i).to_vec())
        .collect();
    // The permutation keeps frame 0 in place so the reordered flows still
    // start with the zero field.
    let flows = perm.iter().map(|&i| lc.temporal.flow(i).clone()).collect();
    let shuffled = LabeledClip {
        clip: Clip::new(g, frames, 4).unwrap(),
        temporal: TemporalCond::new(flows).unwrap(),
        semantic: lc.semantic,
    };
    let mut pb = b.clone();
    pb.items[0].noised = perm
        .iter()
        .flat_map(|&i| b.items[0].noised[i * 64..(i + 1) * 64].to_vec())
        .collect();
    let l1 = sector_loss(&m, &theta, &b, &data).unwrap().0;
    let l2 = sector_loss(&m, &theta, &pb, &[shuffled]).unwrap().0;
    assert!((l1 - l2).abs() <= 1e-12 * l1.abs(), "{l1} vs {l2}");
}

#[test]
fn single_frame_null_flow_is_the_conditioned_image_loss() {
    let s = schedule();
    let g = FrameGeometry::new(1, 8, 8);
    let m = model(g);
    let theta: Vec<f64> = m.init(&mut StreamKey::root(3).rng());
    let data = [labeled(5, 1, g)];
    let mut b = make_batch(
        StreamKey::root(2),
        &s,
        &data,
        BatchSpec {
            clips: 1,
            mode: NoiseMode::Shared,
            p_drop: 0.0,
        },
    )
    .unwrap();
    b.items[0].keep_flow = false;
    let it = &b.items[0];
    let x: Vec<f64> = it.noised.iter().map(|&v| v as f64).collect();
    let eps = m.predict_eps(&theta, &x, it.t, None, it.semantic).unwrap();
    let direct: f64 = eps
        .iter()
        .zip(it.noise.frame(0, 64))
        .map(|(e, &n)| (e - n as f64).powi(2))
        .sum::<f64>()
        / 64.0;
    let (loss, _) = sector_loss(&m, &theta, &b, &data).unwrap();
    assert!((loss - direct).abs() <= 1e-12, "{loss} vs {direct}");
}

#[test]
fn per_frame_mode_draws_distinct_noise() {
    let s = schedule();
    let g = FrameGeometry::new(1, 4, 4);
    let data = [labeled(1, 3, g)];
    let b = make_batch(
        StreamKey::root(4),
        &s,
        &data,
        BatchSpec {
            clips: 1,
            mode: NoiseMode::PerFrame,
            p_drop: 0.0,
        },
    )
    .unwrap();
    let n = &b.items[0].noise;
    assert_ne!(n.frame(0, 16), n.frame(1, 16));
}

#[test]
fn forward_marginal_matches_closed_form() {
    let s = schedule();
    let g = FrameGeometry::new(1, 2, 2);
    let clip = Clip::new(g, vec![-1.0, -0.25, 0.5, 1.0, 0.0, 0.3, -0.7, 0.9], 0).unwrap();
    let draws = 10_000;
    for t in [0usize, 100, 400, 700, 999] {
        let (mean, var) = s.q_mean_var(clip.data(), t).unwrap();
        let mut sum = [0.0f64; 8];
        let mut sq = [0.0f64; 8];
        let mut rng = StreamKey::root(t as u64).child("marginal").rng();
        let mut nu = [0.0f32; 4];
        for _ in 0..draws {
            rng.fill_normal(&mut nu);
            let x = q_sample_shared(&s, &clip, t, &nu).unwrap();
            for k in 0..8 {
                sum[k] += x[k] as f64;
                sq[k] += (x[k] as f64).powi(2);
            }
        }
        let n = draws as f64;
        for k in 0..8 {
            let m = sum[k] / n;
            let v = (sq[k] - n * m * m) / (n - 1.0);
            let m_expected: f32 = mean[k];
            assert!(
                (m - m_expected as f64).abs() <= 3.0 * (var / n).sqrt(),
                "t={t} k={k} mean {m}"
            );
            assert!(
                (v - var).abs() <= 3.0 * var * (2.0 / (n - 1.0)).sqrt(),
                "t={t} k={k} var {v}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn sector_identity_holds(seed in 0u64..1_000, t in 0usize..1000) {
        let s = schedule();
        let g = FrameGeometry::new(1, 4, 4);
        let clip = random_clip(seed, 4, g);
        let mut nu = vec![0.0f32; 16];
        StreamKey::root(seed).child("nu").rng().fill_normal(&mut nu);
        let out = q_sample_shared(&s, &clip, t, &nu).unwrap();
        let a = libm::sqrt(s.alpha_bars()[t]);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..16 {
                    let d = (out[i * 16 + k] - out[j * 16 + k]) as f64;
                    let e = a * (clip.frame(i)[k] - clip.frame(j)[k]) as f64;
                    prop_assert!((d - e).abs() <= 1e-6);
                }
            }
        }
    }
}
