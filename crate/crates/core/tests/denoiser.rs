use s2dm_core::clip::FlowField;
use s2dm_core::denoiser::*;
use s2dm_core::rng::StreamKey;
use s2dm_core::*;

fn small() -> FrameDenoiser {
    FrameDenoiser::new(DenoiserConfig {
        geometry: FrameGeometry::new(1, 8, 8),
        classes: 3,
        width: 4,
        depth: 2,
    })
    .unwrap()
}

/// Central differences in f64 against the analytic vector-Jacobian
/// product, sampling coordinates from every named segment kind.
fn check_gradients(model: &FrameDenoiser, theta: &[f64], coords_per_kind: usize) -> f64 {
    let g = model.geometry();
    let mut rng = StreamKey::root(11).child("gradcheck").rng();
    let batch = 3;
    let mut x = vec![0.0f64; batch * g.len()];
    rng.fill_normal(&mut x);
    let mut u = vec![0.0f64; batch * g.len()];
    rng.fill_normal(&mut u);
    let f1 = FlowField::uniform(8, 8, 1.5, -0.5);
    let flows = [Some(&f1), None, Some(&f1)];
    let classes = [
        SemanticCond::Class(0),
        SemanticCond::Class(2),
        SemanticCond::Null,
    ];
    let t = [3usize, 500, 999];
    let b = EpsBatch {
        x: &x,
        t: &t,
        flows: &flows,
        classes: &classes,
    };
    let objective = |th: &[f64]| -> f64 {
        let y = model.eps(th, &b).unwrap();
        y.iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = model.eps_forward(theta, &b).unwrap();
    let mut grad = vec![0.0; theta.len()];
    model.eps_backward(theta, &tape, &u, &mut grad);

    let kinds = [
        ".film.weight",
        ".film.bias",
        "conv0.weight",
        "conv.weight",
        "down.weight",
        "up.weight",
        "out.weight",
        "out.bias",
        "conv1.bias",
        "time.fc1.weight",
        "time.fc2.bias",
        "class.embedding",
    ];
    let mut worst = 0.0f64;
    for kind in kinds {
        let segs: Vec<_> = model
            .layout()
            .segments()
            .iter()
            .filter(|s| s.name.ends_with(kind))
            .collect();
        assert!(!segs.is_empty(), "{kind}");
        for _ in 0..coords_per_kind {
            let seg = segs[rng.below(segs.len())];
            let i = seg.offset + rng.below(seg.len);
            let h = 1e-4;
            let mut tp = theta.to_vec();
            tp[i] += h;
            let fp = objective(&tp);
            tp[i] -= 2.0 * h;
            let fm = objective(&tp);
            let fd = (fp - fm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-7);
            let rel = (grad[i] - fd).abs() / denom;
            assert!(
                rel <= 1e-3,
                "{} [{i}]: analytic {} vs fd {fd} (rel {rel})",
                seg.name,
                grad[i]
            );
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_at_init() {
    let m = small();
    let theta: Vec<f64> = m.init(&mut StreamKey::root(1).rng());
    check_gradients(&m, &theta, 10);
}

#[test]
fn gradients_match_finite_differences_at_generic_point() {
    let m = small();
    let mut rng = StreamKey::root(2).rng();
    let mut theta = vec![0.0f64; m.param_count()];
    for v in &mut theta {
        *v = 0.15 * rng.normal();
    }
    check_gradients(&m, &theta, 10);
}

#[test]
fn prediction_is_deterministic_and_shape_preserving() {
    let m = small();
    let theta: Vec<f32> = m.init(&mut StreamKey::root(4).rng());
    let mut x = vec![0.0f32; 64];
    StreamKey::root(5).rng().fill_normal(&mut x);
    let f = FlowField::uniform(8, 8, 2.0, 0.0);
    let a = m
        .predict_eps(&theta, &x, 10, Some(&f), SemanticCond::Class(1))
        .unwrap();
    let b = m
        .predict_eps(&theta, &x, 10, Some(&f), SemanticCond::Class(1))
        .unwrap();
    assert_eq!(a.len(), x.len());
    assert_eq!(a, b);
    let null = m
        .predict_eps(&theta, &x, 10, None, SemanticCond::Null)
        .unwrap();
    assert_ne!(a, null);
    assert!(m
        .predict_eps(&theta, &x[..10], 10, None, SemanticCond::Null)
        .is_err());
    assert!(m
        .predict_eps(
            &theta,
            &x,
            10,
            Some(&FlowField::zeros(4, 4)),
            SemanticCond::Null
        )
        .is_err());
}

#[test]
fn layout_partitions_parameters() {
    let m = small();
    let mut next = 0;
    for s in m.layout().segments() {
        assert_eq!(s.offset, next, "{}", s.name);
        next += s.len;
    }
    assert_eq!(next, m.layout().total());
    assert_eq!(small().layout(), m.layout());
}

#[test]
fn default_model_size_is_compact() {
    let m = FrameDenoiser::new(DenoiserConfig {
        geometry: FrameGeometry::new(1, 16, 16),
        classes: 3,
        width: 16,
        depth: 2,
    })
    .unwrap();
    let n = m.param_count();
    assert!((50_000..=200_000).contains(&n), "{n}");
}

#[test]
fn drop_rates_are_independent() {
    let f = FlowField::zeros(2, 2);
    let mut rng = StreamKey::root(9).rng();
    let (mut dy, mut dc, mut both) = (0u32, 0u32, 0u32);
    let trials = 100_000;
    for _ in 0..trials {
        let (y, c) = drop_conditions(&mut rng, Some(&f), SemanticCond::Class(1), 0.1);
        dy += y.is_none() as u32;
        dc += c.is_null() as u32;
        both += (y.is_none() && c.is_null()) as u32;
    }
    let (ry, rc, rb) = (
        dy as f64 / trials as f64,
        dc as f64 / trials as f64,
        both as f64 / trials as f64,
    );
    assert!((0.094..=0.106).contains(&ry), "{ry}");
    assert!((0.094..=0.106).contains(&rc), "{rc}");
    // Binomial sd of the joint rate at p = 0.01 is ~3.1e-4; allow 4 sd.
    assert!((rb - 0.01).abs() < 1.3e-3, "{rb}");
}

#[test]
fn drop_zero_keeps_and_point_one_covers_all_cases() {
    let f = FlowField::zeros(2, 2);
    let mut rng = StreamKey::root(10).rng();
    for _ in 0..1000 {
        let (y, c) = drop_conditions(&mut rng, Some(&f), SemanticCond::Class(0), 0.0);
        assert!(y.is_some() && c == SemanticCond::Class(0));
    }
    let mut seen = [false; 4];
    for _ in 0..1000 {
        let (y, c) = drop_conditions(&mut rng, Some(&f), SemanticCond::Class(0), 0.1);
        seen[(y.is_none() as usize) * 2 + c.is_null() as usize] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut opt = Adam::<f64>::new(3, 1e-3);
    let mut th = vec![1.0, -2.0, 0.5];
    opt.update(&mut th, &[0.0; 3]).unwrap();
    assert_eq!(th, [1.0, -2.0, 0.5]);
}

#[test]
fn adam_descends_a_parabola() {
    let mut opt = Adam::<f64>::new(1, 0.1);
    let mut th = vec![1.0];
    let g = [2.0 * th[0]];
    opt.update(&mut th, &g).unwrap();
    assert!(th[0] * th[0] < 1.0);
}

#[test]
fn adam_fits_linear_regression() {
    // y = 1.7 x - 0.4 + noise; the oracle is the closed-form least-squares fit.
    let mut rng = StreamKey::root(12).rng();
    let xs: Vec<f64> = (0..64).map(|_| rng.range(-1.0, 1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| 1.7 * x - 0.4 + 0.05 * rng.normal())
        .collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let w_opt = sxy / sxx;
    let b_opt = my - w_opt * mx;
    let loss = |w: f64, b: f64| {
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| (w * x + b - y).powi(2))
            .sum::<f64>()
            / n
    };
    let best = loss(w_opt, b_opt);

    let mut th = vec![0.0, 0.0];
    let mut opt = Adam::new(2, 0.05);
    for _ in 0..200 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            let r = th[0] * x + th[1] - y;
            gw += 2.0 * r * x / n;
            gb += 2.0 * r / n;
        }
        opt.update(&mut th, &[gw, gb]).unwrap();
    }
    assert!(
        loss(th[0], th[1]) - best <= 1e-4,
        "{} vs {best}",
        loss(th[0], th[1])
    );
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut opt = Adam::<f32>::new(1, 1e-3);
    assert!(opt.update(&mut [0.0], &[f32::NAN]).is_err());
}
