use ivio::bias_net::{ConstantBias, ZeroBias};
use ivio::dataio::{synthesize, BiasProfile, Primitive, Synthetic, TrajectorySpec};
use ivio::liegroup::{se23_exp, se23_log};
use ivio::msckf::{initial_covariance, run_vio, FilterConfig, FilterState, Vio};
use ivio::{ImuBias, NoiseParams, Timestamp, Vector9};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spec(primitive: Primitive, duration: f64, seed: u64) -> TrajectorySpec {
    TrajectorySpec {
        primitive,
        duration,
        seed,
        ..TrajectorySpec::default()
    }
}

fn noisy(mut s: TrajectorySpec) -> TrajectorySpec {
    s.noise = NoiseParams::euroc();
    s.pixel_noise = 1.0;
    s.camera.sigma_px = 1.0;
    s
}

fn constant_bias() -> BiasProfile {
    BiasProfile::Constant {
        gyro: [0.01, -0.02, 0.015],
        accel: [0.1, -0.05, 0.08],
    }
}

fn run(
    s: &Synthetic,
    predictor: &dyn ivio::bias_net::BiasPredictor,
    noise: &NoiseParams,
) -> Vec<(Timestamp, ivio::ExtendedPose)> {
    let d = &s.dataset;
    run_vio(
        &d.imu,
        &d.frames,
        predictor,
        &d.camera,
        noise,
        &FilterConfig::default(),
        &d.ground_truth[0].1,
    )
    .unwrap()
    .trajectory
}

#[test]
fn noiseless_closed_loop_stays_on_ground_truth() {
    let s = synthesize(&spec(Primitive::Lissajous, 30.0, 31)).unwrap();
    let traj = run(&s, &ZeroBias, &NoiseParams::euroc());
    let (t, last) = traj.last().unwrap();
    let (tg, gt) = s.dataset.ground_truth.last().unwrap();
    assert_eq!(t, tg);
    let err = (last.position - gt.position).norm();
    assert!(err <= 1e-3, "final position error {err}");
}

#[test]
fn true_constant_bias_cancels_exactly() {
    let base = noisy(spec(Primitive::Circle, 10.0, 32));
    let biased = synthesize(&TrajectorySpec {
        bias: constant_bias(),
        ..base.clone()
    })
    .unwrap();
    let clean = synthesize(&base).unwrap();
    let BiasProfile::Constant { gyro, accel } = constant_bias() else {
        unreachable!()
    };
    let truth = ConstantBias(ImuBias::new(gyro.into(), accel.into()));
    let a = run(&biased, &truth, &base.noise);
    let b = run(&clean, &ZeroBias, &base.noise);
    assert_eq!(a.len(), b.len());
    let worst = a
        .iter()
        .zip(&b)
        .map(|((_, x), (_, y))| {
            (x.position - y.position)
                .norm()
                .max((x.velocity - y.velocity).norm())
        })
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn one_second_of_propagation_with_true_bias_tracks_ground_truth() {
    let s = synthesize(&TrajectorySpec {
        bias: constant_bias(),
        ..spec(Primitive::RandomSpline, 1.0, 33)
    })
    .unwrap();
    let d = &s.dataset;
    let noise = NoiseParams::euroc();
    let mut fs = FilterState::new(
        d.imu[0].t,
        d.ground_truth[0].1.clone(),
        &initial_covariance([1e-4; 3]),
    )
    .unwrap();
    for k in 0..d.imu.len() - 1 {
        fs.propagate(&d.imu[k], d.imu[k + 1].t, &s.true_bias[k], &noise)
            .unwrap();
    }
    let gt = &d.ground_truth.last().unwrap().1;
    let err = (fs.pose().position - gt.position).norm();
    assert!(err <= 1e-6, "{err:e}");
}

fn velocity_errors(traj: &[(Timestamp, ivio::ExtendedPose)], s: &Synthetic) -> Vec<f64> {
    traj.iter()
        .zip(&s.dataset.ground_truth)
        .map(|((t, x), (tg, g))| {
            assert_eq!(t, tg);
            (x.velocity - g.velocity).norm()
        })
        .collect()
}

fn window_max(e: &[f64], from: f64, to: f64) -> f64 {
    let rate = 200.0;
    e[(from * rate) as usize..(to * rate) as usize]
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// With the true bias supplied the filter is consistent, so velocity
/// re-converges once features return.
#[test]
fn blackout_grows_error_then_recovers() {
    let s0 = noisy(TrajectorySpec {
        bias: constant_bias(),
        ..spec(Primitive::Circle, 20.0, 34)
    });
    let s = synthesize(&s0).unwrap();
    let (w0, w1) = (8.0, 11.0);
    let first = s.dataset.imu[0].t;
    let mut dark = s.clone();
    dark.dataset = s
        .dataset
        .without_frames_in(first.offset_secs(w0), first.offset_secs(w1));
    let BiasProfile::Constant { gyro, accel } = constant_bias() else {
        unreachable!()
    };
    let truth = ConstantBias(ImuBias::new(gyro.into(), accel.into()));
    let base = velocity_errors(&run(&s, &truth, &s0.noise), &s);
    let black = velocity_errors(&run(&dark, &truth, &s0.noise), &s);

    // identical before the window
    assert_eq!(
        base[..(w0 * 200.0) as usize],
        black[..(w0 * 200.0) as usize]
    );
    // IMU-only drift inside the window
    let end_base = window_max(&base, w1 - 0.5, w1);
    let end_black = window_max(&black, w1 - 0.5, w1);
    assert!(end_black > 3.0 * end_base, "{end_black} vs {end_base}");
    // smooth growth: no jumps between consecutive samples
    let jumps = black[(w0 * 200.0) as usize..(w1 * 200.0) as usize]
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    assert!(jumps < 0.01, "{jumps}");
    // back near the baseline a few seconds after features return
    let late_base = window_max(&base, w1 + 4.0, 20.0);
    let late_black = window_max(&black, w1 + 4.0, 20.0);
    assert!(
        late_black < 0.5 * end_black && late_black < 3.0 * late_base.max(0.01),
        "{late_black} vs {late_base}"
    );
}

/// Time-averaged NEES of one run after a sampled initial error.
fn run_nees(seed: u64, window: usize) -> f64 {
    let variance = [1e-6; 3];
    let s0 = noisy(spec(Primitive::Lissajous, 6.0, 700 + seed));
    let s = synthesize(&s0).unwrap();
    let d = &s.dataset;
    let cfg = FilterConfig {
        window,
        initial_variance: variance,
        min_parallax_deg: 2.0,
        ..FilterConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = Vector9::from_fn(|i, _| variance[i / 3].sqrt() * rng.sample::<f64, _>(StandardNormal));
    let start = se23_exp(&xi).unwrap().compose(&d.ground_truth[0].1);
    let mut vio = Vio::new(
        d.imu[0].t,
        start,
        &ZeroBias,
        d.camera.clone(),
        s0.noise,
        cfg,
    )
    .unwrap();
    let (mut next, mut total, mut count) = (0, 0.0, 0);
    for (k, u) in d.imu.iter().enumerate() {
        vio.push_imu(u).unwrap();
        while next < d.frames.len() && d.frames[next].t <= u.t {
            vio.push_frame(&d.frames[next]).unwrap();
            next += 1;
            let st = vio.state();
            let e = se23_log(&d.ground_truth[k].1.compose(&st.pose().inverse())).unwrap();
            total += (e.transpose() * st.current_covariance().try_inverse().unwrap() * e)[(0, 0)];
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn doubling_the_window_leaves_nees_statistically_unchanged() {
    let runs = 16;
    let stats = |window: usize| {
        let v: Vec<f64> = (0..runs).map(|r| run_nees(r, window)).collect();
        let mean = v.iter().sum::<f64>() / runs as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        (mean, var)
    };
    let (m1, v1) = stats(11);
    let (m2, v2) = stats(22);
    let se = ((v1 + v2) / runs as f64).sqrt();
    assert!((m1 - m2).abs() <= 3.0 * se, "{m1} vs {m2}, se {se}");
    // both near the state dimension
    for m in [m1, m2] {
        assert!((6.0..13.0).contains(&m), "{m}");
    }
}
