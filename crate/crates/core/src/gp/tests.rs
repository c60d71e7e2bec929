use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::log_marginal_likelihood;
use super::*;
use crate::rng;

fn hp(sf: f64, l: f64, sw: f64, ss: f64) -> GpHyperParams {
    GpHyperParams {
        signal_std: sf,
        lengthscale: l,
        noise_std: sw,
        input_noise_std: ss,
    }
}

fn random_data(seed: u64, n: usize, range: f64) -> TrainingData {
    let mut r = rng::stream(seed, 0);
    let inputs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..range)).collect();
    let targets: Vec<f64> = inputs.iter().map(|s| (s / 3.0).sin() + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
    TrainingData::new(inputs, targets)
}

/// Draw targets from the GP prior plus noise at the given inputs.
fn sample_gp(inputs: &[f64], truth: &GpHyperParams, seed: u64) -> Vec<f64> {
    let n = inputs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(inputs[i], inputs[j], truth) + if i == j { 1e-9 } else { 0.0 }
    });
    let l = k.cholesky().expect("prior covariance").l();
    let mut r = rng::stream(seed, 1);
    let z = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    let f = l * z;
    (0..n)
        .map(|i| f[i] + truth.noise_std * r.sample::<f64, _>(StandardNormal))
        .collect()
}

#[test]
fn kernel_values() {
    let h = hp(1.0, 1.0, 0.1, 0.0);
    assert_relative_eq!(kernel(0.0, 1.0, &h), (-0.5f64).exp(), epsilon = 1e-15);
    assert_relative_eq!(kernel(0.3, 0.4, &h), kernel(0.4, 0.3, &h));
    let h2 = hp(2.5, 3.0, 0.1, 0.0);
    assert_eq!(kernel(7.0, 7.0, &h2), 6.25);
    assert!(kernel(0.0, 1e3, &h2) < 1e-300);
}

#[test]
fn empty_model_is_prior() {
    let m = GpModel::prior(RegressionMode::Standard, hp(0.7, 2.0, 0.1, 0.0)).unwrap();
    let p = m.predict(&[-3.0, 0.0, 100.0]);
    assert_eq!(p.mean, vec![0.0; 3]);
    for v in p.variance {
        assert_relative_eq!(v, 0.49, max_relative = 1e-15);
    }
}

#[test]
fn one_point_mean() {
    let h = hp(1.3, 2.0, 0.4, 0.0);
    let (s0, w0) = (1.0, 0.8);
    let m = GpModel::condition(RegressionMode::Standard, h, TrainingData::new(vec![s0], vec![w0]), None).unwrap();
    for s in [-2.0, 0.5, 1.0, 4.0] {
        let expected = kernel(s, s0, &h) * w0 / (1.69 + 0.16);
        assert_relative_eq!(m.predict(&[s]).mean[0], expected, max_relative = 1e-12);
    }
}

#[test]
fn interpolates_with_vanishing_noise() {
    let data = TrainingData::new(vec![0.0, 2.0, 5.0], vec![0.3, -0.1, 0.7]);
    let m = GpModel::condition(RegressionMode::Standard, hp(1.0, 1.5, 1e-6, 0.0), data.clone(), None).unwrap();
    let p = m.predict(&data.inputs);
    for (a, b) in p.mean.iter().zip(&data.targets) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn antisymmetric_data_gives_negative_slope_at_origin() {
    let data = TrainingData::new(vec![-1.0, 1.0], vec![0.5, -0.5]);
    let m = GpModel::condition(RegressionMode::Standard, hp(1.0, 1.0, 0.1, 0.0), data, None).unwrap();
    assert!(m.predict(&[0.0]).mean[0].abs() < 1e-15);
    assert!(m.posterior_mean_slope(&[0.0])[0] < 0.0);
}

#[test]
fn flat_targets_give_flat_mean() {
    let c = 0.4;
    let inputs: Vec<f64> = (0..81).map(|i| i as f64 * 0.5).collect();
    let data = TrainingData::new(inputs, vec![c; 81]);
    let h = hp(1.0, 2.0, 1e-5, 0.0);
    let m = GpModel::condition(RegressionMode::Standard, h, data, None).unwrap();
    let q: Vec<f64> = (0..30).map(|i| 10.0 + i as f64 * 0.69).collect();
    for s in m.posterior_mean_slope(&q) {
        assert!(s.abs() <= 1e-6 * c / h.lengthscale, "{s}");
    }
}

#[test]
fn zero_input_noise_matches_standard_gp() {
    let data = random_data(7, 50, 25.0);
    let slopes: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let std = GpModel::condition(RegressionMode::Standard, hp(1.0, 2.0, 0.1, 0.0), data.clone(), None).unwrap();
    let nigp = GpModel::condition(RegressionMode::NoisyInput, hp(1.0, 2.0, 0.1, 0.0), data, Some(slopes)).unwrap();
    let q: Vec<f64> = (0..60).map(|i| i as f64 * 0.45).collect();
    let (a, b) = (std.predict(&q), nigp.predict(&q));
    for i in 0..q.len() {
        assert!((a.mean[i] - b.mean[i]).abs() < 1e-10);
        assert!((a.variance[i] - b.variance[i]).abs() < 1e-10);
    }
}

#[test]
fn input_noise_inflates_steep_points() {
    let data = random_data(8, 50, 25.0);
    let slopes = vec![1.0; 50];
    let std = GpModel::condition(RegressionMode::Standard, hp(1.0, 2.0, 0.1, 0.3), data.clone(), None).unwrap();
    let nigp = GpModel::condition(RegressionMode::NoisyInput, hp(1.0, 2.0, 0.1, 0.3), data, Some(slopes)).unwrap();
    let q = [3.0, 10.0];
    let (a, b) = (std.predict(&q), nigp.predict(&q));
    assert!(b.variance[0] > a.variance[0] && b.variance[1] > a.variance[1]);
}

#[test]
fn fit_recovers_generating_hyperparameters() {
    let truth = hp(1.0, 5.0, 0.1, 0.0);
    let mut r = rng::stream(12, 0);
    let inputs: Vec<f64> = (0..200).map(|_| r.random_range(0.0..100.0)).collect();
    let targets = sample_gp(&inputs, &truth, 12);
    let data = TrainingData::new(inputs, targets);
    let init = GpHyperParams::from_data(&data.inputs, &data.targets);
    let m = fit(data.clone(), RegressionMode::Standard, init, &FitOptions::default()).unwrap();
    let fitted = m.hyper;
    for (a, b) in [
        (fitted.signal_std, truth.signal_std),
        (fitted.lengthscale, truth.lengthscale),
        (fitted.noise_std, truth.noise_std),
    ] {
        assert!(a / b < 2.0 && b / a < 2.0, "fitted {fitted:?}");
    }
    let at_truth = log_marginal_likelihood(&truth, RegressionMode::Standard, &data, None).unwrap().0;
    assert!(m.diagnostics.log_marginal_likelihood >= at_truth - 1e-6);
}

#[test]
fn identical_inputs_fit_with_jitter() {
    let data = TrainingData::new(vec![1.0, 1.0], vec![0.2, 0.2]);
    let m = fit(data, RegressionMode::Standard, hp(0.2, 1.0, 0.01, 0.0), &FitOptions::default()).unwrap();
    let p = m.predict(&[0.0, 1.0, 2.0]);
    assert!(p.mean.iter().chain(&p.variance).all(|v| v.is_finite()));
}

#[test]
fn fit_rejects_tiny_or_bad_data() {
    let one = TrainingData::new(vec![1.0], vec![0.2]);
    assert!(fit(one, RegressionMode::Standard, hp(1.0, 1.0, 0.1, 0.0), &FitOptions::default()).is_err());
    let nan = TrainingData::new(vec![1.0, 2.0], vec![0.2, f64::NAN]);
    assert!(fit(nan, RegressionMode::Standard, hp(1.0, 1.0, 0.1, 0.0), &FitOptions::default()).is_err());
}

#[test]
fn noisy_input_fit_is_deterministic_and_round_trips() {
    let data = random_data(13, 80, 30.0);
    let opts = FitOptions {
        restarts: 2,
        seed: 5,
        ..FitOptions::default()
    };
    let init = GpHyperParams::from_data(&data.inputs, &data.targets);
    let a = fit(data.clone(), RegressionMode::NoisyInput, init, &opts).unwrap();
    let b = fit(data, RegressionMode::NoisyInput, init, &opts).unwrap();
    let json = a.to_json().unwrap();
    assert_eq!(json, b.to_json().unwrap());
    assert!(a.hyper.input_noise_std > 0.0 && a.slopes.is_some());

    let back = GpModel::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    let q: Vec<f64> = (0..50).map(|i| i as f64 * 0.7).collect();
    let (p, pb) = (a.predict(&q), back.predict(&q));
    for i in 0..q.len() {
        assert!((p.mean[i] - pb.mean[i]).abs() <= 1e-12);
        assert!((p.variance[i] - pb.variance[i]).abs() <= 1e-12);
    }
}

#[test]
fn warm_refit_uses_previous_model() {
    let data = random_data(14, 60, 30.0);
    let opts = FitOptions {
        restarts: 1,
        ..FitOptions::default()
    };
    let init = GpHyperParams::from_data(&data.inputs, &data.targets);
    let first = fit(data.clone(), RegressionMode::NoisyInput, init, &opts).unwrap();
    let mut more = data;
    let extra = random_data(15, 60, 30.0);
    more.inputs.extend(extra.inputs);
    more.targets.extend(extra.targets);
    let second = fit_from(&first, more, first.hyper, &opts).unwrap();
    assert_eq!(second.len(), 120);
    assert_eq!(second.mode, RegressionMode::NoisyInput);
    assert!(second.diagnostics.log_marginal_likelihood.is_finite());
}

#[test]
fn rejects_unknown_format() {
    let m = GpModel::condition(RegressionMode::Standard, hp(1.0, 1.0, 0.1, 0.0), random_data(1, 5, 5.0), None).unwrap();
    let json = m.to_json().unwrap().replace("gpmodel/1", "gpmodel/9");
    assert!(GpModel::from_json(&json).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_matrix_is_psd(
        sf in 0.1f64..3.0,
        l in 0.1f64..10.0,
        s in prop::collection::vec(0.0f64..40.0, 2..50),
    ) {
        let h = hp(sf, l, 0.1, 0.0);
        let n = s.len();
        let k = DMatrix::from_fn(n, n, |i, j| kernel(s[i], s[j], &h));
        let min = crate::linalg::min_eigenvalue(&k);
        prop_assert!(min >= -1e-8 * sf * sf, "min eigenvalue {}", min);
    }

    #[test]
    fn variance_bounded_by_prior(seed in any::<u64>(), sf in 0.2f64..2.0, l in 0.3f64..5.0, sw in 0.01f64..0.5) {
        let m = GpModel::condition(RegressionMode::Standard, hp(sf, l, sw, 0.0), random_data(seed, 40, 20.0), None).unwrap();
        let q: Vec<f64> = (0..100).map(|i| -10.0 + i as f64 * 0.4).collect();
        let p = m.predict(&q);
        prop_assert!(p.variance.iter().all(|v| *v >= 0.0 && *v <= sf * sf * (1.0 + 1e-10)));
    }

    #[test]
    fn adding_a_point_never_increases_variance(
        seed in any::<u64>(),
        sf in 0.2f64..2.0,
        l in 0.3f64..5.0,
        sw in 0.01f64..0.5,
        n in 1usize..20,
        q in -2.0f64..17.0,
        extra in 0.0f64..15.0,
    ) {
        let h = hp(sf, l, sw, 0.0);
        let mut data = random_data(seed, n, 15.0);
        let before = GpModel::condition(RegressionMode::Standard, h, data.clone(), None).unwrap().predict(&[q]);
        data.inputs.push(extra);
        data.targets.push(0.5);
        let after = GpModel::condition(RegressionMode::Standard, h, data, None).unwrap().predict(&[q]);
        prop_assert!(after.variance[0] <= before.variance[0] + 1e-12);
    }

    #[test]
    fn slope_matches_finite_differences(seed in any::<u64>(), l in 1.0f64..5.0, s in 0.0f64..30.0) {
        let h = hp(1.0, l, 0.1, 0.0);
        let m = GpModel::condition(RegressionMode::Standard, h, random_data(seed, 40, 30.0), None).unwrap();
        let step = 1e-5 * l;
        let fd = (m.predict(&[s + step]).mean[0] - m.predict(&[s - step]).mean[0]) / (2.0 * step);
        let slope = m.posterior_mean_slope(&[s])[0];
        prop_assert!((slope - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{} vs {}", slope, fd);
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences(
        seed in any::<u64>(),
        sf in 0.3f64..2.0,
        l in 0.5f64..6.0,
        sw in 0.05f64..0.5,
        ss in 0.05f64..0.5,
    ) {
        let data = random_data(seed, 30, 20.0);
        let slopes: Vec<f64> = (0..30).map(|i| 0.5 * (i as f64).cos()).collect();
        let (_, g) = log_marginal_likelihood(&hp(sf, l, sw, ss), RegressionMode::NoisyInput, &data, Some(&slopes)).unwrap();
        let theta = [sf.ln(), l.ln(), sw.ln(), ss.ln()];
        let eval = |t: &[f64; 4]| {
            let p = hp(t[0].exp(), t[1].exp(), t[2].exp(), t[3].exp());
            log_marginal_likelihood(&p, RegressionMode::NoisyInput, &data, Some(&slopes)).unwrap().0
        };
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..4 {
            let e = 1e-5;
            let (mut up, mut dn) = (theta, theta);
            up[i] += e;
            dn[i] -= e;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * e);
            prop_assert!(
                (g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3 * scale),
                "component {}: analytic {} vs fd {}", i, g[i], fd
            );
        }
    }
}
