mod common;

use std::f64::consts::PI;

use common::*;
use proptest::prelude::*;
use tno::data::*;
use tno::error::Error;
use tno::tensor::Tensor;

#[test]
fn grf_values_stay_in_range() {
    for seed in 0..20 {
        let f = grf_sample(24, 24, 0.15, 0.002, 0.01, seed).unwrap();
        assert!(f.min() >= 0.002 && f.max() <= 0.01);
        assert!((f.min() - 0.002).abs() < 1e-15 && (f.max() - 0.01).abs() < 1e-15);
    }
}

#[test]
fn grf_is_deterministic_per_seed() {
    let a = grf_sample(16, 16, 0.1, 1.0, 2.0, 7).unwrap();
    let b = grf_sample(16, 16, 0.1, 1.0, 2.0, 7).unwrap();
    let c = grf_sample(16, 16, 0.1, 1.0, 2.0, 8).unwrap();
    assert_eq!(a.values.data(), b.values.data());
    assert_ne!(a.values.data(), c.values.data());
}

#[test]
fn grf_rejects_inverted_bounds() {
    assert!(grf_sample(8, 8, 0.1, 2.0, 1.0, 0).is_err());
    assert!(grf_sample(8, 8, 0.1, 0.0, 1.0, 0).is_err());
}

/// Lag along x at which the empirical autocorrelation, pooled over samples,
/// first drops to `exp(-1/2)`. For a Gaussian covariance `exp(-r^2 / 2l^2)`
/// that lag equals `l`.
fn autocorrelation_length(samples: &[Tensor<f64>], n: usize) -> f64 {
    let target = (-0.5f64).exp();
    let mut prev = 1.0;
    for lag in 1..n / 2 {
        let (mut cov, mut var) = (0.0, 0.0);
        for s in samples {
            let d = s.data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            for i in 0..n {
                for j in 0..n {
                    let a = d[i * n + j] - mean;
                    let b = d[i * n + (j + lag) % n] - mean;
                    cov += a * b;
                    var += a * a;
                }
            }
        }
        let rho = cov / var;
        if rho <= target {
            let frac = (prev - target) / (prev - rho);
            return (lag as f64 - 1.0 + frac) / n as f64;
        }
        prev = rho;
    }
    f64::INFINITY
}

#[test]
fn grf_autocorrelation_length_matches_length_scale() {
    let n = 64;
    for ell in [0.06, 0.1] {
        let samples: Vec<Tensor<f64>> = (0..100)
            .map(|s| grf_sample(n, n, ell, 1.0, 2.0, s).unwrap().values)
            .collect();
        let measured = autocorrelation_length(&samples, n);
        assert!((measured - ell).abs() / ell < 0.3, "l = {ell}: measured {measured}");
    }
}

#[test]
fn grf_is_the_same_function_on_nested_grids() {
    let g = Grf::new(0.15, 3).unwrap();
    let fields = g.eval_affine(&[(16, 16), (48, 48)], 0.0, 1.0).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            let a = fields[0].at(&[i, j]);
            let b = fields[1].at(&[3 * i + 1, 3 * j + 1]);
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn periodic_heat_conserves_mass_each_step() {
    let drift = periodic_mass_drift(24, None, 50, 1);
    assert!(drift < 1e-10, "{drift}");
}

#[test]
fn periodic_advection_diffusion_conserves_mass() {
    let drift = periodic_mass_drift(20, Some((0.7, -0.4)), 40, 3);
    assert!(drift < 1e-10, "{drift}");
}

#[test]
fn single_mode_decays_at_the_analytic_rate() {
    let err = mode_decay_error(64, 0.01, 400);
    assert!(err < 0.01, "{err}");
}

#[test]
fn heat_error_converges_at_second_order() {
    // Small fixed dt / dx^2 keeps the time error well below the space error;
    // near the stability limit the two cancel and hide the order.
    let kappa = 0.02;
    let t_end = 0.5;
    let mut errs = Vec::new();
    for n in [8usize, 16, 32] {
        let coeff = CoefficientField::constant(n, n, kappa).unwrap();
        let u0 = sine_mode(n);
        let dx = 1.0 / n as f64;
        let steps = ((t_end / (0.01 * dx * dx / kappa)).ceil()) as usize;
        let dt = t_end / steps as f64;
        let traj = solve_heat2d(&u0, &coeff, dt, steps, Boundary::Periodic).unwrap();
        let exact = (-8.0 * PI * PI * kappa * t_end).exp();
        let got = traj.snapshot(steps).unwrap();
        let err: f64 = got
            .data()
            .iter()
            .zip(u0.data())
            .map(|(g, s)| (g - exact * s).powi(2))
            .sum::<f64>()
            .sqrt()
            * dx;
        errs.push(err);
    }
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order > 1.8, "observed order {order} from {errs:?}");
    }
}

#[test]
fn advection_at_unit_courant_number_is_an_exact_shift() {
    assert!((courant_number(0.0, (2.0, 0.0), 1.0 / 64.0, 1.0 / 32.0, 1.0 / 32.0) - 1.0).abs() < 1e-15);
    assert_eq!(cfl_shift_mismatches(32, 5), 0);
}

#[test]
fn zero_velocity_advection_is_bitwise_heat() {
    let n = 16;
    let coeff = grf_sample(n, n, 0.2, 0.002, 0.01, 5).unwrap();
    let u0 = Grf::new(0.1, 6).unwrap().eval(n, n).unwrap();
    let dt = 0.5 * max_stable_dt(coeff.max(), (0.0, 0.0), 1.0 / n as f64, 1.0 / n as f64);
    let a = solve_heat2d(&u0, &coeff, dt, 30, Boundary::Periodic).unwrap();
    let b = solve_advdiff2d(&u0, &coeff, (0.0, 0.0), dt, 30).unwrap();
    assert_eq!(a.u.data(), b.u.data());
}

#[test]
fn constant_state_is_an_equilibrium() {
    let n = 12;
    let coeff = grf_sample(n, n, 0.2, 0.002, 0.01, 1).unwrap();
    let u0 = Tensor::full(&[n, n], 2.5).unwrap();
    let dt = 0.5 * max_stable_dt(coeff.max(), (0.3, 0.2), 1.0 / n as f64, 1.0 / n as f64);
    for traj in [
        solve_heat2d(&u0, &coeff, dt, 20, Boundary::Periodic).unwrap(),
        solve_advdiff2d(&u0, &coeff, (0.3, 0.2), dt, 20).unwrap(),
    ] {
        assert!(traj.u.data().iter().all(|&v| (v - 2.5).abs() < 1e-13));
    }
}

#[test]
fn dirichlet_solution_obeys_maximum_principle_and_decays() {
    let n = 16;
    let coeff = grf_sample(n, n, 0.2, 0.002, 0.01, 2).unwrap();
    let u0 = Tensor::full(&[n, n], 1.0).unwrap();
    let dt = 0.9 * max_stable_dt(coeff.max(), (0.0, 0.0), 1.0 / n as f64, 1.0 / n as f64);
    let traj = solve_heat2d(&u0, &coeff, dt, 200, Boundary::DirichletZero).unwrap();
    assert!(traj.u.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    let sums: Vec<f64> = traj.u.data().chunks(n * n).map(|c| c.iter().sum()).collect();
    assert!(sums.windows(2).all(|w| w[1] <= w[0]));
    assert!(sums.last().unwrap() < &sums[0]);
}

#[test]
fn unstable_time_step_is_rejected() {
    let n = 16;
    let coeff = CoefficientField::constant(n, n, 0.01).unwrap();
    let u0 = sine_mode(n);
    let dt = 1.5 * max_stable_dt(0.01, (0.0, 0.0), 1.0 / n as f64, 1.0 / n as f64);
    assert!(matches!(
        solve_heat2d(&u0, &coeff, dt, 3, Boundary::Periodic),
        Err(Error::Unstable(_))
    ));
    let dt = 0.5 * max_stable_dt(0.01, (0.0, 0.0), 1.0 / n as f64, 1.0 / n as f64);
    // Stable for diffusion alone, unstable once a fast flow is added.
    assert!(matches!(
        solve_advdiff2d(&u0, &coeff, (20.0, 0.0), dt, 3),
        Err(Error::Unstable(_))
    ));
}

#[test]
fn diffusion_stability_bound_matches_closed_form() {
    let (dx, dy, kappa) = (1.0 / 32.0, 1.0 / 24.0, 0.01);
    let closed = dx * dx * dy * dy / (2.0 * kappa * (dx * dx + dy * dy));
    assert!((max_stable_dt(kappa, (0.0, 0.0), dx, dy) - closed).abs() < 1e-15);
}

fn tiny_dataset(kind: PdeKind) -> DatasetConfig {
    DatasetConfig {
        kind,
        resolution: 8,
        fine_resolution: Some(16),
        n_train: 4,
        n_val: 2,
        n_test: 2,
        snapshots: 10,
        snapshot_dt: 0.02,
        ..DatasetConfig::default()
    }
}

#[test]
fn normalised_training_split_has_zero_mean_unit_std() {
    let ds = generate_dataset(&tiny_dataset(PdeKind::Heat)).unwrap();
    let limit = ds.config.train_snapshots();
    let plane = 64;
    let mut frames = Vec::new();
    for t in &ds.train {
        let z = znorm_apply(&t.u, &ds.norm).unwrap();
        frames.extend(z.data()[..limit * plane].chunks(plane).map(<[f64]>::to_vec));
    }
    let n = frames.len() as f64;
    for p in 0..plane {
        let mean = frames.iter().map(|f| f[p]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f[p] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4, "pixel {p}: mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-4, "pixel {p}: std {}", var.sqrt());
    }
}

#[test]
fn znorm_roundtrip() {
    let ds = generate_dataset(&tiny_dataset(PdeKind::Heat)).unwrap();
    let x = &ds.test[0].u;
    let back = znorm_invert(&znorm_apply(x, &ds.norm).unwrap(), &ds.norm).unwrap();
    assert!(max_rel_diff(back.data(), x.data()) < 1e-6);
}

#[test]
fn bundles_of_a_short_trajectory() {
    let n = 4;
    let coeff = CoefficientField::constant(n, n, 0.01).unwrap();
    let u = Tensor::from_fn(&[9, n, n], |i| (i / (n * n)) as f64).unwrap();
    let traj = Trajectory {
        u,
        dt: 0.1,
        dx: 0.25,
        dy: 0.25,
        coeff,
        scalar_param: None,
    };
    let mask = make_mask(n, n, MaskKind::Full).unwrap();
    let b = make_bundles(&traj, 1, 4, 2, 8, &mask).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].t0_index, 0);
    assert_eq!(b[0].u_hist.shape(), [1, n, n]);
    assert_eq!(b[0].u_fut.shape(), [8, n, n]);
    let firsts: Vec<f64> = (0..8).map(|k| b[0].u_fut.at(&[k, 0, 0])).collect();
    assert_eq!(firsts, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let b = make_bundles(&traj, 2, 3, 1, 2, &mask).unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(b.iter().map(|s| s.t0_index).collect::<Vec<_>>(), [1, 3, 5]);
    assert_eq!(b[2].u_hist.at(&[0, 0, 0]), 4.0);
    assert_eq!(b[2].u_fut.at(&[2, 0, 0]), 8.0);
    assert!(make_bundles(&traj, 2, 4, 2, 1, &mask).is_err());
}

#[test]
fn coordinate_grid_lies_in_unit_box() {
    let g = coordinate_grid(5, 7, 0.25);
    assert_eq!(g.shape(), [3, 5, 7]);
    assert!(g.data()[..35].iter().all(|&t| t == 0.25));
    assert!(g.data()[35..].iter().all(|&v| (-1.0..=1.0).contains(&v)));
    assert!((g.at(&[1, 0, 0]) + g.at(&[1, 0, 6])).abs() < 1e-15);
    assert!((g.at(&[2, 0, 0]) + g.at(&[2, 4, 0])).abs() < 1e-15);
    assert_eq!(normalized_time(0, 11), -1.0);
    assert_eq!(normalized_time(10, 11), 1.0);
}

#[test]
fn block_mean_of_upsampled_smooth_field_returns_field() {
    let x = Grf::new(0.25, 4).unwrap().eval_standardized(128, 128).unwrap();
    let round = resample_planes(&resample_planes(&x, Resample::Up2).unwrap(), Resample::Down2).unwrap();
    let err = round.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        / x.data().iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn downsampling_takes_block_means() {
    let x = Tensor::new(&[2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
    let d = resample_planes(&x, Resample::Down2).unwrap();
    assert_eq!(d.data(), [2.0, 6.0]);
    assert!(resample_planes(&Tensor::<f64>::zeros(&[3, 4]).unwrap(), Resample::Down2).is_err());
}

#[test]
fn resampled_trajectory_keeps_metadata() {
    let ds = generate_dataset(&tiny_dataset(PdeKind::Heat)).unwrap();
    let up = resample_grid(&ds.test[0], Resample::Up2).unwrap();
    assert_eq!(up.u.shape(), [10, 16, 16]);
    assert_eq!(up.coeff.values.shape(), [16, 16]);
    assert_eq!(up.dx, 1.0 / 16.0);
}

#[test]
fn random_holes_hit_the_requested_fraction() {
    for (h, w) in [(32, 32), (17, 23), (10, 10)] {
        let m = make_mask(h, w, MaskKind::RandomHoles { fraction: 0.1, seed: 3 }).unwrap();
        let holes = m.data().iter().filter(|&&v| v == 0.0).count() as f64;
        assert!((holes - 0.1 * (h * w) as f64).abs() <= 1.0);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    assert!(make_mask(8, 8, MaskKind::RandomHoles { fraction: 0.7, seed: 0 }).is_err());
}

#[test]
fn half_domain_mask_keeps_left_columns() {
    let m = make_mask(3, 5, MaskKind::HalfDomain).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            assert_eq!(m.at(&[i, j]), if j < 3 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let cfg = tiny_dataset(PdeKind::AdvectionDiffusion);
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a.train[1].u.data(), b.train[1].u.data());
    assert_eq!(a.test_fine[0].u.data(), b.test_fine[0].u.data());
    assert_eq!(a.train[0].u.shape(), [10, 8, 8]);
    assert_eq!(a.test_fine[0].u.shape(), [10, 16, 16]);
    assert_eq!(input_function(&a.train[0]).shape(), [2, 8, 8]);
    assert!(a.train.iter().all(|t| t.scalar_param.is_some()));
}

#[test]
fn fine_split_solves_the_same_problems() {
    let ds = generate_dataset(&tiny_dataset(PdeKind::Heat)).unwrap();
    for (c, f) in ds.test.iter().zip(&ds.test_fine) {
        let down = resample_planes(&f.u, Resample::Down2).unwrap();
        let err = max_rel_diff(down.data(), c.u.data());
        assert!(err < 0.2, "{err}");
    }
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&tiny_dataset(PdeKind::Heat)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.config, ds.config);
    assert_eq!(back.train.len(), 4);
    assert_eq!(back.test_fine.len(), 2);
    // Stored in single precision.
    let a: Vec<f32> = ds.val[1].u.data().iter().map(|&v| v as f32).collect();
    let b: Vec<f32> = back.val[1].u.data().iter().map(|&v| v as f32).collect();
    assert_eq!(a, b);
    assert!(max_rel_diff(back.norm.u_std.data(), ds.norm.u_std.data()) < 1e-6);
}

#[test]
fn loading_without_manifest_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::MissingInput(_))));
}

#[test]
fn invalid_dataset_config_is_rejected() {
    let cfg = DatasetConfig {
        kappa_min: 0.02,
        kappa_max: 0.01,
        ..tiny_dataset(PdeKind::Heat)
    };
    assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn heat_mass_is_conserved_for_random_fields(seed in 0u64..10_000, n in 6usize..20) {
        let coeff = grf_sample(n, n, 0.2, 0.001, 0.02, seed).unwrap();
        let u0 = Grf::new(0.15, seed + 1).unwrap().eval(n, n).unwrap().map(|v| v + 2.0);
        let dt = max_stable_dt(coeff.max(), (0.0, 0.0), 1.0 / n as f64, 1.0 / n as f64);
        let traj = solve_heat2d(&u0, &coeff, dt, 10, Boundary::Periodic).unwrap();
        let sums: Vec<f64> = traj.u.data().chunks(n * n).map(|c| c.iter().sum()).collect();
        for w in sums.windows(2) {
            prop_assert!(((w[1] - w[0]) / w[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn heat_stays_within_initial_bounds(seed in 0u64..10_000) {
        let n = 12;
        let coeff = grf_sample(n, n, 0.2, 0.001, 0.02, seed).unwrap();
        let u0 = Grf::new(0.1, seed).unwrap().eval(n, n).unwrap();
        let (lo, hi) = u0.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let dt = max_stable_dt(coeff.max(), (0.0, 0.0), 1.0 / n as f64, 1.0 / n as f64);
        let traj = solve_heat2d(&u0, &coeff, dt, 20, Boundary::Periodic).unwrap();
        prop_assert!(traj.u.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn mask_is_binary_with_a_valid_pixel(h in 1usize..20, w in 1usize..20, f in 0.0f64..0.5, seed in 0u64..100) {
        let m = make_mask(h, w, MaskKind::RandomHoles { fraction: f, seed }).unwrap();
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(m.data().iter().any(|&v| v == 1.0));
    }
}
