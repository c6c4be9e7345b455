use amortized_transport::forward_models::{
    arrival_times, darcy_solve, wave_solve, DarcyConfig, RickerSource, WaveConfig,
};
use amortized_transport::grf::{grid_points, GridField};

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let m = m + m % 2;
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn log_perm(x: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * x).sin() + 0.3 * (std::f64::consts::PI * x).cos()
}

/// Exact pressure for `−(e^u p')' = 1`, `p(0) = p(1) = 0`, by quadrature of
/// `p(x) = ∫₀ˣ (C − s) e^{−u(s)} ds`.
fn exact_pressure(xs: &[f64]) -> Vec<f64> {
    let inv_a = |s: f64| (-log_perm(s)).exp();
    let c = simpson(|s| s * inv_a(s), 0.0, 1.0, 200_000) / simpson(inv_a, 0.0, 1.0, 200_000);
    xs.iter()
        .map(|&x| simpson(|s| (c - s) * inv_a(s), 0.0, x, 20_000))
        .collect()
}

fn darcy_max_error(n: usize) -> f64 {
    let u = GridField::from_fn(n, log_perm).unwrap();
    let p = darcy_solve(&u, &DarcyConfig::with_n(n)).unwrap();
    let exact = exact_pressure(&grid_points::<f64>(n));
    p.values()
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn darcy_unit_coefficient_matches_parabola() {
    for n in [8usize, 64, 257, 1024] {
        let p = darcy_solve(&GridField::<f64>::zeros(n).unwrap(), &DarcyConfig::with_n(n)).unwrap();
        let err = grid_points::<f64>(n)
            .iter()
            .zip(p.values())
            .map(|(x, v)| (v - x * (1.0 - x) / 2.0).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "n={n} err={err:e}");
    }
}

#[test]
fn darcy_is_second_order_for_smooth_coefficients() {
    let ns = [16usize, 32, 64, 128, 256];
    let errs: Vec<f64> = ns.iter().map(|&n| darcy_max_error(n)).collect();
    for (w, e) in ns.windows(2).zip(errs.windows(2)) {
        let order = (e[0] / e[1]).log2();
        assert!(order >= 1.9, "n {} -> {}: order {order:.3} (errors {:e}, {:e})", w[0], w[1], e[0], e[1]);
    }
}

fn constant_speed_arrivals(c: f64, receivers: Vec<f64>) -> (Vec<f64>, f64) {
    let cfg = WaveConfig {
        n: 400,
        t_final: 0.7,
        receivers,
        source: RickerSource::default(),
        ..WaveConfig::default()
    };
    let speed = GridField::new(vec![c; cfg.n]).unwrap();
    let sol = wave_solve(&speed, &cfg).unwrap();
    let t = arrival_times(&sol.records(&cfg.receivers), sol.dt, cfg.threshold_frac).unwrap();
    (t, sol.dt)
}

#[test]
fn wave_arrivals_follow_ray_travel_time() {
    // first receiver calibrates the source onset, the rest are predicted from d/c
    let distances = [0.05, 0.1, 0.2, 0.3, 0.4];
    let receivers: Vec<f64> = distances.iter().map(|d| 0.5 + d).collect();
    for c in [1.0, 1.3] {
        let (t, dt) = constant_speed_arrivals(c, receivers.clone());
        let onset = t[0] - distances[0] / c;
        for (d, ti) in distances.iter().zip(&t).skip(1) {
            let oracle = d / c + onset;
            assert!((ti - oracle).abs() <= 3.0 * dt, "c={c} d={d}: {ti} vs {oracle} (dt {dt})");
        }
    }
}

#[test]
fn wave_doubling_speed_halves_travel_time() {
    let distances = [0.05, 0.15, 0.25];
    let receivers: Vec<f64> = distances.iter().map(|d| 0.5 + d).collect();
    let (t1, dt1) = constant_speed_arrivals(0.8, receivers.clone());
    let (t2, dt2) = constant_speed_arrivals(1.6, receivers);
    for i in 1..distances.len() {
        let travel1 = t1[i] - t1[0];
        let travel2 = t2[i] - t2[0];
        assert!((travel2 - travel1 / 2.0).abs() <= 3.0 * dt1.max(dt2), "{travel1} {travel2}");
    }
}
