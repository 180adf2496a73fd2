mod common;

use std::f64::consts::PI;

use common::*;
use hwlab::diagnostics::*;
use hwlab::hwsim::{simulate, HwParams, PlasmaState, SimConfig};
use hwlab::numerics::{fd_deriv, make_grid, Axis, Field, Grid};
use proptest::prelude::*;

fn field_fn(g: Grid, f: impl Fn(f64, f64) -> f64) -> Field {
    let mut values = Vec::with_capacity(g.len());
    for iy in 0..g.n {
        for ix in 0..g.n {
            values.push(f(ix as f64 * g.dx, iy as f64 * g.dx));
        }
    }
    Field { grid: g, values }
}

fn raw_state(phi: Field, n: Field) -> PlasmaState {
    PlasmaState { omega: Field::zeros(phi.grid), phi, n, t: 0.0 }
}

#[test]
fn gamma_n_trivial_cases() {
    let g = make_grid(32, 0.6).unwrap();
    let s = raw_state(random_field(g, 1), Field { grid: g, values: vec![0.7; g.len()] });
    assert!(gamma_n(&s).abs() <= 1e-12);
    let s = raw_state(Field { grid: g, values: vec![2.5; g.len()] }, random_field(g, 2));
    assert_eq!(gamma_n(&s), 0.0);
}

#[test]
fn gamma_n_of_sin_cos_is_two_pi_squared() {
    let g = make_grid(128, 1.0).unwrap();
    let s = raw_state(field_fn(g, |_, y| y.cos()), field_fn(g, |_, y| y.sin()));
    let expected = 2.0 * PI * PI;
    let got = gamma_n(&s);
    assert!((got - expected).abs() <= expected * g.dx * g.dx, "{got}");
    // Domain mean is the integral over the area.
    let mean = gamma_n_with(&s, QoiNormalization::DomainMean);
    assert!((mean * g.length * g.length - got).abs() <= 1e-12 * got);
}

#[test]
fn gamma_c_cases() {
    let g = make_grid(128, 1.0).unwrap();
    let f = random_field(g, 3);
    let p = HwParams::default();
    assert_eq!(gamma_c(&raw_state(f.clone(), f.clone()), &p), 0.0);
    let s = raw_state(Field::zeros(g), field_fn(g, |x, _| x.sin()));
    assert_eq!(gamma_c(&s, &HwParams { c1: 0.0, ..p }), 0.0);
    let expected = 2.0 * PI * PI;
    assert!((gamma_c(&s, &p) - expected).abs() <= 1e-10 * expected);
}

#[test]
fn qoi_series_cases() {
    let g = make_grid(16, 1.0).unwrap();
    let p = HwParams::default();
    let single = qoi_series(&[PlasmaState::zeros(g)], &p, QoiNormalization::DomainMean).unwrap();
    assert_eq!(single.len(), 1);
    let zeros: Vec<PlasmaState> =
        (0..4).map(|i| PlasmaState { t: i as f64, ..PlasmaState::zeros(g) }).collect();
    let s = qoi_series(&zeros, &p, QoiNormalization::Integral).unwrap();
    assert!(s.gamma_n.iter().chain(&s.gamma_c).all(|&v| v == 0.0));
    // Non-increasing times are rejected.
    let bad = vec![PlasmaState::zeros(g), PlasmaState::zeros(g)];
    assert!(qoi_series(&bad, &p, QoiNormalization::Integral).is_err());
}

#[test]
fn temporal_stats_cases() {
    let series = |v: Vec<f64>| QoiSeries {
        times: (0..v.len()).map(|i| i as f64).collect(),
        gamma_n: v.clone(),
        gamma_c: v,
    };
    let s = temporal_stats(&series(vec![3.0; 5]), 0.0, 10.0).unwrap();
    assert_eq!((s.gamma_n.mean, s.gamma_n.std), (3.0, 0.0));
    let s = temporal_stats(&series(vec![0.0, 2.0]), 0.0, 1.0).unwrap();
    assert_eq!((s.gamma_c.mean, s.gamma_c.std), (1.0, 1.0));
    let s = temporal_stats(&series(vec![9.0, 0.0, 2.0, 9.0]), 1.0, 2.0).unwrap();
    assert_eq!((s.gamma_n.mean, s.samples), (1.0, 2));
    assert!(temporal_stats(&series(vec![1.0]), 5.0, 6.0).is_err());
}

#[test]
fn series_fft_cases() {
    let times: Vec<f64> = (0..64).map(|i| i as f64 * 0.5).collect();
    let flat = series_fft(&times, &[4.0; 64]).unwrap();
    assert!(flat.magnitude.iter().all(|&m| m <= 1e-12));

    let sine: Vec<f64> = (0..64).map(|i| (2.0 * PI * 5.0 * i as f64 / 64.0).sin()).collect();
    let spec = series_fft(&times, &sine).unwrap();
    let peak = (0..spec.magnitude.len()).max_by(|&a, &b| spec.magnitude[a].total_cmp(&spec.magnitude[b])).unwrap();
    assert_eq!(peak, 5);
    assert!((spec.magnitude[5] - 32.0).abs() < 1e-9);
    assert!(spec.magnitude.iter().enumerate().filter(|(i, _)| *i != 5).all(|(_, &m)| m < 1e-9));

    let shifted: Vec<f64> = sine.iter().map(|v| v + 17.0).collect();
    let spec2 = series_fft(&times, &shifted).unwrap();
    for (a, b) in spec.magnitude.iter().zip(&spec2.magnitude) {
        assert!((a - b).abs() < 1e-9);
    }

    let mut uneven = times.clone();
    uneven[10] += 0.1;
    assert!(series_fft(&uneven, &sine).is_err());
}

#[test]
fn grad_phi_spectrum_cases() {
    let g = make_grid(64, 0.6).unwrap();
    let zero = grad_phi_spectrum(&PlasmaState::zeros(g));
    assert!(zero.power.iter().all(|&p| p == 0.0));
    assert!(zero.k_bins.windows(2).all(|w| w[1] > w[0]));

    let k0 = g.k0;
    let s = raw_state(field_fn(g, |x, _| (k0 * x).sin()), Field::zeros(g));
    let spec = grad_phi_spectrum(&s);
    let weighted: Vec<f64> = spec.power.iter().zip(&spec.counts).map(|(p, &c)| p * c as f64).collect();
    let total: f64 = weighted.iter().sum();
    assert!(weighted[0] + weighted[2] >= (1.0 - 1e-12) * total);
    assert!(weighted[2] > 0.0);
    assert!((spec.k_bins[2] - 2.0 * k0).abs() < 1e-12);
}

#[test]
fn grad_phi_spectrum_satisfies_parseval() {
    for seed in 0..5 {
        let g = make_grid(32, 0.6).unwrap();
        let phi = random_field(g, seed);
        let gx = fd_deriv(&phi, Axis::X);
        let gy = fd_deriv(&phi, Axis::Y);
        let q = gx.zip_map(&gy, |a, b| a * a + b * b);
        let mean = q.mean();
        let var = q.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q.values.len() as f64;
        let spec = grad_phi_spectrum(&raw_state(phi, Field::zeros(g)));
        assert!((spec.fluctuation_power() - var).abs() <= 1e-10 * var);
        assert!((spec.power[0] - mean * mean).abs() <= 1e-10 * mean * mean);
    }
}

#[test]
fn saturated_spectrum_decays_above_the_peak() {
    let cfg = SimConfig { grid_n: 32, n_steps: 24_000, snapshot_every: 4000, seed: 3, ..Default::default() };
    let traj = simulate(&cfg).unwrap();
    let last = traj.snapshots.last().unwrap();
    let spec = grad_phi_spectrum(last);
    let peak = spec.peak_index();
    // Shell noise: each shell may exceed the running minimum by at most 2x.
    let mut floor = spec.power[peak];
    for s in peak + 1..spec.power.len() {
        assert!(spec.power[s] <= 2.0 * floor, "shell {s}: {:?}", &spec.power[peak..]);
        floor = floor.min(spec.power[s]);
    }
    let end = spec.power.len() - 1;
    assert!(spec.power[end] < 1e-3 * spec.power[peak]);
}

#[test]
fn slope_fit_cases() {
    let k: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
    let law = RadialSpectrum {
        power: k.iter().map(|&k| if k > 0.0 { k.powf(-2.0) } else { 0.0 }).collect(),
        counts: vec![1; k.len()],
        k_bins: k.clone(),
    };
    assert!((fit_loglog_slope(&law, 0.5, 10.0).unwrap() + 2.0).abs() <= 1e-6);
    let flat = RadialSpectrum { power: vec![3.0; k.len()], counts: vec![1; k.len()], k_bins: k.clone() };
    assert!(fit_loglog_slope(&flat, 1.0, 5.0).unwrap().abs() <= 1e-12);
    assert!(fit_loglog_slope(&flat, 1.0, 1.6).is_err());
    assert!(fit_loglog_slope(&law, 0.0, 2.0).is_err());
    let zero = RadialSpectrum { power: vec![0.0; k.len()], counts: vec![1; k.len()], k_bins: k };
    assert!(fit_loglog_slope(&zero, 1.0, 5.0).is_err());
}

#[test]
fn csv_exports_have_headers_and_full_precision() {
    let s = QoiSeries { times: vec![0.1], gamma_n: vec![1.0 / 3.0], gamma_c: vec![2.0] };
    let mut out = Vec::new();
    s.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,gamma_n,gamma_c"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![0.1, 1.0 / 3.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_c_is_nonnegative_and_linear_in_c1(seed in any::<u64>(), c1 in 0.0f64..4.0) {
        let g = make_grid(16, 0.6).unwrap();
        let s = raw_state(random_field(g, seed), random_field(g, seed ^ 1));
        let p = HwParams { c1, ..HwParams::default() };
        let a = gamma_c(&s, &p);
        prop_assert!(a >= 0.0);
        prop_assert_eq!(gamma_c(&s, &HwParams { c1: 2.0 * c1, ..p }), 2.0 * a);
    }

    #[test]
    fn gamma_n_ignores_constant_offsets(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let g = make_grid(16, 0.6).unwrap();
        let phi = random_field(g, seed);
        let n = random_field(g, seed ^ 7);
        let base = gamma_n(&raw_state(phi.clone(), n.clone()));
        let moved = gamma_n(&raw_state(phi.map(|v| v + a), n.map(|v| v + b)));
        prop_assert!((base - moved).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn slope_fit_recovers_power_laws(alpha in -8.0f64..2.0, scale in 0.1f64..10.0) {
        let k: Vec<f64> = (1..40).map(|i| i as f64 * 0.6).collect();
        let spec = RadialSpectrum {
            power: k.iter().map(|k| scale * k.powf(alpha)).collect(),
            counts: vec![1; k.len()],
            k_bins: k,
        };
        prop_assert!((fit_loglog_slope(&spec, 0.6, 30.0).unwrap() - alpha).abs() <= 1e-6);
    }
}
