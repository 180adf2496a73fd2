mod common;

use hwlab::autodiff::{Precision, Tensor};
use hwlab::dataset::SnapshotPair;
use hwlab::ficonv::{FiConvConfig, Model};
use hwlab::hwsim::{gaussian_random_field, HwParams, PlasmaState};
use hwlab::learn::*;
use hwlab::numerics::{make_grid, spectral_laplacian};
use hwlab::Error;
use proptest::prelude::*;

fn state(n: usize, seed: u64, t: f64) -> PlasmaState {
    let g = make_grid(n, 0.6).unwrap();
    let omega = gaussian_random_field(g, seed, 1.0, 2.0).unwrap();
    let dens = gaussian_random_field(g, seed + 100, 0.5, 2.0).unwrap();
    PlasmaState::from_omega_n(omega, dens, t)
}

fn pairs(n: usize, count: u64, params: HwParams) -> Vec<SnapshotPair> {
    (0..count)
        .map(|k| {
            let dt = 0.25 * (1 + k % 4) as f64;
            let a = state(n, k, 0.0);
            // Target: a damped, slightly shifted copy of the input.
            let b = PlasmaState::from_omega_n(a.omega.map(|v| 0.9 * v), a.n.map(|v| 0.8 * v + 0.01), dt);
            SnapshotPair::new(&a, &b, params).unwrap()
        })
        .collect()
}

fn plane(v: f64, n: usize) -> Tensor<f64> {
    Tensor::full([1, 1, n, n], v)
}

fn small(precision: Precision) -> FiConvConfig {
    FiConvConfig { grid_n: 16, base_width: 4, precision, ..FiConvConfig::default() }
}

#[test]
fn loss_examples() {
    let z = plane(0.0, 8);
    let r = Tensor::from_vec([1, 1, 8, 8], (0..64).map(|i| i as f64 * 0.1).collect()).unwrap();
    assert_eq!(loss(&r, &r, &r, &r).unwrap(), 0.0);
    assert!((loss(&plane(1.0, 8), &z, &z, &z).unwrap() - 0.01).abs() < 1e-15);
    assert!((loss(&z, &plane(2.0, 8), &z, &z).unwrap() - 0.2).abs() < 1e-15);
    assert!(loss(&z, &plane(0.0, 4), &z, &z).is_err());
    // Batch of two: mean over samples.
    let two = |a: f64, b: f64| Tensor::from_vec([2, 1, 2, 2], vec![a, a, a, a, b, b, b, b]).unwrap();
    let zz = two(0.0, 0.0);
    assert!((loss(&two(1.0, 3.0), &zz, &zz, &zz).unwrap() - (1.0 + 9.0) / 200.0).abs() < 1e-15);
}

#[test]
fn omega_term_scales_quadratically() {
    let p = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
    let t = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
    let z = plane(0.0, 4);
    let base = loss(&p, &z, &t, &z).unwrap();
    for alpha in [2.0, 0.5, 4.0] {
        let sc = |x: &Tensor<f64>| Tensor::from_vec(x.shape(), x.data().iter().map(|v| v * alpha).collect()).unwrap();
        assert_eq!(loss(&sc(&p), &z, &sc(&t), &z).unwrap(), alpha * alpha * base);
    }
}

#[test]
fn zero_lr_without_decay_leaves_weights_bitwise() {
    let data = pairs(16, 6, HwParams::default());
    let mut model = Model::<f32>::new(small(Precision::F32), 1).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, batch_size: 3, epochs: 2, ..Default::default() };
    let log = train(&mut model, &data, &[], &cfg, None).unwrap();
    assert_eq!(log.step_losses.len(), 4);
    assert_eq!(model, before);
    // Decay is decoupled and scaled by lr, so lr = 0 with decay is also a no-op.
    let cfg = TrainConfig { weight_decay: 0.5, ..cfg };
    train(&mut model, &data, &[], &cfg, None).unwrap();
    assert_eq!(model, before);
}

#[test]
fn training_is_deterministic_and_writes_checkpoints() {
    let data = pairs(16, 8, HwParams::default());
    let test = pairs(16, 3, HwParams::new(1.05, 0.6, 0.95, 0.95));
    let cfg = TrainConfig { lr: 1e-3, batch_size: 4, epochs: 3, seed: 5, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut a = Model::<f32>::new(small(Precision::F32), 2).unwrap();
    let mut b = a.clone();
    let la = train(&mut a, &data, &test, &cfg, Some(dir.path())).unwrap();
    let lb = train(&mut b, &data, &test, &cfg, None).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(la.step_losses.len(), 6);
    assert_eq!(la.epoch_losses.len(), 3);
    assert!(la.epoch_test.iter().all(|t| t.is_some()));
    for e in 0..3 {
        assert!(dir.path().join(format!("epoch_{e:03}.ficw")).exists());
    }
    let best = Model::<f32>::load(&best_checkpoint(dir.path())).unwrap();
    let best_epoch = la.best_epoch.unwrap();
    let at_best = Model::<f32>::load(&dir.path().join(format!("epoch_{best_epoch:03}.ficw"))).unwrap();
    assert_eq!(best.checksum(), at_best.checksum());
    let mut csv = Vec::new();
    la.write_step_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    let other = train(&mut Model::<f32>::new(small(Precision::F32), 2).unwrap(), &data, &test, &TrainConfig { seed: 6, ..cfg }, None).unwrap();
    assert_ne!(other.step_losses, la.step_losses);
}

#[test]
fn training_reduces_loss_on_a_small_set() {
    let data = pairs(16, 4, HwParams::default());
    let mut model = Model::<f32>::new(small(Precision::F32), 3).unwrap();
    let cfg = TrainConfig { lr: 3e-3, batch_size: 4, epochs: 60, ..Default::default() };
    let log = train(&mut model, &data, &[], &cfg, None).unwrap();
    assert!(log.step_losses.last().unwrap() < &(0.5 * log.step_losses[0]), "{:?}", log.step_losses);
    assert!(log.reduction_factor(5).unwrap() > 2.0);
}

#[test]
fn train_rejects_bad_input() {
    let mut model = Model::<f32>::new(small(Precision::F32), 4).unwrap();
    assert!(matches!(train(&mut model, &[], &[], &TrainConfig::default(), None), Err(Error::Data(_))));
    let mut bad = pairs(16, 2, HwParams::default());
    bad[1].target_omega[3] = f32::NAN;
    let cfg = TrainConfig { batch_size: 1, ..Default::default() };
    assert!(matches!(train(&mut model, &bad, &[], &cfg, None), Err(Error::NonFiniteLoss { step: 1 })));
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn evaluate_matches_training_loss_and_persistence() {
    let data = pairs(16, 1, HwParams::default());
    let mut model = Model::<f64>::new(small(Precision::F64), 5).unwrap();
    let cfg = TrainConfig { lr: 0.0, batch_size: 1, epochs: 1, ..Default::default() };
    let log = train(&mut model, &data, &[], &cfg, None).unwrap();
    let report = evaluate(&model, &data, 4).unwrap();
    assert!((report.mse - log.step_losses[0]).abs() <= 1e-12 * report.mse);
    // Persistence by hand.
    let p = &data[0];
    let msd = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / a.len() as f64;
    let by_hand = msd(&p.input_omega, &p.target_omega) / 100.0 + msd(&p.input_n, &p.target_n) / 20.0;
    assert!((report.persistence_mse - by_hand).abs() <= 1e-12 * by_hand);
    assert_eq!(report.per_pair.len(), 1);
    assert!(evaluate(&model, &[], 4).is_err());
}

#[test]
fn rollout_contract() {
    let model = Model::<f32>::new(small(Precision::F32), 6).unwrap();
    let s0 = state(16, 7, 3.0);
    let p = HwParams::default();
    let zero = rollout(&model, &s0, &p, &RolloutConfig { t_a: 0.5, n_steps: 0 }).unwrap();
    assert_eq!(zero.len(), 1);
    assert_eq!(zero[0].omega, s0.omega);
    let traj = rollout(&model, &s0, &p, &RolloutConfig { t_a: 0.5, n_steps: 5 }).unwrap();
    assert_eq!(traj.len(), 6);
    for (k, s) in traj.iter().enumerate() {
        assert!((s.t - (3.0 + 0.5 * k as f64)).abs() < 1e-12);
        let lap = spectral_laplacian(&s.phi);
        let target = s.omega.map(|v| v - s.omega.mean());
        let err = common::max_abs_diff(&lap, &target);
        assert!(err <= 1e-10 * target.max_abs().max(1e-300));
    }
    assert!(rollout(&model, &s0, &p, &RolloutConfig { t_a: 0.0, n_steps: 1 }).is_err());
    assert!(rollout(&model, &s0, &p, &RolloutConfig { t_a: 1.5, n_steps: 1 }).is_err());
}

fn perturbed(seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(small(Precision::F64), seed).unwrap();
    let mut r = hwlab::rng::seeded(seed);
    for t in m.weights_mut() {
        for v in t.data_mut() {
            *v += 0.05 * (rand::Rng::random::<f64>(&mut r) - 0.5);
        }
    }
    m
}

fn fd_grad(model: &Model<f64>, refs: &[&SnapshotPair], theta: [f64; 4]) -> [f64; 4] {
    let h = 1e-5;
    std::array::from_fn(|k| {
        let mut up = theta;
        let mut dn = theta;
        up[k] += h;
        dn[k] -= h;
        let lu = inversion_loss_and_grad(model, refs, up, 8).unwrap().0;
        let ld = inversion_loss_and_grad(model, refs, dn, 8).unwrap().0;
        (lu - ld) / (2.0 * h)
    })
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let data = pairs(16, 3, HwParams::default());
    let refs: Vec<&SnapshotPair> = data.iter().collect();
    let m64 = perturbed(8);
    let theta = [1.02, 0.59, 0.97, 0.93];
    let fd = fd_grad(&m64, &refs, theta);
    let (_, g64) = inversion_loss_and_grad(&m64, &refs, theta, 2).unwrap();
    let m32: Model<f32> = m64.cast();
    let (_, g32) = inversion_loss_and_grad(&m32, &refs, theta, 2).unwrap();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for k in 0..4 {
        let e64 = (g64[k] - fd[k]).abs() / fd[k].abs().max(1e-3 * scale);
        let e32 = (g32[k] - fd[k]).abs() / fd[k].abs().max(1e-3 * scale);
        assert!(e64 <= 1e-4, "param {k}: {} vs {} ({e64})", g64[k], fd[k]);
        assert!(e32 <= 1e-3, "param {k}: {} vs {} ({e32})", g32[k], fd[k]);
    }
    // Chunking changes only the evaluation order.
    let (_, g1) = inversion_loss_and_grad(&m64, &refs, theta, 1).unwrap();
    for k in 0..4 {
        assert!((g1[k] - g64[k]).abs() <= 1e-12 * scale);
    }
}

#[test]
fn invert_keeps_weights_frozen() {
    let data = pairs(16, 6, HwParams::new(1.0, 0.6, 1.0, 1.0));
    let model: Model<f32> = perturbed(9).cast();
    let sum = model.checksum();
    let refs = select_pairs(&data, 4, 3).unwrap();
    let init = HwParams::new(0.95, 0.62, 1.04, 0.92);
    let cfg = InverseConfig { steps: 25, init_guess: init, ..Default::default() };
    let res = invert(&model, &refs, &cfg).unwrap();
    assert_eq!(res.checksum_before, sum);
    assert_eq!(res.checksum_after, sum);
    assert_eq!(model.checksum(), sum);
    assert_eq!(res.loss_trace.len(), 26);
    assert_eq!(res.param_trace.len(), 26);
    assert_eq!(res.param_trace[0], init.scalars());
    assert_eq!(res.estimate.scalars(), *res.param_trace.last().unwrap());
    assert_ne!(res.param_trace[1], res.param_trace[0]);
    assert_eq!((res.estimate.nu, res.estimate.order), (init.nu, init.order));
    let mut csv = Vec::new();
    res.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let first: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, init.scalars().to_vec());

    let frozen = invert(&model, &refs, &InverseConfig { lr: 0.0, ..cfg.clone() }).unwrap();
    assert!(frozen.param_trace.iter().all(|p| *p == init.scalars()));
    assert!(frozen.loss_trace.iter().all(|l| *l == frozen.loss_trace[0]));
}

#[test]
fn invert_reports_divergence_with_trace() {
    let data = pairs(16, 2, HwParams::default());
    let model = Model::<f32>::new(small(Precision::F32), 10).unwrap();
    let refs: Vec<&SnapshotPair> = data.iter().collect();
    let cfg = InverseConfig { steps: 5, init_guess: HwParams::new(f64::NAN, 0.6, 1.0, 1.0), ..Default::default() };
    match invert(&model, &refs, &cfg) {
        Err(Error::InversionDiverged { step, partial }) => {
            assert_eq!(step, 0);
            assert_eq!(partial.loss_trace.len(), 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn pair_selection_is_seeded_and_distinct() {
    let data = pairs(16, 10, HwParams::default());
    let a = select_pairs(&data, 5, 1).unwrap();
    let b = select_pairs(&data, 5, 1).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| std::ptr::eq(*x, *y)));
    for i in 0..5 {
        for j in 0..i {
            assert!(!std::ptr::eq(a[i], a[j]));
        }
    }
    assert!(select_pairs(&data, 11, 1).is_err());
}

#[test]
fn mae_examples() {
    let p = HwParams::default();
    assert_eq!(mae(&[p, p], &[p, p]).unwrap(), [0.0; 4]);
    let q = HwParams { c1: 1.1, ..p };
    let e = mae(&[p], &[q]).unwrap();
    assert!((e[0] - 0.1).abs() < 1e-15);
    assert_eq!(&e[1..], &[0.0; 3]);
    assert!(mae(&[p], &[p, p]).is_err());
    assert!(mae(&[], &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_nonnegative_and_scales(alpha in 0.01f64..100.0, seed in any::<u64>()) {
        let g = make_grid(8, 0.6).unwrap();
        let t = |s: u64| Tensor::from_vec([1, 1, 8, 8], common::random_field(g, s).values).unwrap();
        let (p, q, z) = (t(seed), t(seed ^ 1), plane(0.0, 8));
        let base = loss(&p, &z, &q, &z).unwrap();
        prop_assert!(base >= 0.0);
        let sc = |x: &Tensor<f64>| Tensor::from_vec(x.shape(), x.data().iter().map(|v| v * alpha).collect()).unwrap();
        let scaled = loss(&sc(&p), &z, &sc(&q), &z).unwrap();
        prop_assert!((scaled - alpha * alpha * base).abs() <= 1e-12 * scaled);
    }

    #[test]
    fn mae_is_symmetric_and_nonnegative(a in 0.5f64..1.5, b in 0.5f64..1.5) {
        let x = HwParams::new(a, 0.6, b, 1.0);
        let y = HwParams::new(b, 0.6, a, 1.0);
        let e = mae(&[x], &[y]).unwrap();
        prop_assert_eq!(e, mae(&[y], &[x]).unwrap());
        prop_assert!(e.iter().all(|v| *v >= 0.0));
    }
}
