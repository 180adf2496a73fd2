//! Finite-difference checks for every layer, plus independent forward oracles.

use hwlab_autodiff::{ConvSpec, PaddingMode, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [PaddingMode; 3] = [PaddingMode::Circular, PaddingMode::Zero, PaddingMode::Reflect];

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Build `f(inputs)` on a fresh tape, reduce it against a fixed random
/// target with a mean-square, and compare analytic gradients of every input
/// against central differences.
fn gradcheck<F>(inputs: Vec<Tensor<f64>>, seed: u64, tol: f64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |inputs: &[Tensor<f64>], target: Option<&Tensor<f64>>, grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars);
        let target_t = target.cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(out)));
        let tv = tape.constant(target_t);
        let d = tape.sub(out, tv).unwrap();
        let loss = tape.mean_square(d);
        let value = tape.value(loss).data()[0];
        let out_shape = tape.shape(out);
        let grads = if grad {
            tape.backward(loss).unwrap();
            vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
        } else {
            Vec::new()
        };
        (value, grads, out_shape)
    };
    let (_, _, out_shape) = eval(&inputs, None, false);
    let target = random(out_shape, &mut rng);
    let (_, analytic, _) = eval(&inputs, Some(&target), true);

    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        // Every entry for small tensors, a random sample otherwise.
        let idx: Vec<usize> = if n <= 64 { (0..n).collect() } else { (0..64).map(|_| rng.random_range(0..n)).collect() };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for &i in &idx {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fp = eval(&plus, Some(&target), false).0;
            let fm = eval(&minus, Some(&target), false).0;
            num.push((fp - fm) / (2.0 * h));
            ana.push(analytic[k].data()[i]);
        }
        let err: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-10);
        assert!(err / scale <= tol, "input {k}: relative gradient error {} (scale {scale})", err / scale);
    }
}

/// Direct quadruple loop over output pixels, channels and taps.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let [bs, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    let mut out = Tensor::zeros([bs, co, ho, wo]);
    let src = |i: isize, n: usize| -> Option<usize> {
        let ni = n as isize;
        match spec.mode {
            PaddingMode::Circular => Some(i.rem_euclid(ni) as usize),
            PaddingMode::Zero => (i >= 0 && i < ni).then_some(i as usize),
            PaddingMode::Reflect => {
                let r = if i < 0 { -i } else if i >= ni { 2 * (ni - 1) - i } else { i };
                Some(r as usize)
            }
        }
    };
    for n in 0..bs {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for a in 0..kh {
                            for e in 0..kw {
                                let yi = (i * spec.stride + a) as isize - spec.padding as isize;
                                let xj = (j * spec.stride + e) as isize - spec.padding as isize;
                                if let (Some(y), Some(xx)) = (src(yi, h), src(xj, wd)) {
                                    acc += w.get([o, c, a, e]) * x.get([n, c, y, xx]);
                                }
                            }
                        }
                    }
                    out.set([n, o, i, j], acc);
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in MODES {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (5, 1, 2)] {
            let x = random([2, 3, 7, 6], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let b = random([1, 4, 1, 1], &mut rng);
            let spec = ConvSpec { stride, padding: pad, mode };
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
            let err = max_abs_diff(tape.value(y), &naive_conv(&x, &w, Some(&b), spec));
            assert!(err <= 1e-12, "{mode:?} k={k} s={stride} p={pad}: {err}");
        }
    }
}

#[test]
fn circular_padding_wider_than_grid_wraps() {
    // A 7x7 circular kernel on a 2x2 grid reads every pixel several times.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random([1, 2, 2, 2], &mut rng);
    let w = random([3, 2, 7, 7], &mut rng);
    let spec = ConvSpec::same(7, PaddingMode::Circular);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, spec).unwrap();
    assert!(max_abs_diff(tape.value(y), &naive_conv(&x, &w, None, spec)) <= 1e-12);
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (mi, mode) in MODES.into_iter().enumerate() {
        for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (3, 2, 1)] {
            let inputs = vec![random([2, 2, 6, 5], &mut rng), random([3, 2, k, k], &mut rng), random([1, 3, 1, 1], &mut rng)];
            let spec = ConvSpec { stride, padding: pad, mode };
            gradcheck(inputs, 10 + mi as u64, 1e-4, |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec).unwrap());
        }
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random([2, 5, 3, 4], &mut rng), random([6, 5, 1, 1], &mut rng), random([6, 1, 1, 1], &mut rng)];
    gradcheck(inputs, 4, 1e-4, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in MODES {
        for (k, stride, pad) in [(2, 2, 0), (3, 1, 1), (4, 2, 1)] {
            let x = random([2, 3, 8, 8], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let spec = ConvSpec { stride, padding: pad, mode };
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv2d(xv, wv, None, spec).unwrap();
            let z = random(tape.shape(y), &mut rng);
            let zv = tape.constant(z.clone());
            let back = tape.conv_transpose2d(zv, wv, None, spec).unwrap();
            assert_eq!(tape.shape(back), x.shape());
            let lhs = tape.value(y).dot(&z);
            let rhs = x.dot(tape.value(back));
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{mode:?} k={k} s={stride}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn transpose_upsampling_shape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 8, 4, 4]));
    let w = tape.constant(Tensor::zeros([8, 4, 2, 2]));
    let y = tape.conv_transpose2d(x, w, None, ConvSpec::strided(2)).unwrap();
    assert_eq!(tape.shape(y), [1, 4, 8, 8]);
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (mi, mode) in MODES.into_iter().enumerate() {
        for (k, stride, pad) in [(2, 2, 0), (3, 1, 1)] {
            let inputs = vec![random([2, 3, 4, 4], &mut rng), random([3, 2, k, k], &mut rng), random([1, 2, 1, 1], &mut rng)];
            let spec = ConvSpec { stride, padding: pad, mode };
            gradcheck(inputs, 20 + mi as u64, 1e-4, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), spec).unwrap());
        }
    }
}

#[test]
fn depthwise_matches_per_channel_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for mode in MODES {
        let x = random([2, 4, 9, 9], &mut rng);
        let w = random([4, 1, 7, 7], &mut rng);
        let b = random([1, 4, 1, 1], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.depthwise_conv2d(xv, wv, Some(bv), mode).unwrap();
        // Grouped-convolution oracle: one single-channel dense conv per channel.
        let spec = ConvSpec::same(7, mode);
        for c in 0..4 {
            let xc = Tensor::from_vec([2, 1, 9, 9], (0..2).flat_map(|n| x.plane(n, c).to_vec()).collect()).unwrap();
            let wc = Tensor::from_vec([1, 1, 7, 7], w.data()[c * 49..(c + 1) * 49].to_vec()).unwrap();
            let bc = Tensor::from_vec([1, 1, 1, 1], vec![b.data()[c]]).unwrap();
            let yc = naive_conv(&xc, &wc, Some(&bc), spec);
            for n in 0..2 {
                let err = tape.value(y).plane(n, c).iter().zip(yc.plane(n, 0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-12, "{mode:?} channel {c}: {err}");
            }
        }
    }
}

#[test]
fn depthwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (mi, mode) in MODES.into_iter().enumerate() {
        let inputs = vec![random([2, 3, 5, 6], &mut rng), random([3, 1, 3, 3], &mut rng), random([1, 3, 1, 1], &mut rng)];
        gradcheck(inputs, 30 + mi as u64, 1e-4, |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), mode).unwrap());
    }
    // Kernel wider than the grid under circular padding.
    let inputs = vec![random([1, 2, 4, 4], &mut rng), random([2, 1, 7, 7], &mut rng)];
    gradcheck(inputs, 33, 1e-4, |t, v| t.depthwise_conv2d(v[0], v[1], None, PaddingMode::Circular).unwrap());
}

#[test]
fn layer_norm_normalizes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random([2, 6, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([1, 6, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros([1, 6, 1, 1]));
    let y = tape.layer_norm(xv, g, b, 1e-6).unwrap();
    let yt = tape.value(y);
    for n in 0..2 {
        for p in 0..9 {
            let vals: Vec<f64> = (0..6).map(|c| yt.plane(n, c)[p]).collect();
            let mean = vals.iter().sum::<f64>() / 6.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![random([2, 5, 3, 4], &mut rng), random([1, 5, 1, 1], &mut rng), random([1, 5, 1, 1], &mut rng)];
    gradcheck(inputs, 40, 1e-5, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap());
}

#[test]
fn grn_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random([1, 3, 4, 4], &mut rng);
    let gamma = random([1, 3, 1, 1], &mut rng);
    let beta = random([1, 3, 1, 1], &mut rng);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let y = tape.grn(xv, gv, bv, 1e-6).unwrap();
    let norms: Vec<f64> = (0..3).map(|c| x.plane(0, c).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mean = norms.iter().sum::<f64>() / 3.0;
    for c in 0..3 {
        let nx = norms[c] / (mean + 1e-6);
        for (p, &xv) in x.plane(0, c).iter().enumerate() {
            let expected = gamma.data()[c] * xv * nx + beta.data()[c] + xv;
            assert!((tape.value(y).plane(0, c)[p] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn grn_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![random([2, 4, 3, 3], &mut rng), random([1, 4, 1, 1], &mut rng), random([1, 4, 1, 1], &mut rng)];
    gradcheck(inputs, 50, 1e-5, |t, v| t.grn(v[0], v[1], v[2], 1e-6).unwrap());
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = [2, 3, 4, 4];
    gradcheck(vec![random(shape, &mut rng)], 60, 1e-5, |t, v| t.gelu(v[0]));
    gradcheck(vec![random(shape, &mut rng), random(shape, &mut rng)], 61, 1e-6, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let d = t.sub(d, v[1]).unwrap();
        t.scale(d, -2.5)
    });
    gradcheck(vec![random(shape, &mut rng), random([2, 1, 1, 1], &mut rng)], 62, 1e-6, |t, v| {
        t.mul_per_sample(v[0], v[1]).unwrap()
    });
}

#[test]
fn broadcast_and_channel_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    gradcheck(vec![random([3, 1, 1, 1], &mut rng)], 70, 1e-6, |t, v| t.plane(v[0], 3, 4, 5).unwrap());
    gradcheck(vec![random([1, 1, 1, 1], &mut rng)], 71, 1e-6, |t, v| t.plane(v[0], 3, 4, 5).unwrap());
    gradcheck(vec![random([2, 2, 3, 3], &mut rng), random([2, 3, 3, 3], &mut rng)], 72, 1e-6, |t, v| {
        let c = t.concat_channels(&[v[0], v[1], v[0]]).unwrap();
        t.slice_channels(c, 1, 5).unwrap()
    });
}

#[test]
fn reductions_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    gradcheck(vec![random([2, 2, 3, 3], &mut rng)], 80, 1e-6, |t, v| {
        let m = t.mean_square(v[0]);
        let s = t.sum(v[0]);
        t.add(m, s).unwrap()
    });
}

/// A ConvNeXt-style block end to end: gradients flow through every layer type.
#[test]
fn composite_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let c = 3;
    let inputs = vec![
        random([2, c, 6, 6], &mut rng),
        random([c, 1, 3, 3], &mut rng),
        random([1, c, 1, 1], &mut rng),
        random([1, c, 1, 1], &mut rng),
        random([4 * c, c, 1, 1], &mut rng),
        random([1, 4 * c, 1, 1], &mut rng),
        random([1, 4 * c, 1, 1], &mut rng),
        random([c, 4 * c, 1, 1], &mut rng),
        random([2 * c, c, 2, 2], &mut rng),
    ];
    gradcheck(inputs, 90, 1e-4, |t, v| {
        let h = t.depthwise_conv2d(v[0], v[1], None, PaddingMode::Circular).unwrap();
        let h = t.layer_norm(h, v[2], v[3], 1e-6).unwrap();
        let h = t.linear(h, v[4], None).unwrap();
        let h = t.gelu(h);
        let h = t.grn(h, v[5], v[6], 1e-6).unwrap();
        let h = t.linear(h, v[7], None).unwrap();
        let h = t.add(h, v[0]).unwrap();
        let d = t.conv2d(h, v[8], None, ConvSpec::strided(2)).unwrap();
        t.conv_transpose2d(d, v[8], None, ConvSpec::strided(2)).unwrap()
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random([2, 3, 5, 5], &mut rng);
    let w = random([2, 3, 3, 3], &mut rng);
    let run = |c: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let y = tape.conv2d(xv, wv, None, ConvSpec::same(3, PaddingMode::Circular)).unwrap();
        let y = tape.gelu(y);
        let s = tape.sum(y);
        let l = tape.scale(s, c);
        tape.backward(l).unwrap();
        (tape.grad_or_zeros(xv), tape.grad_or_zeros(wv))
    };
    let (gx1, gw1) = run(1.0);
    let (gx3, gw3) = run(-3.0);
    for (a, b) in gx1.data().iter().zip(gx3.data()).chain(gw1.data().iter().zip(gw3.data())) {
        assert!((-3.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn frozen_weights_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut tape = Tape::new();
    let x = tape.leaf(random([1, 2, 4, 4], &mut rng), true);
    let w = tape.constant(random([2, 2, 3, 3], &mut rng));
    let y = tape.conv2d(x, w, None, ConvSpec::same(3, PaddingMode::Circular)).unwrap();
    let l = tape.mean_square(y);
    tape.backward(l).unwrap();
    assert!(tape.grad(w).is_none());
    assert!(tape.grad(x).is_some());
}

#[test]
fn f32_engine_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random([2, 3, 6, 6], &mut rng);
    let w = random([4, 3, 3, 3], &mut rng);
    let run64 = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, None, ConvSpec::same(3, PaddingMode::Circular)).unwrap();
        let l = tape.mean_square(y);
        tape.backward(l).unwrap();
        tape.grad_or_zeros(xv)
    };
    let run32 = {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.cast(), true);
        let wv = tape.constant(w.cast());
        let y = tape.conv2d(xv, wv, None, ConvSpec::same(3, PaddingMode::Circular)).unwrap();
        let l = tape.mean_square(y);
        tape.backward(l).unwrap();
        tape.grad_or_zeros(xv).to_f64()
    };
    let scale = run64.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(max_abs_diff(&run64, &run32) <= 1e-5 * scale);
}
