use trigen_core::gradcheck::{gradient_error, numeric_gradient, relative_error};
use trigen_core::{adam_step, rng, AdamConfig, AdamState, NumError, Tape, Tensor, UnaryOp, Var};

const H: f32 = 1e-3;

fn grad_error(f: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], which: usize, seed: u64) -> f32 {
    gradient_error(f, inputs, which, seed, H)
}

#[test]
fn add_zero_and_mul_one_are_identities() {
    let mut r = rng::seeded(1);
    let x = Tensor::randn(&[3, 4], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[3, 4]));
    let s = tape.add(z, xv).unwrap();
    assert_eq!(tape.value(s), &x);
    let m = tape.mul(xv, 1.0).unwrap();
    assert_eq!(tape.value(m), &x);
}

#[test]
fn grad_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().wrt(x);
    let numeric = numeric_gradient(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum(), &Tensor::from_vec(vec![1.0, 2.0]), H);
    assert!(relative_error(&g, &numeric) < 1e-4);
    assert_eq!(g.data(), &[2.0, 4.0]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(NumError::ShapeMismatch { .. })));
    assert!(matches!(tape.matmul(a, a), Err(NumError::ShapeMismatch { .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(tape.div(a, 0.0), Err(NumError::NonFinite { .. })));
    let z = tape.leaf(Tensor::from_vec(vec![-1.0]));
    assert!(matches!(tape.ln(z), Err(NumError::NonFinite { .. })));
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(NumError::BackwardConsumed)));
}

#[test]
fn unused_inputs_get_exact_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    let unused = tape.leaf(Tensor::ones(&[2, 2]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
}

#[test]
fn non_scalar_root_needs_a_seed() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    let y = tape.mul(x, 3.0).unwrap();
    assert!(matches!(tape.backward(y), Err(NumError::NonScalarRoot(_))));
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    let y = tape.mul(x, 3.0).unwrap();
    let g = tape.backward_seeded(y, Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    assert_eq!(g.wrt(x).data(), &[3.0, 6.0, 9.0]);
}

#[test]
fn matmul_identity_and_scalar_case() {
    let mut r = rng::seeded(2);
    let x = Tensor::randn(&[3, 2], &mut r);
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let (e, xv) = (tape.constant(eye), tape.constant(x.clone()));
    let y = tape.matmul(e, xv).unwrap();
    assert_eq!(tape.value(y), &x);
    let a = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let b = tape.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[6.0]);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let ops: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
        ("add", Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div", Box::new(|t, v| t.div(v[0], v[1]).unwrap())),
        ("mul_scalar", Box::new(|t, v| t.mul(v[0], -1.7).unwrap())),
        ("div_scalar", Box::new(|t, v| t.div(v[0], 2.5).unwrap())),
    ];
    for (name, f) in &ops {
        for seed in 0..20u64 {
            let mut r = rng::seeded(seed);
            let a = Tensor::randn(&[3, 4], &mut r);
            // keep divisors away from zero
            let b = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut r);
            for which in 0..2 {
                let e = grad_error(f.as_ref(), &[a.clone(), b.clone()], which, seed);
                assert!(e < 1e-3, "{name} input {which} seed {seed}: rel err {e}");
            }
        }
    }
}

#[test]
fn scalar_var_broadcast_gradients() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(seed);
        // same-sign entries keep the reduced scalar gradient away from
        // cancellation, which f32 differences cannot resolve
        let a = Tensor::uniform(&[5], 0.5, 2.0, &mut r);
        let s = Tensor::uniform(&[1], 0.5, 2.0, &mut r);
        for op in 0..4 {
            let f = move |t: &mut Tape, v: &[Var]| match op {
                0 => t.add(v[0], v[1]).unwrap(),
                1 => t.sub(v[0], v[1]).unwrap(),
                2 => t.mul(v[0], v[1]).unwrap(),
                _ => t.div(v[0], v[1]).unwrap(),
            };
            for which in 0..2 {
                let e = grad_error(&f, &[a.clone(), s.clone()], which, seed);
                assert!(e < 1e-3, "op {op} input {which}: {e}");
            }
        }
    }
}

#[test]
fn unary_gradients_match_finite_differences() {
    let ops = [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Ln,
        UnaryOp::Sqrt,
        UnaryOp::Square,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
        UnaryOp::Silu,
        UnaryOp::Tanh,
    ];
    for op in ops {
        for seed in 0..20u64 {
            let mut r = rng::seeded(seed);
            let positive = matches!(op, UnaryOp::Ln | UnaryOp::Sqrt);
            let a = if positive {
                Tensor::uniform(&[6], 0.5, 2.0, &mut r)
            } else {
                Tensor::uniform(&[6], -2.0, 2.0, &mut r)
            };
            let e = grad_error(&|t, v| t.unary(op, v[0]).unwrap(), &[a], 0, seed);
            assert!(e < 1e-3, "{op:?} seed {seed}: {e}");
        }
    }
}

#[test]
fn kinked_unary_gradients_away_from_kink() {
    for op in [UnaryOp::Relu, UnaryOp::Abs] {
        for seed in 0..20u64 {
            let mut r = rng::seeded(seed);
            let a = Tensor::uniform(&[6], 0.1, 2.0, &mut r);
            let sign = Tensor::from_fn(&[6], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
            let a = a.zip_map(&sign, |x, s| x * s).unwrap();
            let e = grad_error(&|t, v| t.unary(op, v[0]).unwrap(), &[a], 0, seed);
            assert!(e < 1e-3, "{op:?}: {e}");
        }
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(100 + seed);
        let a = Tensor::randn(&[4, 5], &mut r);
        let b = Tensor::randn(&[5, 3], &mut r);
        for which in 0..2 {
            let e = grad_error(&|t, v| t.matmul(v[0], v[1]).unwrap(), &[a.clone(), b.clone()], which, seed);
            assert!(e < 1e-3, "matmul input {which} seed {seed}: {e}");
        }
    }
}

#[test]
fn shape_op_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(200 + seed);
        let a = Tensor::randn(&[2, 3, 4], &mut r);
        let b = Tensor::randn(&[2, 2, 4], &mut r);
        let e = grad_error(&|t, v| t.concat(&[v[0], v[1]], 1).unwrap(), &[a.clone(), b.clone()], 1, seed);
        assert!(e < 1e-3, "concat {e}");
        let e = grad_error(&|t, v| t.slice(v[0], 2, 1, 2).unwrap(), std::slice::from_ref(&a), 0, seed);
        assert!(e < 1e-3, "slice {e}");
        let e = grad_error(&|t, v| t.sum_axis(v[0], 1).unwrap(), std::slice::from_ref(&a), 0, seed);
        assert!(e < 1e-3, "sum_axis {e}");
        let m = Tensor::randn(&[4, 3], &mut r);
        let e = grad_error(&|t, v| t.gather_rows(v[0], &[3, 0, 3]).unwrap(), std::slice::from_ref(&m), 0, seed);
        assert!(e < 1e-3, "gather {e}");
        let vals = Tensor::randn(&[2, 3], &mut r);
        for which in 0..2 {
            let e = grad_error(&|t, v| t.scatter_rows(v[0], &[1, 3], v[1]).unwrap(), &[m.clone(), vals.clone()], which, seed);
            assert!(e < 1e-3, "scatter {which} {e}");
        }
        let bias = Tensor::randn(&[3], &mut r);
        for which in 0..2 {
            let e = grad_error(&|t, v| t.add_along(v[0], v[1], 1).unwrap(), &[m.clone(), bias.clone()], which, seed);
            assert!(e < 1e-3, "add_along {e}");
            let e = grad_error(&|t, v| t.mul_along(v[0], v[1], 1).unwrap(), &[m.clone(), bias.clone()], which, seed);
            assert!(e < 1e-3, "mul_along {e}");
        }
        let e = grad_error(&|t, v| t.transpose(v[0]).unwrap(), std::slice::from_ref(&m), 0, seed);
        assert!(e < 1e-3, "transpose {e}");
    }
}

#[test]
fn conv_identity_and_window_sum() {
    let mut r = rng::seeded(3);
    let x = Tensor::randn(&[1, 5, 4], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = tape.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
    let k3 = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(ones, k3, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[9.0]);
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 2]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert!(tape.conv2d(x, k, None, 0, 1).is_err());
    assert!(tape.conv2d(x, k, None, 1, 0).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(300 + seed);
        let x = Tensor::randn(&[2, 8, 8], &mut r);
        let k = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let stride = 1 + (seed as usize % 2);
        let f = move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
        for which in 0..3 {
            let e = grad_error(&f, &[x.clone(), k.clone(), b.clone()], which, seed);
            assert!(e < 1e-3, "conv input {which} seed {seed}: {e}");
        }
    }
}

#[test]
fn pooling_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(400 + seed);
        let x = Tensor::randn(&[2, 4, 8], &mut r);
        let e = grad_error(&|t, v| t.avg_pool2d(v[0], 2).unwrap(), std::slice::from_ref(&x), 0, seed);
        assert!(e < 1e-3, "avg_pool {e}");
        let e = grad_error(&|t, v| t.upsample_nearest(v[0], 2).unwrap(), &[x], 0, seed);
        assert!(e < 1e-3, "upsample {e}");
    }
}

#[test]
fn grid_sample_constant_plane_and_texel_centers() {
    let mut r = rng::seeded(4);
    let mut tape = Tape::new();
    let plane = tape.constant(Tensor::full(&[2, 4, 6], 0.75));
    let uv = tape.constant(Tensor::uniform(&[10, 2], -1.5, 1.5, &mut r));
    let y = tape.grid_sample_2d(plane, uv).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-6));

    let p = Tensor::randn(&[3, 4, 6], &mut r);
    let plane = tape.constant(p.clone());
    // texel (i, j) center sits at ((2i+1)/W - 1, (2j+1)/H - 1)
    let (i, j) = (2usize, 4usize);
    let uv = tape.constant(Tensor::new(&[1, 2], vec![(2 * i + 1) as f32 / 4.0 - 1.0, (2 * j + 1) as f32 / 6.0 - 1.0]).unwrap());
    let y = tape.grid_sample_2d(plane, uv).unwrap();
    for c in 0..3 {
        let expect = p.data()[c * 24 + i * 6 + j];
        assert!((tape.value(y).data()[c] - expect).abs() < 1e-6);
    }
}

/// Random coordinates kept at least `margin` texels from any bilinear kink,
/// where the derivative is undefined.
fn smooth_uv(n: usize, w: usize, h: usize, r: &mut rng::Rng) -> Tensor {
    use rand::Rng as _;
    let margin = 0.01f32;
    let pick = |size: usize, r: &mut rng::Rng| loop {
        let x: f32 = r.random_range(0.02..(size as f32 - 1.02));
        let frac = x - x.floor();
        if frac > margin && frac < 1.0 - margin {
            return (2.0 * x + 1.0) / size as f32 - 1.0;
        }
    };
    let mut d = Vec::with_capacity(2 * n);
    for _ in 0..n {
        d.push(pick(w, r));
        d.push(pick(h, r));
    }
    Tensor::new(&[n, 2], d).unwrap()
}

#[test]
fn grid_sample_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(500 + seed);
        let plane = Tensor::randn(&[3, 6, 5], &mut r);
        let uv = smooth_uv(7, 6, 5, &mut r);
        for which in 0..2 {
            let e = grad_error(&|t, v| t.grid_sample_2d(v[0], v[1]).unwrap(), &[plane.clone(), uv.clone()], which, seed);
            assert!(e < 1e-3, "grid_sample input {which} seed {seed}: {e}");
        }
    }
}

#[test]
fn grid_sample_clamps_to_border() {
    let mut r = rng::seeded(5);
    let p = Tensor::randn(&[1, 4, 4], &mut r);
    let mut tape = Tape::new();
    let plane = tape.constant(p.clone());
    let uv = tape.constant(Tensor::new(&[2, 2], vec![-3.0, -3.0, 5.0, 5.0]).unwrap());
    let y = tape.grid_sample_2d(plane, uv).unwrap();
    assert_eq!(tape.value(y).data()[0], p.data()[0]);
    assert_eq!(tape.value(y).data()[1], p.data()[15]);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0]);
    let mut state = AdamState::default();
    let cfg = AdamConfig::with_lr(0.1);
    adam_step(&mut p, &Tensor::from_vec(vec![0.5, 0.5]), &mut state, &cfg).unwrap();
    let before = p.clone();
    let m_before = state.m.clone();
    adam_step(&mut p, &Tensor::zeros(&[2]), &mut state, &cfg).unwrap();
    assert_eq!(p, before);
    for (a, b) in state.m.iter().zip(&m_before) {
        assert!((a - 0.9 * b).abs() < 1e-7);
    }
}

#[test]
fn adam_descends_and_converges() {
    let mut x = Tensor::from_vec(vec![1.0]);
    let mut state = AdamState::default();
    let cfg = AdamConfig::with_lr(0.1);
    let g = x.map(|v| 2.0 * v);
    adam_step(&mut x, &g, &mut state, &cfg).unwrap();
    assert!(x.data()[0] < 1.0);

    // f(x) = Σ aᵢ (xᵢ - cᵢ)² with known optimum c
    let a = [1.0f32, 4.0, 0.5];
    let c = [0.3f32, -0.8, 0.6];
    let mut x = Tensor::zeros(&[3]);
    let mut state = AdamState::default();
    let grad = |x: &Tensor| Tensor::from_fn(&[3], |i| 2.0 * a[i] * (x.data()[i] - c[i]));
    let cfg = AdamConfig::with_lr(0.05);
    for _ in 0..200 {
        let g = grad(&x);
        adam_step(&mut x, &g, &mut state, &cfg).unwrap();
    }
    assert!(grad(&x).l2_norm() < 1e-3, "{:?}", grad(&x));
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = Tensor::zeros(&[1]);
    let mut s = AdamState::default();
    let r = adam_step(&mut p, &Tensor::from_vec(vec![f32::NAN]), &mut s, &AdamConfig::default());
    assert!(r.is_err());
}
