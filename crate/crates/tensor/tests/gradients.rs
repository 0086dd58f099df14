use matchflow_tensor::{grad_check, GradCheckConfig, Result, Tape, Tensor, TensorError, Var};

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    // Small LCG; values in [-1, 1), away from the ReLU / abs kinks only by chance.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Weighted sum so that every output element matters with a distinct weight.
fn probe(g: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(rand_tensor(&shape, seed ^ 0xabc));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check(name: &str, params: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
    println!("{name}: max rel error {:.3e} over {} coords", r.max_rel_error, r.coords_checked);
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
}

#[test]
fn backward_examples() {
    let mut g: Tape<f64> = Tape::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

    let mut g: Tape<f64> = Tape::new();
    let x = g.param(Tensor::zeros(&[2]));
    let s = g.softmax(x, 0, 1.0).unwrap();
    let first = g.gather(s, &[0]).unwrap();
    g.backward(first).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25, -0.25]);

    let mut g: Tape<f64> = Tape::new();
    let x = g.param(Tensor::full(&[3], 2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.mul(c, c).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn softmax_jacobian_matches_finite_difference() {
    check("softmax[0]", vec![Tensor::zeros(&[2])], |g, p| {
        let s = g.softmax(p[0], 0, 1.0)?;
        g.gather(s, &[0])
    });
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut g: Tape<f64> = Tape::new();
    let a = g.param(Tensor::full(&[2], 1.5));
    let unused = g.param(Tensor::full(&[4], 9.0));
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &Tensor::zeros(&[4]));
}

#[test]
fn backward_twice_is_contract_error() {
    let mut g: Tape<f64> = Tape::new();
    let a = g.param(Tensor::full(&[2], 1.5));
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    let before = g.grad(a).unwrap().clone();
    assert!(matches!(g.backward(s), Err(TensorError::Contract(_))));
    assert_eq!(g.grad(a).unwrap(), &before, "no silent accumulation");
    assert!(matches!(g.relu(a), Err(TensorError::Contract(_))));
}

#[test]
fn backward_needs_scalar() {
    let mut g: Tape<f64> = Tape::new();
    let a = g.param(Tensor::full(&[2], 1.5));
    let r = g.relu(a).unwrap();
    assert!(matches!(g.backward(r), Err(TensorError::Contract(_))));
}

#[test]
fn quadratic_form_is_exact() {
    let a = rand_tensor(&[4, 4], 3);
    check("quadratic", vec![rand_tensor(&[4, 1], 7)], move |g, p| {
        let av = g.constant(a.clone());
        let ax = g.matmul(av, p[0])?;
        let xt = g.transpose(p[0])?;
        let q = g.matmul(xt, ax)?;
        g.sum(q)
    });
    let a = rand_tensor(&[4, 4], 3);
    let r = grad_check(
        move |g, p| {
            let av = g.constant(a.clone());
            let ax = g.matmul(av, p[0])?;
            let xt = g.transpose(p[0])?;
            let q = g.matmul(xt, ax)?;
            g.sum(q)
        },
        &[rand_tensor(&[4, 1], 7)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn elementwise_ops() {
    let x = rand_tensor(&[3, 4], 11);
    let y = rand_tensor(&[3, 4], 12);
    check("add", vec![x.clone(), y.clone()], |g, p| {
        let v = g.add(p[0], p[1])?;
        probe(g, v, 1)
    });
    check("sub", vec![x.clone(), y.clone()], |g, p| {
        let v = g.sub(p[0], p[1])?;
        probe(g, v, 2)
    });
    check("mul", vec![x.clone(), y.clone()], |g, p| {
        let v = g.mul(p[0], p[1])?;
        probe(g, v, 3)
    });
    check("scale+add_scalar", vec![x.clone()], |g, p| {
        let v = g.scale(p[0], -2.5)?;
        let v = g.add_scalar(v, 0.75)?;
        probe(g, v, 4)
    });
    check("relu", vec![x.clone()], |g, p| {
        let v = g.relu(p[0])?;
        probe(g, v, 5)
    });
    check("sigmoid", vec![x.clone()], |g, p| {
        let v = g.sigmoid(p[0])?;
        probe(g, v, 6)
    });
    check("tanh", vec![x.clone()], |g, p| {
        let v = g.tanh(p[0])?;
        probe(g, v, 7)
    });
    check("abs", vec![x.clone()], |g, p| {
        let v = g.abs(p[0])?;
        probe(g, v, 8)
    });
    check("square", vec![x.clone()], |g, p| {
        let v = g.square(p[0])?;
        probe(g, v, 9)
    });
    let pos = x.map(|v| v.abs() + 0.2);
    check("log", vec![pos], |g, p| {
        let v = g.log_clamped(p[0], 1e-12)?;
        probe(g, v, 10)
    });
    check("mean", vec![x], |g, p| {
        let sq = g.square(p[0])?;
        g.mean(sq)
    });
}

#[test]
fn structural_ops() {
    let a = rand_tensor(&[3, 5], 21);
    let b = rand_tensor(&[5, 2], 22);
    check("matmul", vec![a.clone(), b], |g, p| {
        let v = g.matmul(p[0], p[1])?;
        probe(g, v, 1)
    });
    check("transpose", vec![a.clone()], |g, p| {
        let v = g.transpose(p[0])?;
        probe(g, v, 2)
    });
    for axis in 0..2 {
        check("softmax", vec![a.clone()], move |g, p| {
            let v = g.softmax(p[0], axis, 0.3)?;
            probe(g, v, 3 + axis as u64)
        });
    }
    check("concat+slice", vec![a.clone(), rand_tensor(&[3, 2], 23)], |g, p| {
        let c = g.concat(&[p[0], p[1]], 1)?;
        let s = g.slice(c, 1, 2, 4)?;
        probe(g, s, 5)
    });
    check("reshape+gather", vec![a.clone()], |g, p| {
        let r = g.reshape(p[0], &[15])?;
        let s = g.gather(r, &[0, 4, 4, 14])?;
        probe(g, s, 6)
    });
    check("add_bias", vec![rand_tensor(&[2, 3, 4], 24), rand_tensor(&[3], 25)], |g, p| {
        let v = g.add_bias(p[0], p[1], 1)?;
        probe(g, v, 7)
    });
    check("layer_norm", vec![a, rand_tensor(&[5], 26), rand_tensor(&[5], 27)], |g, p| {
        let v = g.layer_norm(p[0], p[1], p[2])?;
        probe(g, v, 8)
    });
    check("avg_pool2", vec![rand_tensor(&[2, 4, 6], 28)], |g, p| {
        let v = g.avg_pool2(p[0])?;
        probe(g, v, 9)
    });
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 2)] {
        check("conv2d", vec![rand_tensor(&[2, 6, 5], 31), rand_tensor(&[3, 2, k, k], 32)], move |g, p| {
            let v = g.conv2d(p[0], p[1], stride, pad)?;
            probe(g, v, 10)
        });
    }
}

#[test]
fn grad_check_reports_non_finite() {
    let e = grad_check(
        |g, p| {
            let l = g.log_clamped(p[0], 0.0)?;
            g.sum(l)
        },
        &[Tensor::new(&[2], vec![1.0, 5e-6]).unwrap()],
        &GradCheckConfig::default(),
    )
    .unwrap_err();
    assert_eq!(e, TensorError::NonFiniteCheck { param: 0, coord: 1 });
}

#[test]
fn grad_check_detects_a_wrong_gradient() {
    // A function whose tape gradient is wrong on purpose: the detached
    // factor hides half of d(x·x)/dx from the tape.
    let r = grad_check(
        |g, p| {
            let d = g.detach(p[0]);
            let y = g.mul(p[0], d)?;
            g.sum(y)
        },
        &[Tensor::full(&[3], 2.0)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_error > 0.4);
}
