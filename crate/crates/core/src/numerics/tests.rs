use super::gradcheck::{central_difference, relative_error, STEP};
use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>())
}

#[test]
fn relu_example() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).values(), &[0.0, 0.0, 2.0]);
    assert_eq!(g.op_tag(y), "relu");
    assert_eq!(g.parents(y), vec![x]);
}

#[test]
fn matmul_example() {
    let mut g = Graph::new();
    let a = g.input(t(&[1, 2], &[1.0, 2.0]));
    let b = g.input(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).values(), &[11.0]);
}

/// Sliding-window convolution written independently of the tape.
fn conv_oracle(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let pad = (kernel.len() - 1) as isize / 2;
    (0..signal.len() as isize)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    let s = t + pad - k as isize;
                    if s >= 0 && (s as usize) < signal.len() {
                        w * signal[s as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

#[test]
fn conv1d_example() {
    assert_eq!(conv_oracle(&[1.0, 2.0, 3.0], &[1.0, 0.0, -1.0]), vec![2.0, 2.0, -2.0]);
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
    let w = g.input(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
    let b = g.input(Tensor::vector(vec![0.0]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).values(), &[2.0, 2.0, -2.0]);
}

#[test]
fn conv1d_matches_oracle_on_random_signals() {
    let mut rng = SeededRng::new(11);
    for k in [1, 2, 3, 5] {
        let signal: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let kernel: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 9], &signal));
        let w = g.input(t(&[1, 1, k], &kernel));
        let b = g.input(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, b).unwrap();
        for (a, e) in g.value(y).values().iter().zip(conv_oracle(&signal, &kernel)) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.input(Tensor::zeros(&[3]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[3]"), "{err}");
}

#[test]
fn maxpool_odd_length() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 5], &[1.0, 3.0, -2.0, -5.0, 4.0]));
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).values(), &[3.0, -2.0, 4.0]);
}

#[test]
fn backward_square() {
    let mut g = Graph::new();
    let p = g.param(0, Tensor::vector(vec![3.0]));
    let sq = g.mul(p, p).unwrap();
    let root = g.sum(sq, 0).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.of(p).values(), &[6.0]);
}

#[test]
fn backward_constant_root_gives_zero() {
    let mut g = Graph::new();
    let p = g.param(0, Tensor::vector(vec![3.0, 1.0]));
    let c = g.input(Tensor::vector(vec![2.0]));
    let root = g.sum(c, 0).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(!grads.reached(p));
    assert_eq!(grads.of(p).values(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let p = g.param(0, Tensor::vector(vec![3.0, 1.0]));
    assert!(matches!(
        g.backward(p),
        Err(crate::error::Error::NonScalarRoot(_))
    ));
}

/// A scalar function of a flat parameter vector expressed on a fresh graph,
/// returning the graph, the parameter handle and the root.
type Build = dyn Fn(&mut Graph, Var) -> Var;

fn check_gradient(shape: &[usize], seed: u64, build: &Build) {
    let mut rng = SeededRng::new(seed);
    let p0 = random(shape, &mut rng);
    let mut g = Graph::new();
    let p = g.param(0, p0.clone());
    let root = build(&mut g, p);
    let grads = g.backward(root).unwrap();
    let analytic = grads.of(p);
    assert_eq!(analytic.shape(), p0.shape());

    let eval = |vals: &[f64]| {
        let mut g = Graph::new();
        let p = g.param(0, t(shape, vals));
        let root = build(&mut g, p);
        g.value(root).values()[0]
    };
    let mut x = p0.values().to_vec();
    for i in 0..x.len() {
        let num = central_difference(&mut x, i, STEP, eval);
        let err = relative_error(analytic.values()[i], num);
        assert!(err < 1e-4, "coord {i}: analytic {} numeric {num}", analytic.values()[i]);
    }
}

fn weights(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
    let mut rng = SeededRng::new(seed);
    g.input(random(shape, &mut rng))
}

fn to_scalar(g: &mut Graph, v: Var) -> Var {
    // Weighted sum so every output coordinate has a distinct cotangent.
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = g.input(t(&shape, &(0..n).map(|i| 0.3 + 0.1 * i as f64).collect::<Vec<_>>()));
    let m = g.mul(v, w).unwrap();
    let flat = g.reshape(m, &[n]).unwrap();
    g.sum(flat, 0).unwrap()
}

#[test]
fn gradcheck_elementwise() {
    check_gradient(&[2, 3], 1, &|g, p| {
        let c = weights(g, &[2, 3], 100);
        let a = g.add(p, c).unwrap();
        let s = g.sub(a, p).unwrap();
        let m = g.mul(p, s).unwrap();
        to_scalar(g, m)
    });
    check_gradient(&[2, 3], 2, &|g, p| {
        let c = weights(g, &[2, 3], 101);
        let c = g.affine(c, 1.0, 3.0);
        let d = g.div(p, c).unwrap();
        let shifted = g.affine(d, 1.0, 4.0);
        let e = g.div(c, shifted).unwrap();
        to_scalar(g, e)
    });
}

#[test]
fn gradcheck_unary() {
    check_gradient(&[5], 3, &|g, p| {
        let r = g.relu(p);
        let tn = g.tanh(p);
        let s = g.sigmoid(p);
        let e = g.exp(p);
        let pos = g.affine(e, 1.0, 0.5);
        let l = g.ln(pos);
        let a = g.add(r, tn).unwrap();
        let b = g.add(s, l).unwrap();
        let c = g.mul(a, b).unwrap();
        to_scalar(g, c)
    });
}

#[test]
fn gradcheck_matmul_both_sides() {
    check_gradient(&[3, 4], 4, &|g, p| {
        let w = weights(g, &[4, 2], 102);
        let y = g.matmul(p, w).unwrap();
        to_scalar(g, y)
    });
    check_gradient(&[4, 2], 5, &|g, p| {
        let x = weights(g, &[3, 4], 103);
        let y = g.matmul(x, p).unwrap();
        to_scalar(g, y)
    });
}

#[test]
fn gradcheck_conv1d_all_inputs() {
    check_gradient(&[2, 2, 7], 6, &|g, p| {
        let w = weights(g, &[3, 2, 3], 104);
        let b = weights(g, &[3], 105);
        let y = g.conv1d(p, w, b).unwrap();
        to_scalar(g, y)
    });
    check_gradient(&[3, 2, 3], 7, &|g, p| {
        let x = weights(g, &[2, 2, 7], 106);
        let b = weights(g, &[3], 107);
        let y = g.conv1d(x, p, b).unwrap();
        to_scalar(g, y)
    });
    check_gradient(&[3], 8, &|g, p| {
        let x = weights(g, &[2, 2, 7], 108);
        let w = weights(g, &[3, 2, 3], 109);
        let y = g.conv1d(x, w, p).unwrap();
        to_scalar(g, y)
    });
}

#[test]
fn gradcheck_shape_ops() {
    check_gradient(&[2, 5], 9, &|g, p| {
        let m = g.maxpool2(p).unwrap();
        to_scalar(g, m)
    });
    check_gradient(&[2, 3, 4], 10, &|g, p| {
        let s = g.sum(p, 1).unwrap();
        let m = g.mean(p, 2).unwrap();
        let m = g.repeat(m, 2, 4).unwrap();
        let m = g.narrow(m, 2, 1, 2).unwrap();
        let m = g.sum(m, 1).unwrap();
        let c = g.concat(&[s, m], 1).unwrap();
        to_scalar(g, c)
    });
    check_gradient(&[3, 4], 11, &|g, p| {
        let n = g.l2norm(p).unwrap();
        let r = g.repeat(p, 0, 2).unwrap();
        let r = g.mean(r, 0).unwrap();
        let r = g.reshape(r, &[12]).unwrap();
        let n2 = g.concat(&[n, r], 0).unwrap();
        to_scalar(g, n2)
    });
    check_gradient(&[3, 4], 12, &|g, p| {
        let n = g.l2_normalize(p, 1e-12).unwrap();
        to_scalar(g, n)
    });
}

#[test]
fn gradcheck_random_two_layer_network() {
    let mut rng = SeededRng::new(99);
    let x = random(&[4, 5], &mut rng);
    let shapes: [&[usize]; 4] = [&[5, 6], &[6], &[6, 1], &[1]];
    let params: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();

    let forward = |g: &mut Graph, ps: &[Var]| {
        let xi = g.input(x.clone());
        let h = g.dense(xi, ps[0], ps[1]).unwrap();
        let h = g.tanh(h);
        let o = g.dense(h, ps[2], ps[3]).unwrap();
        let o = g.mul(o, o).unwrap();
        let o = g.mean(o, 0).unwrap();
        g.sum(o, 0).unwrap()
    };
    let mut g = Graph::new();
    let ps: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p.clone())).collect();
    let root = forward(&mut g, &ps);
    let grads = g.backward(root).unwrap();

    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.of(ps[pi]);
        let mut flat = p.values().to_vec();
        for i in 0..flat.len() {
            let num = central_difference(&mut flat, i, STEP, |vals| {
                let mut g = Graph::new();
                let ps: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| {
                        let v = if j == pi { t(q.shape(), vals) } else { q.clone() };
                        g.param(j, v)
                    })
                    .collect();
                let r = forward(&mut g, &ps);
                g.value(r).values()[0]
            });
            assert!(relative_error(analytic.values()[i], num) < 1e-4);
        }
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = SeededRng::new(5);
    let p0 = random(&[6], &mut rng);
    let f = |g: &mut Graph, p: Var| {
        let e = g.tanh(p);
        let s = g.mul(e, p).unwrap();
        g.sum(s, 0).unwrap()
    };
    let h = |g: &mut Graph, p: Var| {
        let s = g.sigmoid(p);
        let s = g.mul(s, s).unwrap();
        g.sum(s, 0).unwrap()
    };
    let (a, b) = (1.7, -0.4);

    let grad_of = |build: &dyn Fn(&mut Graph, Var) -> Var| {
        let mut g = Graph::new();
        let p = g.param(0, p0.clone());
        let r = build(&mut g, p);
        g.backward(r).unwrap().of(p)
    };
    let gf = grad_of(&f);
    let gh = grad_of(&h);
    let gc = grad_of(&|g, p| {
        let x = f(g, p);
        let y = h(g, p);
        let x = g.affine(x, a, 0.0);
        let y = g.affine(y, b, 0.0);
        g.add(x, y).unwrap()
    });
    for i in 0..6 {
        let expected = a * gf.values()[i] + b * gh.values()[i];
        assert!((gc.values()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn deterministic_forward_and_backward() {
    let run = || {
        let mut rng = SeededRng::new(17);
        let mut g = Graph::new();
        let p = g.param(0, random(&[3, 3], &mut rng));
        let x = g.input(random(&[2, 3], &mut rng));
        let y = g.matmul(x, p).unwrap();
        let y = g.tanh(y);
        let n = g.l2norm(y).unwrap();
        let r = g.sum(n, 0).unwrap();
        let grads = g.backward(r).unwrap();
        (g.value(r).clone(), grads.of(p))
    };
    assert_eq!(run(), run());
}

#[test]
fn glorot_bounds() {
    let mut rng = SeededRng::new(1);
    let w = glorot_uniform(&[10, 20], 10, 20, &mut rng);
    let lim = (6.0f64 / 30.0).sqrt();
    assert!(w.values().iter().all(|v| v.abs() <= lim));
}
