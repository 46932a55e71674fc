mod common;

use std::rc::Rc;

use proptest::prelude::*;
use voxclip::tensor::{finite_diff_check, FdOptions, Graph, Tensor, TensorError, Var, GATHER_ZERO};

type Op = fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>;

fn check(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>, x: &Tensor<f64>) {
    let r = finite_diff_check(f, x, &FdOptions::eps(1e-6)).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    // a random linear functional so every output element matters
    let w = common::random_tensor(g.shape(y), -1.0, 1.0, seed);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn unary_ops_match_finite_differences() {
    let ops: [(&str, Op); 8] = [
        ("neg", |g, x| g.neg(x)),
        ("exp", |g, x| g.exp(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("softplus", |g, x| g.softplus(x)),
        ("relu", |g, x| g.relu(x)),
        ("clamp", |g, x| g.clamp(x, -0.3, 0.4)),
        ("min_scalar", |g, x| g.min_scalar(x, 0.1)),
        ("affine", |g, x| {
            let y = g.mul_scalar(x, 2.5)?;
            let y = g.add_scalar(y, -1.0)?;
            g.rsub_scalar(3.0, y)
        }),
    ];
    let x = common::random_tensor(&[3, 4], -2.0, 2.0, 1);
    for (name, op) in ops {
        let r = finite_diff_check(
            |g, v| {
                let y = op(g, v)?;
                weighted_sum(g, y, 9)
            },
            &x,
            &FdOptions::eps(1e-6),
        )
        .unwrap();
        assert!(r.passes(1e-6), "{name}: {r:?}");
    }
}

#[test]
fn log_and_div_on_positive_inputs() {
    let x = common::random_tensor(&[5], 0.2, 3.0, 2);
    check(|g, v| {
        let l = g.log(v)?;
        weighted_sum(g, l, 3)
    }, &x);
    check(|g, v| {
        let c = g.constant(common::random_tensor(&[2, 5], -1.0, 1.0, 4));
        let d = g.div(c, v)?;
        let e = g.div(d, v)?;
        weighted_sum(g, e, 5)
    }, &x);
}

#[test]
fn broadcasting_binary_ops() {
    let x = common::random_tensor(&[1, 4], -1.0, 1.0, 6);
    check(|g, v| {
        let m = g.constant(common::random_tensor(&[3, 4], -1.0, 1.0, 7));
        let a = g.add(m, v)?;
        let b = g.mul(a, v)?;
        let c = g.sub(b, m)?;
        weighted_sum(g, c, 8)
    }, &x);
    let s = Tensor::scalar(0.7);
    check(|g, v| {
        let m = g.constant(common::random_tensor(&[2, 3], -1.0, 1.0, 1));
        let a = g.mul(m, v)?;
        let b = g.add(a, v)?;
        weighted_sum(g, b, 2)
    }, &s);
}

#[test]
fn reductions_and_layout() {
    let x = common::random_tensor(&[2, 3, 4], -1.0, 1.0, 10);
    for axis in 0..3 {
        check(|g, v| {
            let s = g.sum_axis(v, axis, false)?;
            let sq = g.mul(s, s)?;
            weighted_sum(g, sq, 11)
        }, &x);
        check(|g, v| {
            let s = g.mean_axis(v, axis, true)?;
            let t = g.mul(s, v)?;
            weighted_sum(g, t, 12)
        }, &x);
    }
    check(|g, v| {
        let a = g.narrow(v, 2, 1, 2)?;
        let b = g.narrow(v, 2, 0, 1)?;
        let c = g.concat(&[b, a, b], 2)?;
        let r = g.reshape(c, [6, 4])?;
        let m = g.mul(r, r)?;
        weighted_sum(g, m, 13)
    }, &x);
}

#[test]
fn matmul_and_transpose() {
    let a = common::random_tensor(&[3, 4], -1.0, 1.0, 20);
    check(|g, v| {
        let b = g.constant(common::random_tensor(&[4, 2], -1.0, 1.0, 21));
        let p = g.matmul(v, b)?;
        let t = g.transpose(p)?;
        let q = g.matmul(t, v)?;
        weighted_sum(g, q, 22)
    }, &a);
}

#[test]
fn cumprod_gradient() {
    let x = common::random_tensor(&[3, 5], 0.05, 0.95, 30);
    check(|g, v| {
        let c = g.exclusive_cumprod(v)?;
        weighted_sum(g, c, 31)
    }, &x);
}

#[test]
fn trilinear_gradient_wrt_grid() {
    let grid = common::random_tensor(&[2, 3, 4, 3], -1.0, 1.0, 40);
    let pts = vec![[0.2, 1.7, 0.9], [1.99, 0.0, 2.0], [0.5, 2.5, 1.5], [2.5, 0.0, 0.0]];
    check(|g, v| {
        let y = g.trilinear(v, &pts)?;
        let y = g.sigmoid(y)?;
        weighted_sum(g, y, 41)
    }, &grid);
}

#[test]
fn trilinear_matches_scalar_oracle() {
    let grid = common::random_tensor(&[2, 4, 3, 5], -1.0, 1.0, 42);
    let pts = vec![[0.0, 0.0, 0.0], [3.0, 2.0, 4.0], [1.25, 0.5, 3.75], [2.9, 1.1, 0.3], [-0.5, 1.0, 1.0]];
    let mut g = Graph::new();
    let v = g.constant(grid.clone());
    let y = g.trilinear(v, &pts).unwrap();
    for (p, u) in pts.iter().enumerate() {
        for c in 0..2 {
            let want = common::trilinear(grid.data(), [4, 3, 5], c, *u);
            assert!((g.value(y).data()[p * 2 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_and_gather_gradients() {
    let img = common::random_tensor(&[2, 3, 4, 3], -1.0, 1.0, 50);
    let coords: Vec<[f64; 2]> = (0..2 * 2 * 3)
        .map(|i| [0.37 * i as f64 % 3.4 - 0.2, 0.61 * i as f64 % 2.3])
        .collect();
    check(|g, v| {
        let y = g.bilinear(v, &[1, 0], (2, 3), &coords)?;
        weighted_sum(g, y, 51)
    }, &img);
    let idx: Vec<u32> = vec![0, 5, 5, GATHER_ZERO, 71, 2, 13, GATHER_ZERO];
    check(|g, v| {
        let y = g.gather(v, Rc::new(idx.clone()), [2, 4])?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, 52)
    }, &img);
}

#[test]
fn external_vjp_chains() {
    // external node standing in for sum(w * x^2), with its analytic VJP
    let x = common::random_tensor(&[4], -1.0, 1.0, 60);
    let w = common::random_tensor(&[4], -1.0, 1.0, 61);
    check(|g, v| {
        let e = g.exp(v)?;
        let val: f64 = g.value(e).data().iter().zip(w.data()).map(|(a, b)| a * a * b).sum();
        let grad: Vec<f64> = g.value(e).data().iter().zip(w.data()).map(|(a, b)| 2.0 * a * b).collect();
        g.external(e, val, grad)
    }, &x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_is_linear_in_the_root(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..500) {
        let x = common::random_tensor(&[6], -1.0, 1.0, seed);
        let grads = |ka: f64, kb: f64| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let f1 = g.sigmoid(v).unwrap();
            let f1 = g.sum(f1).unwrap();
            let f2 = g.mul(v, v).unwrap();
            let f2 = g.mean(f2).unwrap();
            let t1 = g.mul_scalar(f1, ka).unwrap();
            let t2 = g.mul_scalar(f2, kb).unwrap();
            let r = g.add(t1, t2).unwrap();
            g.gradients(r, &[v]).unwrap().remove(0)
        };
        let ga = grads(a, 0.0);
        let gb = grads(0.0, b);
        let gab = grads(a, b);
        for i in 0..6 {
            prop_assert!((gab.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_ones(shape in proptest::collection::vec(1usize..4, 1..4)) {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::zeros(shape.clone()));
        let s = g.sum(v).unwrap();
        let gr = g.gradients(s, &[v]).unwrap().remove(0);
        prop_assert!(gr.data().iter().all(|&x| x == 1.0));
        prop_assert_eq!(gr.shape(), &shape[..]);
    }

    #[test]
    fn softplus_is_stable_and_positive(x in -500.0f64..500.0) {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::scalar(x));
        let s = g.softplus(v).unwrap();
        let y = g.item(s);
        prop_assert!(y.is_finite() && y >= 0.0);
        prop_assert!((y - common::softplus(x)).abs() <= 1e-12 * (1.0 + y.abs()));
    }

    #[test]
    fn cumprod_matches_loop(vals in proptest::collection::vec(0.0f64..1.0, 1..12)) {
        let n = vals.len();
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new([1, n], vals.clone()).unwrap());
        let c = g.exclusive_cumprod(v).unwrap();
        let mut acc = 1.0;
        for i in 0..n {
            prop_assert!((g.value(c).data()[i] - acc).abs() < 1e-12);
            acc *= vals[i];
        }
    }
}
