mod common;

use common::{fd_error, randn, rng, weighted};
use proptest::prelude::*;
use tokenbudget::nn::{AttentionParams, Linear};
use tokenbudget::sampler::project;
use tokenbudget::tensor::{cosine_matrix, softmax_rows, COSINE_EPS};
use tokenbudget::{Graph, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_associative_with_identity(a in matrix(4, 4), b in matrix(4, 4), c in matrix(4, 4)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
        prop_assert!(a.matmul(&Tensor::eye(4)).unwrap().max_abs_diff(&a) < 1e-9);
        prop_assert!(Tensor::eye(4).matmul(&a).unwrap().max_abs_diff(&a) < 1e-9);
    }

    #[test]
    fn cosine_matrix_symmetric(a in matrix(5, 3)) {
        let s = cosine_matrix(&a, &a, COSINE_EPS).unwrap();
        prop_assert!(s.max_abs_diff(&s.transpose().unwrap()) == 0.0);
        for v in s.data() {
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extremes(
        d in prop::collection::vec(prop_oneof![-1e4f64..1e4, Just(1e4), Just(-1e4)], 12)
    ) {
        let s = softmax_rows(&Tensor::matrix(3, 4, d).unwrap()).unwrap();
        for r in 0..3 {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn project_is_linear(x in matrix(3, 4), y in matrix(3, 4), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut p = Linear::init(4, 5, &mut rng(1));
        p.bias = Tensor::zeros(&[5]);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = project(&mix, &p).unwrap();
        let rhs = project(&x, &p).unwrap().scale(a).add(&project(&y, &p).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }
}

#[test]
fn matmul_gradient() {
    let (a, b, w) = (randn(&[5, 4], 1), randn(&[4, 3], 2), randn(&[5, 3], 3));
    let err = fd_error(&[a, b], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted(g, y, &w)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_gradient() {
    let (x, w) = (randn(&[4, 6], 4), randn(&[4, 6], 5));
    let err = fd_error(&[x], |g, x| {
        let y = g.softmax_rows(x[0])?;
        weighted(g, y, &w)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layernorm_gradient() {
    let (x, gain, bias, w) = (randn(&[2, 4], 6), randn(&[4], 7), randn(&[4], 8), randn(&[2, 4], 9));
    let err = fd_error(&[x, gain, bias], |g, x| {
        let y = g.layernorm(x[0], x[1], x[2])?;
        weighted(g, y, &w)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn attention_gradient() {
    let mut r = rng(10);
    let p = AttentionParams::init(8, &mut r);
    let q = Tensor::randn(&[3, 8], 1.0, &mut r);
    let ctx = Tensor::randn(&[5, 8], 1.0, &mut r);
    let w = Tensor::randn(&[3, 8], 1.0, &mut r);
    let err = fd_error(&[q, ctx, p.wq, p.wk, p.wv, p.wo], |g, x| {
        let params = AttentionParams {
            wq: x[2],
            wk: x[3],
            wv: x[4],
            wo: x[5],
        };
        let y = params.forward(g, x[0], x[1], 2)?;
        weighted(g, y, &w)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn project_gradient() {
    let mut r = rng(11);
    let p = Linear::init(4, 5, &mut r);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[3, 5], 1.0, &mut r);
    let err = fd_error(&[x, p.weight, p.bias], |g, x| {
        let lin = Linear {
            weight: x[1],
            bias: x[2],
        };
        let y = lin.forward(g, x[0])?;
        weighted(g, y, &w)
    });
    assert!(err < 1e-6, "{err}");
}

/// Every graph op against central differences on 100 seeds.
#[test]
fn every_op_backward_matches_finite_differences() {
    type Build = fn(&mut Graph, &[tokenbudget::Var]) -> tokenbudget::Result<tokenbudget::Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, x| g.add(x[0], x[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, x| g.mul(x[0], x[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |g, x| g.add_row(x[0], x[1])),
        ("scale", vec![vec![3, 4]], |g, x| Ok(g.scale(x[0], -1.7))),
        ("transpose", vec![vec![3, 4]], |g, x| g.transpose(x[0])),
        ("softmax_rows", vec![vec![3, 4]], |g, x| g.softmax_rows(x[0])),
        ("log_softmax_rows", vec![vec![3, 4]], |g, x| g.log_softmax_rows(x[0])),
        ("layernorm", vec![vec![3, 4], vec![4], vec![4]], |g, x| g.layernorm(x[0], x[1], x[2])),
        ("gelu", vec![vec![3, 4]], |g, x| Ok(g.gelu(x[0]))),
        ("log", vec![vec![3, 4]], |g, x| {
            let sq = g.mul(x[0], x[0])?;
            let one = g.constant(Tensor::full(&[3, 4], 1.0));
            let pos = g.add(sq, one)?;
            Ok(g.log(pos))
        }),
        ("sum", vec![vec![3, 4]], |g, x| {
            let s = g.sum(x[0]);
            g.reshape(s, &[1, 1])
        }),
        ("concat_rows", vec![vec![2, 4], vec![3, 4]], |g, x| g.concat_rows(&[x[0], x[1]])),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |g, x| g.concat_cols(&[x[0], x[1]])),
        ("slice_rows", vec![vec![5, 4]], |g, x| g.slice_rows(x[0], 1, 4)),
        ("slice_cols", vec![vec![3, 5]], |g, x| g.slice_cols(x[0], 2, 5)),
        ("reshape", vec![vec![3, 4]], |g, x| g.reshape(x[0], &[2, 6])),
        ("cosine_matrix", vec![vec![3, 4], vec![2, 4]], |g, x| g.cosine_matrix(x[0], x[1], 1e-8)),
        ("attention", vec![vec![2, 4], vec![3, 4], vec![3, 4], vec![4, 4]], |g, x| {
            g.attention(x[0], x[1], x[2], x[3], 2)
        }),
    ];
    for (name, shapes, build) in &cases {
        for seed in 0..100u64 {
            let mut r = rng(seed * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
            let out_shape = {
                let mut g = Graph::new();
                let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let y = build(&mut g, &vars).unwrap();
                g.value(y).shape().to_vec()
            };
            let w = Tensor::randn(&out_shape, 1.0, &mut r);
            let err = fd_error(&inputs, |g, x| {
                let y = build(g, x)?;
                weighted(g, y, &w)
            });
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn straight_through_routes_gradient_to_soft_rows() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[&[0.3, -0.2], &[1.0, 0.5]]));
    let soft = g.softmax_rows(x).unwrap();
    let hard = g
        .straight_through(soft, Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]))
        .unwrap();
    let w = Tensor::from_rows(&[&[2.0, -1.0], &[0.5, 3.0]]);
    let lh = weighted(&mut g, hard, &w).unwrap();
    let ls = weighted(&mut g, soft, &w).unwrap();
    assert_eq!(g.value(lh).item(), 2.0 + 0.5);
    let gh = g.backward(lh).unwrap();
    let gs = g.backward(ls).unwrap();
    assert_eq!(gh.get(x).unwrap(), gs.get(x).unwrap());
}
