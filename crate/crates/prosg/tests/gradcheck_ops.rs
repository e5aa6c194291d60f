//! Per-op backward rules vs the central-difference oracle.
//!
//! Every differentiable op gets a small random instance whose scalar
//! root is a weighted sum (fixed random weights, so permutation or sign
//! errors cannot cancel out). Kinked ops (relu, maximum) use inputs
//! bounded away from the kink.

use prosg::gradcheck::grad_check;
use prosg::graph::{Graph, NodeId};
use prosg::tensor::{NamedParams, Param, Tensor};
use prosg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uparam(shape: Vec<usize>, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Param<f64> {
    Tensor::uniform(shape, lo, hi, r).into_param()
}

/// Values in ±[0.2, 1.0] — differentiable region for relu/maximum.
fn kink_free(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Param<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.gen_range(0.2..1.0);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().into_param()
}

/// Weighted scalar readout: sum(x ⊙ fixed random weights).
fn readout(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let mut r = rng(seed ^ 0xabcdef);
    let w = Tensor::uniform(shape, 0.5, 1.5, &mut r);
    let wc = g.constant(w);
    let prod = g.mul(x, wc)?;
    g.sum(prod)
}

fn run(
    name: &str,
    params: NamedParams<f64>,
    mut build: impl FnMut(&mut Graph<f64>) -> Result<NodeId>,
) {
    let report = grad_check(&mut build, &params, EPS).unwrap();
    let (worst_name, worst) = report.worst().cloned().unwrap_or(("-".into(), 0.0));
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} at {worst_name} ({worst})",
        report.max_rel_err
    );
}

#[test]
fn elementwise_binary_equal_shapes() {
    let mut r = rng(1);
    let a = uparam(vec![2, 3], -1.0, 1.0, &mut r);
    let b = uparam(vec![2, 3], 0.5, 1.5, &mut r); // bounded away from 0 for div
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let (a, b) = (a.clone(), b.clone());
        run(
            name,
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            move |g| {
                let x = g.param(&a);
                let y = g.param(&b);
                let z = match which {
                    0 => g.add(x, y)?,
                    1 => g.sub(x, y)?,
                    2 => g.mul(x, y)?,
                    _ => g.div(x, y)?,
                };
                readout(g, z, 1)
            },
        );
    }
}

#[test]
fn elementwise_binary_row_broadcast() {
    let mut r = rng(2);
    let a = uparam(vec![3, 4], -1.0, 1.0, &mut r);
    let b = uparam(vec![4], 0.5, 1.5, &mut r);
    // rhs row broadcast
    {
        let (a, b) = (a.clone(), b.clone());
        run(
            "mul rhs-row",
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            move |g| {
                let x = g.param(&a);
                let y = g.param(&b);
                let z = g.mul(x, y)?;
                readout(g, z, 2)
            },
        );
    }
    // lhs row broadcast
    {
        let (a, b) = (a.clone(), b.clone());
        run(
            "add lhs-row",
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            move |g| {
                let x = g.param(&a);
                let y = g.param(&b);
                let z = g.add(y, x)?;
                readout(g, z, 3)
            },
        );
    }
}

#[test]
fn maximum_away_from_ties() {
    let mut r = rng(3);
    // construct pairs that differ by at least 0.2
    let n = 12;
    let base: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let offs: Vec<f64> = (0..n)
        .map(|_| {
            let d = r.gen_range(0.2..0.8);
            if r.gen_bool(0.5) {
                d
            } else {
                -d
            }
        })
        .collect();
    let a = Tensor::new(vec![3, 4], base.clone()).unwrap().into_param();
    let b = Tensor::new(
        vec![3, 4],
        base.iter().zip(&offs).map(|(x, d)| x + d).collect(),
    )
    .unwrap()
    .into_param();
    run(
        "maximum",
        vec![("a".into(), a.clone()), ("b".into(), b.clone())],
        move |g| {
            let x = g.param(&a);
            let y = g.param(&b);
            let z = g.maximum(x, y)?;
            readout(g, z, 4)
        },
    );
}

#[test]
fn lerp_with_row_mu() {
    let mut r = rng(4);
    let mu = uparam(vec![4], 0.1, 0.9, &mut r);
    let a = uparam(vec![2, 4], -1.0, 1.0, &mut r);
    let b = uparam(vec![2, 4], -1.0, 1.0, &mut r);
    run(
        "lerp",
        vec![
            ("mu".into(), mu.clone()),
            ("a".into(), a.clone()),
            ("b".into(), b.clone()),
        ],
        move |g| {
            let m = g.param(&mu);
            let x = g.param(&a);
            let y = g.param(&b);
            let z = g.lerp(m, x, y)?;
            readout(g, z, 5)
        },
    );
}

#[test]
fn unary_ops() {
    let mut r = rng(5);
    let smooth = uparam(vec![2, 5], -1.5, 1.5, &mut r);
    let kinked = kink_free(vec![2, 5], &mut r);
    for name in ["sigmoid", "exp", "scale"] {
        let p = smooth.clone();
        run(name, vec![("x".into(), p.clone())], move |g| {
            let x = g.param(&p);
            let y = match name {
                "sigmoid" => g.sigmoid(x)?,
                "exp" => g.exp(x)?,
                _ => g.scale(x, 0.7)?,
            };
            readout(g, y, 6)
        });
    }
    for name in ["relu", "max_scalar"] {
        let p = kinked.clone();
        run(name, vec![("x".into(), p.clone())], move |g| {
            let x = g.param(&p);
            let y = match name {
                "relu" => g.relu(x)?,
                _ => g.max_scalar(x, 0.05)?,
            };
            readout(g, y, 7)
        });
    }
}

#[test]
fn matmul_both_orientations() {
    let mut r = rng(6);
    let a = uparam(vec![2, 3], -1.0, 1.0, &mut r);
    let b_plain = uparam(vec![3, 4], -1.0, 1.0, &mut r);
    let b_trans = uparam(vec![4, 3], -1.0, 1.0, &mut r);
    {
        let (a, b) = (a.clone(), b_plain.clone());
        run(
            "matmul plain",
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            move |g| {
                let x = g.param(&a);
                let y = g.param(&b);
                let z = g.matmul(x, y, false)?;
                readout(g, z, 8)
            },
        );
    }
    {
        let (a, b) = (a.clone(), b_trans.clone());
        run(
            "matmul transpose_b",
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            move |g| {
                let x = g.param(&a);
                let y = g.param(&b);
                let z = g.matmul(x, y, true)?;
                readout(g, z, 9)
            },
        );
    }
}

#[test]
fn layernorm_full_backward() {
    let mut r = rng(7);
    let x = uparam(vec![3, 6], -1.0, 1.0, &mut r);
    let gain = uparam(vec![6], 0.5, 1.5, &mut r);
    let bias = uparam(vec![6], -0.5, 0.5, &mut r);
    run(
        "layernorm",
        vec![
            ("x".into(), x.clone()),
            ("g".into(), gain.clone()),
            ("b".into(), bias.clone()),
        ],
        move |g| {
            let xn = g.param(&x);
            let gn = g.param(&gain);
            let bn = g.param(&bias);
            let y = g.layernorm(xn, gn, bn, 1e-5)?;
            readout(g, y, 10)
        },
    );
}

#[test]
fn embed_accumulates_repeated_tokens() {
    let mut r = rng(8);
    let table = uparam(vec![5, 3], -1.0, 1.0, &mut r);
    run(
        "embed",
        vec![("table".into(), table.clone())],
        move |g| {
            let t = g.param(&table);
            let y = g.embed(t, &[0, 2, 4, 2])?;
            readout(g, y, 11)
        },
    );
}

#[test]
fn structural_ops() {
    let mut r = rng(9);
    let a = uparam(vec![2, 3], -1.0, 1.0, &mut r);
    let b = uparam(vec![2, 3], -1.0, 1.0, &mut r);
    run(
        "stack_rows + row_select + reshape",
        vec![("a".into(), a.clone()), ("b".into(), b.clone())],
        move |g| {
            let x = g.param(&a);
            let y = g.param(&b);
            let s = g.stack_rows(&[x, y])?;
            let row = g.row_select(s, 2)?;
            let rs = g.reshape(row, vec![3, 1])?;
            readout(g, rs, 12)
        },
    );
}

#[test]
fn low_rank_apply_all_three_grads() {
    let mut r = rng(10);
    let z = uparam(vec![2, 4], -1.0, 1.0, &mut r);
    let a0 = uparam(vec![2, 4], -1.0, 1.0, &mut r);
    let a1 = uparam(vec![2, 4], -1.0, 1.0, &mut r);
    let b = uparam(vec![4, 2], -1.0, 1.0, &mut r);
    run(
        "low_rank_apply",
        vec![
            ("z".into(), z.clone()),
            ("a0".into(), a0.clone()),
            ("a1".into(), a1.clone()),
            ("b".into(), b.clone()),
        ],
        move |g| {
            let zn = g.param(&z);
            let a0n = g.param(&a0);
            let a1n = g.param(&a1);
            let bn = g.param(&b);
            let y = g.low_rank_apply(zn, &[(a0n, bn), (a1n, bn)])?;
            readout(g, y, 13)
        },
    );
}

#[test]
fn cross_entropy_respects_mask() {
    let mut r = rng(11);
    let logits = uparam(vec![4, 6], -2.0, 2.0, &mut r);
    let targets = [1u32, 3, 0, 5];
    let mask = [true, false, true, true];
    {
        let logits = logits.clone();
        run(
            "cross_entropy",
            vec![("logits".into(), logits.clone())],
            move |g| {
                let x = g.param(&logits);
                g.cross_entropy(x, &targets, &mask)
            },
        );
    }
    // masked rows get exactly zero gradient
    let mut g = Graph::new();
    let x = g.param(&logits);
    let loss = g.cross_entropy(x, &targets, &mask).unwrap();
    for (_, p) in [("l", logits.clone())] {
        p.borrow_mut().zero_grad();
    }
    g.backward(loss).unwrap();
    let t = logits.borrow();
    let grad = t.grad().unwrap();
    for j in 0..6 {
        assert_eq!(grad[6 + j], 0.0, "masked row leaked gradient");
    }
}
