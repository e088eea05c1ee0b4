//! Finite-difference gradient oracle shared by the gradcheck and
//! acceptance test targets.

#![allow(dead_code)]

use gearlab::era::aug_loss;
use gearlab::nn::{Network, ParamVars, Topology};
use gearlab::rng::{substream, Rng};
use gearlab::tensor::{Activation, PoolKind, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Gradient entries smaller than this are compared on an absolute scale;
/// a pure ratio is meaningless for exact zeros.
pub const FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between tape gradients and central differences
/// of `f` over every entry of every input.
pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x)).collect();
        let o = f(&mut t, &vs);
        t.scalar(o)
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + H;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - H;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let e = rel_error(analytic[i][j], numeric);
            worst = worst.max(e);
        }
    }
    worst
}

pub fn normal(r: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values with magnitude in [0.05, 1], well clear of the ReLU kink.
pub fn off_kink(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..1.0);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.01 apart in random order, so no two entries
/// of a pooling window are within the finite-difference step.
pub fn distinct(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.01 * i as f64 - 0.005 * n as f64).collect();
    data.shuffle(r);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Sum of `x ⊙ R` for a fixed random `R`, turning any output into a scalar
/// whose gradient exercises every output entry.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut r = substream(seed, "project", &[]);
    let w: Vec<f64> = (0..n)
        .map(|_| StandardNormal.sample(&mut r))
        .collect::<Vec<f64>>();
    let c = tape.constant(&shape, w).unwrap();
    let m = tape.mul(x, c).unwrap();
    tape.sum(m)
}

fn labels(r: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..classes)).collect()
}

fn small_topology(r: &mut Rng) -> Topology {
    let depth = r.gen_range(2..=3);
    let mut t = Topology::plain(depth, 2, 3, [2, 4, 4]);
    t.widths = (0..depth).map(|_| r.gen_range(1..=3)).collect();
    t.pool_after = if r.gen::<bool>() { vec![0] } else { vec![] };
    t.pool = if r.gen::<bool>() {
        PoolKind::Avg
    } else {
        PoolKind::Max
    };
    t.activation = if r.gen::<bool>() {
        Activation::Swish
    } else {
        Activation::Relu
    };
    t
}

fn param_vars(vars: &[Var]) -> ParamVars {
    let depth = (vars.len() - 2) / 2;
    ParamVars {
        convs: (0..depth).map(|l| (vars[2 * l], vars[2 * l + 1])).collect(),
        head: (vars[2 * depth], vars[2 * depth + 1]),
    }
}

/// Worst relative error of one op family over `INSTANCES` random cases.
pub fn check_op(name: &str) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..INSTANCES {
        let mut r = substream(7, name, &[i as u64]);
        let seed = i as u64;
        let err = match name {
            "conv2d" => {
                let (n, c, h, w) = (
                    r.gen_range(1..=2),
                    r.gen_range(1..=3),
                    r.gen_range(3..=5),
                    r.gen_range(3..=5),
                );
                let (f, k) = (r.gen_range(1..=3), [1, 3][r.gen_range(0..2)]);
                let stride = r.gen_range(1..=2);
                let pad = r.gen_range(0..=k / 2);
                let ins = [
                    normal(&mut r, &[n, c, h, w], 1.0),
                    normal(&mut r, &[f, c, k, k], 0.5),
                    normal(&mut r, &[f], 0.5),
                ];
                max_rel_error(&ins, |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                    project(t, y, seed)
                })
            }
            "dense" => {
                let (n, a, b) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=5));
                let ins = [
                    normal(&mut r, &[n, a], 1.0),
                    normal(&mut r, &[a, b], 0.5),
                    normal(&mut r, &[b], 0.5),
                ];
                max_rel_error(&ins, |t, v| {
                    let y = t.dense(v[0], v[1], v[2]).unwrap();
                    project(t, y, seed)
                })
            }
            "relu" | "swish" => {
                let kind = if name == "relu" {
                    Activation::Relu
                } else {
                    Activation::Swish
                };
                let ins = [{
                    let dims = [r.gen_range(1..=3), r.gen_range(1..=6)];
                    off_kink(&mut r, &dims)
                }];
                max_rel_error(&ins, |t, v| {
                    let y = t.activation(v[0], kind);
                    project(t, y, seed)
                })
            }
            "pool_max" | "pool_avg" => {
                let kind = if name == "pool_max" {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                let shape = [
                    r.gen_range(1..=2),
                    r.gen_range(1..=2),
                    2 * r.gen_range(1..=3),
                    2 * r.gen_range(1..=3),
                ];
                let ins = [distinct(&mut r, &shape)];
                max_rel_error(&ins, |t, v| {
                    let y = t.pool2x2(v[0], kind).unwrap();
                    project(t, y, seed)
                })
            }
            "reshape" => {
                let (a, b) = (r.gen_range(1..=4), r.gen_range(1..=4));
                let ins = [normal(&mut r, &[a, b, 2], 1.0)];
                max_rel_error(&ins, |t, v| {
                    let y = t.reshape(v[0], &[a * 2, b]).unwrap();
                    project(t, y, seed)
                })
            }
            "add" | "sub" | "mul" => {
                let shape = [r.gen_range(1..=3), r.gen_range(1..=4)];
                let ins = [normal(&mut r, &shape, 1.0), normal(&mut r, &shape, 1.0)];
                max_rel_error(&ins, |t, v| {
                    let y = match name {
                        "add" => t.add(v[0], v[1]),
                        "sub" => t.sub(v[0], v[1]),
                        _ => t.mul(v[0], v[1]),
                    }
                    .unwrap();
                    project(t, y, seed)
                })
            }
            "scale" => {
                let k = r.gen_range(-3.0..3.0);
                let ins = [{
                    let dims = [r.gen_range(1..=3), 3];
                    normal(&mut r, &dims, 1.0)
                }];
                max_rel_error(&ins, |t, v| {
                    let y = t.scale(v[0], k);
                    project(t, y, seed)
                })
            }
            "sum" => {
                let ins = [{
                    let dims = [r.gen_range(1..=3), r.gen_range(1..=5)];
                    normal(&mut r, &dims, 1.0)
                }];
                max_rel_error(&ins, |t, v| {
                    let y = t.sum(v[0]);
                    t.scale(y, 1.7)
                })
            }
            "sum_squares" => {
                let ins = [{
                    let dims = [r.gen_range(1..=3), r.gen_range(1..=5)];
                    normal(&mut r, &dims, 1.0)
                }];
                max_rel_error(&ins, |t, v| t.sum_squares(v[0]))
            }
            "concat" => {
                let axis = r.gen_range(0..3);
                let base = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3)];
                let parts = r.gen_range(1..=3);
                let ins: Vec<Tensor> = (0..parts)
                    .map(|_| {
                        let mut s = base;
                        s[axis] = r.gen_range(1..=3);
                        normal(&mut r, &s, 1.0)
                    })
                    .collect();
                max_rel_error(&ins, |t, v| {
                    let y = t.concat(v, axis).unwrap();
                    project(t, y, seed)
                })
            }
            "slice_rows" => {
                let rows = r.gen_range(2..=6);
                let start = r.gen_range(0..rows - 1);
                let end = r.gen_range(start + 1..=rows);
                let ins = [normal(&mut r, &[rows, 3], 1.0)];
                max_rel_error(&ins, |t, v| {
                    let y = t.slice_rows(v[0], start, end).unwrap();
                    project(t, y, seed)
                })
            }
            "softmax_cross_entropy" => {
                let (n, c) = (r.gen_range(1..=5), r.gen_range(2..=6));
                let y = labels(&mut r, n, c);
                let ins = [normal(&mut r, &[n, c], 2.0)];
                max_rel_error(&ins, |t, v| t.softmax_cross_entropy(v[0], &y).unwrap())
            }
            "jsd_from_logits" => {
                let (views, n, c) = (r.gen_range(1..=4), r.gen_range(1..=3), r.gen_range(2..=6));
                let ins = [normal(&mut r, &[views * n, c], 2.0)];
                max_rel_error(&ins, |t, v| t.jsd_from_logits(v[0], views).unwrap())
            }
            "cnn_loss" | "cnn_aug_loss" => {
                let topo = small_topology(&mut r);
                let net = Network::build(topo.clone(), seed).unwrap();
                // Zero-initialized biases behind a dead channel sit exactly on
                // a ReLU kink, so draw them away from zero.
                let ins: Vec<Tensor> = net
                    .parameters()
                    .into_iter()
                    .map(|p| {
                        if p.shape().len() == 1 {
                            normal(&mut r, p.shape(), 0.3)
                        } else {
                            p.clone()
                        }
                    })
                    .collect();
                let views = if name == "cnn_loss" {
                    1
                } else {
                    r.gen_range(2..=3)
                };
                let n = r.gen_range(1..=3);
                let y = labels(&mut r, n, 3);
                let x = normal(&mut r, &[views * n, 2, 4, 4], 1.0);
                let lambda = r.gen_range(0.5..12.0);
                max_rel_error(&ins, |t, v| {
                    let params = param_vars(v);
                    let xv = t.leaf(&x);
                    let logits = topo.forward(t, &params, xv).unwrap();
                    aug_loss(t, logits, &y, views, lambda).unwrap()
                })
            }
            other => panic!("unknown op {other}"),
        };
        worst = worst.max(err);
    }
    worst
}

pub const OPS: [&str; 19] = [
    "conv2d",
    "dense",
    "relu",
    "swish",
    "pool_max",
    "pool_avg",
    "reshape",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "sum_squares",
    "concat",
    "slice_rows",
    "softmax_cross_entropy",
    "jsd_from_logits",
    "cnn_loss",
    "cnn_aug_loss",
];
