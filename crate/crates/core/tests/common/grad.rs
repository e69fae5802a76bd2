//! Random instances for every registered kernel and finite-difference checks
//! of their vector-Jacobian products.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use wdfq::head::{self, GroundTruth, LossWeights};
use wdfq::hfsr;
use wdfq::ops::{self, Band, Conv2dSpec, FocalSpec, Op};
use wdfq::tape::Tape;
use wdfq::Tensor;

use super::{numeric_gradient, rng, uniform, worst_rel_error};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 50;
/// Smallest distance from a kink that an instance may have.
pub const KINK_MARGIN: f64 = 1e-3;

fn dims(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Extents with a random rank drawn from `ranks`.
fn dims_in(
    rng: &mut ChaCha8Rng,
    ranks: std::ops::RangeInclusive<usize>,
    lo: usize,
    hi: usize,
) -> Vec<usize> {
    let rank = rng.random_range(ranks);
    dims(rng, rank, lo, hi)
}

fn normal_dims(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Tensor {
    let s = dims(rng, rank, lo, hi);
    normal(rng, &s)
}

fn normal_dims_in(
    rng: &mut ChaCha8Rng,
    ranks: std::ops::RangeInclusive<usize>,
    lo: usize,
    hi: usize,
) -> Tensor {
    let s = dims_in(rng, ranks, lo, hi);
    normal(rng, &s)
}

/// `spec` is `[rank, lo, hi]`; values are uniform in `[a, b)`.
fn uniform_dims(rng: &mut ChaCha8Rng, spec: &[usize; 3], a: f64, b: f64) -> Tensor {
    let s = dims(rng, spec[0], spec[1], spec[2]);
    uniform(rng, &s, a, b)
}

fn away_dims(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Tensor {
    let s = dims(rng, rank, lo, hi);
    away_from_zero(rng, &s)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.5, 1.5)
}

/// Tensor whose entries are at least `KINK_MARGIN` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.01..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `b` shaped to broadcast against `a`: some axes collapsed, maybe fewer axes.
fn broadcast_partner(rng: &mut ChaCha8Rng, a: &[usize]) -> Vec<usize> {
    let mut b: Vec<usize> = a
        .iter()
        .map(|&d| if rng.random_bool(0.3) { 1 } else { d })
        .collect();
    if b.len() > 1 && rng.random_bool(0.3) {
        b.remove(0);
    }
    b
}

fn binary_shapes(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let rank = rng.random_range(1..=3);
    let a = dims(rng, rank, 1, 3);
    let b = broadcast_partner(rng, &a);
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

/// A kernel and inputs at which it is differentiable with margin.
pub fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Op, Vec<Tensor>) {
    match name {
        "add" | "sub" | "mul" => {
            let (a, b) = binary_shapes(rng);
            (
                Op::by_name(name).unwrap(),
                vec![normal(rng, &a), normal(rng, &b)],
            )
        }
        "div" => {
            let (a, b) = binary_shapes(rng);
            let den = Tensor::from_fn(&b, |_| {
                let m = rng.random_range(0.5..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            (Op::Div, vec![normal(rng, &a), den])
        }
        "maximum" | "minimum" => loop {
            let (a, b) = binary_shapes(rng);
            let (x, y) = (normal(rng, &a), normal(rng, &b));
            let gap = ops::forward(&Op::Sub, &[&x, &y]).unwrap();
            if gap.data().iter().all(|v| v.abs() >= KINK_MARGIN) {
                break (Op::by_name(name).unwrap(), vec![x, y]);
            }
        },
        "scale" => (
            Op::Scale(rng.random_range(-2.0..2.0)),
            vec![normal_dims(rng, 2, 1, 4)],
        ),
        "add_scalar" => (
            Op::AddScalar(rng.random_range(-2.0..2.0)),
            vec![normal_dims(rng, 2, 1, 4)],
        ),
        "abs" | "relu" => (Op::by_name(name).unwrap(), vec![away_dims(rng, 3, 1, 3)]),
        "sigmoid" => (Op::Sigmoid, vec![uniform_dims(rng, &[2, 1, 4], -4.0, 4.0)]),
        "sqrt" | "ln" => (
            Op::by_name(name).unwrap(),
            vec![uniform_dims(rng, &[2, 1, 4], 0.1, 3.0)],
        ),
        "logit" => {
            let bound = rng.random_range(1.0..8.0);
            let shape = dims(rng, 2, 1, 4);
            let x = Tensor::from_fn(&shape, |_| loop {
                let p: f64 = rng.random_range(0.02..0.98);
                let l = (p / (1.0 - p)).ln();
                if (l.abs() - bound).abs() > 0.05 {
                    break p;
                }
            });
            (Op::Logit { bound }, vec![x])
        }
        "softmax" => {
            let rank = rng.random_range(1..=3);
            let axis = rng.random_range(0..rank);
            (
                Op::Softmax { axis },
                vec![uniform_dims(rng, &[rank, 1, 4], -3.0, 3.0)],
            )
        }
        "layer_norm" => {
            let rank = rng.random_range(1..=3);
            let mut shape = dims(rng, rank, 1, 3);
            *shape.last_mut().unwrap() = rng.random_range(2..=6);
            (Op::LayerNorm { eps: 1e-5 }, vec![normal(rng, &shape)])
        }
        "matmul" => {
            let (m, k, p) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let batch = dims_in(rng, 0..=2, 1, 3);
            let other: Vec<usize> = match rng.random_range(0..3) {
                0 => vec![],
                1 => batch.clone(),
                _ => batch
                    .iter()
                    .map(|&d| if rng.random_bool(0.5) { 1 } else { d })
                    .collect(),
            };
            let mut a = batch;
            a.extend([m, k]);
            let mut b = other;
            b.extend([k, p]);
            if rng.random_bool(0.5) {
                (Op::Matmul, vec![normal(rng, &a), normal(rng, &b)])
            } else {
                // Swap which operand carries the batch axes.
                let (a2, b2) = (b[..b.len() - 2].to_vec(), a[..a.len() - 2].to_vec());
                let mut a3 = a2;
                a3.extend([m, k]);
                let mut b3 = b2;
                b3.extend([k, p]);
                (Op::Matmul, vec![normal(rng, &a3), normal(rng, &b3)])
            }
        }
        "reshape" => {
            let shape = dims_in(rng, 1..=4, 1, 3);
            let mut flat: Vec<usize> = shape.iter().flat_map(|&d| factor(d)).collect();
            flat.shuffle(rng);
            let mut target = Vec::new();
            for f in flat {
                if target.len() < 4 && (target.is_empty() || rng.random_bool(0.5)) {
                    target.push(f);
                } else {
                    *target.last_mut().unwrap() *= f;
                }
            }
            if target.is_empty() {
                target.push(1);
            }
            (Op::Reshape(target), vec![normal(rng, &shape)])
        }
        "permute" => {
            let rank = rng.random_range(2..=4);
            let mut perm: Vec<usize> = (0..rank).collect();
            perm.shuffle(rng);
            (Op::Permute(perm), vec![normal_dims(rng, rank, 1, 3)])
        }
        "concat" => {
            let rank = rng.random_range(1..=3);
            let axis = rng.random_range(0..rank);
            let base = dims(rng, rank, 1, 3);
            let parts = rng.random_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.random_range(1..=3);
                    normal(rng, &s)
                })
                .collect();
            (Op::Concat { axis }, inputs)
        }
        "slice" => {
            let shape = dims_in(rng, 1..=4, 1, 4);
            let axis = rng.random_range(0..shape.len());
            let start = rng.random_range(0..shape[axis]);
            let end = rng.random_range(start + 1..=shape[axis]);
            (Op::Slice { axis, start, end }, vec![normal(rng, &shape)])
        }
        "index_select" => {
            let shape = dims_in(rng, 1..=3, 1, 4);
            let axis = rng.random_range(0..shape.len());
            let count = rng.random_range(1..=5);
            let indices = (0..count)
                .map(|_| rng.random_range(0..shape[axis]))
                .collect();
            (Op::IndexSelect { axis, indices }, vec![normal(rng, &shape)])
        }
        "sum" => (Op::SumAll, vec![normal_dims_in(rng, 1..=4, 1, 3)]),
        "sum_axis" => {
            let shape = dims_in(rng, 1..=4, 1, 3);
            (
                Op::SumAxis {
                    axis: rng.random_range(0..shape.len()),
                },
                vec![normal(rng, &shape)],
            )
        }
        "mean_pool" => (Op::MeanPool, vec![normal_dims(rng, 4, 1, 3)]),
        "conv2d" => loop {
            let groups = rng.random_range(1..=2);
            let spec = Conv2dSpec {
                stride: rng.random_range(1..=2),
                dilation: rng.random_range(1..=2),
                groups,
                pad_h: rng.random_range(0..=2),
                pad_w: rng.random_range(0..=2),
            };
            let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let cin = groups * rng.random_range(1..=2);
            let cout = groups * rng.random_range(1..=2);
            let fits = ops::conv2d_out_extent(h, kh, spec.stride, spec.dilation, spec.pad_h)
                .is_some()
                && ops::conv2d_out_extent(w, kw, spec.stride, spec.dilation, spec.pad_w).is_some();
            if fits {
                let n = rng.random_range(1..=2);
                let x = normal(rng, &[n, cin, h, w]);
                let k = normal(rng, &[cout, cin / groups, kh, kw]);
                break (Op::Conv2d(spec), vec![x, k]);
            }
        },
        "pad_replicate" => (
            Op::PadReplicate {
                pad: rng.random_range(1..=2),
            },
            vec![normal_dims(rng, 4, 1, 3)],
        ),
        "upsample" => (Op::UpsampleNearest2x, vec![normal_dims(rng, 4, 1, 3)]),
        "haar_band" => {
            let band = *Band::ALL.choose(rng).unwrap();
            let shape = [
                rng.random_range(1..=2),
                rng.random_range(1..=2),
                2 * rng.random_range(1..=3),
                2 * rng.random_range(1..=3),
            ];
            (Op::HaarBand(band), vec![normal(rng, &shape)])
        }
        "bilinear_sample" => {
            let (n, c, h, w) = (
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let p = rng.random_range(1..=4);
            // Keep each continuous index away from integers, where the stencil switches.
            let pts = Tensor::from_fn(&[n, p, 2], |i| {
                let extent = if i % 2 == 0 { w } else { h } as f64;
                loop {
                    let v: f64 = rng.random_range(-0.2..1.2);
                    let u = v * extent - 0.5;
                    if (u - u.round()).abs() > KINK_MARGIN {
                        break v;
                    }
                }
            });
            (Op::BilinearSample, vec![normal(rng, &[n, c, h, w]), pts])
        }
        "orientation_energy" => {
            let shape = dims(rng, 4, 1, 3);
            (
                Op::OrientationEnergy { eps: 1e-6 },
                vec![normal(rng, &shape), normal(rng, &shape)],
            )
        }
        "sigmoid_focal" => {
            let shape = dims(rng, 3, 1, 3);
            let targets = Tensor::from_fn(&shape, |_| {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            });
            let spec = FocalSpec {
                targets,
                alpha: rng.random_range(0.1..0.9),
                gamma: [0.0, 1.0, 1.5, 2.0][rng.random_range(0..4)],
            };
            (
                Op::SigmoidFocal(spec),
                vec![uniform(rng, &shape, -4.0, 4.0)],
            )
        }
        other => panic!("no instance generator for `{other}`"),
    }
}

fn factor(mut d: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while d > 1 {
        while d.is_multiple_of(p) {
            out.push(p);
            d /= p;
        }
        p += 1;
    }
    out
}

/// Checks `count` instances of one kernel; returns the worst relative error.
pub fn check_op(name: &str, count: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (op, inputs) = instance(name, &mut r);
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let out = ops::forward(&op, &refs).unwrap();
        let cot = normal(&mut r, out.shape());
        let analytic = ops::vjp(&op, &refs, &cot).unwrap();
        let f = |xs: &[Tensor]| {
            let refs: Vec<&Tensor> = xs.iter().collect();
            ops::forward(&op, &refs).unwrap().dot(&cot)
        };
        let numeric = numeric_gradient(&f, &inputs, STEP);
        worst = worst.max(worst_rel_error(&analytic, &numeric));
    }
    worst
}

/// Gradient of the multi-scale consistency loss with respect to all three maps.
pub fn check_grad_consistency(count: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let shape = [
            1,
            r.random_range(1..=2),
            r.random_range(3..=6),
            r.random_range(3..=6),
        ];
        let inputs = loop {
            let f = uniform(&mut r, &shape, -2.0, 2.0);
            let a = uniform(&mut r, &shape, -0.3, 0.3);
            let b = uniform(&mut r, &shape, -0.3, 0.3);
            let clear = (1..=3).all(|k| {
                [&a, &b].iter().all(|src| {
                    let g = hfsr::grad_bank_reference(src, k);
                    f.data()
                        .iter()
                        .zip(g.data())
                        .all(|(x, y)| (x - y).abs() >= KINK_MARGIN)
                })
            });
            if clear {
                break vec![f, a, b];
            }
        };
        let eval = |xs: &[Tensor], grads: bool| {
            let mut t = Tape::new();
            let v: Vec<_> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let l = hfsr::grad_consistency_loss(&mut t, v[0], v[1], v[2]).unwrap();
            let value = t.value(l).item();
            let g = grads.then(|| {
                let gr = t.backward(l).unwrap();
                v.iter().map(|&x| gr.wrt(&t, x)).collect::<Vec<_>>()
            });
            (value, g)
        };
        let analytic = eval(&inputs, true).1.unwrap();
        let numeric = numeric_gradient(&|xs| eval(xs, false).0, &inputs, STEP);
        worst = worst.max(worst_rel_error(&analytic, &numeric));
    }
    worst
}

fn corners(b: &[f64]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// True when every edge of every anchor is clear of every ground-truth edge on
/// the same axis, and no L1 residual is near zero.
fn boxes_clear(anchors: &Tensor, gts: &[GroundTruth]) -> bool {
    anchors.data().chunks(4).all(|a| {
        let pa = corners(a);
        gts.iter().all(|g| {
            let pg = corners(&g.bbox());
            let edges_x = [pa[0], pa[2]]
                .iter()
                .all(|p| [pg[0], pg[2]].iter().all(|q| (p - q).abs() >= KINK_MARGIN));
            let edges_y = [pa[1], pa[3]]
                .iter()
                .all(|p| [pg[1], pg[3]].iter().all(|q| (p - q).abs() >= KINK_MARGIN));
            let l1 = a
                .iter()
                .zip(g.bbox())
                .all(|(p, q)| (p - q).abs() >= KINK_MARGIN);
            edges_x && edges_y && l1
        })
    })
}

/// Gradient of `L_box + L_cls` with respect to logits and anchors, on instances
/// whose optimal matching is unique by a clear margin.
pub fn check_detection_loss(count: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let lw = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (k, c) = (r.random_range(2..=5), r.random_range(1..=3));
        let g = r.random_range(0..=k.min(3));
        let (logits, anchors, gts) = loop {
            let gts: Vec<GroundTruth> = (0..g)
                .map(|_| GroundTruth {
                    cls: r.random_range(0..c),
                    cx: r.random_range(0.2..0.8),
                    cy: r.random_range(0.2..0.8),
                    w: r.random_range(0.1..0.4),
                    h: r.random_range(0.1..0.4),
                })
                .collect();
            let logits = uniform(&mut r, &[1, k, c], -3.0, 3.0);
            let anchors = Tensor::from_fn(&[1, k, 4], |i| {
                if i % 4 < 2 {
                    r.random_range(0.2..0.8)
                } else {
                    r.random_range(0.1..0.4)
                }
            });
            if !boxes_clear(&anchors, &gts) {
                continue;
            }
            let cost = head::matching_cost(logits.data(), anchors.data(), c, &gts, &lw);
            let mut totals: Vec<f64> = super::injections(k, g)
                .iter()
                .map(|a| super::assignment_cost(&cost, a))
                .collect();
            totals.sort_by(f64::total_cmp);
            if totals.len() < 2 || totals[1] - totals[0] > 1e-3 {
                break (logits, anchors, gts);
            }
        };
        let eval = |xs: &[Tensor], grads: bool| {
            let mut t = Tape::new();
            let (l, a) = (t.leaf(xs[0].clone()), t.leaf(xs[1].clone()));
            let d = head::detection_loss(&mut t, l, a, &gts, &lw).unwrap();
            let total = t.add(d.boxes, d.cls).unwrap();
            let value = t.value(total).item();
            let g = grads.then(|| {
                let gr = t.backward(total).unwrap();
                vec![gr.wrt(&t, l), gr.wrt(&t, a)]
            });
            (value, g)
        };
        let inputs = vec![logits, anchors];
        let analytic = eval(&inputs, true).1.unwrap();
        let numeric = numeric_gradient(&|xs| eval(xs, false).0, &inputs, STEP);
        worst = worst.max(worst_rel_error(&analytic, &numeric));
    }
    worst
}
