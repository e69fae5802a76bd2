use super::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes aligned from the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    "broadcast",
                    i,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn apply(op: &Op, a: f64, b: f64) -> f64 {
    match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div => a / b,
        Op::Maximum => {
            if b > a {
                b
            } else {
                a
            }
        }
        Op::Minimum => {
            if b < a {
                b
            } else {
                a
            }
        }
        _ => unreachable!("not a binary op"),
    }
}

pub(crate) fn binary_forward(op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply(op, x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    if out.len() > crate::tensor::MAX_RANK {
        return Err(Error::shape("broadcast", "rank exceeds 4"));
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        data[o] = apply(op, ad[ia], bd[ib])
    });
    Ok(Tensor::from_parts(out, data))
}

pub(crate) fn binary_vjp(op: &Op, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let out = g.shape().to_vec();
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        let (x, y, gv) = (ad[ia], bd[ib], gd[o]);
        let (ga, gb) = match op {
            Op::Add => (gv, gv),
            Op::Sub => (gv, -gv),
            Op::Mul => (gv * y, gv * x),
            Op::Div => (gv / y, -gv * x / (y * y)),
            // Ties route the gradient to the first operand.
            Op::Maximum => {
                if y > x {
                    (0.0, gv)
                } else {
                    (gv, 0.0)
                }
            }
            Op::Minimum => {
                if y < x {
                    (0.0, gv)
                } else {
                    (gv, 0.0)
                }
            }
            _ => unreachable!("not a binary op"),
        };
        da[ia] += ga;
        db[ib] += gb;
    });
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit_raw(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

pub(crate) fn unary_forward(op: &Op, x: &Tensor) -> Tensor {
    match op {
        Op::Scale(c) => x.map(|v| v * c),
        Op::AddScalar(c) => x.map(|v| v + c),
        Op::Abs => x.map(f64::abs),
        Op::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Sigmoid => x.map(sigmoid),
        Op::Sqrt => x.map(f64::sqrt),
        Op::Ln => x.map(f64::ln),
        Op::Logit { bound } => x.map(|v| logit_raw(v).clamp(-bound, *bound)),
        _ => unreachable!("not a unary op"),
    }
}

pub(crate) fn unary_vjp(op: &Op, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let d: Vec<f64> = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xv, &yv), &gv)| match op {
            Op::Scale(c) => gv * c,
            Op::AddScalar(_) => gv,
            Op::Abs => {
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }
            Op::Relu => {
                if xv > 0.0 {
                    gv
                } else {
                    0.0
                }
            }
            Op::Sigmoid => gv * yv * (1.0 - yv),
            // sqrt has no finite slope at 0; the subgradient 0 is used there.
            Op::Sqrt => {
                if yv > 0.0 {
                    gv / (2.0 * yv)
                } else {
                    0.0
                }
            }
            Op::Ln => gv / xv,
            Op::Logit { bound } => {
                let raw = logit_raw(xv);
                if raw.abs() < *bound {
                    gv / (xv * (1.0 - xv))
                } else {
                    0.0
                }
            }
            _ => unreachable!("not a unary op"),
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), d)
}
