use super::elementwise::{broadcast_shape, broadcast_strides};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    batch: Vec<usize>,
    /// For every output batch entry, the batch offsets into `a` and `b`.
    pairs: Vec<(usize, usize)>,
}

fn plan(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::dim("matmul", "rank", "operands need rank >= 2"));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, p) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            "inner",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ba, bb) = (&a.shape()[..ra - 2], &b.shape()[..rb - 2]);
    let batch = if ba.is_empty() && bb.is_empty() {
        vec![]
    } else {
        broadcast_shape(
            if ba.is_empty() { &[1] } else { ba },
            if bb.is_empty() { &[1] } else { bb },
        )?
    };
    if batch.len() + 2 > crate::tensor::MAX_RANK {
        return Err(Error::shape("matmul", "output rank exceeds 4"));
    }
    let nb: usize = batch.iter().product();
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(nb);
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..nb {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((oa, ob));
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(MatmulPlan {
        m,
        k,
        p,
        batch,
        pairs,
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let pl = plan(a, b)?;
    let (m, k, p) = (pl.m, pl.k, pl.p);
    let mut out = vec![0.0; pl.pairs.len() * m * p];
    let (ad, bd) = (a.data(), b.data());
    for (bi, &(oa, ob)) in pl.pairs.iter().enumerate() {
        let am = &ad[oa * m * k..(oa + 1) * m * k];
        let bm = &bd[ob * k * p..(ob + 1) * k * p];
        let om = &mut out[bi * m * p..(bi + 1) * m * p];
        for i in 0..m {
            let row = &mut om[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = am[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &bm[kk * p..(kk + 1) * p];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = pl.batch;
    shape.extend([m, p]);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let pl = plan(a, b)?;
    let (m, k, p) = (pl.m, pl.k, pl.p);
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for (bi, &(oa, ob)) in pl.pairs.iter().enumerate() {
        let gm = &gd[bi * m * p..(bi + 1) * m * p];
        let am = &ad[oa * m * k..(oa + 1) * m * k];
        let bm = &bd[ob * k * p..(ob + 1) * k * p];
        // dA = G · Bᵀ
        let dam = &mut da[oa * m * k..(oa + 1) * m * k];
        for i in 0..m {
            let grow = &gm[i * p..(i + 1) * p];
            for kk in 0..k {
                let brow = &bm[kk * p..(kk + 1) * p];
                dam[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        // dB = Aᵀ · G
        let dbm = &mut db[ob * k * p..(ob + 1) * k * p];
        for i in 0..m {
            let grow = &gm[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = am[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                for (o, &gv) in dbm[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    ))
}

/// `(outer, extent, inner)` of a tensor split around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("softmax", axis, format!("rank is {}", x.rank())));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..n {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Normalizes over the last axis to zero mean and unit variance (no affine).
pub(crate) fn layer_norm(x: &Tensor, eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn layer_norm_vjp(x: &Tensor, y: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.numel()];
    for ((xr, yr), (gr, or)) in x
        .data()
        .chunks_exact(c)
        .zip(y.data().chunks_exact(c))
        .zip(g.data().chunks_exact(c).zip(out.chunks_exact_mut(c)))
    {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let gmean = gr.iter().sum::<f64>() / c as f64;
        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            or[j] = inv * (gr[j] - gmean - yr[j] * gy);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
