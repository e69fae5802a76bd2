use super::linalg::split_axis;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn inverse_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &a) in p.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::dim(
            "permute",
            "perm",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let src = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&a| x.shape()[a]).collect();
    let st: Vec<usize> = perm.iter().map(|&a| src[a]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.numel() {
        out.push(xd[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    if axis >= first.rank() {
        return Err(Error::dim("concat", axis, "axis out of range"));
    }
    for t in inputs {
        let same = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !same {
            return Err(Error::dim(
                "concat",
                axis,
                format!("cannot concat {:?} with {:?}", first.shape(), t.shape()),
            ));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn concat_vjp(inputs: &[&Tensor], g: &Tensor, axis: usize) -> Result<Vec<Tensor>> {
    let mut start = 0;
    let mut grads = Vec::with_capacity(inputs.len());
    for t in inputs {
        let len = t.shape()[axis];
        grads.push(slice(g, axis, start, start + len)?);
        start += len;
    }
    Ok(grads)
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= x.rank() || start >= end || end > x.shape()[axis] {
        return Err(Error::dim(
            "slice",
            axis,
            format!("range {start}..{end} invalid for shape {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice_vjp(x: &Tensor, g: &Tensor, axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        out[(o * n + start) * inner..(o * n + start + len) * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn index_select(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    if axis >= x.rank() || indices.is_empty() {
        return Err(Error::dim(
            "index_select",
            axis,
            "invalid axis or empty index list",
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if let Some(bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::dim(
            "index_select",
            axis,
            format!("index {bad} >= extent {n}"),
        ));
    }
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            out.extend_from_slice(&x.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn index_select_vjp(x: &Tensor, g: &Tensor, axis: usize, indices: &[usize]) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let k = indices.len();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let src = &g.data()[(o * k + j) * inner..][..inner];
            for (d, s) in out[(o * n + i) * inner..][..inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Sum over `axis`, keeping it with extent 1.
pub(crate) fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("sum_axis", axis, "axis out of range"));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &x.data()[(o * n + j) * inner..][..inner];
            for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn sum_axis_vjp(x: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for _ in 0..n {
            out.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
