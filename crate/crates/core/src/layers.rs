//! Parameterized building blocks shared by the pipeline modules.
//!
//! Parameters are looked up by name: a linear map `p` reads `p.w` (`[in, out]`)
//! and, when registered, `p.b` (`[out]`); a convolution `p` reads `p.w`
//! (`[out, in/groups, kh, kw]`) and optionally `p.b` (`[1, out, 1, 1]`).

use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn declare_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    store.init(
        &format!("{name}.w"),
        &[fan_in, fan_out],
        Init::FanScaledUniform,
    )?;
    if bias {
        store.init(&format!("{name}.b"), &[fan_out], Init::Zeros)?;
    }
    Ok(())
}

pub fn declare_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin_per_group: usize,
    kernel: usize,
    bias: bool,
) -> Result<()> {
    store.init(
        &format!("{name}.w"),
        &[cout, cin_per_group, kernel, kernel],
        Init::FanScaledUniform,
    )?;
    if bias {
        store.init(&format!("{name}.b"), &[1, cout, 1, 1], Init::Zeros)?;
    }
    Ok(())
}

pub fn declare_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.init(&format!("{name}.gamma"), &[dim], Init::Ones)?;
    store.init(&format!("{name}.beta"), &[dim], Init::Zeros)
}

/// `x · W (+ b)` over the last axis.
pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{name}.b");
    if store.contains(&bias) {
        let b = tape.param(store, &bias)?;
        tape.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn conv(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    x: Var,
    spec: Conv2dSpec,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let y = tape.conv2d(x, w, spec)?;
    let bias = format!("{name}.b");
    if store.contains(&bias) {
        let b = tape.param(store, &bias)?;
        tape.add(y, b)
    } else {
        Ok(y)
    }
}

/// Layer normalization over the last axis followed by a learned affine map.
pub fn norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let g = tape.param(store, &format!("{name}.gamma"))?;
    let b = tape.param(store, &format!("{name}.beta"))?;
    let y = tape.mul(y, g)?;
    tape.add(y, b)
}

/// `[N, C, H, W] -> [N, H*W, C]`.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4("to_tokens")?;
    let flat = tape.reshape(x, &[n, c, h * w])?;
    tape.permute(flat, &[0, 2, 1])
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c) = match tape.value(t).shape() {
        &[n, tokens, c] if tokens == h * w => (n, c),
        s => {
            return Err(Error::dim(
                "from_tokens",
                "tokens",
                format!("{s:?} cannot form a {h}x{w} grid"),
            ))
        }
    };
    let chw = tape.permute(t, &[0, 2, 1])?;
    tape.reshape(chw, &[n, c, h, w])
}

/// `[N, T, D] -> [N, M, T, D/M]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let &[n, t, d] = tape.value(x).shape() else {
        return Err(Error::dim("attention", "rank", "expected [N, T, D]"));
    };
    let y = tape.reshape(x, &[n, t, heads, d / heads])?;
    tape.permute(y, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[n, m, t, dh] = tape.value(x).shape() else {
        return Err(Error::dim("attention", "rank", "expected [N, M, T, dh]"));
    };
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(y, &[n, t, m * dh])
}

pub fn declare_attention(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        declare_linear(store, &format!("{name}.{p}"), dim, dim, true)?;
    }
    Ok(())
}

/// Output of [`multi_head_attention`].
pub struct Attention {
    pub out: Var,
    /// Row-stochastic weights `[N, M, Tq, Tk]`.
    pub weights: Var,
}

/// Scaled dot-product attention with `heads` heads and learned q/k/v/o maps.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<Attention> {
    let d = *tape.value(query).shape().last().unwrap();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} attention heads"
        )));
    }
    let q = linear(tape, store, &format!("{name}.q"), query)?;
    let k = linear(tape, store, &format!("{name}.k"), key)?;
    let v = linear(tape, store, &format!("{name}.v"), value)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt())?;
    let weights = tape.softmax(scores, 3)?;
    let mixed = tape.matmul(weights, v)?;
    let merged = merge_heads(tape, mixed)?;
    let out = linear(tape, store, &format!("{name}.o"), merged)?;
    Ok(Attention { out, weights })
}
