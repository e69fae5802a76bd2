//! Low-frequency homogeneity alignment: channel swap, efficient channel
//! attention, then IR-query / RGB-key-value cross-modal attention.

use crate::error::{Error, Result};
use crate::layers::{declare_linear, from_tokens, linear, to_tokens};
use crate::ops::Conv2dSpec;
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};

pub const ECA_KERNEL: usize = 3;

/// Exchanges the first half of the channels between two maps.
pub fn channel_swap(tape: &mut Tape, a: Var, b: Var) -> Result<(Var, Var)> {
    let [_, c, _, _] = tape.value(a).dims4("channel_swap")?;
    if tape.value(b).shape() != tape.value(a).shape() {
        return Err(Error::dim(
            "channel_swap",
            "shape",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    if c % 2 != 0 {
        return Err(Error::Config(format!(
            "channel swap needs an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    let a_lo = tape.slice(a, 1, 0, half)?;
    let a_hi = tape.slice(a, 1, half, c)?;
    let b_lo = tape.slice(b, 1, 0, half)?;
    let b_hi = tape.slice(b, 1, half, c)?;
    let a2 = tape.concat(&[b_lo, a_hi], 1)?;
    let b2 = tape.concat(&[a_lo, b_hi], 1)?;
    Ok((a2, b2))
}

/// Efficient channel attention with a zero-padded 1-D kernel across channels.
pub fn eca(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    let [n, c, _, _] = tape.value(x).dims4("eca")?;
    let k = tape.value(kernel).numel();
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "ECA kernel size must be odd, got {k}"
        )));
    }
    let pooled = tape.mean_pool(x)?;
    let row = tape.reshape(pooled, &[n, 1, 1, c])?;
    let kern = tape.reshape(kernel, &[1, 1, 1, k])?;
    let spec = Conv2dSpec {
        pad_w: k / 2,
        ..Conv2dSpec::default()
    };
    let mixed = tape.conv2d(row, kern, spec)?;
    let gate = tape.sigmoid(mixed)?;
    let gate = tape.reshape(gate, &[n, c, 1, 1])?;
    tape.mul(x, gate)
}

pub fn declare_align(
    store: &mut ParamStore,
    name: &str,
    channels: usize,
    attn_dim: usize,
) -> Result<()> {
    declare_linear(store, &format!("{name}.f"), channels, attn_dim, false)?;
    declare_linear(store, &format!("{name}.g"), channels, attn_dim, false)?;
    declare_linear(store, &format!("{name}.h"), channels, attn_dim, false)?;
    declare_linear(store, &format!("{name}.out"), attn_dim, channels, true)
}

pub struct Aligned {
    pub out: Var,
    /// `[N, T_ir, T_rgb]`, rows sum to one.
    pub weights: Var,
}

/// `softmax(f(ir) g(rgb)ᵀ / sqrt(D)) h(rgb)`, projected back to the input width.
pub fn cross_modal_align(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    low_ir: Var,
    low_rgb: Var,
) -> Result<Aligned> {
    let [_, _, h, w] = tape.value(low_ir).dims4("cross_modal_align")?;
    let [_, _, hr, wr] = tape.value(low_rgb).dims4("cross_modal_align")?;
    if h * w != hr * wr {
        return Err(Error::dim(
            "cross_modal_align",
            "tokens",
            format!("IR has {} tokens, RGB has {}", h * w, hr * wr),
        ));
    }
    let ti = to_tokens(tape, low_ir)?;
    let tr = to_tokens(tape, low_rgb)?;
    let q = linear(tape, store, &format!("{name}.f"), ti)?;
    let k = linear(tape, store, &format!("{name}.g"), tr)?;
    let v = linear(tape, store, &format!("{name}.h"), tr)?;
    let d = *tape.value(q).shape().last().unwrap();
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let mixed = tape.matmul(weights, v)?;
    let proj = linear(tape, store, &format!("{name}.out"), mixed)?;
    let out = from_tokens(tape, proj, h, w)?;
    Ok(Aligned { out, weights })
}

pub fn declare(store: &mut ParamStore, name: &str, channels: usize, attn_dim: usize) -> Result<()> {
    store.init(
        &format!("{name}.eca_ir"),
        &[ECA_KERNEL],
        Init::FanScaledUniform,
    )?;
    store.init(
        &format!("{name}.eca_rgb"),
        &[ECA_KERNEL],
        Init::FanScaledUniform,
    )?;
    declare_align(store, &format!("{name}.align"), channels, attn_dim)
}

/// Full alignment block for one level.
pub fn run(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    low_ir: Var,
    low_rgb: Var,
) -> Result<Aligned> {
    let (ir, rgb) = channel_swap(tape, low_ir, low_rgb)?;
    let k_ir = tape.param(store, &format!("{name}.eca_ir"))?;
    let k_rgb = tape.param(store, &format!("{name}.eca_rgb"))?;
    let ir = eca(tape, ir, k_ir)?;
    let rgb = eca(tape, rgb, k_rgb)?;
    cross_modal_align(tape, store, &format!("{name}.align"), ir, rgb)
}
