//! High-frequency specificity retention: multi-scale convolution, dense HOG
//! residual enhancement, depthwise-separable fusion of the two modalities,
//! and the multi-scale gradient consistency loss.

use crate::error::{Error, Result};
use crate::layers::{conv, declare_conv};
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Dilation rate for each gradient scale `k = 1, 2, 3`.
pub const SCALE_DILATIONS: [usize; 3] = [1, 2, 3];

pub const HOG_EPS: f64 = 1e-6;

/// Per-channel copy of a 3x3 kernel, shaped for a depthwise convolution.
fn depthwise_kernel(taps: &[f64; 9], channels: usize) -> Tensor {
    Tensor::from_fn(&[channels, 1, 3, 3], |i| taps[i % 9])
}

/// Sobel responses `(gx, gy)` with replicate padding `dilation` and that
/// dilation rate, so constant regions (including borders) give exactly zero.
fn sobel(tape: &mut Tape, x: Var, dilation: usize) -> Result<(Var, Var)> {
    let [_, c, _, _] = tape.value(x).dims4("sobel")?;
    let padded = tape.pad_replicate(x, dilation)?;
    let kx = tape.leaf(depthwise_kernel(&SOBEL_X, c));
    let ky = tape.leaf(depthwise_kernel(&SOBEL_Y, c));
    let spec = Conv2dSpec::new(1, dilation, c, 0);
    Ok((
        tape.conv2d(padded, kx, spec)?,
        tape.conv2d(padded, ky, spec)?,
    ))
}

/// `G_k(x) = |sobel_x *_k x| + |sobel_y *_k x|` at dilation rate `k`.
pub fn grad_bank(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    if !(1..=3).contains(&k) {
        return Err(Error::Argument(format!(
            "gradient scale k must be 1, 2 or 3, got {k}"
        )));
    }
    let (gx, gy) = sobel(tape, x, SCALE_DILATIONS[k - 1])?;
    let ax = tape.abs(gx)?;
    let ay = tape.abs(gy)?;
    tape.add(ax, ay)
}

/// Evaluates `G_k` on a plain tensor.
pub fn grad_bank_tensor(x: &Tensor, k: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = grad_bank(&mut tape, v, k)?;
    Ok(tape.value(y).clone())
}

pub fn declare_multiscale(store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    for k in [1, 3, 5] {
        declare_conv(store, &format!("{name}.k{k}"), channels, channels, k, false)?;
    }
    Ok(())
}

/// Sum of 1x1, 3x3 and 5x5 shape-preserving branches.
pub fn multiscale_conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let mut acc = None;
    for k in [1usize, 3, 5] {
        let y = conv(
            tape,
            store,
            &format!("{name}.k{k}"),
            x,
            Conv2dSpec::same(k / 2),
        )?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(acc.expect("three branches"))
}

/// Dense HOG energy map: orientation-binned gradient energy, block-normalized
/// over each 3x3 neighbourhood. Same shape as the input.
pub fn hog_map(tape: &mut Tape, x: Var) -> Result<Var> {
    let [_, c, _, _] = tape.value(x).dims4("hog")?;
    let (gx, gy) = sobel(tape, x, 1)?;
    let energy = tape.orientation_energy(gx, gy, HOG_EPS)?;
    let sq = tape.mul(energy, energy)?;
    let boxk = tape.leaf(Tensor::ones(&[c, 1, 3, 3]));
    let local = tape.conv2d(sq, boxk, Conv2dSpec::new(1, 1, c, 1))?;
    let l2 = tape.sqrt(local)?;
    let denom = tape.add_scalar(l2, HOG_EPS)?;
    tape.div(energy, denom)
}

/// `HOG(x) + x`.
pub fn hog_enhance(tape: &mut Tape, x: Var) -> Result<Var> {
    let h = hog_map(tape, x)?;
    tape.add(h, x)
}

pub fn declare_fuse(store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    declare_conv(
        store,
        &format!("{name}.depthwise"),
        2 * channels,
        1,
        3,
        false,
    )?;
    declare_conv(
        store,
        &format!("{name}.pointwise"),
        channels,
        2 * channels,
        1,
        true,
    )
}

/// Concatenate, depthwise 3x3, then pointwise `2C -> C`.
pub fn fuse_specific(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    ir: Var,
    rgb: Var,
) -> Result<Var> {
    let [_, c, _, _] = tape.value(ir).dims4("fuse_specific")?;
    if tape.value(rgb).shape() != tape.value(ir).shape() {
        return Err(Error::dim(
            "fuse_specific",
            "shape",
            format!(
                "{:?} vs {:?}",
                tape.value(ir).shape(),
                tape.value(rgb).shape()
            ),
        ));
    }
    let cat = tape.concat(&[ir, rgb], 1)?;
    let dw = conv(
        tape,
        store,
        &format!("{name}.depthwise"),
        cat,
        Conv2dSpec::new(1, 1, 2 * c, 1),
    )?;
    conv(
        tape,
        store,
        &format!("{name}.pointwise"),
        dw,
        Conv2dSpec::default(),
    )
}

/// `(1/N) Σ_k ‖fused − G_k(ir)‖₁ + ‖fused − G_k(rgb)‖₁` with `N` the element count.
///
/// Gradients flow into all three arguments.
pub fn grad_consistency_loss(
    tape: &mut Tape,
    fused: Var,
    high_ir: Var,
    high_rgb: Var,
) -> Result<Var> {
    let shape = tape.value(fused).shape().to_vec();
    for v in [high_ir, high_rgb] {
        if tape.value(v).shape() != shape {
            return Err(Error::dim(
                "grad_consistency_loss",
                "shape",
                format!("{:?} vs {:?}", shape, tape.value(v).shape()),
            ));
        }
    }
    let n = tape.value(fused).numel() as f64;
    let mut terms = Vec::with_capacity(6);
    for k in 1..=3 {
        for src in [high_ir, high_rgb] {
            let g = grad_bank(tape, src, k)?;
            let d = tape.sub(fused, g)?;
            let a = tape.abs(d)?;
            terms.push(tape.sum(a)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / n)
}

/// Loss value and its gradient with respect to `fused` alone (sign(0) = 0).
pub fn grad_consistency_loss_tensor(
    fused: &Tensor,
    high_ir: &Tensor,
    high_rgb: &Tensor,
) -> Result<(f64, Tensor)> {
    if high_ir.shape() != fused.shape() || high_rgb.shape() != fused.shape() {
        return Err(Error::dim(
            "grad_consistency_loss",
            "shape",
            "inputs differ in shape",
        ));
    }
    let n = fused.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(fused.shape());
    for k in 1..=3 {
        for src in [high_ir, high_rgb] {
            let g = grad_bank_tensor(src, k)?;
            for ((gr, &f), &t) in grad.data_mut().iter_mut().zip(fused.data()).zip(g.data()) {
                let r = f - t;
                loss += r.abs();
                *gr += if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
    }
    Ok((loss / n, grad.map(|v| v / n)))
}

pub fn declare(store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    declare_multiscale(store, &format!("{name}.ms_ir"), channels)?;
    declare_multiscale(store, &format!("{name}.ms_rgb"), channels)?;
    declare_fuse(store, &format!("{name}.fuse"), channels)
}

pub struct Retained {
    pub fused: Var,
    pub loss: Var,
}

/// Full retention block for one level, including its gradient loss term.
pub fn run(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    high_ir: Var,
    high_rgb: Var,
) -> Result<Retained> {
    let ir = multiscale_conv(tape, store, &format!("{name}.ms_ir"), high_ir)?;
    let rgb = multiscale_conv(tape, store, &format!("{name}.ms_rgb"), high_rgb)?;
    let ir = hog_enhance(tape, ir)?;
    let rgb = hog_enhance(tape, rgb)?;
    let fused = fuse_specific(tape, store, &format!("{name}.fuse"), ir, rgb)?;
    let loss = grad_consistency_loss(tape, fused, high_ir, high_rgb)?;
    Ok(Retained { fused, loss })
}

/// Direct evaluation of `G_k` by explicit loops, for cross-checking.
pub fn grad_bank_reference(x: &Tensor, k: usize) -> Tensor {
    let [n, c, h, w] = x.dims4("grad_bank_reference").unwrap();
    let d = SCALE_DILATIONS[k - 1] as isize;
    let at = |ni, ci, y: isize, xx: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xc = xx.clamp(0, w as isize - 1) as usize;
        x.at4(ni, ci, yy, xc)
    };
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let v = at(ni, ci, y + (ky - 1) * d, xx + (kx - 1) * d);
                            gx += SOBEL_X[(ky * 3 + kx) as usize] * v;
                            gy += SOBEL_Y[(ky * 3 + kx) as usize] * v;
                        }
                    }
                    out.data_mut()[((ni * c + ci) * h + y as usize) * w + xx as usize] =
                        gx.abs() + gy.abs();
                }
            }
        }
    }
    out
}
