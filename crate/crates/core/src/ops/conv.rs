use rayon::prelude::*;

use super::Band;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Padding is zero padding, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            dilation: 1,
            groups: 1,
            pad_h: 0,
            pad_w: 0,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, dilation: usize, groups: usize, pad: usize) -> Self {
        Conv2dSpec {
            stride,
            dilation,
            groups,
            pad_h: pad,
            pad_w: pad,
        }
    }

    /// Stride-1, shape-preserving for odd kernels of size `2 * pad + 1`.
    pub fn same(pad: usize) -> Self {
        Self::new(1, 1, 1, pad)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `floor((extent + 2 pad - dilation (k - 1) - 1) / stride) + 1`, if the kernel fits.
pub fn conv2d_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = extent + 2 * pad;
    (padded >= span && stride > 0).then(|| (padded - span) / stride + 1)
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn geometry(x: &Tensor, wt: &Tensor, s: &Conv2dSpec) -> Result<Geometry> {
    let [n, cin, h, w] = x.dims4("conv2d")?;
    let [cout, cin_g, kh, kw] = wt.dims4("conv2d")?;
    if s.groups == 0 || cin % s.groups != 0 {
        return Err(Error::dim(
            "conv2d",
            "channels",
            format!("input channels {cin} not divisible by groups {}", s.groups),
        ));
    }
    if cout % s.groups != 0 {
        return Err(Error::dim(
            "conv2d",
            "out_channels",
            format!(
                "output channels {cout} not divisible by groups {}",
                s.groups
            ),
        ));
    }
    if cin_g != cin / s.groups {
        return Err(Error::dim(
            "conv2d",
            "channels",
            format!(
                "kernel expects {cin_g} channels per group, input has {}",
                cin / s.groups
            ),
        ));
    }
    let ho = conv2d_out_extent(h, kh, s.stride, s.dilation, s.pad_h).ok_or_else(|| {
        Error::dim(
            "conv2d",
            "height",
            format!("kernel {kh} does not fit height {h}"),
        )
    })?;
    let wo = conv2d_out_extent(w, kw, s.stride, s.dilation, s.pad_w).ok_or_else(|| {
        Error::dim(
            "conv2d",
            "width",
            format!("kernel {kw} does not fit width {w}"),
        )
    })?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Input coordinate read by output `(oy, ox)` at tap `(ky, kx)`, if in bounds.
fn tap(g: &Geometry, s: &Conv2dSpec, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
    let iy = (oy * s.stride + ky * s.dilation).checked_sub(s.pad_h)?;
    let ix = (ox * s.stride + kx * s.dilation).checked_sub(s.pad_w)?;
    (iy < g.h && ix < g.w).then_some(iy * g.w + ix)
}

/// Patch matrix `[ho * wo, cin_g * kh * kw]` of sample `ni`, group `grp`.
fn im2col(xd: &[f64], g: &Geometry, s: &Conv2dSpec, ni: usize, grp: usize) -> Vec<f64> {
    let ksz = g.cin_g * g.kh * g.kw;
    let mut cols = vec![0.0; g.ho * g.wo * ksz];
    for cil in 0..g.cin_g {
        let xp = &xd[(ni * g.cin + grp * g.cin_g + cil) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let k = (cil * g.kh + ky) * g.kw + kx;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some(i) = tap(g, s, oy, ox, ky, kx) {
                            cols[(oy * g.wo + ox) * ksz + k] = xp[i];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Rows per rayon task so that each task does enough work to pay for itself.
fn min_rows(work_per_row: usize) -> usize {
    (1 << 15) / work_per_row.max(1) + 1
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub(crate) fn conv2d(x: &Tensor, wt: &Tensor, s: &Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x, wt, s)?;
    let cout_g = g.cout / s.groups;
    let ksz = g.cin_g * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let wd = wt.data();
    let mut out = vec![0.0; g.n * g.cout * plane];
    for ni in 0..g.n {
        for grp in 0..s.groups {
            let cols = im2col(x.data(), &g, s, ni, grp);
            let base = (ni * g.cout + grp * cout_g) * plane;
            out[base..base + cout_g * plane]
                .par_chunks_mut(plane)
                .with_min_len(min_rows(plane * ksz))
                .enumerate()
                .for_each(|(col, op)| {
                    let wrow = &wd[(grp * cout_g + col) * ksz..][..ksz];
                    for (p, o) in op.iter_mut().enumerate() {
                        *o = dot(wrow, &cols[p * ksz..][..ksz]);
                    }
                });
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

pub(crate) fn conv2d_vjp(
    x: &Tensor,
    wt: &Tensor,
    gout: &Tensor,
    s: &Conv2dSpec,
) -> (Tensor, Tensor) {
    let g = geometry(x, wt, s).expect("conv2d_vjp on inputs that passed forward");
    let cout_g = g.cout / s.groups;
    let ksz = g.cin_g * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let (wd, gd) = (wt.data(), gout.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; wt.numel()];
    for ni in 0..g.n {
        for grp in 0..s.groups {
            let cols = im2col(x.data(), &g, s, ni, grp);
            let gbase = (ni * g.cout + grp * cout_g) * plane;
            let gg = &gd[gbase..gbase + cout_g * plane];
            dw[grp * cout_g * ksz..(grp + 1) * cout_g * ksz]
                .par_chunks_mut(ksz)
                .with_min_len(min_rows(plane * ksz))
                .enumerate()
                .for_each(|(col, dwr)| {
                    for (p, &gv) in gg[col * plane..][..plane].iter().enumerate() {
                        axpy(dwr, gv, &cols[p * ksz..][..ksz]);
                    }
                });
            let mut dcols = vec![0.0; plane * ksz];
            dcols
                .par_chunks_mut(ksz)
                .with_min_len(min_rows(cout_g * ksz))
                .enumerate()
                .for_each(|(p, dc)| {
                    for col in 0..cout_g {
                        axpy(
                            dc,
                            gg[col * plane + p],
                            &wd[(grp * cout_g + col) * ksz..][..ksz],
                        );
                    }
                });
            for cil in 0..g.cin_g {
                let dp = &mut dx[(ni * g.cin + grp * g.cin_g + cil) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let k = (cil * g.kh + ky) * g.kw + kx;
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                if let Some(i) = tap(&g, s, oy, ox, ky, kx) {
                                    dp[i] += dcols[(oy * g.wo + ox) * ksz + k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(wt.shape().to_vec(), dw),
    )
}

pub(crate) fn mean_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("mean_pool")?;
    let hw = (h * w) as f64;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().sum::<f64>() / hw)
        .collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1], data))
}

pub(crate) fn mean_pool_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let [_, _, h, w] = x.dims4("mean_pool").unwrap();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(x.numel());
    for &gv in g.data() {
        out.extend(std::iter::repeat_n(gv * inv, h * w));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn pad_replicate(x: &Tensor, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("pad_replicate")?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for p in x.data().chunks_exact(h * w) {
        for y in 0..hp {
            let sy = y.saturating_sub(pad).min(h - 1);
            for xx in 0..wp {
                let sx = xx.saturating_sub(pad).min(w - 1);
                out.push(p[sy * w + sx]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, hp, wp], out))
}

pub(crate) fn pad_replicate_vjp(x: &Tensor, g: &Tensor, pad: usize) -> Tensor {
    let [_, _, h, w] = x.dims4("pad_replicate").unwrap();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; x.numel()];
    for (op, gp) in out
        .chunks_exact_mut(h * w)
        .zip(g.data().chunks_exact(hp * wp))
    {
        for y in 0..hp {
            let sy = y.saturating_sub(pad).min(h - 1);
            for xx in 0..wp {
                let sx = xx.saturating_sub(pad).min(w - 1);
                op[sy * w + sx] += gp[y * wp + xx];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample")?;
    let mut out = Vec::with_capacity(x.numel() * 4);
    for p in x.data().chunks_exact(h * w) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.push(p[(y / 2) * w + xx / 2]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out))
}

pub(crate) fn upsample2x_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let [_, _, h, w] = x.dims4("upsample").unwrap();
    let mut out = vec![0.0; x.numel()];
    for (op, gp) in out
        .chunks_exact_mut(h * w)
        .zip(g.data().chunks_exact(4 * h * w))
    {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                op[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn haar_band(x: &Tensor, band: Band) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("dwt_haar")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "dwt_haar",
            format!("odd spatial extent {h}x{w}; no implicit padding"),
        ));
    }
    let s = band.signs();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(x.numel() / 4);
    for p in x.data().chunks_exact(h * w) {
        for y in 0..h2 {
            let (r0, r1) = (&p[2 * y * w..][..w], &p[(2 * y + 1) * w..][..w]);
            for xx in 0..w2 {
                let (a, b, cc, d) = (r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]);
                out.push(0.5 * (s[0] * a + s[1] * b + s[2] * cc + s[3] * d));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h2, w2], out))
}

pub(crate) fn haar_band_vjp(x: &Tensor, g: &Tensor, band: Band) -> Tensor {
    let [_, _, h, w] = x.dims4("dwt_haar").unwrap();
    let s = band.signs();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; x.numel()];
    for (op, gp) in out
        .chunks_exact_mut(h * w)
        .zip(g.data().chunks_exact(h2 * w2))
    {
        for y in 0..h2 {
            for xx in 0..w2 {
                let gv = 0.5 * gp[y * w2 + xx];
                op[2 * y * w + 2 * xx] = s[0] * gv;
                op[2 * y * w + 2 * xx + 1] = s[1] * gv;
                op[(2 * y + 1) * w + 2 * xx] = s[2] * gv;
                op[(2 * y + 1) * w + 2 * xx + 1] = s[3] * gv;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
