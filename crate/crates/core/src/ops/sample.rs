use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interpolation stencil along one axis for a normalized coordinate.
///
/// Cell `j` has its center at `(j + 0.5) / extent`; coordinates past the
/// outermost centers clamp to the border cell.
#[derive(Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    /// `d(continuous index)/d(normalized coordinate)`, zero when clamped.
    slope: f64,
}

fn axis(p: f64, extent: usize) -> Axis {
    let u = p * extent as f64 - 0.5;
    let max = (extent - 1) as f64;
    if extent == 1 || u <= 0.0 || u >= max {
        let c = u.clamp(0.0, max);
        let i = c as usize;
        return Axis {
            i0: i,
            i1: i,
            frac: 0.0,
            slope: 0.0,
        };
    }
    let i0 = u.floor() as usize;
    Axis {
        i0,
        i1: (i0 + 1).min(extent - 1),
        frac: u - i0 as f64,
        slope: extent as f64,
    }
}

fn check(x: &Tensor, pts: &Tensor) -> Result<([usize; 4], usize)> {
    let [n, c, h, w] = x.dims4("bilinear_sample")?;
    match pts.shape() {
        &[pn, p, 2] if pn == n => Ok(([n, c, h, w], p)),
        s => Err(Error::dim(
            "bilinear_sample",
            "points",
            format!("points must be [{n}, P, 2], got {s:?}"),
        )),
    }
}

pub(crate) fn bilinear_sample(x: &Tensor, pts: &Tensor) -> Result<Tensor> {
    let ([n, c, h, w], p) = check(x, pts)?;
    let (xd, pd) = (x.data(), pts.data());
    let mut out = vec![0.0; n * p * c];
    for ni in 0..n {
        for pi in 0..p {
            let ax = axis(pd[(ni * p + pi) * 2], w);
            let ay = axis(pd[(ni * p + pi) * 2 + 1], h);
            let o = &mut out[(ni * p + pi) * c..][..c];
            for (ci, ov) in o.iter_mut().enumerate() {
                let plane = &xd[(ni * c + ci) * h * w..][..h * w];
                let top =
                    plane[ay.i0 * w + ax.i0] * (1.0 - ax.frac) + plane[ay.i0 * w + ax.i1] * ax.frac;
                let bot =
                    plane[ay.i1 * w + ax.i0] * (1.0 - ax.frac) + plane[ay.i1 * w + ax.i1] * ax.frac;
                *ov = top * (1.0 - ay.frac) + bot * ay.frac;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, p, c], out))
}

pub(crate) fn bilinear_sample_vjp(x: &Tensor, pts: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let ([n, c, h, w], p) = check(x, pts).expect("validated in forward");
    let (xd, pd, gd) = (x.data(), pts.data(), g.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dp = vec![0.0; pts.numel()];
    for ni in 0..n {
        for pi in 0..p {
            let ax = axis(pd[(ni * p + pi) * 2], w);
            let ay = axis(pd[(ni * p + pi) * 2 + 1], h);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ci in 0..c {
                let gv = gd[(ni * p + pi) * c + ci];
                let base = (ni * c + ci) * h * w;
                let v00 = xd[base + ay.i0 * w + ax.i0];
                let v01 = xd[base + ay.i0 * w + ax.i1];
                let v10 = xd[base + ay.i1 * w + ax.i0];
                let v11 = xd[base + ay.i1 * w + ax.i1];
                dx[base + ay.i0 * w + ax.i0] += gv * (1.0 - ax.frac) * (1.0 - ay.frac);
                dx[base + ay.i0 * w + ax.i1] += gv * ax.frac * (1.0 - ay.frac);
                dx[base + ay.i1 * w + ax.i0] += gv * (1.0 - ax.frac) * ay.frac;
                dx[base + ay.i1 * w + ax.i1] += gv * ax.frac * ay.frac;
                gx += gv * ((v01 - v00) * (1.0 - ay.frac) + (v11 - v10) * ay.frac);
                gy += gv * ((v10 - v00) * (1.0 - ax.frac) + (v11 - v01) * ax.frac);
            }
            dp[(ni * p + pi) * 2] = gx * ax.slope;
            dp[(ni * p + pi) * 2 + 1] = gy * ay.slope;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(pts.shape().to_vec(), dp),
    )
}
