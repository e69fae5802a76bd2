use std::f64::consts::PI;

use super::elementwise::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orientation bins for the dense HOG energy map, centered at `b * pi / B`.
pub const ORIENTATION_BINS: usize = 4;

/// Binary focal cross-entropy on logits against fixed `targets` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalSpec {
    pub targets: Tensor,
    pub alpha: f64,
    pub gamma: f64,
}

fn bin_centers() -> [f64; ORIENTATION_BINS] {
    std::array::from_fn(|b| b as f64 * PI / ORIENTATION_BINS as f64)
}

/// Magnitude `sqrt(gx² + gy² + eps) - sqrt(eps)` soft-assigned into the
/// orientation bins with `cos²(theta - center)` weights, averaged over bins.
pub(crate) fn orientation_energy(gx: &Tensor, gy: &Tensor, eps: f64) -> Result<Tensor> {
    if gx.shape() != gy.shape() {
        return Err(Error::dim(
            "orientation_energy",
            "shape",
            format!("{:?} vs {:?}", gx.shape(), gy.shape()),
        ));
    }
    let centers = bin_centers();
    let se = eps.sqrt();
    Ok(gx.zip_map(gy, |a, b| {
        let m = (a * a + b * b + eps).sqrt() - se;
        let theta = b.atan2(a);
        let w: f64 = centers.iter().map(|c| (theta - c).cos().powi(2)).sum();
        m * w / ORIENTATION_BINS as f64
    }))
}

pub(crate) fn orientation_energy_vjp(
    gx: &Tensor,
    gy: &Tensor,
    g: &Tensor,
    eps: f64,
) -> (Tensor, Tensor) {
    let centers = bin_centers();
    let se = eps.sqrt();
    let nb = ORIENTATION_BINS as f64;
    let mut da = Vec::with_capacity(gx.numel());
    let mut db = Vec::with_capacity(gx.numel());
    for ((&a, &b), &gv) in gx.data().iter().zip(gy.data()).zip(g.data()) {
        let r2 = a * a + b * b;
        let root = (r2 + eps).sqrt();
        let m = root - se;
        let theta = b.atan2(a);
        let w: f64 = centers
            .iter()
            .map(|c| (theta - c).cos().powi(2))
            .sum::<f64>()
            / nb;
        let dw: f64 = -centers
            .iter()
            .map(|c| (2.0 * (theta - c)).sin())
            .sum::<f64>()
            / nb;
        let (dta, dtb) = if r2 > 0.0 {
            (-b / r2, a / r2)
        } else {
            (0.0, 0.0)
        };
        da.push(gv * (a / root * w + m * dw * dta));
        db.push(gv * (b / root * w + m * dw * dtb));
    }
    (
        Tensor::from_parts(gx.shape().to_vec(), da),
        Tensor::from_parts(gx.shape().to_vec(), db),
    )
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid_focal(x: &Tensor, spec: &FocalSpec) -> Result<Tensor> {
    if spec.targets.shape() != x.shape() {
        return Err(Error::dim(
            "sigmoid_focal",
            "targets",
            format!(
                "targets {:?} vs logits {:?}",
                spec.targets.shape(),
                x.shape()
            ),
        ));
    }
    let (a, gm) = (spec.alpha, spec.gamma);
    Ok(x.zip_map(&spec.targets, |z, t| {
        let p = sigmoid(z);
        // -ln p = softplus(-z), -ln(1-p) = softplus(z)
        let pos = a * (1.0 - p).powf(gm) * softplus(-z);
        let neg = (1.0 - a) * p.powf(gm) * softplus(z);
        t * pos + (1.0 - t) * neg
    }))
}

pub(crate) fn sigmoid_focal_vjp(x: &Tensor, g: &Tensor, spec: &FocalSpec) -> Tensor {
    let (a, gm) = (spec.alpha, spec.gamma);
    let d = x
        .data()
        .iter()
        .zip(spec.targets.data())
        .zip(g.data())
        .map(|((&z, &t), &gv)| {
            let p = sigmoid(z);
            let q = 1.0 - p;
            let dpos = a * (-gm * q.powf(gm) * p * softplus(-z) - q.powf(gm + 1.0));
            let dneg = (1.0 - a) * (gm * p.powf(gm) * q * softplus(z) + p.powf(gm + 1.0));
            gv * (t * dpos + (1.0 - t) * dneg)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), d)
}
