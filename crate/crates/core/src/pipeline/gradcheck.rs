//! Central finite-difference checks of tape gradients for each module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fqs::{self, FqsConfig};
use crate::head::{self, GroundTruth, LossWeights};
use crate::hfe::{self, HfeConfig};
use crate::hfsr;
use crate::lfha;
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wavelet;

pub const STEP: f64 = 1e-5;
/// Denominator floor of [`rel_error`].
pub const REL_FLOOR: f64 = 1e-3;

pub const MODULES: [&str; 7] = ["tensor", "wavelet", "lfha", "hfsr", "hfe", "fqs", "head"];

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds a scalar from `inputs`: non-scalar outputs are contracted with a
/// fixed pseudo-random cotangent.
fn scalar_of(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = tape.leaf(proj.reshape(tape.value(out).shape())?);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub module: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares the tape gradient of `build` with central differences at every
/// input coordinate.
pub fn check<F>(build: F, inputs: &[Tensor], seed: u64) -> Result<(usize, f64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let numel = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Tensor::from_fn(&[numel], |_| rng.random_range(-1.0..1.0));
    let loss = scalar_of(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        let l = scalar_of(&mut t, o, &proj)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads.wrt(&tape, v);
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(g.data()[j], numeric));
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Runs the check for one module on a tiny random instance.
pub fn check_module(name: &str, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (checked, max_rel_error) = match name {
        "tensor" => {
            let x = random(&mut rng, &[1, 2, 5, 5], 1.0);
            let w = random(&mut rng, &[2, 1, 3, 3], 1.0);
            check(
                |t, v| t.conv2d(v[0], v[1], Conv2dSpec::new(1, 1, 2, 1)),
                &[x, w],
                seed,
            )?
        }
        "wavelet" => {
            let x = random(&mut rng, &[1, 2, 4, 4], 1.0);
            let mut store = ParamStore::new(seed);
            wavelet::declare_reduce_high(&mut store, "r", 2)?;
            check(
                |t, v| {
                    let b = wavelet::dwt(t, v[0])?;
                    let h = wavelet::reduce_high(t, &store, "r", b.lh, b.hl, b.hh)?;
                    t.add(b.ll, h)
                },
                &[x],
                seed,
            )?
        }
        "lfha" => {
            let mut store = ParamStore::new(seed);
            lfha::declare(&mut store, "a", 4, 4)?;
            let ir = random(&mut rng, &[1, 4, 2, 2], 1.0);
            let rgb = random(&mut rng, &[1, 4, 2, 2], 1.0);
            check(
                |t, v| Ok(lfha::run(t, &store, "a", v[0], v[1])?.out),
                &[ir, rgb],
                seed,
            )?
        }
        "hfsr" => {
            // Residuals of the L1 terms stay away from their kinks.
            let (f, a, b) = loop {
                let f = random(&mut rng, &[1, 2, 4, 4], 2.0);
                let a = random(&mut rng, &[1, 2, 4, 4], 0.3);
                let b = random(&mut rng, &[1, 2, 4, 4], 0.3);
                if min_residual(&f, &a, &b)? >= 1e-3 {
                    break (f, a, b);
                }
            };
            check(
                |t, v| {
                    let ta = t.leaf(a.clone());
                    let tb = t.leaf(b.clone());
                    hfsr::grad_consistency_loss(t, v[0], ta, tb)
                },
                &[f],
                seed,
            )?
        }
        "hfe" => {
            let cfg = HfeConfig {
                width: 4,
                repblocks: 1,
                heads: 2,
            };
            let chans = [2, 4, 4];
            let mut store = ParamStore::new(seed);
            hfe::declare(&mut store, "n", chans, &cfg)?;
            let mut inputs = Vec::new();
            for (i, &c) in chans.iter().enumerate() {
                inputs.push(random(&mut rng, &[1, c, 8 >> i, 8 >> i], 1.0));
            }
            for (i, &c) in chans.iter().enumerate() {
                inputs.push(random(&mut rng, &[1, c, 8 >> i, 8 >> i], 1.0));
            }
            check(
                |t, v| {
                    let o =
                        hfe::run_hfe(t, &store, "n", [v[0], v[1], v[2]], [v[3], v[4], v[5]], &cfg)?;
                    let a = t.sum(o.p3)?;
                    let b = t.sum(o.n4)?;
                    let c = t.sum(o.n5)?;
                    let ab = t.add(a, b)?;
                    t.add(ab, c)
                },
                &inputs,
                seed,
            )?
        }
        "fqs" => {
            let cfg = FqsConfig {
                dim: 8,
                heads: 2,
                layers: 1,
                queries: 3,
                points: 2,
                ffn_dim: 8,
            };
            let mut store = ParamStore::new(seed);
            fqs::declare_faca(&mut store, "f", 4, &cfg)?;
            let content = random(&mut rng, &[1, 3, 8], 1.0);
            let anchors = Tensor::from_fn(&[1, 3, 4], |_| rng.random_range(0.2..0.8));
            let mut inputs = vec![content, anchors];
            for _ in 0..2 {
                for i in 0..3 {
                    inputs.push(random(&mut rng, &[1, 4, 4 >> i, 4 >> i], 1.0));
                }
            }
            check(
                |t, v| {
                    let f = fqs::faca(
                        t,
                        &store,
                        "f",
                        v[0],
                        v[1],
                        [v[2], v[3], v[4]],
                        [v[5], v[6], v[7]],
                        &cfg,
                    )?;
                    Ok(f.out)
                },
                &inputs,
                seed,
            )?
        }
        "head" => {
            let gts = [
                GroundTruth {
                    cls: 1,
                    cx: 0.4,
                    cy: 0.5,
                    w: 0.3,
                    h: 0.2,
                },
                GroundTruth {
                    cls: 0,
                    cx: 0.7,
                    cy: 0.3,
                    w: 0.2,
                    h: 0.4,
                },
            ];
            let logits = random(&mut rng, &[1, 4, 2], 2.0);
            let anchors = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(0.15..0.6));
            check(
                |t, v| {
                    let l = head::detection_loss(t, v[0], v[1], &gts, &LossWeights::default())?;
                    t.add(l.boxes, l.cls)
                },
                &[logits, anchors],
                seed,
            )?
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown module `{other}` (expected one of {})",
                MODULES.join(", ")
            )))
        }
    };
    Ok(Report {
        module: name.to_string(),
        checked,
        max_rel_error,
    })
}

/// Smallest `|f − G_k(x)|` over both targets and all scales.
pub fn min_residual(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut m = f64::INFINITY;
    for k in 1..=3 {
        for src in [a, b] {
            let g = hfsr::grad_bank_tensor(src, k)?;
            for (x, y) in f.data().iter().zip(g.data()) {
                m = m.min((x - y).abs());
            }
        }
    }
    Ok(m)
}
