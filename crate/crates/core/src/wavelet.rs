//! Single-level orthonormal Haar decomposition of feature maps.
//!
//! For each 2x2 block `[[a, b], [c, d]]` of every channel:
//!
//! ```text
//! ll = (a + b + c + d) / 2    lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2    hh = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so the inverse is its transpose and the
//! squared norm is preserved across the four bands.

use crate::error::{Error, Result};
use crate::layers::{conv, declare_conv};
use crate::ops::{self, Band, Conv2dSpec};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The four sub-bands of one decomposition level, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bands<T> {
    pub ll: T,
    pub lh: T,
    pub hl: T,
    pub hh: T,
}

impl<T> Bands<T> {
    pub fn get(&self, band: Band) -> &T {
        match band {
            Band::Ll => &self.ll,
            Band::Lh => &self.lh,
            Band::Hl => &self.hl,
            Band::Hh => &self.hh,
        }
    }
}

pub fn dwt_haar(x: &Tensor) -> Result<Bands<Tensor>> {
    Ok(Bands {
        ll: ops::haar_band(x, Band::Ll)?,
        lh: ops::haar_band(x, Band::Lh)?,
        hl: ops::haar_band(x, Band::Hl)?,
        hh: ops::haar_band(x, Band::Hh)?,
    })
}

pub fn idwt_haar(bands: &Bands<Tensor>) -> Result<Tensor> {
    let [n, c, h, w] = bands.ll.dims4("idwt_haar")?;
    for b in [&bands.lh, &bands.hl, &bands.hh] {
        if b.shape() != bands.ll.shape() {
            return Err(Error::dim(
                "idwt_haar",
                "band",
                format!(
                    "band shapes differ: {:?} vs {:?}",
                    bands.ll.shape(),
                    b.shape()
                ),
            ));
        }
    }
    let mut out = vec![0.0; n * c * 4 * h * w];
    let (w2, plane) = (2 * w, h * w);
    for band in Band::ALL {
        let s = band.signs();
        let src = bands.get(band).data();
        for p in 0..n * c {
            let dst = &mut out[p * 4 * plane..][..4 * plane];
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5 * src[p * plane + y * w + x];
                    dst[2 * y * w2 + 2 * x] += s[0] * v;
                    dst[2 * y * w2 + 2 * x + 1] += s[1] * v;
                    dst[(2 * y + 1) * w2 + 2 * x] += s[2] * v;
                    dst[(2 * y + 1) * w2 + 2 * x + 1] += s[3] * v;
                }
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

/// Nearest-neighbour 2x upsampling back to the source level's resolution.
pub fn lift_to_level(band: &Tensor) -> Result<Tensor> {
    ops::upsample_nearest2x(band)
}

pub fn dwt(tape: &mut Tape, x: Var) -> Result<Bands<Var>> {
    Ok(Bands {
        ll: tape.haar_band(x, Band::Ll)?,
        lh: tape.haar_band(x, Band::Lh)?,
        hl: tape.haar_band(x, Band::Hl)?,
        hh: tape.haar_band(x, Band::Hh)?,
    })
}

/// Pointwise `3C -> C` reduction of the concatenated detail bands.
pub fn declare_reduce_high(store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    declare_conv(store, name, channels, 3 * channels, 1, true)
}

pub fn reduce_high(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    lh: Var,
    hl: Var,
    hh: Var,
) -> Result<Var> {
    let shape = tape.value(lh).shape().to_vec();
    if tape.value(hl).shape() != shape || tape.value(hh).shape() != shape {
        return Err(Error::dim(
            "reduce_high",
            "band",
            "detail bands differ in shape",
        ));
    }
    let cat = tape.concat(&[lh, hl, hh], 1)?;
    conv(tape, store, name, cat, Conv2dSpec::default())
}
