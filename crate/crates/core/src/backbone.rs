//! Small shared convnet emitting stride-8/16/32 feature levels.

use crate::error::{Error, Result};
use crate::layers::{conv, declare_conv};
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Feature maps at levels 3, 4 and 5 (strides 8, 16, 32).
pub type Levels<T> = [T; 3];

pub const LEVEL_STRIDES: Levels<usize> = [8, 16, 32];

/// Input extents must be multiples of this so level-5 maps split into even halves.
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub level_channels: Levels<usize>,
    pub blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: 16,
            level_channels: [32, 64, 128],
            blocks: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let [c3, c4, c5] = self.level_channels;
        if self.in_channels == 0 || self.stem_channels == 0 || c3 == 0 {
            return Err(Error::Config(
                "backbone channel counts must be positive".into(),
            ));
        }
        if !(c3 < c4 && c4 < c5) {
            return Err(Error::Config(format!(
                "backbone level channels must increase, got {:?}",
                self.level_channels
            )));
        }
        Ok(())
    }
}

const PREFIX: &str = "backbone";

pub fn declare(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let c0 = cfg.stem_channels;
    declare_conv(
        store,
        &format!("{PREFIX}.stem0"),
        c0,
        cfg.in_channels,
        3,
        true,
    )?;
    declare_conv(store, &format!("{PREFIX}.stem1"), c0, c0, 3, true)?;
    let mut prev = c0;
    for (li, &c) in cfg.level_channels.iter().enumerate() {
        declare_conv(
            store,
            &format!("{PREFIX}.l{}.down", li + 3),
            c,
            prev,
            3,
            true,
        )?;
        for b in 0..cfg.blocks {
            declare_conv(
                store,
                &format!("{PREFIX}.l{}.block{b}", li + 3),
                c,
                c,
                3,
                true,
            )?;
        }
        prev = c;
    }
    Ok(())
}

fn conv_relu(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let y = conv(tape, store, name, x, Conv2dSpec::new(stride, 1, 1, 1))?;
    tape.relu(y)
}

/// Runs the shared backbone on one image `[N, 3, H, W]`.
///
/// The same parameters serve both modalities.
pub fn extract(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    image: Var,
) -> Result<Levels<Var>> {
    let [_, c, h, w] = tape.value(image).dims4("backbone")?;
    if c != cfg.in_channels {
        return Err(Error::dim(
            "backbone",
            "channels",
            format!("expected {} input channels, got {c}", cfg.in_channels),
        ));
    }
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "input {h}x{w} must be a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    let x = conv_relu(tape, store, &format!("{PREFIX}.stem0"), image, 2)?;
    let mut x = conv_relu(tape, store, &format!("{PREFIX}.stem1"), x, 2)?;
    let mut out = Vec::with_capacity(3);
    for li in 0..3 {
        x = conv_relu(tape, store, &format!("{PREFIX}.l{}.down", li + 3), x, 2)?;
        for b in 0..cfg.blocks {
            let r = conv_relu(tape, store, &format!("{PREFIX}.l{}.block{b}", li + 3), x, 1)?;
            x = tape.add(x, r)?;
        }
        out.push(x);
    }
    Ok([out[0], out[1], out[2]])
}
