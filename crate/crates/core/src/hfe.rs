//! Hybrid feature enhancement: level-5 self-attention followed by a top-down
//! (FPN) and bottom-up (PAN) neck that mixes one frequency stream with one
//! modality's spatial pyramid.
//!
//! Every fusion site projects its three inputs to a common width, adds them
//! and runs a stack of residual 3x3 blocks. Upsampling is nearest 2x paired
//! with a 1x1 conv; downsampling is a 3x3 stride-2 conv.

use crate::backbone::Levels;
use crate::error::{Error, Result};
use crate::layers::{
    conv, declare_attention, declare_conv, declare_norm, from_tokens, multi_head_attention, norm,
    to_tokens,
};
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HfeConfig {
    /// Common width `C_e` of every fusion output.
    pub width: usize,
    pub repblocks: usize,
    pub heads: usize,
}

impl Default for HfeConfig {
    fn default() -> Self {
        HfeConfig {
            width: 256,
            repblocks: 3,
            heads: 8,
        }
    }
}

/// Enhanced pyramid `{P3, N4, N5}` of one stream.
#[derive(Clone, Copy, Debug)]
pub struct HfeOutputs {
    pub p3: Var,
    pub n4: Var,
    pub n5: Var,
}

impl HfeOutputs {
    pub fn levels(&self) -> Levels<Var> {
        [self.p3, self.n4, self.n5]
    }
}

pub fn declare_self_attention(store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    declare_attention(store, &format!("{name}.attn"), channels)?;
    declare_norm(store, &format!("{name}.norm"), channels)
}

/// One encoder layer over the level-5 cells: `norm(x + MHA(x, x, x))`.
pub fn level5_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    f5: Var,
    heads: usize,
) -> Result<Var> {
    let [_, _, h, w] = tape.value(f5).dims4("level5_self_attention")?;
    let tokens = to_tokens(tape, f5)?;
    let attn = multi_head_attention(
        tape,
        store,
        &format!("{name}.attn"),
        tokens,
        tokens,
        tokens,
        heads,
    )?;
    let res = tape.add(tokens, attn.out)?;
    let out = norm(tape, store, &format!("{name}.norm"), res)?;
    from_tokens(tape, out, h, w)
}

/// The three branch names of a fusion site, in summation order.
const BRANCHES: [&str; 3] = ["a", "b", "c"];

/// Declares a fusion site. Branch `a` is the site-specific resampling conv,
/// branches `b` and `c` are 1x1 projections of `cin_b` / `cin_c` channels.
fn declare_fusion(
    store: &mut ParamStore,
    name: &str,
    cin_a: usize,
    kernel_a: usize,
    cin_b: usize,
    cin_c: usize,
    cfg: &HfeConfig,
) -> Result<()> {
    let ce = cfg.width;
    declare_conv(store, &format!("{name}.a"), ce, cin_a, kernel_a, true)?;
    declare_conv(store, &format!("{name}.b"), ce, cin_b, 1, true)?;
    declare_conv(store, &format!("{name}.c"), ce, cin_c, 1, true)?;
    for r in 0..cfg.repblocks {
        declare_conv(store, &format!("{name}.rep{r}"), ce, ce, 3, true)?;
    }
    Ok(())
}

/// `x + relu(conv3x3(x))`.
pub fn repblock(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = conv(tape, store, name, x, Conv2dSpec::same(1))?;
    let y = tape.relu(y)?;
    tape.add(x, y)
}

/// Sums the three projected branches and applies the RepBlock stack.
fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    branches: [Var; 3],
    repblocks: usize,
) -> Result<Var> {
    let shape = tape.value(branches[0]).shape().to_vec();
    for (b, &v) in BRANCHES.iter().zip(&branches) {
        if tape.value(v).shape() != shape {
            return Err(Error::dim(
                "fusion",
                "resolution",
                format!(
                    "{name}: branch {b} is {:?}, expected {:?}",
                    tape.value(v).shape(),
                    shape
                ),
            ));
        }
    }
    let ab = tape.add(branches[0], branches[1])?;
    let mut x = tape.add(ab, branches[2])?;
    for r in 0..repblocks {
        x = repblock(tape, store, &format!("{name}.rep{r}"), x)?;
    }
    Ok(x)
}

fn project(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    conv(tape, store, name, x, Conv2dSpec::default())
}

/// `U(x)`: 1x1 conv then nearest 2x upsampling. The two commute for nearest
/// interpolation, so the conv runs at the coarser resolution.
fn upsample_branch(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = project(tape, store, name, x)?;
    tape.upsample2x(y)
}

/// `D(x)`: 3x3 stride-2 conv with padding 1.
fn down_branch(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    conv(tape, store, name, x, Conv2dSpec::new(2, 1, 1, 1))
}

/// Top-down pass returning `(P4, P3)`.
#[allow(clippy::too_many_arguments)]
pub fn fpn_topdown(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    f5_star: Var,
    f4_freq: Var,
    f4_spatial: Var,
    f3_freq: Var,
    f3_spatial: Var,
    repblocks: usize,
) -> Result<(Var, Var)> {
    let site = format!("{name}.fpn4");
    let u = upsample_branch(tape, store, &format!("{site}.a"), f5_star)?;
    let b = project(tape, store, &format!("{site}.b"), f4_freq)?;
    let c = project(tape, store, &format!("{site}.c"), f4_spatial)?;
    let p4 = fuse(tape, store, &site, [u, b, c], repblocks)?;

    let site = format!("{name}.fpn3");
    let u = upsample_branch(tape, store, &format!("{site}.a"), p4)?;
    let b = project(tape, store, &format!("{site}.b"), f3_freq)?;
    let c = project(tape, store, &format!("{site}.c"), f3_spatial)?;
    let p3 = fuse(tape, store, &site, [u, b, c], repblocks)?;
    Ok((p4, p3))
}

/// Bottom-up pass returning `(N4, N5)`.
#[allow(clippy::too_many_arguments)]
pub fn pan_bottomup(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    p3: Var,
    p4: Var,
    f5_star: Var,
    f4_spatial: Var,
    f5_spatial: Var,
    repblocks: usize,
) -> Result<(Var, Var)> {
    let site = format!("{name}.pan4");
    let d = down_branch(tape, store, &format!("{site}.a"), p3)?;
    let lat = project(tape, store, &format!("{site}.b"), p4)?;
    let c = project(tape, store, &format!("{site}.c"), f4_spatial)?;
    let n4 = fuse(tape, store, &site, [d, lat, c], repblocks)?;

    let site = format!("{name}.pan5");
    let d = down_branch(tape, store, &format!("{site}.a"), n4)?;
    let lat = project(tape, store, &format!("{site}.b"), f5_star)?;
    let c = project(tape, store, &format!("{site}.c"), f5_spatial)?;
    let n5 = fuse(tape, store, &site, [d, lat, c], repblocks)?;
    Ok((n4, n5))
}

/// Declares one stream's neck for level channel counts `channels`.
pub fn declare(
    store: &mut ParamStore,
    name: &str,
    channels: Levels<usize>,
    cfg: &HfeConfig,
) -> Result<()> {
    let [c3, c4, c5] = channels;
    let ce = cfg.width;
    if cfg.heads == 0 || c5 % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "level-5 width {c5} is not divisible by {} attention heads",
            cfg.heads
        )));
    }
    declare_self_attention(store, &format!("{name}.sa5"), c5)?;
    declare_fusion(store, &format!("{name}.fpn4"), c5, 1, c4, c4, cfg)?;
    declare_fusion(store, &format!("{name}.fpn3"), ce, 1, c3, c3, cfg)?;
    declare_fusion(store, &format!("{name}.pan4"), ce, 3, ce, c4, cfg)?;
    declare_fusion(store, &format!("{name}.pan5"), ce, 3, c5, c5, cfg)
}

/// Runs one stream: frequency pyramid `freq` (already at level resolution)
/// against the spatial pyramid `spatial`.
pub fn run_hfe(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    freq: Levels<Var>,
    spatial: Levels<Var>,
    cfg: &HfeConfig,
) -> Result<HfeOutputs> {
    for (i, (&f, &s)) in freq.iter().zip(&spatial).enumerate() {
        let fs = tape.value(f).dims4("run_hfe")?;
        let ss = tape.value(s).dims4("run_hfe")?;
        if fs[2..] != ss[2..] {
            return Err(Error::dim(
                "run_hfe",
                "resolution",
                format!(
                    "level {}: frequency {:?} vs spatial {:?}",
                    i + 3,
                    &fs[2..],
                    &ss[2..]
                ),
            ));
        }
    }
    let f5_star = level5_self_attention(tape, store, &format!("{name}.sa5"), freq[2], cfg.heads)?;
    let (p4, p3) = fpn_topdown(
        tape,
        store,
        name,
        f5_star,
        freq[1],
        spatial[1],
        freq[0],
        spatial[0],
        cfg.repblocks,
    )?;
    let (n4, n5) = pan_bottomup(
        tape,
        store,
        name,
        p3,
        p4,
        f5_star,
        spatial[1],
        spatial[2],
        cfg.repblocks,
    )?;
    Ok(HfeOutputs { p3, n4, n5 })
}
