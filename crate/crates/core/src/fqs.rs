//! Frequency-aware query selection and the deformable decoder.
//!
//! Both enhanced streams are flattened to tokens, gated by a learned scalar
//! per stream, scored to pick the top-K initial queries, and refined by a
//! stack of decoder layers whose cross-attention samples both frequency
//! pyramids at learned offsets around each anchor center.

use crate::backbone::Levels;
use crate::error::{Error, Result};
use crate::layers::{
    conv, declare_attention, declare_conv, declare_linear, declare_norm, linear,
    multi_head_attention, norm, to_tokens,
};
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anchor logits are clamped to this range before refinement.
pub const ANCHOR_LOGIT_BOUND: f64 = 8.0;

/// The two frequency streams, in the order used for offsets and weights.
pub const STREAMS: [&str; 2] = ["low", "high"];

pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FqsConfig {
    /// Decoder embedding width `D`.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    /// Sampling points per (stream, level, head).
    pub points: usize,
    pub ffn_dim: usize,
}

impl Default for FqsConfig {
    fn default() -> Self {
        FqsConfig {
            dim: 256,
            heads: 8,
            layers: 6,
            queries: 300,
            points: 4,
            ffn_dim: 1024,
        }
    }
}

impl FqsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.heads == 0
            || self.layers == 0
            || self.queries == 0
            || self.points == 0
        {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Fixed per-stream gate values replacing the learned ones.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    pub low: Option<f64>,
    pub high: Option<f64>,
}

/// Gated stream features ready for selection and decoding.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    /// `[N, T_low, D]`.
    pub low_tokens: Var,
    /// `[N, T_high, D]`.
    pub high_tokens: Var,
    pub low_maps: Levels<Var>,
    pub high_maps: Levels<Var>,
    /// `[N, 1, 1]` each.
    pub gates: [Var; 2],
}

pub fn declare_gate(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    declare_linear(store, &format!("{name}.fc1"), dim, dim, true)?;
    declare_linear(store, &format!("{name}.fc2"), dim, 1, true)
}

/// `sigmoid(MLP(mean over tokens))`, shaped `[N, 1, 1]`.
pub fn stream_gate(tape: &mut Tape, store: &ParamStore, name: &str, tokens: Var) -> Result<Var> {
    let t = tape.value(tokens).shape()[1];
    let pooled = tape.sum_axis(tokens, 1)?;
    let pooled = tape.scale(pooled, 1.0 / t as f64)?;
    let h = linear(tape, store, &format!("{name}.fc1"), pooled)?;
    let h = tape.relu(h)?;
    let logit = linear(tape, store, &format!("{name}.fc2"), h)?;
    tape.sigmoid(logit)
}

/// Multiplies a stream by its gate. A fixed gate becomes a constant leaf and
/// the product is shifted by `+0.0` so an all-zero gate yields `+0.0` bits
/// whatever the sign of the input.
fn apply_gate(tape: &mut Tape, x: Var, gate: Var, fixed: bool) -> Result<Var> {
    let y = tape.mul(x, gate)?;
    if fixed {
        tape.add_scalar(y, 0.0)
    } else {
        Ok(y)
    }
}

/// Flattens a pyramid `[N, C, H_i, W_i]` into `[N, Σ H_i W_i, C]`.
pub fn flatten_levels(tape: &mut Tape, maps: Levels<Var>) -> Result<Var> {
    let toks = [
        to_tokens(tape, maps[0])?,
        to_tokens(tape, maps[1])?,
        to_tokens(tape, maps[2])?,
    ];
    tape.concat(&toks, 1)
}

pub fn declare_streams(store: &mut ParamStore, width: usize, cfg: &FqsConfig) -> Result<()> {
    for s in STREAMS {
        declare_linear(store, &format!("fqs.{s}.proj"), width, cfg.dim, true)?;
        declare_gate(store, &format!("fqs.{s}.gate"), cfg.dim)?;
    }
    Ok(())
}

/// Projects both streams to `D`, computes the gates and scales tokens and maps.
pub fn gate_streams(
    tape: &mut Tape,
    store: &ParamStore,
    low: Levels<Var>,
    high: Levels<Var>,
    over: GateOverride,
) -> Result<Streams> {
    let mut tokens = [low[0]; 2];
    let mut maps = [low, high];
    let mut gates = [low[0]; 2];
    for (si, s) in STREAMS.iter().enumerate() {
        let flat = flatten_levels(tape, maps[si])?;
        let proj = linear(tape, store, &format!("fqs.{s}.proj"), flat)?;
        let fixed = if si == 0 { over.low } else { over.high };
        let gate = match fixed {
            Some(g) => {
                let n = tape.value(proj).shape()[0];
                tape.leaf(Tensor::full(&[n, 1, 1], g))
            }
            None => stream_gate(tape, store, &format!("fqs.{s}.gate"), proj)?,
        };
        tokens[si] = apply_gate(tape, proj, gate, fixed.is_some())?;
        let n = tape.value(gate).shape()[0];
        let gate4 = tape.reshape(gate, &[n, 1, 1, 1])?;
        for m in maps[si].iter_mut() {
            *m = apply_gate(tape, *m, gate4, fixed.is_some())?;
        }
        gates[si] = gate;
    }
    Ok(Streams {
        low_tokens: tokens[0],
        high_tokens: tokens[1],
        low_maps: maps[0],
        high_maps: maps[1],
        gates,
    })
}

/// Indices of the `k` largest scores, highest first, ties to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "cannot select {k} queries from {} tokens",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn declare_selection(store: &mut ParamStore, dim: usize) -> Result<()> {
    declare_linear(store, "fqs.score", dim, 1, true)?;
    declare_linear(store, "fqs.box", dim, 4, true)
}

/// Initial decoder state.
#[derive(Clone, Debug)]
pub struct Selected {
    /// `[N, K, D]`.
    pub content: Var,
    /// `[N, K, 4]` in `(cx, cy, w, h)`, each in `[0, 1]`.
    pub anchors: Var,
    /// Selected flat token indices per sample, high-stream tokens first.
    pub indices: Vec<Vec<usize>>,
}

/// Scores `Cat(high, low)` tokens and keeps the top `k` as queries.
pub fn select_queries(
    tape: &mut Tape,
    store: &ParamStore,
    streams: &Streams,
    k: usize,
) -> Result<Selected> {
    let all = tape.concat(&[streams.high_tokens, streams.low_tokens], 1)?;
    let scores = linear(tape, store, "fqs.score", all)?;
    let &[n, t, d] = tape.value(all).shape() else {
        unreachable!("tokens are rank 3")
    };
    let mut picked = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(n);
    for b in 0..n {
        let row = &tape.value(scores).data()[b * t..(b + 1) * t];
        let idx = top_k_indices(row, k)?;
        let sample = tape.slice(all, 0, b, b + 1)?;
        picked.push(tape.index_select(sample, 1, idx.clone())?);
        indices.push(idx);
    }
    let content = if n == 1 {
        picked[0]
    } else {
        tape.concat(&picked, 0)?
    };
    debug_assert_eq!(tape.value(content).shape(), &[n, k, d]);
    let raw = linear(tape, store, "fqs.box", content)?;
    let anchors = tape.sigmoid(raw)?;
    Ok(Selected {
        content,
        anchors,
        indices,
    })
}

pub fn declare_positional(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    declare_linear(store, &format!("{name}.fc1"), 4, dim, true)?;
    declare_linear(store, &format!("{name}.fc2"), dim, dim, true)
}

/// `P = MLP(anchor)` with a ReLU between the two layers.
pub fn positional_query(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    anchors: Var,
) -> Result<Var> {
    let h = linear(tape, store, &format!("{name}.fc1"), anchors)?;
    let h = tape.relu(h)?;
    linear(tape, store, &format!("{name}.fc2"), h)
}

pub fn declare_self_attention(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    declare_attention(store, &format!("{name}.attn"), dim)?;
    declare_norm(store, &format!("{name}.norm"), dim)
}

/// Attention over queries with `q = k = z + P`, `v = z`, then residual and norm.
/// Returns the updated content and the `[N, M, K, K]` weights.
pub fn decoder_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    content: Var,
    pos: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let qk = tape.add(content, pos)?;
    let attn = multi_head_attention(tape, store, &format!("{name}.attn"), qk, qk, content, heads)?;
    let res = tape.add(content, attn.out)?;
    Ok((
        norm(tape, store, &format!("{name}.norm"), res)?,
        attn.weights,
    ))
}

pub fn declare_faca(
    store: &mut ParamStore,
    name: &str,
    width: usize,
    cfg: &FqsConfig,
) -> Result<()> {
    let (m, d, ks) = (cfg.heads, cfg.dim, cfg.points);
    let s = STREAMS.len();
    declare_linear(
        store,
        &format!("{name}.offsets"),
        d,
        s * LEVELS * m * ks * 2,
        true,
    )?;
    declare_linear(
        store,
        &format!("{name}.logits"),
        d,
        m * s * LEVELS * ks,
        true,
    )?;
    declare_conv(store, &format!("{name}.value"), d, width, 1, false)?;
    declare_linear(store, &format!("{name}.out"), d, d, true)
}

/// Output of [`faca`].
pub struct Faca {
    /// `[N, K, D]`.
    pub out: Var,
    /// `[N, K, M, 2·3·K_s]`, ordered `[stream][level][point]`, summing to one
    /// over the last axis.
    pub weights: Var,
}

/// Frequency-aware deformable cross-attention.
///
/// Offsets are laid out `[stream][level][head][point][xy]` and scaled by the
/// level extent so one unit moves one cell; attention logits are laid out
/// `[head][stream][level][point]` and normalized jointly per head.
#[allow(clippy::too_many_arguments)]
pub fn faca(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    content: Var,
    anchors: Var,
    low: Levels<Var>,
    high: Levels<Var>,
    cfg: &FqsConfig,
) -> Result<Faca> {
    let &[n, k, d] = tape.value(content).shape() else {
        return Err(Error::dim("faca", "rank", "content must be [N, K, D]"));
    };
    if d != cfg.dim {
        return Err(Error::dim(
            "faca",
            "width",
            format!("content width {d}, expected {}", cfg.dim),
        ));
    }
    let (m, ks, dh) = (cfg.heads, cfg.points, cfg.head_dim());
    let s_count = STREAMS.len();
    let chunk = m * ks * 2;

    let offsets = linear(tape, store, &format!("{name}.offsets"), content)?;
    let logits = linear(tape, store, &format!("{name}.logits"), content)?;
    let logits = tape.reshape(logits, &[n, k, m, s_count * LEVELS * ks])?;
    let weights = tape.softmax(logits, 3)?;
    let per_head = tape.permute(weights, &[0, 2, 1, 3])?;
    let per_head = tape.reshape(per_head, &[n * m * k, s_count * LEVELS, ks])?;

    let center = tape.slice(anchors, 2, 0, 2)?;
    let center = tape.reshape(center, &[n, k, 1, 2])?;

    let mut acc: Option<Var> = None;
    for (si, maps) in [low, high].iter().enumerate() {
        for (li, &map) in maps.iter().enumerate() {
            let [_, _, h, w] = tape.value(map).dims4("faca")?;
            let values = conv(
                tape,
                store,
                &format!("{name}.value"),
                map,
                Conv2dSpec::default(),
            )?;
            let values = tape.reshape(values, &[n * m, dh, h, w])?;

            let start = (si * LEVELS + li) * chunk;
            let off = tape.slice(offsets, 2, start, start + chunk)?;
            let unit = tape.leaf(Tensor::from_fn(&[chunk], |j| {
                if j % 2 == 0 {
                    1.0 / w as f64
                } else {
                    1.0 / h as f64
                }
            }));
            let off = tape.mul(off, unit)?;
            let off = tape.reshape(off, &[n, k, m * ks, 2])?;
            let pts = tape.add(off, center)?;
            let pts = tape.reshape(pts, &[n, k, m, ks * 2])?;
            let pts = tape.permute(pts, &[0, 2, 1, 3])?;
            let pts = tape.reshape(pts, &[n * m, k * ks, 2])?;

            let samples = tape.bilinear_sample(values, pts)?;
            let samples = tape.reshape(samples, &[n * m * k, ks, dh])?;
            let col = si * LEVELS + li;
            let wts = tape.slice(per_head, 1, col, col + 1)?;
            let term = tape.matmul(wts, samples)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    let merged = acc.expect("at least one level");
    let merged = tape.reshape(merged, &[n, m, k, dh])?;
    let merged = tape.permute(merged, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[n, k, d])?;
    let out = linear(tape, store, &format!("{name}.out"), merged)?;
    Ok(Faca { out, weights })
}

pub fn declare_layer(
    store: &mut ParamStore,
    name: &str,
    width: usize,
    cfg: &FqsConfig,
) -> Result<()> {
    declare_positional(store, &format!("{name}.pos"), cfg.dim)?;
    declare_self_attention(store, &format!("{name}.self"), cfg.dim)?;
    declare_faca(store, &format!("{name}.faca"), width, cfg)?;
    declare_norm(store, &format!("{name}.faca_norm"), cfg.dim)?;
    declare_linear(store, &format!("{name}.ffn1"), cfg.dim, cfg.ffn_dim, true)?;
    declare_linear(store, &format!("{name}.ffn2"), cfg.ffn_dim, cfg.dim, true)?;
    declare_norm(store, &format!("{name}.ffn_norm"), cfg.dim)?;
    declare_linear(store, &format!("{name}.refine"), cfg.dim, 4, true)
}

/// Query state after a decoder layer, with the attention maps it produced.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub content: Var,
    pub anchors: Var,
    pub self_weights: Var,
    pub faca_weights: Var,
}

/// `sigmoid(clamp(logit(anchor)) + Δ)`.
pub fn refine_anchors(tape: &mut Tape, anchors: Var, delta: Var) -> Result<Var> {
    let logits = tape.logit(anchors, ANCHOR_LOGIT_BOUND)?;
    let moved = tape.add(logits, delta)?;
    tape.sigmoid(moved)
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    content: Var,
    anchors: Var,
    low: Levels<Var>,
    high: Levels<Var>,
    cfg: &FqsConfig,
) -> Result<LayerOutput> {
    let pos = positional_query(tape, store, &format!("{name}.pos"), anchors)?;
    let (z, self_weights) = decoder_self_attention(
        tape,
        store,
        &format!("{name}.self"),
        content,
        pos,
        cfg.heads,
    )?;

    let cross = faca(
        tape,
        store,
        &format!("{name}.faca"),
        z,
        anchors,
        low,
        high,
        cfg,
    )?;
    let z = tape.add(z, cross.out)?;
    let z = norm(tape, store, &format!("{name}.faca_norm"), z)?;

    let h = linear(tape, store, &format!("{name}.ffn1"), z)?;
    let h = tape.relu(h)?;
    let h = linear(tape, store, &format!("{name}.ffn2"), h)?;
    let z = tape.add(z, h)?;
    let z = norm(tape, store, &format!("{name}.ffn_norm"), z)?;

    let delta = linear(tape, store, &format!("{name}.refine"), z)?;
    let anchors = refine_anchors(tape, anchors, delta)?;
    Ok(LayerOutput {
        content: z,
        anchors,
        self_weights,
        faca_weights: cross.weights,
    })
}

pub fn declare_decoder(store: &mut ParamStore, width: usize, cfg: &FqsConfig) -> Result<()> {
    for l in 0..cfg.layers {
        declare_layer(store, &format!("fqs.dec{l}"), width, cfg)?;
    }
    Ok(())
}

/// Runs every decoder layer; returns one output per layer.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    init: &Selected,
    streams: &Streams,
    cfg: &FqsConfig,
) -> Result<Vec<LayerOutput>> {
    let mut content = init.content;
    let mut anchors = init.anchors;
    let mut outs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let o = decoder_layer(
            tape,
            store,
            &format!("fqs.dec{l}"),
            content,
            anchors,
            streams.low_maps,
            streams.high_maps,
            cfg,
        )?;
        content = o.content;
        anchors = o.anchors;
        outs.push(o);
    }
    Ok(outs)
}

/// Declares every FQS parameter for stream maps of `width` channels.
pub fn declare(store: &mut ParamStore, width: usize, cfg: &FqsConfig) -> Result<()> {
    cfg.validate()?;
    declare_streams(store, width, cfg)?;
    declare_selection(store, cfg.dim)?;
    declare_decoder(store, width, cfg)
}
