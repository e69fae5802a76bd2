//! End-to-end composition of every module.

use crate::backbone::{self, Levels};
use crate::error::Result;
use crate::fqs::{self, GateOverride, LayerOutput, Selected, Streams};
use crate::head::{self, Detection};
use crate::hfe::{self, HfeOutputs};
use crate::hfsr;
use crate::lfha;
use crate::ops::Band;
use crate::params::ParamStore;
use crate::pipeline::config::PipelineConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wavelet;

/// Registers every parameter of the pipeline.
pub fn declare(store: &mut ParamStore, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    backbone::declare(store, &cfg.backbone)?;
    for (li, &c) in cfg.backbone.level_channels.iter().enumerate() {
        let l = li + 3;
        if cfg.wavelet {
            wavelet::declare_reduce_high(store, &format!("wavelet.l{l}.reduce_ir"), c)?;
            wavelet::declare_reduce_high(store, &format!("wavelet.l{l}.reduce_rgb"), c)?;
        }
        lfha::declare(store, &format!("lfha.l{l}"), c, cfg.attn_width(c))?;
        hfsr::declare(store, &format!("hfsr.l{l}"), c)?;
    }
    hfe::declare(store, "hfe.low", cfg.backbone.level_channels, &cfg.hfe)?;
    hfe::declare(store, "hfe.high", cfg.backbone.level_channels, &cfg.hfe)?;
    fqs::declare(store, cfg.hfe.width, &cfg.fqs)?;
    head::declare(store, cfg.fqs.dim, cfg.classes)
}

/// Everything up to and including the two enhanced pyramids.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub spatial_ir: Levels<Var>,
    pub spatial_rgb: Levels<Var>,
    /// Half-resolution low bands per modality.
    pub ll_ir: Levels<Var>,
    pub ll_rgb: Levels<Var>,
    /// Half-resolution channel-reduced high bands per modality.
    pub high_ir: Levels<Var>,
    pub high_rgb: Levels<Var>,
    /// Aligned low-frequency features (half resolution).
    pub low: Levels<Var>,
    /// Fused high-frequency features (half resolution).
    pub high: Levels<Var>,
    /// `[N, T, T]` alignment weights per level.
    pub align_weights: Levels<Var>,
    /// Gradient consistency loss summed over levels.
    pub grad_loss: Var,
    pub low_pyramid: HfeOutputs,
    pub high_pyramid: HfeOutputs,
}

fn bands(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PipelineConfig,
    x: Var,
    name: &str,
) -> Result<(Var, Var)> {
    if cfg.wavelet {
        let b = wavelet::dwt(tape, x)?;
        let high = wavelet::reduce_high(tape, store, name, b.lh, b.hl, b.hh)?;
        Ok((b.ll, high))
    } else {
        let ll = tape.haar_band(x, Band::Ll)?;
        let avg = tape.scale(ll, 0.5)?;
        Ok((avg, avg))
    }
}

pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PipelineConfig,
    rgb: Var,
    ir: Var,
) -> Result<Encoded> {
    let spatial_ir = backbone::extract(tape, store, &cfg.backbone, ir)?;
    let spatial_rgb = backbone::extract(tape, store, &cfg.backbone, rgb)?;
    let mut ll_ir = spatial_ir;
    let mut ll_rgb = spatial_ir;
    let mut high_ir = spatial_ir;
    let mut high_rgb = spatial_ir;
    let mut low = spatial_ir;
    let mut high = spatial_ir;
    let mut align_weights = spatial_ir;
    let mut lifted_low = spatial_ir;
    let mut lifted_high = spatial_ir;
    let mut losses = Vec::with_capacity(3);
    for i in 0..3 {
        let l = i + 3;
        (ll_ir[i], high_ir[i]) = bands(
            tape,
            store,
            cfg,
            spatial_ir[i],
            &format!("wavelet.l{l}.reduce_ir"),
        )?;
        (ll_rgb[i], high_rgb[i]) = bands(
            tape,
            store,
            cfg,
            spatial_rgb[i],
            &format!("wavelet.l{l}.reduce_rgb"),
        )?;
        let aligned = lfha::run(tape, store, &format!("lfha.l{l}"), ll_ir[i], ll_rgb[i])?;
        low[i] = aligned.out;
        align_weights[i] = aligned.weights;
        let kept = hfsr::run(tape, store, &format!("hfsr.l{l}"), high_ir[i], high_rgb[i])?;
        high[i] = kept.fused;
        losses.push(kept.loss);
        lifted_low[i] = tape.upsample2x(low[i])?;
        lifted_high[i] = tape.upsample2x(high[i])?;
    }
    let sum = tape.add(losses[0], losses[1])?;
    let grad_loss = tape.add(sum, losses[2])?;
    let low_pyramid = hfe::run_hfe(tape, store, "hfe.low", lifted_low, spatial_ir, &cfg.hfe)?;
    let high_pyramid = hfe::run_hfe(tape, store, "hfe.high", lifted_high, spatial_rgb, &cfg.hfe)?;
    Ok(Encoded {
        spatial_ir,
        spatial_rgb,
        ll_ir,
        ll_rgb,
        high_ir,
        high_rgb,
        low,
        high,
        align_weights,
        grad_loss,
        low_pyramid,
        high_pyramid,
    })
}

/// Query selection, decoding and class logits.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub streams: Streams,
    pub selected: Selected,
    pub layers: Vec<LayerOutput>,
    /// `[N, K, C]`.
    pub logits: Var,
    /// `[N, K, 4]`.
    pub anchors: Var,
}

pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PipelineConfig,
    low: Levels<Var>,
    high: Levels<Var>,
    gates: GateOverride,
) -> Result<Decoded> {
    let streams = fqs::gate_streams(tape, store, low, high, gates)?;
    let selected = fqs::select_queries(tape, store, &streams, cfg.fqs.queries)?;
    let layers = fqs::decode(tape, store, &selected, &streams, &cfg.fqs)?;
    let last = *layers.last().expect("at least one decoder layer");
    let logits = head::class_logits(tape, store, last.content)?;
    Ok(Decoded {
        streams,
        selected,
        layers,
        logits,
        anchors: last.anchors,
    })
}

/// Values kept from a forward pass for diagnostics and heatmaps.
#[derive(Clone, Debug)]
pub struct Intermediates {
    pub ll_ir: Levels<Tensor>,
    pub ll_rgb: Levels<Tensor>,
    pub high_ir: Levels<Tensor>,
    pub high_rgb: Levels<Tensor>,
    pub low: Levels<Tensor>,
    pub high: Levels<Tensor>,
    pub low_pyramid: Levels<Tensor>,
    pub high_pyramid: Levels<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub intermediates: Intermediates,
}

fn values(tape: &Tape, v: Levels<Var>) -> Levels<Tensor> {
    v.map(|x| tape.value(x).clone())
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed);
        declare(&mut store, &cfg)?;
        Ok(Model { cfg, store })
    }

    /// Runs the full pipeline on one pair `[1, 3, H, W]`.
    pub fn infer(&self, rgb: &Tensor, ir: &Tensor) -> Result<Inference> {
        self.infer_with(rgb, ir, GateOverride::default())
    }

    pub fn infer_with(&self, rgb: &Tensor, ir: &Tensor, gates: GateOverride) -> Result<Inference> {
        let mut tape = Tape::new();
        let r = tape.leaf(rgb.clone());
        let i = tape.leaf(ir.clone());
        let enc = encode(&mut tape, &self.store, &self.cfg, r, i)?;
        let dec = decode(
            &mut tape,
            &self.store,
            &self.cfg,
            enc.low_pyramid.levels(),
            enc.high_pyramid.levels(),
            gates,
        )?;
        let detections = head::detections(tape.value(dec.logits), tape.value(dec.anchors), 0);
        let intermediates = Intermediates {
            ll_ir: values(&tape, enc.ll_ir),
            ll_rgb: values(&tape, enc.ll_rgb),
            high_ir: values(&tape, enc.high_ir),
            high_rgb: values(&tape, enc.high_rgb),
            low: values(&tape, enc.low),
            high: values(&tape, enc.high),
            low_pyramid: values(&tape, enc.low_pyramid.levels()),
            high_pyramid: values(&tape, enc.high_pyramid.levels()),
        };
        Ok(Inference {
            detections,
            intermediates,
        })
    }

    /// Detections computed from given enhanced pyramids, bypassing the encoder.
    pub fn decode_pyramids(
        &self,
        low: &Levels<Tensor>,
        high: &Levels<Tensor>,
        gates: GateOverride,
    ) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let l = low.clone().map(|t| tape.leaf(t));
        let h = high.clone().map(|t| tape.leaf(t));
        let dec = decode(&mut tape, &self.store, &self.cfg, l, h, gates)?;
        Ok(head::detections(
            tape.value(dec.logits),
            tape.value(dec.anchors),
            0,
        ))
    }
}
