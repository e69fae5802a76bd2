//! Full-batch gradient descent on `L_box + L_cls + L_grad`.
//!
//! Each sample is evaluated on its own tape; samples run in parallel and
//! their gradients are reduced in dataset order, so results do not depend on
//! the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fqs::GateOverride;
use crate::head;
use crate::params::ParamStore;
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::dataset::Sample;
use crate::pipeline::model::{self, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub l_box: f64,
    pub l_cls: f64,
    pub l_grad: f64,
    pub l_total: f64,
}

pub const TRACE_HEADER: &str = "step,L_box,L_cls,L_grad,L_total";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.l_box, r.l_cls, r.l_grad, r.l_total
        );
    }
    s
}

/// Loss components `[box, cls, grad, total]` of one sample.
pub type Components = [f64; 4];

/// Loss components and parameter gradients for one sample.
pub fn sample_gradients(
    store: &ParamStore,
    cfg: &PipelineConfig,
    sample: &Sample,
) -> Result<(Components, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let rgb = tape.leaf(sample.rgb.clone());
    let ir = tape.leaf(sample.ir.clone());
    let enc = model::encode(&mut tape, store, cfg, rgb, ir)?;
    let dec = model::decode(
        &mut tape,
        store,
        cfg,
        enc.low_pyramid.levels(),
        enc.high_pyramid.levels(),
        GateOverride::default(),
    )?;
    let det = head::detection_loss(&mut tape, dec.logits, dec.anchors, &sample.boxes, &cfg.loss)?;
    let total = head::total_loss(&mut tape, det.boxes, det.cls, enc.grad_loss)?;
    let comps = [
        tape.value(det.boxes).item(),
        tape.value(det.cls).item(),
        tape.value(enc.grad_loss).item(),
        tape.value(total).item(),
    ];
    let grads = tape.backward(total)?;
    let mut out = BTreeMap::new();
    for (name, g) in grads.params() {
        if let Some(g) = g {
            out.insert(name.to_string(), g.clone());
        }
    }
    Ok((comps, out))
}

/// Mean components and mean gradients over `samples`.
pub fn batch_gradients(
    store: &ParamStore,
    cfg: &PipelineConfig,
    samples: &[Sample],
) -> Result<(Components, BTreeMap<String, Tensor>)> {
    let per: Vec<_> = samples
        .par_iter()
        .map(|s| sample_gradients(store, cfg, s))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mut comps = [0.0; 4];
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (c, g) in per {
        for (a, b) in comps.iter_mut().zip(c) {
            *a += b;
        }
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    for c in comps.iter_mut() {
        *c /= n;
    }
    for g in grads.values_mut() {
        *g = g.map(|v| v / n);
    }
    Ok((comps, grads))
}

/// Scales `grads` so their joint L2 norm is at most `clip`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, clip: f64) -> f64 {
    let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// `steps` descent updates; the trace has one row per step from 0 to
/// `steps`, each measured before that step's update.
pub fn train_toy(model: &mut Model, samples: &[Sample], steps: usize) -> Result<Vec<TraceRow>> {
    if samples.is_empty() {
        return Err(Error::Dataset("training needs at least one sample".into()));
    }
    let mut rows = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (c, mut grads) = batch_gradients(&model.store, &model.cfg, samples)?;
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        rows.push(TraceRow {
            step,
            l_box: c[0],
            l_cls: c[1],
            l_grad: c[2],
            l_total: c[3],
        });
        if step == steps {
            break;
        }
        clip_global_norm(&mut grads, model.cfg.clip);
        let lr = model.cfg.step_size;
        for (name, p) in model.store.iter_mut() {
            if let Some(g) = grads.get(name) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
    Ok(rows)
}
