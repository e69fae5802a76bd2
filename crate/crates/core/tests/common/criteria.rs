//! The eight acceptance properties. Each returns a one-line summary on success
//! and a description of the first violation otherwise. Negated comparisons
//! below treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use wdfq::diagnostics::{kl_gaussian, trace_orth, GaussianFit};
use wdfq::fqs::{self, FqsConfig, GateOverride};
use wdfq::head::{hungarian_match, Detection};
use wdfq::hfe;
use wdfq::lfha;
use wdfq::ops::REGISTERED;
use wdfq::params::ParamStore;
use wdfq::pipeline::dataset::{bundled_dataset, load_dataset};
use wdfq::pipeline::train::train_toy;
use wdfq::pipeline::{Model, PipelineConfig};
use wdfq::tape::Tape;
use wdfq::wavelet::{dwt_haar, idwt_haar};
use wdfq::Tensor;

use super::grad::{check_detection_loss, check_grad_consistency, check_op, INSTANCES, TOLERANCE};
use super::{brute_force_assignment, rng, uniform};

pub type Outcome = Result<String, String>;
pub type Check = fn() -> Outcome;

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("{what} took {elapsed:?}, limit {limit:?}"))
    }
}

pub fn wavelet_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst_err, mut worst_energy): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=3),
            2 * r.random_range(1..=8),
            2 * r.random_range(1..=8),
        ];
        let x = uniform(&mut r, &shape, -10.0, 10.0);
        let bands = dwt_haar(&x).map_err(|e| e.to_string())?;
        let back = idwt_haar(&bands).map_err(|e| e.to_string())?;
        worst_err = worst_err.max(back.max_abs_diff(&x));
        let e_in = x.norm_sq();
        let e_out =
            bands.ll.norm_sq() + bands.lh.norm_sq() + bands.hl.norm_sq() + bands.hh.norm_sq();
        worst_energy = worst_energy.max((e_in - e_out).abs() / e_in);
    }
    within(start.elapsed(), Duration::from_secs(5), "round trip")?;
    if worst_err > 1e-9 || worst_energy > 1e-9 {
        return Err(format!(
            "reconstruction {worst_err:e}, energy {worst_energy:e}"
        ));
    }
    Ok(format!(
        "200 tensors, max error {worst_err:.1e}, energy drift {worst_energy:.1e}, {:.2?}",
        start.elapsed()
    ))
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for (i, name) in REGISTERED.iter().enumerate() {
        let e = check_op(name, INSTANCES, 1000 + i as u64);
        if !(e <= worst.1) {
            worst = (name, e);
        }
    }
    for (name, e) in [
        (
            "grad_consistency_loss",
            check_grad_consistency(INSTANCES, 7),
        ),
        ("detection_loss", check_detection_loss(INSTANCES, 11)),
    ] {
        if !(e <= worst.1) {
            worst = (name, e);
        }
    }
    within(start.elapsed(), Duration::from_secs(60), "gradient suite")?;
    if !(worst.1 <= TOLERANCE) {
        return Err(format!("{} has relative error {:e}", worst.0, worst.1));
    }
    Ok(format!(
        "{} kernels + 2 losses x {INSTANCES} instances, worst {:.1e} ({}), {:.2?}",
        REGISTERED.len(),
        worst.1,
        worst.0,
        start.elapsed()
    ))
}

/// Largest `|Σ row − 1|` over the last axis.
fn row_sum_deviation(t: &Tensor) -> f64 {
    let last = *t.shape().last().unwrap();
    t.data()
        .chunks(last)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// A small random decoder configuration.
pub fn random_fqs(r: &mut impl Rng) -> FqsConfig {
    let heads = r.random_range(1..=3);
    FqsConfig {
        dim: heads * r.random_range(1..=3),
        heads,
        layers: 1,
        queries: r.random_range(1..=4),
        points: r.random_range(1..=3),
        ffn_dim: 4,
    }
}

/// Random `[1, width, ·, ·]` pyramids with extents `e, e/2, e/4`-ish.
pub fn random_pyramid(r: &mut rand_chacha::ChaCha8Rng, width: usize) -> [Tensor; 3] {
    let e = r.random_range(2..=5);
    [
        uniform(r, &[1, width, e + 2, e + 1], -1.0, 1.0),
        uniform(r, &[1, width, e, e + 1], -1.0, 1.0),
        uniform(r, &[1, width, 1 + e / 2, 1], -1.0, 1.0),
    ]
}

pub fn normalization() -> Outcome {
    let mut r = rng(3);
    let mut worst = [0.0f64; 3];
    for cfg_i in 0..100 {
        let seed = 500 + cfg_i;
        let mut store = ParamStore::new(seed);
        let mut tape = Tape::new();

        let c = 2 * r.random_range(1..=3);
        let attn = r.random_range(1..=4);
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        lfha::declare(&mut store, "lfha", c, attn).map_err(|e| e.to_string())?;
        let ir = tape.leaf(uniform(&mut r, &[1, c, h, w], -3.0, 3.0));
        let rgb = tape.leaf(uniform(&mut r, &[1, c, h, w], -3.0, 3.0));
        let a = lfha::run(&mut tape, &store, "lfha", ir, rgb).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(row_sum_deviation(tape.value(a.weights)));

        let cfg = random_fqs(&mut r);
        let width = r.random_range(1..=3);
        fqs::declare_self_attention(&mut store, "self", cfg.dim).map_err(|e| e.to_string())?;
        fqs::declare_faca(&mut store, "faca", width, &cfg).map_err(|e| e.to_string())?;
        let k = cfg.queries;
        let content = tape.leaf(uniform(&mut r, &[1, k, cfg.dim], -2.0, 2.0));
        let pos = tape.leaf(uniform(&mut r, &[1, k, cfg.dim], -2.0, 2.0));
        let (_, sw) =
            fqs::decoder_self_attention(&mut tape, &store, "self", content, pos, cfg.heads)
                .map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(row_sum_deviation(tape.value(sw)));

        let anchors = tape.leaf(uniform(&mut r, &[1, k, 4], 0.05, 0.95));
        let low = random_pyramid(&mut r, width).map(|t| tape.leaf(t));
        let high = random_pyramid(&mut r, width).map(|t| tape.leaf(t));
        let f = fqs::faca(&mut tape, &store, "faca", content, anchors, low, high, &cfg)
            .map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(row_sum_deviation(tape.value(f.weights)));
    }
    if worst.iter().any(|&d| d > 1e-12) {
        return Err(format!(
            "row sums off by {:e} (alignment), {:e} (decoder self-attention), {:e} (deformable)",
            worst[0], worst[1], worst[2]
        ));
    }
    Ok(format!(
        "100 configs, max |sum - 1| {:.1e} / {:.1e} / {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

/// Random `[Q, G]` cost matrix, with integer entries (and ties) half the time.
pub fn random_cost(r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let q = r.random_range(1..=6);
    let g = r.random_range(1..=q);
    if r.random_bool(0.5) {
        Tensor::from_fn(&[q, g], |_| r.random_range(0..4) as f64)
    } else {
        uniform(r, &[q, g], -5.0, 5.0)
    }
}

pub fn check_hungarian(count: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..count {
        let cost = random_cost(&mut r);
        let got = hungarian_match(&cost).map_err(|e| e.to_string())?;
        let (best, lex) = brute_force_assignment(&cost);
        let c = super::assignment_cost(&cost, &got);
        if (c - best).abs() > 1e-12 * (1.0 + best.abs()) || got != lex {
            return Err(format!(
                "matrix {i} {:?}: got {got:?} (cost {c}), optimum {lex:?} (cost {best})",
                cost.shape()
            ));
        }
    }
    Ok(())
}

pub fn check_align_oracle(count: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let (c, d) = (r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
        let mut store = ParamStore::new(seed + i as u64);
        lfha::declare_align(&mut store, "a", c, d).map_err(|e| e.to_string())?;
        let ir = uniform(&mut r, &[1, c, h, w], -2.0, 2.0);
        let rgb = uniform(&mut r, &[1, c, h, w], -2.0, 2.0);
        let mut tape = Tape::new();
        let (vi, vr) = (tape.leaf(ir.clone()), tape.leaf(rgb.clone()));
        let got =
            lfha::cross_modal_align(&mut tape, &store, "a", vi, vr).map_err(|e| e.to_string())?;
        let (want, weights) = super::cross_modal_align(&store, "a", &ir, &rgb);
        worst = worst.max(tape.value(got.out).max_abs_diff(&want));
        let flat: Vec<f64> = weights.concat();
        worst = worst.max(
            tape.value(got.weights)
                .max_abs_diff(&Tensor::new(vec![1, h * w, h * w], flat).unwrap()),
        );
    }
    Ok(worst)
}

pub fn check_level5_oracle(count: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let heads = r.random_range(1..=3);
        let c = heads * r.random_range(1..=3);
        let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
        let mut store = ParamStore::new(seed + i as u64);
        hfe::declare_self_attention(&mut store, "sa", c).map_err(|e| e.to_string())?;
        // Non-trivial affine parameters so the norm is exercised.
        for p in ["sa.norm.gamma", "sa.norm.beta"] {
            store
                .set(p, uniform(&mut r, &[c], 0.5, 1.5))
                .map_err(|e| e.to_string())?;
        }
        let x = uniform(&mut r, &[1, c, h, w], -2.0, 2.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let got = hfe::level5_self_attention(&mut tape, &store, "sa", v, heads)
            .map_err(|e| e.to_string())?;
        let want = super::level5_self_attention(&store, "sa", &x, heads);
        worst = worst.max(tape.value(got).max_abs_diff(&want));
    }
    Ok(worst)
}

pub fn check_faca_oracle(count: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let cfg = random_fqs(&mut r);
        let width = r.random_range(1..=3);
        let mut store = ParamStore::new(seed + i as u64);
        fqs::declare_faca(&mut store, "f", width, &cfg).map_err(|e| e.to_string())?;
        // Larger offset weights so sampling points leave their anchor cell.
        let ow = store.get("f.offsets.w").unwrap().map(|v| 4.0 * v);
        store.set("f.offsets.w", ow).map_err(|e| e.to_string())?;
        let k = cfg.queries;
        let content = uniform(&mut r, &[1, k, cfg.dim], -1.0, 1.0);
        let anchors = uniform(&mut r, &[1, k, 4], 0.05, 0.95);
        let low = random_pyramid(&mut r, width);
        let high = random_pyramid(&mut r, width);
        let mut tape = Tape::new();
        let (vc, va) = (tape.leaf(content.clone()), tape.leaf(anchors.clone()));
        let vl = low.clone().map(|t| tape.leaf(t));
        let vh = high.clone().map(|t| tape.leaf(t));
        let got =
            fqs::faca(&mut tape, &store, "f", vc, va, vl, vh, &cfg).map_err(|e| e.to_string())?;
        let (want, weights) = super::faca(&store, "f", &content, &anchors, [&low, &high], &cfg);
        let want = Tensor::new(vec![1, k, cfg.dim], want.concat()).unwrap();
        worst = worst.max(tape.value(got.out).max_abs_diff(&want));
        let flat: Vec<f64> = weights.into_iter().flatten().flatten().collect();
        let shape = tape.value(got.weights).shape().to_vec();
        worst = worst.max(
            tape.value(got.weights)
                .max_abs_diff(&Tensor::new(shape, flat).unwrap()),
        );
    }
    Ok(worst)
}

pub fn oracles() -> Outcome {
    check_hungarian(500, 4)?;
    let errs = [
        check_align_oracle(50, 40)?,
        check_faca_oracle(50, 41)?,
        check_level5_oracle(50, 42)?,
    ];
    if errs.iter().any(|&e| !(e <= 1e-12)) {
        return Err(format!(
            "loop oracles differ by {:e} (alignment), {:e} (deformable), {:e} (level-5)",
            errs[0], errs[1], errs[2]
        ));
    }
    Ok(format!(
        "500 assignments exact; loop oracles within {:.1e} / {:.1e} / {:.1e}",
        errs[0], errs[1], errs[2]
    ))
}

pub fn detection_bits(d: &[Detection]) -> Vec<(usize, [u64; 5])> {
    d.iter()
        .map(|x| (x.cls, [x.score, x.cx, x.cy, x.w, x.h].map(f64::to_bits)))
        .collect()
}

/// Model and pyramids of one bundled pair under the test profile.
pub fn ablation_setup() -> Result<(Model, [Tensor; 3], [Tensor; 3]), String> {
    let model = Model::new(PipelineConfig::test()).map_err(|e| e.to_string())?;
    let samples = load_dataset(&bundled_dataset(), model.cfg.classes).map_err(|e| e.to_string())?;
    let im = model
        .infer(&samples[1].rgb, &samples[1].ir)
        .map_err(|e| e.to_string())?
        .intermediates;
    Ok((model, im.low_pyramid, im.high_pyramid))
}

/// Perturbs each of the chosen pyramid values of the gated stream and checks
/// the detections stay bit-identical. `stride` thins the set of positions.
pub fn check_ablation(
    model: &Model,
    low: &[Tensor; 3],
    high: &[Tensor; 3],
    stride: usize,
) -> Result<usize, String> {
    let mut checked = 0;
    for zero_high in [true, false] {
        let gates = if zero_high {
            GateOverride {
                low: None,
                high: Some(0.0),
            }
        } else {
            GateOverride {
                low: Some(0.0),
                high: None,
            }
        };
        let base = model
            .decode_pyramids(low, high, gates)
            .map_err(|e| e.to_string())?;
        let base = detection_bits(&base);
        for level in 0..3 {
            let n = if zero_high {
                high[level].numel()
            } else {
                low[level].numel()
            };
            for j in (level..n).step_by(stride) {
                let (mut l, mut h) = (low.clone(), high.clone());
                let target = if zero_high {
                    &mut h[level]
                } else {
                    &mut l[level]
                };
                let v = target.data()[j];
                target.data_mut()[j] = -3.0 * v + 1.7;
                let got = model
                    .decode_pyramids(&l, &h, gates)
                    .map_err(|e| e.to_string())?;
                if detection_bits(&got) != base {
                    let s = if zero_high { "high" } else { "low" };
                    return Err(format!(
                        "{s} level {} value {j} changed the detections",
                        level + 3
                    ));
                }
                checked += 1;
            }
        }
        // Every value at once, including sign flips.
        let (mut l, mut h) = (low.clone(), high.clone());
        for t in if zero_high {
            h.iter_mut()
        } else {
            l.iter_mut()
        } {
            *t = t.map(|v| -2.0 * v - 0.5);
        }
        let got = model
            .decode_pyramids(&l, &h, gates)
            .map_err(|e| e.to_string())?;
        if detection_bits(&got) != base {
            return Err("replacing a whole gated pyramid changed the detections".into());
        }
    }
    Ok(checked)
}

pub fn ablation() -> Outcome {
    let (model, low, high) = ablation_setup()?;
    let n = check_ablation(&model, &low, &high, 1)?;
    Ok(format!(
        "{n} single-value perturbations, all detections bit-identical"
    ))
}

pub fn toy_training() -> Outcome {
    let start = Instant::now();
    let samples = load_dataset(&bundled_dataset(), 2).map_err(|e| e.to_string())?;
    let mut model = Model::new(PipelineConfig::test()).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let rows = pool
        .install(|| train_toy(&mut model, &samples, 200))
        .map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(120), "toy training")?;
    let (r0, r50, r200) = (rows[0], rows[50], rows[200]);
    if !(r50.l_total < r0.l_total) {
        return Err(format!(
            "L_total {} at step 50 vs {} at step 0",
            r50.l_total, r0.l_total
        ));
    }
    let drop = 1.0 - r200.l_grad / r0.l_grad;
    if !(drop >= 0.3) {
        return Err(format!("L_grad fell by {:.1}% only", 100.0 * drop));
    }
    Ok(format!(
        "L_total {:.4} -> {:.4} by step 50, L_grad down {:.1}% by step 200, {:.1?}",
        r0.l_total,
        r50.l_total,
        100.0 * drop,
        start.elapsed()
    ))
}

fn wdfq(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_wdfq"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "wdfq {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Every file under `dir` with its bytes, sorted by name.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Runs `infer` and a short `train-toy` into `dir`.
pub fn cli_run(dir: &Path, threads: usize) -> Result<(), String> {
    let data = bundled_dataset();
    let toy = data.parent().unwrap();
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "profile = test\nseed = 21\nsteps = 6\n").map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let t = threads.to_string();
    wdfq(&[
        "infer",
        &s(&cfg),
        &s(&toy.join("pair2_rgb.ppm")),
        &s(&toy.join("pair2_ir.pgm")),
        "--json",
        &s(&dir.join("detections.json")),
        "--heatmaps",
        &s(&dir.join("heatmaps")),
        "--threads",
        &t,
    ])?;
    wdfq(&[
        "train-toy",
        &s(&cfg),
        &s(&data),
        "--trace",
        &s(&dir.join("trace.csv")),
        "--threads",
        &t,
    ])
}

pub fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut snaps = Vec::new();
    for (i, threads) in [1, 1, 4, 4].into_iter().enumerate() {
        let dir = root.path().join(format!("run{i}"));
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        cli_run(&dir, threads)?;
        snaps.push(snapshot(&dir));
    }
    let files = snaps[0].len();
    if files < 8 {
        return Err(format!(
            "expected json, csv and six heatmaps, found {files} files"
        ));
    }
    for (i, s) in snaps.iter().enumerate().skip(1) {
        if s != &snaps[0] {
            return Err(format!("run {i} differs from run 0"));
        }
    }
    Ok(format!(
        "{files} files identical across 4 runs (1 and 4 threads)"
    ))
}

fn gaussian(mean: &[f64], cov: &[f64]) -> GaussianFit {
    let d = mean.len();
    GaussianFit::new(
        DVector::from_row_slice(mean),
        DMatrix::from_row_slice(d, d, cov),
    )
    .unwrap()
}

pub fn diagnostics() -> Outcome {
    let kl_shift = kl_gaussian(&gaussian(&[0.0], &[1.0]), &gaussian(&[1.0], &[1.0]))
        .map_err(|e| e.to_string())?;
    let kl_scale = kl_gaussian(&gaussian(&[0.0], &[2.0]), &gaussian(&[0.0], &[1.0]))
        .map_err(|e| e.to_string())?;
    let want_scale = 0.5 * (2.0 - 1.0 - 2f64.ln());
    let orth = trace_orth(
        &gaussian(
            &[0.0; 4],
            &[
                1.5, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        ),
        &gaussian(
            &[1.0; 4],
            &[
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.5,
            ],
        ),
    )
    .map_err(|e| e.to_string())?;
    if (kl_shift - 0.5).abs() > 1e-12 || (kl_scale - want_scale).abs() > 1e-12 || orth != 0.0 {
        return Err(format!(
            "KL {kl_shift} and {kl_scale} (want {want_scale}), trace {orth}"
        ));
    }
    Ok(format!(
        "KL {kl_shift} and {kl_scale:.15}, disjoint trace {orth}"
    ))
}

/// Name and check of every criterion, in order.
pub const ALL: [(&str, Check); 8] = [
    ("wavelet round trip", wavelet_round_trip),
    ("gradient suite", gradient_suite),
    ("attention normalization", normalization),
    ("oracle equivalence", oracles),
    ("stream ablation wiring", ablation),
    ("toy training", toy_training),
    ("determinism", determinism),
    ("diagnostic closed forms", diagnostics),
];
