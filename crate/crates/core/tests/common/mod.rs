//! Scalar-loop reference implementations shared by the integration tests.
//! None of them go through the tape or the library kernels.
#![allow(dead_code)]

pub mod criteria;
pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wdfq::fqs::FqsConfig;
use wdfq::params::ParamStore;
use wdfq::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central differences of `f` with respect to every coordinate of every input.
pub fn numeric_gradient(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut xs = inputs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut g = Tensor::zeros(xs[i].shape());
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = f(&xs);
            xs[i].data_mut()[j] = orig - h;
            let down = f(&xs);
            xs[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and numeric gradients.
pub fn worst_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(*x, *y));
        }
    }
    worst
}

/// All injective maps from `g` columns to `q` rows, in lexicographic order.
pub fn injections(q: usize, g: usize) -> Vec<Vec<usize>> {
    fn go(q: usize, g: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == g {
            out.push(cur.clone());
            return;
        }
        for r in 0..q {
            if !cur.contains(&r) {
                cur.push(r);
                go(q, g, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(q, g, &mut Vec::new(), &mut out);
    out
}

pub fn assignment_cost(cost: &Tensor, assign: &[usize]) -> f64 {
    let g = cost.shape()[1];
    assign
        .iter()
        .enumerate()
        .map(|(j, &r)| cost.data()[r * g + j])
        .sum()
}

/// Minimum cost and the lexicographically first assignment attaining it.
pub fn brute_force_assignment(cost: &Tensor) -> (f64, Vec<usize>) {
    let (q, g) = (cost.shape()[0], cost.shape()[1]);
    let mut best = (f64::INFINITY, Vec::new());
    for a in injections(q, g) {
        let c = assignment_cost(cost, &a);
        if c < best.0 {
            best = (c, a);
        }
    }
    best
}

/// Weight matrix `[in, out]` and optional bias of a linear map.
pub struct Linear {
    pub w: Vec<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

impl Linear {
    pub fn load(store: &ParamStore, name: &str) -> Self {
        let w = store.get(&format!("{name}.w")).unwrap();
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        let rows = (0..fi)
            .map(|i| w.data()[i * fo..(i + 1) * fo].to_vec())
            .collect();
        let bname = format!("{name}.b");
        let b = store
            .contains(&bname)
            .then(|| store.get(&bname).unwrap().data().to_vec());
        Linear { w: rows, b }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let fo = self.w[0].len();
        let mut y = vec![0.0; fo];
        for (xi, row) in x.iter().zip(&self.w) {
            for o in 0..fo {
                y[o] += xi * row[o];
            }
        }
        if let Some(b) = &self.b {
            for o in 0..fo {
                y[o] += b[o];
            }
        }
        y
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let g = store.get(&format!("{name}.gamma")).unwrap().data();
    let b = store.get(&format!("{name}.beta")).unwrap().data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
        .collect()
}

/// Tokens `[H·W][C]` of sample 0 of a `[1, C, H, W]` map.
pub fn tokens(x: &Tensor) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    (0..hw)
        .map(|t| (0..c).map(|ch| x.data()[ch * hw + t]).collect())
        .collect()
}

/// Multi-head attention; returns the outputs and `weights[head][query][key]`.
pub fn attention(
    store: &ParamStore,
    name: &str,
    q_in: &[Vec<f64>],
    k_in: &[Vec<f64>],
    v_in: &[Vec<f64>],
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let lq = Linear::load(store, &format!("{name}.q"));
    let lk = Linear::load(store, &format!("{name}.k"));
    let lv = Linear::load(store, &format!("{name}.v"));
    let lo = Linear::load(store, &format!("{name}.o"));
    let q: Vec<_> = q_in.iter().map(|x| lq.apply(x)).collect();
    let k: Vec<_> = k_in.iter().map(|x| lk.apply(x)).collect();
    let v: Vec<_> = v_in.iter().map(|x| lv.apply(x)).collect();
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![vec![Vec::new(); q.len()]; heads];
    let mut mixed = vec![vec![0.0; d]; q.len()];
    for m in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| {
                    (0..dh)
                        .map(|e| qi[m * dh + e] * kj[m * dh + e])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let w = softmax(&scores);
            for (j, vj) in v.iter().enumerate() {
                for e in 0..dh {
                    mixed[i][m * dh + e] += w[j] * vj[m * dh + e];
                }
            }
            weights[m][i] = w;
        }
    }
    (mixed.iter().map(|x| lo.apply(x)).collect(), weights)
}

/// Zero-padded 1-D channel attention on a `[1, C, H, W]` map.
pub fn eca(x: &Tensor, kernel: &[f64]) -> Tensor {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let pooled: Vec<f64> = (0..c)
        .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let r = kernel.len() / 2;
    let gate: Vec<f64> = (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let j = ch as isize + t as isize - r as isize;
                if j >= 0 && (j as usize) < c {
                    acc += kv * pooled[j as usize];
                }
            }
            1.0 / (1.0 + (-acc).exp())
        })
        .collect();
    Tensor::from_fn(s, |i| x.data()[i] * gate[i / hw % c])
}

/// Cross-modal alignment on `[1, C, H, W]` inputs: returns the output map and
/// `weights[ir token][rgb token]`.
pub fn cross_modal_align(
    store: &ParamStore,
    name: &str,
    ir: &Tensor,
    rgb: &Tensor,
) -> (Tensor, Vec<Vec<f64>>) {
    let f = Linear::load(store, &format!("{name}.f"));
    let g = Linear::load(store, &format!("{name}.g"));
    let h = Linear::load(store, &format!("{name}.h"));
    let o = Linear::load(store, &format!("{name}.out"));
    let ti = tokens(ir);
    let tr = tokens(rgb);
    let q: Vec<_> = ti.iter().map(|x| f.apply(x)).collect();
    let k: Vec<_> = tr.iter().map(|x| g.apply(x)).collect();
    let v: Vec<_> = tr.iter().map(|x| h.apply(x)).collect();
    let d = q[0].len();
    let mut weights = Vec::new();
    let mut outs = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let w = softmax(&scores);
        let mut mixed = vec![0.0; d];
        for (wj, vj) in w.iter().zip(&v) {
            for e in 0..d {
                mixed[e] += wj * vj[e];
            }
        }
        outs.push(o.apply(&mixed));
        weights.push(w);
    }
    let s = ir.shape();
    let hw = s[2] * s[3];
    (Tensor::from_fn(s, |i| outs[i % hw][i / hw]), weights)
}

/// `norm(x + MHA(x, x, x))` over the cells of a `[1, C, H, W]` map.
pub fn level5_self_attention(store: &ParamStore, name: &str, f5: &Tensor, heads: usize) -> Tensor {
    let t = tokens(f5);
    let (a, _) = attention(store, &format!("{name}.attn"), &t, &t, &t, heads);
    let out: Vec<Vec<f64>> = t
        .iter()
        .zip(&a)
        .map(|(x, y)| {
            let r: Vec<f64> = x.iter().zip(y).map(|(p, q)| p + q).collect();
            layer_norm(store, &format!("{name}.norm"), &r)
        })
        .collect();
    let s = f5.shape();
    let hw = s[2] * s[3];
    Tensor::from_fn(s, |i| out[i % hw][i / hw])
}

/// Bilinear lookup of channel `ch` of sample 0 at a normalized point, with cell
/// centers at `(j + 0.5) / extent` and clamping to the border cells.
pub fn bilinear(map: &[f64], h: usize, w: usize, px: f64, py: f64) -> f64 {
    let coord = |p: f64, extent: usize| {
        let u = (p * extent as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, u - i0 as f64)
    };
    let (x0, x1, fx) = coord(px, w);
    let (y0, y1, fy) = coord(py, h);
    let at = |y: usize, x: usize| map[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Deformable cross-attention over both streams for sample 0.
///
/// Returns the `[K][D]` output and `weights[query][head][stream·level·point]`.
pub fn faca(
    store: &ParamStore,
    name: &str,
    content: &Tensor,
    anchors: &Tensor,
    streams: [&[Tensor; 3]; 2],
    cfg: &FqsConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (k, d) = (content.shape()[1], content.shape()[2]);
    let (m, ks) = (cfg.heads, cfg.points);
    let dh = d / m;
    let offsets = Linear::load(store, &format!("{name}.offsets"));
    let logits = Linear::load(store, &format!("{name}.logits"));
    let out = Linear::load(store, &format!("{name}.out"));
    let vw = store.get(&format!("{name}.value.w")).unwrap();
    let width = vw.shape()[1];

    // Projected value maps per stream and level: [stream][level][d][cell].
    let values: Vec<Vec<Vec<Vec<f64>>>> = streams
        .iter()
        .map(|levels| {
            levels
                .iter()
                .map(|map| {
                    let hw = map.shape()[2] * map.shape()[3];
                    (0..d)
                        .map(|o| {
                            (0..hw)
                                .map(|cell| {
                                    (0..width)
                                        .map(|c| {
                                            vw.data()[o * width + c] * map.data()[c * hw + cell]
                                        })
                                        .sum()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut outs = Vec::with_capacity(k);
    let mut all_weights = Vec::with_capacity(k);
    for q in 0..k {
        let z = &content.data()[q * d..(q + 1) * d];
        let a = &anchors.data()[q * 4..q * 4 + 4];
        let off = offsets.apply(z);
        let lg = logits.apply(z);
        let per = 2 * 3 * ks;
        let mut mixed = vec![0.0; d];
        let mut qw = Vec::with_capacity(m);
        for head in 0..m {
            let w = softmax(&lg[head * per..(head + 1) * per]);
            for s in 0..2 {
                for l in 0..3 {
                    let map = &streams[s][l];
                    let (h, wd) = (map.shape()[2], map.shape()[3]);
                    for p in 0..ks {
                        let base = ((((s * 3 + l) * m + head) * ks) + p) * 2;
                        let px = a[0] + off[base] / wd as f64;
                        let py = a[1] + off[base + 1] / h as f64;
                        let wt = w[(s * 3 + l) * ks + p];
                        for e in 0..dh {
                            let v = bilinear(&values[s][l][head * dh + e], h, wd, px, py);
                            mixed[head * dh + e] += wt * v;
                        }
                    }
                }
            }
            qw.push(w);
        }
        outs.push(out.apply(&mixed));
        all_weights.push(qw);
    }
    (outs, all_weights)
}
