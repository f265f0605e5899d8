//! Shared helpers for the CLI integration and acceptance tests: a random
//! instance generator and a brute-force selection oracle written without
//! reusing any library scoring code.

#![allow(dead_code)]

use std::path::PathBuf;
use std::process::{Command, Output};

use guikv::cache_model::{LayerTrace, PromptLayout, Segment};
use guikv::numerics::Matrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAMMA_GRID: [f64; 9] = [0.01, 0.03, 0.05, 0.1, 0.15, 0.2, 0.4, 0.8, 1.0];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn guikv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guikv"))
        .args(args)
        .output()
        .expect("spawn guikv")
}

pub fn guikv_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guikv"))
        .args(args)
        .env(key, value)
        .output()
        .expect("spawn guikv")
}

pub struct Instance {
    pub layout: PromptLayout,
    pub traces: Vec<LayerTrace>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the generator independent of the library's sampling
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Small random prompt: optional text around one to three frames whose
/// steps are shuffled so the current frame can sit anywhere. Some
/// previous-frame keys are linear combinations of current-frame keys.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..=3usize);
    let prefix = rng.random_range(0..=6usize);
    let suffix = rng.random_range(0..=6usize);
    let lens: Vec<usize> = (0..frames).map(|_| rng.random_range(2..=14usize)).collect();
    let mut steps: Vec<u32> = (0..frames as u32).collect();
    for i in (1..steps.len()).rev() {
        steps.swap(i, rng.random_range(0..=i));
    }
    let mut segments = Vec::new();
    let mut at = 0;
    if prefix > 0 {
        segments.push(Segment::text(0, prefix));
        at = prefix;
    }
    for (len, step) in lens.iter().zip(&steps) {
        segments.push(Segment::frame(at, at + len, *step));
        at += len;
    }
    if suffix > 0 {
        segments.push(Segment::text(at, at + suffix));
        at += suffix;
    }
    let n = at;
    let omega = rng.random_range(1..=4usize.min(n));
    let layout = PromptLayout::new(segments, omega).unwrap();

    let layers = rng.random_range(1..=4usize);
    let kv = rng.random_range(1..=4usize);
    let g = rng.random_range(1..=2usize);
    let d = rng.random_range(2..=8usize);
    let current = layout.current_frame_indices();
    let previous = layout.previous_frame_indices();
    let traces = (0..layers)
        .map(|l| {
            let keys: Vec<Matrix> = (0..kv)
                .map(|_| {
                    let mut data: Vec<f64> = (0..n * d).map(|_| normal(&mut rng)).collect();
                    for &i in &previous {
                        if rng.random::<f64>() < 0.3 {
                            let mut row = vec![0.0; d];
                            for &c in &current {
                                let w = normal(&mut rng) * 0.5;
                                for (x, y) in row.iter_mut().zip(&data[c * d..(c + 1) * d]) {
                                    *x += w * y;
                                }
                            }
                            data[i * d..(i + 1) * d].copy_from_slice(&row);
                        }
                    }
                    Matrix::from_vec(n, d, data).unwrap()
                })
                .collect();
            let queries: Vec<Matrix> = (0..kv * g)
                .map(|_| {
                    Matrix::from_vec(omega, d, (0..omega * d).map(|_| 1.5 * normal(&mut rng)).collect())
                        .unwrap()
                })
                .collect();
            let norms: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..4.0)).collect();
            LayerTrace::new(l, keys, queries, norms, None).unwrap()
        })
        .collect();
    Instance { layout, traces }
}

#[derive(Clone, Copy)]
pub struct OracleConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub rank: usize,
    pub pool: usize,
    pub use_saliency: bool,
    pub use_gate: bool,
}

fn budget(gamma: f64, n: usize) -> usize {
    let x = gamma * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Pooled observation attention for one KV head.
fn oracle_attention(t: &LayerTrace, layout: &PromptLayout, h: usize, pool: usize) -> Vec<f64> {
    let n = layout.n();
    let omega = layout.omega();
    let keys = t.keys(h);
    let d = keys.cols();
    let g = t.group_size();
    let mut col_sum = vec![0.0; n];
    for q in h * g..(h + 1) * g {
        let qs = t.obs_queries(q);
        for j in 0..omega {
            let visible = n - omega + j + 1;
            let logits: Vec<f64> = (0..visible)
                .map(|i| (0..d).map(|c| qs[(j, c)] * keys[(i, c)]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            for i in 0..visible {
                col_sum[i] += (logits[i] - m).exp() / z;
            }
        }
    }
    let mean: Vec<f64> = col_sum.iter().map(|s| s / omega as f64).collect();
    let mut out = mean.clone();
    let half = pool / 2;
    for seg in layout.segments().iter().filter(|s| s.is_visual()) {
        for i in seg.start..seg.end {
            let mut best = f64::MIN;
            for j in seg.start..seg.end {
                if j + half >= i && j <= i + half {
                    best = best.max(mean[j]);
                }
            }
            out[i] = best;
        }
    }
    out
}

fn oracle_saliency(norms: &[f64], layout: &PromptLayout, tau: f64) -> Vec<f64> {
    let mut s = vec![0.0; layout.n()];
    for seg in layout.segments().iter().filter(|s| s.is_visual()) {
        let r = &norms[seg.start..seg.end];
        let m = r.len() as f64;
        let mu = r.iter().sum::<f64>() / m;
        let sd = (r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / m).sqrt();
        let e: Vec<f64> = r.iter().map(|x| ((x - mu) / ((sd + 1e-8) * tau)).exp()).collect();
        let z: f64 = e.iter().sum();
        for (k, i) in (seg.start..seg.end).enumerate() {
            s[i] = e[k] / z;
        }
    }
    s
}

/// Orthogonal projector onto the span of the columns of `b` via SVD.
pub fn svd_projector(b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = b.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut p = DMatrix::zeros(b.nrows(), b.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-10 * smax.max(1.0) {
            let col = u.column(k);
            p += &col * col.transpose();
        }
    }
    p
}

/// Residuals of previous-frame keys against the first `min(r, d, n_t)`
/// current-frame keys.
pub fn oracle_residuals(t: &LayerTrace, layout: &PromptLayout, h: usize, rank: usize) -> Vec<(usize, f64)> {
    let keys = t.keys(h);
    let d = keys.cols();
    let current = layout.current_frame_indices();
    let used = rank.min(d).min(current.len());
    let b = DMatrix::from_fn(d, used, |r, c| keys[(current[c], r)]);
    let p = svd_projector(&b);
    layout
        .previous_frame_indices()
        .into_iter()
        .map(|i| {
            let k = DMatrix::from_fn(d, 1, |r, _| keys[(i, r)]);
            let resid = (&k - &p * &k).norm();
            let knorm = k.norm();
            (i, if resid < 1e-10 * knorm.max(1.0) { 0.0 } else { resid })
        })
        .collect()
}

/// Brute-force keep lists `[layer][kv_head]`.
pub fn oracle_select(inst: &Instance, cfg: OracleConfig) -> Vec<Vec<Vec<usize>>> {
    let layout = &inst.layout;
    let n = layout.n();
    let k = budget(cfg.gamma, n);
    inst.traces
        .iter()
        .map(|t| {
            (0..t.kv_heads())
                .map(|h| {
                    let mut score = oracle_attention(t, layout, h, cfg.pool);
                    if cfg.use_saliency {
                        let s = oracle_saliency(t.hidden_norms(), layout, cfg.tau);
                        for i in 0..n {
                            score[i] += cfg.alpha * s[i];
                        }
                    }
                    let has_previous = !layout.previous_frame_indices().is_empty();
                    if cfg.use_gate && has_previous {
                        let res = oracle_residuals(t, layout, h, cfg.rank);
                        let mut sorted: Vec<f64> = res.iter().map(|r| r.1).collect();
                        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let rank_idx = budget(1.0 - cfg.gamma, sorted.len()).max(1) - 1;
                        let threshold = sorted[rank_idx.min(sorted.len() - 1)];
                        for (i, rho) in res {
                            if rho < threshold {
                                score[i] = 0.0;
                            }
                        }
                    }
                    let top = score.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
                    for i in n - layout.omega()..n {
                        score[i] = top;
                    }
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap().then(a.cmp(&b)));
                    let mut kept = order[..k].to_vec();
                    kept.sort_unstable();
                    kept
                })
                .collect()
        })
        .collect()
}
