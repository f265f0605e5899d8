//! Seeded synthetic GUI trajectories.
//!
//! Frames are laid out oldest first between a text prefix and a text
//! suffix; the suffix holds the observation window. In every frame after
//! the first, an `overlap_eta` share of positions copy key, value, norm and
//! flags from the same position one frame earlier, plus Gaussian noise.
//!
//! Two kinds of special token:
//!
//! * hot tokens carry a long key and are what the observation queries look
//!   at, so window attention is close to one-hot;
//! * register tokens carry a long key and a large hidden norm but are never
//!   looked at by the window. Probe queries look at both kinds.
//!
//! All stored numbers are rounded to `f32` so a trace survives a file round
//! trip unchanged.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache_model::{gui_layout, LayerTrace, PromptLayout};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub layers: usize,
    pub kv_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
    /// Total screenshots, current one included.
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub text_prefix: usize,
    pub text_suffix: usize,
    pub omega: usize,
    pub overlap_eta: f64,
    pub noise_sigma: f64,
    pub register_fraction: f64,
    pub register_norm_scale: f64,
    pub concentration: f64,
    /// Long keys have norm `hot_key_scale * sqrt(d_h)`.
    pub hot_key_scale: f64,
    /// Length of the target direction in window and probe queries.
    pub query_gain: f64,
    pub query_noise: f64,
    pub probes_per_head: usize,
    pub with_values: bool,
    pub seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            layers: 4,
            kv_heads: 2,
            group_size: 2,
            head_dim: 64,
            frames: 5,
            tokens_per_frame: 32,
            text_prefix: 16,
            text_suffix: 8,
            omega: 8,
            overlap_eta: 0.7,
            noise_sigma: 0.05,
            register_fraction: 0.05,
            register_norm_scale: 6.0,
            concentration: 0.01,
            hot_key_scale: 3.0,
            query_gain: 4.0,
            query_noise: 0.02,
            probes_per_head: 16,
            with_values: true,
            seed: 0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("kv_heads", self.kv_heads),
            ("group_size", self.group_size),
            ("head_dim", self.head_dim),
            ("frames", self.frames),
            ("tokens_per_frame", self.tokens_per_frame),
            ("omega", self.omega),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(name, "must be positive"));
        }
        let fractions = [
            ("eta", self.overlap_eta),
            ("register_fraction", self.register_fraction),
            ("concentration", self.concentration),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} is outside [0, 1]")));
            }
        }
        let nonneg = [
            ("noise_sigma", self.noise_sigma),
            ("query_noise", self.query_noise),
            ("hot_key_scale", self.hot_key_scale),
            ("query_gain", self.query_gain),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be finite and >= 0"));
            }
        }
        if !(self.register_norm_scale > 0.0 && self.register_norm_scale.is_finite()) {
            return Err(Error::param("register_norm_scale", "must be positive"));
        }
        if self.text_suffix < self.omega {
            return Err(Error::param(
                "text_suffix",
                format!("must hold the observation window ({} tokens)", self.omega),
            ));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.text_prefix + self.frames * self.tokens_per_frame + self.text_suffix
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub params: TrajectoryParams,
    pub layout: PromptLayout,
    pub traces: Vec<LayerTrace>,
    /// `probes[layer][kv_head]`, one query per row.
    pub probes: Vec<Vec<Matrix>>,
    pub registers: Vec<usize>,
    /// Hot tokens per layer.
    pub hot: Vec<Vec<usize>>,
}

#[derive(Clone, Copy)]
struct TokenOrigin {
    /// Position this token copies from, if any.
    source: Option<usize>,
    register: bool,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Which positions are copies and which visual tokens are registers.
fn token_origins(p: &TrajectoryParams, rng: &mut ChaCha8Rng) -> Vec<TokenOrigin> {
    let n = p.n();
    let mut origins = vec![
        TokenOrigin {
            source: None,
            register: false,
        };
        n
    ];
    let copies = (p.overlap_eta * p.tokens_per_frame as f64).round() as usize;
    for f in 0..p.frames {
        let start = p.text_prefix + f * p.tokens_per_frame;
        for j in 0..p.tokens_per_frame {
            origins[start + j].register = rng.random::<f64>() < p.register_fraction;
        }
        if f == 0 {
            continue;
        }
        for j in sample(rng, p.tokens_per_frame, copies) {
            let src = start + j - p.tokens_per_frame;
            origins[start + j] = TokenOrigin {
                source: Some(src),
                register: origins[src].register,
            };
        }
    }
    origins
}

/// Fresh row or a noisy copy of an earlier row, in token order.
fn fill_rows(
    m: &mut Matrix,
    origins: &[TokenOrigin],
    sigma: f64,
    long: &[bool],
    long_norm: f64,
    rng: &mut ChaCha8Rng,
) {
    let d = m.cols();
    for i in 0..m.rows() {
        let row: Vec<f64> = match origins[i].source {
            Some(src) => m.row(src).iter().map(|x| x + sigma * gaussian(rng)).collect(),
            None => {
                let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
                if long[i] {
                    unit(&v).iter().map(|x| x * long_norm).collect()
                } else {
                    v
                }
            }
        };
        for (dst, x) in m.row_mut(i).iter_mut().zip(row) {
            *dst = round32(x);
        }
    }
}

fn aimed_query(key: &[f64], gain: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    unit(key)
        .iter()
        .map(|x| round32(gain * x + noise * gaussian(rng)))
        .collect()
}

pub fn gen_trajectory(params: &TrajectoryParams) -> Result<Trajectory> {
    params.validate()?;
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let layout = gui_layout(
        p.text_prefix,
        p.frames,
        p.tokens_per_frame,
        p.text_suffix,
        p.omega,
    )?;
    let n = layout.n();
    let d = p.head_dim;
    let long_norm = p.hot_key_scale * (d as f64).sqrt();
    let origins = token_origins(p, &mut rng);
    let registers: Vec<usize> = (0..n).filter(|&i| origins[i].register).collect();
    let window_start = layout.window_start();
    let norm_dist = LogNormal::new(0.0, 0.25).expect("valid lognormal");

    let mut traces = Vec::with_capacity(p.layers);
    let mut probes = Vec::with_capacity(p.layers);
    let mut hot_per_layer = Vec::with_capacity(p.layers);
    for layer in 0..p.layers {
        // hot flags are drawn for fresh tokens and inherited by copies
        let mut hot = vec![false; n];
        for i in 0..window_start {
            hot[i] = match origins[i].source {
                Some(src) => hot[src],
                None => !origins[i].register && rng.random::<f64>() < p.concentration,
            };
        }
        if !hot.iter().any(|&h| h) {
            let fresh: Vec<usize> = (0..window_start)
                .filter(|&i| origins[i].source.is_none() && !origins[i].register)
                .collect();
            if let Some(&i) = fresh.get(rng.random_range(0..fresh.len().max(1))) {
                hot[i] = true;
                for j in i + 1..window_start {
                    if origins[j].source.is_some_and(|s| hot[s]) {
                        hot[j] = true;
                    }
                }
            }
        }
        let hot_idx: Vec<usize> = (0..n).filter(|&i| hot[i]).collect();
        let long: Vec<bool> = (0..n).map(|i| hot[i] || origins[i].register).collect();

        let mut norms = vec![0.0; n];
        for i in 0..n {
            norms[i] = match origins[i].source {
                Some(src) => norms[src],
                None => {
                    let base: f64 = norm_dist.sample(&mut rng);
                    let scale = if origins[i].register {
                        p.register_norm_scale
                    } else {
                        1.0
                    };
                    round32(base * scale)
                }
            };
        }

        let mut keys = Vec::with_capacity(p.kv_heads);
        let mut values = Vec::with_capacity(p.kv_heads);
        for _ in 0..p.kv_heads {
            let mut k = Matrix::zeros(n, d);
            fill_rows(&mut k, &origins, p.noise_sigma, &long, long_norm, &mut rng);
            keys.push(k);
            let mut v = Matrix::zeros(n, d);
            fill_rows(&mut v, &origins, p.noise_sigma, &vec![false; n], 0.0, &mut rng);
            values.push(v);
        }

        let mut obs = Vec::with_capacity(p.kv_heads * p.group_size);
        for h in 0..p.kv_heads {
            for _ in 0..p.group_size {
                let mut q = Matrix::zeros(p.omega, d);
                for j in 0..p.omega {
                    let target = hot_idx[rng.random_range(0..hot_idx.len())];
                    let row = aimed_query(keys[h].row(target), p.query_gain, p.query_noise, &mut rng);
                    q.row_mut(j).copy_from_slice(&row);
                }
                obs.push(q);
            }
        }

        let targets: Vec<usize> = (0..n).filter(|&i| long[i]).collect();
        let layer_probes = keys
            .iter()
            .map(|k| {
                let mut m = Matrix::zeros(p.probes_per_head, d);
                for j in 0..p.probes_per_head {
                    let t = targets[rng.random_range(0..targets.len())];
                    let row = aimed_query(k.row(t), p.query_gain, p.query_noise, &mut rng);
                    m.row_mut(j).copy_from_slice(&row);
                }
                m
            })
            .collect();

        let values = p.with_values.then_some(values);
        traces.push(LayerTrace::new(layer, keys, obs, norms, values)?);
        probes.push(layer_probes);
        hot_per_layer.push(hot_idx);
    }
    Ok(Trajectory {
        params: params.clone(),
        layout,
        traces,
        probes,
        registers,
        hot: hot_per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::temporal_redundancy;

    fn small(seed: u64) -> TrajectoryParams {
        TrajectoryParams {
            layers: 2,
            frames: 3,
            tokens_per_frame: 16,
            seed,
            ..TrajectoryParams::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_trajectory(&small(3)).unwrap();
        let b = gen_trajectory(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = gen_trajectory(&small(4)).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn full_overlap_without_noise_is_fully_redundant() {
        let t = gen_trajectory(&TrajectoryParams {
            overlap_eta: 1.0,
            noise_sigma: 0.0,
            ..small(1)
        })
        .unwrap();
        for trace in &t.traces {
            for h in 0..trace.kv_heads() {
                let red = temporal_redundancy(trace, &t.layout, h, 32).unwrap();
                assert_eq!(red.rho.len(), 32);
                assert!(red.rho.iter().all(|&r| r < 1e-9), "{:?}", red.rho);
            }
        }
    }

    #[test]
    fn shapes_and_flags() {
        let p = small(9);
        let t = gen_trajectory(&p).unwrap();
        assert_eq!(t.layout.n(), p.n());
        assert_eq!(t.traces.len(), 2);
        assert!(t.traces.iter().all(|tr| tr.has_values() && tr.group_size() == 2));
        assert!(t.hot.iter().all(|h| !h.is_empty()));
        assert!(t.hot.iter().flatten().all(|&i| i < t.layout.window_start()));
        assert_eq!(t.probes[1][0].rows(), p.probes_per_head);
    }

    #[test]
    fn rejects_bad_params() {
        let err = gen_trajectory(&TrajectoryParams {
            overlap_eta: 1.5,
            ..small(0)
        })
        .unwrap_err();
        assert!(err.to_string().contains("eta"));
        assert!(gen_trajectory(&TrajectoryParams {
            text_suffix: 2,
            ..small(0)
        })
        .is_err());
    }
}
