//! Analytic FLOPs accounting for decoding against a (compressed) cache and
//! for the one-off compression pass after prefill.
//!
//! A multiply-accumulate counts as 2 FLOPs, softmax and pooling work is
//! linear in the cells touched, and top-k comparisons count 1 each.

use serde::{Deserialize, Serialize};

use crate::cache_model::{gui_layout, PromptLayout};
use crate::error::{Error, Result};
use crate::numerics::ceil_fraction;

pub const REPORT_SCHEMA: &str = "guikv.flops.v1";

/// Linear per-cell cost of softmax, window averaging and pooling.
const SCORING_LINEAR_OPS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub tokens_per_screenshot: usize,
    pub text_token_count: usize,
}

impl ModelConfig {
    /// Small model whose token counts reproduce the reference decode costs
    /// for 3, 5 and 10 screenshots.
    pub fn calibrated() -> Self {
        Self {
            layers: 8,
            d_model: 896,
            query_heads: 28,
            kv_heads: 2,
            head_dim: 32,
            ffn_dim: 1280,
            vocab_size: 11200,
            tokens_per_screenshot: 1295,
            text_token_count: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("tokens_per_screenshot", self.tokens_per_screenshot),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(name, "must be positive"));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::param("query_heads", "must be divisible by kv_heads"));
        }
        Ok(())
    }

    pub fn sequence_length(&self, screenshots: usize) -> usize {
        self.text_token_count + screenshots * self.tokens_per_screenshot
    }

    /// Text split around the frames, keeping `omega` text tokens at the end
    /// when there are that many.
    pub fn layout(&self, screenshots: usize, omega: usize) -> Result<PromptLayout> {
        let suffix = omega.min(self.text_token_count);
        gui_layout(
            self.text_token_count - suffix,
            screenshots,
            self.tokens_per_screenshot,
            suffix,
            omega,
        )
    }

    fn dense_per_token(&self) -> f64 {
        let dm = self.d_model as f64;
        let kv_width = (2 * self.kv_heads * self.head_dim) as f64;
        let projections = 2.0 * dm * (dm + kv_width) + 2.0 * dm * dm;
        let mlp = 3.0 * 2.0 * dm * self.ffn_dim as f64;
        projections + mlp
    }

    fn head(&self) -> f64 {
        2.0 * self.d_model as f64 * self.vocab_size as f64
    }

    fn attention_per_cached_token(&self) -> f64 {
        4.0 * (self.query_heads * self.head_dim) as f64
    }
}

/// MFLOPs for one decoded token given each layer's cache size.
pub fn decode_flops_per_token(cfg: &ModelConfig, kept_per_layer: &[usize]) -> Result<f64> {
    if kept_per_layer.len() != cfg.layers {
        return Err(Error::ShapeMismatch(format!(
            "{} kept counts for {} layers",
            kept_per_layer.len(),
            cfg.layers
        )));
    }
    let per_layer: f64 = kept_per_layer
        .iter()
        .map(|&k| cfg.dense_per_token() + cfg.attention_per_cached_token() * k as f64)
        .sum();
    Ok((per_layer + cfg.head()) / 1e6)
}

/// Total FLOPs to prefill `n` tokens with full causal attention.
pub fn prefill_flops(cfg: &ModelConfig, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::param("n", "must be >= 1"));
    }
    let n = n as f64;
    let layers = cfg.layers as f64;
    Ok(layers * n * cfg.dense_per_token()
        + layers * cfg.attention_per_cached_token() * n * n
        + cfg.head())
}

/// Raw FLOPs of each compression stage, summed over layers and heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadComponents {
    pub attention_scoring: f64,
    pub qr: f64,
    pub projection: f64,
    pub topk: f64,
    pub gather: f64,
}

impl OverheadComponents {
    pub fn total(&self) -> f64 {
        self.attention_scoring + self.qr + self.projection + self.topk + self.gather
    }

    fn scaled(&self, by: f64) -> Self {
        Self {
            attention_scoring: self.attention_scoring * by,
            qr: self.qr * by,
            projection: self.projection * by,
            topk: self.topk * by,
            gather: self.gather * by,
        }
    }

    /// Each stage as a percentage of attention scoring.
    pub fn relative_to_scoring(&self) -> Self {
        self.scaled(100.0 / self.attention_scoring)
    }
}

pub fn compression_overhead(
    cfg: &ModelConfig,
    layout: &PromptLayout,
    rank_r: usize,
    gamma: f64,
) -> Result<OverheadComponents> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param("gamma", "budget must be in (0,1]"));
    }
    let n = layout.n() as f64;
    let omega = layout.omega() as f64;
    let n_t = layout.current_frame().map_or(0, |s| s.len());
    let layers = cfg.layers as f64;
    let qh = cfg.query_heads as f64;
    let kv = cfg.kv_heads as f64;
    let dh = cfg.head_dim as f64;
    let r = rank_r.min(cfg.head_dim).min(n_t) as f64;
    let previous = layout.n() - layout.omega().min(layout.n()) - n_t.min(layout.n());
    Ok(OverheadComponents {
        attention_scoring: 2.0 * omega * n * dh * qh * layers
            + SCORING_LINEAR_OPS * omega * n * qh * layers,
        qr: 2.0 * dh * dh * rank_r.min(n_t) as f64 * kv * layers,
        projection: 4.0 * dh * r * previous as f64 * kv * layers,
        topk: n * n.log2() * kv * layers,
        gather: ceil_fraction(gamma, layout.n()) as f64 * dh * 2.0 * kv * layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub schema: String,
    pub config: ModelConfig,
    pub screenshots: usize,
    pub gamma: f64,
    pub omega: usize,
    pub rank_r: usize,
    pub n: usize,
    pub kept_per_layer: usize,
    pub decode_full_mflops_per_token: f64,
    pub decode_mflops_per_token: f64,
    /// Negative when compression saves work.
    pub decode_change_pct: f64,
    pub prefill_gflops: f64,
    pub overhead_gflops: OverheadComponents,
    pub overhead_pct_of_scoring: OverheadComponents,
    pub overhead_total_gflops: f64,
    pub overhead_pct_of_prefill: f64,
}

/// Percentage change in decode cost when every layer keeps `⌈gamma·n⌉`.
pub fn decode_change_pct(cfg: &ModelConfig, screenshots: usize, gamma: f64) -> Result<f64> {
    let n = cfg.sequence_length(screenshots);
    let full = decode_flops_per_token(cfg, &vec![n; cfg.layers])?;
    let kept = decode_flops_per_token(cfg, &vec![ceil_fraction(gamma, n); cfg.layers])?;
    Ok(100.0 * (kept - full) / full)
}

pub fn flops_report(
    cfg: &ModelConfig,
    screenshots: usize,
    gamma: f64,
    omega: usize,
    rank_r: usize,
) -> Result<FlopsReport> {
    cfg.validate()?;
    if screenshots == 0 {
        return Err(Error::param("screenshots", "must be >= 1"));
    }
    let layout = cfg.layout(screenshots, omega)?;
    let n = layout.n();
    let kept = ceil_fraction(gamma, n);
    let full = decode_flops_per_token(cfg, &vec![n; cfg.layers])?;
    let compressed = decode_flops_per_token(cfg, &vec![kept; cfg.layers])?;
    let prefill = prefill_flops(cfg, n)?;
    let overhead = compression_overhead(cfg, &layout, rank_r, gamma)?;
    Ok(FlopsReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        screenshots,
        gamma,
        omega,
        rank_r,
        n,
        kept_per_layer: kept,
        decode_full_mflops_per_token: full,
        decode_mflops_per_token: compressed,
        decode_change_pct: 100.0 * (compressed - full) / full,
        prefill_gflops: prefill / 1e9,
        overhead_gflops: overhead.scaled(1e-9),
        overhead_pct_of_scoring: overhead.relative_to_scoring(),
        overhead_total_gflops: overhead.total() / 1e9,
        overhead_pct_of_prefill: 100.0 * overhead.total() / prefill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_mflops(cfg: &ModelConfig) -> f64 {
        decode_flops_per_token(cfg, &vec![0; cfg.layers]).unwrap()
    }

    #[test]
    fn decode_is_linear_in_cache() {
        let cfg = ModelConfig::calibrated();
        // 8 * (3_440_640 + 6_881_280) + 20_070_400
        assert_eq!(base_mflops(&cfg), 102.64576);
        let one = decode_flops_per_token(&cfg, &[100; 8]).unwrap() - base_mflops(&cfg);
        let two = decode_flops_per_token(&cfg, &[200; 8]).unwrap() - base_mflops(&cfg);
        assert!((two - 2.0 * one).abs() < 1e-9);
        assert!(decode_flops_per_token(&cfg, &[1; 3]).is_err());
    }

    #[test]
    fn prefill_scaling() {
        let cfg = ModelConfig::calibrated();
        let p1 = prefill_flops(&cfg, 1).unwrap();
        assert_eq!(p1, base_mflops(&cfg) * 1e6 + 8.0 * 4.0 * 28.0 * 32.0);
        let attn = |n| prefill_flops(&cfg, n).unwrap() - 8.0 * n as f64 * cfg.dense_per_token() - cfg.head();
        assert_eq!(attn(200), 4.0 * attn(100));
    }

    #[test]
    fn zero_rank_removes_temporal_terms() {
        let cfg = ModelConfig::calibrated();
        let layout = cfg.layout(3, 8).unwrap();
        let c = compression_overhead(&cfg, &layout, 0, 0.2).unwrap();
        assert_eq!((c.qr, c.projection), (0.0, 0.0));
        assert!(c.attention_scoring > 0.0);
    }

    #[test]
    fn savings_orderings() {
        let cfg = ModelConfig::calibrated();
        let s = |k, g| decode_change_pct(&cfg, k, g).unwrap();
        assert!(s(3, 0.2) > s(5, 0.2) && s(5, 0.2) > s(10, 0.2));
        assert!(s(5, 0.2) < s(5, 0.4) && s(5, 0.4) < s(5, 0.8));
    }

    #[test]
    fn layout_matches_sequence_length() {
        let cfg = ModelConfig::calibrated();
        let l = cfg.layout(5, 8).unwrap();
        assert_eq!(l.n(), cfg.sequence_length(5));
        assert_eq!(l.n(), 6491);
        assert_eq!(l.current_frame().unwrap().len(), 1295);
    }
}
