//! Spatio-temporal token scoring and per-head budget selection.
//!
//! For each KV head the score of token `i` is
//!
//! * `A_i + alpha * S_i` for current-frame tokens,
//! * `(A_i + alpha * S_i) * [rho_i >= threshold]` for previous-frame tokens,
//! * `A_i` for text,
//!
//! where `A` is pooled observation attention, `S` is a per-frame softmax of
//! standardized hidden-state norms, and `rho` is the residual of a
//! previous-frame key after projection onto the span of the current frame's
//! keys. The observation window is always ranked first, then the top
//! `⌈gamma·n⌉` tokens are kept.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache_model::{
    aggregate_attention, observation_attention, CompressionConfig, KeepSet, LayerTrace,
    PromptLayout,
};
use crate::error::{Error, Result};
use crate::numerics::{
    ceil_fraction, l2_norm, nearest_rank_percentile, project_residual_norms, softmax_temp, standardize,
    thin_qr, top_k_indices,
};

/// Scoring variant. The three reduced forms switch off one or both of the
/// saliency term and the temporal gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GuiKv,
    SpatialOnly,
    TemporalOnly,
    AttentionOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::GuiKv,
        Method::SpatialOnly,
        Method::TemporalOnly,
        Method::AttentionOnly,
    ];

    pub fn uses_saliency(self) -> bool {
        matches!(self, Method::GuiKv | Method::SpatialOnly)
    }

    pub fn uses_temporal_gate(self) -> bool {
        matches!(self, Method::GuiKv | Method::TemporalOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GuiKv => "gui-kv",
            Method::SpatialOnly => "spatial-only",
            Method::TemporalOnly => "temporal-only",
            Method::AttentionOnly => "attention-only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::param("method", format!("unknown scoring method `{s}`")))
    }
}

/// Per-head score components, kept for inspection and export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub layer: usize,
    pub kv_head: usize,
    /// Pooled observation attention, length `n`.
    pub attention: Vec<f64>,
    /// `alpha * S_i`, zero on text tokens.
    pub saliency: Vec<f64>,
    /// Previous-frame token indices that `redundancy` is aligned with.
    pub previous_indices: Vec<usize>,
    pub redundancy: Vec<f64>,
    pub threshold: Option<f64>,
    /// Columns in the current-frame key basis after rank clamping.
    pub basis_cols: usize,
    /// Final scores with the observation window set to the sentinel.
    pub final_scores: Vec<f64>,
}

/// Saliency over one set of visual tokens: softmax of standardized norms.
pub fn spatial_saliency(
    hidden_norms: &[f64],
    visual_indices: &[usize],
    tau: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if visual_indices.is_empty() {
        return Ok(Vec::new());
    }
    let r: Vec<f64> = visual_indices.iter().map(|&i| hidden_norms[i]).collect();
    softmax_temp(&standardize(&r, epsilon)?, tau)
}

/// Saliency for every token: each visual frame gets its own distribution
/// over its own tokens; text tokens are zero.
pub fn frame_saliency(
    layout: &PromptLayout,
    hidden_norms: &[f64],
    tau: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut s = vec![0.0; layout.n()];
    for seg in layout.visual_segments() {
        let idx: Vec<usize> = seg.indices().collect();
        let frame = spatial_saliency(hidden_norms, &idx, tau, epsilon)?;
        s[seg.indices()].copy_from_slice(&frame);
    }
    Ok(s)
}

/// `A_i + alpha * S_i` on the current frame, `A_i` everywhere else.
/// `current_saliency` is indexed over the current frame's tokens.
pub fn combined_spatial_score(
    attention: &[f64],
    current_saliency: &[f64],
    alpha: f64,
    layout: &PromptLayout,
) -> Result<Vec<f64>> {
    let mut psi = attention.to_vec();
    if let Some(cur) = layout.current_frame() {
        if current_saliency.len() != cur.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} saliency values for a {}-token current frame",
                current_saliency.len(),
                cur.len()
            )));
        }
        for (i, s) in cur.indices().zip(current_saliency) {
            psi[i] += alpha * s;
        }
    }
    Ok(psi)
}

/// Residual norms of previous-frame keys against the current frame.
/// Relative residual below which a key counts as lying in the span.
pub const RESIDUAL_SNAP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Redundancy {
    pub indices: Vec<usize>,
    pub rho: Vec<f64>,
    pub basis_cols: usize,
}

pub fn temporal_redundancy(
    trace: &LayerTrace,
    layout: &PromptLayout,
    kv_head: usize,
    rank_r: usize,
) -> Result<Redundancy> {
    let current = layout.current_frame_indices();
    if current.is_empty() {
        return Err(Error::NoCurrentFrame);
    }
    let keys = trace.keys(kv_head);
    let basis = thin_qr(&keys.select_rows(&current).transpose(), rank_r)?;
    let indices = layout.previous_frame_indices();
    let rho = if indices.is_empty() {
        Vec::new()
    } else {
        let mut rho = project_residual_norms(&keys.select_rows(&indices), &basis)?;
        // residuals at rounding-noise level are exactly in span
        for (r, &i) in rho.iter_mut().zip(&indices) {
            if *r < RESIDUAL_SNAP * l2_norm(keys.row(i)).max(1.0) {
                *r = 0.0;
            }
        }
        rho
    };
    Ok(Redundancy {
        indices,
        rho,
        basis_cols: basis.cols(),
    })
}

/// Gate threshold: the `(1 - gamma)` nearest-rank percentile of `rho`.
/// Fails with [`Error::NoPreviousFrameTokens`] when `rho` is empty; callers
/// skip gating in that case.
pub fn redundancy_threshold(rho: &[f64], gamma: f64) -> Result<f64> {
    nearest_rank_percentile(rho, (1.0 - gamma).clamp(0.0, 1.0))
}

/// Composes the final per-token scores and applies the window sentinel.
///
/// `saliency` is the raw per-token `S` (from [`frame_saliency`]); `gate`
/// carries previous-frame residuals with their threshold, or `None` to
/// leave previous frames ungated.
pub fn final_scores(
    attention: &[f64],
    saliency: &[f64],
    gate: Option<(&Redundancy, f64)>,
    alpha: f64,
    layout: &PromptLayout,
) -> Vec<f64> {
    let mut psi = attention.to_vec();
    for seg in layout.visual_segments() {
        for i in seg.indices() {
            psi[i] += alpha * saliency[i];
        }
    }
    if let Some((red, threshold)) = gate {
        for (&i, &rho) in red.indices.iter().zip(&red.rho) {
            if rho < threshold {
                psi[i] = 0.0;
            }
        }
    }
    apply_window_sentinel(&mut psi, layout);
    psi
}

/// Sets the observation window to one above the largest score so it always
/// ranks first.
pub fn apply_window_sentinel(scores: &mut [f64], layout: &PromptLayout) {
    let sentinel = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    scores[layout.window()].iter_mut().for_each(|s| *s = sentinel);
}

/// Top `⌈gamma·n⌉` indices, ascending.
pub fn select_per_head(final_scores: &[f64], gamma: f64) -> Vec<usize> {
    top_k_indices(final_scores, ceil_fraction(gamma, final_scores.len()))
}

fn effective_inputs(
    trace: &LayerTrace,
    layout: &PromptLayout,
    config: &CompressionConfig,
) -> Result<(Option<LayerTrace>, Option<PromptLayout>)> {
    match config.omega {
        Some(w) if w != layout.omega() => {
            Ok((Some(trace.with_window(w)?), Some(layout.with_omega(w)?)))
        }
        _ => Ok((None, None)),
    }
}

/// Scores one KV head and picks its keep list.
pub fn score_head(
    trace: &LayerTrace,
    layout: &PromptLayout,
    config: &CompressionConfig,
    method: Method,
    kv_head: usize,
) -> Result<(Vec<usize>, ScoreSheet)> {
    let attn = observation_attention(trace, layout, kv_head)?;
    let attention = aggregate_attention(&attn, layout, config.pool_kernel);

    let alpha = if method.uses_saliency() {
        config.alpha
    } else {
        0.0
    };
    let s = if alpha > 0.0 {
        frame_saliency(layout, trace.hidden_norms(), config.tau, config.epsilon)?
    } else {
        vec![0.0; layout.n()]
    };

    let mut redundancy = None;
    let mut threshold = None;
    if method.uses_temporal_gate() && layout.previous_frames().next().is_some() {
        let red = temporal_redundancy(trace, layout, kv_head, config.rank_r)?;
        threshold = Some(redundancy_threshold(&red.rho, config.gamma)?);
        redundancy = Some(red);
    }

    let final_scores = final_scores(
        &attention,
        &s,
        redundancy.as_ref().zip(threshold),
        alpha,
        layout,
    );
    let kept = select_per_head(&final_scores, config.gamma);

    let red = redundancy.unwrap_or(Redundancy {
        indices: Vec::new(),
        rho: Vec::new(),
        basis_cols: 0,
    });
    let sheet = ScoreSheet {
        layer: trace.layer,
        kv_head,
        attention,
        saliency: s.iter().map(|x| alpha * x).collect(),
        previous_indices: red.indices,
        redundancy: red.rho,
        threshold,
        basis_cols: red.basis_cols,
        final_scores,
    };
    Ok((kept, sheet))
}

/// All KV heads of one layer.
pub fn compress_layer(
    trace: &LayerTrace,
    layout: &PromptLayout,
    config: &CompressionConfig,
    method: Method,
) -> Result<(Vec<Vec<usize>>, Vec<ScoreSheet>)> {
    config.validate()?;
    let (t, l) = effective_inputs(trace, layout, config)?;
    let trace = t.as_ref().unwrap_or(trace);
    let layout = l.as_ref().unwrap_or(layout);
    trace.check_layout(layout)?;
    let per_head = (0..trace.kv_heads())
        .into_par_iter()
        .map(|h| score_head(trace, layout, config, method, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_head.into_iter().unzip())
}

/// Compresses every layer. Layers and heads are scored in parallel; the
/// output is identical to sequential execution.
pub fn compress_prompt(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    config: &CompressionConfig,
    method: Method,
) -> Result<(KeepSet, Vec<ScoreSheet>)> {
    config.validate()?;
    let per_layer = traces
        .par_iter()
        .map(|t| compress_layer(t, layout, config, method))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(per_layer.len());
    let mut sheets = Vec::new();
    for (kept, s) in per_layer {
        layers.push(kept);
        sheets.extend(s);
    }
    let layout = match config.omega {
        Some(w) => layout.with_omega(w)?,
        None => layout.clone(),
    };
    Ok((KeepSet::new(&layout, config.gamma, layers)?, sheets))
}
