//! One entry point for every selection policy, GUI-KV variants and
//! baselines alike.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    pyramidkv_budgets, recency_select, select_with_plan, snapkv_select, uniform_budgets,
    vlcache_budgets, LayerBudgetPlan, DEFAULT_PYRAMID_BETA, DEFAULT_SINK_TOKENS,
};
use crate::cache_model::{CompressionConfig, KeepSet, LayerTrace, PromptLayout};
use crate::error::{Error, Result};
use crate::scoring::{compress_prompt, Method, ScoreSheet};
use crate::sparsity::{layer_sparsity_profile, DEFAULT_P};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    GuiKv,
    SpatialOnly,
    TemporalOnly,
    AttentionOnly,
    SnapKv,
    PyramidKv,
    VlCache,
    Recency,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::GuiKv,
        Policy::SpatialOnly,
        Policy::TemporalOnly,
        Policy::AttentionOnly,
        Policy::SnapKv,
        Policy::PyramidKv,
        Policy::VlCache,
        Policy::Recency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::GuiKv => "gui-kv",
            Policy::SpatialOnly => "spatial-only",
            Policy::TemporalOnly => "temporal-only",
            Policy::AttentionOnly => "attention-only",
            Policy::SnapKv => "snapkv",
            Policy::PyramidKv => "pyramidkv",
            Policy::VlCache => "vl-cache",
            Policy::Recency => "recency",
        }
    }

    pub fn scoring_method(self) -> Option<Method> {
        match self {
            Policy::GuiKv => Some(Method::GuiKv),
            Policy::SpatialOnly => Some(Method::SpatialOnly),
            Policy::TemporalOnly => Some(Method::TemporalOnly),
            Policy::AttentionOnly => Some(Method::AttentionOnly),
            _ => None,
        }
    }

    pub fn valid_names() -> String {
        Policy::ALL.map(Policy::as_str).join(", ")
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::param(
                    "method",
                    format!("unknown method `{s}`; valid: {}", Policy::valid_names()),
                )
            })
    }
}

/// Baseline knobs on top of [`CompressionConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub compression: CompressionConfig,
    pub pyramid_beta: f64,
    pub sink_tokens: usize,
    pub sparsity_p: f64,
}

impl PolicyConfig {
    pub fn new(compression: CompressionConfig) -> Self {
        Self {
            compression,
            pyramid_beta: DEFAULT_PYRAMID_BETA,
            sink_tokens: DEFAULT_SINK_TOKENS,
            sparsity_p: DEFAULT_P,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOutcome {
    pub keep: KeepSet,
    /// Only for the scoring variants.
    pub sheets: Vec<ScoreSheet>,
    /// Only for the layer-allocating baselines.
    pub plan: Option<LayerBudgetPlan>,
}

fn windowed<'a>(
    traces: &'a [LayerTrace],
    layout: &'a PromptLayout,
    omega: Option<usize>,
) -> Result<(Cow<'a, [LayerTrace]>, Cow<'a, PromptLayout>)> {
    match omega {
        Some(w) if w != layout.omega() => {
            let t = traces
                .iter()
                .map(|t| t.with_window(w))
                .collect::<Result<Vec<_>>>()?;
            Ok((Cow::Owned(t), Cow::Owned(layout.with_omega(w)?)))
        }
        _ => Ok((Cow::Borrowed(traces), Cow::Borrowed(layout))),
    }
}

pub fn run_policy(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    policy: Policy,
    config: &PolicyConfig,
) -> Result<PolicyOutcome> {
    let mut cc = config.compression.clone();
    cc.validate()?;
    let (traces, layout) = windowed(traces, layout, cc.omega)?;
    cc.omega = None;
    let gamma = cc.gamma;
    let n = layout.n();
    let omega = layout.omega();
    let outcome = |keep, plan| PolicyOutcome {
        keep,
        sheets: Vec::new(),
        plan,
    };
    match policy {
        Policy::SnapKv => Ok(outcome(
            snapkv_select(&traces, &layout, gamma, cc.pool_kernel)?,
            None,
        )),
        Policy::PyramidKv => {
            let plan = pyramidkv_budgets(traces.len(), n, gamma, config.pyramid_beta, omega)?;
            let keep = select_with_plan(&traces, &layout, &plan, gamma, cc.pool_kernel)?;
            Ok(outcome(keep, Some(plan)))
        }
        Policy::VlCache => {
            let profile = layer_sparsity_profile(&traces, &layout, config.sparsity_p)?;
            let plan = vlcache_budgets(&profile.layer_means(), n, gamma, omega)?;
            let keep = select_with_plan(&traces, &layout, &plan, gamma, cc.pool_kernel)?;
            Ok(outcome(keep, Some(plan)))
        }
        Policy::Recency => {
            let kv_heads = traces.first().map_or(0, |t| t.kv_heads());
            let keep = recency_select(&layout, gamma, config.sink_tokens, traces.len(), kv_heads)?;
            Ok(outcome(keep, None))
        }
        scoring => {
            let method = scoring.scoring_method().expect("scoring variant");
            let (keep, sheets) = compress_prompt(&traces, &layout, &cc, method)?;
            Ok(PolicyOutcome {
                keep,
                sheets,
                plan: None,
            })
        }
    }
}

/// Uniform plan for reporting alongside the allocating baselines.
pub fn uniform_plan(layers: usize, layout: &PromptLayout, gamma: f64) -> Result<LayerBudgetPlan> {
    uniform_budgets(layers, layout.n(), gamma, layout.omega())
}
