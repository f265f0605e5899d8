//! Reference eviction policies: uniform attention top-k, pyramid-shaped
//! and sparsity-normalized per-layer budgets, and a sink-plus-recency floor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache_model::{
    aggregate_attention, observation_attention, KeepSet, LayerTrace, PromptLayout,
};
use crate::error::{Error, Result};
use crate::numerics::{ceil_fraction, top_k_indices};
use crate::scoring::apply_window_sentinel;

pub const DEFAULT_PYRAMID_BETA: f64 = 20.0;
pub const DEFAULT_SINK_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationStrategy {
    Uniform,
    Pyramid,
    VlCache,
}

/// Kept-token count for every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBudgetPlan {
    pub budgets: Vec<usize>,
    pub total: usize,
    pub strategy: AllocationStrategy,
    /// Set when a sparsity-driven plan had nothing to go on and fell back
    /// to uniform.
    pub fallback_uniform: bool,
}

impl LayerBudgetPlan {
    fn from_budgets(budgets: Vec<usize>, strategy: AllocationStrategy) -> Self {
        Self {
            total: budgets.iter().sum(),
            budgets,
            strategy,
            fallback_uniform: false,
        }
    }
}

fn per_layer_budget(n: usize, gamma: f64, omega: usize) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param("gamma", "budget must be in (0,1]"));
    }
    let k = ceil_fraction(gamma, n);
    if k < omega {
        return Err(Error::BudgetBelowWindow { budget: k, omega });
    }
    Ok(k)
}

/// Clamps into `[lo, hi]`, then moves single tokens front-to-back (cycling)
/// until the sum hits `target` or no layer can move.
fn rebalance(budgets: &mut [usize], target: usize, lo: usize, hi: usize) {
    budgets.iter_mut().for_each(|b| *b = (*b).clamp(lo, hi));
    let mut sum: usize = budgets.iter().sum();
    while sum != target {
        let mut moved = false;
        for b in budgets.iter_mut() {
            if sum < target && *b < hi {
                *b += 1;
                sum += 1;
                moved = true;
            } else if sum > target && *b > lo {
                *b -= 1;
                sum -= 1;
                moved = true;
            }
            if sum == target {
                break;
            }
        }
        if !moved {
            break;
        }
    }
}

pub fn uniform_budgets(
    layers: usize,
    n: usize,
    gamma: f64,
    omega: usize,
) -> Result<LayerBudgetPlan> {
    let k = per_layer_budget(n, gamma, omega)?;
    Ok(LayerBudgetPlan::from_budgets(
        vec![k; layers],
        AllocationStrategy::Uniform,
    ))
}

/// Arithmetic sequence from `2k - b_last` down to `b_last = max(omega,
/// ⌈gamma·n/beta⌉)`, with `k = ⌈gamma·n⌉`; the plan total stays `L·k`.
pub fn pyramidkv_budgets(
    layers: usize,
    n: usize,
    gamma: f64,
    beta: f64,
    omega: usize,
) -> Result<LayerBudgetPlan> {
    if layers < 2 {
        return Err(Error::param("layers", "pyramid allocation needs >= 2 layers"));
    }
    if !(beta > 1.0) {
        return Err(Error::param("beta", "must be > 1"));
    }
    let k = per_layer_budget(n, gamma, omega)?;
    let last = omega.max(ceil_fraction(gamma / beta, n));
    let first = 2 * k - last;
    let step = (first as f64 - last as f64) / (layers - 1) as f64;
    let mut budgets: Vec<usize> = (0..layers)
        .map(|l| (first as f64 - step * l as f64).floor() as usize)
        .collect();
    let target = layers * k;
    rebalance(&mut budgets, target, omega, n);
    Ok(LayerBudgetPlan::from_budgets(budgets, AllocationStrategy::Pyramid))
}

/// Budgets proportional to per-layer attention density `1 - sparsity`.
pub fn vlcache_budgets(
    sparsity: &[f64],
    n: usize,
    gamma: f64,
    omega: usize,
) -> Result<LayerBudgetPlan> {
    if sparsity.is_empty() {
        return Err(Error::EmptyVector);
    }
    if sparsity.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::param("sparsity", "values must lie in [0, 1]"));
    }
    let layers = sparsity.len();
    let k = per_layer_budget(n, gamma, omega)?;
    let target = layers * k;
    let density: Vec<f64> = sparsity.iter().map(|s| 1.0 - s).collect();
    let total_density: f64 = density.iter().sum();
    if !(total_density > 0.0) {
        let mut plan = uniform_budgets(layers, n, gamma, omega)?;
        plan.strategy = AllocationStrategy::VlCache;
        plan.fallback_uniform = true;
        return Ok(plan);
    }
    let mut budgets: Vec<usize> = density
        .iter()
        .map(|d| (target as f64 * d / total_density).round() as usize)
        .collect();
    rebalance(&mut budgets, target, omega, n);
    Ok(LayerBudgetPlan::from_budgets(budgets, AllocationStrategy::VlCache))
}

/// Pooled observation attention with the window sentinel applied.
pub fn attention_scores(
    trace: &LayerTrace,
    layout: &PromptLayout,
    kv_head: usize,
    pool_kernel: Option<usize>,
) -> Result<Vec<f64>> {
    let a = observation_attention(trace, layout, kv_head)?;
    let mut scores = aggregate_attention(&a, layout, pool_kernel);
    apply_window_sentinel(&mut scores, layout);
    Ok(scores)
}

/// Attention top-k with a per-layer budget taken from `plan`.
pub fn select_with_plan(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    plan: &LayerBudgetPlan,
    gamma: f64,
    pool_kernel: Option<usize>,
) -> Result<KeepSet> {
    if plan.budgets.len() != traces.len() {
        return Err(Error::ShapeMismatch(format!(
            "plan has {} layers, trace has {}",
            plan.budgets.len(),
            traces.len()
        )));
    }
    let layers = traces
        .par_iter()
        .zip(&plan.budgets)
        .map(|(trace, &budget)| {
            trace.check_layout(layout)?;
            (0..trace.kv_heads())
                .map(|h| {
                    attention_scores(trace, layout, h, pool_kernel)
                        .map(|s| top_k_indices(&s, budget))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    KeepSet::new(layout, gamma, layers)
}

/// Same `⌈gamma·n⌉` budget at every layer and head, ranked by attention.
pub fn snapkv_select(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    gamma: f64,
    pool_kernel: Option<usize>,
) -> Result<KeepSet> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param("gamma", "budget must be in (0,1]"));
    }
    let plan = LayerBudgetPlan::from_budgets(
        vec![ceil_fraction(gamma, layout.n()); traces.len()],
        AllocationStrategy::Uniform,
    );
    select_with_plan(traces, layout, &plan, gamma, pool_kernel)
}

/// First `sink_count` tokens plus the most recent rest of the budget.
pub fn recency_indices(n: usize, gamma: f64, sink_count: usize) -> Vec<usize> {
    let k = ceil_fraction(gamma, n);
    if k <= sink_count {
        return (0..k).collect();
    }
    (0..sink_count).chain(n - (k - sink_count)..n).collect()
}

pub fn recency_select(
    layout: &PromptLayout,
    gamma: f64,
    sink_count: usize,
    layers: usize,
    kv_heads: usize,
) -> Result<KeepSet> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param("gamma", "budget must be in (0,1]"));
    }
    let kept = recency_indices(layout.n(), gamma, sink_count);
    KeepSet::new(layout, gamma, vec![vec![kept; kv_heads]; layers])
}
