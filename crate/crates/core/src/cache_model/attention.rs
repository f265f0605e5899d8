//! Observation-window attention and its per-token aggregate.

use super::layout::PromptLayout;
use super::trace::LayerTrace;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// Exclusive end of the key range visible to observation row `row`: the
/// row sits at absolute position `n - omega + row` and sees everything up
/// to and including itself.
#[inline]
pub fn causal_limit(n: usize, omega: usize, row: usize) -> usize {
    n - omega + row + 1
}

#[inline]
pub fn is_causally_valid(n: usize, omega: usize, row: usize, col: usize) -> bool {
    col < causal_limit(n, omega, row)
}

/// `omega x n` attention probabilities of one query head. Each row is a
/// softmax over its causal prefix; later positions are exactly zero.
pub fn query_head_attention(
    trace: &LayerTrace,
    layout: &PromptLayout,
    query_head: usize,
) -> Result<Matrix> {
    trace.check_layout(layout)?;
    if query_head >= trace.query_heads() {
        return Err(Error::ShapeMismatch(format!(
            "query head {query_head} of {}",
            trace.query_heads()
        )));
    }
    let n = layout.n();
    let omega = layout.omega();
    let keys = trace.keys(query_head / trace.group_size());
    let queries = trace.obs_queries(query_head);
    let scale = 1.0 / (trace.head_dim() as f64).sqrt();

    let mut out = Matrix::zeros(omega, n);
    let mut logits = Vec::with_capacity(n);
    for j in 0..omega {
        let q = queries.row(j);
        let limit = causal_limit(n, omega, j);
        logits.clear();
        logits.extend((0..limit).map(|i| dot(q, keys.row(i)) * scale));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = out.row_mut(j);
        let mut sum = 0.0;
        for (o, &l) in row.iter_mut().zip(&logits) {
            *o = (l - max).exp();
            sum += *o;
        }
        row[..limit].iter_mut().for_each(|o| *o /= sum);
    }
    Ok(out)
}

/// Attention from the observation window to every token, summed over the
/// query heads that share `kv_head`.
pub fn observation_attention(
    trace: &LayerTrace,
    layout: &PromptLayout,
    kv_head: usize,
) -> Result<Matrix> {
    if kv_head >= trace.kv_heads() {
        return Err(Error::ShapeMismatch(format!(
            "kv head {kv_head} of {}",
            trace.kv_heads()
        )));
    }
    let mut total = Matrix::zeros(layout.omega(), layout.n());
    for q in trace.group(kv_head) {
        let a = query_head_attention(trace, layout, q)?;
        for j in 0..a.rows() {
            for (t, x) in total.row_mut(j).iter_mut().zip(a.row(j)) {
                *t += x;
            }
        }
    }
    Ok(total)
}

/// Column mean over observation rows, optionally max-pooled (stride 1,
/// same padding) inside each visual segment. Text tokens are never pooled
/// and windows never cross a segment boundary.
pub fn aggregate_attention(
    attention: &Matrix,
    layout: &PromptLayout,
    pool_kernel: Option<usize>,
) -> Vec<f64> {
    let rows = attention.rows().max(1) as f64;
    let mut mean = vec![0.0; attention.cols()];
    for j in 0..attention.rows() {
        for (m, x) in mean.iter_mut().zip(attention.row(j)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);

    let Some(kernel) = pool_kernel.filter(|&k| k > 1) else {
        return mean;
    };
    let half = kernel / 2;
    let mut pooled = mean.clone();
    for seg in layout.visual_segments() {
        for i in seg.indices() {
            let lo = i.saturating_sub(half).max(seg.start);
            let hi = (i + half + 1).min(seg.end);
            pooled[i] = mean[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    pooled
}
