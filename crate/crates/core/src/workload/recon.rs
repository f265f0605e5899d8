//! Attention-output error of a compressed cache against the full cache.

use serde::{Deserialize, Serialize};

use crate::cache_model::{KeepSet, LayerTrace, PromptLayout};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadError {
    pub layer: usize,
    pub kv_head: usize,
    pub mean: f64,
    pub max: f64,
}

/// `softmax(q K_S^T / sqrt(d)) V_S` over the rows in `subset`.
fn attend(q: &[f64], keys: &Matrix, values: &Matrix, subset: &[usize]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let logits: Vec<f64> = subset.iter().map(|&i| dot(q, keys.row(i)) / scale).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut out = vec![0.0; values.cols()];
    for (&i, w) in subset.iter().zip(&weights) {
        for (o, v) in out.iter_mut().zip(values.row(i)) {
            *o += w / z * v;
        }
    }
    out
}

/// Relative L2 error `|o_full - o_kept| / |o_full|` for each probe query,
/// summarized per KV head. `probes[h]` holds one query per row.
pub fn reconstruction_error(
    trace: &LayerTrace,
    layout: &PromptLayout,
    keep: &KeepSet,
    probes: &[Matrix],
) -> Result<Vec<HeadError>> {
    trace.check_layout(layout)?;
    let values = trace.values().ok_or(Error::MissingValues)?;
    if probes.len() != trace.kv_heads() {
        return Err(Error::ShapeMismatch(format!(
            "{} probe blocks for {} KV heads",
            probes.len(),
            trace.kv_heads()
        )));
    }
    if trace.layer >= keep.num_layers() || keep.num_heads(trace.layer) != trace.kv_heads() {
        return Err(Error::ShapeMismatch("keep set does not cover this layer".into()));
    }
    let all: Vec<usize> = (0..trace.n()).collect();
    (0..trace.kv_heads())
        .map(|h| {
            let keys = trace.keys(h);
            let kept = keep.kept(trace.layer, h);
            if probes[h].rows() == 0 || probes[h].cols() != trace.head_dim() {
                return Err(Error::ShapeMismatch("probe block shape".into()));
            }
            let errors: Vec<f64> = (0..probes[h].rows())
                .map(|j| {
                    let q = probes[h].row(j);
                    let full = attend(q, keys, &values[h], &all);
                    let comp = attend(q, keys, &values[h], kept);
                    let diff: Vec<f64> = full.iter().zip(&comp).map(|(a, b)| a - b).collect();
                    l2_norm(&diff) / l2_norm(&full)
                })
                .collect();
            Ok(HeadError {
                layer: trace.layer,
                kv_head: h,
                mean: errors.iter().sum::<f64>() / errors.len() as f64,
                max: errors.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Probe set built from the trace itself: every observation query of a
/// KV head's group, stacked.
pub fn window_probes(trace: &LayerTrace) -> Vec<Matrix> {
    (0..trace.kv_heads())
        .map(|h| {
            let rows: Vec<Vec<f64>> = trace
                .group(h)
                .flat_map(|q| {
                    let m = trace.obs_queries(q);
                    (0..m.rows()).map(|j| m.row(j).to_vec()).collect::<Vec<_>>()
                })
                .collect();
            Matrix::from_rows(&rows).expect("observation queries are finite")
        })
        .collect()
}

/// Per-head errors for every layer plus their grand mean.
pub fn prompt_reconstruction_error(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    keep: &KeepSet,
    probes: &[Vec<Matrix>],
) -> Result<(Vec<HeadError>, f64)> {
    if probes.len() != traces.len() {
        return Err(Error::ShapeMismatch("one probe set per layer required".into()));
    }
    let mut heads = Vec::new();
    for (t, p) in traces.iter().zip(probes) {
        heads.extend(reconstruction_error(t, layout, keep, p)?);
    }
    if heads.is_empty() {
        return Err(Error::EmptyVector);
    }
    let mean = heads.iter().map(|e| e.mean).sum::<f64>() / heads.len() as f64;
    Ok((heads, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::Segment;

    fn tiny() -> (LayerTrace, PromptLayout) {
        let layout = PromptLayout::new(vec![Segment::text(0, 4)], 1).unwrap();
        let keys = Matrix::from_rows(&[
            vec![40.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
            vec![0.0, 0.5],
        ])
        .unwrap();
        let values = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![5.0, 5.0],
            vec![-3.0, 1.0],
            vec![0.0, 7.0],
        ])
        .unwrap();
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let trace = LayerTrace::new(0, vec![keys], vec![q], vec![1.0; 4], Some(vec![values])).unwrap();
        (trace, layout)
    }

    #[test]
    fn full_budget_is_exact_and_one_hot_is_near_exact() {
        let (trace, layout) = tiny();
        let probe = vec![Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()];
        let all = KeepSet::new(&layout, 1.0, vec![vec![vec![0, 1, 2, 3]]]).unwrap();
        let e = reconstruction_error(&trace, &layout, &all, &probe).unwrap();
        assert_eq!(e[0].mean, 0.0);
        // logit gap 40 / sqrt(2) ≈ 28.3 leaves ~1e-12 of the mass elsewhere
        let hot = KeepSet::new(&layout, 0.25, vec![vec![vec![0, 3]]]).unwrap();
        let e = reconstruction_error(&trace, &layout, &hot, &probe).unwrap();
        assert!(e[0].max < 1e-9, "{}", e[0].max);
    }

    #[test]
    fn missing_values() {
        let (trace, layout) = tiny();
        let keep = KeepSet::new(&layout, 1.0, vec![vec![vec![0, 1, 2, 3]]]).unwrap();
        let probe = vec![Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()];
        let err = reconstruction_error(&trace.without_values(), &layout, &keep, &probe).unwrap_err();
        assert_eq!(err.to_string(), "trace lacks values");
    }
}
