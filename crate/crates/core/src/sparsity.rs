//! Relative-threshold attention sparsity over the observation window.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache_model::{is_causally_valid, query_head_attention, LayerTrace, PromptLayout};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_P: f64 = 0.01;
pub const PROFILE_SCHEMA: &str = "guikv.sparsity.v1";

/// Zeroes every entry below `p` times its row maximum.
pub fn threshold_filter(attention: &Matrix, p: f64) -> Result<Matrix> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param("p", "must lie in (0, 1)"));
    }
    let mut out = attention.clone();
    for j in 0..out.rows() {
        let row = out.row_mut(j);
        let cut = p * row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().filter(|x| **x < cut).for_each(|x| *x = 0.0);
    }
    Ok(out)
}

/// Fraction of zero entries among the causally valid cells of an
/// `omega x n` observation-attention matrix.
pub fn attention_sparsity(filtered: &Matrix, n: usize, omega: usize) -> Result<f64> {
    attention_sparsity_masked(filtered, |j, i| is_causally_valid(n, omega, j, i))
}

pub fn attention_sparsity_masked(
    filtered: &Matrix,
    valid: impl Fn(usize, usize) -> bool,
) -> Result<f64> {
    let mut cells = 0usize;
    let mut zeros = 0usize;
    for j in 0..filtered.rows() {
        for (i, &x) in filtered.row(j).iter().enumerate() {
            if valid(j, i) {
                cells += 1;
                if x == 0.0 {
                    zeros += 1;
                }
            }
        }
    }
    if cells == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(zeros as f64 / cells as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    /// One value per query head.
    pub heads: Vec<f64>,
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub schema: String,
    pub p: f64,
    pub omega: usize,
    pub n: usize,
    pub layers: Vec<LayerSparsity>,
}

impl SparsityProfile {
    pub fn layer_means(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mean).collect()
    }

    /// `layer,head,sparsity` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,sparsity\n");
        for l in &self.layers {
            for (h, s) in l.heads.iter().enumerate() {
                let _ = writeln!(out, "{},{},{:.9}", l.layer, h, s);
            }
        }
        out
    }

    /// Averages several profiles layer by layer, each trace weighted equally.
    pub fn average(profiles: &[SparsityProfile]) -> Result<SparsityProfile> {
        let first = profiles.first().ok_or(Error::EmptyVector)?;
        let shape = |p: &SparsityProfile| -> Vec<usize> {
            p.layers.iter().map(|l| l.heads.len()).collect()
        };
        if profiles.iter().any(|p| shape(p) != shape(first)) {
            return Err(Error::ShapeMismatch("profiles differ in layer/head shape".into()));
        }
        let k = profiles.len() as f64;
        let layers = first
            .layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let heads: Vec<f64> = (0..l.heads.len())
                    .map(|h| profiles.iter().map(|p| p.layers[li].heads[h]).sum::<f64>() / k)
                    .collect();
                summarize(l.layer, heads)
            })
            .collect();
        Ok(SparsityProfile {
            schema: PROFILE_SCHEMA.into(),
            p: first.p,
            omega: first.omega,
            n: first.n,
            layers,
        })
    }
}

fn summarize(layer: usize, heads: Vec<f64>) -> LayerSparsity {
    let mean = heads.iter().sum::<f64>() / heads.len().max(1) as f64;
    let min = heads.iter().copied().fold(f64::INFINITY, f64::min);
    LayerSparsity {
        layer,
        heads,
        mean,
        min,
    }
}

/// Sparsity of every query head at every layer.
pub fn layer_sparsity_profile(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    p: f64,
) -> Result<SparsityProfile> {
    let n = layout.n();
    let omega = layout.omega();
    let layers = traces
        .iter()
        .map(|trace| {
            let heads = (0..trace.query_heads())
                .map(|q| {
                    let a = query_head_attention(trace, layout, q)?;
                    attention_sparsity(&threshold_filter(&a, p)?, n, omega)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(trace.layer, heads))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsityProfile {
        schema: PROFILE_SCHEMA.into(),
        p,
        omega,
        n,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_examples() {
        let a = Matrix::from_rows(&[vec![0.5, 0.3, 0.2]]).unwrap();
        assert_eq!(threshold_filter(&a, 0.01).unwrap(), a);
        let a = Matrix::from_rows(&[vec![0.999, 0.0005, 0.0005]]).unwrap();
        let f = threshold_filter(&a, 0.01).unwrap();
        assert_eq!(f.row(0), &[0.999, 0.0, 0.0]);
        assert!(threshold_filter(&a, 0.0).is_err());
        assert!(threshold_filter(&a, 1.0).is_err());
    }

    #[test]
    fn sparsity_counting() {
        let full = Matrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        assert_eq!(attention_sparsity(&full, 3, 1).unwrap(), 0.0);
        // m = 4 valid entries per row, one-hot rows
        let hot = Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let s = attention_sparsity_masked(&hot, |_, _| true).unwrap();
        assert_eq!(s, 0.75);
        assert!(matches!(
            attention_sparsity_masked(&hot, |_, _| false),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn future_cells_are_not_counted() {
        // omega = 2, n = 3: row 0 sees cols 0..2, row 1 sees all three
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert!((attention_sparsity(&a, 3, 2).unwrap() - 3.0 / 5.0).abs() < 1e-15);
    }
}
