use serde::{Deserialize, Serialize};

use super::layout::PromptLayout;
use crate::error::{Error, Result};

/// Retained token indices per `(layer, kv_head)`, each list ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepSet {
    pub n: usize,
    pub omega: usize,
    pub budget_gamma: f64,
    layers: Vec<Vec<Vec<usize>>>,
}

impl KeepSet {
    pub fn new(
        layout: &PromptLayout,
        budget_gamma: f64,
        layers: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let n = layout.n();
        for heads in &layers {
            for kept in heads {
                if kept.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::ShapeMismatch(
                        "kept indices must be strictly ascending".into(),
                    ));
                }
                if kept.last().is_some_and(|&i| i >= n) {
                    return Err(Error::ShapeMismatch("kept index out of range".into()));
                }
            }
        }
        Ok(Self {
            n,
            omega: layout.omega(),
            budget_gamma,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn kept(&self, layer: usize, head: usize) -> &[usize] {
        &self.layers[layer][head]
    }

    pub fn kept_count(&self, layer: usize, head: usize) -> usize {
        self.layers[layer][head].len()
    }

    pub fn layers(&self) -> &[Vec<Vec<usize>>] {
        &self.layers
    }

    /// Every `(layer, head, kept)` triple in order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &[usize])> {
        self.layers.iter().enumerate().flat_map(|(l, heads)| {
            heads
                .iter()
                .enumerate()
                .map(move |(h, kept)| (l, h, kept.as_slice()))
        })
    }

    pub fn total_kept(&self) -> usize {
        self.iter().map(|(_, _, k)| k.len()).sum()
    }

    /// Whether every head keeps all of the last `omega` tokens.
    pub fn retains_window(&self) -> bool {
        let start = self.n - self.omega;
        self.iter().all(|(_, _, kept)| {
            let tail = &kept[kept.partition_point(|&i| i < start)..];
            tail.len() == self.omega
        })
    }

    /// Number of indices kept by both `self` and `other` at one head.
    pub fn overlap(&self, other: &KeepSet, layer: usize, head: usize) -> usize {
        let (a, b) = (self.kept(layer, head), other.kept(layer, head));
        let (mut i, mut j, mut both) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    both += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        both
    }
}
