use serde::{Deserialize, Serialize};

use super::layout::PromptLayout;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Everything the scorers need from one transformer layer.
///
/// `keys[h]` is `n x d_h` for KV head `h`; `obs_queries[q]` is `omega x d_h`
/// for query head `q`, where query heads `h*G .. (h+1)*G` share KV head `h`.
/// `hidden_norms[i]` is the L2 norm of token `i`'s pre-attention residual
/// stream at this layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    group_size: usize,
    keys: Vec<Matrix>,
    obs_queries: Vec<Matrix>,
    hidden_norms: Vec<f64>,
    values: Option<Vec<Matrix>>,
}

impl LayerTrace {
    pub fn new(
        layer: usize,
        keys: Vec<Matrix>,
        obs_queries: Vec<Matrix>,
        hidden_norms: Vec<f64>,
        values: Option<Vec<Matrix>>,
    ) -> Result<Self> {
        let kv_heads = keys.len();
        if kv_heads == 0 {
            return Err(Error::ShapeMismatch("layer trace has no KV heads".into()));
        }
        if obs_queries.is_empty() || obs_queries.len() % kv_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} query heads cannot be grouped over {kv_heads} KV heads",
                obs_queries.len()
            )));
        }
        let n = keys[0].rows();
        let d = keys[0].cols();
        if keys.iter().any(|k| k.rows() != n || k.cols() != d) {
            return Err(Error::ShapeMismatch("KV heads disagree on key shape".into()));
        }
        let omega = obs_queries[0].rows();
        if obs_queries.iter().any(|q| q.rows() != omega || q.cols() != d) {
            return Err(Error::ShapeMismatch(
                "observation queries disagree on shape".into(),
            ));
        }
        if hidden_norms.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} hidden norms for {n} tokens",
                hidden_norms.len()
            )));
        }
        if hidden_norms.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::NonFinite("hidden norms (must be finite and >= 0)"));
        }
        if let Some(vals) = &values {
            if vals.len() != kv_heads || vals.iter().any(|v| v.rows() != n || v.cols() != d) {
                return Err(Error::ShapeMismatch("value block shape".into()));
            }
        }
        let group_size = obs_queries.len() / kv_heads;
        Ok(Self {
            layer,
            group_size,
            keys,
            obs_queries,
            hidden_norms,
            values,
        })
    }

    pub fn kv_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn query_heads(&self) -> usize {
        self.obs_queries.len()
    }

    /// Query heads per KV head (`G`).
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn head_dim(&self) -> usize {
        self.keys[0].cols()
    }

    pub fn n(&self) -> usize {
        self.keys[0].rows()
    }

    pub fn omega(&self) -> usize {
        self.obs_queries[0].rows()
    }

    pub fn keys(&self, kv_head: usize) -> &Matrix {
        &self.keys[kv_head]
    }

    pub fn all_keys(&self) -> &[Matrix] {
        &self.keys
    }

    pub fn obs_queries(&self, query_head: usize) -> &Matrix {
        &self.obs_queries[query_head]
    }

    pub fn all_obs_queries(&self) -> &[Matrix] {
        &self.obs_queries
    }

    /// Query heads that read from `kv_head`.
    pub fn group(&self, kv_head: usize) -> std::ops::Range<usize> {
        kv_head * self.group_size..(kv_head + 1) * self.group_size
    }

    pub fn hidden_norms(&self) -> &[f64] {
        &self.hidden_norms
    }

    pub fn values(&self) -> Option<&[Matrix]> {
        self.values.as_deref()
    }

    pub fn has_values(&self) -> bool {
        self.values.is_some()
    }

    pub fn without_values(mut self) -> Self {
        self.values = None;
        self
    }

    /// Same trace with hidden norms replaced, e.g. by pixel-derived saliency.
    pub fn with_hidden_norms(&self, norms: Vec<f64>) -> Result<Self> {
        Self::new(
            self.layer,
            self.keys.clone(),
            self.obs_queries.clone(),
            norms,
            self.values.clone(),
        )
    }

    /// Keeps only the last `omega` observation queries of every head.
    pub fn with_window(&self, omega: usize) -> Result<Self> {
        if omega == 0 || omega > self.omega() {
            return Err(Error::OmegaOutOfRange {
                omega,
                n: self.omega(),
            });
        }
        let skip = self.omega() - omega;
        let obs = self
            .obs_queries
            .iter()
            .map(|q| q.select_rows(&(skip..q.rows()).collect::<Vec<_>>()))
            .collect();
        Self::new(
            self.layer,
            self.keys.clone(),
            obs,
            self.hidden_norms.clone(),
            self.values.clone(),
        )
    }

    pub fn check_layout(&self, layout: &PromptLayout) -> Result<()> {
        if self.n() != layout.n() {
            return Err(Error::ShapeMismatch(format!(
                "trace has {} tokens, layout has {}",
                self.n(),
                layout.n()
            )));
        }
        if self.omega() != layout.omega() {
            return Err(Error::ShapeMismatch(format!(
                "trace has {} observation queries, layout window is {}",
                self.omega(),
                layout.omega()
            )));
        }
        Ok(())
    }
}
