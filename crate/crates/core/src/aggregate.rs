//! Server-side aggregation of heterogeneous-rank adapter updates.
//!
//! Four strategies produce a dense per-target `ΔW`:
//!
//! - `reference`: `Σ p_k B_k A_k`, computed densely; the ground truth.
//! - `stacking`: `[B_1 … B_K] · [p_1 A_1; …; p_K A_K]`, equal to the reference
//!   up to floating-point reordering, for any mix of ranks.
//! - `naive`: `(Σ p_k B_k)(Σ p_k A_k)`, which adds the cross terms
//!   `Σ_{i≠j} p_i p_j B_i A_j` and shrinks the diagonal; needs equal ranks.
//! - `zeropad`: zero-pad every pair to the largest rank, then `naive`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::nncore::Matrix;

/// Per-participant weights `p_k = |D_k| / Σ |D_j|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Validation("no sample counts to weight".into()));
        }
        if counts.contains(&0) {
            return Err(Error::Validation("every client needs at least one sample".into()));
        }
        let total: usize = counts.iter().sum();
        Ok(Self(counts.iter().map(|&c| c as f64 / total as f64).collect()))
    }

    pub fn from_values(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Validation("weights must be positive".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dense delta per adapted target, in target order.
pub type AggregatedDelta = IndexMap<String, Matrix>;

/// Stacked factors for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedAdapter {
    /// `(Σ r_k) × n`, row block `k` is `p_k A_k`.
    pub a: Matrix,
    /// `m × (Σ r_k)`, column block `k` is `B_k`.
    pub b: Matrix,
    /// Start of each client's block; one extra trailing entry holds `Σ r_k`.
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Stacking,
    Naive,
    #[serde(rename = "zeropad")]
    ZeroPad,
    Reference,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Stacking, Strategy::Naive, Strategy::ZeroPad, Strategy::Reference];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Stacking => "stacking",
            Strategy::Naive => "naive",
            Strategy::ZeroPad => "zeropad",
            Strategy::Reference => "reference",
        }
    }

    pub fn aggregate(self, updates: &[AdapterSet], weights: &AggregationWeights) -> Result<AggregatedDelta> {
        match self {
            Strategy::Stacking => Ok(stack_aggregate(updates, weights)?
                .into_iter()
                .map(|(t, (_, d))| (t, d))
                .collect()),
            Strategy::Naive => naive_aggregate(updates, weights),
            Strategy::ZeroPad => zero_pad_aggregate(updates, weights),
            Strategy::Reference => reference_delta(updates, weights),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

/// Checks that all updates adapt the same targets with consistent shapes,
/// and returns the target names.
fn check_layout(updates: &[AdapterSet], weights: &AggregationWeights) -> Result<Vec<String>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Validation("no updates to aggregate".into()))?;
    if updates.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let targets: Vec<String> = first.targets().map(str::to_string).collect();
    for u in &updates[1..] {
        if u.adapters.len() != targets.len() || u.targets().zip(&targets).any(|(a, b)| a != b) {
            return Err(Error::Validation(format!(
                "client {} adapts different targets than client {}",
                u.client_id, first.client_id
            )));
        }
        for (a, b) in u.adapters.iter().zip(&first.adapters) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "target `{}`: client {} has {:?}, client {} has {:?}",
                    a.target,
                    u.client_id,
                    a.shape(),
                    first.client_id,
                    b.shape()
                )));
            }
        }
    }
    Ok(targets)
}

/// Dense `Σ p_k B_k A_k` per target.
pub fn reference_delta(updates: &[AdapterSet], weights: &AggregationWeights) -> Result<AggregatedDelta> {
    let targets = check_layout(updates, weights)?;
    let mut out = AggregatedDelta::new();
    for (t, target) in targets.into_iter().enumerate() {
        let (m, n) = updates[0].adapters[t].shape();
        let mut acc = Matrix::zeros(m, n);
        for (u, &p) in updates.iter().zip(weights.as_slice()) {
            acc.add_scaled(&u.adapters[t].delta(), p)?;
        }
        out.insert(target, acc);
    }
    Ok(out)
}

/// Stacks `B_k` horizontally and `p_k A_k` vertically per target; the dense
/// delta is their product.
pub fn stack_aggregate(
    updates: &[AdapterSet],
    weights: &AggregationWeights,
) -> Result<IndexMap<String, (StackedAdapter, Matrix)>> {
    let targets = check_layout(updates, weights)?;
    let mut out = IndexMap::new();
    for (t, target) in targets.into_iter().enumerate() {
        let bs: Vec<&Matrix> = updates.iter().map(|u| &u.adapters[t].b).collect();
        let scaled_as: Vec<Matrix> = updates
            .iter()
            .zip(weights.as_slice())
            .map(|(u, &p)| u.adapters[t].a.scale(p))
            .collect();
        let a_refs: Vec<&Matrix> = scaled_as.iter().collect();
        let b = Matrix::hstack(&bs)?;
        let a = Matrix::vstack(&a_refs)?;
        let mut offsets = Vec::with_capacity(updates.len() + 1);
        let mut acc = 0;
        for u in updates {
            offsets.push(acc);
            acc += u.adapters[t].rank();
        }
        offsets.push(acc);
        let delta = b.matmul(&a)?;
        out.insert(target, (StackedAdapter { a, b, offsets }, delta));
    }
    Ok(out)
}

/// `(Σ p_k B_k)(Σ p_k A_k)` per target. Rejects mixed ranks.
pub fn naive_aggregate(updates: &[AdapterSet], weights: &AggregationWeights) -> Result<AggregatedDelta> {
    let targets = check_layout(updates, weights)?;
    let ranks: Vec<usize> = updates.iter().map(|u| u.rank).collect();
    if ranks.iter().any(|&r| r != ranks[0]) {
        return Err(Error::RankMismatch(ranks));
    }
    let mut out = AggregatedDelta::new();
    for (t, target) in targets.into_iter().enumerate() {
        let first = &updates[0].adapters[t];
        let mut b = Matrix::zeros(first.b.rows(), first.b.cols());
        let mut a = Matrix::zeros(first.a.rows(), first.a.cols());
        for (u, &p) in updates.iter().zip(weights.as_slice()) {
            b.add_scaled(&u.adapters[t].b, p)?;
            a.add_scaled(&u.adapters[t].a, p)?;
        }
        out.insert(target, b.matmul(&a)?);
    }
    Ok(out)
}

/// Pads every adapter with zero columns of `B` and zero rows of `A` up to the
/// largest participating rank, then averages naively.
pub fn zero_pad_aggregate(updates: &[AdapterSet], weights: &AggregationWeights) -> Result<AggregatedDelta> {
    check_layout(updates, weights)?;
    let r_max = updates.iter().map(|u| u.rank).max().unwrap_or(0);
    let padded = updates
        .iter()
        .map(|u| {
            let adapters = u
                .adapters
                .iter()
                .map(|ad| crate::lora::LoraAdapter::new(ad.target.clone(), ad.b.pad_cols(r_max), ad.a.pad_rows(r_max)))
                .collect::<Result<Vec<_>>>()?;
            AdapterSet::new(u.client_id, adapters)
        })
        .collect::<Result<Vec<_>>>()?;
    naive_aggregate(&padded, weights)
}

/// Weighted elementwise average of dense head deltas.
pub fn aggregate_head(deltas: &[(Matrix, Matrix)], weights: &AggregationWeights) -> Result<(Matrix, Matrix)> {
    let (w0, b0) = deltas
        .first()
        .ok_or_else(|| Error::Validation("no head deltas to aggregate".into()))?;
    if deltas.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} head deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    let mut w = Matrix::zeros(w0.rows(), w0.cols());
    let mut b = Matrix::zeros(b0.rows(), b0.cols());
    for ((dw, db), &p) in deltas.iter().zip(weights.as_slice()) {
        w.add_scaled(dw, p)?;
        b.add_scaled(db, p)?;
    }
    Ok((w, b))
}

/// Largest absolute entry over all targets.
pub fn max_abs(delta: &AggregatedDelta) -> f64 {
    delta.values().map(Matrix::max_abs).fold(0.0, f64::max)
}

/// `max |x − y|` over all targets.
pub fn max_abs_diff(x: &AggregatedDelta, y: &AggregatedDelta) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation("deltas cover different targets".into()));
    }
    let mut m: f64 = 0.0;
    for ((tx, mx), (ty, my)) in x.iter().zip(y) {
        if tx != ty {
            return Err(Error::Validation(format!("target `{tx}` vs `{ty}`")));
        }
        m = m.max(mx.max_abs_diff(my)?);
    }
    Ok(m)
}
