//! Low-rank adapter pairs on classifier weight matrices.
//!
//! An adapter on an `m × n` weight `W` is a pair `B (m × r)`, `A (r × n)` and
//! contributes `B·A` to the effective weight. There is no scaling factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::network::{low_rank_update, names};
use crate::nncore::{checkpoint, Matrix, ParamSet};
use crate::seed::{self, Stream};

pub const A_INIT_STD: f64 = 0.02;

/// A weight matrix that can carry an adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptPoint {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl AdaptPoint {
    pub fn new(name: impl Into<String>, (rows, cols): (usize, usize)) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn max_rank(&self) -> usize {
        self.rows.min(self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub b: Matrix,
    pub a: Matrix,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, b: Matrix, a: Matrix) -> Result<Self> {
        let target = target.into();
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(Error::Shape(format!(
                "adapter `{target}`: B is {:?}, A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        if b.cols() > b.rows().min(a.cols()) {
            return Err(Error::Rank(format!(
                "adapter `{target}`: rank {} exceeds min({}, {})",
                b.cols(),
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { target, b, a })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// Dense `B·A`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("shapes checked at construction")
    }
}

/// One client's adapters, one per adapt point, all of the same rank.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub client_id: usize,
    pub rank: usize,
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn new(client_id: usize, adapters: Vec<LoraAdapter>) -> Result<Self> {
        let rank = adapters.first().map_or(0, LoraAdapter::rank);
        if adapters.iter().any(|a| a.rank() != rank) {
            return Err(Error::Rank(format!("client {client_id}: adapters of mixed rank")));
        }
        Ok(Self {
            client_id,
            rank,
            adapters,
        })
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.adapters.iter().map(|a| a.target.as_str())
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Adds the adapters to a parameter set as trainable `lora_b` / `lora_a`
    /// entries next to their targets.
    pub fn install(&self, params: &mut ParamSet) {
        for ad in &self.adapters {
            params.insert(names::lora_b(&ad.target), ad.b.clone(), false);
            params.insert(names::lora_a(&ad.target), ad.a.clone(), false);
        }
    }

    /// Reads back adapters of this set's layout from a parameter set.
    pub fn extract(&self, params: &ParamSet) -> Result<AdapterSet> {
        let adapters = self
            .adapters
            .iter()
            .map(|ad| {
                let get = |n: String| {
                    params
                        .get(&n)
                        .cloned()
                        .ok_or_else(|| Error::Shape(format!("missing `{n}`")))
                };
                LoraAdapter::new(ad.target.clone(), get(names::lora_b(&ad.target))?, get(names::lora_a(&ad.target))?)
            })
            .collect::<Result<Vec<_>>>()?;
        AdapterSet::new(self.client_id, adapters)
    }
}

/// Fresh adapters for every adapt point: `A ~ N(0, 0.02²)`, `B = 0`, so the
/// initial delta is exactly zero.
pub fn init_adapter_set(points: &[AdaptPoint], rank: usize, client_id: usize, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(Error::Rank("rank must be at least 1".into()));
    }
    if let Some(p) = points.iter().find(|p| rank > p.max_rank()) {
        return Err(Error::Rank(format!(
            "rank {rank} exceeds min dimension {} of `{}`",
            p.max_rank(),
            p.name
        )));
    }
    let mut rng = seed::rng(seed);
    let adapters = points
        .iter()
        .map(|p| {
            let a = Matrix::random_normal(rank, p.cols, A_INIT_STD, &mut rng);
            LoraAdapter::new(p.name.clone(), Matrix::zeros(p.rows, rank), a)
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterSet::new(client_id, adapters)
}

/// Seed for a client's adapters in a given round.
pub fn adapter_seed(master: u64, client_id: usize, round: usize) -> u64 {
    seed::derive(master, Stream::AdapterInit, client_id as u64, round as u64)
}

/// `W + B·A`
pub fn apply_adapter(w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if w.shape() != adapter.shape() {
        return Err(Error::Shape(format!(
            "adapter `{}` is {:?}, weight is {:?}",
            adapter.target,
            adapter.shape(),
            w.shape()
        )));
    }
    low_rank_update(w, &adapter.b, &adapter.a)
}

/// Elementwise `W + delta`.
pub fn merge_delta(w: &Matrix, delta: &Matrix) -> Result<Matrix> {
    w.add(delta)
}

/// The simulated upload: adapters, rank and sample count, carried in the
/// checkpoint tensor format with a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPayload {
    pub adapters: AdapterSet,
    pub sample_count: usize,
}

#[derive(Serialize, Deserialize)]
struct PayloadHeader {
    client_id: usize,
    r: usize,
    sample_count: usize,
    targets: Vec<String>,
}

impl AdapterPayload {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = PayloadHeader {
            client_id: self.adapters.client_id,
            r: self.adapters.rank,
            sample_count: self.sample_count,
            targets: self.adapters.targets().map(str::to_string).collect(),
        };
        let mut params = ParamSet::new();
        self.adapters.install(&mut params);
        Ok(checkpoint::encode(&params, &serde_json::to_string(&header)?))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = checkpoint::decode(bytes)?;
        let header: PayloadHeader = serde_json::from_str(&meta)?;
        let adapters = header
            .targets
            .iter()
            .map(|t| {
                let get = |n: String| {
                    params
                        .get(&n)
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("payload missing `{n}`")))
                };
                LoraAdapter::new(t.clone(), get(names::lora_b(t))?, get(names::lora_a(t))?)
            })
            .collect::<Result<Vec<_>>>()?;
        let set = AdapterSet::new(header.client_id, adapters)?;
        if set.rank != header.r {
            return Err(Error::Checkpoint(format!("payload rank {} != header {}", set.rank, header.r)));
        }
        Ok(Self {
            adapters: set,
            sample_count: header.sample_count,
        })
    }
}
