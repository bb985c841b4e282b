//! Resource-driven LoRA rank assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A client's (data volume, label entropy, memory budget) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceVector {
    pub data_volume: f64,
    pub entropy_bits: f64,
    pub vram_gb: f64,
}

impl ResourceVector {
    pub fn new(data_volume: usize, entropy_bits: f64, vram_gb: f64) -> Result<Self> {
        if data_volume < 1 {
            return Err(Error::Validation("data volume must be at least 1".into()));
        }
        if !(entropy_bits >= 0.0 && entropy_bits.is_finite()) {
            return Err(Error::Validation(format!("entropy must be >= 0, got {entropy_bits}")));
        }
        if !(vram_gb > 0.0 && vram_gb.is_finite()) {
            return Err(Error::Validation(format!("compute budget must be > 0, got {vram_gb}")));
        }
        Ok(Self {
            data_volume: data_volume as f64,
            entropy_bits,
            vram_gb,
        })
    }

    fn features(&self) -> [f64; 3] {
        [self.data_volume, self.entropy_bits, self.vram_gb]
    }
}

/// Weights over (volume, entropy, compute) plus power-of-two rank bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r_min: usize,
    pub r_max: usize,
}

impl RankPolicy {
    pub fn new(alpha: f64, beta: f64, gamma: f64, r_min: usize, r_max: usize) -> Result<Self> {
        for (field, w) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(field, format!("weight must be non-negative, got {w}")));
            }
        }
        if ((alpha + beta + gamma) - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "alpha",
                format!("alpha + beta + gamma must be 1, got {}", alpha + beta + gamma),
            ));
        }
        for (field, r) in [("rmin", r_min), ("rmax", r_max)] {
            if r == 0 || !r.is_power_of_two() {
                return Err(Error::config(field, format!("must be a positive power of two, got {r}")));
            }
        }
        if r_min > r_max {
            return Err(Error::config("rmin", format!("rmin {r_min} > rmax {r_max}")));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            r_min,
            r_max,
        })
    }

    pub fn preset(name: &str, r_min: usize, r_max: usize) -> Result<Self> {
        let (a, b, g) = match name {
            "volume" => (0.8, 0.1, 0.1),
            "balanced" => (0.34, 0.33, 0.33),
            "compute" => (0.1, 0.1, 0.8),
            other => {
                return Err(Error::config(
                    "weights",
                    format!("unknown preset `{other}` (volume, balanced, compute)"),
                ))
            }
        };
        Self::new(a, b, g, r_min, r_max)
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

pub const PRESET_NAMES: [&str; 3] = ["volume", "balanced", "compute"];

/// Per-feature min-max scaling across clients. A feature that is constant
/// across clients maps to 0.5 for everyone.
pub fn normalize_resources(vectors: &[ResourceVector]) -> Result<Vec<[f64; 3]>> {
    if vectors.is_empty() {
        return Err(Error::Validation("no resource vectors to normalize".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vectors {
        for (j, x) in v.features().into_iter().enumerate() {
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    Ok(vectors
        .iter()
        .map(|v| {
            let f = v.features();
            std::array::from_fn(|j| {
                if hi[j] == lo[j] {
                    0.5
                } else {
                    (f[j] - lo[j]) / (hi[j] - lo[j])
                }
            })
        })
        .collect())
}

/// `2^round(log2(r_min + (r_max − r_min)·w·R̃))`, rounding halves up, then
/// clamped into `[r_min, r_max]`.
pub fn compute_rank(normed: &[f64; 3], policy: &RankPolicy) -> usize {
    let s: f64 = normed.iter().zip(policy.weights()).map(|(x, w)| x * w).sum();
    let raw = policy.r_min as f64 + (policy.r_max - policy.r_min) as f64 * s;
    let exponent = (raw.log2() + 0.5).floor();
    let rank = if exponent <= 0.0 {
        1
    } else {
        2f64.powi(exponent as i32) as usize
    };
    rank.clamp(policy.r_min, policy.r_max)
}

/// Normalizes the resource vectors and assigns every client a rank.
pub fn assign_ranks(vectors: &[ResourceVector], policy: &RankPolicy) -> Result<Vec<usize>> {
    Ok(normalize_resources(vectors)?
        .iter()
        .map(|n| compute_rank(n, policy))
        .collect())
}

/// Registration record a client reports to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceManifestRecord {
    pub client_id: usize,
    pub data_volume: usize,
    pub entropy_bits: f64,
    pub vram_gb: f64,
}
