//! δ-contractive compression operators and uplink bit accounting.
//!
//! A compressor `C` is δ-contractive when `‖u − C(u)‖² ≤ (1 − 1/δ)‖u‖²` for
//! every `u`. All operators here are deterministic, so the bound holds
//! pointwise rather than in expectation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ModelVector;

/// Default width of a transmitted value (FP32).
pub const DEFAULT_VALUE_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// Keep the `k` largest-magnitude coordinates; ties go to the lower index.
    TopK { k: usize },
    /// `C(u) = (‖u‖₁/d)·sign(u)`.
    ScaledSign,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorSpec {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default = "default_value_bits")]
    pub value_bits: u32,
}

fn default_value_bits() -> u32 {
    DEFAULT_VALUE_BITS
}

impl CompressorSpec {
    pub fn top_k(k: usize) -> Self {
        CompressorSpec {
            family: Family::TopK { k },
            value_bits: DEFAULT_VALUE_BITS,
        }
    }

    pub fn scaled_sign() -> Self {
        CompressorSpec {
            family: Family::ScaledSign,
            value_bits: DEFAULT_VALUE_BITS,
        }
    }

    pub fn identity() -> Self {
        CompressorSpec {
            family: Family::Identity,
            value_bits: DEFAULT_VALUE_BITS,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::config("d", "dimension must be at least 1"));
        }
        if let Family::TopK { k } = self.family {
            if k == 0 || k > d {
                return Err(Error::config(
                    "compressor.k",
                    format!("k = {k} must satisfy 1 <= k <= d = {d}"),
                ));
            }
        }
        if self.value_bits == 0 {
            return Err(Error::config("compressor.value_bits", "must be positive"));
        }
        Ok(())
    }

    /// Certified contraction constant δ ≥ 1 for dimension `d`.
    pub fn certified_delta(&self, d: usize) -> f64 {
        match self.family {
            Family::TopK { k } => d as f64 / k as f64,
            // worst case ‖u‖₁²/(d‖u‖²) = 1/d at one-hot vectors
            Family::ScaledSign => d as f64,
            Family::Identity => 1.0,
        }
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::TopK { k } => format!("top_{k}"),
            Family::ScaledSign => "scaled_sign".to_string(),
            Family::Identity => "identity".to_string(),
        }
    }
}

/// Result of compressing one update.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedUpdate {
    pub dense: ModelVector,
    pub support_size: usize,
    pub uplink_bits: u64,
}

fn ceil_log2(d: usize) -> u64 {
    if d <= 1 {
        0
    } else {
        (usize::BITS - (d - 1).leading_zeros()) as u64
    }
}

/// Bits one participating client sends per round.
///
/// Top-k sends an index and a value per kept entry; scaled sign sends one bit
/// per coordinate plus the scale; identity sends every value.
pub fn uplink_bits(spec: &CompressorSpec, d: usize) -> u64 {
    let b = spec.value_bits as u64;
    match spec.family {
        Family::TopK { k } => k as u64 * (ceil_log2(d) + b),
        Family::ScaledSign => d as u64 + b,
        Family::Identity => d as u64 * b,
    }
}

/// Indices of the `k` largest `|u_i|`, lowest index first on ties, in
/// ascending index order.
pub fn top_k_indices(u: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    if k < u.len() {
        let order = |&a: &usize, &b: &usize| {
            u[b].abs()
                .partial_cmp(&u[a].abs())
                .expect("finite input")
                .then(a.cmp(&b))
        };
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

pub fn compress(spec: &CompressorSpec, u: &ModelVector) -> Result<CompressedUpdate> {
    let d = u.dim();
    spec.validate(d)?;
    if !u.is_finite() {
        return Err(Error::Numeric("non-finite value passed to compressor".into()));
    }
    let dense = match spec.family {
        Family::Identity => u.clone(),
        Family::TopK { k } => {
            let mut out = vec![0.0; d];
            for i in top_k_indices(u, k) {
                out[i] = u[i];
            }
            ModelVector::new(out)
        }
        Family::ScaledSign => {
            let scale = u.norm1() / d as f64;
            if scale == 0.0 {
                ModelVector::zeros(d)
            } else {
                ModelVector::new(
                    u.iter()
                        .map(|&x| if x < 0.0 { -scale } else { scale })
                        .collect(),
                )
            }
        }
    };
    let support_size = dense.iter().filter(|x| **x != 0.0).count();
    Ok(CompressedUpdate {
        dense,
        support_size,
        uplink_bits: uplink_bits(spec, d),
    })
}

/// `u − C(u)`.
pub fn residual(u: &ModelVector, c: &CompressedUpdate) -> Result<ModelVector> {
    u.sub(&c.dense)
}
