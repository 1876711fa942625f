//! Per-round probes: gradient mismatch, virtual-iterate defects and uplink
//! accounting.

use serde::{Deserialize, Serialize};

use crate::compressors::{uplink_bits, CompressorSpec};
use crate::error::{Error, Result};
use crate::numerics::ModelVector;
use crate::objectives::{FederatedTask, ProbeBatch};
use crate::protocol::{ClientState, RoundTrace};

/// One row of the metrics file: the state at the start of `round`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub f_w: f64,
    pub grad_norm_sq: f64,
    pub residual_energy_mean: f64,
    pub mismatch: f64,
    /// Uplink bits through the end of this round.
    pub uplink_bits_cum: u64,
    /// Defect of the virtual-iterate identity for this round.
    pub virtual_identity_residual: f64,
    pub wall_time_ms: u64,
}

/// `(1/K) Σ_k ‖∇L_S(w) − ∇L_S(w − α e^(k))‖²` on a fixed probe batch.
pub fn gradient_mismatch(
    task: &FederatedTask,
    w: &ModelVector,
    states: &[ClientState],
    alpha: f64,
    probe: &ProbeBatch,
) -> Result<f64> {
    if states.len() != task.num_clients() {
        return Err(Error::Dimension {
            expected: task.num_clients(),
            actual: states.len(),
        });
    }
    let mut acc = 0.0;
    for (k, st) in states.iter().enumerate() {
        if alpha == 0.0 || st.residual.iter().all(|x| *x == 0.0) {
            continue;
        }
        let shifted = w.sub(&st.residual.scale(alpha))?;
        let g0 = task.probe_grad(k, w, probe)?;
        let g1 = task.probe_grad(k, &shifted, probe)?;
        acc += g0.sub(&g1)?.norm2_sq();
    }
    Ok(acc / states.len() as f64)
}

/// Relative defect `‖lhs − rhs‖ / max(1, ‖lhs‖)` of the virtual-iterate
/// recursion, with `x_r = w_r − η ẽ_r` and `ẽ_r` the all-client mean residual.
///
/// Full participation checks `x_{r+1} − x_r = η α ē − η ḡ`; otherwise the
/// partial form `η[p(α ē_act − ḡ) − (1 − p) C̄]` with `p = m/K` is used.
pub fn virtual_identity_residual(trace: &RoundTrace, eta: f64, alpha: f64) -> Result<f64> {
    let x_r = trace.w_r.sub(&trace.e_bar.scale(eta))?;
    let x_next = trace.w_next.sub(&trace.e_bar_next.scale(eta))?;
    let lhs = x_next.sub(&x_r)?;
    let m = trace.participants.len();
    let rhs = if m == trace.num_clients {
        trace.e_bar.scale(eta * alpha).sub(&trace.g_bar.scale(eta))?
    } else {
        let p = m as f64 / trace.num_clients as f64;
        let inner = trace
            .e_bar_active
            .scale(alpha)
            .sub(&trace.g_bar)?
            .scale(p)
            .sub(&trace.c_bar.scale(1.0 - p))?;
        inner.scale(eta)
    };
    Ok(lhs.sub(&rhs)?.norm() / lhs.norm().max(1.0))
}

/// Adds `m · uplink_bits(spec, d)` to the running counter.
pub fn accumulate_comm(
    record: &MetricsRecord,
    spec: &CompressorSpec,
    d: usize,
    m: usize,
) -> Result<MetricsRecord> {
    if m == 0 {
        return Err(Error::config("participants", "m must be >= 1"));
    }
    let add = (m as u64)
        .checked_mul(uplink_bits(spec, d))
        .ok_or(Error::AccountingOverflow)?;
    let total = record
        .uplink_bits_cum
        .checked_add(add)
        .filter(|t| *t < 1u64 << 63)
        .ok_or(Error::AccountingOverflow)?;
    Ok(MetricsRecord {
        uplink_bits_cum: total,
        ..record.clone()
    })
}
