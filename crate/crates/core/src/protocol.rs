//! One communication round of step-ahead partial error feedback.
//!
//! Each participating client previews a fraction `α_r` of its residual,
//! runs `T` local SGD steps from the shifted point, folds the remaining
//! `(1 − α_r)` share of the residual into its update and sends the
//! compressed result. `α = 0` is classical error feedback, `α = 1` is the
//! step-ahead variant without error averaging, and the identity compressor
//! turns every schedule into local SGD averaging.

use rand::seq::index;
use rayon::prelude::*;

use crate::compressors::{compress, CompressedUpdate, CompressorSpec};
use crate::error::{Error, Result};
use crate::numerics::{mean, ModelVector, Purpose, RandomStream};
use crate::objectives::FederatedTask;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub residual: ModelVector,
    /// Heavy-ball buffer after the client's last local step; reset to zero at
    /// the start of every round it participates in.
    pub momentum_buffer: ModelVector,
}

impl ClientState {
    pub fn new(d: usize) -> Self {
        ClientState {
            residual: ModelVector::zeros(d),
            momentum_buffer: ModelVector::zeros(d),
        }
    }

    pub fn residual_energy(&self) -> f64 {
        self.residual.norm2_sq()
    }
}

/// Everything one round needs besides the task and client states.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSchedule {
    pub round: usize,
    /// Server stepsize η.
    pub eta: f64,
    /// Local stepsize η_r.
    pub eta_r: f64,
    pub alpha_r: f64,
    pub local_steps: usize,
    /// Sorted participant indices.
    pub participants: Vec<usize>,
    pub momentum: f64,
    pub batch_size: usize,
    pub compressor: CompressorSpec,
}

impl RoundSchedule {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_r) {
            return Err(Error::config("alpha", format!("{} not in [0, 1]", self.alpha_r)));
        }
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be >= 1"));
        }
        if !(self.eta_r > 0.0) || !self.eta_r.is_finite() {
            return Err(Error::config("eta0", "local stepsize must be positive"));
        }
        if !self.eta.is_finite() {
            return Err(Error::config("eta", "server stepsize must be finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.participants.is_empty() {
            return Err(Error::config("participation", "no participating clients"));
        }
        if self.participants.iter().any(|&k| k >= num_clients) {
            return Err(Error::config("participants", "client index out of range"));
        }
        Ok(())
    }

    pub fn participation_fraction(&self, num_clients: usize) -> f64 {
        self.participants.len() as f64 / num_clients as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientMessage {
    pub client: usize,
    pub compressed: CompressedUpdate,
    /// `‖u_{r+1}‖²` before compression.
    pub raw_update_norm_sq: f64,
    /// `‖e_{r+1}‖²`.
    pub residual_energy: f64,
}

/// What happened inside one client's local loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrace {
    pub client: usize,
    /// `w_{r+½,0}`.
    pub start: ModelVector,
    /// `‖w_{r+½,t} − w_r‖²` for `t = 0..=T`.
    pub drift_sq: Vec<f64>,
    /// Accumulated local update `g_r = w_{r+½,0} − w_{r+½,T}`.
    pub update: ModelVector,
    /// `u_{r+1} = (1 − α_r) e_r + g_r`.
    pub composed: ModelVector,
}

/// Round-level aggregates used by the virtual-iterate checks and the lemmas.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    pub w_r: ModelVector,
    pub w_next: ModelVector,
    /// Mean residual over all K clients at the start of the round.
    pub e_bar: ModelVector,
    /// Mean residual over all K clients after the round.
    pub e_bar_next: ModelVector,
    /// Mean start-of-round residual over participants only.
    pub e_bar_active: ModelVector,
    /// Mean accumulated local update over participants.
    pub g_bar: ModelVector,
    /// Mean compressed update over participants.
    pub c_bar: ModelVector,
    pub participants: Vec<usize>,
    pub num_clients: usize,
    /// `‖e_{r+1}^(k)‖²` for every client, inactive ones included.
    pub residual_energies: Vec<f64>,
    pub uplink_bits: u64,
}

impl RoundTrace {
    /// `Ē_{r+1}`.
    pub fn residual_energy_mean(&self) -> f64 {
        self.residual_energies.iter().sum::<f64>() / self.num_clients as f64
    }
}

/// Stream for local step `t` of client `k` in round `r`.
pub fn minibatch_stream(root: &RandomStream, round: usize, k: usize, t: usize) -> RandomStream {
    root.purpose(Purpose::Minibatch).round(round).client(k).step(t)
}

/// Runs Algorithm-1 client work for one participant.
pub fn client_round(
    task: &FederatedTask,
    k: usize,
    w_r: &ModelVector,
    state: &ClientState,
    sched: &RoundSchedule,
    stream: &RandomStream,
) -> Result<(ClientMessage, ClientState, LocalTrace)> {
    w_r.check_dim(&state.residual)?;
    let alpha = sched.alpha_r;
    let start = w_r.sub(&state.residual.scale(alpha))?;
    let mut w = start.clone();
    let mut v = ModelVector::zeros(task.d);
    let mut drift_sq = Vec::with_capacity(sched.local_steps + 1);
    drift_sq.push(start.sub(w_r)?.norm2_sq());
    for t in 0..sched.local_steps {
        let g = task.stochastic_grad(
            k,
            &w,
            sched.batch_size,
            &minibatch_stream(stream, sched.round, k, t),
        )?;
        if sched.momentum > 0.0 {
            v = v.scale(sched.momentum).add(&g)?;
            w.axpy_in_place(-sched.eta_r, &v)?;
        } else {
            w.axpy_in_place(-sched.eta_r, &g)?;
        }
        if !w.is_finite() {
            return Err(Error::Divergence {
                round: sched.round,
                client: k,
                step: t,
            });
        }
        drift_sq.push(w.sub(w_r)?.norm2_sq());
    }
    let update = start.sub(&w)?;
    let composed = state.residual.scale(1.0 - alpha).add(&update)?;
    if !composed.is_finite() {
        return Err(Error::Divergence {
            round: sched.round,
            client: k,
            step: sched.local_steps,
        });
    }
    let compressed = compress(&sched.compressor, &composed)?;
    let residual = composed.sub(&compressed.dense)?;
    let message = ClientMessage {
        client: k,
        raw_update_norm_sq: composed.norm2_sq(),
        residual_energy: residual.norm2_sq(),
        compressed,
    };
    let next = ClientState {
        residual,
        momentum_buffer: v,
    };
    let trace = LocalTrace {
        client: k,
        start,
        drift_sq,
        update,
        composed,
    };
    Ok((message, next, trace))
}

/// Non-participants keep their state untouched.
pub fn inactive_step(state: &ClientState) -> ClientState {
    state.clone()
}

/// `w_{r+1} = w_r − η (1/m) Σ_k C(u^(k))`, summed in the order given.
pub fn server_aggregate(
    messages: &[ClientMessage],
    w_r: &ModelVector,
    eta: f64,
) -> Result<(ModelVector, ModelVector)> {
    if messages.is_empty() {
        return Err(Error::config("participation", "no messages to aggregate"));
    }
    let c_bar = mean(messages.iter().map(|m| &m.compressed.dense), w_r.dim())?;
    let mut w = w_r.clone();
    w.axpy_in_place(-eta, &c_bar)?;
    Ok((w, c_bar))
}

/// `m = ⌊pK⌋`, with a small guard so that e.g. `0.29 · 100` counts as 29.
pub fn participant_count(num_clients: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config("participation", format!("p = {p} must lie in (0, 1]")));
    }
    let m = (p * num_clients as f64 + 1e-9).floor() as usize;
    if m == 0 {
        return Err(Error::config(
            "participation",
            format!("floor(p K) = 0 for p = {p}, K = {num_clients}"),
        ));
    }
    Ok(m.min(num_clients))
}

/// `⌊pK⌋` clients uniformly without replacement, sorted ascending.
pub fn sample_participants(
    num_clients: usize,
    p: f64,
    round: usize,
    stream: &RandomStream,
) -> Result<Vec<usize>> {
    let m = participant_count(num_clients, p)?;
    if m == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut rng = stream.purpose(Purpose::Participation).round(round).rng();
    let mut out = index::sample(&mut rng, num_clients, m).into_vec();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub w_next: ModelVector,
    pub trace: RoundTrace,
    pub local: Vec<LocalTrace>,
}

/// One full round. Client work runs on the current rayon pool; results are
/// collected and aggregated in participant order, so the outcome does not
/// depend on the number of threads.
pub fn run_round(
    task: &FederatedTask,
    states: &mut [ClientState],
    w_r: &ModelVector,
    sched: &RoundSchedule,
    stream: &RandomStream,
) -> Result<RoundOutcome> {
    let kk = task.num_clients();
    if states.len() != kk {
        return Err(Error::Dimension {
            expected: kk,
            actual: states.len(),
        });
    }
    sched.validate(kk)?;
    let d = task.d;
    let e_bar = mean(states.iter().map(|s| &s.residual), d)?;
    let e_bar_active = mean(sched.participants.iter().map(|&k| &states[k].residual), d)?;

    let results: Vec<Result<(ClientMessage, ClientState, LocalTrace)>> = sched
        .participants
        .par_iter()
        .map(|&k| client_round(task, k, w_r, &states[k], sched, stream))
        .collect();
    let mut messages = Vec::with_capacity(results.len());
    let mut local = Vec::with_capacity(results.len());
    let mut updated = Vec::with_capacity(results.len());
    for r in results {
        let (msg, st, tr) = r?;
        updated.push((msg.client, st));
        messages.push(msg);
        local.push(tr);
    }
    let (w_next, c_bar) = server_aggregate(&messages, w_r, sched.eta)?;
    for (k, st) in updated {
        states[k] = st;
    }
    let g_bar = mean(local.iter().map(|t| &t.update), d)?;
    let e_bar_next = mean(states.iter().map(|s| &s.residual), d)?;
    let uplink_bits = messages
        .iter()
        .try_fold(0u64, |acc, m| acc.checked_add(m.compressed.uplink_bits))
        .ok_or(Error::AccountingOverflow)?;
    let trace = RoundTrace {
        round: sched.round,
        w_r: w_r.clone(),
        w_next: w_next.clone(),
        e_bar,
        e_bar_next,
        e_bar_active,
        g_bar,
        c_bar,
        participants: sched.participants.clone(),
        num_clients: kk,
        residual_energies: states.iter().map(|s| s.residual_energy()).collect(),
        uplink_bits,
    };
    Ok(RoundOutcome {
        w_next,
        trace,
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressors::CompressorSpec;
    use crate::objectives::{two_client_quadratic, ClientObjective, Matrix};

    fn v(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec())
    }

    fn sched(alpha: f64, compressor: CompressorSpec, participants: Vec<usize>) -> RoundSchedule {
        RoundSchedule {
            round: 0,
            eta: 1.0,
            eta_r: 0.1,
            alpha_r: alpha,
            local_steps: 3,
            participants,
            momentum: 0.0,
            batch_size: 1,
            compressor,
        }
    }

    fn stream() -> RandomStream {
        RandomStream::new(17, Purpose::Minibatch)
    }

    #[test]
    fn alpha_zero_composes_residual_and_update() {
        let task = two_client_quadratic(3).unwrap();
        let w = v(&[0.5, -0.2, 1.0]);
        let state = ClientState {
            residual: v(&[0.1, 0.2, -0.3]),
            momentum_buffer: ModelVector::zeros(3),
        };
        let s = sched(0.0, CompressorSpec::top_k(1), vec![0, 1]);
        let (msg, next, tr) = client_round(&task, 0, &w, &state, &s, &stream()).unwrap();
        assert!(tr.start.bit_eq(&w));
        assert_eq!(tr.composed, state.residual.add(&tr.update).unwrap());
        assert_eq!(msg.compressed.dense.add(&next.residual).unwrap(), tr.composed);
    }

    #[test]
    fn alpha_one_drops_residual_from_update() {
        let task = two_client_quadratic(3).unwrap();
        let w = v(&[0.5, -0.2, 1.0]);
        let state = ClientState {
            residual: v(&[0.1, 0.2, -0.3]),
            momentum_buffer: ModelVector::zeros(3),
        };
        let s = sched(1.0, CompressorSpec::top_k(1), vec![0, 1]);
        let (_, _, tr) = client_round(&task, 1, &w, &state, &s, &stream()).unwrap();
        assert_eq!(tr.start, w.sub(&state.residual).unwrap());
        assert!(tr.composed.bit_eq(&tr.update));
    }

    #[test]
    fn fixed_point_at_client_minimizer() {
        let task = FederatedTask::new(
            vec![ClientObjective::Quadratic {
                a: Matrix::identity(2),
                b: vec![1.0, -1.0],
            }],
            0.0,
        )
        .unwrap();
        let w = v(&[1.0, -1.0]);
        let mut s = sched(0.85, CompressorSpec::top_k(1), vec![0]);
        s.local_steps = 1;
        s.batch_size = 2;
        let (msg, next, tr) =
            client_round(&task, 0, &w, &ClientState::new(2), &s, &stream()).unwrap();
        assert_eq!(tr.update, ModelVector::zeros(2));
        assert_eq!(msg.compressed.dense, ModelVector::zeros(2));
        assert_eq!(next.residual, ModelVector::zeros(2));
    }

    #[test]
    fn identity_compressor_leaves_no_residual() {
        let task = two_client_quadratic(4).unwrap();
        let state = ClientState {
            residual: v(&[1.0, 2.0, 3.0, 4.0]),
            momentum_buffer: ModelVector::zeros(4),
        };
        for alpha in [0.0, 0.3, 1.0] {
            let s = sched(alpha, CompressorSpec::identity(), vec![0, 1]);
            let (_, next, _) =
                client_round(&task, 0, &v(&[1.0, 0.0, 0.0, 1.0]), &state, &s, &stream()).unwrap();
            assert_eq!(next.residual, ModelVector::zeros(4));
        }
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let task = two_client_quadratic(2).unwrap();
        let mut s = sched(0.0, CompressorSpec::identity(), vec![0, 1]);
        s.eta_r = 1e300;
        s.local_steps = 10;
        let err = client_round(&task, 1, &v(&[1e10, 1e10]), &ClientState::new(2), &s, &stream())
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { client: 1, .. }), "{err:?}");
    }

    #[test]
    fn inactive_state_is_bit_identical() {
        let mut state = ClientState {
            residual: v(&[0.1, -0.0, 3.5e-300]),
            momentum_buffer: v(&[1.0, 2.0, 3.0]),
        };
        let before = state.clone();
        for _ in 0..10 {
            state = inactive_step(&state);
        }
        assert!(state.residual.bit_eq(&before.residual));
        assert_eq!(state.residual_energy(), before.residual_energy());
    }

    fn msg(dense: &[f64]) -> ClientMessage {
        ClientMessage {
            client: 0,
            compressed: CompressedUpdate {
                dense: v(dense),
                support_size: 0,
                uplink_bits: 0,
            },
            raw_update_norm_sq: 0.0,
            residual_energy: 0.0,
        }
    }

    #[test]
    fn server_aggregate_examples() {
        let (w, _) = server_aggregate(&[msg(&[2.0, 0.0]), msg(&[0.0, 2.0])], &v(&[0.0, 0.0]), 1.0)
            .unwrap();
        assert_eq!(w, v(&[-1.0, -1.0]));
        let (w, _) = server_aggregate(&[msg(&[0.0, 0.0])], &v(&[3.0, 4.0]), 1.0).unwrap();
        assert_eq!(w, v(&[3.0, 4.0]));
        assert!(server_aggregate(&[], &v(&[0.0]), 1.0).is_err());
    }

    #[test]
    fn participant_sampling_contract() {
        let s = RandomStream::new(3, Purpose::Participation);
        assert_eq!(sample_participants(5, 1.0, 0, &s).unwrap(), vec![0, 1, 2, 3, 4]);
        let p = sample_participants(100, 0.1, 7, &s).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p, sample_participants(100, 0.1, 7, &s).unwrap());
        assert_eq!(participant_count(100, 0.29).unwrap(), 29);
        assert!(sample_participants(5, 0.1, 0, &s).is_err());
        assert!(sample_participants(5, 0.0, 0, &s).is_err());
        assert!(sample_participants(5, 1.5, 0, &s).is_err());
    }

    #[test]
    fn participation_frequency_is_binomial() {
        let s = RandomStream::new(11, Purpose::Participation);
        let (kk, p, rounds) = (20, 0.25, 10_000);
        let mut counts = vec![0usize; kk];
        for r in 0..rounds {
            for k in sample_participants(kk, p, r, &s).unwrap() {
                counts[k] += 1;
            }
        }
        let se = (p * (1.0 - p) / rounds as f64).sqrt();
        for c in counts {
            let freq = c as f64 / rounds as f64;
            assert!((freq - p).abs() <= 3.0 * se + 1e-12, "freq {freq}");
        }
    }

    #[test]
    fn run_round_updates_only_participants() {
        let task = two_client_quadratic(3).unwrap();
        let mut states = vec![ClientState::new(3), ClientState::new(3)];
        states[1].residual = v(&[0.3, 0.0, -0.1]);
        let before = states[1].clone();
        let s = sched(0.5, CompressorSpec::top_k(1), vec![0]);
        let out = run_round(&task, &mut states, &v(&[1.0, 1.0, 1.0]), &s, &stream()).unwrap();
        assert!(states[1].residual.bit_eq(&before.residual));
        assert_eq!(out.trace.participants, vec![0]);
        assert_eq!(
            out.w_next,
            v(&[1.0, 1.0, 1.0]).sub(&out.trace.c_bar).unwrap()
        );
        assert_eq!(out.trace.e_bar, v(&[0.15, 0.0, -0.05]));
    }

    #[test]
    fn round_zero_identity_is_local_sgd_averaging() {
        let task = two_client_quadratic(3).unwrap();
        let w = v(&[0.4, 0.1, -0.7]);
        let mut states = vec![ClientState::new(3), ClientState::new(3)];
        let s = sched(0.85, CompressorSpec::identity(), vec![0, 1]);
        let out = run_round(&task, &mut states, &w, &s, &stream()).unwrap();
        let mut sum = ModelVector::zeros(3);
        for tr in &out.local {
            sum.axpy_in_place(1.0, &tr.update).unwrap();
        }
        let expected = w.sub(&sum.scale(0.5)).unwrap();
        assert!(out.w_next.bit_eq(&expected));
    }
}
