//! Synthetic federated tasks with computable smoothness, noise and
//! dissimilarity constants.
//!
//! Two client losses are supported:
//!
//! * quadratic, `f_k(w) = ½‖A_k w − b_k‖² + (λ/2)‖w‖²`, whose per-sample loss
//!   for row `i` is `(n_k/2)(a_iᵀw − b_i)²` so that the sample mean is exactly
//!   `f_k`;
//! * logistic, `f_k(w) = (1/n_k)Σ softplus(x_iᵀw) − y_i x_iᵀw + (λ/2)‖w‖²`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ModelVector, Purpose, RandomStream};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Matrix {
            rows: d,
            cols: d,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `A v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `Aᵀ v`.
    pub fn rmatvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    /// `AᵀA` as a nalgebra matrix.
    pub fn gram(&self) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        a.transpose() * a
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientObjective {
    Quadratic {
        a: Matrix,
        b: Vec<f64>,
    },
    Logistic {
        x: Matrix,
        /// Binary labels in {0, 1}.
        y: Vec<f64>,
        /// Originating class of every row; drives partition statistics.
        #[serde(default)]
        classes: Vec<usize>,
    },
}

impl ClientObjective {
    pub fn samples(&self) -> usize {
        match self {
            ClientObjective::Quadratic { a, .. } => a.rows,
            ClientObjective::Logistic { x, .. } => x.rows,
        }
    }

    fn dim(&self) -> usize {
        match self {
            ClientObjective::Quadratic { a, .. } => a.cols,
            ClientObjective::Logistic { x, .. } => x.cols,
        }
    }

    /// Gradient of the data term summed over the given rows, without scaling.
    fn row_grad_sum(&self, w: &[f64], rows: impl Iterator<Item = usize>, out: &mut [f64]) {
        match self {
            ClientObjective::Quadratic { a, b } => {
                for i in rows {
                    let r = dot(a.row(i), w) - b[i];
                    for (o, aij) in out.iter_mut().zip(a.row(i)) {
                        *o += aij * r;
                    }
                }
            }
            ClientObjective::Logistic { x, y, .. } => {
                for i in rows {
                    let r = sigmoid(dot(x.row(i), w)) - y[i];
                    for (o, xij) in out.iter_mut().zip(x.row(i)) {
                        *o += xij * r;
                    }
                }
            }
        }
    }

    /// Scale that turns a row-gradient sum over all rows into `∇` of the
    /// data term: 1 for quadratics, `1/n` for logistic.
    fn full_scale(&self) -> f64 {
        match self {
            ClientObjective::Quadratic { .. } => 1.0,
            ClientObjective::Logistic { x, .. } => 1.0 / x.rows as f64,
        }
    }
}

/// Which rows a gradient probe uses.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeBatch {
    /// Every local row of the client.
    Full,
    /// A fixed row subset per client (indices may repeat).
    Fixed(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedTask {
    pub clients: Vec<ClientObjective>,
    pub d: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl FederatedTask {
    pub fn new(clients: Vec<ClientObjective>, weight_decay: f64) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::config("task.clients", "need at least one client"))?;
        let d = first.dim();
        if d == 0 {
            return Err(Error::config("task.d", "dimension must be at least 1"));
        }
        for (k, c) in clients.iter().enumerate() {
            if c.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: c.dim(),
                });
            }
            if c.samples() == 0 {
                return Err(Error::config(
                    format!("task.clients[{k}]"),
                    "client has an empty dataset",
                ));
            }
            match c {
                ClientObjective::Quadratic { a, b } if b.len() != a.rows => {
                    return Err(Error::Dimension {
                        expected: a.rows,
                        actual: b.len(),
                    })
                }
                ClientObjective::Logistic { x, y, .. } if y.len() != x.rows => {
                    return Err(Error::Dimension {
                        expected: x.rows,
                        actual: y.len(),
                    })
                }
                _ => {}
            }
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config("task.weight_decay", "must be >= 0"));
        }
        Ok(FederatedTask {
            clients,
            d,
            weight_decay,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn is_quadratic(&self) -> bool {
        self.clients
            .iter()
            .all(|c| matches!(c, ClientObjective::Quadratic { .. }))
    }

    fn client(&self, k: usize) -> Result<&ClientObjective> {
        self.clients.get(k).ok_or_else(|| {
            Error::config("client", format!("index {k} out of range 0..{}", self.clients.len()))
        })
    }

    pub fn client_loss(&self, k: usize, w: &ModelVector) -> Result<f64> {
        let c = self.client(k)?;
        let data = match c {
            ClientObjective::Quadratic { a, b } => {
                let mut s = 0.0;
                for (i, bi) in b.iter().enumerate() {
                    let r = dot(a.row(i), w) - bi;
                    s += r * r;
                }
                0.5 * s
            }
            ClientObjective::Logistic { x, y, .. } => {
                let mut s = 0.0;
                for (i, yi) in y.iter().enumerate() {
                    let z = dot(x.row(i), w);
                    s += softplus(z) - yi * z;
                }
                s / x.rows as f64
            }
        };
        Ok(data + 0.5 * self.weight_decay * w.norm2_sq())
    }

    /// `f(w) = (1/K) Σ_k f_k(w)`.
    pub fn loss(&self, w: &ModelVector) -> Result<f64> {
        let mut s = 0.0;
        for k in 0..self.num_clients() {
            s += self.client_loss(k, w)?;
        }
        Ok(s / self.num_clients() as f64)
    }

    /// Exact `∇f_k(w)`.
    pub fn full_grad(&self, k: usize, w: &ModelVector) -> Result<ModelVector> {
        let c = self.client(k)?;
        if w.dim() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                actual: w.dim(),
            });
        }
        let mut g = vec![0.0; self.d];
        c.row_grad_sum(w, 0..c.samples(), &mut g);
        let s = c.full_scale();
        let wd = self.weight_decay;
        for (gi, wi) in g.iter_mut().zip(w.iter()) {
            *gi = s * *gi + wd * wi;
        }
        Ok(ModelVector::new(g))
    }

    /// `∇f(w) = (1/K) Σ_k ∇f_k(w)`, summed in client order.
    pub fn global_grad(&self, w: &ModelVector) -> Result<ModelVector> {
        let mut acc = ModelVector::zeros(self.d);
        for k in 0..self.num_clients() {
            acc.axpy_in_place(1.0, &self.full_grad(k, w)?)?;
        }
        Ok(acc.scale(1.0 / self.num_clients() as f64))
    }

    /// Gradient of client `k`'s loss restricted to a probe row set, scaled so
    /// that it is an unbiased estimate of `∇f_k` (exact for [`ProbeBatch::Full`]).
    pub fn probe_grad(&self, k: usize, w: &ModelVector, probe: &ProbeBatch) -> Result<ModelVector> {
        match probe {
            ProbeBatch::Full => self.full_grad(k, w),
            ProbeBatch::Fixed(sets) => {
                let rows = sets.get(k).ok_or_else(|| {
                    Error::config("probe_batch", format!("no probe rows for client {k}"))
                })?;
                self.rows_grad(k, w, rows)
            }
        }
    }

    fn rows_grad(&self, k: usize, w: &ModelVector, rows: &[usize]) -> Result<ModelVector> {
        let c = self.client(k)?;
        if rows.is_empty() {
            return Err(Error::config("batch", "empty row set"));
        }
        let mut g = vec![0.0; self.d];
        c.row_grad_sum(w, rows.iter().copied(), &mut g);
        let per_sample = c.samples() as f64 * c.full_scale();
        let s = per_sample / rows.len() as f64;
        let wd = self.weight_decay;
        for (gi, wi) in g.iter_mut().zip(w.iter()) {
            *gi = s * *gi + wd * wi;
        }
        Ok(ModelVector::new(g))
    }

    /// Mini-batch gradient: mean of `batch_size` per-sample gradients drawn
    /// with replacement. A batch equal to the local dataset size is a full pass.
    pub fn stochastic_grad(
        &self,
        k: usize,
        w: &ModelVector,
        batch_size: usize,
        stream: &RandomStream,
    ) -> Result<ModelVector> {
        let n = self.client(k)?.samples();
        if batch_size == 0 || batch_size > n {
            return Err(Error::config(
                "batch_size",
                format!("must satisfy 1 <= batch_size <= n_k = {n}"),
            ));
        }
        if batch_size == n {
            return self.full_grad(k, w);
        }
        let mut rng = stream.rng();
        let rows: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        self.rows_grad(k, w, &rows)
    }

    /// Exact Hessian of a quadratic client, `A_kᵀA_k + λI`.
    pub fn client_hessian(&self, k: usize) -> Result<DMatrix<f64>> {
        match self.client(k)? {
            ClientObjective::Quadratic { a, .. } => {
                Ok(a.gram() + DMatrix::identity(self.d, self.d) * self.weight_decay)
            }
            ClientObjective::Logistic { .. } => Err(Error::config(
                "task.kind",
                "closed-form Hessian only exists for quadratic clients",
            )),
        }
    }

    /// Hessian of a quadratic client restricted to a probe row set.
    pub fn probe_hessian(&self, k: usize, probe: &ProbeBatch) -> Result<DMatrix<f64>> {
        match probe {
            ProbeBatch::Full => self.client_hessian(k),
            ProbeBatch::Fixed(sets) => match self.client(k)? {
                ClientObjective::Quadratic { a, .. } => {
                    let rows = &sets[k];
                    let scale = a.rows as f64 / rows.len() as f64;
                    let mut h = DMatrix::identity(self.d, self.d) * self.weight_decay;
                    for &i in rows {
                        let r = DVector::from_row_slice(a.row(i));
                        h += &r * r.transpose() * scale;
                    }
                    Ok(h)
                }
                ClientObjective::Logistic { .. } => Err(Error::config(
                    "task.kind",
                    "closed-form Hessian only exists for quadratic clients",
                )),
            },
        }
    }

    /// Smoothness bound of one client.
    pub fn client_smoothness(&self, k: usize) -> Result<f64> {
        let c = self.client(k)?;
        let lam = match c {
            ClientObjective::Quadratic { a, .. } => power_iteration(a)?,
            ClientObjective::Logistic { x, .. } => power_iteration(x)? / (4.0 * x.rows as f64),
        };
        Ok(lam + self.weight_decay)
    }

    /// Minimizer of client `k`: exact for quadratics, gradient descent for
    /// logistic clients.
    pub fn client_minimizer(&self, k: usize) -> Result<ModelVector> {
        match self.client(k)? {
            ClientObjective::Quadratic { a, b } => {
                let h = self.client_hessian(k)?;
                let rhs = DVector::from_vec(a.rmatvec(b));
                solve_spd(h, rhs)
            }
            ClientObjective::Logistic { .. } => {
                let l = self.client_smoothness(k)?;
                self.descend(ModelVector::zeros(self.d), l, |w| self.full_grad(k, w))
            }
        }
    }

    /// Minimizer of the global objective.
    pub fn global_minimizer(&self) -> Result<ModelVector> {
        if self.is_quadratic() {
            let mut h = DMatrix::zeros(self.d, self.d);
            let mut rhs = DVector::zeros(self.d);
            for (k, c) in self.clients.iter().enumerate() {
                if let ClientObjective::Quadratic { a, b } = c {
                    h += self.client_hessian(k)?;
                    rhs += DVector::from_vec(a.rmatvec(b));
                }
            }
            solve_spd(h, rhs)
        } else {
            let l = smoothness_constant(self)?;
            self.descend(ModelVector::zeros(self.d), l, |w| self.global_grad(w))
        }
    }

    fn descend<F>(&self, mut w: ModelVector, l: f64, grad: F) -> Result<ModelVector>
    where
        F: Fn(&ModelVector) -> Result<ModelVector>,
    {
        let step = 1.0 / l;
        for _ in 0..20_000 {
            let g = grad(&w)?;
            if g.norm2_sq() < 1e-20 {
                break;
            }
            w.axpy_in_place(-step, &g)?;
        }
        Ok(w)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let task: FederatedTask =
            serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        FederatedTask::new(task.clients, task.weight_decay)
    }
}

fn solve_spd(h: DMatrix<f64>, rhs: DVector<f64>) -> Result<ModelVector> {
    let x = match h.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => h
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Numeric(e.to_string()))?,
    };
    Ok(ModelVector::new(x.iter().copied().collect()))
}

/// `λ_max(AᵀA)` by power iteration, relative tolerance 1e-6.
pub fn power_iteration(a: &Matrix) -> Result<f64> {
    const TOL: f64 = 1e-6;
    const MAX_ITERS: usize = 10_000;
    let d = a.cols;
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i % 7) as f64)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let w = a.rmatvec(&a.matvec(&v));
        let next = dot(&v, &w);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if (next - lambda).abs() <= TOL * next.abs() {
            return Ok(next);
        }
        lambda = next;
        v = w.into_iter().map(|x| x / norm).collect();
        if !lambda.is_finite() {
            break;
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge in {MAX_ITERS} steps"
    )))
}

/// Global `L = max_k L_k`.
pub fn smoothness_constant(task: &FederatedTask) -> Result<f64> {
    let mut l: f64 = 0.0;
    for k in 0..task.num_clients() {
        l = l.max(task.client_smoothness(k)?);
    }
    Ok(l)
}

/// Fitted Assumption-A3 constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityEstimate {
    pub beta_sq: f64,
    pub nu_sq: f64,
    pub probe_count: usize,
    pub max_violation: f64,
}

/// `(‖∇f(x)‖², (1/K)Σ_k‖∇f_k(x)‖²)` at `x`.
pub fn dissimilarity_pair(task: &FederatedTask, x: &ModelVector) -> Result<(f64, f64)> {
    let mut acc = ModelVector::zeros(task.d);
    let mut h = 0.0;
    for k in 0..task.num_clients() {
        let g = task.full_grad(k, x)?;
        h += g.norm2_sq();
        acc.axpy_in_place(1.0, &g)?;
    }
    let kk = task.num_clients() as f64;
    Ok((acc.scale(1.0 / kk).norm2_sq(), h / kk))
}

/// Probe points: Gaussian clouds at several radii around the origin and
/// around every client minimizer.
pub fn dissimilarity_probes(
    task: &FederatedTask,
    probes: usize,
    stream: &RandomStream,
) -> Result<Vec<ModelVector>> {
    let minimizers: Vec<ModelVector> = (0..task.num_clients())
        .map(|k| task.client_minimizer(k))
        .collect::<Result<_>>()?;
    let scale = minimizers
        .iter()
        .map(|m| m.norm())
        .fold(1.0_f64, f64::max);
    const RADII: [f64; 4] = [0.25, 1.0, 4.0, 16.0];
    let d = task.d;
    let mut out = Vec::with_capacity(probes);
    for i in 0..probes {
        let z = stream.step(i).draw_gaussian(d);
        let r = RADII[i % RADII.len()] * scale / (d as f64).sqrt();
        let center = if i % 2 == 0 {
            None
        } else {
            Some(&minimizers[(i / 2) % minimizers.len()])
        };
        let p: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(j, zj)| center.map_or(0.0, |c| c[j]) + r * zj)
            .collect();
        out.push(ModelVector::new(p));
    }
    Ok(out)
}

/// Smallest `(β², ν²)`, `β² ≥ 1`, `ν² ≥ 0`, minimizing the area under
/// `h = β²g + ν²` on `[0, g_max]` while lying above every `(g, h)` pair.
pub fn fit_envelope(pairs: &[(f64, f64)]) -> (f64, f64) {
    let g_max = pairs.iter().map(|p| p.0).fold(0.0_f64, f64::max);
    let nu_for = |beta: f64| {
        pairs
            .iter()
            .map(|&(g, h)| h - beta * g)
            .fold(0.0_f64, f64::max)
    };
    if g_max == 0.0 {
        return (1.0, nu_for(1.0));
    }
    // Upper convex hull over g; edge slopes are the breakpoints of the
    // piecewise-linear objective in β².
    let mut pts: Vec<(f64, f64)> = pairs.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let mut candidates = vec![1.0];
    for w in hull.windows(2) {
        let dg = w[1].0 - w[0].0;
        if dg > 0.0 {
            candidates.push((w[1].1 - w[0].1) / dg);
        }
    }
    // slope at which the envelope reaches ν² = 0
    let zero_slope = pairs
        .iter()
        .filter(|p| p.0 > 0.0)
        .map(|&(g, h)| h / g)
        .fold(f64::NEG_INFINITY, f64::max);
    if zero_slope.is_finite() {
        candidates.push(zero_slope);
    }
    let objective = |beta: f64| nu_for(beta) * g_max + 0.5 * beta * g_max * g_max;
    let mut best = (1.0, nu_for(1.0));
    let mut best_obj = objective(1.0);
    for beta in candidates.into_iter().filter(|b| *b >= 1.0 && b.is_finite()) {
        let obj = objective(beta);
        if obj < best_obj {
            best_obj = obj;
            best = (beta, nu_for(beta));
        }
    }
    best
}

/// Largest `h − (β²g + ν²)` over probe points.
pub fn max_violation(
    task: &FederatedTask,
    beta_sq: f64,
    nu_sq: f64,
    points: &[ModelVector],
) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for x in points {
        let (g, h) = dissimilarity_pair(task, x)?;
        worst = worst.max(h - (beta_sq * g + nu_sq));
    }
    Ok(worst)
}

pub fn estimate_dissimilarity(
    task: &FederatedTask,
    probes: usize,
    stream: &RandomStream,
) -> Result<DissimilarityEstimate> {
    if probes < 10 {
        return Err(Error::config("probes", "need at least 10 probe points"));
    }
    let points = dissimilarity_probes(task, probes, stream)?;
    let pairs: Vec<(f64, f64)> = points
        .iter()
        .map(|x| dissimilarity_pair(task, x))
        .collect::<Result<_>>()?;
    let (beta_sq, mut nu_sq) = fit_envelope(&pairs);
    // absorb rounding so the certificate holds exactly on the fit set
    let viol = |nu: f64| {
        pairs
            .iter()
            .map(|&(g, h)| h - (beta_sq * g + nu))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut v = viol(nu_sq);
    while v > 0.0 {
        nu_sq += v;
        v = viol(nu_sq);
    }
    Ok(DissimilarityEstimate {
        beta_sq,
        nu_sq,
        probe_count: probes,
        max_violation: v,
    })
}

/// Monte-Carlo `σ² = max_k E‖∇f_k(w; ζ) − ∇f_k(w)‖²`.
pub fn estimate_noise(
    task: &FederatedTask,
    w: &ModelVector,
    batch_size: usize,
    samples: usize,
    stream: &RandomStream,
) -> Result<f64> {
    if samples < 100 {
        return Err(Error::config("samples", "need at least 100 Monte-Carlo samples"));
    }
    let mut worst: f64 = 0.0;
    for k in 0..task.num_clients() {
        let full = task.full_grad(k, w)?;
        let b = batch_size.min(task.clients[k].samples());
        let mut acc = 0.0;
        for s in 0..samples {
            let g = task.stochastic_grad(k, w, b, &stream.client(k).step(s))?;
            acc += g.sub(&full)?.norm2_sq();
        }
        worst = worst.max(acc / samples as f64);
    }
    Ok(worst)
}

/// Parameters of the heterogeneous least-squares generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTaskSpec {
    pub clients: usize,
    pub d: usize,
    pub samples_per_client: usize,
    /// Spread of the client minimizers around the shared one.
    pub heterogeneity: f64,
    /// Ratio between the largest and smallest column scale.
    pub condition: f64,
    /// Standard deviation of label noise.
    pub noise: f64,
    pub weight_decay: f64,
}

/// Heterogeneous least squares: `A_k = G_k D` with Gaussian `G_k` and a
/// log-spaced column scaling `D`, `b_k = A_k(w̄ + h z_k) + ε`.
pub fn make_quadratic_task(spec: &QuadraticTaskSpec, stream: &RandomStream) -> Result<FederatedTask> {
    let (kk, d, n) = (spec.clients, spec.d, spec.samples_per_client);
    if kk == 0 || d == 0 || n == 0 {
        return Err(Error::config("task", "clients, d and samples_per_client must be >= 1"));
    }
    if !(spec.condition >= 1.0) {
        return Err(Error::config("task.condition", "must be >= 1"));
    }
    let col_scale: Vec<f64> = (0..d)
        .map(|j| {
            let t = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.0 };
            spec.condition.powf(-0.5 * t)
        })
        .collect();
    let shared = stream.step(0).client(usize::MAX >> 1).draw_gaussian(d);
    let mut clients = Vec::with_capacity(kk);
    for k in 0..kk {
        let s = stream.client(k);
        let g = s.step(1).draw_gaussian(n * d);
        let z = s.step(2).draw_gaussian(d);
        let eps = s.step(3).draw_gaussian(n);
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        let data: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(idx, gij)| gij * inv_sqrt_n * col_scale[idx % d])
            .collect();
        let a = Matrix::new(n, d, data)?;
        let target: Vec<f64> = (0..d)
            .map(|j| shared[j] + spec.heterogeneity * z[j])
            .collect();
        let mut b = a.matvec(&target);
        for (bi, e) in b.iter_mut().zip(&eps) {
            *bi += spec.noise * inv_sqrt_n * e;
        }
        clients.push(ClientObjective::Quadratic { a, b });
    }
    FederatedTask::new(clients, spec.weight_decay)
}

/// Two identity-Hessian clients pulled apart along the first axis:
/// `f_1 = ½‖w − e₁‖²`, `f_2 = ½‖w + e₁‖²`, so `(1/2)Σ‖∇f_k‖² = ‖∇f‖² + 1`
/// exactly and A3 holds with `β² = 1`, `ν² = 1`.
pub fn two_client_quadratic(d: usize) -> Result<FederatedTask> {
    if d == 0 {
        return Err(Error::config("task.d", "dimension must be at least 1"));
    }
    let mut clients = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let mut b = vec![0.0; d];
        b[0] = sign;
        clients.push(ClientObjective::Quadratic {
            a: Matrix::identity(d),
            b,
        });
    }
    FederatedTask::new(clients, 0.0)
}

/// Class-clustered Gaussian blobs split across `K` clients with per-class
/// shares drawn from `Dirichlet(γ, …, γ)`. Labels are `class mod 2`.
pub fn make_dirichlet_task(
    classes: usize,
    num_clients: usize,
    gamma: f64,
    per_class: usize,
    d: usize,
    weight_decay: f64,
    stream: &RandomStream,
) -> Result<FederatedTask> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::config("task.gamma", "concentration must be > 0"));
    }
    if num_clients == 0 || classes == 0 || d == 0 {
        return Err(Error::config("task", "classes, clients and d must be >= 1"));
    }
    if per_class * classes < num_clients {
        return Err(Error::config(
            "task.per_class",
            format!(
                "{} samples cannot give each of {num_clients} clients one sample",
                per_class * classes
            ),
        ));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    // features
    let mut points: Vec<Vec<Vec<f64>>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let s = stream.purpose(Purpose::TaskData).client(c);
        let mu = s.step(0).draw_gaussian(d);
        let noise = s.step(1).draw_gaussian(per_class * d);
        points.push(
            (0..per_class)
                .map(|i| {
                    (0..d)
                        .map(|j| (2.0 * mu[j] + noise[i * d + j]) * inv_sqrt_d)
                        .collect()
                })
                .collect(),
        );
    }
    let counts = dirichlet_counts(classes, num_clients, gamma, per_class, stream)?;
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); num_clients];
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); num_clients];
    let mut origin: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for c in 0..classes {
        let mut next = 0;
        for k in 0..num_clients {
            for _ in 0..counts[c][k] {
                rows[k].extend_from_slice(&points[c][next]);
                labels[k].push((c % 2) as f64);
                origin[k].push(c);
                next += 1;
            }
        }
    }
    let clients = rows
        .into_iter()
        .zip(labels)
        .zip(origin)
        .map(|((x, y), classes)| {
            let n = y.len();
            Ok(ClientObjective::Logistic {
                x: Matrix::new(n, d, x)?,
                y,
                classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FederatedTask::new(clients, weight_decay)
}

/// Per-class, per-client sample counts. Shares are redrawn until every
/// client holds at least one sample.
fn dirichlet_counts(
    classes: usize,
    num_clients: usize,
    gamma: f64,
    per_class: usize,
    stream: &RandomStream,
) -> Result<Vec<Vec<usize>>> {
    let gamma_dist = Gamma::new(gamma, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    const MAX_ATTEMPTS: usize = 10_000;
    for attempt in 0..MAX_ATTEMPTS {
        let mut counts = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut rng = stream
                .purpose(Purpose::Partition)
                .round(attempt)
                .client(c)
                .rng();
            let mut shares: Vec<f64> = (0..num_clients).map(|_| gamma_dist.sample(&mut rng)).collect();
            let total: f64 = shares.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                // every share underflowed; give the class to one random client
                shares = vec![0.0; num_clients];
                shares[rng.random_range(0..num_clients)] = 1.0;
            } else {
                shares.iter_mut().for_each(|s| *s /= total);
            }
            counts.push(largest_remainder(&shares, per_class));
        }
        let ok = (0..num_clients).all(|k| counts.iter().any(|row| row[k] > 0));
        if ok {
            return Ok(counts);
        }
    }
    Err(Error::config(
        "task.gamma",
        format!("no partition with non-empty clients after {MAX_ATTEMPTS} draws"),
    ))
}

/// Integer apportionment of `total` by `shares` (largest remainder, lower
/// index first on ties).
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Per-client class histograms of a Dirichlet task.
pub fn label_histograms(task: &FederatedTask, classes: usize) -> Vec<Vec<usize>> {
    task.clients
        .iter()
        .map(|c| {
            let mut h = vec![0; classes];
            if let ClientObjective::Logistic { classes: cs, .. } = c {
                for &cl in cs {
                    if cl < classes {
                        h[cl] += 1;
                    }
                }
            }
            h
        })
        .collect()
}

/// A fixed probe row set: `size` rows per client drawn once.
pub fn draw_probe_batch(task: &FederatedTask, size: usize, stream: &RandomStream) -> ProbeBatch {
    let sets = task
        .clients
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut rng = stream.purpose(Purpose::Probe).client(k).rng();
            let n = c.samples();
            (0..size.max(1)).map(|_| rng.random_range(0..n)).collect()
        })
        .collect();
    ProbeBatch::Fixed(sets)
}

/// Random direction helper used by tests and probes.
pub fn gaussian_point(d: usize, scale: f64, stream: &RandomStream) -> ModelVector {
    let mut rng = stream.rng();
    ModelVector::new((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}
