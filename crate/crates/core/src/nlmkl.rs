//! Polynomial (degree 1 or 2) combination of the kernel bank with weights
//! learned by projected gradient descent on the SVR dual optimum.
//!
//! For degree 2 the combined kernel is `K_η = (Σ_m η_m K_m)∘(Σ_m η_m K_m)`,
//! i.e. `Σ_{m,h} η_m η_h K_m∘K_h`. The outer problem minimises the dual
//! optimum `F(η)` over `M = {η ≥ 0, ‖η − η₀‖ ≤ Λ}`; by the envelope theorem
//! `∂F/∂η_k = −βᵀ(K_k∘S)β` with `S = Σ_h η_h K_h`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelLabel, KernelMatrix};
use crate::svr::{objective_parts, train_svr_warm, SvrConfig, SvrModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MklConfig {
    /// Ball centre, one entry per bank kernel.
    pub eta0: Vec<f64>,
    /// Ball radius.
    pub lambda: f64,
    /// Initial step size of every outer iteration.
    pub gamma: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub degree: u8,
    /// Halve the step while the objective would increase.
    pub backtracking: bool,
    pub max_halvings: usize,
}

impl Default for MklConfig {
    fn default() -> Self {
        let p = KernelLabel::BANK.len();
        MklConfig {
            eta0: vec![1.0 / (p as f64).sqrt(); p],
            lambda: 1.0,
            gamma: 0.1,
            max_iters: 20,
            tol: 1e-5,
            degree: 2,
            backtracking: true,
            max_halvings: 10,
        }
    }
}

impl MklConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::param(format!(
                "Lambda = {} must be positive",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::param(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        if self.eta0.is_empty() || self.eta0.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::param("eta0 must be a non-empty non-negative vector"));
        }
        if !matches!(self.degree, 1 | 2) {
            return Err(Error::param(format!(
                "degree {} must be 1 or 2",
                self.degree
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MklState {
    pub eta: Vec<f64>,
    /// Objective after each accepted iterate, starting at `η₀`.
    pub trace: Vec<f64>,
    /// Weights matching each entry of `trace`.
    pub eta_trace: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

impl MklState {
    /// `iteration,F,eta_0..eta_{P}` rows.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let p = self.eta.len();
        let mut header = vec!["iteration".to_string(), "F".to_string()];
        header.extend((0..p).map(|k| format!("eta_{k}")));
        w.write_record(&header)?;
        for (it, (f, eta)) in self.trace.iter().zip(&self.eta_trace).enumerate() {
            let mut row = vec![it.to_string(), f.to_string()];
            row.extend(eta.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_dims(mats: &[&DMatrix<f64>], eta: &[f64]) -> Result<usize> {
    if mats.len() != eta.len() {
        return Err(Error::param(format!(
            "{} kernels for {} weights",
            mats.len(),
            eta.len()
        )));
    }
    let n = mats.first().map_or(0, |m| m.nrows());
    for m in mats {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::param(format!(
                "kernel of shape {}x{} among {n}x{n} kernels",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(n)
}

fn weighted_sum(mats: &[&DMatrix<f64>], eta: &[f64], n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, n);
    for (m, &e) in mats.iter().zip(eta) {
        if e != 0.0 {
            s += *m * e;
        }
    }
    s
}

/// Combined Gram matrix over plain matrices.
pub fn combine_matrices(mats: &[&DMatrix<f64>], eta: &[f64], degree: u8) -> Result<DMatrix<f64>> {
    let n = check_dims(mats, eta)?;
    let s = weighted_sum(mats, eta, n);
    match degree {
        1 => Ok(s),
        2 => Ok(s.map(|v| v * v)),
        d => Err(Error::param(format!("degree {d} must be 1 or 2"))),
    }
}

pub fn combine_kernels<K: AsRef<KernelMatrix>>(
    kernels: &[K],
    eta: &[f64],
    degree: u8,
) -> Result<KernelMatrix> {
    let mats: Vec<&DMatrix<f64>> = kernels.iter().map(|k| &k.as_ref().matrix).collect();
    Ok(KernelMatrix::new(
        KernelLabel::Combined,
        combine_matrices(&mats, eta, degree)?,
        false,
    ))
}

/// Combined kernel values between `user` and each of `train_users`.
pub fn combined_row<K: AsRef<KernelMatrix>>(
    kernels: &[K],
    eta: &[f64],
    degree: u8,
    user: usize,
    train_users: &[usize],
) -> Vec<f64> {
    train_users
        .iter()
        .map(|&t| {
            let s: f64 = kernels
                .iter()
                .zip(eta)
                .map(|(k, &e)| e * k.as_ref().matrix[(user, t)])
                .sum();
            if degree == 2 {
                s * s
            } else {
                s
            }
        })
        .collect()
}

/// Every component of `∂F/∂η` at duals `β` trained on the combination.
fn gradient_all(beta: &[f64], mats: &[&DMatrix<f64>], eta: &[f64], degree: u8) -> Vec<f64> {
    let n = beta.len();
    let support: Vec<usize> = (0..n).filter(|&i| beta[i] != 0.0).collect();
    // W = ββᵀ, times S for degree 2, restricted to the support.
    let s = (degree == 2).then(|| weighted_sum(mats, eta, n));
    let factor = if degree == 2 { 1.0 } else { 0.5 };
    mats.iter()
        .map(|k| {
            let mut acc = 0.0;
            for &i in &support {
                for &j in &support {
                    let w = beta[i] * beta[j] * s.as_ref().map_or(1.0, |s| s[(i, j)]);
                    acc += w * k[(i, j)];
                }
            }
            -factor * acc
        })
        .collect()
}

/// Component `k` of `∂F/∂η` for degree 2: `−βᵀ(K_k∘S)β`, `S = Σ_h η_h K_h`.
pub fn mkl_gradient(
    alpha_plus: &[f64],
    alpha_minus: &[f64],
    kernels: &[&DMatrix<f64>],
    eta: &[f64],
    k: usize,
) -> Result<f64> {
    let n = check_dims(kernels, eta)?;
    if alpha_plus.len() != n || alpha_minus.len() != n {
        return Err(Error::param(format!(
            "{} / {} duals for {n}x{n} kernels",
            alpha_plus.len(),
            alpha_minus.len()
        )));
    }
    if k >= kernels.len() {
        return Err(Error::param(format!("kernel index {k} out of range")));
    }
    let beta: Vec<f64> = alpha_plus
        .iter()
        .zip(alpha_minus)
        .map(|(p, m)| p - m)
        .collect();
    Ok(gradient_all(&beta, kernels, eta, 2)[k])
}

/// Euclidean projection onto `{v ≥ 0, ‖v − η₀‖ ≤ Λ}` (requires `η₀ ≥ 0`).
///
/// The minimiser has the form `v(μ) = max(0, (η + μη₀)/(1 + μ))` for the ball
/// multiplier `μ ≥ 0`; `‖v(μ) − η₀‖` falls monotonically in `μ`, so `μ` is
/// found by bisection when the clipped point lies outside the ball.
pub fn project_onto_m(eta: &[f64], eta0: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::param(format!("Lambda = {lambda} must be positive")));
    }
    if eta.len() != eta0.len() {
        return Err(Error::Dimension {
            expected: eta0.len(),
            got: eta.len(),
        });
    }
    if eta0.iter().any(|&c| c < 0.0) {
        return Err(Error::param("ball centre must be non-negative"));
    }
    let at = |mu: f64| -> Vec<f64> {
        eta.iter()
            .zip(eta0)
            .map(|(&e, &c)| ((e + mu * c) / (1.0 + mu)).max(0.0))
            .collect()
    };
    let clipped = at(0.0);
    if distance(&clipped, eta0) <= lambda {
        return Ok(clipped);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while distance(&at(hi), eta0) > lambda {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Numerical("weight projection diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if distance(&at(mid), eta0) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    // `hi` is always feasible.
    Ok(at(hi))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One regression problem sharing the weight vector: kernel submatrices on
/// its training users, and their targets.
struct Task {
    mats: Vec<DMatrix<f64>>,
    y: Vec<f64>,
}

impl Task {
    fn refs(&self) -> Vec<&DMatrix<f64>> {
        self.mats.iter().collect()
    }
}

/// Inner solves at one `η`: models plus the summed objective.
fn solve_all(
    tasks: &[Task],
    eta: &[f64],
    degree: u8,
    svr: &SvrConfig,
    warm: Option<&[SvrModel]>,
) -> Result<(Vec<SvrModel>, f64)> {
    let mut models = Vec::with_capacity(tasks.len());
    let mut total = 0.0;
    for (t, task) in tasks.iter().enumerate() {
        let k = combine_matrices(&task.refs(), eta, degree)?;
        let start = warm.map(|w| (w[t].alpha_plus.as_slice(), w[t].alpha_minus.as_slice()));
        let model = train_svr_warm(&k, &task.y, svr, start)?;
        total += objective_parts(
            &model.alpha_plus,
            &model.alpha_minus,
            &k,
            &task.y,
            svr.epsilon,
        )?;
        models.push(model);
    }
    Ok((models, total))
}

fn fit_tasks(
    tasks: &[Task],
    svr_config: &SvrConfig,
    mkl: &MklConfig,
) -> Result<(MklState, Vec<SvrModel>)> {
    mkl.validate()?;
    let p = mkl.eta0.len();
    for task in tasks {
        if task.mats.len() != p {
            return Err(Error::param(format!(
                "{} kernels for {p} weights",
                task.mats.len()
            )));
        }
    }
    // The bank kernels are validated once; their combinations stay PSD.
    let svr = SvrConfig {
        check_psd: false,
        ..*svr_config
    };
    let degree = mkl.degree;
    let mut eta = project_onto_m(&mkl.eta0, &mkl.eta0, mkl.lambda)?;
    let (mut models, mut f) = solve_all(tasks, &eta, degree, &svr, None)
        .map_err(|e| Error::Training(format!("iteration 0: {e}")))?;
    let mut trace = vec![f];
    let mut eta_trace = vec![eta.clone()];
    let mut converged = mkl.max_iters == 0;
    let mut iterations = 0;

    for it in 1..=mkl.max_iters {
        let mut grad = vec![0.0; p];
        for (task, model) in tasks.iter().zip(&models) {
            for (g, d) in grad
                .iter_mut()
                .zip(gradient_all(&model.beta, &task.refs(), &eta, degree))
            {
                *g += d;
            }
        }

        let mut step = mkl.gamma;
        let mut accepted = None;
        let attempts = if mkl.backtracking {
            mkl.max_halvings + 1
        } else {
            1
        };
        for _ in 0..attempts {
            let raw: Vec<f64> = eta.iter().zip(&grad).map(|(e, g)| e - step * g).collect();
            let cand = project_onto_m(&raw, &mkl.eta0, mkl.lambda)?;
            let (cand_models, cand_f) = solve_all(tasks, &cand, degree, &svr, Some(&models))
                .map_err(|e| Error::Training(format!("iteration {it}: {e}")))?;
            if !mkl.backtracking || cand_f <= f {
                accepted = Some((cand, cand_models, cand_f));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cand_models, cand_f)) = accepted else {
            converged = true;
            break;
        };
        iterations = it;
        let moved = distance(&cand, &eta);
        let change = (cand_f - f).abs();
        eta = cand;
        models = cand_models;
        f = cand_f;
        trace.push(f);
        eta_trace.push(eta.clone());
        if moved < mkl.tol || change < mkl.tol {
            converged = true;
            break;
        }
    }

    Ok((
        MklState {
            eta,
            trace,
            eta_trace,
            converged,
            iterations,
        },
        models,
    ))
}

fn make_task<K: AsRef<KernelMatrix>>(
    kernels: &[K],
    train_users: &[usize],
    y: &[f64],
) -> Result<Task> {
    if train_users.len() != y.len() {
        return Err(Error::Dimension {
            expected: train_users.len(),
            got: y.len(),
        });
    }
    if train_users.is_empty() {
        return Err(Error::Training("no training points".into()));
    }
    Ok(Task {
        mats: kernels
            .iter()
            .map(|k| k.as_ref().select(train_users, train_users))
            .collect(),
        y: y.to_vec(),
    })
}

/// Learns `η` and the SVR for one training set. `kernels` must follow
/// [`KernelLabel::BANK`] order, all-ones first.
pub fn fit_nlmkl<K: AsRef<KernelMatrix>>(
    kernels: &[K],
    train_users: &[usize],
    y: &[f64],
    svr_config: &SvrConfig,
    mkl_config: &MklConfig,
) -> Result<(MklState, SvrModel)> {
    let task = make_task(kernels, train_users, y)?;
    let (state, mut models) = fit_tasks(std::slice::from_ref(&task), svr_config, mkl_config)?;
    let mut model = models.pop().expect("one task");
    model.train_users = train_users.to_vec();
    Ok((state, model))
}

/// One `η` for several training sets, minimising the summed dual optimum.
pub fn fit_nlmkl_shared<K: AsRef<KernelMatrix>>(
    kernels: &[K],
    problems: &[(Vec<usize>, Vec<f64>)],
    svr_config: &SvrConfig,
    mkl_config: &MklConfig,
) -> Result<(MklState, Vec<SvrModel>)> {
    if problems.is_empty() {
        return Err(Error::Training("no training problems".into()));
    }
    let tasks = problems
        .iter()
        .map(|(users, y)| make_task(kernels, users, y))
        .collect::<Result<Vec<_>>>()?;
    let (state, mut models) = fit_tasks(&tasks, svr_config, mkl_config)?;
    for (m, (users, _)) in models.iter_mut().zip(problems) {
        m.train_users = users.clone();
    }
    Ok((state, models))
}
