//! ε-insensitive support vector regression on a precomputed Gram matrix.
//!
//! The dual is solved in the usual 2l-variable form: `α = [a⁺; a⁻]` with
//! signs `s = [+1…; −1…]`, `Q_tu = s_t s_u K(t mod l, u mod l)` and linear term
//! `p = [ε − y; ε + y]`, minimising `½αᵀQα + pᵀα` subject to `0 ≤ α ≤ C` and
//! `sᵀα = 0`. Working pairs are chosen with second-order information.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use crate::kernels::validate_psd;

/// Substitute curvature for a non-positive second derivative along the pair.
const TAU: f64 = 1e-12;
/// Passes without a better KKT gap before training gives up.
const STALL_PASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrConfig {
    #[serde(rename = "C")]
    pub c: f64,
    pub epsilon: f64,
    /// Stop once the maximal KKT violation drops below this.
    pub tol: f64,
    /// Upper bound on passes; a pass is `2l` pair updates.
    pub max_passes: usize,
    /// Clamp predictions to the rating scale.
    pub clamp: bool,
    /// Check the Gram matrix for positive semidefiniteness before training.
    pub check_psd: bool,
}

impl Default for SvrConfig {
    fn default() -> Self {
        SvrConfig {
            c: 1.0,
            epsilon: 0.5,
            tol: 1e-6,
            max_passes: 10_000,
            clamp: true,
            check_psd: true,
        }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::param(format!("C = {} must be positive", self.c)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!(
                "epsilon = {} must be non-negative",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param(format!(
                "tolerance {} must be positive",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    /// `a⁺ − a⁻` per training point.
    pub beta: Vec<f64>,
    pub bias: f64,
    /// Training positions with non-zero `beta`.
    pub support: Vec<usize>,
    /// Dataset user index of every training point.
    pub train_users: Vec<usize>,
    pub alpha_plus: Vec<f64>,
    pub alpha_minus: Vec<f64>,
    pub config: SvrConfig,
    pub converged: bool,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub kkt_gap: f64,
}

#[derive(Serialize)]
struct ExportedModel<'a> {
    train_users: Vec<&'a str>,
    beta: &'a [f64],
    bias: f64,
    config: &'a SvrConfig,
    converged: bool,
}

impl SvrModel {
    /// A model with no support vectors that always predicts `bias`.
    pub fn constant(bias: f64, config: SvrConfig) -> Self {
        SvrModel {
            beta: Vec::new(),
            bias,
            support: Vec::new(),
            train_users: Vec::new(),
            alpha_plus: Vec::new(),
            alpha_minus: Vec::new(),
            config,
            converged: true,
            iterations: 0,
            kkt_gap: 0.0,
        }
    }

    pub fn train_len(&self) -> usize {
        self.beta.len()
    }

    /// `Σ β_n k_n + b` without clamping.
    pub fn predict_raw(&self, k_row: &[f64]) -> Result<f64> {
        if k_row.len() != self.beta.len() {
            return Err(Error::param(format!(
                "kernel row has {} entries for {} training points",
                k_row.len(),
                self.beta.len()
            )));
        }
        Ok(self
            .support
            .iter()
            .map(|&n| self.beta[n] * k_row[n])
            .sum::<f64>()
            + self.bias)
    }

    /// Prediction, clamped to the rating scale when the model's config asks.
    pub fn predict(&self, k_row: &[f64]) -> Result<f64> {
        let raw = self.predict_raw(k_row)?;
        Ok(if self.config.clamp {
            raw.clamp(MIN_RATING, MAX_RATING)
        } else {
            raw
        })
    }

    pub fn to_json(&self, user_ids: &[String]) -> Result<String> {
        let train_users = self
            .train_users
            .iter()
            .map(|&u| {
                user_ids
                    .get(u)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Reference(format!("no id for user index {u}")))
            })
            .collect::<Result<_>>()?;
        Ok(serde_json::to_string_pretty(&ExportedModel {
            train_users,
            beta: &self.beta,
            bias: self.bias,
            config: &self.config,
            converged: self.converged,
        })?)
    }

    pub fn export_json(&self, path: &Path, user_ids: &[String]) -> Result<()> {
        std::fs::write(path, self.to_json(user_ids)?).map_err(|e| Error::io(path, e))
    }
}

/// `F = βᵀy − ε Σ(a⁺ + a⁻) − ½ βᵀKβ`.
pub fn dual_objective(model: &SvrModel, k: &DMatrix<f64>, y: &[f64], epsilon: f64) -> Result<f64> {
    objective_parts(&model.alpha_plus, &model.alpha_minus, k, y, epsilon)
}

pub(crate) fn objective_parts(
    ap: &[f64],
    am: &[f64],
    k: &DMatrix<f64>,
    y: &[f64],
    epsilon: f64,
) -> Result<f64> {
    let l = y.len();
    if ap.len() != l || am.len() != l || k.nrows() != l || k.ncols() != l {
        return Err(Error::param(format!(
            "objective dimensions disagree: {} targets, {}x{} kernel, {}/{} duals",
            l,
            k.nrows(),
            k.ncols(),
            ap.len(),
            am.len()
        )));
    }
    let beta: Vec<f64> = ap.iter().zip(am).map(|(p, m)| p - m).collect();
    let mut quad = 0.0;
    for i in 0..l {
        if beta[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..l {
            row += k[(i, j)] * beta[j];
        }
        quad += beta[i] * row;
    }
    let linear: f64 = beta.iter().zip(y).map(|(b, y)| b * y).sum();
    let slack: f64 = ap.iter().zip(am).map(|(p, m)| p + m).sum();
    Ok(linear - epsilon * slack - 0.5 * quad)
}

pub fn train_svr(k: &DMatrix<f64>, y: &[f64], config: &SvrConfig) -> Result<SvrModel> {
    train_svr_warm(k, y, config, None)
}

/// Trains from the given `(a⁺, a⁻)` when they are feasible for `config`,
/// from zero otherwise.
pub fn train_svr_warm(
    k: &DMatrix<f64>,
    y: &[f64],
    config: &SvrConfig,
    warm: Option<(&[f64], &[f64])>,
) -> Result<SvrModel> {
    config.validate()?;
    let l = y.len();
    if l == 0 {
        return Err(Error::Training("no training points".into()));
    }
    if k.nrows() != l || k.ncols() != l {
        return Err(Error::Dimension {
            expected: l,
            got: k.nrows(),
        });
    }
    if config.check_psd {
        let report = validate_psd(k, 1e-8).map_err(|e| Error::Training(e.to_string()))?;
        if !report.pass {
            return Err(Error::Training(format!(
                "Gram matrix is not positive semidefinite (min eigenvalue {:e})",
                report.min_eig
            )));
        }
    }

    let c = config.c;
    let n2 = 2 * l;
    let sign = |t: usize| if t < l { 1.0 } else { -1.0 };
    let mut alpha = vec![0.0; n2];
    if let Some((ap, am)) = warm {
        if ap.len() == l && am.len() == l && warm_feasible(ap, am, c) {
            alpha[..l].copy_from_slice(ap);
            alpha[l..].copy_from_slice(am);
        }
    }

    // G = Qα + p.
    let mut grad: Vec<f64> = (0..n2)
        .map(|t| {
            if t < l {
                config.epsilon - y[t]
            } else {
                config.epsilon + y[t - l]
            }
        })
        .collect();
    if alpha.iter().any(|&a| a != 0.0) {
        let beta: Vec<f64> = (0..l).map(|n| alpha[n] - alpha[n + l]).collect();
        for i in 0..l {
            let kb: f64 = (0..l).map(|j| k[(i, j)] * beta[j]).sum();
            grad[i] += kb;
            grad[i + l] -= kb;
        }
    }

    let diag: Vec<f64> = (0..l).map(|i| k[(i, i)]).collect();
    let pass_len = n2.max(1);
    let max_iter = config.max_passes.saturating_mul(pass_len).max(1);
    let mut best_gap = f64::INFINITY;
    let mut best_alpha = alpha.clone();
    let mut stalled = 0;
    let mut converged = false;
    let mut gap = f64::INFINITY;
    let mut iter = 0;

    while iter < max_iter {
        // Maximal violating pair, second-order choice of the partner.
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n2 {
            let v = if t < l {
                (alpha[t] < c).then(|| -grad[t])
            } else {
                (alpha[t] > 0.0).then_some(grad[t])
            };
            if let Some(v) = v {
                if v >= gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best_obj = f64::INFINITY;
        if i != usize::MAX {
            let ui = i % l;
            for t in 0..n2 {
                let ut = t % l;
                let (eligible, diff) = if t < l {
                    (alpha[t] > 0.0, gmax + grad[t])
                } else {
                    (alpha[t] < c, gmax - grad[t])
                };
                if !eligible {
                    continue;
                }
                gmax2 = gmax2.max(if t < l { grad[t] } else { -grad[t] });
                if diff > 0.0 {
                    // Q_ii + Q_tt − 2 s_i s_t Q_it reduces to the kernel distance.
                    let mut quad = diag[ui] + diag[ut] - 2.0 * k[(ui, ut)];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(diff * diff) / quad;
                    if obj <= best_obj {
                        best_obj = obj;
                        j = t;
                    }
                }
            }
        }
        gap = gmax + gmax2;
        if gap < config.tol || j == usize::MAX {
            converged = true;
            break;
        }
        if iter % pass_len == 0 {
            if gap < best_gap {
                best_gap = gap;
                best_alpha.copy_from_slice(&alpha);
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= STALL_PASSES {
                    break;
                }
            }
        }
        iter += 1;

        let (ui, uj) = (i % l, j % l);
        let (si, sj) = (sign(i), sign(j));
        let qij = si * sj * k[(ui, uj)];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if si != sj {
            let mut quad = diag[ui] + diag[uj] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = diag[ui] + diag[uj] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        if di != 0.0 || dj != 0.0 {
            for u in 0..l {
                // Q_{u,i} = s_u s_i K(u, ui); the a⁻ half flips sign.
                let d = si * di * k[(u, ui)] + sj * dj * k[(u, uj)];
                grad[u] += d;
                grad[u + l] -= d;
            }
        }
    }

    if !converged {
        if iter >= max_iter {
            log::debug!("SVR stopped at the pass limit with KKT gap {gap:e}");
        } else {
            log::debug!("SVR stalled with KKT gap {best_gap:e}");
        }
        if best_gap < gap {
            alpha = best_alpha;
            gap = best_gap;
            grad = recompute_gradient(k, y, config.epsilon, &alpha);
        }
    }

    let bias = -rho(&alpha, &grad, l, c);
    let alpha_plus = alpha[..l].to_vec();
    let alpha_minus = alpha[l..].to_vec();
    let beta: Vec<f64> = (0..l).map(|n| alpha_plus[n] - alpha_minus[n]).collect();
    let support = (0..l).filter(|&n| beta[n] != 0.0).collect();
    Ok(SvrModel {
        beta,
        bias,
        support,
        train_users: (0..l).collect(),
        alpha_plus,
        alpha_minus,
        config: *config,
        converged,
        iterations: iter,
        kkt_gap: gap,
    })
}

fn warm_feasible(ap: &[f64], am: &[f64], c: f64) -> bool {
    let in_box = ap.iter().chain(am).all(|&a| (0.0..=c).contains(&a));
    let balance: f64 = ap.iter().zip(am).map(|(p, m)| p - m).sum();
    in_box && balance.abs() <= 1e-10 * c.max(1.0) * ap.len() as f64
}

fn recompute_gradient(k: &DMatrix<f64>, y: &[f64], epsilon: f64, alpha: &[f64]) -> Vec<f64> {
    let l = y.len();
    let beta: Vec<f64> = (0..l).map(|n| alpha[n] - alpha[n + l]).collect();
    let mut grad = vec![0.0; 2 * l];
    for i in 0..l {
        let kb: f64 = (0..l).map(|j| k[(i, j)] * beta[j]).sum();
        grad[i] = epsilon - y[i] + kb;
        grad[i + l] = epsilon + y[i] - kb;
    }
    grad
}

/// Offset `ρ` with decision value `Σβk − ρ`: the mean of `s_t G_t` over free
/// variables, or the midpoint of the bounds they imply when none are free.
fn rho(alpha: &[f64], grad: &[f64], l: usize, c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..2 * l {
        let s = if t < l { 1.0 } else { -1.0 };
        let yg = s * grad[t];
        if alpha[t] >= c {
            if s < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if s > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}
