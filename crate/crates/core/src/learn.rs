//! Linear max-margin scorers: one per task, one pooled over tasks, and
//! per-task models coupled through a shared sparse component.
//!
//! Every trainer minimizes `½‖ω‖² + C·Σ hinge(y(ωᵀx + b))` per task, with the
//! bias unregularized. The shared trainer splits `ω = S + B` and adds
//! `λ_S Σ|S| + λ_B Σ_features max_tasks |B|`.

use crate::io::{read_to_string, write_atomic, IoError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("degenerate task {0}: needs both positive and negative examples")]
    DegenerateTask(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("empty model list")]
    EmptyModels,
    #[error("no training tasks")]
    NoTasks,
    #[error("unsupported model format {0}")]
    Format(u32),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Self { mean: vec![0.0; p], stdev: vec![1.0; p] }
    }

    /// Population statistics over the rows of `data`; constant features get
    /// a stdev of 1.
    pub fn fit<'a>(p: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; p];
        let mut sq = vec![0.0; p];
        for r in rows {
            n += 1;
            for ((s, q), v) in sum.iter_mut().zip(&mut sq).zip(r) {
                *s += v;
                *q += v * v;
            }
        }
        if n == 0 {
            return Self::identity(p);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let stdev = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, stdev }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, LearnError> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.mean).zip(&self.stdev).map(|((x, m), s)| (x - m) / s).collect())
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), LearnError> {
    if expected == got {
        Ok(())
    } else {
        Err(LearnError::Dimension { expected, got })
    }
}

/// Training examples of one task, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl TaskData {
    pub fn new(task_id: usize, p: usize, rows: &[Vec<f64>], y: &[f64]) -> Result<Self, LearnError> {
        if rows.len() != y.len() {
            return Err(LearnError::InvalidData(format!("{} rows but {} labels", rows.len(), y.len())));
        }
        let mut x = Vec::with_capacity(rows.len() * p);
        for r in rows {
            check_dim(p, r.len())?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(LearnError::InvalidData(format!("task {task_id}: non-finite feature")));
            }
            x.extend_from_slice(r);
        }
        if let Some(l) = y.iter().find(|l| **l != 1.0 && **l != -1.0) {
            return Err(LearnError::InvalidData(format!("task {task_id}: label {l} not in {{+1, -1}}")));
        }
        Ok(Self { task_id, p, x, y: y.to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.x.chunks_exact(self.p.max(1)).take(self.y.len())
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|l| **l > 0.0).count()
    }

    fn check_two_class(&self) -> Result<(), LearnError> {
        let pos = self.positives();
        if pos == 0 || pos == self.len() {
            Err(LearnError::DegenerateTask(self.task_id))
        } else {
            Ok(())
        }
    }

    pub fn standardized(&self, st: &Standardizer) -> Result<Self, LearnError> {
        check_dim(self.p, st.dim())?;
        let mut x = self.x.clone();
        for r in x.chunks_exact_mut(self.p.max(1)) {
            for ((v, m), s) in r.iter_mut().zip(&st.mean).zip(&st.stdev) {
                *v = (*v - m) / s;
            }
        }
        Ok(Self { x, ..self.clone() })
    }

    fn fit_standardizer(&self) -> Standardizer {
        Standardizer::fit(self.p, self.rows())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Hinge-loss weight.
    pub c: f64,
    pub lambda_s: f64,
    pub lambda_b: f64,
    /// Relative objective decrease over 10 outer iterations that stops the
    /// shared solver.
    pub tol: f64,
    /// KKT violation at which a single SVM solve stops.
    pub svm_tol: f64,
    /// Outer iterations of the shared solver; coordinate epochs of an SVM solve.
    pub max_iter: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { c: 1.0, lambda_s: 0.1, lambda_b: 0.01, tol: 1e-7, svm_tol: 1e-4, max_iter: 5000 }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidParams(m.into()));
        if !(self.c > 0.0) || !self.c.is_finite() {
            return bad("C must be positive");
        }
        if !(self.lambda_s >= 0.0) || !(self.lambda_b >= 0.0) {
            return bad("lambda_s and lambda_b must be non-negative");
        }
        if !(self.tol > 0.0) || !(self.svm_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        Ok(())
    }
}

/// Linear scorer `ωᵀx + b` on standardized features, `ω = S + B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    /// Task the model was trained for; `None` for a pooled model.
    pub task_id: Option<usize>,
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub bias: f64,
    pub omega: Vec<f64>,
    pub standardizer: Standardizer,
}

impl TaskModel {
    pub fn new(task_id: Option<usize>, s: Vec<f64>, b: Vec<f64>, bias: f64, standardizer: Standardizer) -> Self {
        let omega = s.iter().zip(&b).map(|(x, y)| x + y).collect();
        Self { task_id, s, b, bias, omega, standardizer }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    /// Standardizes raw features with the model's statistics, then scores.
    pub fn predict(&self, raw: &[f64]) -> Result<f64, LearnError> {
        score(self, &self.standardizer.apply(raw)?)
    }

    fn check(&self) -> Result<(), LearnError> {
        let p = self.dim();
        if self.s.len() != p || self.b.len() != p || self.standardizer.dim() != p {
            return Err(LearnError::InvalidData("model vectors differ in length".into()));
        }
        let sum_ok = self.s.iter().zip(&self.b).zip(&self.omega).all(|((s, b), w)| s + b == *w);
        if !sum_ok {
            return Err(LearnError::InvalidData("omega differs from S + B".into()));
        }
        let finite = self.omega.iter().chain(&self.s).chain(&self.b).all(|v| v.is_finite());
        if !finite || !self.bias.is_finite() {
            return Err(LearnError::InvalidData("non-finite model parameter".into()));
        }
        Ok(())
    }
}

/// `ωᵀv + b` for an already standardized `v`.
pub fn score(model: &TaskModel, v: &[f64]) -> Result<f64, LearnError> {
    check_dim(model.dim(), v.len())?;
    Ok(dot(&model.omega, v) + model.bias)
}

/// Mean of the models' scores for raw features `v`, each model applying its
/// own standardization.
pub fn score_voting(models: &[TaskModel], v: &[f64]) -> Result<f64, LearnError> {
    if models.is_empty() {
        return Err(LearnError::EmptyModels);
    }
    let mut total = 0.0;
    for m in models {
        total += m.predict(v)?;
    }
    Ok(total / models.len() as f64)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `Σ max(0, 1 − y(ωᵀx + b))` over a standardized task.
pub fn hinge_loss(data: &TaskData, omega: &[f64], bias: f64) -> f64 {
    data.rows().zip(&data.y).map(|(r, y)| (1.0 - y * (dot(omega, r) + bias)).max(0.0)).sum()
}

/// `½‖ω‖² + C·hinge` over a standardized task.
pub fn svm_objective(data: &TaskData, omega: &[f64], bias: f64, c: f64) -> f64 {
    0.5 * dot(omega, omega) + c * hinge_loss(data, omega, bias)
}

/// `λ_S Σ|S| + λ_B Σ_f max_i |B_if|` over a set of models.
pub fn sparsity_penalty(models: &[TaskModel], lambda_s: f64, lambda_b: f64) -> f64 {
    let p = models.first().map_or(0, TaskModel::dim);
    let l1: f64 = models.iter().flat_map(|m| &m.s).map(|v| v.abs()).sum();
    let linf: f64 = (0..p).map(|f| models.iter().map(|m| m.b[f].abs()).fold(0.0, f64::max)).sum();
    lambda_s * l1 + lambda_b * linf
}

/// Shared-sparsity objective of `models` on raw `tasks` (paired by index),
/// each task standardized with its model's statistics.
pub fn shared_objective(tasks: &[TaskData], models: &[TaskModel], hp: &HyperParams) -> Result<f64, LearnError> {
    if tasks.len() != models.len() {
        return Err(LearnError::InvalidData(format!("{} tasks but {} models", tasks.len(), models.len())));
    }
    let mut total = sparsity_penalty(models, hp.lambda_s, hp.lambda_b);
    for (t, m) in tasks.iter().zip(models) {
        total += svm_objective(&t.standardized(&m.standardizer)?, &m.omega, m.bias, hp.c);
    }
    Ok(total)
}

/// Lowest-penalty split of one feature's weights across tasks into
/// `(S, B)` with `S + B = ω`.
///
/// For a cap `t` on `|B|`, the best `B` is `ω` clipped to `[−t, t]`, leaving a
/// convex piecewise-linear cost in `t` whose minimum sits at one of the
/// sorted magnitudes.
pub fn split_feature(omega: &[f64], lambda_s: f64, lambda_b: f64) -> Vec<(f64, f64)> {
    let r = omega.len();
    let cap = if lambda_s <= 0.0 {
        0.0
    } else {
        let k = (lambda_b / lambda_s).floor() + 1.0;
        if k > r as f64 {
            0.0
        } else {
            let mut mags: Vec<f64> = omega.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            mags[k as usize - 1]
        }
    };
    omega
        .iter()
        .map(|&w| {
            let b = w.clamp(-cap, cap);
            (w - b, b)
        })
        .collect()
}

/// Euclidean projection onto `{z : |z_i| ≤ a, Σ|z_i| ≤ c}`.
pub fn project_box_l1(u: &[f64], a: f64, c: f64) -> Vec<f64> {
    if a <= 0.0 || c <= 0.0 {
        return vec![0.0; u.len()];
    }
    let mass = |theta: f64| -> f64 { u.iter().map(|v| (v.abs() - theta).clamp(0.0, a)).sum() };
    let theta = if mass(0.0) <= c {
        0.0
    } else {
        // mass is continuous and non-increasing in theta
        let (mut lo, mut hi) = (0.0, u.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(mid) > c {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        hi
    };
    u.iter().map(|v| v.signum() * (v.abs() - theta).clamp(0.0, a)).collect()
}

/// Bias minimizing the hinge loss for fixed `ω`, closest to `current` among
/// the minimizers.
///
/// The loss is piecewise linear in `b` with one kink per example; its slope
/// steps up by one at each kink, from `−#pos` to `+#neg`, so the minimizers
/// form the interval between the `P`-th and `(P+1)`-th sorted kinks.
fn best_bias(data: &TaskData, omega: &[f64], current: f64) -> f64 {
    let mut kinks: Vec<f64> = data.rows().zip(&data.y).map(|(r, y)| y - dot(omega, r)).collect();
    let pos = data.positives();
    if pos == 0 || pos == kinks.len() {
        return current;
    }
    kinks.sort_by(f64::total_cmp);
    current.clamp(kinks[pos - 1], kinks[pos])
}

struct SvmSolution {
    alpha: Vec<f64>,
    /// `Σ α_j y_j x_j − offset`.
    w: Vec<f64>,
    bias: f64,
    converged: bool,
}

/// Dual coordinate descent for `min ½‖w‖² + C Σ hinge(y(wᵀx + b))` with
/// `w = Σ α y x − offset`, i.e. the SVM whose primal carries an extra linear
/// term `offsetᵀw`. The equality constraint `Σ α y = 0` of the unregularized
/// bias is enforced with an augmented Lagrangian whose multiplier plays the
/// bias during the sweeps.
fn solve_svm(
    data: &TaskData,
    c: f64,
    offset: &[f64],
    warm: Option<&[f64]>,
    tol: f64,
    max_epochs: usize,
    seed: u64,
) -> SvmSolution {
    let n = data.len();
    let p = data.dim();
    let mut alpha = warm.map_or_else(|| vec![0.0; n], |a| a.iter().map(|v| v.clamp(0.0, c)).collect());
    let mut w: Vec<f64> = offset.iter().map(|v| -v).collect();
    let mut s = 0.0;
    for j in 0..n {
        if alpha[j] != 0.0 {
            axpy(&mut w, alpha[j] * data.y[j], data.row(j));
            s += alpha[j] * data.y[j];
        }
    }
    let sq: Vec<f64> = data.rows().map(|r| dot(r, r)).collect();
    let rho = (sq.iter().sum::<f64>() / n.max(1) as f64).max(1.0);
    let mut mu = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = 0;
    let mut converged = false;
    let mut grad = vec![0.0; n];
    while epochs < max_epochs {
        // inner sweeps on the augmented problem at fixed multiplier
        let inner_tol = tol * 0.5;
        while epochs < max_epochs {
            epochs += 1;
            order.shuffle(&mut rng);
            let mut worst = 0.0f64;
            for &j in &order {
                let y = data.y[j];
                let x = data.row(j);
                let g = y * (dot(&w, x) + rho * s + mu) - 1.0;
                let a = alpha[j];
                let pg = if a <= 0.0 {
                    g.min(0.0)
                } else if a >= c {
                    g.max(0.0)
                } else {
                    g
                };
                worst = worst.max(pg.abs());
                if pg != 0.0 {
                    let next = (a - g / (sq[j] + rho)).clamp(0.0, c);
                    let d = (next - a) * y;
                    if d != 0.0 {
                        axpy(&mut w, d, x);
                        s += d;
                        alpha[j] = next;
                    }
                }
            }
            if worst < inner_tol {
                break;
            }
        }
        mu += rho * s;
        // KKT violation of the original problem, bias free
        let (mut up, mut low) = (f64::NEG_INFINITY, f64::INFINITY);
        for j in 0..n {
            let y = data.y[j];
            grad[j] = y * dot(&w, data.row(j)) - 1.0;
            let v = -y * grad[j];
            let (a, pos) = (alpha[j], y > 0.0);
            if (pos && a < c) || (!pos && a > 0.0) {
                up = up.max(v);
            }
            if (!pos && a < c) || (pos && a > 0.0) {
                low = low.min(v);
            }
        }
        if up - low < tol && s.abs() < tol {
            converged = true;
            break;
        }
    }
    let _ = p;
    // bias from the free vectors when there are any
    let mut free = (0.0, 0usize);
    for j in 0..n {
        if alpha[j] > 0.0 && alpha[j] < c {
            free.0 += -data.y[j] * grad[j];
            free.1 += 1;
        }
    }
    let guess = if free.1 > 0 { free.0 / free.1 as f64 } else { mu };
    let bias = best_bias(data, &w, guess);
    SvmSolution { alpha, w, bias, converged }
}

fn svm_seed(task_index: usize) -> u64 {
    0x5EED_0000 + task_index as u64
}

fn check_tasks(tasks: &[TaskData]) -> Result<usize, LearnError> {
    let first = tasks.first().ok_or(LearnError::NoTasks)?;
    for t in tasks {
        check_dim(first.dim(), t.dim())?;
        t.check_two_class()?;
    }
    Ok(first.dim())
}

fn fit_one(data: &TaskData, task_id: Option<usize>, hp: &HyperParams, seed: u64) -> Result<TaskModel, LearnError> {
    let st = data.fit_standardizer();
    let z = data.standardized(&st)?;
    let sol = solve_svm(&z, hp.c, &vec![0.0; data.dim()], None, hp.svm_tol, hp.max_iter, seed);
    if !sol.converged {
        log::warn!("svm for task {task_id:?} stopped at max_iter before reaching svm_tol");
    }
    let p = data.dim();
    Ok(TaskModel::new(task_id, sol.w, vec![0.0; p], sol.bias, st))
}

/// One SVM per task, each on its own standardized training data.
pub fn train_independent(tasks: &[TaskData], hp: &HyperParams) -> Result<Vec<TaskModel>, LearnError> {
    hp.validate()?;
    check_tasks(tasks)?;
    tasks.par_iter().enumerate().map(|(i, t)| fit_one(t, Some(t.task_id), hp, svm_seed(i))).collect()
}

/// One SVM on the concatenation of all tasks.
pub fn train_joint(tasks: &[TaskData], hp: &HyperParams) -> Result<TaskModel, LearnError> {
    hp.validate()?;
    let first = tasks.first().ok_or(LearnError::NoTasks)?;
    let p = first.dim();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for t in tasks {
        check_dim(p, t.dim())?;
        x.extend_from_slice(&t.x);
        y.extend_from_slice(&t.y);
    }
    let pooled = TaskData { task_id: first.task_id, p, x, y };
    pooled.check_two_class()?;
    fit_one(&pooled, None, hp, svm_seed(0))
}

/// Result of the shared-sparsity trainer.
#[derive(Debug, Clone)]
pub struct SharedFit {
    pub models: Vec<TaskModel>,
    /// Best objective so far after each outer iteration, starting with the
    /// warm start; non-increasing.
    pub trace: Vec<f64>,
    /// False when `max_iter` ran out before the stopping rule fired.
    pub converged: bool,
}

/// Per-task models `ω_i = S_i + B_i` minimizing the summed SVM objectives
/// plus `λ_S‖S‖₁,₁ + λ_B‖B‖₁,∞`.
///
/// Solved in the dual: with `Z` the dual of the penalty (each feature's
/// column across tasks lies in `{|z_i| ≤ λ_S, Σ|z_i| ≤ λ_B}`), task `i` is an
/// SVM with `ω_i = Σ α y x − z_i`. Block ascent alternates exact SVM solves
/// per task with the projection of `Z`, starting from the independent SVMs
/// (`Z = 0`). The primal `S`/`B` split of each iterate is exact.
pub fn train_shared(tasks: &[TaskData], hp: &HyperParams) -> Result<SharedFit, LearnError> {
    hp.validate()?;
    let p = check_tasks(tasks)?;
    let r = tasks.len();
    let stats: Vec<Standardizer> = tasks.iter().map(TaskData::fit_standardizer).collect();
    let data: Vec<TaskData> = tasks.iter().zip(&stats).map(|(t, s)| t.standardized(s)).collect::<Result<_, _>>()?;
    let zero = vec![0.0; p];
    let solve = |i: usize, z: &[f64], warm: Option<&[f64]>| {
        solve_svm(&data[i], hp.c, z, warm, hp.svm_tol, hp.max_iter, svm_seed(i))
    };
    let mut sols: Vec<SvmSolution> = (0..r).into_par_iter().map(|i| solve(i, &zero, None)).collect();
    let mut z = vec![vec![0.0; p]; r];

    let assemble = |sols: &[SvmSolution]| -> (Vec<TaskModel>, f64) {
        let mut s = vec![vec![0.0; p]; r];
        let mut b = vec![vec![0.0; p]; r];
        for f in 0..p {
            let col: Vec<f64> = sols.iter().map(|x| x.w[f]).collect();
            for (i, (sv, bv)) in split_feature(&col, hp.lambda_s, hp.lambda_b).into_iter().enumerate() {
                s[i][f] = sv;
                b[i][f] = bv;
            }
        }
        let models: Vec<TaskModel> = (0..r)
            .map(|i| TaskModel::new(Some(tasks[i].task_id), s[i].clone(), b[i].clone(), sols[i].bias, stats[i].clone()))
            .collect();
        let mut obj = sparsity_penalty(&models, hp.lambda_s, hp.lambda_b);
        for (d, m) in data.iter().zip(&models) {
            obj += svm_objective(d, &m.omega, m.bias, hp.c);
        }
        (models, obj)
    };

    let (mut best, mut best_obj) = assemble(&sols);
    let mut trace = vec![best_obj];
    let mut converged = false;
    if hp.lambda_s == 0.0 || hp.lambda_b == 0.0 {
        // the penalty's dual set is {0}: the warm start is optimal
        return Ok(SharedFit { models: best, trace, converged: true });
    }
    for it in 1..=hp.max_iter {
        // Z step: project each feature's column of Σ α y x
        for f in 0..p {
            let u: Vec<f64> = (0..r).map(|i| sols[i].w[f] + z[i][f]).collect();
            let col = project_box_l1(&u, hp.lambda_s, hp.lambda_b);
            for i in 0..r {
                z[i][f] = col[i];
            }
        }
        // alpha step
        sols = (0..r).into_par_iter().map(|i| solve(i, &z[i], Some(&sols[i].alpha))).collect();
        let dual: f64 = sols.iter().map(|s| s.alpha.iter().sum::<f64>() - 0.5 * dot(&s.w, &s.w)).sum();
        let (models, obj) = assemble(&sols);
        if obj < best_obj {
            best = models;
            best_obj = obj;
        }
        trace.push(best_obj);
        let gap_ok = best_obj - dual <= hp.tol * best_obj.abs().max(1.0);
        let stalled = it >= 10 && trace[it - 10] - best_obj <= hp.tol * best_obj.abs().max(1.0);
        if gap_ok || stalled {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("shared solver used all {} iterations; returning the best iterate", hp.max_iter);
    }
    Ok(SharedFit { models: best, trace, converged })
}

/// Which trainer produced a model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Independent,
    Joint,
    Shared,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Independent, Method::Joint, Method::Shared];

    pub fn name(self) -> &'static str {
        match self {
            Method::Independent => "independent",
            Method::Joint => "joint",
            Method::Shared => "shared",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown method {s}"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// On-disk set of trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub method: Method,
    pub hyper: HyperParams,
    pub models: Vec<TaskModel>,
}

impl ModelFile {
    pub fn new(method: Method, hyper: HyperParams, models: Vec<TaskModel>) -> Self {
        Self { format_version: MODEL_FORMAT_VERSION, method, hyper, models }
    }

    pub fn to_json(&self) -> Result<String, LearnError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, LearnError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let version = v.get("format_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_FORMAT_VERSION {
            return Err(LearnError::Format(version));
        }
        let file: ModelFile = serde_json::from_value(v)?;
        for m in &file.models {
            m.check()?;
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        Ok(write_atomic(path, self.to_json()?.as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        Self::from_json(&read_to_string(path)?)
    }
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Task whose labels follow `sign(wᵀx + noise)` for a planted `w`.
    pub fn planted_task(task_id: usize, w: &[f64], n: usize, noise: f64, seed: u64) -> TaskData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = w.len();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e: f64 = StandardNormal.sample(&mut rng);
            y.push(if dot(w, &x) + noise * e >= 0.0 { 1.0 } else { -1.0 });
            rows.push(x);
        }
        TaskData::new(task_id, p, &rows, &y).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testkit::planted_task;
    use super::*;
    use proptest::prelude::*;

    fn tight() -> HyperParams {
        HyperParams { svm_tol: 1e-10, tol: 1e-12, max_iter: 200_000, ..HyperParams::default() }
    }

    fn toy(rows: &[[f64; 2]], y: &[f64]) -> TaskData {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        TaskData::new(0, 2, &rows, y).unwrap()
    }

    /// Brute-force minimizer of the standardized objective over (w1, w2, b):
    /// a dense grid, then pattern search with a shrinking step.
    fn brute_force(data: &TaskData, c: f64) -> f64 {
        let f = |v: &[f64; 3]| svm_objective(data, &v[..2], v[2], c);
        let mut best = ([0.0; 3], f64::INFINITY);
        let steps = 41;
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let g = |t: usize| -4.0 + 8.0 * t as f64 / (steps - 1) as f64;
                    let v = [g(i), g(j), g(k)];
                    let o = f(&v);
                    if o < best.1 {
                        best = (v, o);
                    }
                }
            }
        }
        let mut h = 0.2;
        while h > 1e-12 {
            let mut moved = false;
            for d in 0..3 {
                for sgn in [-1.0, 1.0] {
                    let mut v = best.0;
                    v[d] += sgn * h;
                    let o = f(&v);
                    if o < best.1 {
                        best = (v, o);
                        moved = true;
                    }
                }
            }
            // diagonal moves let the search follow kinks of the hinge
            for a in [-1.0, 1.0] {
                for b in [-1.0, 1.0] {
                    for d in [(0, 1), (0, 2), (1, 2)] {
                        let mut v = best.0;
                        v[d.0] += a * h;
                        v[d.1] += b * h;
                        let o = f(&v);
                        if o < best.1 {
                            best = (v, o);
                            moved = true;
                        }
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        best.1
    }

    #[test]
    fn one_feature_symmetric_hard_margin() {
        let data = TaskData::new(0, 1, &[vec![1.0], vec![-1.0]], &[1.0, -1.0]).unwrap();
        let hp = HyperParams { c: 1e3, ..tight() };
        let m = &train_independent(&[data], &hp).unwrap()[0];
        // standardized features are already ±1
        assert_eq!(m.standardizer.stdev, vec![1.0]);
        assert!((m.omega[0] - 1.0).abs() < 1e-8, "{}", m.omega[0]);
        assert!(m.bias.abs() < 1e-8);
        assert!(m.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn independent_matches_brute_force_on_toys() {
        let toys = [
            toy(&[[1.0, 2.0], [2.0, 3.0], [-1.0, -1.0], [0.0, -2.0]], &[1.0, 1.0, -1.0, -1.0]),
            toy(&[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]], &[1.0, 1.0, -1.0, -1.0]),
            toy(&[[2.0, 0.5], [1.5, -0.5], [0.2, 0.1], [-1.0, 0.3], [0.5, 0.0]], &[1.0, 1.0, -1.0, -1.0, 1.0]),
        ];
        for (k, t) in toys.iter().enumerate() {
            let m = &train_independent(std::slice::from_ref(t), &tight()).unwrap()[0];
            let z = t.standardized(&m.standardizer).unwrap();
            let got = svm_objective(&z, &m.omega, m.bias, 1.0);
            let want = brute_force(&z, 1.0);
            assert!((got - want) / want.abs() < 1e-6, "toy {k}: {got} vs {want}");
            assert!(got <= 1.0 * t.len() as f64 + 1e-12);
        }
    }

    #[test]
    fn joint_of_one_and_of_duplicates_equals_independent() {
        let t = planted_task(0, &[1.0, -2.0, 0.5], 80, 0.3, 1);
        let hp = tight();
        let ind = &train_independent(std::slice::from_ref(&t), &hp).unwrap()[0];
        let z = t.standardized(&ind.standardizer).unwrap();
        let base = svm_objective(&z, &ind.omega, ind.bias, hp.c);
        let one = train_joint(std::slice::from_ref(&t), &hp).unwrap();
        assert!((svm_objective(&z, &one.omega, one.bias, hp.c) - base).abs() <= 1e-6 * base);
        // duplicating every point doubles the hinge weight: the joint model on
        // two copies solves the single-copy problem with C doubled
        let two = train_joint(&[t.clone(), t.clone()], &hp).unwrap();
        let hp2 = HyperParams { c: 2.0 * hp.c, ..hp.clone() };
        let ind2 = &train_independent(std::slice::from_ref(&t), &hp2).unwrap()[0];
        let a = svm_objective(&z, &two.omega, two.bias, 2.0 * hp.c);
        let b = svm_objective(&z, &ind2.omega, ind2.bias, 2.0 * hp.c);
        assert!((a - b).abs() <= 1e-6 * b, "{a} vs {b}");
        for (a, b) in two.standardizer.mean.iter().zip(&one.standardizer.mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_task_is_degenerate() {
        let t = TaskData::new(4, 1, &[vec![1.0], vec![2.0]], &[1.0, 1.0]).unwrap();
        let err = train_independent(&[t.clone()], &HyperParams::default()).unwrap_err();
        assert_eq!(err.to_string(), "degenerate task 4: needs both positive and negative examples");
        assert!(matches!(train_joint(&[t.clone()], &HyperParams::default()), Err(LearnError::DegenerateTask(4))));
        assert!(train_shared(&[t], &HyperParams::default()).is_err());
    }

    #[test]
    fn bad_labels_and_nan_rejected() {
        assert!(TaskData::new(0, 1, &[vec![1.0]], &[0.5]).is_err());
        assert!(TaskData::new(0, 1, &[vec![f64::NAN]], &[1.0]).is_err());
        assert!(TaskData::new(0, 2, &[vec![1.0]], &[1.0]).is_err());
    }

    #[test]
    fn shared_with_one_task_and_no_penalty_matches_independent() {
        let t = planted_task(0, &[1.0, 0.5, -1.0, 0.0], 120, 0.5, 3);
        let hp = HyperParams { lambda_s: 0.0, lambda_b: 0.0, ..tight() };
        let ind = &train_independent(std::slice::from_ref(&t), &hp).unwrap()[0];
        let fit = train_shared(std::slice::from_ref(&t), &hp).unwrap();
        let a = shared_objective(std::slice::from_ref(&t), &fit.models, &hp).unwrap();
        let b = shared_objective(std::slice::from_ref(&t), std::slice::from_ref(ind), &hp).unwrap();
        assert!((a - b).abs() <= 1e-4 * b);
    }

    #[test]
    fn huge_lambda_b_zeroes_b() {
        let tasks: Vec<_> = (0..3).map(|i| planted_task(i, &[1.0, -1.0, 0.5], 60, 0.3, 10 + i as u64)).collect();
        let hp = HyperParams { lambda_b: 1e6, lambda_s: 0.1, max_iter: 200, ..HyperParams::default() };
        let fit = train_shared(&tasks, &hp).unwrap();
        for m in &fit.models {
            assert!(m.b.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn planted_shared_support_is_recovered() {
        // features 0..3 shared by all tasks, 3 + i private to task i, rest
        // noise; λ_B/λ_S in [2, 3) puts a feature in B only when all three
        // tasks use it
        let p = 10;
        let tasks: Vec<_> = (0..3)
            .map(|i| {
                let mut w = vec![0.0; p];
                w[0] = 2.0;
                w[1] = -2.0;
                w[2] = 1.5;
                w[3 + i] = 2.0;
                planted_task(i, &w, 300, 0.2, 100 + i as u64)
            })
            .collect();
        let hp = HyperParams { c: 0.1, lambda_s: 3.0, lambda_b: 7.5, max_iter: 500, ..HyperParams::default() };
        let fit = train_shared(&tasks, &hp).unwrap();
        let col_max: Vec<f64> = (0..p).map(|f| fit.models.iter().map(|m| m.b[f].abs()).fold(0.0, f64::max)).collect();
        let top = col_max.iter().cloned().fold(0.0, f64::max);
        let support: Vec<usize> = (0..p).filter(|&f| col_max[f] > 0.1 * top).collect();
        assert_eq!(support, vec![0, 1, 2], "{col_max:?}");
    }

    #[test]
    fn shared_trace_is_monotone_and_beats_warm_start() {
        let tasks: Vec<_> = (0..3).map(|i| planted_task(i, &[1.0, -1.0, 0.5, 0.0], 80, 0.5, 20 + i as u64)).collect();
        let hp = HyperParams { lambda_s: 0.5, lambda_b: 0.8, max_iter: 300, ..HyperParams::default() };
        let fit = train_shared(&tasks, &hp).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
        // embedded independent solution: S = ω, B = 0
        let warm: Vec<TaskModel> = train_independent(&tasks, &hp)
            .unwrap()
            .into_iter()
            .map(|m| TaskModel::new(m.task_id, m.omega.clone(), vec![0.0; m.dim()], m.bias, m.standardizer))
            .collect();
        let got = shared_objective(&tasks, &fit.models, &hp).unwrap();
        assert!(got <= shared_objective(&tasks, &warm, &hp).unwrap() + 1e-9);
        assert!((got - fit.trace.last().unwrap()).abs() < 1e-9 * got);
    }

    #[test]
    fn increasing_c_never_raises_hinge_loss() {
        let t = planted_task(0, &[1.0, -0.5], 60, 0.8, 5);
        let mut last = f64::INFINITY;
        for c in [0.01, 0.1, 1.0, 10.0] {
            let hp = HyperParams { c, ..tight() };
            let m = &train_independent(std::slice::from_ref(&t), &hp).unwrap()[0];
            let h = hinge_loss(&t.standardized(&m.standardizer).unwrap(), &m.omega, m.bias);
            assert!(h <= last + 1e-6, "C {c}: {h} > {last}");
            last = h;
        }
        let tasks: Vec<_> = (0..2).map(|i| planted_task(i, &[1.0, -0.5], 40, 0.8, 50 + i as u64)).collect();
        let mut last = (f64::INFINITY, f64::INFINITY);
        for c in [0.01, 0.1, 1.0, 10.0] {
            let hp = HyperParams { c, lambda_s: 0.2, lambda_b: 0.3, ..tight() };
            let j = train_joint(&tasks, &hp).unwrap();
            let hj: f64 = tasks.iter().map(|t| hinge_loss(&t.standardized(&j.standardizer).unwrap(), &j.omega, j.bias)).sum();
            let fit = train_shared(&tasks, &hp).unwrap();
            let hs: f64 = tasks
                .iter()
                .zip(&fit.models)
                .map(|(t, m)| hinge_loss(&t.standardized(&m.standardizer).unwrap(), &m.omega, m.bias))
                .sum();
            assert!(hj <= last.0 + 1e-6 && hs <= last.1 + 1e-6, "C {c}");
            last = (hj, hs);
        }
    }

    #[test]
    fn score_examples() {
        let st = Standardizer::identity(4);
        let m = TaskModel::new(Some(0), vec![0.0; 4], vec![0.0; 4], 0.5, st.clone());
        assert_eq!(score(&m, &[3.0, -1.0, 2.0, 7.0]).unwrap(), 0.5);
        let m = TaskModel::new(Some(0), vec![2.0, 0.0, -1.0, 0.0], vec![0.0, 0.0, 0.0, 0.5], 1.0, st.clone());
        // 2*1 + (-1)*3 + 0.5*4 + 1 = 2
        assert_eq!(score(&m, &[1.0, 9.0, 3.0, 4.0]).unwrap(), 2.0);
        let v = [1.0, 9.0, 3.0, 4.0];
        let only_s = TaskModel::new(Some(0), m.s.clone(), vec![0.0; 4], m.bias, st.clone());
        let only_b = TaskModel::new(Some(0), vec![0.0; 4], m.b.clone(), m.bias, st.clone());
        let additive = score(&only_s, &v).unwrap() + score(&only_b, &v).unwrap() - m.bias;
        assert_eq!(score(&m, &v).unwrap(), additive);
        assert!(matches!(score(&m, &[1.0]), Err(LearnError::Dimension { expected: 4, got: 1 })));
    }

    #[test]
    fn voting_examples() {
        let st = Standardizer::identity(1);
        let a = TaskModel::new(Some(0), vec![0.0], vec![0.0], 1.0, st.clone());
        let b = TaskModel::new(Some(1), vec![0.0], vec![0.0], -0.5, st.clone());
        assert_eq!(score_voting(&[a.clone()], &[2.0]).unwrap(), a.predict(&[2.0]).unwrap());
        assert_eq!(score_voting(&[a.clone(), b.clone()], &[2.0]).unwrap(), 0.25);
        assert_eq!(score_voting(&[b, a], &[2.0]).unwrap(), 0.25);
        assert!(matches!(score_voting(&[], &[2.0]), Err(LearnError::EmptyModels)));
    }

    #[test]
    fn standardizer_clamps_constant_features() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let st = Standardizer::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(st.mean, vec![2.0, 5.0]);
        assert_eq!(st.stdev, vec![1.0, 1.0]);
        assert_eq!(st.apply(&[3.0, 6.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn split_examples() {
        // λ_B/λ_S = 1.5: a cap needs two tasks above it
        let sb = split_feature(&[3.0, -2.0, 0.5], 1.0, 1.5);
        assert_eq!(sb, vec![(1.0, 2.0), (0.0, -2.0), (0.0, 0.5)]);
        // max-norm cheaper than any single entry: everything in B
        let sb = split_feature(&[3.0, -2.0], 1.0, 0.5);
        assert_eq!(sb, vec![(0.0, 3.0), (0.0, -2.0)]);
        assert_eq!(split_feature(&[1.0, 2.0], 0.0, 1.0), vec![(1.0, 0.0), (2.0, 0.0)]);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_box_l1(&[0.1, -0.2], 1.0, 1.0), vec![0.1, -0.2]);
        assert_eq!(project_box_l1(&[5.0, -0.2], 1.0, 10.0), vec![1.0, -0.2]);
        let z = project_box_l1(&[3.0, 1.0], 10.0, 1.0);
        assert!((z[0] - 1.0).abs() < 1e-12 && z[1].abs() < 1e-12);
        assert_eq!(project_box_l1(&[3.0, 1.0], 0.0, 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn model_file_round_trip_and_version() {
        let t = planted_task(0, &[1.0, -1.0], 30, 0.2, 9);
        let models = train_independent(&[t], &HyperParams::default()).unwrap();
        let file = ModelFile::new(Method::Independent, HyperParams::default(), models);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        file.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), file);
        let bumped = file.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(ModelFile::from_json(&bumped), Err(LearnError::Format(99))));
    }

    #[test]
    fn training_is_deterministic() {
        let tasks: Vec<_> = (0..3).map(|i| planted_task(i, &[1.0, -1.0, 0.5], 50, 0.5, 30 + i as u64)).collect();
        let hp = HyperParams { lambda_s: 0.3, lambda_b: 0.5, max_iter: 100, ..HyperParams::default() };
        assert_eq!(train_independent(&tasks, &hp).unwrap(), train_independent(&tasks, &hp).unwrap());
        assert_eq!(train_joint(&tasks, &hp).unwrap(), train_joint(&tasks, &hp).unwrap());
        assert_eq!(train_shared(&tasks, &hp).unwrap().models, train_shared(&tasks, &hp).unwrap().models);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ranking_ignores_constant_shift(
            w in proptest::collection::vec(-2.0..2.0f64, 3),
            vs in proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, 3), 2..12),
            shift in -5.0..5.0f64,
        ) {
            let st = Standardizer::identity(3);
            let m = TaskModel::new(None, w.clone(), vec![0.0; 3], 0.0, st.clone());
            let m2 = TaskModel::new(None, w, vec![0.0; 3], shift, st);
            let order = |m: &TaskModel| {
                let mut idx: Vec<usize> = (0..vs.len()).collect();
                let sc: Vec<f64> = vs.iter().map(|v| score(m, v).unwrap()).collect();
                idx.sort_by(|&a, &b| sc[b].total_cmp(&sc[a]).then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(order(&m), order(&m2));
        }

        #[test]
        fn split_is_exact_and_optimal(
            w in proptest::collection::vec(-3.0..3.0f64, 1..5),
            ls in 0.01..2.0f64,
            lb in 0.01..4.0f64,
        ) {
            let sb = split_feature(&w, ls, lb);
            let cost = |sb: &[(f64, f64)]| {
                ls * sb.iter().map(|x| x.0.abs()).sum::<f64>() + lb * sb.iter().map(|x| x.1.abs()).fold(0.0, f64::max)
            };
            for ((s, b), wi) in sb.iter().zip(&w) {
                prop_assert!((s + b - wi).abs() < 1e-12);
            }
            // no cap on a grid does better
            let best = cost(&sb);
            for k in 0..=60 {
                let t = 3.0 * k as f64 / 60.0;
                let alt: Vec<(f64, f64)> = w.iter().map(|&x| (x - x.clamp(-t, t), x.clamp(-t, t))).collect();
                prop_assert!(best <= cost(&alt) + 1e-12);
            }
        }
    }
}
