//! Train/test splits across tasks, reference rankers, ranking metrics and the
//! benchmark report.

use crate::features::{FeatureFamily, N_FEATURES};
use crate::geom::{Placement, PointCloud, SpatialGrid};
use crate::learn::{self, HyperParams, LearnError, Method, TaskData, TaskModel};
use crate::scenes::dataset::{task_seed, LabeledPlacement, TaskDataset};
use crate::scenes::{generate_env, PlacingTask, SceneError};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Half-width of the neighborhood inspected for a flat support patch.
pub const FLAT_RADIUS: f64 = 0.025;
/// Largest z standard deviation of a flat patch.
pub const FLAT_STDEV: f64 = 0.003;
/// A patch must cover at least this xy extent along both axes.
pub const FLAT_MIN_EXTENT: f64 = 0.03;
const FLAT_MIN_POINTS: usize = 6;

const CHANCE_STREAM: u64 = 0xC4A2_CE00_0000_0001;
const FLAT_STREAM: u64 = 0xF1A7_0000_0000_0001;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {0} not in corpus")]
    UnknownTask(usize),
    #[error("{scenario} split for {task} has no training task")]
    EmptySplit { scenario: Scenario, task: String },
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("empty feature set")]
    EmptyFeatureSet,
    #[error("metric n must be positive")]
    ZeroN,
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// How the test task relates to the training tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "SESO")]
    Seso,
    #[serde(rename = "SENO")]
    Seno,
    #[serde(rename = "NESO")]
    Neso,
    #[serde(rename = "NENO")]
    Neno,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Seso, Scenario::Seno, Scenario::Neso, Scenario::Neno];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Seso => "SESO",
            Scenario::Seno => "SENO",
            Scenario::Neso => "NESO",
            Scenario::Neno => "NENO",
        }
    }

    fn same_env(self) -> bool {
        matches!(self, Scenario::Seso | Scenario::Seno)
    }

    fn same_object(self) -> bool {
        matches!(self, Scenario::Seso | Scenario::Neso)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EvalError::UnknownScenario(s.to_string()))
    }
}

/// Positions in the task list: whose training data to learn from, and which
/// task's test data to rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: usize,
}

pub fn make_split(tasks: &[PlacingTask], test_task_id: usize, scenario: Scenario) -> Result<Split, EvalError> {
    let test = tasks.iter().position(|t| t.task_id == test_task_id).ok_or(EvalError::UnknownTask(test_task_id))?;
    let target = &tasks[test];
    if scenario == Scenario::Seso {
        return Ok(Split { train: vec![test], test });
    }
    let train: Vec<usize> = tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let env_ok = (t.env.name == target.env.name) == scenario.same_env();
            let obj_ok = (t.object.name == target.object.name) == scenario.same_object();
            env_ok && obj_ok
        })
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(EvalError::EmptySplit { scenario, task: target.label() });
    }
    Ok(Split { train, test })
}

/// Subset of the feature families a model sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    families: Vec<FeatureFamily>,
}

impl FeatureMask {
    pub fn all() -> Self {
        Self { families: FeatureFamily::ALL.to_vec() }
    }

    pub fn new(families: &[FeatureFamily]) -> Result<Self, EvalError> {
        let mut fs: Vec<FeatureFamily> = FeatureFamily::ALL.into_iter().filter(|f| families.contains(f)).collect();
        fs.dedup();
        if fs.is_empty() {
            return Err(EvalError::EmptyFeatureSet);
        }
        Ok(Self { families: fs })
    }

    pub fn is_all(&self) -> bool {
        self.families.len() == FeatureFamily::ALL.len()
    }

    pub fn columns(&self) -> Vec<usize> {
        self.families.iter().flat_map(|f| f.range()).collect()
    }

    pub fn name(&self) -> String {
        if self.is_all() {
            return "all".into();
        }
        let names: Vec<&str> = self
            .families
            .iter()
            .map(|f| match f {
                FeatureFamily::Contact => "contact",
                FeatureFamily::Caging => "caging",
                FeatureFamily::Signature => "signature",
            })
            .collect();
        names.join("+")
    }

    fn select(&self, v: &[f64]) -> Vec<f64> {
        if self.is_all() {
            return v.to_vec();
        }
        self.columns().into_iter().map(|c| v[c]).collect()
    }
}

/// Training split of a dataset as learner input, restricted to `mask`.
pub fn task_data(ds: &TaskDataset, mask: &FeatureMask) -> Result<TaskData, EvalError> {
    let rows: Vec<Vec<f64>> = ds.train.iter().map(|l| mask.select(l.features.as_slice())).collect();
    let y: Vec<f64> = ds.train.iter().map(LabeledPlacement::y).collect();
    let p = if mask.is_all() { N_FEATURES } else { mask.columns().len() };
    Ok(TaskData::new(ds.task.task_id, p, &rows, &y)?)
}

/// A candidate as the rankers see it: no labels.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub placement: &'a Placement,
    pub features: &'a [f64],
}

/// Uniformly random order.
pub fn baseline_chance(candidates: &[Candidate], seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Ascending location height, ties by candidate id.
pub fn baseline_lowest_point(candidates: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (candidates[a].placement, candidates[b].placement);
        pa.location.z.total_cmp(&pb.location.z).then(pa.candidate_id.cmp(&pb.candidate_id))
    });
    order
}

/// True when the object's local `+z` points up.
pub fn is_upright(p: &Placement) -> bool {
    p.orientation.rotate(&Vector3::z()).z > 1.0 - 1e-9
}

/// Whether the environment under `p`'s location is a horizontal patch: the
/// topmost surface below it within [`FLAT_RADIUS`] has a small z spread and
/// covers the neighborhood.
pub fn over_flat_patch(grid: &SpatialGrid, p: &Placement) -> bool {
    let q = p.location;
    let r = FLAT_RADIUS;
    let mut below = Vec::new();
    grid.visit_box(
        &Vector3::new(q.x - r, q.y - r, f64::NEG_INFINITY),
        &Vector3::new(q.x + r, q.y + r, q.z),
        |_, e| {
            let (dx, dy) = (e.x - q.x, e.y - q.y);
            if dx * dx + dy * dy <= r * r && e.z <= q.z {
                below.push(*e);
            }
        },
    );
    let Some(top) = below.iter().map(|e| e.z).max_by(f64::total_cmp) else {
        return false;
    };
    let patch: Vec<_> = below.into_iter().filter(|e| e.z >= top - 2.0 * r).collect();
    if patch.len() < FLAT_MIN_POINTS {
        return false;
    }
    let n = patch.len() as f64;
    let mean = patch.iter().map(|e| e.z).sum::<f64>() / n;
    let var = patch.iter().map(|e| (e.z - mean).powi(2)).sum::<f64>() / n;
    let extent = |f: fn(&Vector3<f64>) -> f64| {
        let lo = patch.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = patch.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    var.sqrt() < FLAT_STDEV && extent(|e| e.x) >= FLAT_MIN_EXTENT && extent(|e| e.y) >= FLAT_MIN_EXTENT
}

/// Upright candidates over flat patches first, lowest first (ties by id);
/// the rest follow in random order.
pub fn baseline_flat_upright(candidates: &[Candidate], env: &PointCloud, seed: u64) -> Vec<usize> {
    let grid = SpatialGrid::new(&env.points, FLAT_RADIUS);
    let (mut first, rest): (Vec<usize>, Vec<usize>) = (0..candidates.len())
        .partition(|&i| is_upright(candidates[i].placement) && over_flat_patch(&grid, candidates[i].placement));
    let sub: Vec<Candidate> = first.iter().map(|&i| candidates[i]).collect();
    first = baseline_lowest_point(&sub).into_iter().map(|j| first[j]).collect();
    let mut rest = rest;
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    first.extend(rest);
    first
}

/// What orders the test candidates.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    /// The test task's own model.
    Model(&'a TaskModel),
    /// Mean score of several models.
    Voting(&'a [TaskModel]),
    Chance { seed: u64 },
    FlatUpright { env: &'a PointCloud, seed: u64 },
    LowestPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// Candidate ids, best first.
    pub order: Vec<u32>,
    /// Scores aligned with `order`; absent for rankers without scores.
    pub scores: Option<Vec<f64>>,
    /// 1-based rank of the first preferred candidate, or count + 1.
    pub r0: usize,
    /// No preferred candidate exists.
    pub r0_missing: bool,
    pub n: usize,
    pub prec_at_n: f64,
    /// The same two metrics counting stable candidates as valid.
    pub stable_r0: usize,
    pub stable_prec_at_n: f64,
}

/// Order of candidates by descending score, ties by candidate id.
pub fn order_by_scores(candidates: &[Candidate], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then(candidates[a].placement.candidate_id.cmp(&candidates[b].placement.candidate_id))
    });
    order
}

fn first_hit(valid: &[bool]) -> (usize, bool) {
    match valid.iter().position(|v| *v) {
        Some(i) => (i + 1, false),
        None => (valid.len() + 1, true),
    }
}

fn precision(valid: &[bool], n: usize) -> f64 {
    valid.iter().take(n).filter(|v| **v).count() as f64 / n as f64
}

/// R0 and Pre@n of an ordering of labeled candidates.
pub fn ranking_metrics(order: &[usize], test: &[LabeledPlacement], scores: Option<&[f64]>, n: usize) -> RankingResult {
    let preferred: Vec<bool> = order.iter().map(|&i| test[i].preferred).collect();
    let stable: Vec<bool> = order.iter().map(|&i| test[i].stable).collect();
    let (r0, r0_missing) = first_hit(&preferred);
    RankingResult {
        order: order.iter().map(|&i| test[i].placement.candidate_id).collect(),
        scores: scores.map(|s| order.iter().map(|&i| s[i]).collect()),
        r0,
        r0_missing,
        n,
        prec_at_n: precision(&preferred, n),
        stable_r0: first_hit(&stable).0,
        stable_prec_at_n: precision(&stable, n),
    }
}

/// Ranks the labeled test candidates with `ranker` (blind to labels) and
/// scores the ranking. Models see only the `mask` columns.
pub fn evaluate_masked(
    ranker: &Ranker,
    test: &[LabeledPlacement],
    mask: &FeatureMask,
    n: usize,
) -> Result<RankingResult, EvalError> {
    if test.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    let cands: Vec<Candidate> =
        test.iter().map(|l| Candidate { placement: &l.placement, features: l.features.as_slice() }).collect();
    let model_scores = |f: &dyn Fn(&[f64]) -> Result<f64, LearnError>| -> Result<Vec<f64>, EvalError> {
        cands.iter().map(|c| Ok(f(&mask.select(c.features))?)).collect()
    };
    let (order, scores) = match ranker {
        Ranker::Model(m) => {
            let s = model_scores(&|v| m.predict(v))?;
            (order_by_scores(&cands, &s), Some(s))
        }
        Ranker::Voting(ms) => {
            let s = model_scores(&|v| learn::score_voting(ms, v))?;
            (order_by_scores(&cands, &s), Some(s))
        }
        Ranker::Chance { seed } => (baseline_chance(&cands, *seed), None),
        Ranker::FlatUpright { env, seed } => (baseline_flat_upright(&cands, env, *seed), None),
        Ranker::LowestPoint => (baseline_lowest_point(&cands), None),
    };
    Ok(ranking_metrics(&order, test, scores.as_deref(), n))
}

pub fn evaluate(ranker: &Ranker, test: &[LabeledPlacement], n: usize) -> Result<RankingResult, EvalError> {
    evaluate_masked(ranker, test, &FeatureMask::all(), n)
}

/// Seed of the chance ordering for a task.
pub fn chance_seed(seed: u64, task_id: usize) -> u64 {
    task_seed(seed ^ CHANCE_STREAM, task_id, 0)
}

/// A reference ranker evaluated next to the learned methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Chance,
    LowestPoint,
    FlatUpright,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Chance, Baseline::LowestPoint, Baseline::FlatUpright];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Chance => "chance",
            Baseline::LowestPoint => "lowest_point",
            Baseline::FlatUpright => "flat_upright",
        }
    }
}

/// What a benchmark run covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub baselines: Vec<Baseline>,
    pub hyper: HyperParams,
    pub mask: FeatureMask,
    /// Cutoff of the precision metric.
    pub n: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            baselines: Baseline::ALL.to_vec(),
            hyper: HyperParams::default(),
            mask: FeatureMask::all(),
            n: 5,
            seed: 0,
        }
    }
}

/// One (task, scenario, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task_id: usize,
    pub env: String,
    pub object: String,
    pub scenario: Scenario,
    pub method: String,
    pub n_test: usize,
    pub n_preferred: usize,
    pub r0: usize,
    pub r0_missing: bool,
    pub prec_at_n: f64,
    pub stable_prec_at_n: f64,
    /// Left out of the averages: the test split has no preferred candidate.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "name")]
pub enum Group {
    All,
    Env(String),
    Object(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub scenario: Scenario,
    pub method: String,
    pub group: Group,
    pub rows: usize,
    pub r0: f64,
    pub prec_at_n: f64,
    pub stable_prec_at_n: f64,
}

/// A cell that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unavailable {
    pub task_id: usize,
    pub label: String,
    pub scenario: Scenario,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n: usize,
    pub rows: Vec<ReportRow>,
    pub averages: Vec<Average>,
    pub unavailable: Vec<Unavailable>,
}

fn method_rank(methods: &[String], m: &str) -> usize {
    methods.iter().position(|x| x == m).unwrap_or(usize::MAX)
}

impl BenchmarkReport {
    pub fn new(n: usize, rows: Vec<ReportRow>, unavailable: Vec<Unavailable>) -> Self {
        let averages = compute_averages(&rows);
        Self { n, rows, averages, unavailable }
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn average(&self, scenario: Scenario, method: &str, group: &Group) -> Option<&Average> {
        self.averages.iter().find(|a| a.scenario == scenario && a.method == method && &a.group == group)
    }

    pub fn row(&self, task_id: usize, scenario: Scenario, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.task_id == task_id && r.scenario == scenario && r.method == method)
    }

    /// Largest difference between the stored averages and ones recomputed
    /// from the rows; infinite when the groups differ.
    pub fn average_drift(&self) -> f64 {
        let fresh = compute_averages(&self.rows);
        if fresh.len() != self.averages.len() {
            return f64::INFINITY;
        }
        let mut worst = 0.0_f64;
        for (a, b) in fresh.iter().zip(&self.averages) {
            if (a.scenario, &a.method, &a.group, a.rows) != (b.scenario, &b.method, &b.group, b.rows) {
                return f64::INFINITY;
            }
            worst = worst
                .max((a.r0 - b.r0).abs())
                .max((a.prec_at_n - b.prec_at_n).abs())
                .max((a.stable_prec_at_n - b.stable_prec_at_n).abs());
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "task_id,env,object,scenario,method,n_test,n_preferred,r0,r0_missing,prec_at_n,stable_prec_at_n,excluded\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
                r.task_id,
                r.env,
                r.object,
                r.scenario,
                r.method,
                r.n_test,
                r.n_preferred,
                r.r0,
                r.r0_missing,
                r.prec_at_n,
                r.stable_prec_at_n,
                r.excluded
            );
        }
        s
    }

    /// Aligned text: per scenario, an environment-wise and an object-wise
    /// block of `R0 Pre@n` per method, then the overall average.
    pub fn to_table(&self) -> String {
        let methods = self.methods();
        let mut scenarios: Vec<Scenario> = self.rows.iter().map(|r| r.scenario).collect();
        scenarios.sort();
        scenarios.dedup();
        let mut s = String::new();
        let cell = |a: Option<&Average>| match a {
            Some(a) => format!("{:>7.1} {:>5.2}", a.r0, a.prec_at_n),
            None => format!("{:>7} {:>5}", "-", "-"),
        };
        for sc in scenarios {
            for (title, env_wise) in [("environment-wise", true), ("object-wise", false)] {
                let _ = writeln!(s, "{sc} {title} (R0, Pre@{})", self.n);
                let _ = write!(s, "{:<18}", "");
                for m in &methods {
                    let _ = write!(s, " {m:>13}");
                }
                s.push('\n');
                let mut names: Vec<&str> = self
                    .rows
                    .iter()
                    .filter(|r| r.scenario == sc)
                    .map(|r| if env_wise { r.env.as_str() } else { r.object.as_str() })
                    .collect();
                names.sort();
                names.dedup();
                for name in names {
                    let g = if env_wise { Group::Env(name.into()) } else { Group::Object(name.into()) };
                    let _ = write!(s, "{name:<18}");
                    for m in &methods {
                        let _ = write!(s, " {}", cell(self.average(sc, m, &g)));
                    }
                    s.push('\n');
                }
                let _ = write!(s, "{:<18}", "average");
                for m in &methods {
                    let _ = write!(s, " {}", cell(self.average(sc, m, &Group::All)));
                }
                s.push_str("\n\n");
            }
        }
        let mut excluded: Vec<(usize, &str, &str)> =
            self.rows.iter().filter(|r| r.excluded).map(|r| (r.task_id, r.env.as_str(), r.object.as_str())).collect();
        excluded.sort();
        excluded.dedup();
        for (id, env, object) in excluded {
            let _ = writeln!(s, "excluded: task {id} {env}/{object} has no preferred test candidate");
        }
        for u in &self.unavailable {
            let _ = writeln!(s, "unavailable: {} task {} {}: {}", u.scenario, u.task_id, u.label, u.reason);
        }
        s
    }
}

fn compute_averages(rows: &[ReportRow]) -> Vec<Average> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut acc: BTreeMap<(Scenario, usize, Group), (usize, f64, f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.excluded) {
        let m = method_rank(&methods, &r.method);
        for g in [Group::All, Group::Env(r.env.clone()), Group::Object(r.object.clone())] {
            let e = acc.entry((r.scenario, m, g)).or_insert((0, 0.0, 0.0, 0.0));
            e.0 += 1;
            e.1 += r.r0 as f64;
            e.2 += r.prec_at_n;
            e.3 += r.stable_prec_at_n;
        }
    }
    acc.into_iter()
        .map(|((scenario, m, group), (k, r0, p, sp))| {
            let k_f = k as f64;
            Average {
                scenario,
                method: methods[m].clone(),
                group,
                rows: k,
                r0: r0 / k_f,
                prec_at_n: p / k_f,
                stable_prec_at_n: sp / k_f,
            }
        })
        .collect()
}

fn has_both_classes(d: &TaskData) -> bool {
    let pos = d.positives();
    pos > 0 && pos < d.len()
}

enum Trained {
    Joint(TaskModel),
    Shared(Vec<TaskModel>),
}

/// Runs every configured (scenario, test task, method) cell.
///
/// Learned methods are trained on the split's training tasks that have both
/// classes. In SESO the task's own model ranks; otherwise the training
/// tasks' models vote (the pooled joint model ranks alone).
pub fn run_benchmark(datasets: &[TaskDataset], cfg: &BenchmarkConfig) -> Result<BenchmarkReport, EvalError> {
    if cfg.n == 0 {
        return Err(EvalError::ZeroN);
    }
    cfg.hyper.validate()?;
    let tasks: Vec<PlacingTask> = datasets.iter().map(|d| d.task.clone()).collect();
    let data: Vec<TaskData> = datasets.iter().map(|d| task_data(d, &cfg.mask)).collect::<Result<_, _>>()?;
    let usable: Vec<bool> = data.iter().map(has_both_classes).collect();

    // training sets per cell
    let mut cells: Vec<(Scenario, usize, Result<Vec<usize>, String>)> = Vec::new();
    for &sc in &cfg.scenarios {
        for (t, task) in tasks.iter().enumerate() {
            let train = match make_split(&tasks, task.task_id, sc) {
                Ok(split) => {
                    let kept: Vec<usize> = split.train.into_iter().filter(|&i| usable[i]).collect();
                    if kept.is_empty() {
                        Err("no training task with both classes".to_string())
                    } else {
                        Ok(kept)
                    }
                }
                Err(e) => Err(e.to_string()),
            };
            cells.push((sc, t, train));
        }
    }

    let learned = !cfg.methods.is_empty();
    let independent: Vec<Option<TaskModel>> = if learned {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| usable[i]).collect();
        let picked: Vec<TaskData> = idx.iter().map(|&i| data[i].clone()).collect();
        let models = learn::train_independent(&picked, &cfg.hyper)?;
        let mut out = vec![None; data.len()];
        for (i, m) in idx.into_iter().zip(models) {
            out[i] = Some(m);
        }
        out
    } else {
        vec![None; data.len()]
    };

    let mut jobs: Vec<(Method, Vec<usize>)> = Vec::new();
    for m in cfg.methods.iter().copied().filter(|m| *m != Method::Independent) {
        for (_, _, train) in &cells {
            if let Ok(train) = train {
                if !jobs.iter().any(|(jm, jt)| *jm == m && jt == train) {
                    jobs.push((m, train.clone()));
                }
            }
        }
    }
    let trained: Vec<Trained> = jobs
        .par_iter()
        .map(|(m, train)| -> Result<Trained, EvalError> {
            let set: Vec<TaskData> = train.iter().map(|&i| data[i].clone()).collect();
            Ok(match m {
                Method::Joint => Trained::Joint(learn::train_joint(&set, &cfg.hyper)?),
                _ => {
                    let fit = learn::train_shared(&set, &cfg.hyper)?;
                    log::debug!(
                        "shared fit on {:?}: {} iterations, objective {:.6}, converged {}",
                        train,
                        fit.trace.len() - 1,
                        fit.trace.last().copied().unwrap_or(f64::NAN),
                        fit.converged
                    );
                    Trained::Shared(fit.models)
                }
            })
        })
        .collect::<Result<_, _>>()?;
    let lookup = |m: Method, train: &[usize]| jobs.iter().position(|(jm, jt)| *jm == m && jt == train).map(|k| &trained[k]);

    let envs: Vec<Option<PointCloud>> = if cfg.baselines.contains(&Baseline::FlatUpright) {
        datasets.par_iter().map(|d| generate_env(&d.task.env, d.test_seed).map(Some)).collect::<Result<_, _>>()?
    } else {
        vec![None; datasets.len()]
    };

    let names: Vec<String> = cfg
        .baselines
        .iter()
        .map(|b| b.name().to_string())
        .chain(cfg.methods.iter().map(|m| m.name().to_string()))
        .collect();
    let per_cell: Vec<Vec<Option<ReportRow>>> = cells
        .par_iter()
        .map(|(sc, t, train)| -> Result<Vec<Option<ReportRow>>, EvalError> {
            let ds = &datasets[*t];
            let task_id = ds.task.task_id;
            let n_preferred = ds.test.iter().filter(|l| l.preferred).count();
            let row = |method: &str, r: RankingResult| ReportRow {
                task_id,
                env: ds.task.env.name.clone(),
                object: ds.task.object.name.clone(),
                scenario: *sc,
                method: method.to_string(),
                n_test: ds.test.len(),
                n_preferred,
                r0: r.r0,
                r0_missing: r.r0_missing,
                prec_at_n: r.prec_at_n,
                stable_prec_at_n: r.stable_prec_at_n,
                excluded: n_preferred == 0,
            };
            let mut out = Vec::new();
            if ds.test.is_empty() {
                return Ok(out);
            }
            for b in &cfg.baselines {
                let ranker = match b {
                    Baseline::Chance => Ranker::Chance { seed: chance_seed(cfg.seed, task_id) },
                    Baseline::LowestPoint => Ranker::LowestPoint,
                    Baseline::FlatUpright => Ranker::FlatUpright {
                        env: envs[*t].as_ref().expect("environment generated for this baseline"),
                        seed: task_seed(cfg.seed ^ FLAT_STREAM, task_id, 0),
                    },
                };
                out.push(Some(row(b.name(), evaluate_masked(&ranker, &ds.test, &cfg.mask, cfg.n)?)));
            }
            let Ok(train) = train else {
                out.extend(cfg.methods.iter().map(|_| None));
                return Ok(out);
            };
            let voters: Vec<TaskModel> = train.iter().filter_map(|&i| independent[i].clone()).collect();
            for m in &cfg.methods {
                let result = match (m, lookup(*m, train)) {
                    (Method::Independent, _) if *sc == Scenario::Seso => {
                        let model = independent[*t].as_ref().expect("usable test task in its own split");
                        evaluate_masked(&Ranker::Model(model), &ds.test, &cfg.mask, cfg.n)?
                    }
                    (Method::Independent, _) => evaluate_masked(&Ranker::Voting(&voters), &ds.test, &cfg.mask, cfg.n)?,
                    (_, Some(Trained::Joint(model))) => {
                        evaluate_masked(&Ranker::Model(model), &ds.test, &cfg.mask, cfg.n)?
                    }
                    (_, Some(Trained::Shared(models))) if *sc == Scenario::Seso => {
                        let own = models.iter().find(|x| x.task_id == Some(task_id)).expect("own model in SESO");
                        evaluate_masked(&Ranker::Model(own), &ds.test, &cfg.mask, cfg.n)?
                    }
                    (_, Some(Trained::Shared(models))) => {
                        evaluate_masked(&Ranker::Voting(models), &ds.test, &cfg.mask, cfg.n)?
                    }
                    (_, None) => unreachable!("every available cell was trained"),
                };
                out.push(Some(row(m.name(), result)));
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut unavailable = Vec::new();
    for ((sc, t, train), cell_rows) in cells.iter().zip(per_cell) {
        if let Err(reason) = train {
            if learned {
                unavailable.push(Unavailable {
                    task_id: tasks[*t].task_id,
                    label: tasks[*t].label(),
                    scenario: *sc,
                    reason: reason.clone(),
                });
            }
        }
        rows.extend(cell_rows.into_iter().flatten());
    }
    // scenario-major, then method, then task
    rows.sort_by(|a, b| {
        (a.scenario, method_rank(&names, &a.method), a.task_id).cmp(&(b.scenario, method_rank(&names, &b.method), b.task_id))
    });
    Ok(BenchmarkReport::new(cfg.n, rows, unavailable))
}

/// SESO with independent models under each feature mask; methods are named
/// after the mask.
pub fn ablate_features(
    datasets: &[TaskDataset],
    masks: &[FeatureMask],
    hyper: &HyperParams,
    n: usize,
    seed: u64,
) -> Result<BenchmarkReport, EvalError> {
    let mut rows = Vec::new();
    let mut unavailable = Vec::new();
    for mask in masks {
        let cfg = BenchmarkConfig {
            scenarios: vec![Scenario::Seso],
            methods: vec![Method::Independent],
            baselines: Vec::new(),
            hyper: hyper.clone(),
            mask: mask.clone(),
            n,
            seed,
        };
        let rep = run_benchmark(datasets, &cfg)?;
        let label = format!("features:{}", mask.name());
        rows.extend(rep.rows.into_iter().map(|r| ReportRow { method: label.clone(), ..r }));
        if unavailable.is_empty() {
            unavailable = rep.unavailable;
        }
    }
    Ok(BenchmarkReport::new(n, rows, unavailable))
}
