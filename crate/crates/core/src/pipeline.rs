//! End-to-end commands over one JSON configuration: generate datasets, train
//! models, evaluate, rank with re-verification, and single-placement
//! simulation.
//!
//! Everything is written under `out_dir/{datasets,models,reports}` with
//! atomic renames.

use crate::eval::{self, Baseline, BenchmarkConfig, BenchmarkReport, EvalError, FeatureMask, Scenario};
use crate::features::{FeatureConfig, FeatureFamily, FeatureError};
use crate::geom::Placement;
use crate::io::{read_to_string, write_atomic, IoError};
use crate::learn::{self, HyperParams, LearnError, Method, ModelFile, TaskModel};
use crate::physics::{label_validity, trajectory_csv, PhysicsError, SettleResult, Settler, SimParams, Termination};
use crate::scenes::{
    build_dataset, build_object, generate_env, preference_label, read_dataset, write_dataset, Corpus, DatasetConfig,
    Manifest, RuleTable, SceneError, TaskDataset,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no dataset at {0}: run gen first")]
    MissingDataset(PathBuf),
    #[error("no model file at {0}: run train first")]
    MissingModel(PathBuf),
    #[error("task {0} not in dataset")]
    UnknownTask(usize),
    #[error("candidate {candidate} not in the test split of task {task}")]
    UnknownCandidate { task: usize, candidate: u32 },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Features(#[from] FeatureError),
}

/// The whole run in one file. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub corpus: Corpus,
    pub rules: RuleTable,
    pub dataset: DatasetConfig,
    pub sim: SimParams,
    pub features: FeatureConfig,
    pub hyper: HyperParams,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub baselines: Vec<Baseline>,
    /// Also run the SESO feature-family ablation during `eval`.
    pub ablation: bool,
    /// Cutoff of the precision metric.
    pub n: usize,
    /// Seed of the randomized baselines.
    pub eval_seed: u64,
    /// Worker threads; `None` uses every available processor.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            out_dir: PathBuf::from("out"),
            corpus: Corpus::desk_default(),
            rules: RuleTable::default_table(),
            dataset: DatasetConfig::default(),
            sim: SimParams::default(),
            features: FeatureConfig::default(),
            hyper: HyperParams::default(),
            scenarios: Scenario::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            baselines: Baseline::ALL.to_vec(),
            ablation: true,
            n: 5,
            eval_seed: 11,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("schema_version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        for t in self.corpus.tasks()? {
            if self.rules.rule(t.object.shape.class(), t.env.shape.class()).is_none() {
                return bad(format!("no preference rule for task {}", t.label()));
            }
        }
        self.sim.validate()?;
        self.features.validate()?;
        self.hyper.validate()?;
        Ok(())
    }

    /// Replaces the dataset and evaluation seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.eval_seed = seed;
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.out_dir.join("datasets")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn model_path(&self, method: Method) -> PathBuf {
        self.models_dir().join(format!("{method}.json"))
    }
}

/// Runs `f` on a pool of `workers` threads (all processors when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    b.build().expect("thread pool").install(f)
}

/// Builds every task's dataset and writes it with its manifest.
pub fn cmd_gen(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let tasks = cfg.corpus.tasks()?;
    let datasets = build_dataset(&tasks, &cfg.rules, &cfg.dataset, &cfg.sim, &cfg.features)?;
    Ok(write_dataset(&cfg.datasets_dir(), &datasets, &cfg.dataset, &cfg.sim, &cfg.features)?)
}

pub fn load_datasets(cfg: &PipelineConfig) -> Result<Vec<TaskDataset>, PipelineError> {
    let dir = cfg.datasets_dir();
    if !dir.join("manifest.json").exists() {
        return Err(PipelineError::MissingDataset(dir));
    }
    Ok(read_dataset(&dir)?.1)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub path: PathBuf,
    pub file: ModelFile,
    /// Objective after each outer iteration (shared), or the final
    /// objective(s) of the SVM solves.
    pub trace: Vec<f64>,
    pub skipped: Vec<usize>,
}

/// Trains `method` on every task whose training split has both classes and
/// writes `models/<method>.json` plus a training log.
pub fn cmd_train(cfg: &PipelineConfig, method: Method) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let all = FeatureMask::all();
    let mut data = Vec::new();
    let mut skipped = Vec::new();
    for ds in &datasets {
        let d = eval::task_data(ds, &all)?;
        if d.positives() == 0 || d.positives() == d.len() {
            log::warn!("{}: training split lacks a class; skipped", ds.task.label());
            skipped.push(ds.task.task_id);
        } else {
            data.push(d);
        }
    }
    let mut log_text = format!("method {method}\ntasks {:?}\nskipped {skipped:?}\n", data.iter().map(|d| d.task_id).collect::<Vec<_>>());
    let (models, trace) = match method {
        Method::Independent => {
            let models = learn::train_independent(&data, &cfg.hyper)?;
            let objs = objectives(&data, &models, &cfg.hyper)?;
            for (d, o) in data.iter().zip(&objs) {
                let _ = writeln!(log_text, "task {} objective {o:.12e}", d.task_id);
            }
            (models, objs)
        }
        Method::Joint => {
            let model = learn::train_joint(&data, &cfg.hyper)?;
            let obj = learn::shared_objective(&data, &vec![model.clone(); data.len()], &HyperParams {
                lambda_s: 0.0,
                lambda_b: 0.0,
                ..cfg.hyper.clone()
            })?;
            let _ = writeln!(log_text, "pooled objective {obj:.12e}");
            (vec![model], vec![obj])
        }
        Method::Shared => {
            let fit = learn::train_shared(&data, &cfg.hyper)?;
            for (k, v) in fit.trace.iter().enumerate() {
                let _ = writeln!(log_text, "iter {k} objective {v:.12e}");
            }
            let _ = writeln!(log_text, "converged {}", fit.converged);
            (fit.models, fit.trace)
        }
    };
    let file = ModelFile::new(method, cfg.hyper.clone(), models);
    let path = cfg.model_path(method);
    file.save(&path)?;
    write_atomic(&cfg.models_dir().join(format!("{method}_train.log")), log_text.as_bytes())?;
    Ok(TrainOutcome { path, file, trace, skipped })
}

fn objectives(
    data: &[learn::TaskData],
    models: &[TaskModel],
    hp: &HyperParams,
) -> Result<Vec<f64>, PipelineError> {
    data.iter()
        .zip(models)
        .map(|(d, m)| {
            let z = d.standardized(&m.standardizer)?;
            Ok(learn::svm_objective(&z, &m.omega, m.bias, hp.c))
        })
        .collect()
}

/// Parses the objective trace back out of a training log.
pub fn parse_trace(log_text: &str) -> Vec<f64> {
    log_text
        .lines()
        .filter(|l| l.starts_with("iter "))
        .filter_map(|l| l.rsplit(' ').next()?.parse().ok())
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: BenchmarkReport,
    pub ablation: Option<BenchmarkReport>,
    pub paths: Vec<PathBuf>,
}

fn write_report(dir: &Path, stem: &str, rep: &BenchmarkReport, paths: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(rep).expect("report serializes") + "\n";
    for (ext, body) in [("csv", rep.to_csv()), ("txt", rep.to_table()), ("json", json)] {
        let p = dir.join(format!("{stem}.{ext}"));
        write_atomic(&p, body.as_bytes())?;
        paths.push(p);
    }
    Ok(())
}

/// Benchmark over the configured (or the given) scenario and method; writes
/// `reports/<stem>.{csv,txt,json}`.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    scenario: Option<Scenario>,
    method: Option<Method>,
) -> Result<EvalOutcome, PipelineError> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let bench = BenchmarkConfig {
        scenarios: scenario.map_or_else(|| cfg.scenarios.clone(), |s| vec![s]),
        methods: method.map_or_else(|| cfg.methods.clone(), |m| vec![m]),
        baselines: cfg.baselines.clone(),
        hyper: cfg.hyper.clone(),
        mask: FeatureMask::all(),
        n: cfg.n,
        seed: cfg.eval_seed,
    };
    let report = eval::run_benchmark(&datasets, &bench)?;
    let stem = format!(
        "benchmark_{}_{}",
        scenario.map_or("all".into(), |s| s.name().to_lowercase()),
        method.map_or("all", |m| m.name())
    );
    let mut paths = Vec::new();
    write_report(&cfg.reports_dir(), &stem, &report, &mut paths)?;
    let ablation = if cfg.ablation && matches!(scenario, None | Some(Scenario::Seso)) {
        let rep = eval::ablate_features(&datasets, &ablation_masks(), &cfg.hyper, cfg.n, cfg.eval_seed)?;
        write_report(&cfg.reports_dir(), "ablation", &rep, &mut paths)?;
        Some(rep)
    } else {
        None
    };
    Ok(EvalOutcome { report, ablation, paths })
}

/// Single families, then all features.
pub fn ablation_masks() -> Vec<FeatureMask> {
    let mut out: Vec<FeatureMask> =
        FeatureFamily::ALL.iter().map(|f| FeatureMask::new(&[*f]).expect("nonempty")).collect();
    out.push(FeatureMask::all());
    out
}

/// A top-ranked candidate after re-settling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPlacement {
    pub rank: usize,
    pub candidate_id: u32,
    pub score: f64,
    pub stored_stable: bool,
    pub stored_preferred: bool,
    pub verified_stable: bool,
    pub verified_preferred: bool,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub task_id: usize,
    pub method: Method,
    pub top_k: usize,
    pub ranked: Vec<RankedPlacement>,
    /// Rank of the first verified valid placement.
    pub first_valid: Option<usize>,
}

impl RankOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "rank,candidate_id,score,stored_stable,stored_preferred,verified_stable,verified_preferred,termination,first_valid\n",
        );
        for r in &self.ranked {
            let _ = writeln!(
                s,
                "{},{},{:.9},{},{},{},{},{:?},{}",
                r.rank,
                r.candidate_id,
                r.score,
                r.stored_stable,
                r.stored_preferred,
                r.verified_stable,
                r.verified_preferred,
                r.termination,
                self.first_valid == Some(r.rank)
            );
        }
        s
    }
}

fn labeling_params(cfg: &PipelineConfig) -> SimParams {
    SimParams { abort_distance_sq: Some(cfg.dataset.abort_factor * cfg.sim.validity_delta), ..cfg.sim.clone() }
}

fn find_task<'a>(datasets: &'a [TaskDataset], task_id: usize) -> Result<&'a TaskDataset, PipelineError> {
    datasets.iter().find(|d| d.task.task_id == task_id).ok_or(PipelineError::UnknownTask(task_id))
}

/// Scores the task's test candidates with a trained model file, keeps the
/// best `top_k` and re-verifies each by settling and relabeling.
pub fn cmd_rank(cfg: &PipelineConfig, method: Method, task_id: usize, top_k: usize) -> Result<RankOutcome, PipelineError> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let ds = find_task(&datasets, task_id)?;
    let path = cfg.model_path(method);
    if !path.exists() {
        return Err(PipelineError::MissingModel(path));
    }
    let file = ModelFile::load(&path)?;
    let own = file.models.iter().find(|m| m.task_id == Some(task_id));
    let scores: Vec<f64> = ds
        .test
        .iter()
        .map(|l| match own {
            Some(m) => m.predict(l.features.as_slice()),
            None => learn::score_voting(&file.models, l.features.as_slice()),
        })
        .collect::<Result<_, _>>()?;
    let cands: Vec<eval::Candidate> =
        ds.test.iter().map(|l| eval::Candidate { placement: &l.placement, features: l.features.as_slice() }).collect();
    let order = eval::order_by_scores(&cands, &scores);
    let k = if top_k > order.len() {
        log::warn!("top_k {top_k} exceeds the {} candidates of task {task_id}; clamped", order.len());
        order.len()
    } else {
        top_k
    };
    let object = build_object(&ds.task.object, ds.test_seed)?;
    let env = generate_env(&ds.task.env, ds.test_seed)?;
    let settler = Settler::new(&object.cloud, &env, &labeling_params(cfg))?;
    let ranked: Vec<RankedPlacement> = order[..k]
        .par_iter()
        .enumerate()
        .map(|(i, &j)| -> Result<RankedPlacement, PipelineError> {
            let l = &ds.test[j];
            let result = settler.run(&l.placement)?;
            let stable = label_validity(&l.placement, &result, cfg.sim.validity_delta);
            let preferred = preference_label(&ds.task, &object, &cfg.rules, &l.placement, stable)?;
            Ok(RankedPlacement {
                rank: i + 1,
                candidate_id: l.placement.candidate_id,
                score: scores[j],
                stored_stable: l.stable,
                stored_preferred: l.preferred,
                verified_stable: stable,
                verified_preferred: preferred,
                termination: result.termination,
            })
        })
        .collect::<Result<_, _>>()?;
    let first_valid = ranked.iter().find(|r| r.verified_preferred).map(|r| r.rank);
    let out = RankOutcome { task_id, method, top_k: k, ranked, first_valid };
    write_atomic(&cfg.reports_dir().join(format!("rank_task{task_id}_{method}.csv")), out.to_csv().as_bytes())?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub placement: Placement,
    pub result: SettleResult,
    pub valid: bool,
    pub trajectory_path: PathBuf,
}

/// Settles one test candidate (the first when `candidate` is `None`) with the
/// configured parameters, no early abort, and dumps its trajectory.
pub fn cmd_simulate(
    cfg: &PipelineConfig,
    task_id: usize,
    candidate: Option<u32>,
) -> Result<SimulateOutcome, PipelineError> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let ds = find_task(&datasets, task_id)?;
    let l = match candidate {
        Some(c) => ds.test.iter().find(|l| l.placement.candidate_id == c),
        None => ds.test.first(),
    }
    .ok_or(PipelineError::UnknownCandidate { task: task_id, candidate: candidate.unwrap_or(0) })?;
    let object = build_object(&ds.task.object, ds.test_seed)?;
    let env = generate_env(&ds.task.env, ds.test_seed)?;
    let settler = Settler::new(&object.cloud, &env, &cfg.sim)?;
    let (result, rows) = settler.run_traced(&l.placement)?;
    let valid = label_validity(&l.placement, &result, cfg.sim.validity_delta);
    let path = cfg.reports_dir().join(format!("simulate_task{task_id}_cand{}.csv", l.placement.candidate_id));
    write_atomic(&path, trajectory_csv(&rows).as_bytes())?;
    Ok(SimulateOutcome { placement: l.placement, result, valid, trajectory_path: path })
}
