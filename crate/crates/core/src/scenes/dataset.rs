//! Labeled candidate sets per task and their on-disk form.

use super::{build_object, generate_env, preference_label, PlacingTask, RuleTable, SceneError};
use crate::features::{feature_names, FeatureConfig, FeatureExtractor, FeatureVector, N_FEATURES};
use crate::io::write_atomic;
use crate::geom::{canonical_orientations, sample_candidates, CollisionChecker, Placement, Point3, Rotation};
use crate::physics::{label_validity, SimParams, Settler, Termination};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Sampled locations per task and split; each is paired with all 18
    /// orientations.
    pub n_loc: usize,
    /// Height added above the environment's bounding box for sampling, meters.
    pub headroom: f64,
    pub seed: u64,
    /// Extra attempts with fresh seeds when a training split has no positives.
    pub max_regenerations: usize,
    /// Settling stops once the pose distance² exceeds this multiple of δ_s.
    pub abort_factor: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_loc: 100,
            headroom: 0.12,
            seed: 7,
            max_regenerations: 3,
            abort_factor: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPlacement {
    pub placement: Placement,
    pub features: FeatureVector,
    pub stable: bool,
    pub preferred: bool,
}

impl LabeledPlacement {
    /// `+1` for preferred placements, `-1` otherwise.
    pub fn y(&self) -> f64 {
        if self.preferred {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub candidates: usize,
    pub collision_free: usize,
    pub stable: usize,
    pub preferred: usize,
    pub train: usize,
    pub train_positive: usize,
    pub test: usize,
    pub test_positive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: PlacingTask,
    /// Seed the training candidates were drawn with (after any regeneration).
    pub train_seed: u64,
    pub test_seed: u64,
    /// Number of training draws, including the accepted one.
    pub attempts: usize,
    /// Sampled candidates before collision filtering, both splits.
    pub candidates: usize,
    pub train: Vec<LabeledPlacement>,
    pub test: Vec<LabeledPlacement>,
}

impl TaskDataset {
    pub fn counts(&self) -> TaskCounts {
        let all = self.train.iter().chain(&self.test);
        let pos = |v: &[LabeledPlacement]| v.iter().filter(|l| l.preferred).count();
        TaskCounts {
            candidates: self.candidates,
            collision_free: self.train.len() + self.test.len(),
            stable: all.clone().filter(|l| l.stable).count(),
            preferred: all.filter(|l| l.preferred).count(),
            train: self.train.len(),
            train_positive: pos(&self.train),
            test: self.test.len(),
            test_positive: pos(&self.test),
        }
    }
}

const TEST_STREAM: u64 = 0x7E57_0000_0000_0001;

/// Seed of the test split, independent of every training attempt.
pub fn test_seed(seed: u64, task_id: usize) -> u64 {
    task_seed(seed ^ TEST_STREAM, task_id, 0)
}

/// Per-task training seed derived from the corpus seed, task id and attempt
/// number.
pub fn task_seed(seed: u64, task_id: usize, attempt: usize) -> u64 {
    let mut z = seed
        .wrapping_add((task_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_candidates(
    task: &PlacingTask,
    rules: &RuleTable,
    cfg: &DatasetConfig,
    sim: &SimParams,
    feat: &FeatureConfig,
    seed: u64,
) -> Result<(usize, Vec<LabeledPlacement>), SceneError> {
    let object = build_object(&task.object, seed)?;
    let env = generate_env(&task.env, seed)?;
    let orientations = canonical_orientations();
    let candidates = sample_candidates(&env, cfg.n_loc, &orientations, seed, cfg.headroom)?;
    let checker = CollisionChecker::new(&env, feat.clearance)?;
    let free: Vec<Placement> = candidates.iter().filter(|p| checker.is_free(&object.cloud, p)).copied().collect();
    let params = SimParams { abort_distance_sq: Some(cfg.abort_factor * sim.validity_delta), ..sim.clone() };
    let settler = Settler::new(&object.cloud, &env, &params)?;
    let extractor = FeatureExtractor::new(&env, feat)?;
    let labeled = free
        .par_iter()
        .map(|p| -> Result<LabeledPlacement, SceneError> {
            let result = settler.run(p)?;
            let stable = label_validity(p, &result, sim.validity_delta);
            if result.termination == Termination::MaxSteps {
                log::debug!("{} candidate {} hit max_steps", task.label(), p.candidate_id);
            }
            let preferred = preference_label(task, &object, rules, p, stable)?;
            let features = extractor.extract(&object.cloud, p)?;
            Ok(LabeledPlacement { placement: *p, features, stable, preferred })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((candidates.len(), labeled))
}

/// Samples, filters, settles, labels and featurizes one task, drawing the
/// training and test splits independently. The training split is redrawn
/// with fresh seeds (up to `max_regenerations` times) while it has no
/// positive example.
pub fn build_task_dataset(
    task: &PlacingTask,
    rules: &RuleTable,
    cfg: &DatasetConfig,
    sim: &SimParams,
    feat: &FeatureConfig,
) -> Result<TaskDataset, SceneError> {
    if cfg.n_loc == 0 {
        return Err(SceneError::Dataset("n_loc must be positive".into()));
    }
    let test_seed = test_seed(cfg.seed, task.task_id);
    let (n_test, test) = label_candidates(task, rules, cfg, sim, feat, test_seed)?;
    let mut attempt = 0;
    loop {
        let train_seed = task_seed(cfg.seed, task.task_id, attempt);
        let (n_train, train) = label_candidates(task, rules, cfg, sim, feat, train_seed)?;
        let ds = TaskDataset {
            task: task.clone(),
            train_seed,
            test_seed,
            attempts: attempt + 1,
            candidates: n_train + n_test,
            train,
            test: test.clone(),
        };
        let c = ds.counts();
        if c.train == 0 {
            log::warn!("{}: no collision-free training candidates; recorded as empty", task.label());
            return Ok(ds);
        }
        if c.train_positive > 0 || attempt >= cfg.max_regenerations {
            if c.train_positive == 0 {
                log::warn!("{}: no positive training example after {} attempts", task.label(), attempt + 1);
            }
            return Ok(ds);
        }
        log::warn!("{}: no positive training example with seed {train_seed}; regenerating", task.label());
        attempt += 1;
    }
}

/// Builds every task, in parallel, returned in input order.
pub fn build_dataset(
    tasks: &[PlacingTask],
    rules: &RuleTable,
    cfg: &DatasetConfig,
    sim: &SimParams,
    feat: &FeatureConfig,
) -> Result<Vec<TaskDataset>, SceneError> {
    if tasks.is_empty() {
        return Err(SceneError::Dataset("no tasks".into()));
    }
    sim.validate()?;
    feat.validate()?;
    tasks.par_iter().map(|t| build_task_dataset(t, rules, cfg, sim, feat)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: PlacingTask,
    pub train_seed: u64,
    pub test_seed: u64,
    pub attempts: usize,
    pub counts: TaskCounts,
    pub empty: bool,
    pub features_train: String,
    pub labels_train: String,
    pub features_test: String,
    pub labels_test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub sim: SimParams,
    pub features: FeatureConfig,
    pub total_candidates: usize,
    pub total_placements: usize,
    pub tasks: Vec<ManifestEntry>,
}

fn file_stem(task: &PlacingTask) -> String {
    format!("task_{:03}_{}_{}", task.task_id, task.env.name, task.object.name)
}

pub fn features_csv(rows: &[LabeledPlacement]) -> String {
    let mut out = feature_names().join(",");
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.features.as_slice().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn labels_csv(rows: &[LabeledPlacement]) -> String {
    let mut out = String::from("candidate_id,Tx,Ty,Tz,qw,qx,qy,qz,stable,preferred,y\n");
    for r in rows {
        let t = r.placement.location;
        let q = r.placement.orientation.wxyz();
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{}",
            r.placement.candidate_id,
            t.x,
            t.y,
            t.z,
            q[0],
            q[1],
            q[2],
            q[3],
            u8::from(r.stable),
            u8::from(r.preferred),
            r.y() as i8
        );
    }
    out
}

/// Writes per-task CSVs and `manifest.json` under `dir`.
pub fn write_dataset(
    dir: &Path,
    datasets: &[TaskDataset],
    cfg: &DatasetConfig,
    sim: &SimParams,
    feat: &FeatureConfig,
) -> Result<Manifest, SceneError> {
    let mut tasks = Vec::new();
    for ds in datasets {
        let stem = file_stem(&ds.task);
        let names = [
            format!("{stem}_train_features.csv"),
            format!("{stem}_train_labels.csv"),
            format!("{stem}_test_features.csv"),
            format!("{stem}_test_labels.csv"),
        ];
        write_atomic(&dir.join(&names[0]), features_csv(&ds.train).as_bytes())?;
        write_atomic(&dir.join(&names[1]), labels_csv(&ds.train).as_bytes())?;
        write_atomic(&dir.join(&names[2]), features_csv(&ds.test).as_bytes())?;
        write_atomic(&dir.join(&names[3]), labels_csv(&ds.test).as_bytes())?;
        let counts = ds.counts();
        let [features_train, labels_train, features_test, labels_test] = names;
        tasks.push(ManifestEntry {
            task: ds.task.clone(),
            train_seed: ds.train_seed,
            test_seed: ds.test_seed,
            attempts: ds.attempts,
            counts,
            empty: counts.collision_free == 0,
            features_train,
            labels_train,
            features_test,
            labels_test,
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        sim: sim.clone(),
        features: feat.clone(),
        total_candidates: tasks.iter().map(|t| t.counts.candidates).sum(),
        total_placements: tasks.iter().map(|t| t.counts.collision_free).sum(),
        tasks,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> SceneError {
    SceneError::Dataset(format!("{}:{}: {msg}", path.display(), line + 1))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>, SceneError> {
    let text = crate::io::read_to_string(path)?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_owned).collect()).collect())
}

fn read_split(dir: &Path, features: &str, labels: &str) -> Result<Vec<LabeledPlacement>, SceneError> {
    let fpath = dir.join(features);
    let lpath = dir.join(labels);
    let frows = read_rows(&fpath)?;
    let lrows = read_rows(&lpath)?;
    if frows.len() != lrows.len() {
        return Err(SceneError::Dataset(format!("{} and {} differ in length", fpath.display(), lpath.display())));
    }
    let mut out = Vec::with_capacity(frows.len());
    for (i, (f, l)) in frows.iter().zip(&lrows).enumerate() {
        if f.len() != N_FEATURES || l.len() != 11 {
            return Err(parse_err(&fpath, i + 1, "wrong column count"));
        }
        let values = f
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(&fpath, i + 1, e)))
            .collect::<Result<Vec<_>, _>>()?;
        let num = |j: usize| l[j].parse::<f64>().map_err(|e| parse_err(&lpath, i + 1, e));
        let id = l[0].parse::<u32>().map_err(|e| parse_err(&lpath, i + 1, e))?;
        let rotation = Rotation::from_wxyz(num(4)?, num(5)?, num(6)?, num(7)?)?;
        let placement = Placement::new(Point3::new(num(1)?, num(2)?, num(3)?), rotation, id);
        out.push(LabeledPlacement {
            placement,
            features: FeatureVector::new(values)?,
            stable: l[8] == "1",
            preferred: l[9] == "1",
        });
    }
    Ok(out)
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<TaskDataset>), SceneError> {
    let path = dir.join("manifest.json");
    let text = crate::io::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(SceneError::Dataset(format!("unsupported dataset format {}", manifest.format_version)));
    }
    let mut out = Vec::new();
    for e in &manifest.tasks {
        out.push(TaskDataset {
            task: e.task.clone(),
            train_seed: e.train_seed,
            test_seed: e.test_seed,
            attempts: e.attempts,
            candidates: e.counts.candidates,
            train: read_split(dir, &e.features_train, &e.labels_train)?,
            test: read_split(dir, &e.features_test, &e.labels_test)?,
        });
    }
    Ok((manifest, out))
}
