//! Builds the default corpus and prints per-task label counts and timing.

use placekit::features::FeatureConfig;
use placekit::physics::SimParams;
use placekit::scenes::{build_task_dataset, Corpus, DatasetConfig, RuleTable};
use std::time::Instant;

fn main() {
    let n_loc = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let cfg = DatasetConfig { n_loc, max_regenerations: 0, ..DatasetConfig::default() };
    let rules = RuleTable::default_table();
    let total = Instant::now();
    println!("{:<28} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7}", "task", "cand", "free", "stable", "pref", "trpos", "tepos", "secs");
    for task in Corpus::desk_default().tasks().unwrap() {
        let t = Instant::now();
        let ds = build_task_dataset(&task, &rules, &cfg, &SimParams::default(), &FeatureConfig::default()).unwrap();
        let c = ds.counts();
        println!(
            "{:<28} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7.1}",
            task.label(),
            c.candidates,
            c.collision_free,
            c.stable,
            c.preferred,
            c.train_positive,
            c.test_positive,
            t.elapsed().as_secs_f64()
        );
    }
    println!("total {:.1}s", total.elapsed().as_secs_f64());
}
