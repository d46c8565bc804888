//! For one task, settles the collision-free candidates whose pose satisfies
//! the preference rule and prints how each run ended.

use placekit::features::FeatureConfig;
use placekit::geom::{canonical_orientations, sample_candidates, CollisionChecker};
use placekit::physics::{pose_distance_sq, SimParams, Settler};
use placekit::scenes::{build_object, generate_env, preference_label, Corpus, DatasetConfig, RuleTable};

fn main() {
    let label = std::env::args().nth(1).expect("task label like rack_slots/mug");
    let task = Corpus::desk_default().tasks().unwrap().into_iter().find(|t| t.label() == label).expect("task");
    let cfg = DatasetConfig::default();
    let rules = RuleTable::default_table();
    let object = build_object(&task.object, 0).unwrap();
    let env = generate_env(&task.env, 0).unwrap();
    let cands = sample_candidates(&env, cfg.n_loc, &canonical_orientations(), cfg.seed, cfg.headroom).unwrap();
    let checker = CollisionChecker::new(&env, FeatureConfig::default().clearance).unwrap();
    let sim = SimParams::default();
    let settler = Settler::new(&object.cloud, &env, &sim).unwrap();
    let mut shown = 0;
    let mut ok = 0;
    for p in cands.iter().filter(|p| checker.is_free(&object.cloud, p)) {
        if !preference_label(&task, &object, &rules, p, true).unwrap() {
            continue;
        }
        let r = settler.run(p).unwrap();
        let d = pose_distance_sq(p, &r.final_state);
        let dz = r.final_state.position.z - p.location.z;
        let ang = p.orientation.angle_to(&r.final_state.orientation).to_degrees();
        println!(
            "id {:5} T=({:+.3},{:+.3},{:.3}) {:?} steps {:5} d2 {:.4} dz {:+.3} angle {:6.1}",
            p.candidate_id, p.location.x, p.location.y, p.location.z, r.termination, r.steps, d, dz, ang
        );
        shown += 1;
        if r.converged && d < sim.validity_delta {
            ok += 1;
        }
        if shown >= 400 {
            break;
        }
    }
    println!("valid {ok} of {shown}");
}
