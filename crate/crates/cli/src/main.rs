use clap::{Parser, Subcommand};
use placekit::eval::Scenario;
use placekit::learn::Method;
use placekit::pipeline::{self, PipelineConfig, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "placekit", version, about = "Generate placing datasets, train rankers, evaluate and verify placements")]
struct Cli {
    /// JSON pipeline configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the dataset and evaluation seeds.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (default: all processors).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, settle, label and featurize every task.
    Gen,
    /// Train models on the generated datasets.
    Train {
        /// independent, joint or shared; all configured methods when omitted.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run the benchmark and write reports.
    Eval {
        /// SESO, SENO, NESO or NENO; all configured scenarios when omitted.
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Rank a task's test candidates and re-verify the best ones.
    Rank {
        #[arg(long, default_value = "independent")]
        method: Method,
        #[arg(long)]
        task: usize,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Settle one test candidate and dump its trajectory.
    Simulate {
        #[arg(long)]
        task: usize,
        /// Candidate id within the test split; the first one when omitted.
        #[arg(long)]
        candidate: Option<u32>,
    },
    /// Print the default configuration.
    InitConfig,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed_override {
        cfg.override_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    cfg.validate()?;
    let workers = cfg.workers;
    pipeline::with_workers(workers, move || execute(&cfg, cli.command))
}

fn execute(cfg: &PipelineConfig, command: Command) -> Result<(), PipelineError> {
    match command {
        Command::InitConfig => print!("{}", cfg.to_json()),
        Command::Gen => {
            let m = pipeline::cmd_gen(cfg)?;
            for t in &m.tasks {
                let c = &t.counts;
                println!(
                    "task {:>3} {:<28} train {:>5} (+{:<4}) test {:>5} (+{})",
                    t.task.task_id,
                    t.task.label(),
                    c.train,
                    c.train_positive,
                    c.test,
                    c.test_positive
                );
            }
            println!("{} placements in {}", m.total_placements, cfg.datasets_dir().display());
        }
        Command::Train { method } => {
            let methods = method.map_or_else(|| cfg.methods.clone(), |m| vec![m]);
            for m in methods {
                let out = pipeline::cmd_train(cfg, m)?;
                let last = out.trace.last().copied().unwrap_or(f64::NAN);
                println!("{m}: {} model(s), objective {last:.6} -> {}", out.file.models.len(), out.path.display());
            }
        }
        Command::Eval { scenario, method } => {
            let out = pipeline::cmd_eval(cfg, scenario, method)?;
            print!("{}", out.report.to_table());
            if let Some(ab) = &out.ablation {
                print!("{}", ab.to_table());
            }
            for p in &out.paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Rank { method, task, top_k } => {
            let out = pipeline::cmd_rank(cfg, method, task, top_k)?;
            println!("{:>4} {:>9} {:>10} {:>7} {:>9}  stored", "rank", "candidate", "score", "stable", "preferred");
            for r in &out.ranked {
                let mark = if out.first_valid == Some(r.rank) { "  <- first valid" } else { "" };
                println!(
                    "{:>4} {:>9} {:>10.4} {:>7} {:>9}  {}/{}{mark}",
                    r.rank,
                    r.candidate_id,
                    r.score,
                    r.verified_stable,
                    r.verified_preferred,
                    r.stored_stable,
                    r.stored_preferred
                );
            }
            if out.first_valid.is_none() {
                println!("no verified valid placement in the top {}", out.top_k);
            }
        }
        Command::Simulate { task, candidate } => {
            let out = pipeline::cmd_simulate(cfg, task, candidate)?;
            let s = &out.result.final_state;
            println!(
                "candidate {}: {:?} after {} steps, valid {}, final position ({:.4}, {:.4}, {:.4})",
                out.placement.candidate_id,
                out.result.termination,
                out.result.steps,
                out.valid,
                s.position.x,
                s.position.y,
                s.position.z
            );
            println!("trajectory {}", out.trajectory_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
