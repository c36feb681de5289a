use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use multiarm::birrt::{generate_expert_file, read_expert_file};
use multiarm::config::{write_run_record, RunConfig};
use multiarm::env::{collect_episode, read_episode_log, write_episode_log, MultiArmEnv};
use multiarm::eval::{
    ablation_csv, bench_runtime, compare_ablations, eval_env_config, evaluate, evaluate_birrt, parse_ablation_csv,
    write_bench_csv, AblationEntry,
};
use multiarm::kinematics::ArmModel;
use multiarm::neural::Checkpoint;
use multiarm::taskgen::{generate_dataset, read_dataset, write_dataset, TaskDataset, TaskMode};
use multiarm::trainer::{behavior_clone, expert_pairs, read_metrics, run_training, Ablation, PolicyActor};
use multiarm::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "multiarm", version, about = "Multi-arm motion planning: tasks, expert plans, training and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults to $MULTIARM_CONFIG when unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set env.max_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Parallel workers (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arm description JSON (default: built-in UR5).
    #[arg(long, global = true)]
    arm: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task dataset.
    GenTasks {
        /// Arm-count range such as `1-4`, or a single count.
        #[arg(long)]
        k: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "static")]
        mode: TaskMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan expert trajectories for a dataset; resumes an interrupted file.
    GenExpert {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy.
    Train {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        experts: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ours")]
        ablation: Ablation,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint (or the planner baseline) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "birrt")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: PathBuf,
        /// Output directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the centralized planner instead of a policy.
        #[arg(long)]
        birrt: bool,
        /// Evaluate without observations of other arms.
        #[arg(long)]
        no_observe_others: bool,
    },
    /// Runtime table by arm count; always single-threaded.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Tasks per arm count.
        #[arg(long, default_value_t = 5)]
        per_k: usize,
    },
    /// Export one deterministic episode as a JSON-lines log.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        task_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate named checkpoints side by side, e.g. `--entry ours=ckpt.json`.
    Ablate {
        #[arg(long = "entry", value_name = "NAME=PATH", required = true)]
        entries: Vec<String>,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(c.config.as_deref())?;
    cfg.apply_overrides(&c.overrides)?;
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = &c.arm {
        cfg.arm = Some(a.clone());
    }
    Ok(cfg)
}

fn load_arm(cfg: &RunConfig) -> Result<Arc<ArmModel>> {
    Ok(Arc::new(match &cfg.arm {
        Some(p) => ArmModel::load(p)?,
        None => ArmModel::ur5(),
    }))
}

fn parse_k_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("invalid arm-count range '{s}'"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let k = s.trim().parse().map_err(|_| bad())?;
            (k, k)
        }
    };
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Usage(format!("no such file: {}", p.display())));
    }
    Ok(())
}

fn read_tasks(p: &Path) -> Result<TaskDataset> {
    require_file(p)?;
    read_dataset(p)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let arm = load_arm(&cfg)?;
    match cli.command {
        Command::GenTasks { k, count, mode, out } => {
            let range = parse_k_range(&k)?;
            let ds = generate_dataset(&arm, cfg.seed, count, range, mode, &cfg.taskgen, cfg.worker_count())?;
            write_dataset(&out, &ds)?;
            let back = read_dataset(&out)?;
            if back != ds {
                return Err(Error::Generation(format!("{} did not read back identically", out.display())));
            }
            write_run_record(&out, &cfg, argv)?;
            println!("wrote {} tasks to {}", ds.tasks.len(), out.display());
        }
        Command::GenExpert { tasks, out } => {
            let ds = read_tasks(&tasks)?;
            let written = generate_expert_file(&ds.tasks, &arm, cfg.seed, &cfg.expert, &out, cfg.worker_count())?;
            let records = read_expert_file(&out)?;
            if records.len() != ds.tasks.len() {
                return Err(Error::Generation(format!(
                    "{} holds {} records for {} tasks",
                    out.display(),
                    records.len(),
                    ds.tasks.len()
                )));
            }
            write_run_record(&out, &cfg, argv)?;
            let solved = records.iter().filter(|r| !r.waypoints.is_empty()).count();
            println!("planned {written} tasks ({solved}/{} solved in total) into {}", records.len(), out.display());
        }
        Command::Train { tasks, experts, out, ablation, steps } => {
            if let Some(s) = steps {
                cfg.train.total_env_steps = s;
            }
            let ds = read_tasks(&tasks)?;
            let base = cfg.train_config();
            let train = ablation.configure(&base);
            let needs_expert = train.use_expert || ablation == Ablation::BehaviorCloning;
            let records = match (&experts, needs_expert) {
                (Some(p), _) => {
                    require_file(p)?;
                    read_expert_file(p)?
                }
                (None, true) => {
                    return Err(Error::Usage(
                        "--experts is required unless training the no-expert ablation".into(),
                    ))
                }
                (None, false) => Vec::new(),
            };
            create_dir(&out)?;
            if ablation == Ablation::BehaviorCloning {
                let pairs = expert_pairs(&ds.tasks, &records, &arm, train.env.with_tolerances(0.1, 0.2))?;
                let mut state = multiarm::sac::SacState::new(
                    train.sac.clone(),
                    &mut multiarm::seed::child_rng(cfg.seed, 1),
                )?;
                let bc = multiarm::trainer::BcConfig { seed: cfg.seed, ..cfg.bc };
                let (policy, losses) = behavior_clone(&state.policy, &pairs, &bc)?;
                state.policy = policy;
                let p = out.join("checkpoint.json");
                state.checkpoint().save(&p)?;
                Checkpoint::load(&p)?;
                println!("behavior cloning on {} pairs, final loss {:?}", pairs.len(), losses.last());
            } else {
                let outcome = run_training(&ds.tasks, &records, &arm, &train, Some(&out))?;
                Checkpoint::load(&out.join("checkpoint.json"))?;
                read_metrics(&out.join("metrics.csv"))?;
                println!(
                    "trained {} episodes / {} env steps, final level {}",
                    outcome.metrics.len(),
                    outcome.env_steps,
                    outcome.final_level
                );
            }
            write_run_record(&out, &cfg, argv)?;
        }
        Command::Eval { checkpoint, tasks, out, birrt, no_observe_others } => {
            let ds = read_tasks(&tasks)?;
            let mut env = eval_env_config(cfg.env);
            env.observe_others = !no_observe_others;
            create_dir(&out)?;
            let report = if birrt {
                let planner = multiarm::birrt::PlannerParams { rng_seed: cfg.seed, ..cfg.expert.planner };
                evaluate_birrt(
                    &ds,
                    ds.header.mode,
                    &arm,
                    &planner,
                    cfg.expert.decimation_tolerance,
                    env,
                    cfg.worker_count(),
                )?
            } else {
                let p = checkpoint.expect("clap requires --checkpoint without --birrt");
                require_file(&p)?;
                let c = Checkpoint::load(&p)?;
                evaluate(&c.policy(), &ds, ds.header.mode, &arm, env, cfg.worker_count())?
            };
            let (json, _) = report.write(&out, "report")?;
            let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
            serde_json::from_str::<multiarm::eval::EvalReport>(&text)?;
            write_run_record(&out, &cfg, argv)?;
            println!("success rate {:.3} over {} tasks", report.success_rate, report.tasks.len());
            for b in &report.buckets {
                println!("  k={} {:>10}: {:.3} ({} tasks)", b.k, b.bucket, b.success_rate, b.tasks);
            }
        }
        Command::Bench { checkpoint, tasks, out, repetitions, per_k } => {
            cfg.workers = 1;
            if let Some(r) = repetitions {
                cfg.bench.repetitions = r;
            }
            let ds = read_tasks(&tasks)?;
            let policy = match &checkpoint {
                Some(p) => {
                    require_file(p)?;
                    Some(Checkpoint::load(p)?.policy())
                }
                None => None,
            };
            let mut ks: Vec<usize> = ds.tasks.iter().map(|t| t.k).collect();
            ks.sort_unstable();
            ks.dedup();
            let grouped: Vec<_> = ks
                .iter()
                .map(|&k| (k, ds.tasks.iter().filter(|t| t.k == k).take(per_k).cloned().collect()))
                .collect();
            let rows = bench_runtime(policy.as_ref(), &grouped, &arm, eval_env_config(cfg.env), &cfg.bench)?;
            write_bench_csv(&out, &rows)?;
            write_run_record(&out, &cfg, argv)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Rollout { checkpoint, tasks, task_id, out } => {
            require_file(&checkpoint)?;
            let ds = read_tasks(&tasks)?;
            let task = ds
                .tasks
                .iter()
                .find(|t| t.id == task_id)
                .ok_or_else(|| Error::Usage(format!("no task with id {task_id}")))?;
            let policy = Checkpoint::load(&checkpoint)?.policy();
            let mut env = MultiArmEnv::new(arm.clone(), eval_env_config(cfg.env))?;
            let mut actor = PolicyActor::deterministic(&policy);
            let ep = collect_episode(&mut env, task, &mut actor, true)?;
            if let Some(e) = actor.take_error() {
                return Err(e);
            }
            write_episode_log(&out, &ep.log)?;
            read_episode_log(&out)?;
            write_run_record(&out, &cfg, argv)?;
            println!("episode of {} steps, success {}", ep.steps, ep.success);
        }
        Command::Ablate { entries, tasks, out } => {
            let ds = read_tasks(&tasks)?;
            let entries: Vec<AblationEntry> = entries
                .iter()
                .map(|e| {
                    let (name, path) = e
                        .split_once('=')
                        .ok_or_else(|| Error::Usage(format!("entry '{e}' is not NAME=PATH")))?;
                    Ok(AblationEntry {
                        name: name.to_string(),
                        ablation: name.parse().unwrap_or(Ablation::Ours),
                        checkpoint: Some(PathBuf::from(path)),
                    })
                })
                .collect::<Result<_>>()?;
            let rows = compare_ablations(&entries, &ds, &arm, eval_env_config(cfg.env), cfg.worker_count())?;
            let mut ks: Vec<usize> = ds.tasks.iter().map(|t| t.k).collect();
            ks.sort_unstable();
            ks.dedup();
            let text = ablation_csv(&rows, &ks);
            std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
            parse_ablation_csv(&std::fs::read_to_string(&out).map_err(|e| Error::io(&out, e))?)?;
            write_run_record(&out, &cfg, argv)?;
            print!("{text}");
        }
    }
    Ok(())
}
