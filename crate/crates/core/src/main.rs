use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use tclsim::agents::{AgentKind, DqnTrainer, Policy, PpoConfig, PpoTrainer};
use tclsim::bench::config::build_controller;
use tclsim::bench::io::{parse_seeds, write_csv, JsonlWriter, SCHEMA_VERSION};
use tclsim::bench::{
    evaluate, robustness_suite, rollout, scaling_study, timing_report, ExperimentConfig, MetricsReport, SizedFactory,
    TrajectoryRecord,
};
use tclsim::control::Controller;
use tclsim::env::{Env, EnvConfig};
use tclsim::signal::{bang_bang_average_power, build_base_table, BaseSignalTable, GridSpec};
use tclsim::{Error, Result};

#[derive(Parser)]
#[command(name = "tclsim", version, about = "Demand-response simulator for aggregated air conditioners")]
struct Cli {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed list overriding the config, e.g. `3` or `1..10`.
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for independent runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the base-demand lookup table.
    GenTable {
        /// Output file (default: <out-dir>/base_table.bin).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use the coarse grid.
        #[arg(long)]
        small: bool,
    },
    /// Roll out the configured controller on the first seed and export the trajectory.
    Simulate,
    /// Train a learning agent.
    Train {
        /// ppo_he, ppo_nc, tarmac or dqn (default: the config's agent.ppo.kind).
        #[arg(long)]
        agent: Option<String>,
        /// Training episodes (PPO epochs or DQN episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate the configured controller over the seed list.
    Evaluate,
    /// Evaluate across house counts and run the pooled-group ratio test.
    Scaling,
    /// Evaluate under communication faults, heterogeneity and environment shifts.
    Robustness,
    /// Measure action-selection time.
    Timing,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::IncompatibleCheckpoint(_) => 2,
        Error::DivergenceDetected(_) | Error::NonFiniteResult(_) => 3,
        _ => 1,
    }
}

struct Context {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    out_dir: PathBuf,
    jobs: usize,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let seeds = match &cli.seed {
            Some(s) => parse_seeds(s)?,
            None => cfg.seeds()?,
        };
        std::fs::create_dir_all(&cli.out_dir)?;
        Ok(Self {
            cfg,
            seeds,
            out_dir: cli.out_dir.clone(),
            jobs: cli.jobs,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Environment config, adopting the checkpoint's observation scaling when a policy is deployed.
    fn env_config(&self, policy: Option<&Policy>) -> EnvConfig {
        let mut env = self.cfg.env_config();
        if let Some(p) = policy {
            env.normalization = p.normalization;
        }
        env
    }

    fn table(&self, env: &EnvConfig) -> Result<Arc<BaseSignalTable>> {
        Ok(Env::new(env.clone())?.table().clone())
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::GenTable { output, small } = &cli.command {
        std::fs::create_dir_all(&cli.out_dir)?;
        let spec = if *small { GridSpec::small() } else { GridSpec::default_grid() };
        let table = build_base_table(&spec, bang_bang_average_power)?;
        let path = output.clone().unwrap_or_else(|| cli.out_dir.join("base_table.bin"));
        table.save(&path)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::GenTable { .. } => unreachable!("handled above"),
        Command::Simulate => simulate(&ctx),
        Command::Train { agent, episodes } => train(&ctx, agent.as_deref(), *episodes),
        Command::Evaluate => evaluate_cmd(&ctx),
        Command::Scaling => scaling_cmd(&ctx),
        Command::Robustness => robustness_cmd(&ctx),
        Command::Timing => timing_cmd(&ctx),
    }
}

#[derive(Serialize)]
struct MetricsRow {
    controller: String,
    houses: usize,
    seed: String,
    signal_rmse: f64,
    temperature_rmse: f64,
    max_temperature_rmse: f64,
}

fn report_rows(r: &MetricsReport) -> Vec<MetricsRow> {
    let row = |seed: String, m: &tclsim::bench::Metrics| MetricsRow {
        controller: r.controller.clone(),
        houses: r.houses,
        seed,
        signal_rmse: m.signal_rmse,
        temperature_rmse: m.temperature_rmse,
        max_temperature_rmse: m.max_temperature_rmse,
    };
    let mut rows: Vec<MetricsRow> = r.per_seed.iter().map(|s| row(s.seed.to_string(), &s.metrics)).collect();
    rows.push(row("mean".into(), &r.mean));
    rows.push(row("std".into(), &r.std));
    rows
}

fn simulate(ctx: &Context) -> Result<()> {
    let policy = ctx.cfg.policy()?;
    let env_cfg = ctx.env_config(policy.as_deref());
    let seed = ctx.seeds[0];
    let mut env = Env::new(EnvConfig { seed, ..env_cfg })?;
    let eval = ctx.cfg.eval_config(1);
    if eval.random_start {
        env.reset_at(seed, tclsim::bench::start_time_for_seed(seed, env.config().dt))?;
    } else {
        env.reset_with_seed(seed)?;
    }
    let mut ctrl = build_controller(&ctx.cfg.agent.controller, policy.as_deref(), &ctx.cfg.agent.mpc)?;
    let stride = ctx.cfg.experiment.trajectory_stride;
    let mut traj = JsonlWriter::create(&ctx.out("trajectory.jsonl"), "trajectory")?;
    let mut k = 0usize;
    let mut sink = |r: &TrajectoryRecord| {
        if k % stride == 0 {
            traj.write(r)?;
        }
        k += 1;
        Ok(())
    };
    let result = rollout(&mut env, ctrl.as_mut(), eval.horizon, eval.warmup, Some(&mut sink))?;
    traj.into_inner()?;
    let report = MetricsReport::from_seeds(
        ctrl.name(),
        env.n(),
        vec![tclsim::bench::SeedMetrics {
            seed,
            metrics: result.metrics,
        }],
    );
    write_csv(&ctx.out("simulate.csv"), &report_rows(&report)[..1])?;
    println!(
        "{}: signal {:.1} W, temperature {:.3} C, max temperature {:.3} C",
        report.controller, result.metrics.signal_rmse, result.metrics.temperature_rmse, result.metrics.max_temperature_rmse
    );
    Ok(())
}

fn train(ctx: &Context, agent: Option<&str>, episodes: Option<usize>) -> Result<()> {
    let kind = match agent {
        Some(a) => AgentKind::parse(a)?,
        None => ctx.cfg.agent.ppo.kind,
    };
    let env_cfg = EnvConfig {
        seed: ctx.seeds[0],
        ..ctx.cfg.env_config()
    };
    let log_path = ctx.out(&format!("{}_train.jsonl", kind.name()));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    {
        use std::io::Write;
        writeln!(log, "{}", serde_json::json!({ "schema_version": SCHEMA_VERSION, "kind": "training_log" }))?;
    }
    let (policy, meta) = if kind == AgentKind::Dqn {
        let mut cfg = ctx.cfg.agent.dqn.clone();
        cfg.seed = ctx.seeds[0];
        if let Some(e) = episodes {
            cfg.episodes = e;
        }
        let mut t = DqnTrainer::new(env_cfg, cfg.clone())?;
        let logs = t.train(Some(&mut log))?;
        (t.policy(), serde_json::json!({ "config": cfg, "episodes": logs.len() }))
    } else {
        let mut cfg = PpoConfig {
            kind,
            ..ctx.cfg.agent.ppo.clone()
        };
        if kind == AgentKind::Tarmac && ctx.cfg.agent.ppo == PpoConfig::default() {
            cfg = PpoConfig::for_kind(kind);
        }
        cfg.seed = ctx.seeds[0];
        if let Some(e) = episodes {
            cfg.epochs = e;
        }
        let mut t = PpoTrainer::new(env_cfg, cfg.clone())?;
        let logs = t.train(Some(&mut log))?;
        let policy = if cfg.keep_best { t.best_policy() } else { t.policy() };
        (policy, serde_json::json!({ "config": cfg, "epochs": logs.len() }))
    };
    {
        use std::io::Write;
        log.flush()?;
    }
    let path = ctx.out(&format!("{}.ckpt", kind.name()));
    policy.to_checkpoint()?.save(&path, Some(&meta))?;
    println!("wrote {} and {}", path.display(), log_path.display());
    Ok(())
}

fn evaluate_cmd(ctx: &Context) -> Result<()> {
    let policy = ctx.cfg.policy()?;
    let env_cfg = ctx.env_config(policy.as_deref());
    let table = ctx.table(&env_cfg)?;
    let name = ctx.cfg.agent.controller.clone();
    let mpc = ctx.cfg.agent.mpc;
    let p = policy.clone();
    let factory = move || build_controller(&name, p.as_deref(), &mpc);
    let report = evaluate(&factory, &env_cfg, Some(table), &ctx.seeds, &ctx.cfg.eval_config(ctx.jobs))?;
    write_csv(&ctx.out("evaluate.csv"), &report_rows(&report))?;
    println!(
        "{} N={}: signal {:.1} ± {:.1} W, temperature {:.3} C, max temperature {:.3} C",
        report.controller, report.houses, report.mean.signal_rmse, report.std.signal_rmse, report.mean.temperature_rmse,
        report.mean.max_temperature_rmse
    );
    Ok(())
}

fn sized_factory(ctx: &Context, name: String, policy: Option<Arc<Policy>>) -> impl Fn(usize) -> Result<Box<dyn Controller>> + Sync {
    let mpc = ctx.cfg.agent.mpc;
    move |_n: usize| build_controller(&name, policy.as_deref(), &mpc)
}

fn scaling_cmd(ctx: &Context) -> Result<()> {
    let policy = ctx.cfg.policy()?;
    let env_cfg = ctx.env_config(policy.as_deref());
    let table = ctx.table(&env_cfg)?;
    let factory = sized_factory(ctx, ctx.cfg.agent.controller.clone(), policy);
    let f: &SizedFactory<'_> = &factory;
    let report = scaling_study(
        f,
        &env_cfg,
        Some(table),
        &ctx.cfg.experiment.sizes,
        &ctx.seeds,
        &ctx.cfg.experiment.group_counts,
        &ctx.cfg.eval_config(ctx.jobs),
    )?;
    write_csv(&ctx.out("scaling.csv"), &report.rows)?;
    write_csv(&ctx.out("scaling_groups.csv"), &report.groups)?;
    for r in &report.rows {
        println!("N={}: signal {:.1} W, temperature {:.3} C", r.houses, r.signal_rmse, r.temperature_rmse);
    }
    Ok(())
}

fn robustness_cmd(ctx: &Context) -> Result<()> {
    let policy = ctx.cfg.policy()?;
    let env_cfg = ctx.env_config(policy.as_deref());
    let table = ctx.table(&env_cfg)?;
    let name = ctx.cfg.agent.controller.clone();
    let mpc = ctx.cfg.agent.mpc;
    let p = policy.clone();
    let factory = move || build_controller(&name, p.as_deref(), &mpc);
    let rows = robustness_suite(
        &factory,
        &env_cfg,
        Some(table),
        &ctx.cfg.experiment.robustness,
        &ctx.seeds,
        &ctx.cfg.eval_config(ctx.jobs),
    )?;
    write_csv(&ctx.out("robustness.csv"), &rows)?;
    for r in &rows {
        println!("{:<24} signal {:>8.1} W (x{:.2}), temperature {:.3} C", r.disturbance, r.signal_rmse, r.signal_ratio, r.temperature_rmse);
    }
    Ok(())
}

fn timing_cmd(ctx: &Context) -> Result<()> {
    let policy = ctx.cfg.policy()?;
    let env_cfg = ctx.env_config(policy.as_deref());
    let table = ctx.table(&env_cfg)?;
    let factories: Vec<(String, Box<SizedFactory<'_>>)> = ctx
        .cfg
        .experiment
        .timing_controllers
        .iter()
        .map(|name| (name.clone(), Box::new(sized_factory(ctx, name.clone(), policy.clone())) as Box<SizedFactory<'_>>))
        .collect();
    let refs: Vec<(&str, &SizedFactory<'_>)> = factories.iter().map(|(n, f)| (n.as_str(), f.as_ref())).collect();
    let rows = timing_report(&refs, &env_cfg, Some(table), &ctx.cfg.experiment.timing_sizes, ctx.cfg.experiment.timing_steps)?;
    write_csv(&ctx.out("timing.csv"), &rows)?;
    for r in &rows {
        println!("{:<8} N={:<5} {:.3e} s per decision", r.controller, r.houses, r.selection_seconds);
    }
    Ok(())
}
