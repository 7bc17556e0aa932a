use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use coldboost::harness::{self, default_seeds, Suite};
use coldboost::ScenarioConfig;

#[derive(Parser)]
#[command(name = "coldboost", version, about = "Tiered cold-item boosting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run(ScenarioArgs),
    /// Run an ablation suite over paired seeds.
    Ablate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// rules, levels or bidding.
        #[arg(long)]
        suite: Suite,
        /// Number of seeds, counting up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Recompute the report of a persisted run from its event log.
    Report {
        run_dir: PathBuf,
        /// Where to write metrics.csv and summary.json (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and print it with every default filled in.
    Validate(ScenarioArgs),
}

#[derive(Args, Clone, Default)]
struct ScenarioArgs {
    /// Scenario TOML; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    slots: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    disable_exit: bool,
    #[arg(long)]
    disable_promotion: bool,
    #[arg(long)]
    stage_count: Option<u8>,
    #[arg(long)]
    disable_bidding: bool,
    #[arg(long)]
    disable_speed_factor: bool,
    #[arg(long)]
    disable_user_factor: bool,
    #[arg(long)]
    disable_boosting: bool,
    /// Also write the per-decision bid trace.
    #[arg(long)]
    bid_trace: bool,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(slots) = self.slots {
            cfg.slots = slots;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        if self.stage_count.is_some() {
            cfg.ablation.stage_count = self.stage_count;
        }
        let a = &mut cfg.ablation;
        a.disable_exit |= self.disable_exit;
        a.disable_promotion |= self.disable_promotion;
        a.disable_bidding |= self.disable_bidding;
        a.disable_speed_factor |= self.disable_speed_factor;
        a.disable_user_factor |= self.disable_user_factor;
        a.disable_boosting |= self.disable_boosting;
        cfg.harness.bid_trace |= self.bid_trace;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output_dir(cfg: &ScenarioConfig, fallback: &str) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(args: &ScenarioArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg, &format!("runs/seed-{}", cfg.seed));
    let run = coldboost::run_scenario(&cfg)?;
    harness::write_artifacts(&run, &dir).with_context(|| format!("writing artifacts to {}", dir.display()))?;
    let s = &run.report.summary;
    println!("wrote {}", dir.display());
    println!(
        "cold ctr {:.3}%  cold pv {}  boost pv {}  roi {}  hot items {}",
        s.cold.ctr_percent,
        s.cold.pv,
        s.cold_boost.pv,
        s.roi.map_or("n/a".to_string(), |r| format!("{r:.3}")),
        s.hot_items
    );
    Ok(())
}

fn ablate(args: &ScenarioArgs, suite: Suite, n: usize) -> Result<()> {
    let cfg = args.resolve()?;
    if n == 0 {
        return Err(coldboost::Error::config("--seeds must be at least 1").into());
    }
    let seeds = default_seeds(cfg.seed, n);
    let report = coldboost::run_ablation_suite(&cfg, suite, &seeds)?;
    let dir = output_dir(&cfg, "runs/ablation");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("ablation_{}.json", serde_name(suite)));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("reference arm: {}", report.reference);
    for d in &report.deltas {
        let v = d.mean_relative_percent.map_or("n/a".to_string(), |v| format!("{v:+.2}%"));
        println!("{:<18} {:<18} {v}", d.arm, d.metric);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn serde_name(suite: Suite) -> &'static str {
    match suite {
        Suite::Rules => "rules",
        Suite::Levels => "levels",
        Suite::Bidding => "bidding",
    }
}

fn report(run_dir: &Path, out: Option<&Path>) -> Result<()> {
    let report = harness::report_from_dir(run_dir)?;
    let dir = out.unwrap_or(run_dir);
    harness::write_report_files(&report, dir)?;
    println!("wrote {} rows to {}", report.rows.len(), dir.display());
    Ok(())
}

fn validate(args: &ScenarioArgs) -> Result<()> {
    let cfg = args.resolve()?;
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<coldboost::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Ablate { scenario, suite, seeds } => ablate(scenario, *suite, *seeds),
        Command::Report { run_dir, out } => report(run_dir, out.as_deref()),
        Command::Validate(args) => validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
