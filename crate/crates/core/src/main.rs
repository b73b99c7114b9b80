use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cosched::baselines::PolicyKind;
use cosched::config::ExperimentConfig;
use cosched::experiment::{run_dir, run_policy, Workload};
use cosched::report::{compare, find_runs, read_summary, write_comparison, write_report, write_run};
use cosched::workload::{generate_workload, save_trace, trace_hash};

#[derive(Parser)]
#[command(name = "cosched", version, about = "Co-scheduling simulator for agentic LLM sessions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; falls back to the config's output_dir, then ./out.
    #[arg(long, env = "COSCHED_OUT")]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic trace of each seed.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run one policy (or the configured sweep) and audit its logs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Policy name with default parameters.
        #[arg(long)]
        policy: Option<String>,
        /// Disable a mechanism of the full policy (repeatable).
        #[arg(long, value_name = "coordinator|coscheduler|retention|control-plane")]
        ablate: Vec<String>,
    },
    /// Ratio table of each run against the best baseline.
    Compare {
        /// Run directories or roots holding them.
        runs: Vec<PathBuf>,
        /// Run this config's sweep first and compare its runs.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "COSCHED_OUT")]
        out: Option<PathBuf>,
    },
    /// Merge per-run tables into one long table per kind.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, env = "COSCHED_OUT")]
        out: Option<PathBuf>,
    },
}

fn out_root(flag: &Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn generate(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    if cfg.regime.is_none() {
        bail!("invalid config: `regime`: missing section");
    }
    let dir = out_root(&common.out, Some(&cfg)).join(&cfg.name);
    std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    for seed in cfg.run_seeds() {
        let regime = cfg.regime_for_seed(seed).expect("checked above");
        let traces = generate_workload(&regime)?;
        let header = serde_json::json!({
            "config_hash": cfg.config_hash(),
            "seed": seed,
            "trace_hash": trace_hash(&traces),
            "sessions": traces.len(),
        });
        let path = dir.join(format!("trace-seed-{seed}.jsonl"));
        save_trace(&path, &traces, Some(&header))?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Runs every config on every seed; returns run directories and whether all
/// audits passed.
fn execute(configs: &[ExperimentConfig], root: &Path) -> anyhow::Result<(Vec<PathBuf>, bool)> {
    let mut dirs = Vec::new();
    let mut ok = true;
    for cfg in configs {
        for seed in cfg.run_seeds() {
            let workload = Workload::prepare(cfg, seed)?;
            let run = run_policy(cfg, &workload)?;
            let dir = run_dir(root, &run.summary);
            write_run(&dir, &run)?;
            let s = &run.summary;
            match run.first_failure() {
                None => println!(
                    "{:<28} seed {:<4} mean {:>9.2}s  p95 {:>9.2}s  goodput {:.4}/s  audits ok",
                    s.label, s.seed, s.latency.mean, s.latency.p95, s.goodput.aggregate
                ),
                Some(f) => {
                    ok = false;
                    eprintln!("{} seed {}: audit `{}` failed: {}", s.label, s.seed, f.name, f.detail);
                }
            }
            dirs.push(dir);
        }
    }
    Ok((dirs, ok))
}

fn run(common: &Common, policy: &Option<String>, ablate: &[String]) -> anyhow::Result<bool> {
    let mut cfg = load(common)?;
    if let Some(p) = policy {
        cfg.policy = PolicyKind::from_name(p)?;
        cfg.sweep = None;
    }
    for a in ablate {
        cfg.ablation.disable(a)?;
        cfg.sweep = None;
    }
    cfg.validate()?;
    let root = out_root(&common.out, Some(&cfg));
    let (_, ok) = execute(&cfg.expand()?, &root)?;
    Ok(ok)
}

fn compare_cmd(runs: &[PathBuf], config: &Option<PathBuf>, out: &Option<PathBuf>) -> anyhow::Result<bool> {
    let mut dirs = Vec::new();
    let mut ok = true;
    let mut cfg_root = None;
    if let Some(path) = config {
        let cfg = ExperimentConfig::load(path)?;
        let root = out_root(out, Some(&cfg));
        let (d, passed) = execute(&cfg.expand()?, &root)?;
        dirs.extend(d);
        ok = passed;
        cfg_root = Some(root.join(&cfg.name));
    }
    for r in runs {
        dirs.extend(find_runs(r)?);
    }
    if dirs.is_empty() {
        bail!("nothing to compare: pass run directories or --config");
    }
    let summaries = dirs.iter().map(|d| read_summary(d)).collect::<cosched::Result<Vec<_>>>()?;
    let rows = compare(&summaries)?;
    let dest = out
        .clone()
        .or(cfg_root)
        .unwrap_or_else(|| runs.first().cloned().unwrap_or_else(|| PathBuf::from("out")));
    std::fs::create_dir_all(&dest).with_context(|| dest.display().to_string())?;
    let path = dest.join("comparison.csv");
    write_comparison(&path, &summaries, &rows)?;
    for r in &rows {
        println!(
            "{:<12} rate {:<6} seed {:<4} {:<28} speedup {:>6.2}x (vs {})  goodput {:>6.2}x (vs {})",
            r.experiment,
            r.arrival_rate.map(|x| x.to_string()).unwrap_or_else(|| "-".into()),
            r.seed,
            r.policy,
            r.latency_speedup,
            r.best_latency_baseline,
            r.goodput_ratio,
            r.best_goodput_baseline
        );
    }
    println!("{}", path.display());
    Ok(ok)
}

fn report(runs: &[PathBuf], out: &Option<PathBuf>) -> anyhow::Result<()> {
    let mut dirs = Vec::new();
    for r in runs {
        dirs.extend(find_runs(r)?);
    }
    if dirs.is_empty() {
        bail!("no run directories found");
    }
    let dest = out_root(out, None).join("report");
    for p in write_report(&dest, &dirs)? {
        println!("{}", p.display());
    }
    let summaries = dirs.iter().map(|d| read_summary(d)).collect::<cosched::Result<Vec<_>>>()?;
    if summaries.len() >= 2 {
        match compare(&summaries) {
            Ok(rows) => {
                let path = dest.join("comparison.csv");
                write_comparison(&path, &summaries, &rows)?;
                println!("{}", path.display());
            }
            Err(e) => eprintln!("skipping comparison: {e}"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Generate { common } => generate(common).map(|_| true),
        Cmd::Run { common, policy, ablate } => run(common, policy, ablate),
        Cmd::Compare { runs, config, out } => compare_cmd(runs, config, out),
        Cmd::Report { runs, out } => report(runs, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
