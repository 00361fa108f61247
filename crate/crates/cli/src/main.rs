//! Command-line front end for the market simulator. Runs single scenarios or
//! adversary sweeps, audits every run against the invariant checkers, and
//! prints the scaling tables. Output is line-delimited UTF-8.
//!
//! Exit codes: 0 clean, 1 invariant violation or failed exchange where one
//! was expected, 2 usage or environment error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sealmarket_core::actors::Paradigm;
use sealmarket_core::contracts::RecordStatus;
use sealmarket_core::harness::checker::{all_passed, run_all};
use sealmarket_core::harness::scenario::{preset, random_adversary, ScenarioConfig, PRESETS};
use sealmarket_core::harness::{run_scenario, RunOutcome};
use sealmarket_core::metrics::{attestation_makespan_ms, Metrics};
use sealmarket_core::tee::MockIas;

#[derive(Parser)]
#[command(
    name = "sealmarket",
    version,
    about = "Deterministic simulator for a sealed-data market with attested execution"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario, or a sweep of random adversaries, and audit it.
    Run(RunArgs),
    /// Print attestation makespans across verification pool sizes.
    BenchAttest(BenchAttestArgs),
    /// Print on-chain call volume per fleet size, both market designs.
    CompareParadigms(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Named scenario preset (see --list).
    #[arg(long, conflicts_with = "config")]
    scenario: Option<String>,
    /// Scenario file (TOML, same shape --emit-config prints).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the full run transcript to this path ("-" for stdout).
    #[arg(long)]
    transcript: Option<String>,
    /// Print run metrics after the audit.
    #[arg(long)]
    metrics: bool,
    /// Instead of one run, do this many: seeds count up from the scenario
    /// seed and each run draws its own random adversary.
    #[arg(long, value_name = "RUNS")]
    sweep: Option<u64>,
    /// Print the effective scenario as TOML and exit without running.
    #[arg(long)]
    emit_config: bool,
    /// List the scenario presets and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct BenchAttestArgs {
    /// Quotes awaiting verification.
    #[arg(long, default_value_t = 160)]
    quotes: u64,
    /// Pool sizes to tabulate.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    workers: Vec<usize>,
    /// Revocation-list fetch latency per quote, milliseconds.
    #[arg(long, default_value_t = 100)]
    revocation_ms: u64,
    /// Report signing latency per quote, milliseconds.
    #[arg(long, default_value_t = 500)]
    report_ms: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Largest owner fleet to measure.
    #[arg(long, default_value_t = 20)]
    max_owners: u32,
    /// Scenario seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::BenchAttest(args) => cmd_bench_attest(args),
        Cmd::CompareParadigms(args) => cmd_compare(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut cfg = match (&args.scenario, &args.config) {
        (Some(name), _) => preset(name).ok_or_else(|| {
            anyhow!("unknown scenario {name:?}; known scenarios: {}", PRESETS.join(", "))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ScenarioConfig::from_toml(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        (None, None) => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn status_counts(out: &RunOutcome) -> (usize, usize, usize) {
    let mut complete = 0;
    let mut canceled = 0;
    let mut open = 0;
    for r in &out.view.records {
        match r.status {
            RecordStatus::Complete => complete += 1,
            RecordStatus::Canceled => canceled += 1,
            _ => open += 1,
        }
    }
    (complete, canceled, open)
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    if args.list {
        for name in PRESETS {
            println!("{name}");
        }
        return Ok(true);
    }
    let cfg = load_config(&args)?;
    if args.emit_config {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    if let Some(runs) = args.sweep {
        return cmd_sweep(cfg, runs);
    }

    let out = run_scenario(cfg);
    let reports = run_all(&out);
    for r in &reports {
        println!("{r}");
    }
    let (complete, canceled, open) = status_counts(&out);
    println!(
        "run: seed={} paradigm={:?} records={} complete={complete} canceled={canceled} \
         open={open} result={} flow_calls={} sim_ms={}",
        out.config.seed,
        out.config.paradigm,
        out.view.records.len(),
        out.result.is_some(),
        out.flow_calls,
        out.view.sim_ms,
    );
    if args.metrics {
        print!("{}", Metrics::from_transcript(&out.transcript).render());
    }
    if let Some(dst) = &args.transcript {
        let text = out.transcript.render();
        if dst == "-" {
            print!("{text}");
        } else {
            fs::write(dst, text).with_context(|| format!("writing {dst}"))?;
        }
    }
    Ok(all_passed(&reports))
}

fn cmd_sweep(base: ScenarioConfig, runs: u64) -> Result<bool> {
    let mut violations = 0u64;
    for i in 0..runs {
        let mut cfg = base.clone();
        cfg.seed = base.seed.wrapping_add(i);
        cfg.adversary = random_adversary(cfg.seed, &cfg);
        let out = run_scenario(cfg);
        let reports = run_all(&out);
        let ok = all_passed(&reports);
        let (complete, canceled, open) = status_counts(&out);
        println!(
            "sweep: seed={} ok={ok} complete={complete} canceled={canceled} open={open}",
            out.config.seed
        );
        if !ok {
            violations += 1;
            for r in reports.iter().filter(|r| !r.passed) {
                println!("  {r}");
            }
        }
    }
    println!("sweep: runs={runs} violations={violations}");
    Ok(violations == 0)
}

fn cmd_bench_attest(args: BenchAttestArgs) -> Result<bool> {
    if args.workers.is_empty() || args.workers.contains(&0) {
        return Err(anyhow!("worker counts must be positive"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let ias = MockIas::new(&mut rng, args.revocation_ms, args.report_ms);
    let per_quote = ias.per_quote_latency_ms();
    println!("bench-attest: quotes={} per_quote_ms={per_quote}", args.quotes);
    let serial = attestation_makespan_ms(args.quotes, 1, per_quote);
    for &w in &args.workers {
        let ms = attestation_makespan_ms(args.quotes, w, per_quote);
        println!(
            "workers={w} makespan_ms={ms} speedup={:.2}",
            serial as f64 / ms as f64
        );
    }
    Ok(true)
}

fn cmd_compare(args: CompareArgs) -> Result<bool> {
    let mut clean = true;
    for owners in 1..=args.max_owners {
        let mut calls = [0u64; 2];
        for (slot, paradigm) in [Paradigm::PerOwner, Paradigm::Brokered].into_iter().enumerate() {
            let cfg = ScenarioConfig {
                seed: args.seed,
                owners,
                paradigm,
                ..ScenarioConfig::default()
            };
            let out = run_scenario(cfg);
            clean &= all_passed(&run_all(&out)) && out.result.is_some();
            calls[slot] = out.flow_calls;
        }
        println!(
            "owners={owners} per_owner_flow_calls={} brokered_flow_calls={}",
            calls[0], calls[1]
        );
    }
    Ok(clean)
}
