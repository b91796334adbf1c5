use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trimnet::harness::{self, TrainConfig};
use trimnet::Error;

#[derive(Parser)]
#[command(name = "trimnet", version, about = "Mini-batch trimming training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its per-epoch metrics CSV.
    Train(RunArgs),
    /// Train every seed with trimming off and on and compare final test errors.
    Compare(RunArgs),
    /// Check autodiff gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in property checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output file (train) or directory (compare). Defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's first seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &RunArgs) -> Result<TrainConfig, Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Parse(format!("{}: {e}", args.config.display())))?;
    let mut cfg = harness::parse_config(&text)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    cfg.dataset.resolve_paths(base);
    if let Some(seed) = args.seed {
        cfg.seeds[0] = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn train(args: &RunArgs) -> Result<(), Error> {
    let cfg = load(args)?;
    let data = harness::prepare_data(&cfg)?;
    let seed = cfg.seeds[0];
    let outcome = harness::run_trial(&cfg, &data, seed, cfg.trim.enabled)?;
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&cfg.output, harness::emit_csv(&outcome.rows)?)?;
    println!(
        "seed {seed}: final test error {:.2}% ({} epochs) -> {}",
        100.0 * outcome.final_test_error(),
        outcome.rows.len(),
        cfg.output.display()
    );
    Ok(())
}

fn compare(args: &RunArgs) -> Result<(), Error> {
    let cfg = load(args)?;
    let result = harness::run_experiment(&cfg)?;
    result.write(&cfg.output)?;
    print!("{}", result.cell.table_line(&result.label));
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool, Error> {
    let mut ok = true;
    for (name, report) in harness::gradcheck_suite(seed)? {
        for p in &report.params {
            println!(
                "{name} param {} {:?}: checked {}, skipped {}, max rel error {:.3e}",
                p.param_index, p.shape, p.checked, p.skipped, p.max_rel_error
            );
        }
        let passed = report.passed();
        println!("{name}: {}", if passed { "PASS" } else { "FAIL" });
        ok &= passed;
    }
    Ok(ok)
}

fn selftest(seed: u64) -> Result<bool, Error> {
    let mut ok = true;
    for c in harness::selftest(seed)? {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => train(args).map(|()| true),
        Command::Compare(args) => compare(args).map(|()| true),
        Command::Gradcheck { seed } => gradcheck(*seed),
        Command::Selftest { seed } => selftest(*seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
