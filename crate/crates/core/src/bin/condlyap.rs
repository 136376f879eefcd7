use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use condlyap::harness::{
    self, cmd_fk, cmd_ftle, cmd_lyapunov, cmd_oseledets, cmd_qprocess, cmd_qsd, criteria, describe,
    Context, ExperimentConfig, Suite,
};
use condlyap::lyapunov::Method;
use condlyap::{Error, Result};

#[derive(Parser)]
#[command(name = "condlyap", version, about = "Conditioned Lyapunov spectra of absorbed random dynamical systems")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed root, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Qr,
    Wedge,
    Fk,
    Ftle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fast,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Ulam matrix, survival rate, quasi-stationary and quasi-ergodic laws.
    Qsd,
    /// Q-kernel checks, Q-process leakage and occupation.
    Qprocess,
    /// Lyapunov spectrum by one method.
    Lyapunov {
        #[arg(long, value_enum, default_value = "qr")]
        method: MethodArg,
    },
    /// Conditional finite-time exponents and their exceedance.
    Ftle,
    /// FK average against QR, with a comparison file.
    Fk,
    /// Multiplicities and flag of the Oseledets structure.
    Oseledets,
    /// Runs the acceptance criteria.
    Validate {
        #[arg(long, value_enum, default_value = "fast")]
        suite: SuiteArg,
        /// Run only these criteria (e.g. A1,A7).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Prints every default as a loadable configuration.
    Describe,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn validate(cfg: &ExperimentConfig, suite: SuiteArg, only: &[String]) -> Result<bool> {
    let ctx = Context::with_cache(cfg.output.join("validate"));
    let suite = match suite {
        SuiteArg::Fast => Suite::Fast,
        SuiteArg::Full => Suite::Full,
    };
    let results = if only.is_empty() {
        harness::run_suite(suite, &ctx, |r| println!("{r}"))?
    } else {
        let mut out = Vec::new();
        for id in only {
            let c = criteria::criterion(id)
                .ok_or_else(|| Error::config("--only", format!("unknown criterion {id}")))?;
            let r = criteria::run_criterion(c, &ctx)?;
            println!("{r}");
            out.push(r);
        }
        out
    };
    let passed = results.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} criteria passed", results.len());
    let mut m = harness::RunManifest::new("validate", cfg);
    m.write_json("validation.json", &results)?;
    m.finish()?;
    Ok(passed == results.len())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Command::Describe = cli.command {
        print!("{}", describe());
        return Ok(true);
    }
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    match &cli.command {
        Command::Qsd => print_json(&cmd_qsd(&cfg)?.0)?,
        Command::Qprocess => print_json(&cmd_qprocess(&cfg)?.0)?,
        Command::Lyapunov { method } => {
            let method = match method {
                MethodArg::Qr => Method::Qr,
                MethodArg::Wedge => Method::Wedge,
                MethodArg::Fk => Method::Fk,
                MethodArg::Ftle => Method::Ftle,
            };
            if let (Some(report), _) = cmd_lyapunov(&cfg, method)? {
                print_json(&report)?;
            }
        }
        Command::Ftle => print_json(&cmd_ftle(&cfg)?.0)?,
        Command::Fk => {
            let cmp = cmd_fk(&cfg)?.0;
            print_json(&cmp)?;
            if !cmp.agree {
                return Ok(false);
            }
        }
        Command::Oseledets => print_json(&cmd_oseledets(&cfg)?.0)?,
        Command::Validate { suite, only } => return validate(&cfg, *suite, only),
        Command::Describe => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(harness::EXIT_VALIDATION as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
