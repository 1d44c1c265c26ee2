use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tfa_core::channel::System;
use tfa_core::ec::CurveProfile;
use tfa_core::harness::{
    parse_jsonl, run_all, stores, suite, HarnessError, Matrix, Overrides, Report, Scenario,
};

#[derive(Parser, Debug)]
#[command(
    name = "tfa",
    version,
    about = "Three-factor authentication protocol lab"
)]
struct Cli {
    /// Seed for provisioning, and override for every scenario seed.
    #[arg(long, global = true, env = "TFA_SEED")]
    seed: Option<u64>,
    /// Curve for legacy-scheme scenarios.
    #[arg(long, global = true, env = "TFA_CURVE", value_parser = parse_curve)]
    curve: Option<CurveProfile>,
    /// Password dictionary for guessing scenarios.
    #[arg(long, global = true, env = "TFA_DICT")]
    dict: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register the server and every configured user; write their stores.
    Provision {
        #[arg(long, env = "TFA_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "TFA_STORE")]
        store: PathBuf,
    },
    /// Run scenario files or a suite and write the report.
    Run {
        scenarios: Vec<PathBuf>,
        /// Directory of scenario files, or `paper-attacks`.
        #[arg(long, env = "TFA_SUITE")]
        suite: Option<String>,
        #[arg(long, env = "TFA_OUT", default_value = "tfa-out")]
        out: PathBuf,
        #[arg(long, env = "TFA_JOBS", default_value_t = 1)]
        jobs: usize,
        /// Provisioned stores for proposed-scheme scenarios.
        #[arg(long, env = "TFA_STORE")]
        store: Option<PathBuf>,
    },
    /// Print the feature matrix from a run's machine report.
    Matrix {
        /// Defaults to `<out>/report.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, env = "TFA_OUT", default_value = "tfa-out")]
        out: PathBuf,
        /// Also list the scenarios behind each cell.
        #[arg(long)]
        trace: bool,
    },
}

fn parse_curve(s: &str) -> Result<CurveProfile, String> {
    match s {
        "tiny" => Ok(CurveProfile::Tiny),
        "std256" => Ok(CurveProfile::Std256),
        _ => Err(format!("unknown curve {s:?} (tiny, std256)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("tfa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Provision { config, store } => {
            let text =
                std::fs::read_to_string(&config).map_err(|e| HarnessError::io(&config, e))?;
            let spec = stores::parse_config(&text)?;
            let sys = System::provision(&spec, cli.seed.unwrap_or(0))?;
            for p in stores::write_stores(&sys, &store)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Run {
            scenarios,
            suite: suite_spec,
            out,
            jobs,
            store,
        } => {
            let overrides = Overrides {
                seed: cli.seed,
                curve: cli.curve,
                dict: cli.dict,
                stores: store,
            };
            let mut all = Vec::new();
            if let Some(spec) = &suite_spec {
                all.extend(suite::load_suite(spec)?);
            }
            for p in &scenarios {
                all.push(Scenario::load(p)?);
            }
            if suite_spec.is_none() && scenarios.is_empty() {
                return Err(HarnessError::Config("nothing to run".into()));
            }
            for s in &mut all {
                s.apply(&overrides);
            }
            let report = run_all(&all, jobs)?;
            write_report(&report, &out)?;
            print!("{}", report.table());
            Ok(report.exit_code())
        }
        Command::Matrix { report, out, trace } => {
            let path = report.unwrap_or_else(|| out.join("report.jsonl"));
            let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            let m = Matrix::from_verdicts(&parse_jsonl(&text)?)?;
            print!("{}", if trace { m.render_traced() } else { m.render() });
            Ok(0)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn write_report(report: &Report, out: &Path) -> Result<(), HarnessError> {
    let tdir = out.join("transcripts");
    std::fs::create_dir_all(&tdir).map_err(|e| HarnessError::io(&tdir, e))?;
    let mut table = report.table();
    // A partial suite cannot fill the matrix; the table stands alone then.
    if let Ok(m) = report.matrix() {
        table.push('\n');
        table.push_str(&m.render());
    }
    write(&out.join("report.txt"), &table)?;
    write(&out.join("report.jsonl"), &report.jsonl())?;
    for (run, _) in &report.runs {
        let name = run.verdict.scenario.replace(['/', '\\'], "_");
        write(&tdir.join(format!("{name}.txt")), &run.transcript.to_text())?;
    }
    Ok(())
}
