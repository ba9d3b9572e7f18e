use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fours::cli::{self, Command, Context, Overrides};

#[derive(Parser)]
#[command(name = "fours", version, about = "Item sequencing and disease staging for ordinal rating scales")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; default: all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a configuration key, e.g. `--set structure.replicates=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Bootstrap EFA/CFA and monotonicity: the subdimension structure.
    Structure,
    /// Joint latent process model per subdimension: item impairment sequence.
    Sequence,
    /// Sum-score joint model with clinical stages.
    Stage,
    /// Project stages onto the latent scale and rank items by information.
    Select,
    /// Simulate a cohort from the `[simulate]` scenario.
    Simulate,
    /// Trajectory, spider and summary tables from earlier artifacts.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::Structure => Command::Structure,
            Cmd::Sequence => Command::Sequence,
            Cmd::Stage => Command::Stage,
            Cmd::Select => Command::Select,
            Cmd::Simulate => Command::Simulate,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let ov = Overrides { seed: args.seed, out: args.out, threads: args.threads, set: args.set };
    let code = match execute(args.command.into(), args.config.as_deref(), &ov) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn execute(cmd: Command, config: Option<&std::path::Path>, ov: &Overrides) -> fours::Result<i32> {
    let ctx = Context::load(config, ov)?;
    if let Some(n) = ctx.config.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let outcome = cli::run(cmd, &ctx)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    for a in &outcome.artifacts {
        println!("{}", a.display());
    }
    if !outcome.converged {
        eprintln!("warning: at least one fit did not converge; artifacts are flagged");
    }
    Ok(outcome.exit_code())
}
