use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retstack::cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "retstack", version, about = "Return-stack layout, instrumentation and attack simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print segment bases and the entropy table
    Layout,
    /// Run one attack campaign
    Attack,
    /// Rewrite an assembly listing for a scheme
    Rewrite { input: PathBuf },
    /// Reproduce the resilience matrix
    Matrix,
    /// Measure call depth of a JSON program, or of random call trees
    Depth { program: Option<PathBuf> },
}

#[derive(Args)]
struct Flags {
    /// key=value file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    arch: Option<String>,
    #[arg(long, global = true)]
    scheme: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    scaled_bits: Option<String>,
    #[arg(long, global = true)]
    trials: Option<String>,
    #[arg(long, global = true)]
    threads: Option<String>,
    #[arg(long, global = true)]
    threads_sprayed: Option<String>,
    #[arg(long, global = true)]
    libs: Option<String>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    probe_mode: Option<String>,
    #[arg(long, global = true)]
    budget: Option<String>,
    #[arg(long, global = true)]
    no_pie: bool,
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
}

impl Flags {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let pairs = [
            ("arch", &self.arch),
            ("scheme", &self.scheme),
            ("seed", &self.seed),
            ("scaled-bits", &self.scaled_bits),
            ("trials", &self.trials),
            ("threads", &self.threads),
            ("threads-sprayed", &self.threads_sprayed),
            ("libs", &self.libs),
            ("strategy", &self.strategy),
            ("probe-mode", &self.probe_mode),
            ("budget", &self.budget),
            ("format", &self.format),
            ("out", &self.out),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.no_pie {
            cfg.set("no-pie", "true")?;
        }
        Ok(cfg)
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.flags.config()?;
    let cmd = match &cli.cmd {
        Cmd::Layout => Command::Layout,
        Cmd::Attack => Command::Attack,
        Cmd::Rewrite { input } => Command::Rewrite { input: input.clone() },
        Cmd::Matrix => Command::Matrix,
        Cmd::Depth { program } => Command::Depth { program: program.clone() },
    };
    let output = run(&cmd, &cfg)?;
    let io = |path: &PathBuf, source| CliError::Io { path: path.display().to_string(), source };
    match &cfg.out {
        Some(path) => {
            std::fs::write(path, &output.main).map_err(|e| io(path, e))?;
            if let Some(side) = &output.side {
                print!("{side}");
            }
        }
        None => {
            print!("{}", output.main);
            if let Some(side) = &output.side {
                eprint!("{side}");
            }
        }
    }
    std::io::stdout().flush().map_err(|e| io(&PathBuf::from("<stdout>"), e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
