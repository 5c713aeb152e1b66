use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hcp::cli::{self, EvalInputs, RunConfig};
use hcp::hybrid::Method;
use hcp::Result;

#[derive(Parser)]
#[command(name = "hcp", version, about = "Hybrid stochastic-prefix and one-jump diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise-prediction teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill the one-jump student from a trained teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Select the switch step from teacher rollouts.
    SweepSwitch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Compare samplers on the configured task.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: Option<PathBuf>,
        /// Use the prefix length from a switch summary for `hcp`.
        #[arg(long)]
        switch: Option<PathBuf>,
        /// Comma-separated subset of ddpm_full, ddim, hcp, hcp_early.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    Ok(RunConfig::load(&common.config)?.with_seed(common.seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { common } => {
            let cfg = load(&common)?;
            let out = cli::cmd_train_teacher(&cfg, &common.out)?;
            println!("teacher: {} (final loss {:.6})", out.checkpoint.display(), out.final_loss);
        }
        Command::Distill { common, teacher } => {
            let cfg = load(&common)?;
            let out = cli::cmd_distill(&cfg, &teacher, &common.out)?;
            println!("student: {} (final loss {:.6})", out.checkpoint.display(), out.final_loss);
        }
        Command::SweepSwitch { common, teacher } => {
            let cfg = load(&common)?;
            let s = cli::cmd_sweep_switch(&cfg, &teacher, &common.out)?;
            match (s.switch_step, s.prefix_len) {
                (Some(k), Some(n)) => println!("switch step k={k} (prefix length {n} of {})", s.num_steps),
                _ => println!("switch step: none found"),
            }
        }
        Command::Evaluate {
            common,
            teacher,
            student,
            switch,
            methods,
        } => {
            let cfg = load(&common)?;
            let methods = methods
                .map(|ms| ms.iter().map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>>>())
                .transpose()?;
            let inputs = EvalInputs {
                teacher: Some(&teacher),
                student: student.as_deref(),
                switch: switch.as_deref(),
                methods,
            };
            let report = cli::cmd_evaluate(&cfg, &inputs, &common.out)?;
            for m in &report.methods {
                println!(
                    "{:<10} success {:.3}  modes {}  entropy {:.3}  nfe {:.1}",
                    m.method, m.success_rate, m.modes, m.entropy, m.mean_nfe
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
