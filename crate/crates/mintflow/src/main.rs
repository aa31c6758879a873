use clap::{Args, Parser, Subcommand};
use mintflow::cli::{self, Overrides, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mintflow", version, about = "Invertible flows from masked triangular convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed (train + data).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the solver step size.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the solver iteration cap.
    #[arg(long)]
    iters: Option<usize>,
}

impl Common {
    fn load(&self) -> mintflow::Result<RunConfig> {
        let ov = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            alpha: self.alpha,
            iters: self.iters,
        };
        RunConfig::load(self.config.as_deref(), &ov)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model by maximum likelihood.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Bits per dimension of a checkpoint on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw samples from a checkpoint by fixed-point inversion.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Step-size grid search over reconstruction error traces.
    InvertAudit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Add a fine 0.05-spaced pass around the best coarse step.
        #[arg(long)]
        refine: bool,
    },
    /// Analytic-vs-finite-difference Jacobian diagonal check.
    JacobianAudit {
        #[command(flatten)]
        common: Common,
    },
    /// Latent-space interpolation grid between four dataset images.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Four dataset image indices, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3])]
        indices: Vec<usize>,
    },
}

fn run() -> mintflow::Result<serde_json::Value> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common } => cli::cmd_train(&common.load()?),
        Command::Eval { common, checkpoint } => cli::cmd_eval(&common.load()?, &checkpoint),
        Command::Sample { common, checkpoint, n } => {
            cli::cmd_sample(&common.load()?, &checkpoint, n)
        }
        Command::InvertAudit { common, checkpoint, refine } => {
            cli::cmd_invert_audit(&common.load()?, &checkpoint, refine)
        }
        Command::JacobianAudit { common } => cli::cmd_jacobian_audit(&common.load()?),
        Command::Interpolate { common, checkpoint, indices } => {
            let idx: [usize; 4] = indices
                .try_into()
                .map_err(|_| mintflow::Error::Config("interpolate needs 4 indices".into()))?;
            cli::cmd_interpolate(&common.load()?, &checkpoint, idx)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
