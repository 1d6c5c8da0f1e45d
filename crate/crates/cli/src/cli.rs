//! Command-line surface: argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use denseshift::convert::ProbeInputs;
use denseshift::reparam::{LatentInit, LOW_VARIANCE_SIGMA};

use crate::commands::{self, bench::BenchOptions, convert::ConvertOptions, eval::EvalOptions, json_line};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "denseshift", version, about = "Train, convert, evaluate and benchmark zero-free power-of-two weight networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces `output_dir` from the configuration.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Float,
    Packed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProbeArg {
    Real,
    Integer,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum InitArg {
    Kaiming,
    LowVariance,
}

impl InitArg {
    fn init(self) -> LatentInit {
        match self {
            InitArg::Kaiming => LatentInit::Kaiming,
            InitArg::LowVariance => LatentInit::LowVariance { sigma: LOW_VARIANCE_SIGMA },
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write model, metrics and summary to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the resolved configuration (all defaults explicit) and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Accuracy and confusion matrix of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset root; defaults to the one recorded in the model.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "float")]
        kernel: KernelArg,
        /// Write the confusion matrix as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Latency of the Shift and DenseShift MAC kernels on identical data (one JSON line).
    Bench {
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 4096)]
        length: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Share of zero weights in the Shift blob; defaults to 1/(2^bits − 1).
        #[arg(long)]
        zero_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rewrite a shift network into an equivalent zero-free DenseShift network.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Random inputs used by the equivalence check.
        #[arg(long, default_value_t = 100)]
        n_inputs: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, value_enum, default_value = "real")]
        probe: ProbeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn a run's metrics log into cosine.csv, trace.csv and loss.csv.
    ExportTraces {
        #[arg(long)]
        run_dir: PathBuf,
        /// Directory for the CSVs; defaults to the run directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train once per initialization × epoch budget and tabulate accuracies.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["kaiming", "low-variance"])]
        inits: Vec<InitArg>,
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<usize>,
    },
    /// Pretrain on some classes, attach a fresh head, finetune on the others.
    Transfer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values = ["0", "1", "2", "3", "4"])]
        pretrain_classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["5", "6", "7", "8", "9"])]
        finetune_classes: Vec<usize>,
        /// Finetuning epochs; defaults to the pretraining epochs.
        #[arg(long)]
        finetune_epochs: Option<usize>,
        /// Finetuning learning rate; defaults to the pretraining one.
        #[arg(long)]
        finetune_lr: Option<f64>,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["low-variance", "kaiming"])]
        head_inits: Vec<InitArg>,
    },
}

/// Runs one command, returning what it prints on success.
pub fn dispatch(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Train { config, print_config } => {
            let cfg = config.load()?;
            if print_config {
                return cfg.to_toml();
            }
            let out = run::run(&cfg)?;
            Ok(out.summary.line())
        }
        Command::Eval {
            model,
            data_dir,
            split,
            kernel,
            confusion,
        } => {
            let opts = EvalOptions {
                model,
                data: None,
                data_dir,
                split: match split {
                    SplitArg::Test => commands::eval::Split::Test,
                    SplitArg::Train => commands::eval::Split::Train,
                },
                kernel: match kernel {
                    KernelArg::Float => commands::eval::KernelChoice::Float,
                    KernelArg::Packed => commands::eval::KernelChoice::Packed,
                },
                confusion,
            };
            let r = commands::eval::run(&opts)?;
            Ok(format!("samples={} kernel={:?} accuracy={:.4}", r.samples, r.kernel, r.accuracy).to_lowercase())
        }
        Command::Bench {
            bits,
            length,
            trials,
            zero_fraction,
            seed,
        } => json_line(&commands::bench::run(&BenchOptions {
            bits,
            length,
            trials,
            zero_fraction,
            seed,
        })?),
        Command::Convert {
            input,
            output,
            n_inputs,
            tol,
            probe,
            seed,
        } => json_line(&commands::convert::run(&ConvertOptions {
            input,
            output,
            n_inputs,
            tol,
            probe: match probe {
                ProbeArg::Real => ProbeInputs::Real,
                ProbeArg::Integer => ProbeInputs::Integer,
            },
            seed,
        })?),
        Command::ExportTraces { run_dir, out_dir } => json_line(&commands::export::run(&run_dir, out_dir.as_deref())?),
        Command::Sweep { config, inits, epochs } => {
            let cfg = config.load()?;
            let inits: Vec<LatentInit> = inits.into_iter().map(InitArg::init).collect();
            let rows = commands::sweep::run(&cfg, &inits, &epochs)?;
            Ok(rows
                .iter()
                .map(|r| format!("init={} epochs={} test_accuracy={:.4}", r.init, r.epochs, r.test_accuracy))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Transfer {
            config,
            pretrain_classes,
            finetune_classes,
            finetune_epochs,
            finetune_lr,
            head_inits,
        } => {
            let cfg = config.load()?;
            let mut finetune = cfg.train.clone();
            if let Some(e) = finetune_epochs {
                finetune.epochs = e;
            }
            if let Some(lr) = finetune_lr {
                finetune.base_lr = lr;
            }
            finetune.validate().map_err(CliError::from)?;
            let opts = commands::transfer::TransferOptions {
                pretrain_classes,
                finetune_classes,
                finetune,
                head_inits: head_inits.into_iter().map(InitArg::init).collect(),
            };
            json_line(&commands::transfer::run(&cfg, &opts)?)
        }
    }
}
