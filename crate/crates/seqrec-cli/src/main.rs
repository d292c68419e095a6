//! `seqrec`: one entry point wiring generation, training, prediction, and
//! the evaluation protocols into reproducible runs.
//!
//! Settings come from an optional TOML config file (one `[section]` per
//! subcommand) with command-line flags taking precedence. Every subcommand
//! is deterministic under a fixed seed and writes its effective settings as
//! `config.toml` beside its outputs. Exit codes: 0 success, 2 usage error,
//! 3 data error, 4 runtime error.

mod backend;
mod cmd;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqrec_core::expr::Mode;
use seqrec_core::generator::OpFamily;
use seqrec_core::model::Task;

use settings::Failure;

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Symbolic regression on recurrent sequences")]
pub(crate) struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    pub(crate) config: Option<PathBuf>,
    /// Output directory (default: $SEQREC_OUT/<subcommand>, else runs/<subcommand>)
    #[arg(long, global = true)]
    pub(crate) out: Option<PathBuf>,
    /// Parallel workers where a command supports them; 1 is bit-reproducible
    #[arg(long, global = true, default_value_t = 1)]
    pub(crate) workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample random recurrence relations and write a dataset
    Generate(cmd::GenerateArgs),
    /// Train (or resume) a sequence-to-sequence model on streamed samples
    Train(cmd::TrainArgs),
    /// Predict a relation and extrapolation for one input sequence
    Predict(cmd::PredictArgs),
    /// Score a predictor on held-out generated sequences
    Evaluate(cmd::EvaluateArgs),
    /// Score a predictor on an OEIS benchmark subset
    Oeis(cmd::OeisArgs),
    /// Approximate a constant or a named function symbolically
    Approx(cmd::ApproxArgs),
    /// Fit values by iteratively predicting residual corrections
    Refine(cmd::RefineArgs),
    /// Count trees and expressions in a bounded search space
    Count(cmd::CountArgs),
    /// Brute-force fit of one sequence by exhaustive enumeration
    EnumerateFit(cmd::EnumerateFitArgs),
    /// Export token-embedding cosine similarities from a checkpoint
    EmbedSim(cmd::EmbedSimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub(crate) enum ModeArg {
    Integer,
    Float,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Integer => Mode::Integer,
            ModeArg::Float => Mode::Float,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub(crate) enum TaskArg {
    Symbolic,
    Numeric,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Symbolic => Task::Symbolic,
            TaskArg::Numeric => Task::Numeric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub(crate) enum OpFamilyArg {
    Base,
    Division,
    Sqrt,
    Exponential,
    Trigonometric,
}

impl From<OpFamilyArg> for OpFamily {
    fn from(f: OpFamilyArg) -> OpFamily {
        match f {
            OpFamilyArg::Base => OpFamily::Base,
            OpFamilyArg::Division => OpFamily::Division,
            OpFamilyArg::Sqrt => OpFamily::Sqrt,
            OpFamilyArg::Exponential => OpFamily::Exponential,
            OpFamilyArg::Trigonometric => OpFamily::Trigonometric,
        }
    }
}

/// Generator knobs shared by the sampling commands.
#[derive(Args)]
pub(crate) struct GenFlags {
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Max operators per tree
    #[arg(long)]
    o_max: Option<usize>,
    /// Max recurrence degree
    #[arg(long)]
    d_max: Option<usize>,
    #[arg(long)]
    l_min: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    /// Probability of the stochastic leaf xi
    #[arg(long)]
    pi_train: Option<f64>,
    #[arg(long)]
    init_low: Option<f64>,
    #[arg(long)]
    init_high: Option<f64>,
    /// Interdependent dimensions (1..=3)
    #[arg(long)]
    dimensions: Option<usize>,
    /// Restrict operators to one family
    #[arg(long)]
    op_family: Option<OpFamilyArg>,
    /// Sample real constant leaves uniformly (float mode)
    #[arg(long)]
    real_prefactors: bool,
}

impl GenFlags {
    pub(crate) fn apply(&self, cfg: &mut seqrec_core::generator::GeneratorConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if let Some(v) = self.o_max {
            cfg.o_max = v;
        }
        if let Some(v) = self.d_max {
            cfg.d_max = v;
        }
        if let Some(v) = self.l_min {
            cfg.l_min = v;
        }
        if let Some(v) = self.l_max {
            cfg.l_max = v;
        }
        if let Some(v) = self.pi_train {
            cfg.pi_train = v;
        }
        if let Some(v) = self.init_low {
            cfg.init_low = v;
        }
        if let Some(v) = self.init_high {
            cfg.init_high = v;
        }
        if let Some(v) = self.dimensions {
            cfg.dimensions = v;
        }
        if let Some(f) = self.op_family {
            cfg.op_family = Some(f.into());
        }
        if self.real_prefactors {
            cfg.real_prefactors = true;
        }
    }
}

/// Token-encoding knobs; must match the checkpoint when one is used.
#[derive(Args)]
pub(crate) struct EncodingFlags {
    /// Integer digit base
    #[arg(long)]
    int_base: Option<u32>,
    /// Significant digits per mantissa token
    #[arg(long)]
    digits_per_token: Option<u32>,
    /// Mantissa tokens per float
    #[arg(long)]
    mantissa_tokens: Option<usize>,
}

impl EncodingFlags {
    pub(crate) fn apply(&self, cfg: &mut seqrec_core::encoding::EncodingConfig) {
        if let Some(v) = self.int_base {
            cfg.integer.base = v;
        }
        if let Some(v) = self.digits_per_token {
            cfg.float.digits_per_token = v;
        }
        if let Some(v) = self.mantissa_tokens {
            cfg.float.mantissa_tokens = v;
        }
    }
}

/// Backend selection: a trained checkpoint or the enumeration stub.
#[derive(Args)]
pub(crate) struct BackendFlags {
    /// Trained checkpoint file
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the brute-force enumeration backend instead of a model
    #[arg(long)]
    pub(crate) oracle: bool,
    /// Oracle backend: max operators in the search space
    #[arg(long, default_value_t = 2)]
    max_ops: usize,
    /// Oracle backend: max recurrence degree in the search space
    #[arg(long, default_value_t = 2)]
    max_degree: usize,
    /// Oracle backend: fit tolerance
    #[arg(long, default_value_t = 1e-10)]
    fit_tau: f64,
    /// Oracle backend: bypass the enumeration size guard
    #[arg(long)]
    force: bool,
}

impl BackendFlags {
    pub(crate) fn build(
        &self,
        vocab: &seqrec_core::encoding::Vocabulary,
        mode: Mode,
    ) -> Result<backend::Backend, Failure> {
        if let Some(path) = &self.checkpoint {
            let state = backend::load_checkpoint(path, vocab)?;
            Ok(backend::Backend::Checkpoint(Box::new(state)))
        } else if self.oracle {
            let space = seqrec_core::oracle::EnumerationSpace::with_defaults(
                mode,
                self.max_ops,
                self.max_degree,
            );
            // surface the size guard here; the predictor trait cannot error
            if !self.force {
                seqrec_core::oracle::for_each_expression(&space, false, &mut |_| false)
                    .map_err(|e| settings::usage(format!("{e}, or shrink --max-ops")))?;
            }
            Ok(backend::Backend::Oracle {
                space,
                tau: self.fit_tau,
                force: self.force,
            })
        } else {
            Err(settings::usage("pass --checkpoint FILE or --oracle"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => cmd::generate(&cli, args),
        Command::Train(args) => cmd::train(&cli, args),
        Command::Predict(args) => cmd::predict(&cli, args),
        Command::Evaluate(args) => cmd::evaluate(&cli, args),
        Command::Oeis(args) => cmd::oeis(&cli, args),
        Command::Approx(args) => cmd::approx(&cli, args),
        Command::Refine(args) => cmd::refine(&cli, args),
        Command::Count(args) => cmd::count(&cli, args),
        Command::EnumerateFit(args) => cmd::enumerate_fit(&cli, args),
        Command::EmbedSim(args) => cmd::embed_sim(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.code())
        }
    }
}
