use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rft_core::config::Slice;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rft", version, about = "Emotion and keyword transition aware empathetic response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with planted transition rules.
    Synth(Common),
    /// Import the EmpatheticDialogues CSV release.
    Import {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.csv, valid.csv and test.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Mine head/tail keyword pairs from the training split.
    Pairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pmi_threshold: Option<f64>,
    },
    /// Train the model and write a checkpoint.
    Train(Common),
    /// Decode responses for the test split.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: Decode,
        /// Write every keyword graph to graphs.txt.
        #[arg(long)]
        dump_graph: bool,
    },
    /// Score the test split and write report.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: Decode,
    },
    /// Talk to a trained model line by line on stdin.
    Chat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: Decode,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML). Defaults to <out>/config.toml when present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SliceArg {
    All,
    Multiturn,
}

impl From<SliceArg> for Slice {
    fn from(s: SliceArg) -> Self {
        match s {
            SliceArg::All => Slice::All,
            SliceArg::Multiturn => Slice::Multiturn,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Decode {
    #[arg(long)]
    keyword_threshold: Option<f64>,
    #[arg(long, value_enum)]
    cpplm: Option<Switch>,
    #[arg(long)]
    cpplm_step_size: Option<f64>,
    #[arg(long)]
    cpplm_iters: Option<usize>,
    #[arg(long)]
    cpplm_tau: Option<f64>,
    #[arg(long, value_enum)]
    slice: Option<SliceArg>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => commands::synth(&c),
        Command::Import { common, data } => commands::import(&common, &data),
        Command::Pairs { common, pmi_threshold } => commands::pairs(&common, pmi_threshold),
        Command::Train(c) => commands::train(&c),
        Command::Generate { common, decode, dump_graph } => commands::generate(&common, &decode, dump_graph),
        Command::Eval { common, decode } => commands::eval(&common, &decode),
        Command::Chat { common, decode } => commands::chat(&common, &decode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
