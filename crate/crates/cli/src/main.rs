//! `atnf`: train, sample, edit and inspect the toy attention-editing model.

mod common;
mod edit;
mod error;
mod generate;
mod header;
mod inspect;
mod invert;
mod serve;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliResult;

#[derive(Parser)]
#[command(name = "atnf", version, about = "Prompt-to-prompt editing on a toy text-to-image diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser from a TOML config.
    Train {
        config: PathBuf,
        /// Continue from the config's checkpoint when it exists.
        #[arg(long)]
        resume: bool,
        /// Override the total step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample an image and write a session file for later edits.
    Generate(generate::GenerateArgs),
    /// Replay a session against an edited prompt or attention faders.
    Edit(Box<edit::EditArgs>),
    /// Edit across a list of injection fractions and lay the results out.
    SweepTau(edit::SweepArgs),
    /// DDIM-invert an image into a latent and an editable session.
    Invert(invert::InvertArgs),
    /// Score held-out noise prediction and attention localization.
    Eval(inspect::EvalArgs),
    /// Write per-token, per-step attention heatmaps of a session.
    AttnDump(inspect::AttnDumpArgs),
    /// Run the HTTP API.
    Serve(serve::ServeArgs),
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            config,
            resume,
            steps,
        } => train::run(train::TrainArgs {
            config: &config,
            resume,
            steps,
        }),
        Command::Generate(a) => generate::run(a),
        Command::Edit(a) => edit::run_edit(*a),
        Command::SweepTau(a) => edit::run_sweep(a),
        Command::Invert(a) => invert::run(a),
        Command::Eval(a) => inspect::run_eval(a),
        Command::AttnDump(a) => inspect::run_attn_dump(a),
        Command::Serve(a) => serve::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
