use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unlearnlab_cli::commands::{cmd_eval, cmd_gen, cmd_sweep, cmd_train, cmd_unlearn};
use unlearnlab_cli::{registry, CliError, RunConfig};

/// Synthetic-world unlearning experiments.
///
/// Every config key is also a flag: `--key value` or `--key=value`.
/// `--config FILE` loads a flat `key = value` file first. Run `unlearnlab
/// keys` for the full list with defaults.
#[derive(Parser)]
#[command(name = "unlearnlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write the dataset into data_dir.
    Gen(Flags),
    /// Memorize the dataset and write the checkpoint.
    Train(Flags),
    /// Unlearn the forget split and evaluate the result.
    Unlearn(Flags),
    /// Evaluate eval_checkpoint against checkpoint.
    Eval(Flags),
    /// Run unlearn once per value of sweep_key.
    Sweep(Flags),
    /// List every config key with its default.
    Keys,
}

#[derive(Args)]
struct Flags {
    #[arg(
        allow_hyphen_values = true,
        trailing_var_arg = true,
        value_name = "--KEY VALUE"
    )]
    args: Vec<String>,
}

fn run(command: Command) -> Result<(), CliError> {
    let cfg = |f: &Flags| RunConfig::from_args(&f.args);
    match command {
        Command::Gen(f) => cmd_gen(&cfg(&f)?).map(drop),
        Command::Train(f) => cmd_train(&cfg(&f)?).map(drop),
        Command::Unlearn(f) => cmd_unlearn(&cfg(&f)?).map(drop),
        Command::Eval(f) => cmd_eval(&cfg(&f)?).map(drop),
        Command::Sweep(f) => cmd_sweep(&cfg(&f)?).map(drop),
        Command::Keys => {
            for k in registry() {
                println!("{:<24} {:<20} {}", k.name, k.default, k.help);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
