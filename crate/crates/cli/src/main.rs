mod error;
mod opts;
mod run;

use clap::{CommandFactory, Parser};

use crate::error::CliError;
use crate::opts::{Cli, Command, Settings};

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    let (opts, method, table) = match cmd {
        Command::Estimate { method, opts }
        | Command::Select { method, opts }
        | Command::MeanLoadings { method, opts } => (opts, method.as_deref(), None),
        Command::Rank { opts } | Command::Infer { opts } => (opts, None, None),
        Command::Simulate { table, opts, .. } => (opts, None, table.as_deref()),
    };
    let settings = Settings::resolve(opts, method, table)?;
    let go = || match cmd {
        Command::Estimate { .. } => run::estimate(&settings),
        Command::Rank { .. } => run::rank(&settings),
        Command::Select { .. } => run::select(&settings),
        Command::MeanLoadings { .. } => run::mean_loadings_cmd(&settings),
        Command::Infer { .. } => run::infer(&settings),
        Command::Simulate { full, .. } => run::simulate(&settings, *full),
    };
    match settings.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot build a {k}-thread pool: {e}")))?
            .install(go),
        None => go(),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(&cli.command) {
        eprintln!("error: {e}");
        if let CliError::Usage(_) = e {
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(cli.command.name()) {
                eprintln!("{}", sub.render_usage());
            }
        }
        std::process::exit(e.exit_code());
    }
}
