//! Command-line driver: one subcommand per pipeline stage, each reading and
//! writing JSONL artifacts.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing input
//! files), 2 when a stage fails at run time.

use std::ffi::OsString;

use clap::{CommandFactory, FromArgMatches};

pub mod args;
pub mod commands;
pub mod config;
pub mod jsonl;

use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FATAL: i32 = 2;

/// Marks an error as the caller's fault (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.trim_end())
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ingest(_) => "ingest",
        Command::Embed(_) => "embed",
        Command::Cluster(_) => "cluster",
        Command::Pair(_) => "pair",
        Command::Render(_) => "render",
        Command::Generate(_) => "generate",
        Command::Verify(_) => "verify",
        Command::Sample(_) => "sample",
        Command::Assemble(_) => "assemble",
        Command::Entropy(_) => "entropy",
        Command::Stats(_) => "stats",
        Command::MockLlm(_) => "mock-llm",
    }
}

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

/// Parses `argv` (including the program name), applying `--config` defaults.
pub fn parse_args(argv: &[OsString]) -> anyhow::Result<Cli> {
    let first = match parse(argv) {
        Ok(cli) => cli,
        Err(e) => return Err(clap_failure(e)),
    };
    let Some(config) = first.config.clone() else {
        return Ok(first);
    };
    if !config.exists() {
        return Err(usage(format!("config file {} does not exist", config.display())));
    }
    let expanded = config::expand(&Cli::command(), argv, subcommand_name(&first.command), &config)
        .map_err(|e| usage(format!("{e:#}")))?;
    parse(&expanded).map_err(clap_failure)
}

fn clap_failure(e: clap::Error) -> anyhow::Error {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            // Printing help is not an error, but the caller still has to emit it.
            e.print().ok();
            usage(String::new())
        }
        _ => usage(e.render().to_string()),
    }
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Embed(a) => commands::embed(&rt, a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Pair(a) => commands::pair(&rt, a),
        Command::Render(a) => commands::render(a),
        Command::Generate(a) => commands::generate(&rt, a),
        Command::Verify(a) => commands::verify(a),
        Command::Sample(a) => commands::sample(a),
        Command::Assemble(a) => commands::assemble(a),
        Command::Entropy(a) => commands::entropy(&rt, a),
        Command::Stats(a) => commands::stats(a),
        Command::MockLlm(a) => commands::mock_llm(a),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let is_help = argv.iter().skip(1).any(|a| a == "--help" || a == "-h" || a == "--version" || a == "-V");
    let result = parse_args(&argv).and_then(|cli| execute(&cli));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => match e.downcast_ref::<UsageError>() {
            Some(UsageError(msg)) if msg.is_empty() && is_help => EXIT_OK,
            Some(UsageError(msg)) => {
                if !msg.is_empty() {
                    eprintln!("{}", msg.trim_end());
                }
                EXIT_USAGE
            }
            None => {
                eprintln!("error: {e:#}");
                EXIT_FATAL
            }
        },
    }
}
