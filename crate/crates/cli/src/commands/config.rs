use std::path::PathBuf;

use clap::Args;

use super::load_config;
use crate::error::CliResult;

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Validate this file and print the resolved config instead of the defaults.
    #[arg(long, value_name = "PATH")]
    pub check: Option<PathBuf>,
}

pub fn run(args: &ConfigArgs) -> CliResult {
    print!("{}", load_config(args.check.as_deref(), None)?.to_text());
    Ok(())
}
