//! `--config` files: one `key=value` per line, keys are long flag names
//! (`learning-rate` or `learning_rate`), `#` starts a comment. A value from
//! the file is used only where the flag was not given on the command line.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, CommandFactory, FromArgMatches, Parser};
use densecyst::{Error, Result};

use crate::args::Cli;

pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `argv`, folding in the config file named by `--config` if any.
pub fn parse(argv: Vec<OsString>) -> std::result::Result<Result<Cli>, clap::Error> {
    let mut cmd = Cli::command();
    let matches = cmd.try_get_matches_from_mut(&argv)?;
    let Some(path) = matches.get_one::<std::path::PathBuf>("config").cloned() else {
        return Ok(Cli::from_arg_matches(&matches).map_err(|e| Error::Usage(e.to_string())));
    };
    let (name, sub_matches) = matches.subcommand().expect("a subcommand is required");
    cmd.build();
    let sub = cmd.find_subcommand(name).expect("subcommand exists").clone();
    match merged_argv(&path, &sub, sub_matches, argv) {
        Ok(argv) => Cli::try_parse_from(argv).map(Ok),
        Err(e) => Ok(Err(e)),
    }
}

fn merged_argv(
    path: &Path,
    sub: &clap::Command,
    given: &clap::ArgMatches,
    mut argv: Vec<OsString>,
) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut seen = std::collections::BTreeSet::new();
    for (key, value) in parse_file(&text)? {
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("config key {key:?} appears twice")));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?} for `{}`", sub.get_name())))?;
        if given.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue | ArgAction::Count => {
                let on = value
                    .parse::<bool>()
                    .map_err(|_| Error::Config(format!("config key {key:?}: expected true or false, got {value:?}")))?;
                if on {
                    argv.push(format!("--{key}").into());
                }
            }
            _ => argv.push(format!("--{key}={value}").into()),
        }
    }
    Ok(argv)
}
