//! Flat `key=value` config files. Keys are long flag names (`batch-size` or
//! `batch_size`); flags given on the command line win over the file.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::Path;

use clap::{ArgMatches, CommandFactory};

use crate::args::Cli;
use crate::error::{CliError, CliResult};

pub fn parse(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", no + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", no + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(CliError::usage(format!("config line {}: `{key}` set twice", no + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn long_names(cmd: &clap::Command) -> BTreeSet<String> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect()
}

/// Path given by `--config`, looking only after the subcommand.
fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(2);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn given_on_command_line(argv: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    argv.iter().skip(2).any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&format!("{flag}="))
    })
}

/// Inserts config entries as flags right after the subcommand name. Entries
/// for flags of other subcommands are skipped so one file can drive a whole
/// pipeline; keys no subcommand knows are rejected.
pub fn merge(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some(sub) = argv.get(1).and_then(|s| root.find_subcommand(s.to_string_lossy().as_ref())) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let here = long_names(sub);
    let anywhere: BTreeSet<String> = root.get_subcommands().flat_map(long_names).collect();
    let mut injected = Vec::new();
    for (key, value) in parse(&text)? {
        if key == "config" {
            return Err(CliError::usage("config files cannot include other config files"));
        }
        if !anywhere.contains(&key) {
            return Err(CliError::usage(format!("unknown config key `{key}`")));
        }
        if here.contains(&key) && !given_on_command_line(&argv, &key) {
            injected.push(OsString::from(format!("--{key}={value}")));
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Every resolved flag value of a subcommand, defaults included, keyed by
/// long flag name. Written as a config file it reproduces the run.
pub fn effective(matches: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for id in matches.ids() {
        let name = id.as_str();
        if name == "config" {
            continue;
        }
        if let Ok(Some(raw)) = matches.try_get_raw(name) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.insert(name.replace('_', "-"), vals.join(","));
        }
    }
    out
}
