//! Flat `key=value` config files and sidecar provenance files.
//!
//! Config keys are the long flag names of the chosen subcommand (either
//! `ensemble-size` or `ensemble_size`). Values from the file are inserted
//! ahead of the command-line flags, so flags win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

pub const SUBCOMMANDS: [&str; 5] = ["simulate", "fit", "forecast", "diagnose", "score"];

#[derive(Debug)]
pub struct ConfigError(pub String);

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("config line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Locates `--config` in argv (before or after the subcommand).
fn find_config(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices config values into argv right after the subcommand name.
pub fn merge_config(args: Vec<String>, cmd: &Command) -> Result<Vec<String>, ConfigError> {
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse_config(&text)?;
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let name = args[pos].clone();
    let sub = cmd.find_subcommand(&name).expect("known subcommand");
    let mut injected = Vec::new();
    for (k, v) in entries {
        if k == "subcommand" {
            if v != name {
                return Err(ConfigError(format!("config {} is for '{v}', not '{name}'", path.display())));
            }
            continue;
        }
        if k == "config" {
            continue;
        }
        let known = sub.get_arguments().chain(cmd.get_arguments()).find(|a| a.get_long() == Some(k.as_str()));
        match known {
            None => return Err(ConfigError(format!("config {}: unknown key '{k}' for '{name}'", path.display()))),
            Some(a) if !a.get_action().takes_values() => {
                if matches!(v.as_str(), "true" | "1" | "yes") {
                    injected.push(format!("--{k}"));
                }
            }
            Some(_) => injected.push(format!("--{k}={v}")),
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend(args[pos + 1..].iter().cloned());
    Ok(out)
}

/// Resolved options of a subcommand as `key=value` lines (defaults included).
pub fn sidecar_text(name: &str, cmd: &Command, matches: &ArgMatches, threads: Option<usize>) -> String {
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    let mut s = String::new();
    writeln!(s, "# maxar {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "subcommand={name}").unwrap();
    if let Some(t) = threads {
        writeln!(s, "threads={t}").unwrap();
    }
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if long == "help" || long == "version" {
            continue;
        }
        if matches.value_source(id).is_none() || matches.value_source(id) == Some(ValueSource::DefaultValue) && !arg.get_action().takes_values() {
            continue;
        }
        if !arg.get_action().takes_values() {
            if matches.get_flag(id) {
                writeln!(s, "{long}=true").unwrap();
            }
            continue;
        }
        if let Some(raw) = matches.get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            writeln!(s, "{long}={}", vals.join(",")).unwrap();
        }
    }
    s
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut p = output.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}
