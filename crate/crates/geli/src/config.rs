//! INI run configs. Keys in the unnamed leading section apply to every
//! subcommand, keys under `[<subcommand>]` to that subcommand only. Each key
//! is the long name of a flag; values become `--key=value` arguments placed
//! ahead of the command-line flags, and any flag given on the command line
//! replaces the config value.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};
use ini::Ini;

use crate::error::{Error, Result};

fn subcommand_position(args: &[OsString]) -> Option<usize> {
    args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn given_flags(args: &[OsString]) -> BTreeSet<String> {
    args.iter()
        .filter_map(|a| {
            let s = a.to_string_lossy();
            s.strip_prefix("--").map(|f| f.split('=').next().unwrap_or_default().to_owned())
        })
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}` expects true or false, got `{value}`"))),
    }
}

/// Expands `--config FILE` into explicit flags for the chosen subcommand.
pub fn expand_args(args: Vec<OsString>, command: &Command) -> Result<Vec<OsString>> {
    let Some(sub_pos) = subcommand_position(&args) else {
        return Ok(args);
    };
    let user = &args[sub_pos + 1..];
    let Some(path) = config_path(user) else {
        return Ok(args);
    };
    let name = args[sub_pos].to_string_lossy().into_owned();
    let Some(sub) = command.find_subcommand(&name) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let ini = Ini::load_from_file(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for (section, _) in ini.iter() {
        if let Some(s) = section {
            if command.find_subcommand(s).is_none() {
                return Err(Error::Config(format!("{}: unknown section [{s}]", path.display())));
            }
        }
    }
    let given = given_flags(user);
    let mut injected = Vec::new();
    let sections = [None, Some(name.as_str())];
    for section in sections {
        let Some(props) = ini.section(section) else {
            continue;
        };
        for (key, value) in props.iter() {
            let found = sub.get_arguments().find(|a| a.get_long() == Some(key) && key != "config");
            let Some(arg) = found else {
                let known_elsewhere = section.is_none()
                    && command
                        .get_subcommands()
                        .any(|c| c.get_arguments().any(|a| a.get_long() == Some(key)));
                if known_elsewhere {
                    continue;
                }
                return Err(Error::Config(format!("{}: unknown key `{key}` for `{name}`", path.display())));
            };
            if given.contains(key) {
                continue;
            }
            match arg.get_action() {
                ArgAction::SetTrue => {
                    if parse_bool(key, value)? {
                        injected.push(OsString::from(format!("--{key}")));
                    }
                }
                ArgAction::Append => {
                    for v in value.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                        injected.push(OsString::from(format!("--{key}={v}")));
                    }
                }
                _ => injected.push(OsString::from(format!("--{key}={value}"))),
            }
        }
    }
    let mut out: Vec<OsString> = args[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend(user.iter().cloned());
    Ok(out)
}
