//! `gid.conf` handling: flat `key = value` lines merged under the command
//! line by injecting them as flags right after the subcommand name.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Command;

pub const DEFAULT_FILE: &str = "gid.conf";

#[derive(Debug, thiserror::Error)]
pub enum ConfError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected key = value")]
    Syntax { path: PathBuf, line: usize },
    #[error("{path}:{line}: unknown key {key:?}")]
    UnknownKey {
        path: PathBuf,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: key {key:?} given twice")]
    Duplicate {
        path: PathBuf,
        line: usize,
        key: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
}

/// Parse config text. Keys may use `_` or `-`; they come back hyphenated.
pub fn parse(text: &str, path: &Path, known: &BTreeSet<String>) -> Result<Vec<Entry>, ConfError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfError::Syntax {
            path: path.to_owned(),
            line: i + 1,
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(ConfError::Syntax {
                path: path.to_owned(),
                line: i + 1,
            });
        }
        if !known.contains(&key) {
            return Err(ConfError::UnknownKey {
                path: path.to_owned(),
                line: i + 1,
                key: k.trim().to_string(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfError::Duplicate {
                path: path.to_owned(),
                line: i + 1,
                key,
            });
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Long flag names accepted by any subcommand, minus the ones that make no
/// sense in a shared file.
pub fn known_keys(cmd: &Command) -> BTreeSet<String> {
    cmd.get_subcommands()
        .flat_map(|s| s.get_arguments())
        .filter_map(|a| a.get_long())
        .filter(|l| !matches!(*l, "config" | "help" | "out" | "out-dir"))
        .map(str::to_string)
        .collect()
}

/// Flags of `sub` a config entry may set: not given by the user and not in
/// conflict with anything the user gave.
fn settable(cmd: &Command, sub: &str, user: &[OsString]) -> BTreeSet<String> {
    let Some(sub) = cmd.find_subcommand(sub) else {
        return BTreeSet::new();
    };
    let given: BTreeSet<String> = user
        .iter()
        .filter_map(|a| {
            let a = a.to_string_lossy();
            let flag = a.strip_prefix("--")?;
            Some(flag.split('=').next().unwrap_or(flag).to_string())
        })
        .collect();
    sub.get_arguments()
        .filter(|a| {
            !sub.get_arg_conflicts_with(a)
                .iter()
                .any(|c| c.get_long().is_some_and(|l| given.contains(l)))
        })
        .filter_map(|a| a.get_long())
        .map(str::to_string)
        .collect()
}

/// Position of the subcommand token and the `--config` value, if any.
fn scan(args: &[OsString]) -> (Option<usize>, Option<PathBuf>) {
    let mut sub = None;
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

/// Return `args` with config-file entries for the chosen subcommand inserted
/// before the user's own flags, so the latter win.
pub fn merge(cmd: &Command, args: Vec<OsString>, cwd: &Path) -> Result<Vec<OsString>, ConfError> {
    let (sub, explicit) = scan(&args);
    let path = match explicit {
        Some(p) => p,
        None => {
            let p = cwd.join(DEFAULT_FILE);
            if !p.is_file() {
                return Ok(args);
            }
            p
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|source| ConfError::Read {
        path: path.clone(),
        source,
    })?;
    let entries = parse(&text, &path, &known_keys(cmd))?;
    let Some(at) = sub else {
        return Ok(args);
    };
    let name = args[at].to_string_lossy().into_owned();
    let flags = settable(cmd, &name, &args[at + 1..]);
    let injected = entries
        .into_iter()
        .filter(|e| flags.contains(&e.key))
        .map(|e| OsString::from(format!("--{}={}", e.key, e.value)));
    let mut out: Vec<OsString> = args[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
