//! Plain-text `key=value` run configuration.
//!
//! Every command accepts a fixed key set; anything else is rejected so typos
//! never pass silently. The fully resolved configuration (defaults included)
//! is echoed next to each run's outputs and can be fed back verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scm::parse_key_values;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Monitor,
    Umm,
    Eval,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Monitor => "monitor",
            Command::Umm => "umm",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

use Command::*;

struct Key {
    name: &'static str,
    default: &'static str,
    commands: &'static [Command],
}

const ALL: &[Command] = &[GenData, Pretrain, Monitor, Umm, Eval, Report];
const TRAINED: &[Command] = &[Pretrain, Monitor, Umm, Eval];

// Defaults reproduce the desk-scale overfitting run.
const KEYS: &[Key] = &[
    Key { name: "seed", default: "0", commands: ALL },
    Key { name: "out", default: "out", commands: ALL },
    // gen-data
    Key { name: "n", default: "2000", commands: &[GenData] },
    Key { name: "d_r", default: "4", commands: &[GenData] },
    Key { name: "d_ur", default: "16", commands: &[GenData] },
    Key { name: "d_x", default: "0", commands: &[GenData] },
    Key { name: "k", default: "10", commands: &[GenData] },
    Key { name: "sigma_a", default: "0.005", commands: &[GenData] },
    Key { name: "dependence", default: "0", commands: &[GenData] },
    Key { name: "ur_scale", default: "0.1", commands: &[GenData] },
    Key { name: "r_gain", default: "8", commands: &[GenData] },
    // shared by commands that read a dataset and a network
    Key { name: "data", default: "data", commands: TRAINED },
    Key { name: "monitor_pairs", default: "256", commands: TRAINED },
    Key { name: "eps", default: "1", commands: &[Pretrain, Monitor, Umm, Eval] },
    Key { name: "ssl", default: "ntxent", commands: &[Pretrain, Umm] },
    Key { name: "temperature", default: "0.1", commands: &[Pretrain, Umm] },
    Key { name: "off_diag_weight", default: "0.005", commands: &[Pretrain, Umm] },
    Key { name: "batch_pairs", default: "256", commands: &[Pretrain, Umm] },
    Key { name: "epochs", default: "500", commands: &[Pretrain] },
    Key { name: "knn", default: "true", commands: &[Pretrain, Monitor] },
    // pretrain
    Key { name: "widths", default: "64,64,16,8", commands: &[Pretrain] },
    Key { name: "head_widths", default: "", commands: &[Pretrain] },
    Key { name: "activation", default: "tanh", commands: &[Pretrain] },
    Key { name: "split_index", default: "2", commands: &[Pretrain] },
    Key { name: "lr", default: "0.3", commands: &[Pretrain] },
    Key { name: "every_k", default: "5", commands: &[Pretrain] },
    // monitor / report
    Key { name: "run", default: "run", commands: &[Monitor, Report] },
    Key { name: "patience", default: "3", commands: &[Report] },
    Key { name: "margin", default: "0.05", commands: &[Report] },
    // umm / eval
    Key { name: "checkpoint", default: "run/final", commands: &[Umm, Eval] },
    Key { name: "variant", default: "umm", commands: &[Umm] },
    Key { name: "epochs", default: "200", commands: &[Umm] },
    Key { name: "alpha", default: "1", commands: &[Umm] },
    Key { name: "beta", default: "0.1", commands: &[Umm] },
    Key { name: "lambda", default: "0.001", commands: &[Umm] },
    Key { name: "gamma", default: "0.001", commands: &[Umm] },
    Key { name: "inner_steps", default: "1", commands: &[Umm] },
    Key { name: "grad_mode", default: "unrolled", commands: &[Umm] },
];

/// Resolved settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    command: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults for `command`.
    pub fn defaults(command: Command) -> Self {
        let values = KEYS
            .iter()
            .filter(|k| k.commands.contains(&command))
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        Self { command, values }
    }

    /// Known keys of `command`, sorted.
    pub fn keys(command: Command) -> Vec<&'static str> {
        let mut v: Vec<_> = KEYS.iter().filter(|k| k.commands.contains(&command)).map(|k| k.name).collect();
        v.sort_unstable();
        v
    }

    pub fn command(&self) -> Command {
        self.command
    }

    /// Sets one key; unknown keys are an error naming the command.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config {
                key: key.to_string(),
                reason: format!("unknown key for `{}`", self.command),
            }),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config {
            key: pair.to_string(),
            reason: "expected key=value".into(),
        })?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every entry of a config text.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (k, v) in parse_key_values(text, origin)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config {
            key: key.to_string(),
            reason: format!("not a key of `{}`", self.command),
        })
    }

    /// Parses a key's value.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e: T::Err| Error::Config {
            key: key.to_string(),
            reason: format!("cannot parse {raw:?}: {e}"),
        })
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw(key)?))
    }

    /// Comma-separated list; the empty string is the empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|e: T::Err| Error::Config {
                    key: key.to_string(),
                    reason: format!("cannot parse list entry {s:?}: {e}"),
                })
            })
            .collect()
    }

    /// `key=value` lines, sorted by key, preceded by a comment naming the
    /// command.
    pub fn to_text(&self) -> String {
        let mut s = format!("# resolved config for `{}`\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}
