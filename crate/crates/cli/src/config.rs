//! `--config` files: `key=value` lines whose keys are long flag names.
//!
//! Values become flags inserted right after the subcommand; a flag that is
//! also given on the real command line keeps its command-line value. Keys that the
//! chosen subcommand does not accept are skipped, which lets one file serve
//! every stage; keys no subcommand accepts are an error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

pub struct Entry {
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got `{line}`", i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        entries.push(Entry {
            key,
            value: value.trim().to_owned(),
        });
    }
    Ok(entries)
}

fn long_flags(cmd: &Command) -> impl Iterator<Item = (&str, bool)> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l, matches!(a.get_action(), ArgAction::SetTrue))))
}

/// `argv` with the config's flags spliced in after the subcommand name.
pub fn expand(root: &Command, argv: &[OsString], subcommand: &str, config: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(config).with_context(|| format!("cannot read config {}", config.display()))?;
    let entries = parse(&text)?;
    let sub = root
        .find_subcommand(subcommand)
        .with_context(|| format!("unknown subcommand {subcommand}"))?;
    let known_anywhere: BTreeSet<&str> = root
        .get_subcommands()
        .flat_map(|c| long_flags(c).map(|(l, _)| l))
        .collect();
    let pos = argv
        .iter()
        .position(|a| a == subcommand)
        .with_context(|| format!("subcommand {subcommand} not found on the command line"))?;
    let explicit: BTreeSet<String> = argv[pos + 1..]
        .iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_owned())
        .collect();
    let mut injected = Vec::new();
    for e in entries {
        if e.key == "config" || !known_anywhere.contains(e.key.as_str()) {
            bail!("config key `{}` is not a flag of any subcommand", e.key);
        }
        let Some((_, is_switch)) = long_flags(sub).find(|(l, _)| *l == e.key) else {
            continue;
        };
        if explicit.contains(&e.key) {
            continue;
        }
        if is_switch {
            match e.value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{}", e.key))),
                "false" | "0" | "no" => {}
                other => bail!("config key `{}`: expected a boolean, got `{other}`", e.key),
            }
        } else {
            injected.push(OsString::from(format!("--{}={}", e.key, e.value)));
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let entries = parse("# c\n\nmax_attempts = 2\n--seed=7\n").unwrap();
        let pairs: Vec<_> = entries.iter().map(|e| (e.key.as_str(), e.value.as_str())).collect();
        assert_eq!(pairs, vec![("max-attempts", "2"), ("seed", "7")]);
        assert!(parse("novalue").is_err());
    }
}
