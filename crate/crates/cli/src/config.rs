//! Flat `key = value` run configuration.
//!
//! Keys are the long flag names of the subcommand (`lr`, `batch-size`, ...;
//! underscores are accepted for dashes). Values from the file are spliced in
//! ahead of the command-line flags, so flags given on the command line win.

use std::path::Path;

use clap::Command;

/// Reads the config file into `--key value` arguments valid for `sub`.
pub fn config_args(path: &Path, sub: &Command) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse(&text, sub).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse(text: &str, sub: &Command) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| format!("line {}: unknown key {key:?} for `{}`", i + 1, sub.get_name()))?;
        if arg.get_action().takes_values() {
            out.push(format!("--{key}"));
            out.push(value.to_string());
        } else {
            match value {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                other => return Err(format!("line {}: {key} expects true or false, got {other:?}", i + 1)),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn cmd() -> Command {
        Command::new("train")
            .arg(Arg::new("lr").long("lr"))
            .arg(Arg::new("batch_size").long("batch-size"))
            .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue))
    }

    #[test]
    fn parses_values_flags_and_comments() {
        let args = parse("# run\nlr = 0.002\nbatch_size=8\nquiet = true\n\n", &cmd()).unwrap();
        assert_eq!(args, vec!["--lr", "0.002", "--batch-size", "8", "--quiet"]);
        assert!(parse("quiet = false", &cmd()).unwrap().is_empty());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(parse("learning = 1", &cmd()).unwrap_err().contains("unknown key"));
        assert!(parse("lr 1", &cmd()).is_err());
        assert!(parse("quiet = yes", &cmd()).is_err());
    }
}
