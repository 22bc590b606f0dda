// SPDX-License-Identifier: Apache-2.0

//! `--config FILE` support: flat `key=value` lines become flags inserted
//! right after the subcommand name, so flags typed on the command line,
//! which come later, take precedence.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got `{line}`", origin.display(), i + 1);
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Rewrites `args` with the settings of the `--config` file, if one is given.
pub fn expand_args(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let settings = parse_config(&text, path)?;

    let Some((pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a.to_string_lossy().as_ref()).map(|s| (i, s)))
    else {
        return Ok(args);
    };
    let mut inserted: Vec<OsString> = Vec::new();
    for (key, value) in settings {
        if key == "config" {
            bail!("{}: a config file cannot name another config file", path.display());
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            bail!("{}: unknown setting `{key}` for `{}`", path.display(), sub.get_name());
        };
        if arg.get_action().takes_values() {
            inserted.push(format!("--{key}").into());
            inserted.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => inserted.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => bail!("{}: `{key}` is a switch; expected true or false, got `{other}`", path.display()),
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(inserted);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn cmd() -> Command {
        Command::new("t")
            .arg(Arg::new("config").long("config").global(true))
            .subcommand(
                Command::new("decode")
                    .args_override_self(true)
                    .arg(Arg::new("k").long("k"))
                    .arg(Arg::new("flat").long("flat").action(ArgAction::SetTrue)),
            )
    }

    #[test]
    fn flags_on_the_command_line_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# comment\nk = 8\nflat=true\n").unwrap();
        let args: Vec<OsString> = ["t", "decode", "--config", p.to_str().unwrap(), "--k", "16"]
            .iter()
            .map(Into::into)
            .collect();
        let expanded = expand_args(&cmd(), args).unwrap();
        let m = cmd().try_get_matches_from(expanded).unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert_eq!(sub.get_one::<String>("k").unwrap(), "16");
        assert!(sub.get_flag("flat"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "beam=3\n").unwrap();
        let args: Vec<OsString> = ["t", "decode", "--config", p.to_str().unwrap()].iter().map(Into::into).collect();
        let err = expand_args(&cmd(), args).unwrap_err().to_string();
        assert!(err.contains("unknown setting `beam`"), "{err}");
        assert!(parse_config("novalue", &p).is_err());
    }
}
