//! `key = value` config files. Each key is a long flag name without the
//! leading dashes; the values are spliced in right after the subcommand so
//! that flags given on the command line override them.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Flags that take no value.
const SWITCHES: &[&str] = &["synth"];

pub fn parse(text: &str, origin: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", origin.display(), i + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.starts_with('-') {
            bail!("{}:{}: bad key {k:?}", origin.display(), i + 1);
        }
        if k == "config" {
            bail!("{}:{}: config files cannot include others", origin.display(), i + 1);
        }
        if SWITCHES.contains(&k) {
            match v {
                "true" | "1" | "yes" => out.push(format!("--{k}")),
                "false" | "0" | "no" => {}
                _ => bail!("{}:{}: {k} must be true or false", origin.display(), i + 1),
            }
        } else {
            out.push(format!("--{k}"));
            out.push(v.to_string());
        }
    }
    Ok(out)
}

/// Rewrites argv with the config file's flags inserted after the subcommand.
pub fn expand_args(args: Vec<String>) -> Result<Vec<String>> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args.get(pos + 1).cloned().context("--config needs a path")?,
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let extra = parse(&text, Path::new(&path))?;
    // The subcommand is the first argument that is neither a flag nor a flag value.
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--config" || a == "--threads" {
            i += 2;
            continue;
        }
        if a.starts_with('-') {
            i += 1;
            continue;
        }
        sub = Some(i);
        break;
    }
    let Some(sub) = sub else { return Ok(args) };
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn parses_pairs_and_switches() {
        let got = parse("# c\nkey-bits = 512\n\nsynth = true\nmethod=pader\n", Path::new("x")).unwrap();
        assert_eq!(got, s(&["--key-bits", "512", "--synth", "--method", "pader"]));
        assert!(parse("oops\n", Path::new("x")).is_err());
        assert!(parse("synth = maybe\n", Path::new("x")).is_err());
    }

    #[test]
    fn splices_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "seed = 4\n").unwrap();
        let args = s(&["bin", "--config", p.to_str().unwrap(), "train", "--seed", "9"]);
        let out = expand_args(args).unwrap();
        assert_eq!(out[3..], s(&["train", "--seed", "4", "--seed", "9"])[..]);
    }
}
