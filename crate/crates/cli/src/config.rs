//! `key = value` config files. Each key names a long flag; the pairs are
//! spliced into the argument list ahead of the user's own flags, so a flag
//! given on the command line wins.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Global flags that take a value, so their value is not mistaken for the
/// subcommand name.
const VALUE_FLAGS: [&str; 3] = ["--config", "--jobs", "--seed"];

pub fn parse(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected 'key = value', got '{line}'", path.display(), i + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.starts_with('-') || k.contains(char::is_whitespace) {
            bail!("{}:{}: bad key '{k}'", path.display(), i + 1);
        }
        if k == "config" {
            bail!(
                "{}:{}: config files cannot include other config files",
                path.display(),
                i + 1
            );
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Finds `--config FILE` (or `--config=FILE`) in the raw arguments.
fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn subcommand_position(args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if VALUE_FLAGS.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Returns the arguments with config-file pairs inserted right after the
/// subcommand. `true`/`false` values toggle switches.
pub fn expand_args(args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let pairs = parse(&text, path)?;
    let Some(pos) = subcommand_position(&args) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => {
                injected.push(format!("--{k}"));
                injected.push(v);
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
