//! `key = value` configuration files.
//!
//! Keys are long flag names (`radial-order`, `radial_order` also accepted).
//! The entries are turned into flags placed before the command-line flags,
//! so anything given on the command line wins.

use std::path::Path;

use qxfer_core::{Error, Result};

/// Parses configuration text into `(key, value)` pairs in file order.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("config line {}: expected 'key = value'", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Parse(format!("config line {}: invalid key '{}'", n + 1, key)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Flags for config entries. `true`/`false` values become bare switches or
/// are dropped.
pub fn config_flags(entries: &[(String, String)]) -> Vec<String> {
    let mut flags = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => flags.push(format!("--{k}")),
            "false" => {}
            _ => {
                flags.push(format!("--{k}"));
                flags.push(v.clone());
            }
        }
    }
    flags
}

/// Splices config-file flags into `argv` right after the subcommand name.
/// `--config` itself is looked up in `argv`; the result is `argv` unchanged
/// when there is none.
pub fn expand_config(argv: &[String]) -> Result<Vec<String>> {
    let mut path = None;
    let mut i = 0;
    while i < argv.len() {
        if argv[i] == "--config" {
            path = argv.get(i + 1).cloned();
            if path.is_none() {
                return Err(Error::Parse("--config needs a file".into()));
            }
        } else if let Some(p) = argv[i].strip_prefix("--config=") {
            path = Some(p.to_string());
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(argv.to_vec());
    };
    let entries = load_config(Path::new(&path))?;
    if entries.iter().any(|(k, _)| k == "config") {
        return Err(Error::Parse("config files cannot include other config files".into()));
    }
    // argv[0] is the program, argv[1] the subcommand.
    let split = argv.len().min(2);
    let mut out = argv[..split].to_vec();
    out.extend(config_flags(&entries));
    out.extend_from_slice(&argv[split..]);
    Ok(out)
}
