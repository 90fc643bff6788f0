//! `key = value` config files. Each key names a long flag of the chosen
//! subcommand; flags given on the command line win.

use std::path::Path;

pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        let k = k.trim().replace('_', "-");
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Expands `--config FILE` into flags appended after the explicit ones,
/// skipping keys already present on the command line. Boolean keys take
/// `true`/`false`.
pub fn expand(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let (path, skip) = match args[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (args.get(pos + 1).cloned().ok_or("--config needs a file")?, 2),
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| format!("{path}: {e}"))?;
    let mut out: Vec<String> = args[..pos].iter().chain(&args[pos + skip..]).cloned().collect();
    let given: Vec<String> = out
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap().to_string())
        .collect();
    for (k, v) in parse(&text)? {
        if given.contains(&k) {
            continue;
        }
        match v.as_str() {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v);
            }
        }
    }
    Ok(out)
}
