//! `key = value` config files, spliced into the argument list ahead of the
//! user's own flags so that the command line wins.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            format!(
                "{}:{}: expected `key = value`, found {line:?}",
                origin.display(),
                i + 1
            )
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key.is_empty() || key == "config" {
            return Err(format!("{}:{}: invalid key {key:?}", origin.display(), i + 1));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
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

/// Returns `args` with config-file flags inserted right after the subcommand.
pub fn splice_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let extra = parse_config(&text, path)?;
    // first bare word after the program name that is not the --config value
    let mut skip_next = false;
    let mut at = None;
    for (i, a) in args.iter().enumerate().skip(1) {
        let s = a.to_string_lossy();
        if skip_next {
            skip_next = false;
            continue;
        }
        if s == "--config" {
            skip_next = true;
            continue;
        }
        if !s.starts_with('-') {
            at = Some(i + 1);
            break;
        }
    }
    let Some(at) = at else {
        return Ok(args);
    };
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_flags_and_comments() {
        let text = "# run\nepochs = 3\nbatch_size=8\nrerank = true\nthreads = false\n";
        let got = parse_config(text, Path::new("c")).unwrap();
        assert_eq!(got, os(&["--epochs", "3", "--batch-size", "8", "--rerank"]));
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("epochs 3", Path::new("c")).unwrap_err().contains("c:1"));
    }

    #[test]
    fn splices_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "epochs = 3\n").unwrap();
        let args = os(&["kgc", "--config", cfg.to_str().unwrap(), "train", "--epochs", "5"]);
        let out = splice_config(args).unwrap();
        let tail: Vec<_> = out[4..].to_vec();
        assert_eq!(tail, os(&["--epochs", "3", "--epochs", "5"]));
    }
}
