//! `--config FILE` support: flat `key = value` lines become flags inserted
//! right after the subcommand, so anything given on the command line wins.

use clap::CommandFactory;

use crate::Cli;

fn takes_value(cmd: &clap::Command, long: &str) -> Option<bool> {
    cmd.get_arguments().find(|a| a.get_long() == Some(long)).map(|a| a.get_action().takes_values())
}

/// Index of the subcommand token and the config path, if any.
fn locate(argv: &[String], cmd: &clap::Command) -> (Option<usize>, Option<String>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" || a == "--threads" {
            if a == "--config" {
                config = argv.get(i + 1).cloned();
            }
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        } else if sub.is_none() && cmd.find_subcommand(a).is_some() {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

pub fn expand(mut argv: Vec<String>) -> Result<Vec<String>, String> {
    let cmd = Cli::command();
    let (Some(sub_at), Some(path)) = locate(&argv, &cmd) else {
        return Ok(argv);
    };
    let sub = cmd.find_subcommand(&argv[sub_at]).expect("located above");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("{path}:{}: expected key=value", n + 1))?;
        let key = k.trim().replace('_', "-");
        let v = v.trim();
        match takes_value(sub, &key) {
            None => return Err(format!("{path}:{}: unknown key {:?} for {}", n + 1, k.trim(), sub.get_name())),
            Some(true) => extra.push(format!("--{key}={v}")),
            Some(false) => match v {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(format!("{path}:{}: {key} expects true or false", n + 1)),
            },
        }
    }
    argv.splice(sub_at + 1..sub_at + 1, extra);
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn with_config(text: &str, args: &str) -> Result<Vec<String>, String> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, text).unwrap();
        expand(argv(&args.replace("CFG", path.to_str().unwrap())))
    }

    #[test]
    fn keys_become_flags_after_subcommand() {
        let out =
            with_config("# comment\noverlap = 0.5\nfixed_k = 23\n\n", "w --config CFG ft-analyze --overlap 0").unwrap();
        assert_eq!(out[3..], argv("ft-analyze --overlap=0.5 --fixed-k=23 --overlap 0")[..]);
    }

    #[test]
    fn booleans_and_unknown_keys() {
        let out = with_config("preprocess = true\n", "w --config=CFG ft-analyze").unwrap();
        assert_eq!(out.last().unwrap(), "--preprocess");
        assert!(with_config("preprocess = false\n", "w --config CFG ft-analyze").unwrap().len() == 4);
        assert!(with_config("preprocess = maybe\n", "w --config CFG ft-analyze").is_err());
        assert!(with_config("no_such_key = 1\n", "w --config CFG ft-analyze").is_err());
        assert!(with_config("overlap\n", "w --config CFG ft-analyze").is_err());
    }

    #[test]
    fn untouched_without_config() {
        assert_eq!(expand(argv("w --threads 2 synth --out a.png")).unwrap(), argv("w --threads 2 synth --out a.png"));
    }
}
