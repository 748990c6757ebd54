use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// Record of one invocation, written next to its primary output.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Full argument vector, program name first.
    pub argv: Vec<String>,
    /// Resolved configuration after defaults, files and flags.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: Vec<String>, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.into(),
            argv,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: 0.0,
        }
    }

    pub fn path_for(out: &Path) -> PathBuf {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }

    /// Writes `<out>.manifest.json`.
    pub fn finish(mut self, out: &Path, elapsed: Duration) -> anyhow::Result<()> {
        self.duration_secs = elapsed.as_secs_f64();
        let path = Self::path_for(out);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// `argv` with the value of `--out` replaced.
pub fn with_out(argv: &[String], out: &Path) -> Vec<String> {
    let out = out.to_string_lossy().into_owned();
    let mut result = Vec::with_capacity(argv.len());
    let mut iter = argv.iter();
    while let Some(arg) = iter.next() {
        if arg == "--out" {
            result.push(arg.clone());
            iter.next();
            result.push(out.clone());
        } else if arg.starts_with("--out=") {
            result.push(format!("--out={out}"));
        } else {
            result.push(arg.clone());
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_is_replaced_in_both_spellings() {
        let argv: Vec<String> = ["moirai", "synth", "--out", "a", "--n", "3"].map(String::from).to_vec();
        assert_eq!(with_out(&argv, Path::new("b"))[3], "b");
        let argv: Vec<String> = ["moirai", "synth", "--out=a"].map(String::from).to_vec();
        assert_eq!(with_out(&argv, Path::new("b"))[2], "--out=b");
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(RunManifest::path_for(Path::new("/x/y.ckpt")), PathBuf::from("/x/y.ckpt.manifest.json"));
    }
}
