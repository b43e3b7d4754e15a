//! Run manifests: what was run, with which settings, producing which files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Metadata lines are comments, so the manifest itself is a valid config
/// file for re-running the command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub checkpoint_sha256: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# bweda {} run manifest", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "# command: {}", self.command);
        let _ = writeln!(s, "# seed: {}", self.seed);
        let _ = writeln!(
            s,
            "# checkpoint_sha256: {}",
            self.checkpoint_sha256.as_deref().unwrap_or("none")
        );
        for o in &self.outputs {
            let _ = writeln!(s, "# output: {}", o.display());
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::settings::parse_config;

    #[test]
    fn manifest_parses_as_config() {
        let m = RunManifest {
            command: "infer".into(),
            seed: 3,
            checkpoint_sha256: Some("ab".into()),
            outputs: vec!["out/a.rttm".into()],
            config: BTreeMap::from([("tau".to_string(), "0.5".to_string())]),
        };
        let text = m.render();
        assert!(text.contains("# command: infer\n"));
        assert!(text.contains("# output: out/a.rttm\n"));
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, m.config);
    }
}
