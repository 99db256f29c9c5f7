//! Report text with a reproducibility header.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha1::{Digest, Sha1};

use crate::config::RunConfig;

/// SHA-1 of `bytes` framed the way git frames a blob object.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Report {
    command: String,
    config: String,
    inputs: Vec<(PathBuf, String)>,
    body: String,
}

impl Report {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: serde_json::to_string(cfg).expect("config serializes"),
            inputs: Vec::new(),
            body: String::new(),
        }
    }

    /// Hashes an input file into the header.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs
            .push((path.to_path_buf(), git_blob_sha1(&bytes)));
        Ok(())
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        self.body.push_str(s.as_ref());
        self.body.push('\n');
    }

    pub fn text(&mut self, s: &str) {
        self.body.push_str(s);
        if !s.ends_with('\n') {
            self.body.push('\n');
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# dietcnn {} {}",
            self.command,
            env!("CARGO_PKG_VERSION")
        );
        let _ = writeln!(out, "# config {}", self.config);
        for (path, hash) in &self.inputs {
            let _ = writeln!(out, "# input {} {hash}", path.display());
        }
        out.push_str(&self.body);
        out
    }

    /// Prints the report and, when asked, writes it to `path` as well.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        let text = self.render();
        print!("{text}");
        if let Some(p) = path {
            std::fs::write(p, &text).with_context(|| format!("writing report {}", p.display()))?;
        }
        Ok(())
    }
}
