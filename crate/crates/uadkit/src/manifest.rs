//! Run manifests: a flat `key=value` record written next to every command's
//! primary output, capturing the resolved settings, input/output paths and
//! wall-clock duration so runs can be audited and reproduced.

use crate::config::to_flat_string;
use crate::error::UadError;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Accumulates manifest pairs for one command invocation.
pub struct RunManifest {
    pairs: Vec<(String, String)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = RunManifest {
            pairs: Vec::new(),
            started: Instant::now(),
        };
        m.set("tool", "uadkit");
        m.set("version", env!("CARGO_PKG_VERSION"));
        m.set("command", command);
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        m.set("started_unix", epoch);
        m
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Records the duration and writes the manifest atomically: the content
    /// goes to a temporary sibling first and is renamed into place, so a
    /// manifest on disk is always complete.
    pub fn finish(mut self, path: &Path) -> Result<(), UadError> {
        self.set("duration_ms", self.started.elapsed().as_millis());
        let text = to_flat_string(&self.pairs);
        let tmp = path.with_extension("manifest.tmp");
        let io_err = |source| UadError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(&tmp, text).map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FlatConfig;
    use tempfile::tempdir;

    #[test]
    fn manifest_is_parseable_flat_config() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.manifest");
        let mut m = RunManifest::new("synth");
        m.set("seed", 7);
        m.set("out", "/data/phantoms");
        m.finish(&path).unwrap();
        let cfg = FlatConfig::load(&path).unwrap();
        assert_eq!(cfg.raw("command"), Some("synth"));
        assert_eq!(cfg.raw("seed"), Some("7"));
        assert_eq!(cfg.raw("tool"), Some("uadkit"));
        assert!(cfg.raw("duration_ms").is_some());
        assert!(!path.with_extension("manifest.tmp").exists());
    }
}
