//! Stage-level accounting of the input files a run touches.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Access {
    pub stage: String,
    pub path: PathBuf,
}

#[derive(Debug, Default)]
pub struct AccessLog {
    stage: Mutex<String>,
    reads: Mutex<Vec<Access>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&self, stage: &str) {
        *self.stage.lock().expect("access log poisoned") = stage.to_owned();
    }

    pub fn record(&self, path: &Path) {
        let stage = self.stage.lock().expect("access log poisoned").clone();
        self.reads.lock().expect("access log poisoned").push(Access { stage, path: path.to_path_buf() });
    }

    /// Reads in recording order. Parallel readers within a stage may
    /// interleave, so callers compare per-stage sets rather than sequences.
    pub fn reads(&self) -> Vec<Access> {
        self.reads.lock().expect("access log poisoned").clone()
    }
}
