use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};

/// Appends one JSON object per line to `<out>/run.jsonl`.
pub struct RunLog {
    file: Option<File>,
    command: String,
    config_hash: String,
    seed: u64,
    start: Instant,
}

impl RunLog {
    pub fn open(out: &Path, command: &str, config_hash: &str, seed: u64) -> Self {
        let file = fs::create_dir_all(out)
            .and_then(|_| OpenOptions::new().create(true).append(true).open(out.join("run.jsonl")))
            .map_err(|e| log::warn!("run log unavailable: {e}"))
            .ok();
        Self {
            file,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            start: Instant::now(),
        }
    }

    pub fn event(&mut self, event: &str, fields: Value) {
        let mut obj = Map::new();
        obj.insert("event".into(), json!(event));
        obj.insert("command".into(), json!(self.command));
        obj.insert("config_hash".into(), json!(self.config_hash));
        obj.insert("seed".into(), json!(self.seed));
        obj.insert("elapsed_ms".into(), json!(self.start.elapsed().as_millis() as u64));
        if let Value::Object(extra) = fields {
            obj.extend(extra);
        }
        if let Some(f) = self.file.as_mut() {
            let line = Value::Object(obj).to_string();
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("run log write failed: {e}");
            }
        }
    }

    pub fn losses(&mut self, stage: &str, initial: f64, epochs: &[f64]) {
        self.event("loss", json!({ "stage": stage, "epoch": 0, "loss": initial }));
        for (i, l) in epochs.iter().enumerate() {
            self.event("loss", json!({ "stage": stage, "epoch": i + 1, "loss": l }));
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.event("artifact", json!({ "path": path.display().to_string() }));
    }
}
