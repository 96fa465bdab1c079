//! Results directory: `<root>/<timestamp>/{config.json, report.json, report.csv, messages.jsonl}`.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dynvfl::federation::report::{write_rows_csv, ResultRow};
use dynvfl::protocol::LogEntry;
use dynvfl::Result;
use serde::Serialize;

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates a fresh directory named after the local time, with a numeric
    /// suffix if that name is taken.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
        let mut path = root.join(&stamp);
        let mut k = 1;
        while path.exists() {
            k += 1;
            path = root.join(format!("{stamp}-{k}"));
        }
        fs::create_dir(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let f = BufWriter::new(fs::File::create(self.path.join(name))?);
        serde_json::to_writer_pretty(f, value)?;
        Ok(())
    }

    pub fn write_rows(&self, name: &str, rows: &[ResultRow]) -> Result<()> {
        write_rows_csv(rows, &self.path.join(name))
    }

    /// Appends one JSON line per message, tagged with `run`.
    pub fn append_messages(&self, run: &str, entries: &[LogEntry]) -> Result<()> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path.join("messages.jsonl"))?;
        let mut w = BufWriter::new(f);
        for e in entries {
            let mut v = serde_json::to_value(e)?;
            v["run"] = serde_json::Value::String(run.to_string());
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}
