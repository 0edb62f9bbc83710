//! Trace and summary files. The trace is JSON lines, appended and flushed
//! one step at a time, so a crash leaves a parseable prefix.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use querykernel_core::trace::TraceStep;

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub struct TraceWriter {
    out: BufWriter<File>,
    path: PathBuf,
    lines: usize,
}

impl TraceWriter {
    /// Create (truncating) `dir/trace.jsonl`, creating `dir` if needed.
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(TRACE_FILE);
        Ok(Self {
            out: BufWriter::new(File::create(&path)?),
            path,
            lines: 0,
        })
    }

    pub fn append(&mut self, step: &TraceStep) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, step)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &serde_json::Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

/// Parse a trace file, stopping at the first incomplete line.
pub fn read_trace(path: &Path) -> io::Result<Vec<TraceStep>> {
    let text = fs::read_to_string(path)?;
    let mut steps = Vec::new();
    for line in text.lines() {
        match serde_json::from_str(line) {
            Ok(step) => steps.push(step),
            Err(_) => break,
        }
    }
    Ok(steps)
}
