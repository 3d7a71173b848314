use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::write_atomic;
use crate::envs::Demo;
use crate::error::{Error, Result};

/// One JSON object per line, in the given order.
pub fn demos_to_jsonl(demos: &[Demo]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for d in demos {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_demos(path: &Path, demos: &[Demo]) -> Result<()> {
    write_atomic(path, &demos_to_jsonl(demos)?)
}

/// Streams a JSONL dataset; errors carry the 1-based line number.
pub fn read_demos(path: &Path) -> Result<Vec<Demo>> {
    let reader = BufReader::new(File::open(path)?);
    let mut demos = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Dataset { line: line_no, detail };
        let demo: Demo = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if demo.obs.len() != demo.act.len() {
            return Err(bad(format!("{} observations but {} actions", demo.obs.len(), demo.act.len())));
        }
        if let (Some(o), Some(a)) = (demo.obs.first(), demo.act.first()) {
            let (od, ad) = shape.get_or_insert((o.len(), a.len()));
            if demo.obs.iter().any(|r| r.len() != *od) || demo.act.iter().any(|r| r.len() != *ad) {
                return Err(bad(format!("rows must have {od} observation and {ad} action values")));
            }
        }
        if demo.obs.iter().chain(&demo.act).flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        demos.push(demo);
    }
    if demos.is_empty() {
        return Err(Error::Dataset { line: 0, detail: format!("{} contains no demos", path.display()) });
    }
    Ok(demos)
}
