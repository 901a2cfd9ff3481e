use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{ClassificationRecord, Dataset, DetectionRecord, Task};
use crate::error::{Error, Result};

fn at_line(line: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::AtLine {
        line,
        source: Box::new(e),
    }
}

fn parse_object(text: &str, line: usize, expected: Task) -> Result<Value> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line,
        message: "expected a JSON object".into(),
    })?;
    let looks_like = if obj.contains_key("logits") {
        Some(Task::Classification)
    } else if obj.contains_key("predictions") || obj.contains_key("ground_truth") {
        Some(Task::Detection)
    } else {
        None
    };
    match looks_like {
        Some(found) if found != expected => Err(at_line(line)(Error::MixedTask { expected, found })),
        _ => Ok(value),
    }
}

fn from_value<T: serde::de::DeserializeOwned>(value: Value, line: usize) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

/// Parses and validates one classification JSONL line (1-based `line`).
pub fn parse_classification_line(text: &str, line: usize) -> Result<ClassificationRecord> {
    let value = parse_object(text, line, Task::Classification)?;
    from_value::<ClassificationRecord>(value, line)?
        .validate()
        .map_err(at_line(line))
}

/// Parses and validates one detection JSONL line (1-based `line`).
pub fn parse_detection_line(text: &str, line: usize) -> Result<DetectionRecord> {
    let value = parse_object(text, line, Task::Detection)?;
    from_value::<DetectionRecord>(value, line)?
        .validate()
        .map_err(at_line(line))
}

/// Reads a whole JSONL stream of `task` records. Blank lines are skipped.
pub fn read_dataset_from<R: BufRead>(reader: R, task: Task) -> Result<Dataset> {
    let mut cls = Vec::new();
    let mut det = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        match task {
            Task::Classification => cls.push(parse_classification_line(&text, line_no)?),
            Task::Detection => det.push(parse_detection_line(&text, line_no)?),
        }
    }
    Ok(match task {
        Task::Classification => Dataset::Classification(cls),
        Task::Detection => Dataset::Detection(det),
    })
}

pub fn read_dataset(path: &Path, task: Task) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file), task)
}

pub fn write_jsonl_to<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl_to(BufWriter::new(file), items).map_err(|e| Error::io(path, e))
}
