//! Line-delimited JSON datasets: one record per non-blank line.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::SlotTriple;
use crate::ontology::Ontology;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("dataset contains no records")]
    Empty,
    #[error("record `{record}` (line {line}): gold intent `{intent}` is not in the ontology")]
    UnresolvedGoldIntent { record: String, line: usize, intent: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub query: String,
    pub gold_intents: Vec<String>,
    #[serde(default)]
    pub gold_slots: Vec<SlotTriple>,
}

impl DatasetRecord {
    pub fn gold_set(&self) -> BTreeSet<String> {
        self.gold_intents.iter().cloned().collect()
    }

    pub fn slot_set(&self) -> BTreeSet<SlotTriple> {
        self.gold_slots.iter().cloned().collect()
    }
}

pub fn read_records<R: Read>(source: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Line { line: line_no, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Line { line: line_no, reason: e.to_string() })?;
        let invalid = |reason: &str| DatasetError::Line { line: line_no, reason: reason.to_string() };
        if rec.id.trim().is_empty() {
            return Err(invalid("`id` is empty"));
        }
        if rec.query.trim().is_empty() {
            return Err(invalid("`query` is empty"));
        }
        if rec.gold_intents.is_empty() {
            return Err(invalid("`gold_intents` is empty"));
        }
        if rec.gold_intents.iter().collect::<BTreeSet<_>>().len() != rec.gold_intents.len() {
            return Err(invalid("`gold_intents` has duplicates"));
        }
        if rec.slot_set().len() != rec.gold_slots.len() {
            return Err(invalid("`gold_slots` has duplicates"));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(DatasetError::Line { line: line_no, reason: format!("duplicate id `{}`", rec.id) });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(records)
}

pub fn ingest_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    read_records(file)
}

/// Checks every gold intent against the ontology. Line numbers assume the
/// records came from a file without blank lines.
pub fn check_gold(o: &Ontology, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    for (i, rec) in records.iter().enumerate() {
        for intent in &rec.gold_intents {
            if !o.contains(intent) || o.is_root(intent) {
                return Err(DatasetError::UnresolvedGoldIntent {
                    record: rec.id.clone(),
                    line: i + 1,
                    intent: intent.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn write_records<W: Write>(mut sink: W, records: &[DatasetRecord]) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut sink, rec)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(records: &[DatasetRecord]) -> String {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}
