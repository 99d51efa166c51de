//! Dataset, JSON and CSV files.
//!
//! Dataset CSV header: `id,p_0,...,p_{K-1},label[,group.<name>...]`. A group
//! cell holds the value (`A`) or `name=value` (`site=A`); an empty cell means
//! the record lacks that attribute. Dataset JSON is
//! `{"class_names": [...], "taxonomy": {...}?, "records": [...]}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use cpaudit_core::data::default_class_names;
use cpaudit_core::{LabeledDataset, PredictionRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// From the file extension; anything other than `.json` is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }

    pub fn resolve(explicit: Option<Format>, path: &Path) -> Format {
        explicit.unwrap_or_else(|| Format::from_path(path))
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn json_error(path: &Path, e: serde_json::Error) -> CliError {
    if e.is_io() {
        CliError::io(path, e.into())
    } else {
        CliError::schema(path, e.line() as u64, e.to_string())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::schema(path, line, format!("{other:?}")),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| json_error(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| json_error(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// One CSV row per item, header from the field names.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_dataset(path: &Path, format: Option<Format>) -> Result<LabeledDataset> {
    match Format::resolve(format, path) {
        Format::Json => read_json(path),
        Format::Csv => parse_dataset_csv(open(path)?, path),
    }
}

pub fn write_dataset(path: &Path, ds: &LabeledDataset, format: Option<Format>) -> Result<()> {
    match Format::resolve(format, path) {
        Format::Json => write_json(path, ds),
        Format::Csv => {
            let mut w = create(path)?;
            write_dataset_csv(&mut w, ds).map_err(|e| csv_error(path, e))?;
            w.flush().map_err(|e| CliError::io(path, e))
        }
    }
}

struct Columns {
    k: usize,
    groups: Vec<String>,
}

fn parse_header(header: &csv::StringRecord, path: &Path) -> Result<Columns> {
    let bad = |msg: String| CliError::schema(path, 1, msg);
    let fields: Vec<&str> = header.iter().collect();
    if fields.first() != Some(&"id") {
        return Err(bad("first column must be `id`".into()));
    }
    let k = fields[1..].iter().take_while(|f| f.starts_with("p_")).count();
    for (i, f) in fields[1..=k].iter().enumerate() {
        if *f != format!("p_{i}") {
            return Err(bad(format!("expected column p_{i}, found `{f}`")));
        }
    }
    if fields.get(k + 1) != Some(&"label") {
        return Err(bad("expected a `label` column after the probability columns".into()));
    }
    let mut groups = Vec::new();
    for f in &fields[k + 2..] {
        match f.strip_prefix("group.") {
            Some(name) if !name.is_empty() => groups.push(name.to_string()),
            _ => return Err(bad(format!("unexpected column `{f}`; extra columns must be `group.<name>`"))),
        }
    }
    Ok(Columns { k, groups })
}

/// Parses a dataset CSV. Errors name the offending line.
pub fn parse_dataset_csv<R: Read>(mut reader: R, path: &Path) -> Result<LabeledDataset> {
    let mut text = Vec::new();
    reader.read_to_end(&mut text).map_err(|e| CliError::io(path, e))?;
    // the csv reader does not count skipped blank lines, so lines come from
    // byte offsets instead
    let newlines: Vec<u64> = newline_offsets(&text);
    let line_at = |pos: Option<&csv::Position>| {
        pos.map_or(0, |p| {
            let start = p.byte() as usize;
            let skip = text[start.min(text.len())..].iter().take_while(|b| matches!(b, b'\n' | b'\r')).count();
            newlines.partition_point(|&n| n < (start + skip) as u64) as u64 + 1
        })
    };
    let located = |e: csv::Error| {
        let line = line_at(e.position());
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => CliError::schema(path, line, format!("{other:?}")),
        }
    };

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_slice());
    let header = rdr.headers().map_err(located)?.clone();
    let cols = parse_header(&header, path)?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(located)?;
        let line = line_at(row.position());
        let bad = |msg: String| CliError::schema(path, line, msg);
        if row.len() != header.len() {
            return Err(bad(format!("{} fields, header has {}", row.len(), header.len())));
        }
        let probs = (0..cols.k)
            .map(|i| {
                row[i + 1]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("p_{i} `{}` is not a number", &row[i + 1])))
            })
            .collect::<Result<Vec<_>>>()?;
        let label_cell = row[cols.k + 1].trim();
        let label = label_cell
            .parse::<usize>()
            .map_err(|_| bad(format!("label `{label_cell}` is not a class index")))?;
        let mut groups = BTreeMap::new();
        for (j, name) in cols.groups.iter().enumerate() {
            let cell = row[cols.k + 2 + j].trim();
            let value = cell
                .strip_prefix(name.as_str())
                .and_then(|rest| rest.strip_prefix('='))
                .unwrap_or(cell);
            if !value.is_empty() {
                groups.insert(name.clone(), value.to_string());
            }
        }
        let record = PredictionRecord::new(&row[0], probs, label, groups).map_err(|e| bad(e.to_string()))?;
        records.push(record);
    }
    LabeledDataset::new(records, default_class_names(cols.k), None).map_err(Into::into)
}

fn newline_offsets(text: &[u8]) -> Vec<u64> {
    text.iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .map(|(i, _)| i as u64)
        .collect()
}

pub fn write_dataset_csv<W: Write>(out: W, ds: &LabeledDataset) -> csv::Result<()> {
    let attrs: BTreeSet<&str> = ds
        .records()
        .iter()
        .flat_map(|r| r.groups().keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((0..ds.num_classes()).map(|i| format!("p_{i}")));
    header.push("label".to_string());
    header.extend(attrs.iter().map(|a| format!("group.{a}")));
    w.write_record(&header)?;
    for r in ds.records() {
        let mut row = vec![r.id().to_string()];
        row.extend(r.probs().iter().map(f64::to_string));
        row.push(r.label().to_string());
        row.extend(attrs.iter().map(|a| r.group(a).unwrap_or("").to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `path` with `suffix` appended to the full file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}
