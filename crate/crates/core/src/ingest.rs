//! Loading norm datasets into validated `Norm` records, with an adapter for
//! NormAd-shaped tables, plus canonical JSONL output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::IngestError;
use crate::taxonomy::{validate_labels, Norm, TaxonomyLabels};
use crate::util::{short_hash, string_enum};

string_enum! {
    /// Supported dataset file shapes.
    DatasetFormat {
        CanonicalJsonLines => "canonical_json_lines",
        DelimitedTable => "delimited_table",
        NormAdTable => "normad_table",
    }
}

/// Where and how to read one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Source column name -> norm field name ("id", "text",
    /// "cultural_context", "source"). Required for delimited tables; merged
    /// over built-in defaults for NormAd tables.
    #[serde(default)]
    pub field_map: BTreeMap<String, String>,
}

impl DatasetDescriptor {
    pub fn new(path: impl Into<PathBuf>, format: DatasetFormat) -> Self {
        DatasetDescriptor {
            path: path.into(),
            format,
            field_map: BTreeMap::new(),
        }
    }

    /// Column mapping as published for the NormAd release.
    fn normad_defaults() -> BTreeMap<String, String> {
        [
            ("Rule-of-Thumb", "text"),
            ("Country", "cultural_context"),
            ("ID", "id"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    fn effective_field_map(&self) -> BTreeMap<String, String> {
        match self.format {
            DatasetFormat::NormAdTable => {
                let mut map = Self::normad_defaults();
                for (k, v) in &self.field_map {
                    map.insert(k.clone(), v.clone());
                }
                map
            }
            _ => self.field_map.clone(),
        }
    }
}

/// One dropped source record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarning {
    /// 1-based line (JSONL) or data-row (tables) number.
    pub line: usize,
    pub message: String,
}

/// Result of loading a dataset: the valid records plus one warning per
/// dropped record, so valid + warnings always accounts for every source row.
#[derive(Debug, Clone, Default)]
pub struct LoadOutcome {
    pub norms: Vec<Norm>,
    pub warnings: Vec<LoadWarning>,
}

fn dataset_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Deterministic norm id from the provenance string.
pub fn norm_id_for_source(source: &str) -> String {
    format!("n{}", short_hash(source))
}

fn nfc(text: &str) -> String {
    text.nfc().collect()
}

#[derive(Debug, Deserialize)]
struct CanonicalRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    cultural_context: String,
    #[serde(default)]
    labels: Option<TaxonomyLabels>,
    #[serde(default)]
    source: Option<String>,
}

/// Loads a dataset, dropping invalid records with per-record warnings.
pub fn load_norms(descriptor: &DatasetDescriptor) -> Result<LoadOutcome, IngestError> {
    let raw = fs::read_to_string(&descriptor.path).map_err(|e| IngestError::Unreadable {
        path: descriptor.path.clone(),
        message: e.to_string(),
    })?;
    let stem = dataset_stem(&descriptor.path);
    let mut outcome = match descriptor.format {
        DatasetFormat::CanonicalJsonLines => load_canonical(&raw, &stem),
        DatasetFormat::DelimitedTable | DatasetFormat::NormAdTable => {
            load_table(&raw, &stem, descriptor)?
        }
    };
    dedupe_ids(&mut outcome);
    if outcome.norms.is_empty() {
        return Err(IngestError::ZeroValidRecords {
            path: descriptor.path.clone(),
        });
    }
    Ok(outcome)
}

fn dedupe_ids(outcome: &mut LoadOutcome) {
    let mut seen = BTreeSet::new();
    let mut kept = Vec::with_capacity(outcome.norms.len());
    for norm in outcome.norms.drain(..) {
        if seen.insert(norm.id.clone()) {
            kept.push(norm);
        } else {
            outcome.warnings.push(LoadWarning {
                line: 0,
                message: format!("duplicate id `{}` dropped", norm.id),
            });
        }
    }
    outcome.norms = kept;
}

fn finish_record(
    id: Option<String>,
    text: String,
    cultural_context: String,
    labels: Option<TaxonomyLabels>,
    source: Option<String>,
    stem: &str,
    row: usize,
) -> Result<Norm, String> {
    let text = nfc(text.trim());
    if text.is_empty() {
        return Err("text is empty".to_string());
    }
    let cultural_context = cultural_context.trim().to_string();
    if cultural_context.is_empty() {
        return Err("cultural_context is empty".to_string());
    }
    if let Some(labels) = &labels {
        let validation = validate_labels(labels);
        if !validation.is_ok() {
            return Err(format!(
                "labels invalid: {}",
                validation
                    .violations
                    .iter()
                    .map(|v| v.message.clone())
                    .collect::<Vec<_>>()
                    .join("; ")
            ));
        }
    }
    let record_key = id.clone().filter(|s| !s.trim().is_empty());
    let source = source
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| {
            format!(
                "{stem}#{}",
                record_key.clone().unwrap_or_else(|| format!("row{row}"))
            )
        });
    let id = record_key.unwrap_or_else(|| norm_id_for_source(&source));
    Ok(Norm {
        id,
        text,
        cultural_context,
        labels,
        source,
    })
}

fn load_canonical(raw: &str, stem: &str) -> LoadOutcome {
    let mut outcome = LoadOutcome::default();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CanonicalRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                outcome.warnings.push(LoadWarning {
                    line: line_no,
                    message: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        match finish_record(
            record.id,
            record.text,
            record.cultural_context,
            record.labels,
            record.source,
            stem,
            line_no,
        ) {
            Ok(norm) => outcome.norms.push(norm),
            Err(message) => outcome.warnings.push(LoadWarning {
                line: line_no,
                message,
            }),
        }
    }
    outcome
}

fn load_table(
    raw: &str,
    stem: &str,
    descriptor: &DatasetDescriptor,
) -> Result<LoadOutcome, IngestError> {
    let field_map = descriptor.effective_field_map();
    let maps_to = |field: &str| {
        field_map
            .iter()
            .find(|(_, v)| v.as_str() == field)
            .map(|(k, _)| k.clone())
    };
    for required in ["text", "cultural_context"] {
        if maps_to(required).is_none() {
            return Err(IngestError::IncompleteFieldMap(required.to_string()));
        }
    }

    let delimiter = if raw.lines().next().unwrap_or("").contains('\t') {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| IngestError::UnrecognizedFormat(format!("no header row: {e}")))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let text_col = column(&maps_to("text").unwrap()).ok_or_else(|| {
        IngestError::UnrecognizedFormat(format!(
            "column `{}` not found in header",
            maps_to("text").unwrap()
        ))
    })?;
    let context_col = column(&maps_to("cultural_context").unwrap()).ok_or_else(|| {
        IngestError::UnrecognizedFormat(format!(
            "column `{}` not found in header",
            maps_to("cultural_context").unwrap()
        ))
    })?;
    let id_col = maps_to("id").and_then(|c| column(&c));
    let source_col = maps_to("source").and_then(|c| column(&c));

    let mut outcome = LoadOutcome::default();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                outcome.warnings.push(LoadWarning {
                    line: row,
                    message: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        let get = |col: usize| record.get(col).unwrap_or("").to_string();
        match finish_record(
            id_col.map(get).filter(|s| !s.trim().is_empty()),
            get(text_col),
            get(context_col),
            None,
            source_col.map(get),
            stem,
            row,
        ) {
            Ok(norm) => outcome.norms.push(norm),
            Err(message) => outcome.warnings.push(LoadWarning { line: row, message }),
        }
    }
    Ok(outcome)
}

/// Writes norms as canonical line-delimited JSON. Refuses empty lists and
/// duplicate ids.
pub fn write_norms(norms: &[Norm], path: &Path) -> Result<usize, IngestError> {
    if norms.is_empty() {
        return Err(IngestError::EmptyWrite);
    }
    let mut seen = BTreeSet::new();
    for norm in norms {
        if !seen.insert(&norm.id) {
            return Err(IngestError::DuplicateId(norm.id.clone()));
        }
    }
    let mut file = fs::File::create(path).map_err(|e| IngestError::Unwritable {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for norm in norms {
        let line = serde_json::to_string(norm).map_err(|e| IngestError::Unwritable {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writeln!(file, "{line}").map_err(|e| IngestError::Unwritable {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    Ok(norms.len())
}
