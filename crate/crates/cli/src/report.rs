//! Merges run summaries into a single CSV table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::Value;
use voxfuse::io::{read_to_string, write_atomic};
use voxfuse::Error;

use crate::{Failure, Outcome};

/// Nested sections that do not reduce to one row of scalars.
const SKIPPED: [&str; 2] = ["per_class", "results"];

struct Row {
    source: String,
    keys: BTreeMap<String, String>,
    values: BTreeMap<String, String>,
}

pub fn run(inputs: &[PathBuf], out: &Path) -> Outcome {
    let mut rows = Vec::with_capacity(inputs.len());
    let mut schema: Option<(u64, &Path)> = None;
    for path in inputs {
        let (row, version) = if path.extension().is_some_and(|e| e == "csv") {
            (history_row(path)?, None)
        } else {
            json_row(path)?
        };
        if let Some(v) = version {
            match schema {
                Some((first, from)) if first != v => {
                    return Err(Failure::Validation(format!(
                        "field `schema_version` disagrees: {} has {first}, {} has {v}",
                        from.display(),
                        path.display()
                    )));
                }
                None => schema = Some((v, path)),
                _ => {}
            }
        }
        rows.push(row);
    }
    let key_cols: BTreeSet<&String> = rows.iter().flat_map(|r| r.keys.keys()).collect();
    let value_cols: BTreeSet<&String> = rows.iter().flat_map(|r| r.values.keys()).collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("source").chain(key_cols.iter().map(|c| c.as_str())).chain(value_cols.iter().map(|c| c.as_str()));
    w.write_record(header).map_err(csv_err)?;
    for r in &rows {
        let cells = std::iter::once(r.source.as_str())
            .chain(key_cols.iter().map(|c| r.keys.get(*c).map_or("", String::as_str)))
            .chain(value_cols.iter().map(|c| r.values.get(*c).map_or("", String::as_str)));
        w.write_record(cells).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Check(e.to_string()))?;
    write_atomic(out, &bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Check(e.to_string())
}

fn json_row(path: &Path) -> Result<(Row, Option<u64>), Failure> {
    let text = read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::format(path.display().to_string(), "expected a JSON object"))?;
    let version = obj
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format("schema_version", format!("missing or not an integer in {}", path.display())))?;
    let mut keys = BTreeMap::new();
    let mut values = BTreeMap::new();
    for (k, v) in obj {
        if k == "config" {
            flatten("", v, &mut keys);
        } else if k != "schema_version" && !SKIPPED.contains(&k.as_str()) {
            flatten(k, v, &mut values);
        }
    }
    let row = Row {
        source: path.display().to_string(),
        keys,
        values,
    };
    Ok((row, Some(version)))
}

/// A loss history contributes its length and first/last totals.
fn history_row(path: &Path) -> Result<Row, Failure> {
    let field = |m: String| Failure::Validation(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| field(e.to_string()))?;
    let header = r.headers().map_err(|e| field(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["step", "L_Det", "L_KT", "total"] {
        return Err(field("field `header` must be step,L_Det,L_KT,total".into()));
    }
    let mut totals = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| field(e.to_string()))?;
        let t: f64 = rec[3].parse().map_err(|_| field(format!("field `total` is not a number: {}", &rec[3])))?;
        totals.push(t);
    }
    let (first, last) = match (totals.first(), totals.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(field("history has no rows".into())),
    };
    let mut values = BTreeMap::new();
    values.insert("steps".to_string(), (totals.len() - 1).to_string());
    values.insert("initial_loss".to_string(), first.to_string());
    values.insert("final_loss".to_string(), last.to_string());
    values.insert("loss_reduction".to_string(), (1.0 - last / first).to_string());
    Ok(Row {
        source: path.display().to_string(),
        keys: BTreeMap::new(),
        values,
    })
}

/// Scalar leaves of a JSON value as `prefix.key` columns.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&name, v, out);
            }
        }
        Value::Array(_) | Value::Null => {}
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}
