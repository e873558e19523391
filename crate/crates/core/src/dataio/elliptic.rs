//! Elliptic-layout ingestion and the flat dataset CSV.
//!
//! Features file: no header, `txId,f1,...,fd`. Classes file: header row, then
//! `txId,class` with class `1` (illicit), `2` (licit) or `unknown`. Edges file:
//! header row, then `txId1,txId2`; only counted.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, Label, TransactionRecord};
use crate::error::{Error, Result};

/// Result of reading an Elliptic-layout dataset.
#[derive(Debug, Clone)]
pub struct EllipticIngest {
    pub dataset: Dataset,
    /// Number of edges in the optional edge list.
    pub edge_count: Option<usize>,
    /// Class rows whose id has no feature row.
    pub orphan_class_rows: usize,
}

fn reader(path: &Path, has_headers: bool) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_error(path: &Path, line: u64, message: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn ingest_elliptic(features: &Path, classes: &Path, edges: Option<&Path>) -> Result<EllipticIngest> {
    let mut class_of: HashMap<String, Label> = HashMap::new();
    for rec in reader(classes, true)?.records() {
        let rec = rec.map_err(|e| parse_error(classes, 0, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(parse_error(classes, line, format!("expected 2 columns, found {}", rec.len())));
        }
        let label = match &rec[1] {
            "1" => Label::Illicit,
            "2" => Label::Licit,
            "unknown" => Label::Unknown,
            other => return Err(parse_error(classes, line, format!("unknown class `{other}`"))),
        };
        if class_of.insert(rec[0].to_string(), label).is_some() {
            return Err(parse_error(classes, line, format!("duplicate id `{}`", &rec[0])));
        }
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut width = None;
    for rec in reader(features, false)?.records() {
        let rec = rec.map_err(|e| parse_error(features, 0, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() < 2 {
            return Err(parse_error(features, line, "row has no feature columns".into()));
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(parse_error(
                features,
                line,
                format!("ragged row: {} feature columns, expected {}", rec.len() - 1, w - 1),
            ));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_error(features, line, format!("duplicate id `{id}`")));
        }
        let mut values = Vec::with_capacity(w - 1);
        for (col, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                parse_error(features, line, format!("column {}: non-numeric feature `{field}`", col + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_error(features, line, format!("column {}: non-finite feature", col + 1)));
            }
            values.push(v);
        }
        let label = class_of.get(&id).copied().unwrap_or(Label::Unknown);
        records.push(TransactionRecord {
            id,
            features: values,
            label,
        });
    }
    let orphan_class_rows = class_of.keys().filter(|k| !seen.contains(*k)).count();

    let edge_count = match edges {
        Some(path) => {
            let mut n = 0;
            for rec in reader(path, true)?.records() {
                let rec = rec.map_err(|e| parse_error(path, 0, e.to_string()))?;
                if rec.len() != 2 {
                    return Err(parse_error(
                        path,
                        line_of(&rec),
                        format!("expected 2 columns, found {}", rec.len()),
                    ));
                }
                n += 1;
            }
            Some(n)
        }
        None => None,
    };

    Ok(EllipticIngest {
        dataset: Dataset::new(records)?,
        edge_count,
        orphan_class_rows,
    })
}

/// Writes `dataset` as an Elliptic-layout features/classes pair.
pub fn write_elliptic(dataset: &Dataset, features: &Path, classes: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(features)?);
    for r in dataset.records() {
        write!(f, "{}", r.id)?;
        for v in &r.features {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    let mut c = BufWriter::new(File::create(classes)?);
    writeln!(c, "txId,class")?;
    for r in dataset.records() {
        let class = match r.label {
            Label::Illicit => "1",
            Label::Licit => "2",
            Label::Unknown => "unknown",
        };
        writeln!(c, "{},{class}", r.id)?;
    }
    c.flush()?;
    Ok(())
}

/// Writes the flat layout `id,label,f0..f{d-1}`.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id,label")?;
    for j in 0..dataset.dim() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for r in dataset.records() {
        write!(w, "{},{}", r.id, r.label)?;
        for v in &r.features {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = reader(path, true)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(parse_error(path, 1, "expected header `id,label,f0,...`".into()));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_error(path, 0, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("ragged row: {} columns, expected {}", rec.len(), header.len()),
            ));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_error(path, line, format!("duplicate id `{id}`")));
        }
        let label: Label = rec[1].parse().map_err(|e: Error| parse_error(path, line, e.to_string()))?;
        let features = rec
            .iter()
            .enumerate()
            .skip(2)
            .map(|(col, field)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_error(path, line, format!("column {}: bad feature `{field}`", col + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(TransactionRecord { id, features, label });
    }
    Dataset::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn row(id: &str, d: usize, base: f64) -> String {
        let mut s = id.to_string();
        for j in 0..d {
            s.push_str(&format!(",{}", base + j as f64 * 0.5));
        }
        s.push('\n');
        s
    }

    #[test]
    fn three_rows_with_166_features() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = ["a", "b", "c"].iter().map(|id| row(id, 166, 1.0)).collect();
        let f = write(dir.path(), "features.csv", &body);
        let c = write(dir.path(), "classes.csv", "txId,class\na,1\nb,2\nc,unknown\n");
        let out = ingest_elliptic(&f, &c, None).unwrap();
        assert_eq!(out.dataset.len(), 3);
        assert_eq!(out.dataset.dim(), 166);
        let labels: Vec<_> = out.dataset.labels().collect();
        assert_eq!(labels, vec![Label::Illicit, Label::Licit, Label::Unknown]);
    }

    #[test]
    fn missing_class_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let body = row("1", 4, 0.0) + &row("2", 4, 1.0);
        let f = write(dir.path(), "features.csv", &body);
        let c = write(dir.path(), "classes.csv", "txId,class\r\n1,1\r\n");
        let out = ingest_elliptic(&f, &c, None).unwrap();
        assert_eq!(out.dataset.records()[1].label, Label::Unknown);
    }

    #[test]
    fn ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = row("a", 166, 0.0) + &row("b", 165, 0.0) + &row("c", 166, 0.0);
        let f = write(dir.path(), "features.csv", &body);
        let c = write(dir.path(), "classes.csv", "txId,class\n");
        let err = ingest_elliptic(&f, &c, None).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("ragged"), "{err}");
    }

    #[test]
    fn duplicate_and_non_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "classes.csv", "txId,class\n");
        let f = write(dir.path(), "dup.csv", &(row("a", 3, 0.0) + &row("a", 3, 0.0)));
        let err = ingest_elliptic(&f, &c, None).unwrap_err().to_string();
        assert!(err.contains("duplicate id"), "{err}");
        let f = write(dir.path(), "nan.csv", "a,1,2,3\nb,1,x,3\n");
        let err = ingest_elliptic(&f, &c, None).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("column 3"), "{err}");
    }

    #[test]
    fn edges_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "features.csv", &(row("a", 2, 0.0) + &row("b", 2, 1.0)));
        let c = write(dir.path(), "classes.csv", "txId,class\n");
        let e = write(dir.path(), "edges.csv", "txId1,txId2\na,b\nb,a\nz,a\n");
        let out = ingest_elliptic(&f, &c, Some(&e)).unwrap();
        assert_eq!(out.edge_count, Some(3));
    }

    #[test]
    fn flat_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(vec![
            TransactionRecord {
                id: "x".into(),
                features: vec![0.1, -2.5e-17],
                label: Label::Illicit,
            },
            TransactionRecord {
                id: "y".into(),
                features: vec![1.0 / 3.0, 7.0],
                label: Label::Unknown,
            },
        ])
        .unwrap();
        let p = dir.path().join("d.csv");
        write_dataset_csv(&ds, &p).unwrap();
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("id,label,f0,f1\n"));
        assert_eq!(read_dataset_csv(&p).unwrap(), ds);
    }
}
