use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub label: usize,
    pub text: String,
}

/// Labelled text records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, num_classes: usize, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset has no records".into()));
        }
        if let Some(r) = records.iter().find(|r| r.label >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {num_classes} classes",
                r.label
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            num_classes,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Seeded split into `(first, second)` where `second` holds `fraction` of the records.
    pub fn split_off(&self, fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let n_second = ((self.len() as f64) * fraction).round() as usize;
        if n_second == 0 || n_second >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {fraction} of {} records",
                self.len()
            )));
        }
        let pick = |ids: &[usize]| ids.iter().map(|&i| self.records[i].clone()).collect::<Vec<_>>();
        let second = pick(&idx[..n_second]);
        let first = pick(&idx[n_second..]);
        Ok((
            Dataset::new(format!("{}-fit", self.name), Split::Train, self.num_classes, first)?,
            Dataset::new(format!("{}-val", self.name), Split::Test, self.num_classes, second)?,
        ))
    }
}

/// Reads a `label,text` CSV (header required, RFC 4180 quoting).
pub fn load_csv(path: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "label" || &headers[1] != "text" {
        return Err(csv_err(1, format!("expected header `label,text`, got {headers:?}")));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 2 {
            return Err(csv_err(line, format!("expected 2 fields, got {}", row.len())));
        }
        let label: usize = row[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(line, format!("label {:?} is not a non-negative integer", &row[0])))?;
        if label >= num_classes {
            return Err(csv_err(
                line,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        records.push(Record {
            label,
            text: row[1].to_string(),
        });
    }
    if records.is_empty() {
        return Err(csv_err(1, "no records".into()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, split, num_classes, records)
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    writer.write_record(["label", "text"]).map_err(io)?;
    for r in &dataset.records {
        writer.write_record([r.label.to_string().as_str(), r.text.as_str()]).map_err(io)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write("label,text\n0,\"hello, world\"\n1,plain\n2,\"she said \"\"hi\"\"\"\n");
        let ds = load_csv(f.path(), 3, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records[0].text, "hello, world");
        assert_eq!(ds.records[2].text, "she said \"hi\"");
    }

    #[test]
    fn label_out_of_range_names_line() {
        let f = write("label,text\n0,a\n1,b\n3,c\n");
        let err = load_csv(f.path(), 3, Split::Train).unwrap_err();
        match err {
            Error::Csv { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("out of range"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let f = write("label,text\n0,a\nx,b\n");
        let err = load_csv(f.path(), 2, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let f = write("label,text\n0,a\n1,b,extra\n");
        assert!(matches!(load_csv(f.path(), 2, Split::Train), Err(Error::Csv { line: 3, .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = Dataset::new(
            "rt",
            Split::Test,
            2,
            vec![
                Record { label: 1, text: "commas, \"quotes\"\nand newlines".into() },
                Record { label: 0, text: "ünïcödé".into() },
            ],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let back = load_csv(f.path(), 2, Split::Test).unwrap();
        assert_eq!(back.records, ds.records);
    }
}
