use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Feature vectors with integer class labels and optional subject ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Vec<usize>,
    subjects: Option<Vec<String>>,
    class_names: Vec<String>,
    feature_names: Vec<String>,
}

impl FeatureDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        subjects: Option<Vec<String>>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let feature_names = (0..features.cols()).map(|i| format!("f{i}")).collect();
        Self::with_feature_names(features, labels, subjects, class_names, feature_names)
    }

    pub fn with_feature_names(
        features: Matrix,
        labels: Vec<usize>,
        subjects: Option<Vec<String>>,
        class_names: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "FeatureDataset",
                features.rows(),
                labels.len(),
            ));
        }
        if let Some(s) = &subjects {
            if s.len() != labels.len() {
                return Err(Error::shape(
                    "FeatureDataset subjects",
                    labels.len(),
                    s.len(),
                ));
            }
        }
        if feature_names.len() != features.cols() {
            return Err(Error::shape(
                "FeatureDataset feature names",
                features.cols(),
                feature_names.len(),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::shape(
                "FeatureDataset labels",
                format!("label < {}", class_names.len()),
                l,
            ));
        }
        if let Some((index, value)) = features.first_non_finite() {
            return Err(Error::NonFinite {
                what: "feature",
                index,
                value,
            });
        }
        Ok(Self {
            features,
            labels,
            subjects,
            class_names,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub(crate) fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> Option<&[String]> {
        self.subjects.as_deref()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Row indices holding class `class`, ascending.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    /// Samples at `indices` in that order; class and feature names are kept.
    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: self
                .subjects
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i].clone()).collect()),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Column mapping for feature CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub label_column: String,
    /// `None` picks up a column named `subject` when present.
    pub subject_column: Option<String>,
    /// `None` uses every column except label and subject.
    pub feature_columns: Option<Vec<String>>,
    /// Fixes class ids to this order; labels outside it are rejected.
    pub class_names: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            subject_column: None,
            feature_columns: None,
            class_names: None,
        }
    }
}

/// Numeric names sort numerically, everything else lexicographically.
fn sort_class_names(names: BTreeSet<String>) -> Vec<String> {
    let mut names: Vec<String> = names.into_iter().collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap_or_default());
    }
    names
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_owned(),
                column: name.to_owned(),
            })
    };
    let label_idx = column(&schema.label_column)?;
    let subject_idx = match &schema.subject_column {
        Some(name) => Some(column(name)?),
        None => headers.iter().position(|h| h == "subject"),
    };
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| column(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| i != label_idx && Some(i) != subject_idx)
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut subjects = subject_idx.map(|_| Vec::new());
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for &i in &feature_idx {
            let v: f64 = record[i].parse().map_err(|_| {
                parse_err(
                    line,
                    format!("column `{}`: `{}` is not a number", &headers[i], &record[i]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column `{}`: non-finite value", &headers[i]),
                ));
            }
            values.push(v);
        }
        let label = &record[label_idx];
        if label.is_empty() {
            return Err(parse_err(line, "empty label".into()));
        }
        raw_labels.push((line, label.to_owned()));
        if let (Some(s), Some(i)) = (subjects.as_mut(), subject_idx) {
            s.push(record[i].to_owned());
        }
    }

    let class_names = match &schema.class_names {
        Some(names) => names.clone(),
        None => sort_class_names(raw_labels.iter().map(|(_, l)| l.clone()).collect()),
    };
    let labels = raw_labels
        .iter()
        .map(|(line, l)| {
            class_names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| parse_err(*line, format!("unknown label `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = Matrix::from_vec(labels.len(), feature_idx.len(), values)?;
    let feature_names = feature_idx.iter().map(|&i| headers[i].to_owned()).collect();
    FeatureDataset::with_feature_names(features, labels, subjects, class_names, feature_names)
}

/// Writes `feature columns…,label[,subject]` with class names as labels.
pub fn write_csv(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    write_records(dataset, &mut writer)
}

pub fn write_records<W: std::io::Write>(
    dataset: &FeatureDataset,
    writer: &mut csv::Writer<W>,
) -> Result<()> {
    let mut header: Vec<&str> = dataset.feature_names.iter().map(String::as_str).collect();
    header.push("label");
    if dataset.subjects.is_some() {
        header.push("subject");
    }
    writer.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset
            .features
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        row.push(dataset.class_names[dataset.labels[i]].clone());
        if let Some(s) = &dataset.subjects {
            row.push(s[i].clone());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("data.csv");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        path
    }

    #[test]
    fn loads_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "f0,f1,f2,label\n1,2,3,walk\n4.5,-1e-3,0,sit\n");
        let ds = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 3));
        assert_eq!(ds.class_names(), &["sit".to_owned(), "walk".to_owned()]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert!(ds.subjects().is_none());
    }

    #[test]
    fn missing_label_column_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "f0,f1,class\n1,2,a\n");
        match load_csv(&path, &CsvSchema::default()) {
            Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "label"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = write_file(&dir, "f0,f1,label\n1,2,a\n1,a\n");
        assert!(matches!(
            load_csv(&ragged, &CsvSchema::default()),
            Err(Error::Parse { line: 3, .. })
        ));
        let text = write_file(&dir, "f0,f1,label\n1,x,a\n");
        assert!(matches!(
            load_csv(&text, &CsvSchema::default()),
            Err(Error::Parse { line: 2, .. })
        ));
        let schema = CsvSchema {
            class_names: Some(vec!["a".into()]),
            ..CsvSchema::default()
        };
        let unknown = write_file(&dir, "f0,label\n1,a\n2,b\n");
        match load_csv(&unknown, &schema) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("unknown label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subject_column_and_numeric_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "f0,label,subject\n1,10,p1\n2,2,p2\n3,10,p1\n");
        let ds = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(ds.class_names(), &["2".to_owned(), "10".to_owned()]);
        assert_eq!(ds.subjects().unwrap(), &["p1", "p2", "p1"]);
        assert_eq!(ds.dim(), 1);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let features = Matrix::from_rows(&[[0.1, -2.5], [3.0, 1e-7], [0.0, 7.25]]).unwrap();
        let ds = FeatureDataset::new(
            features,
            vec![1, 0, 1],
            Some(vec!["a".into(), "b".into(), "a".into()]),
            vec!["0".into(), "1".into()],
        )
        .unwrap();
        let path = dir.path().join("rt.csv");
        write_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path, &CsvSchema::default()).unwrap(), ds);
    }
}
