//! Operation-domain records, derived model outputs, and the dataset CSV format.
//!
//! The file layout is a single table with header
//! `id,label,logit_0,...,logit_{K-1},feat_0,...,feat_{D-1}`. Unlabeled rows
//! carry `-1` in the label column. Floats are written with Rust's shortest
//! round-trip decimal rendering, so `write(read(f))` reproduces a canonical
//! file byte for byte.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Label column value for records that have not been labeled yet.
pub const UNLABELED: i64 = -1;

/// One input from the operation domain as seen through the trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationRecord {
    pub id: u64,
    /// Last-hidden-layer features.
    pub representation: Vec<f64>,
    /// Pre-softmax class scores.
    pub logits: Vec<f64>,
    pub label: Option<usize>,
}

impl OperationRecord {
    pub fn new(id: u64, representation: Vec<f64>, logits: Vec<f64>) -> Self {
        Self {
            id,
            representation,
            logits,
            label: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }
}

/// What the model itself says about a record.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub original_confidence: f64,
}

/// Index of the largest entry, lowest index on ties. Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Softmax with max-subtraction.
///
/// Components that underflow are floored at the smallest positive normal so
/// every probability stays strictly positive.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::TooFewClasses(logits.len()));
    }
    check_finite(logits)?;
    let max = logits[argmax(logits)];
    let exps: Vec<f64> = logits.iter().map(|&h| (h - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps
        .into_iter()
        .map(|e| (e / total).max(f64::MIN_POSITIVE))
        .collect())
}

pub fn derive_outputs(record: &OperationRecord) -> Result<ModelOutputs> {
    let probabilities = softmax(&record.logits)?;
    let predicted_class = argmax(&record.logits);
    let original_confidence = probabilities[predicted_class];
    Ok(ModelOutputs {
        probabilities,
        predicted_class,
        original_confidence,
    })
}

/// An ordered collection of operation records with their model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<OperationRecord>,
    outputs: Vec<ModelOutputs>,
    feature_dim: usize,
    num_classes: usize,
    positions: HashMap<u64, usize>,
}

impl Dataset {
    /// Validates the records and derives model outputs for each.
    ///
    /// Row numbers in errors are 1-based positions in `records`.
    pub fn new(records: Vec<OperationRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let feature_dim = first.representation.len();
        let num_classes = first.logits.len();
        if feature_dim == 0 {
            return Err(Error::InvalidParameter(
                "representation dimension must be at least 1".into(),
            ));
        }
        if num_classes < 2 {
            return Err(Error::TooFewClasses(num_classes));
        }

        let mut positions = HashMap::with_capacity(records.len());
        let mut outputs = Vec::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            let row = i + 1;
            if record.logits.len() != num_classes {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: num_classes,
                    found: record.logits.len(),
                });
            }
            if record.representation.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: feature_dim,
                    found: record.representation.len(),
                });
            }
            if let Some(label) = record.label {
                if label >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        row,
                        label: label as i64,
                        num_classes,
                    });
                }
            }
            if record.representation.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteField {
                    row,
                    column: "feat".into(),
                });
            }
            if positions.insert(record.id, i).is_some() {
                return Err(Error::DuplicateId { row, id: record.id });
            }
            let out = derive_outputs(record).map_err(|e| match e {
                Error::NonFinite { index } => Error::NonFiniteField {
                    row,
                    column: format!("logit_{index}"),
                },
                other => other,
            })?;
            outputs.push(out);
        }

        Ok(Self {
            records,
            outputs,
            feature_dim,
            num_classes,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[OperationRecord] {
        &self.records
    }

    pub fn outputs(&self) -> &[ModelOutputs] {
        &self.outputs
    }

    pub fn record(&self, position: usize) -> &OperationRecord {
        &self.records[position]
    }

    pub fn output(&self, position: usize) -> &ModelOutputs {
        &self.outputs[position]
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn original_confidences(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.original_confidence).collect()
    }

    pub fn predicted_classes(&self) -> Vec<usize> {
        self.outputs.iter().map(|o| o.predicted_class).collect()
    }

    /// `Some(true)` when the record's label matches the model's prediction.
    pub fn is_correct(&self, position: usize) -> Option<bool> {
        self.records[position]
            .label
            .map(|label| label == self.outputs[position].predicted_class)
    }

    /// Correctness indicators for every record; fails on the first unlabeled one.
    pub fn correctness(&self) -> Result<Vec<bool>> {
        (0..self.len())
            .map(|i| self.is_correct(i).ok_or(Error::Unlabeled(i)))
            .collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.records.iter().filter(|r| r.label.is_some()).count()
    }

    /// Sets a record's label. Labels are immutable: re-attaching the same
    /// value succeeds, a different value is rejected.
    pub fn attach_label(&mut self, id: u64, label: usize) -> Result<()> {
        let position = self.position_of(id).ok_or(Error::UnknownId(id))?;
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                row: position + 1,
                label: label as i64,
                num_classes: self.num_classes,
            });
        }
        let record = &mut self.records[position];
        match record.label {
            Some(existing) if existing != label => Err(Error::LabelConflict {
                id,
                existing,
                requested: label,
            }),
            _ => {
                record.label = Some(label);
                Ok(())
            }
        }
    }

    /// New dataset holding the records at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> Result<Dataset> {
        Dataset::new(positions.iter().map(|&p| self.records[p].clone()).collect())
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> Dataset {
        let mut copy = self.clone();
        for record in &mut copy.records {
            record.label = None;
        }
        copy
    }

    pub fn header(&self) -> String {
        csv_header(self.num_classes, self.feature_dim)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => return Err(Error::MalformedHeader("file is empty".into())),
        };
        let (num_classes, feature_dim) = parse_header(&header)?;
        let width = 2 + num_classes + feature_dim;

        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = i + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: width,
                    found: fields.len(),
                });
            }
            let id: u64 = parse_field(row, "id", fields[0])?;
            let label_raw: i64 = parse_field(row, "label", fields[1])?;
            let label = match label_raw {
                UNLABELED => None,
                l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
                l => {
                    return Err(Error::LabelOutOfRange {
                        row,
                        label: l,
                        num_classes,
                    })
                }
            };
            let mut logits = Vec::with_capacity(num_classes);
            for (k, raw) in fields[2..2 + num_classes].iter().enumerate() {
                logits.push(parse_float(row, &format!("logit_{k}"), raw)?);
            }
            let mut representation = Vec::with_capacity(feature_dim);
            for (d, raw) in fields[2 + num_classes..].iter().enumerate() {
                representation.push(parse_float(row, &format!("feat_{d}"), raw)?);
            }
            records.push(OperationRecord {
                id,
                representation,
                logits,
                label,
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Dataset::new(records)
    }

    pub fn to_writer<W: Write>(&self, mut writer: W) -> Result<()> {
        let mut buf = self.header();
        buf.push('\n');
        for record in &self.records {
            let label = record.label.map_or(UNLABELED, |l| l as i64);
            write!(buf, "{},{}", record.id, label).unwrap();
            for v in record.logits.iter().chain(&record.representation) {
                write!(buf, ",{v}").unwrap();
            }
            buf.push('\n');
        }
        writer.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(fs::File::open(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file))
    }
}

pub fn csv_header(num_classes: usize, feature_dim: usize) -> String {
    let mut cols = vec!["id".to_string(), "label".to_string()];
    cols.extend((0..num_classes).map(|k| format!("logit_{k}")));
    cols.extend((0..feature_dim).map(|d| format!("feat_{d}")));
    cols.join(",")
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let header = header.strip_suffix('\r').unwrap_or(header);
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::MalformedHeader(
            "header must start with `id,label`".into(),
        ));
    }
    let num_classes = cols[2..]
        .iter()
        .take_while(|c| c.starts_with("logit_"))
        .count();
    let feature_dim = cols.len() - 2 - num_classes;
    if num_classes < 2 {
        return Err(Error::MalformedHeader(format!(
            "need at least 2 logit columns, found {num_classes}"
        )));
    }
    if feature_dim < 1 {
        return Err(Error::MalformedHeader("no feature columns".into()));
    }
    if csv_header(num_classes, feature_dim) != header {
        return Err(Error::MalformedHeader(format!(
            "expected `{}`",
            csv_header(num_classes, feature_dim)
        )));
    }
    Ok((num_classes, feature_dim))
}

fn parse_field<T: std::str::FromStr>(row: usize, column: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::ParseField {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

fn parse_float(row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = parse_field(row, column, raw)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteField {
            row,
            column: column.to_string(),
        });
    }
    Ok(v)
}
