//! On-disk formats: feature, description, score, label, prediction and curve
//! files, plus the JSON sidecars that travel with them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::combiner::CombinedPrediction;
use crate::error::{Error, Result};
use crate::eval::CurvePoint;
use crate::experts::{ClassDescriptionMatrix, FeatureMatrix};
use crate::score::{sorted_sum, ClassId, ScoreKind, ScoreTable, Vocabulary};

/// Rows of an ingested probability table may be off by this much before being rejected.
pub const INGEST_TOLERANCE: f64 = 1e-6;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line() as usize).unwrap_or(0);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Header plus records, each record tagged with its 1-based line number.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok((header, rows))
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {field:?}"),
    })
}

fn parse_class(field: &str, line: usize) -> Result<ClassId> {
    field.parse::<u32>().map(ClassId).map_err(|_| Error::Parse {
        line,
        message: format!("not a class id: {field:?}"),
    })
}

fn expect_header(header: &[String], leading: &[&str]) -> Result<()> {
    let ok = header.len() >= leading.len() && header.iter().zip(leading).all(|(h, want)| h == want);
    if ok {
        Ok(())
    } else {
        Err(Error::Parse {
            line: 1,
            message: format!("header must start with {}", leading.join(",")),
        })
    }
}

fn f64_field(v: f64) -> String {
    // `{}` on f64 prints the shortest string that round-trips.
    format!("{v}")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- features

/// Sidecar for binary feature files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinaryFeatureHeader {
    pub n: usize,
    pub d: usize,
    pub sample_ids: Vec<String>,
    pub labels: Vec<Option<ClassId>>,
}

/// The JSON sidecar next to a data file: same stem, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads `sample_id,label,f0..` CSV, or a `.bin` matrix with its sidecar.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    if path.extension().is_some_and(|e| e == "bin") {
        return read_features_bin(path);
    }
    let (header, rows) = read_csv(path)?;
    expect_header(&header, &["sample_id", "label"])?;
    let dim = header.len() - 2;
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * dim);
    for (line, fields) in rows {
        ids.push(fields[0].clone());
        labels.push(if fields[1].is_empty() { None } else { Some(parse_class(&fields[1], line)?) });
        for f in &fields[2..] {
            data.push(parse_f64(f, line)?);
        }
    }
    FeatureMatrix::new(ids, dim, data, labels)
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sample_id".to_owned(), "label".to_owned()];
    header.extend((0..features.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..features.n_samples() {
        let mut record = vec![
            features.sample_ids()[i].clone(),
            features.label(i).map(|c| c.to_string()).unwrap_or_default(),
        ];
        record.extend(features.row(i).iter().map(|&v| f64_field(v)));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_features_bin(path: &Path) -> Result<FeatureMatrix> {
    let header: BinaryFeatureHeader = read_json(&sidecar_path(path))?;
    if header.sample_ids.len() != header.n || header.labels.len() != header.n {
        return Err(Error::DimensionMismatch {
            expected: header.n,
            got: header.sample_ids.len().min(header.labels.len()),
        });
    }
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.n * header.d * 4 {
        return Err(Error::DimensionMismatch {
            expected: header.n * header.d * 4,
            got: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    FeatureMatrix::new(header.sample_ids, header.d, data, header.labels)
}

/// Writes the matrix as little-endian f32 (lossy for f64 inputs) plus sidecar.
pub fn write_features_bin(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut out = create(path)?;
    for &v in features.data() {
        out.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    write_json(
        &sidecar_path(path),
        &BinaryFeatureHeader {
            n: features.n_samples(),
            d: features.dim(),
            sample_ids: features.sample_ids().to_vec(),
            labels: features.labels().to_vec(),
        },
    )
}

// ------------------------------------------------------------ descriptions

pub fn read_descriptions(path: &Path) -> Result<ClassDescriptionMatrix> {
    let (header, rows) = read_csv(path)?;
    expect_header(&header, &["class_id"])?;
    let dim = header.len() - 1;
    let mut map = BTreeMap::new();
    for (line, fields) in rows {
        let class = parse_class(&fields[0], line)?;
        let values = fields[1..].iter().map(|f| parse_f64(f, line)).collect::<Result<Vec<_>>>()?;
        if map.insert(class, values).is_some() {
            return Err(Error::DuplicateClass(class));
        }
    }
    ClassDescriptionMatrix::new(dim, map)
}

pub fn write_descriptions(path: &Path, descriptions: &ClassDescriptionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["class_id".to_owned()];
    header.extend((0..descriptions.dim()).map(|j| format!("a{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (class, row) in descriptions.iter() {
        let mut record = vec![class.to_string()];
        record.extend(row.iter().map(|&v| f64_field(v)));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------------ scores

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub kind: ScoreKind,
}

/// Writes `sample_id,<class_id>...` plus the `{kind}` sidecar.
pub fn write_scores(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sample_id".to_owned()];
    header.extend(table.vocabulary().iter().map(|c| c.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..table.n_samples() {
        let mut record = vec![table.sample_ids()[i].clone()];
        record.extend(table.row(i).iter().map(|&v| f64_field(v)));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_json(&sidecar_path(path), &ScoreSidecar { kind: table.kind() })
}

/// Reads a score file in its own column order. Probability rows within
/// [`INGEST_TOLERANCE`] of one are renormalized; others are rejected.
pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    let (header, rows) = read_csv(path)?;
    let sidecar: ScoreSidecar = read_json(&sidecar_path(path))?;
    expect_header(&header, &["sample_id"])?;
    let classes = header[1..].iter().map(|h| parse_class(h, 1)).collect::<Result<Vec<_>>>()?;
    let vocabulary = Vocabulary::new(classes)?;
    let width = vocabulary.len();
    let mut ids = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * width);
    for (row, (line, fields)) in rows.into_iter().enumerate() {
        ids.push(fields[0].clone());
        let mut values = fields[1..].iter().map(|f| parse_f64(f, line)).collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if sidecar.kind == ScoreKind::Probability {
            if values.iter().any(|&v| v < 0.0) {
                return Err(Error::NegativeScore);
            }
            let sum = sorted_sum(&values);
            if (sum - 1.0).abs() > INGEST_TOLERANCE {
                return Err(Error::UnnormalizedRow { row, sum });
            }
            values.iter_mut().for_each(|v| *v /= sum);
        }
        data.extend(values);
    }
    ScoreTable::new(ids, vocabulary, data, sidecar.kind)
}

/// Reads an externally produced score file and re-aligns its columns to `expected`.
pub fn ingest_external_scores(path: &Path, expected: &Vocabulary) -> Result<ScoreTable> {
    read_scores(path)?.realign(expected)
}

// ------------------------------------------------------------------ labels

pub fn read_labels(path: &Path) -> Result<Vec<(String, ClassId)>> {
    let (header, rows) = read_csv(path)?;
    expect_header(&header, &["sample_id", "label"])?;
    rows.into_iter()
        .map(|(line, fields)| Ok((fields[0].clone(), parse_class(&fields[1], line)?)))
        .collect()
}

pub fn write_labels(path: &Path, labels: &[(String, ClassId)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["sample_id", "label"]).map_err(|e| csv_error(path, e))?;
    for (id, c) in labels {
        w.write_record([id.as_str(), &c.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seen / unseen class lists, as stored in `classes.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
}

// ------------------------------------------------------- results & reports

pub fn write_predictions(path: &Path, sample_ids: &[String], predictions: &[CombinedPrediction]) -> Result<()> {
    if sample_ids.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: sample_ids.len(),
            got: predictions.len(),
        });
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sample_id".to_owned(), "predicted_class".to_owned(), "p_seen_gate".to_owned()];
    if let Some(first) = predictions.first() {
        header.extend(first.vocabulary.iter().map(|c| c.to_string()));
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (id, p) in sample_ids.iter().zip(predictions) {
        let mut record = vec![id.clone(), p.predicted_class().to_string(), f64_field(p.gate.p_seen)];
        record.extend(p.probabilities.values().iter().map(|&v| f64_field(v)));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["beta", "acc_ts", "acc_tr"]).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([f64_field(p.beta), f64_field(p.acc_ts), f64_field(p.acc_tr)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let (header, rows) = read_csv(path)?;
    expect_header(&header, &["beta", "acc_ts", "acc_tr"])?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(CurvePoint {
                beta: parse_f64(&f[0], line)?,
                acc_ts: parse_f64(&f[1], line)?,
                acc_tr: parse_f64(&f[2], line)?,
            })
        })
        .collect()
}

/// Generic CSV table of named numeric columns (candidate tables from tuning).
pub fn write_table(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(columns).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|&v| f64_field(v))).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The headline numbers of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub acc_tr: f64,
    pub acc_ts: f64,
    pub acc_h: f64,
    pub ausuc: Option<f64>,
    pub ood_auc: Option<f64>,
    pub fpr_at_95_tpr: Option<f64>,
}
