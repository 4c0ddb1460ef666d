//! File formats: dataset CSV, Z CSV, traces, weight dumps and manifests.
//!
//! Dataset files start with a header `R:<r1>,<r2>,...` followed by one line per
//! row of comma-separated 1-based categories. Missing values are not
//! supported. Report numbers are written with 12 significant digits and
//! undefined values as `NA`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentFeatureState, ObservationMatrix, WeightStack};

/// Marker for undefined report values.
pub const UNDEFINED: &str = "NA";

/// Formats with 12 significant digits, dropping trailing zeros.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() { UNDEFINED.to_string() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // Round first so the exponent reflects the printed mantissa.
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..15).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_optional(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), format_number)
}

fn parse_error(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses dataset text; `source` names the input in error messages.
pub fn parse_dataset(text: &str, source: &str) -> Result<ObservationMatrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_error(source, 1, "empty file, expected header R:<r1>,<r2>,..."))?;
    let spec = header
        .strip_prefix("R:")
        .ok_or_else(|| parse_error(source, 1, "header must start with R:"))?;
    let cards = spec
        .split(',')
        .enumerate()
        .map(|(j, f)| match f.trim().parse::<usize>() {
            Ok(r) if r >= 2 => Ok(r),
            Ok(r) => Err(parse_error(source, 1, format!("column {}: cardinality {r} must be >= 2", j + 1))),
            Err(_) => Err(parse_error(source, 1, format!("column {}: bad cardinality {f:?}", j + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    let d = cards.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(parse_error(
                source,
                line_no,
                format!("expected {d} columns, found {}", fields.len()),
            ));
        }
        for (j, f) in fields.iter().enumerate() {
            let v: usize = f
                .trim()
                .parse()
                .map_err(|_| parse_error(source, line_no, format!("column {}: not a category: {f:?}", j + 1)))?;
            if v < 1 || v > cards[j] {
                return Err(parse_error(
                    source,
                    line_no,
                    format!("column {}: category {v} outside 1..={}", j + 1, cards[j]),
                ));
            }
            data.push((v - 1) as u32);
        }
        n += 1;
    }
    ObservationMatrix::new(n, cards, data)
}

pub fn load_dataset(path: &Path) -> Result<ObservationMatrix> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn dataset_to_string(x: &ObservationMatrix) -> String {
    let mut out = String::new();
    let header: Vec<String> = x.cardinalities().iter().map(|r| r.to_string()).collect();
    writeln!(out, "R:{}", header.join(",")).unwrap();
    for n in 0..x.n_rows() {
        let row: Vec<String> = x.row(n).iter().map(|v| (v + 1).to_string()).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

pub fn save_dataset(path: &Path, x: &ObservationMatrix) -> Result<()> {
    fs::write(path, dataset_to_string(x))?;
    Ok(())
}

/// Z as `K:<k>` followed by one line of 0/1 entries per row.
pub fn z_to_string(z: &LatentFeatureState) -> String {
    let mut out = format!("K:{}\n", z.k_active());
    for n in 0..z.n_rows() {
        let row: Vec<&str> = z.row(n).iter().map(|&b| if b { "1" } else { "0" }).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

pub fn parse_z(text: &str, source: &str) -> Result<LatentFeatureState> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| parse_error(source, 1, "empty file, expected K:<k>"))?;
    let k: usize = header
        .strip_prefix("K:")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_error(source, 1, "header must be K:<k>"))?;
    let mut entries = Vec::new();
    let mut n = 0;
    for (line_no, line) in lines {
        if k == 0 {
            if !line.trim().is_empty() {
                return Err(parse_error(source, line_no, "expected an empty row for K:0"));
            }
            n += 1;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k {
            return Err(parse_error(source, line_no, format!("expected {k} columns, found {}", fields.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            match f.trim() {
                "0" => entries.push(0),
                "1" => entries.push(1),
                other => {
                    return Err(parse_error(source, line_no, format!("column {}: expected 0 or 1, found {other:?}", j + 1)))
                }
            }
        }
        n += 1;
    }
    LatentFeatureState::from_rows(n, k, &entries)
}

pub fn load_z(path: &Path) -> Result<LatentFeatureState> {
    parse_z(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Gibbs trace: `iteration,k_active,log_marginal_sum`, iterations 1-based.
pub fn trace_to_string(k_active: &[usize], log_marginal: &[f64]) -> String {
    let mut out = String::from("iteration,k_active,log_marginal_sum\n");
    for (i, (k, lm)) in k_active.iter().zip(log_marginal).enumerate() {
        writeln!(out, "{},{k},{}", i + 1, format_number(*lm)).unwrap();
    }
    out
}

/// VI bound trace: `cycle,bound`, cycle 0 being the initial state.
pub fn bound_trace_to_string(bounds: &[f64]) -> String {
    let mut out = String::from("cycle,bound\n");
    for (c, b) in bounds.iter().enumerate() {
        writeln!(out, "{c},{}", format_number(*b)).unwrap();
    }
    out
}

/// CSV with a header row and one labelled line per matrix row.
pub fn labelled_table(
    corner: &str,
    columns: &[String],
    rows: &[(String, Vec<Option<f64>>)],
) -> String {
    let mut out = String::from(corner);
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (label, values) in rows {
        out.push_str(label);
        for v in values {
            out.push(',');
            out.push_str(&format_optional(*v));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<Option<f64>>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| Some(m[(i, j)])).collect()).collect()
}

/// JSON form of a weight stack; `rows[k][r]` is entry (k, r), row 0 the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub k_active: usize,
    pub dimensions: Vec<WeightDimension>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDimension {
    pub cardinality: usize,
    pub rows: Vec<Vec<f64>>,
}

impl WeightsFile {
    pub fn from_stack(w: &WeightStack) -> Self {
        Self {
            k_active: w.k_active(),
            dimensions: w
                .matrices()
                .iter()
                .map(|m| WeightDimension {
                    cardinality: m.ncols(),
                    rows: (0..m.nrows()).map(|k| m.row(k).iter().copied().collect()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_stack(&self) -> Result<WeightStack> {
        if self.dimensions.is_empty() {
            return Ok(WeightStack::zeros(self.k_active, &[]));
        }
        let mats = self
            .dimensions
            .iter()
            .enumerate()
            .map(|(d, dim)| {
                if dim.rows.len() != self.k_active + 1 || dim.rows.iter().any(|r| r.len() != dim.cardinality) {
                    return Err(Error::Dimension(format!(
                        "dimension {}: expected {}x{} weights",
                        d + 1,
                        self.k_active + 1,
                        dim.cardinality
                    )));
                }
                Ok(DMatrix::from_fn(self.k_active + 1, dim.cardinality, |k, r| dim.rows[k][r]))
            })
            .collect::<Result<Vec<_>>>()?;
        WeightStack::from_matrices(mats)
    }
}

pub fn save_weights(path: &Path, w: &WeightStack) -> Result<()> {
    write_json(path, &WeightsFile::from_stack(w))
}

pub fn load_weights(path: &Path) -> Result<WeightStack> {
    let file: WeightsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.to_stack()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One emitted file, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: String,
}

/// List of every file a command wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            files: Vec::new(),
        }
    }

    /// Writes `contents` to `dir/name` and records it.
    pub fn emit(&mut self, dir: &Path, name: &str, kind: &str, contents: &str) -> Result<()> {
        fs::write(dir.join(name), contents)?;
        self.record(name, kind);
        Ok(())
    }

    pub fn record(&mut self, name: &str, kind: &str) {
        self.files.push(ManifestEntry {
            name: name.to_string(),
            kind: kind.to_string(),
        });
    }

    pub fn find(&self, kind: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.kind == kind)
    }
}
