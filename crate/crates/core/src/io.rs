//! File formats: rating triplets, dense CSV matrices, 0/1 masks, key=value
//! run configuration and JSON reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::Rating;
use crate::linalg::DenseMatrix;
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Comma,
    Tab,
    /// Any run of spaces or tabs.
    Whitespace,
}

impl Delimiter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "comma" | "," => Ok(Delimiter::Comma),
            "tab" | "\t" => Ok(Delimiter::Tab),
            "whitespace" | "space" | " " => Ok(Delimiter::Whitespace),
            _ => Err(Error::invalid(format!("unknown delimiter {s:?} (comma, tab, whitespace)"))),
        }
    }

    fn split<'a>(self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSchema {
    pub delimiter: Delimiter,
    pub one_indexed: bool,
    pub header: bool,
}

impl Default for TripletSchema {
    fn default() -> Self {
        TripletSchema {
            delimiter: Delimiter::Comma,
            one_indexed: true,
            header: false,
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads `(row, col, rating)` lines. Blank lines are skipped; extra columns
/// (e.g. timestamps) are ignored.
pub fn load_triplets(path: impl AsRef<Path>, schema: &TripletSchema) -> Result<Vec<Rating>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_triplets(&text, path, schema)
}

pub fn parse_triplets(text: &str, path: &Path, schema: &TripletSchema) -> Result<Vec<Rating>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if (schema.header && idx == 0) || line.trim().is_empty() {
            continue;
        }
        let fields = schema.delimiter.split(line.trim());
        if fields.len() < 3 {
            return Err(parse_err(path, lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let index = |s: &str, what: &str| -> Result<usize> {
            let v: usize = s
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("{what} index {s:?} is not a nonnegative integer")))?;
            if schema.one_indexed {
                v.checked_sub(1)
                    .ok_or_else(|| Error::invalid(format!("line {lineno}: {what} index 0 in one-indexed file")))
            } else {
                Ok(v)
            }
        };
        let row = index(fields[0], "row")?;
        let col = index(fields[1], "column")?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("rating {:?} is not a number", fields[2])))?;
        if !value.is_finite() {
            return Err(parse_err(path, lineno, "rating is not finite"));
        }
        out.push(Rating { row, col, value });
    }
    Ok(out)
}

pub fn write_triplets(path: impl AsRef<Path>, ratings: &[Rating], one_indexed: bool) -> Result<()> {
    let off = usize::from(one_indexed);
    let mut s = String::new();
    for r in ratings {
        let _ = writeln!(s, "{},{},{}", r.row + off, r.col + off, r.value);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Ratings split into training, validation and evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDataset {
    pub n_rows: usize,
    pub n_cols: usize,
    pub train: Vec<Rating>,
    pub validation: Vec<Rating>,
    pub evaluation: Vec<Rating>,
}

impl TripletDataset {
    /// Checks bounds, duplicates within a split and overlap between splits.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        train: Vec<Rating>,
        validation: Vec<Rating>,
        evaluation: Vec<Rating>,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let mut owner: std::collections::HashMap<(usize, usize), &str> = Default::default();
        for (name, split) in [("train", &train), ("validation", &validation), ("evaluation", &evaluation)] {
            let mut mine = HashSet::new();
            for r in split.iter() {
                if r.row >= n_rows || r.col >= n_cols {
                    return Err(Error::invalid(format!(
                        "{name} rating ({},{}) outside {n_rows}x{n_cols}",
                        r.row, r.col
                    )));
                }
                if !mine.insert((r.row, r.col)) {
                    return Err(Error::invalid(format!("duplicate {name} rating at ({},{})", r.row, r.col)));
                }
                if let Some(other) = owner.insert((r.row, r.col), name) {
                    return Err(Error::invalid(format!(
                        "({},{}) appears in both {other} and {name}",
                        r.row, r.col
                    )));
                }
            }
        }
        Ok(TripletDataset {
            n_rows,
            n_cols,
            train,
            validation,
            evaluation,
        })
    }

    /// Dimensions from the largest index over all splits.
    pub fn infer_shape(splits: &[&[Rating]]) -> (usize, usize) {
        let mut shape = (0, 0);
        for r in splits.iter().flat_map(|s| s.iter()) {
            shape.0 = shape.0.max(r.row + 1);
            shape.1 = shape.1.max(r.col + 1);
        }
        shape
    }

    /// `(Y, T)` of the training ratings; unobserved entries of `Y` are 0.
    pub fn train_matrix(&self) -> Result<(DenseMatrix, Mask)> {
        ratings_to_matrix(self.n_rows, self.n_cols, &self.train)
    }
}

pub fn ratings_to_matrix(n_rows: usize, n_cols: usize, ratings: &[Rating]) -> Result<(DenseMatrix, Mask)> {
    let mut y = DenseMatrix::zeros(n_rows, n_cols);
    let mut idx = Vec::with_capacity(ratings.len());
    for r in ratings {
        if r.row >= n_rows || r.col >= n_cols {
            return Err(Error::invalid(format!("rating ({},{}) outside {n_rows}x{n_cols}", r.row, r.col)));
        }
        y[(r.row, r.col)] = r.value;
        idx.push((r.row, r.col));
    }
    Ok((y, Mask::from_indices(n_rows, n_cols, &idx)?))
}

/// One row per line, comma-separated, shortest round-trip float formatting.
pub fn write_dense_csv(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    fs::write(path, dense_to_csv(m))?;
    Ok(())
}

pub fn dense_to_csv(m: &DenseMatrix) -> String {
    let mut s = String::with_capacity(m.len() * 20);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", m[(i, j)]);
        }
        s.push('\n');
    }
    s
}

pub fn read_dense_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, idx + 1, format!("{f:?} is not a number")))
            })
            .collect::<Result<_>>()?;
        match ncols {
            None => ncols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_err(path, idx + 1, format!("expected {c} columns, found {}", row.len())));
            }
            _ => {}
        }
        data.extend(row);
        nrows += 1;
    }
    let ncols = ncols.ok_or_else(|| parse_err(path, 1, "matrix file is empty"))?;
    Ok(DenseMatrix::from_row_slice(nrows, ncols, &data))
}

pub fn write_mask_csv(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let m = mask.as_matrix();
    let mut s = String::with_capacity(m.len() * 2);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                s.push(',');
            }
            s.push(if mask.is_observed(i, j) { '1' } else { '0' });
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_matrix(read_dense_csv(path)?)
}

/// Writes `{"config": …, "seed": …, "result": …}` with keys in insertion order.
pub fn write_json_report<C: Serialize, R: Serialize>(
    path: impl AsRef<Path>,
    config: &C,
    seed: Option<u64>,
    result: &R,
) -> Result<()> {
    fs::write(path, json_report(config, seed, result)?)?;
    Ok(())
}

pub fn json_report<C: Serialize, R: Serialize>(config: &C, seed: Option<u64>, result: &R) -> Result<String> {
    let mut obj = serde_json::Map::new();
    obj.insert("config".into(), serde_json::to_value(config)?);
    obj.insert("seed".into(), serde_json::to_value(seed)?);
    obj.insert("result".into(), serde_json::to_value(result)?);
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(obj))?;
    s.push('\n');
    Ok(s)
}
