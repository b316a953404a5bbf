//! Subject-level data: covariates, a binary treatment coded -1/+1, and an
//! outcome where larger is better.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EarlError, Result};

/// Assigned or recommended treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Treatment {
    #[serde(rename = "-1")]
    Neg,
    #[serde(rename = "1")]
    Pos,
}

impl Treatment {
    pub const BOTH: [Treatment; 2] = [Treatment::Pos, Treatment::Neg];

    /// `sgn(v)` with `sgn(0) = +1`.
    #[inline]
    pub fn from_sign(v: f64) -> Self {
        if v >= 0.0 {
            Treatment::Pos
        } else {
            Treatment::Neg
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Treatment::Pos => 1.0,
            Treatment::Neg => -1.0,
        }
    }

    #[inline]
    pub fn opposite(self) -> Self {
        match self {
            Treatment::Pos => Treatment::Neg,
            Treatment::Neg => Treatment::Pos,
        }
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Treatment::Pos => f.write_str("1"),
            Treatment::Neg => f.write_str("-1"),
        }
    }
}

/// `sgn` on the reals with the convention `sgn(0) = +1`.
#[inline]
pub fn sgn(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// A value indexed by treatment arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerArm<T> {
    pub pos: T,
    pub neg: T,
}

impl<T: Copy> PerArm<T> {
    pub fn new(pos: T, neg: T) -> Self {
        PerArm { pos, neg }
    }

    #[inline]
    pub fn get(&self, a: Treatment) -> T {
        match a {
            Treatment::Pos => self.pos,
            Treatment::Neg => self.neg,
        }
    }
}

/// Immutable table of `(X, A, Y)` for `n` subjects, covariates row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    p: usize,
    x: Vec<f64>,
    a: Vec<Treatment>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, p: usize, a: Vec<Treatment>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(EarlError::shape("dataset needs at least one subject"));
        }
        if p == 0 {
            return Err(EarlError::shape("dataset needs at least one covariate"));
        }
        if a.len() != n {
            return Err(EarlError::shape(format!(
                "{} treatments for {} outcomes",
                a.len(),
                n
            )));
        }
        if x.len() != n * p {
            return Err(EarlError::shape(format!(
                "covariate buffer has {} values, expected {}x{}",
                x.len(),
                n,
                p
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(EarlError::Domain(format!(
                "non-finite covariate x{} for subject {}",
                i % p + 1,
                i / p
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(EarlError::Domain(format!("non-finite outcome for subject {i}")));
        }
        Ok(Dataset { p, x, a, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], a: Vec<Treatment>, y: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(EarlError::shape("ragged covariate rows"));
        }
        Dataset::new(rows.concat(), p, a, y)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn treatment(&self, i: usize) -> Treatment {
        self.a[i]
    }

    #[inline]
    pub fn outcome(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn treatments(&self) -> &[Treatment] {
        &self.a
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x[i * self.p + j]).collect()
    }

    /// Number of subjects on each arm.
    pub fn arm_counts(&self) -> PerArm<usize> {
        let pos = self.a.iter().filter(|&&a| a == Treatment::Pos).count();
        PerArm::new(pos, self.n() - pos)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            p: self.p,
            x,
            a: indices.iter().map(|&i| self.a[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Same subjects with outcomes replaced.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::new(self.x.clone(), self.p, self.a.clone(), y)
    }

    /// Same subjects with column `j` reordered so subject `i` receives the
    /// value of subject `order[i]`.
    pub fn with_column_permuted(&self, j: usize, order: &[usize]) -> Result<Dataset> {
        if j >= self.p || order.len() != self.n() {
            return Err(EarlError::shape("column permutation does not fit the dataset"));
        }
        let col = self.column(j);
        let mut x = self.x.clone();
        for (i, &src) in order.iter().enumerate() {
            x[i * self.p + j] = col[src];
        }
        Ok(Dataset { x, ..self.clone() })
    }

    /// Appends a covariate column.
    pub fn with_extra_column(&self, values: &[f64]) -> Result<Dataset> {
        if values.len() != self.n() {
            return Err(EarlError::shape("extra column length differs from n"));
        }
        let p = self.p + 1;
        let mut x = Vec::with_capacity(self.n() * p);
        for (i, v) in values.iter().enumerate() {
            x.extend_from_slice(self.row(i));
            x.push(*v);
        }
        Dataset::new(x, p, self.a.clone(), self.y.clone())
    }

    pub fn mean_outcome(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n() as f64
    }
}

/// Reads a dataset with header `y,a,x1,...,xp` (any column order).
///
/// A treatment column coded 0/1 is remapped to -1/+1 with a warning.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(0, "header", e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(0, "header", "empty file"));
    }

    let mut y_col = None;
    let mut a_col = None;
    let mut x_cols: Vec<Option<usize>> = Vec::new();
    for (k, name) in headers.iter().enumerate() {
        match name {
            "y" => y_col = Some(k),
            "a" => a_col = Some(k),
            _ => {
                let j: usize = name
                    .strip_prefix('x')
                    .and_then(|s| s.parse().ok())
                    .filter(|&j| j >= 1)
                    .ok_or_else(|| parse_err(0, name, "unrecognized column"))?;
                if x_cols.len() < j {
                    x_cols.resize(j, None);
                }
                if x_cols[j - 1].replace(k).is_some() {
                    return Err(parse_err(0, name, "duplicate column"));
                }
            }
        }
    }
    let y_col = y_col.ok_or_else(|| parse_err(0, "y", "missing column"))?;
    let a_col = a_col.ok_or_else(|| parse_err(0, "a", "missing column"))?;
    if x_cols.is_empty() {
        return Err(parse_err(0, "x1", "missing column"));
    }
    let x_cols: Vec<usize> = x_cols
        .iter()
        .enumerate()
        .map(|(j, c)| c.ok_or_else(|| parse_err(0, &format!("x{}", j + 1), "missing column")))
        .collect::<Result<_>>()?;

    let p = x_cols.len();
    let mut x = Vec::new();
    let mut raw_a = Vec::new();
    let mut y = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| parse_err(row, "record", e.to_string()))?;
        let cell = |k: usize| -> Result<f64> {
            let name = &headers[k];
            let s = record
                .get(k)
                .ok_or_else(|| parse_err(row, name, "missing cell"))?;
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(row, name, format!("non-numeric value `{s}`")))?;
            if !v.is_finite() {
                return Err(parse_err(row, name, format!("non-finite value `{s}`")));
            }
            Ok(v)
        };
        y.push(cell(y_col)?);
        raw_a.push((row, cell(a_col)?));
        for &k in &x_cols {
            x.push(cell(k)?);
        }
    }
    if y.is_empty() {
        return Err(parse_err(1, "y", "no data rows"));
    }

    let zero_one = raw_a.iter().all(|&(_, v)| v == 0.0 || v == 1.0)
        && raw_a.iter().any(|&(_, v)| v == 0.0);
    if zero_one {
        log::warn!("treatment column coded 0/1; remapping 0 to -1");
    }
    let a = raw_a
        .into_iter()
        .map(|(row, v)| match v {
            1.0 => Ok(Treatment::Pos),
            v if v == -1.0 && !zero_one => Ok(Treatment::Neg),
            v if v == 0.0 && zero_one => Ok(Treatment::Neg),
            v => Err(parse_err(row, "a", format!("treatment must be -1/1 or 0/1, got {v}"))),
        })
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(x, p, a, y)
}

/// Writes the dataset in the format read by [`load_csv`]. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string(), "a".to_string()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..data.n() {
        let mut rec = vec![data.outcome(i).to_string(), data.treatment(i).to_string()];
        rec.extend(data.row(i).iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(data, std::io::BufWriter::new(file))
}

fn csv_io(e: csv::Error) -> EarlError {
    EarlError::Io(std::io::Error::other(e))
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> EarlError {
    EarlError::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}
