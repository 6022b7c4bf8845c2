//! File schemas and JSON I/O.
//!
//! All files are JSON, UTF-8, newline-terminated. Indices in files are
//! 1-based (converted at the parser boundary); matrices are row-major nested
//! arrays; tensors are `{dims, data}` with column-major data. Floats are
//! written with 17 significant digits so a parse-print cycle is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use polydec::{DecoupledModel, DenseTensor, PolyMap, Term};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Polynomial map file: `{"m", "n", "d", "terms": [{"i", "alpha", "coeff"}]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PolyMapFile {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub terms: Vec<TermEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TermEntry {
    /// Output index, 1-based.
    pub i: usize,
    /// Exponent of each input variable (length m).
    pub alpha: Vec<u32>,
    pub coeff: f64,
}

impl PolyMapFile {
    pub fn into_polymap(self) -> Result<PolyMap<f64>, CliError> {
        let terms = self
            .terms
            .into_iter()
            .map(|t| {
                if t.i == 0 {
                    return Err(CliError::parse("output index i is 1-based; got 0"));
                }
                Ok(Term::new(t.i - 1, &t.alpha, t.coeff))
            })
            .collect::<Result<Vec<_>, _>>()?;
        PolyMap::from_terms(self.m, self.n, self.d, terms)
            .map_err(|e| CliError::parse(format!("invalid polynomial map: {e}")))
    }
}

/// Decoupled model file: row-major `W` (n×r), `V` (m×r), `C` (r×d).
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<ModelMetadata>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub method: String,
    pub residuals: Residuals,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Residuals {
    pub tensor_fit: f64,
    pub map_residual: f64,
    pub structure_residual: f64,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(CliError::parse(format!("{what} has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::parse(format!("{what} rows are ragged or empty")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ModelFile {
    pub fn into_model(self) -> Result<DecoupledModel<f64>, CliError> {
        let w = rows_to_matrix(&self.w, "W")?;
        let v = rows_to_matrix(&self.v, "V")?;
        let c = rows_to_matrix(&self.c, "C")?;
        DecoupledModel::new(w, v, c)
            .map_err(|e| CliError::parse(format!("inconsistent model file: {e}")))
    }

    pub fn from_model(model: &DecoupledModel<f64>, metadata: Option<ModelMetadata>) -> Self {
        Self {
            w: matrix_to_rows(model.mixing()),
            v: matrix_to_rows(model.directions()),
            c: matrix_to_rows(model.coefficients()),
            metadata,
        }
    }
}

/// Tensor file: `{"dims": [...], "data": [...]}` with column-major data.
#[derive(Debug, Serialize, Deserialize)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn from_tensor(t: &DenseTensor<f64>) -> Self {
        Self {
            dims: t.dims().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// Sampling-plan file: points, degree, and the δ×N matrix A (row-major).
#[derive(Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
}

impl PlanFile {
    pub fn points(&self) -> Vec<DVector<f64>> {
        self.points
            .iter()
            .map(|p| DVector::from_row_slice(p))
            .collect()
    }
}

/// Read a whole input, with `-` meaning stdin.
pub fn read_input(path: &str) -> Result<String, CliError> {
    if path == "-" {
        let mut buf = String::new();
        io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| CliError::parse(format!("reading stdin: {e}")))?;
        Ok(buf)
    } else {
        fs::read_to_string(path).map_err(|e| CliError::parse(format!("reading {path}: {e}")))
    }
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::parse(format!("parsing {what}: {e}")))
}

/// serde_json formatter printing floats with 17 significant digits.
struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{:.7e}", value)
    }
}

/// Serialize as a newline-terminated JSON document.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::parse(format!("serializing output: {e}")))?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| CliError::parse(format!("serializing output: {e}")))
}

pub fn write_output<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json_line(value)?;
    fs::write(path, text).map_err(|e| CliError::parse(format!("writing {}: {e}", path.display())))
}

pub fn emit<T: Serialize>(target: Option<&Path>, value: &T) -> Result<(), CliError> {
    match target {
        Some(path) => write_output(path, value),
        None => {
            print!("{}", to_json_line(value)?);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digit_floats_round_trip_bit_exactly() {
        let values: [f64; 8] = [
            0.1,
            -std::f64::consts::PI,
            1.0 / 3.0,
            2.2250738585072014e-308,
            1.7976931348623157e308,
            -5e-324,
            12345.678901234567,
            0.0,
        ];
        let line = to_json_line(&values.to_vec()).unwrap();
        assert!(line.ends_with('\n'));
        let back: Vec<f64> = serde_json::from_str(&line).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} reparsed as {b}");
        }
    }

    #[test]
    fn one_based_indices_convert_at_the_boundary() {
        let file = PolyMapFile {
            m: 2,
            n: 1,
            d: 2,
            terms: vec![TermEntry {
                i: 1,
                alpha: vec![1, 1],
                coeff: 2.0,
            }],
        };
        let f = file.into_polymap().unwrap();
        assert_eq!(f.coefficient(0, &[1, 1]), 2.0);

        let zero_based = PolyMapFile {
            m: 2,
            n: 1,
            d: 2,
            terms: vec![TermEntry {
                i: 0,
                alpha: vec![1, 1],
                coeff: 2.0,
            }],
        };
        assert!(zero_based.into_polymap().is_err());
    }
}
