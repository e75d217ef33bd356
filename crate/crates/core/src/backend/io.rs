//! CmdStan file adapters: JSON data input and per-chain CSV output.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde_json::{Map, Number, Value};

use super::BackendError;

/// One entry of a Stan data block. Integer and real values are kept apart by
/// construction so the JSON encoding never has to guess from the value.
#[derive(Debug, Clone, PartialEq)]
pub enum StanValue {
    Int(i64),
    Real(f64),
    IntArray(Vec<i64>),
    Vector(Vec<f64>),
    /// Row-major `rows x cols` matrix.
    Matrix { rows: usize, cols: usize, values: Vec<f64> },
}

fn real_json(x: f64) -> Value {
    match Number::from_f64(x) {
        Some(n) => Value::Number(n),
        // CmdStan reads non-finite reals from these strings.
        None if x.is_nan() => Value::String("NaN".into()),
        None if x > 0.0 => Value::String("Inf".into()),
        None => Value::String("-Inf".into()),
    }
}

impl StanValue {
    pub fn to_json(&self) -> Value {
        match self {
            StanValue::Int(i) => Value::from(*i),
            StanValue::Real(x) => real_json(*x),
            StanValue::IntArray(v) => Value::Array(v.iter().map(|&i| Value::from(i)).collect()),
            StanValue::Vector(v) => Value::Array(v.iter().map(|&x| real_json(x)).collect()),
            StanValue::Matrix { rows, cols, values } => Value::Array(
                (0..*rows)
                    .map(|r| Value::Array(values[r * cols..(r + 1) * cols].iter().map(|&x| real_json(x)).collect()))
                    .collect(),
            ),
        }
    }
}

/// Named values passed to a model's data block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StanData {
    entries: BTreeMap<String, StanValue>,
}

impl StanData {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: StanValue) -> &mut Self {
        self.entries.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&StanValue> {
        self.entries.get(name)
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        match self.entries.get(name) {
            Some(StanValue::Int(i)) => Some(*i),
            _ => None,
        }
    }

    pub fn vector(&self, name: &str) -> Option<&[f64]> {
        match self.entries.get(name) {
            Some(StanValue::Vector(v)) => Some(v),
            _ => None,
        }
    }

    pub fn int_array(&self, name: &str) -> Option<&[i64]> {
        match self.entries.get(name) {
            Some(StanValue::IntArray(v)) => Some(v),
            _ => None,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> Value {
        let map: Map<String, Value> = self.entries.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
        Value::Object(map)
    }
}

/// Writes `data` in CmdStan's JSON input format.
pub fn write_data_file(data: &StanData, path: &Path) -> Result<(), BackendError> {
    let text = serde_json::to_string_pretty(&data.to_json()).expect("JSON values serialize");
    std::fs::write(path, text + "\n").map_err(|e| BackendError::io(path, e))
}

/// One chain's output: column names and one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCsv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ChainCsv {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Parses sampler CSV output: `#` comment lines anywhere, one header line,
/// then numeric rows. Line numbers in errors are 1-based file lines.
pub fn parse_chain_csv<R: Read>(input: R) -> Result<ChainCsv, BackendError> {
    let reader = BufReader::new(input);
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| BackendError::Parse { line: line_no, message: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        match &header {
            None => header = Some(fields.iter().map(|s| s.to_string()).collect()),
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(BackendError::Parse {
                        line: line_no,
                        message: format!("expected {} fields, found {}", h.len(), fields.len()),
                    });
                }
                let row = fields
                    .iter()
                    .map(|f| {
                        crate::fmt::parse_float(f).ok_or_else(|| BackendError::Parse {
                            line: line_no,
                            message: format!("not a number: {f:?}"),
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                rows.push(row);
            }
        }
    }
    let header = header.ok_or(BackendError::Parse { line: 0, message: "no header line".into() })?;
    Ok(ChainCsv { header, rows })
}

pub fn read_chain_csv(path: &Path) -> Result<ChainCsv, BackendError> {
    let file = std::fs::File::open(path).map_err(|e| BackendError::io(path, e))?;
    parse_chain_csv(file).map_err(|e| match e {
        BackendError::Parse { line, message } => BackendError::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_json() {
        let mut d = StanData::new();
        d.insert("y", StanValue::Vector(vec![1.0, 2.5]));
        d.insert("N", StanValue::Int(2));
        d.insert("g", StanValue::IntArray(vec![1, 2]));
        d.insert("m", StanValue::Matrix { rows: 2, cols: 2, values: vec![1.0, 2.0, 3.0, 4.0] });
        d.insert("bad", StanValue::Vector(vec![f64::INFINITY]));
        let j = d.to_json();
        assert_eq!(j["y"], serde_json::json!([1.0, 2.5]));
        assert_eq!(j["N"], serde_json::json!(2));
        assert_eq!(j["g"], serde_json::json!([1, 2]));
        assert_eq!(j["m"], serde_json::json!([[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(j["bad"], serde_json::json!(["Inf"]));
        // reals stay reals even when integral
        assert!(serde_json::to_string(&j["m"]).unwrap().contains("1.0"));
    }

    #[test]
    fn csv_with_comments() {
        let text = "# model = x\n# seed = 1\n# adapt\nlp__,divergent__,mu\n-1.5,0,0.25\n# mid comment\n-2,1,-0.5\n";
        let chain = parse_chain_csv(text.as_bytes()).unwrap();
        assert_eq!(chain.header, vec!["lp__", "divergent__", "mu"]);
        assert_eq!(chain.rows.len(), 2);
        assert_eq!(chain.column("divergent__").unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn ragged_row_reports_line() {
        let text = "# c\na,b\n1,2\n3\n";
        match parse_chain_csv(text.as_bytes()) {
            Err(BackendError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let text = "a,b\n1,x\n";
        assert!(matches!(parse_chain_csv(text.as_bytes()), Err(BackendError::Parse { line: 2, .. })));
    }

    #[test]
    fn seventeen_digit_values_roundtrip() {
        let values = [0.1, -1.0 / 3.0, 1e-300, 123_456.789_012_345_68];
        let mut text = String::from("x\n");
        for v in values {
            text.push_str(&crate::fmt::float(v));
            text.push('\n');
        }
        let chain = parse_chain_csv(text.as_bytes()).unwrap();
        assert_eq!(chain.column("x").unwrap(), values.to_vec());
    }
}
