//! Minimal CSV tables with a `#`-prefixed JSON header line.
//!
//! Every table this crate writes starts with one line `# {json}` carrying
//! provenance and schema metadata, followed by a column-name row and data
//! rows. Values never contain commas or quotes, so no quoting is needed.
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Value, columns: Vec<String>) -> Self {
        Self {
            header,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn push_floats(&mut self, row: &[f64]) {
        self.push(row.iter().map(|x| x.to_string()).collect());
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n", self.header);
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::Format("empty file".into()))?;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Format("first line must be a `#` JSON header".into()))?;
        let header: Value =
            serde_json::from_str(json.trim()).map_err(|e| Error::Format(format!("header JSON: {e}")))?;
        let (_, cols) = lines
            .next()
            .ok_or_else(|| Error::Format("missing column-name row".into()))?;
        let columns: Vec<String> = cols.split(',').map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(str::to_owned).collect();
            if row.len() != columns.len() {
                return Err(Error::Format(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 1,
                    columns.len(),
                    row.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn parse_f64(field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("not a number: `{field}`")))
}

/// Provenance block stamped into every output header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the canonical JSON of the generating configuration.
    pub config_hash: String,
    /// Named input fingerprints (networks, datasets, checkpoints).
    pub inputs: std::collections::BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: "rpf".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: sha256_hex(serde_json::to_string(config)?.as_bytes()),
            inputs: Default::default(),
        })
    }

    pub fn with_input(mut self, name: &str, fingerprint: &str) -> Self {
        self.inputs.insert(name.into(), fingerprint.into());
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip() {
        let mut t = Table::new(serde_json::json!({"k": 1}), vec!["a".into(), "b".into()]);
        t.push_floats(&[0.1, -3e-12]);
        t.push(vec!["x".into(), "true".into()]);
        let back = Table::parse(&t.to_csv()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn empty_table_is_valid() {
        let t = Table::new(serde_json::json!({}), vec!["a".into()]);
        assert_eq!(Table::parse(&t.to_csv()).unwrap().rows.len(), 0);
    }

    #[test]
    fn malformed_inputs() {
        assert!(Table::parse("").is_err());
        assert!(Table::parse("a,b\n1,2\n").is_err());
        assert!(Table::parse("# {}\na,b\n1\n").is_err());
        assert!(parse_f64("abc").is_err());
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(parse_f64(&x.to_string()).unwrap().to_bits(), x.to_bits());
        }
    }
}
