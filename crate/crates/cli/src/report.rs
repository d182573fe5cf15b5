//! CSV tables and the JSON summary.

use std::fs;
use std::path::Path;

use msa_core::Ledger;
use serde_json::json;

use crate::commands::Outcome;
use crate::config::Config;
use crate::{CliError, Command};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// One row per ledger constant: name, value (empty if unknown) and
/// whether it was derived.
pub fn ledger_table(l: &Ledger) -> Table {
    let mut t = Table::new(&["name", "value", "derived"]);
    for (name, v) in l.entries() {
        t.push(vec![
            name.to_string(),
            v.map_or(String::new(), fmt_f64),
            l.derived.iter().any(|d| d == name).to_string(),
        ]);
    }
    t
}

/// Writes every table, `summary.json` and the resolved `config.toml`.
pub fn write_outputs(dir: &Path, cmd: Command, cfg: &Config, out: &Outcome) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    for (name, table) in &out.tables {
        fs::write(dir.join(name), table.to_csv()).map_err(io)?;
    }
    let summary = json!({
        "command": cmd.name(),
        "config": cfg,
        "ledger": out.ledger,
        "flags": out.flags,
        "verified": out.verified,
        "report": out.report,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(dir.join("summary.json"), text + "\n").map_err(io)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0");
    }

    #[test]
    fn csv_quotes_only_when_needed() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["x".into(), "1.5".into()]);
        t.push(vec!["y,z".into(), String::new()]);
        assert_eq!(t.to_csv(), "a,b\nx,1.5\n\"y,z\",\n");
    }
}
