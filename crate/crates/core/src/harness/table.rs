//! The long-format metrics CSV (schema v1) and a column-checked reader.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CSV_SCHEMA: &str = "v1";

/// Column order of schema v1.
pub const CSV_COLUMNS: [&str; 20] = [
    "run_id",
    "width",
    "lambda",
    "seed",
    "epoch_budget",
    "epoch",
    "clean_train_loss",
    "clean_train_acc",
    "clean_test_loss",
    "clean_test_acc",
    "fgsm_acc",
    "pgd_acc",
    "gamma_hat",
    "gamma_hat_c",
    "gamma_hat_m",
    "gamma_ce",
    "bound_lower",
    "bound_upper",
    "gap_ce",
    "epoch_wall_ms",
];

/// One observation: a run at one epoch, reported under one epoch budget.
/// Empty optional fields mean "undefined", never zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub width: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub epoch_budget: usize,
    pub epoch: usize,
    pub clean_train_loss: f64,
    pub clean_train_acc: f64,
    pub clean_test_loss: f64,
    pub clean_test_acc: f64,
    pub fgsm_acc: Option<f64>,
    pub pgd_acc: Option<f64>,
    pub gamma_hat: f64,
    pub gamma_hat_c: Option<f64>,
    pub gamma_hat_m: Option<f64>,
    pub gamma_ce: Option<f64>,
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
    pub gap_ce: Option<f64>,
    pub epoch_wall_ms: Option<f64>,
}

pub fn write_rows(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if headers != CSV_COLUMNS {
        return Err(Error::Schema(format!("{} does not carry the {CSV_SCHEMA} header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A CSV read by column name, for consumers that need only some columns.
#[derive(Clone, Debug)]
pub struct Table {
    columns: HashMap<String, usize>,
    records: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path)?;
        let columns = r.headers()?.iter().enumerate().map(|(i, h)| (h.to_owned(), i)).collect();
        let records = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Table { columns, records })
    }

    pub fn from_rows(rows: &[CsvRow]) -> Result<Table> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let columns = r.headers()?.iter().enumerate().map(|(i, h)| (h.to_owned(), i)).collect();
        let records = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Table { columns, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fails with a schema error naming every missing column.
    pub fn require(&self, columns: &[&str]) -> Result<()> {
        let missing: Vec<&str> = columns.iter().copied().filter(|c| !self.columns.contains_key(*c)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(format!("missing column(s): {}", missing.join(", "))))
        }
    }

    pub fn text(&self, row: usize, column: &str) -> Option<&str> {
        let i = *self.columns.get(column)?;
        self.records[row].get(i).filter(|s| !s.is_empty())
    }

    /// Parses a numeric cell; empty cells are `None`, malformed ones an error.
    pub fn num(&self, row: usize, column: &str) -> Result<Option<f64>> {
        match self.text(row, column) {
            None => Ok(None),
            Some(s) => {
                s.parse::<f64>().map(Some).map_err(|_| Error::Schema(format!("row {}: column {column} holds non-numeric {s:?}", row + 1)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(width: usize, lambda: f64, epoch: usize) -> CsvRow {
        CsvRow {
            run_id: format!("w{width}-l{lambda}-s0"),
            width,
            lambda: Some(lambda),
            seed: 0,
            epoch_budget: 10,
            epoch,
            clean_train_loss: 0.5,
            clean_train_acc: 0.9,
            clean_test_loss: 0.6,
            clean_test_acc: 0.8,
            fgsm_acc: None,
            pgd_acc: Some(0.25),
            gamma_hat: 1.0,
            gamma_hat_c: Some(1.5),
            gamma_hat_m: None,
            gamma_ce: None,
            bound_lower: None,
            bound_upper: None,
            gap_ce: Some(-0.125),
            epoch_wall_ms: None,
        }
    }

    #[test]
    fn header_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_rows(&path, &[row(8, 0.5, 1)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "run_id,width,lambda,seed,epoch_budget,epoch,clean_train_loss,clean_train_acc,clean_test_loss,\
             clean_test_acc,fgsm_acc,pgd_acc,gamma_hat,gamma_hat_c,gamma_hat_m,gamma_ce,bound_lower,\
             bound_upper,gap_ce,epoch_wall_ms"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "w8-l0.5-s0,8,0.5,0,10,1,0.5,0.9,0.6,0.8,,0.25,1.0,1.5,,,,,-0.125,");
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![row(8, 0.5, 1), row(16, 1.0, 2)];
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);
        let t = Table::read(&path).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.num(1, "width").unwrap(), Some(16.0));
        assert_eq!(t.num(0, "gamma_ce").unwrap(), None);
        assert!(t.require(&["width", "nope"]).is_err());
    }
}
