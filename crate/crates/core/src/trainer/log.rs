use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "iter,epoch,lr,loss_total,loss_sup,loss_ssl,loss_ssup,miou_val";

/// One optimizer step. Loss terms that were not evaluated are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: Option<f64>,
    pub loss_ssl: Option<f64>,
    pub loss_ssup: Option<f64>,
    pub miou_val: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl IterRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.epoch,
            self.lr,
            self.loss_total,
            cell(self.loss_sup),
            cell(self.loss_ssl),
            cell(self.loss_ssup),
            cell(self.miou_val)
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let bad = |why: String| Error::Format {
            format: "metrics csv",
            offset: 0,
            reason: format!("{why} in row {row:?}"),
        };
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("{} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(IterRecord {
            iter: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            epoch: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            lr: num(f[2])?,
            loss_total: num(f[3])?,
            loss_sup: opt(f[4])?,
            loss_ssl: opt(f[5])?,
            loss_ssup: opt(f[6])?,
            miou_val: opt(f[7])?,
        })
    }
}

pub fn to_csv(records: &[IterRecord], header: bool) -> String {
    let mut s = String::new();
    if header {
        s.push_str(CSV_HEADER);
        s.push('\n');
    }
    for r in records {
        writeln!(s, "{}", r.to_csv_row()).unwrap();
    }
    s
}

/// Append rows, writing the header first when the file is new or empty.
pub fn append_csv(path: &Path, records: &[IterRecord]) -> Result<()> {
    use std::io::Write;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(to_csv(records, fresh).as_bytes())?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<IterRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(CSV_HEADER) => {}
        other => {
            return Err(Error::Format {
                format: "metrics csv",
                offset: 0,
                reason: format!("unexpected header {other:?}"),
            })
        }
    }
    lines.filter(|l| !l.is_empty()).map(IterRecord::from_csv_row).collect()
}
