//! Per-epoch training metrics and their CSV serialization.

use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lower_loss,upper_loss,d2_dice,test_dice,lr_lower,lr_upper";

/// One row per epoch; `test_dice` is optional and serializes as an empty
/// field when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lower_loss: f64,
    pub upper_loss: f64,
    pub d2_dice: f64,
    pub test_dice: Option<f64>,
    pub lr_lower: f64,
    pub lr_upper: f64,
}

/// Render rows as CSV with fixed 6-decimal formatting. Rows must be sorted
/// by epoch.
pub fn metrics_to_string(rows: &[MetricsRow]) -> Result<String> {
    if rows.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        return Err(Error::Data("metrics rows must be epoch-sorted".into()));
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let test = row
            .test_dice
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{:.6},{:.6}\n",
            row.epoch, row.lower_loss, row.upper_loss, row.d2_dice, test, row.lr_lower, row.lr_upper
        ));
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_to_string(rows)?)?;
    Ok(())
}

/// Parse a metrics CSV produced by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "unexpected metrics header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!(
                "metrics line {} has {} fields, expected 7",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad numeric field `{s}` on line {}", i + 2)))
        };
        rows.push(MetricsRow {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad epoch `{}`", fields[0])))?,
            lower_loss: num(fields[1])?,
            upper_loss: num(fields[2])?,
            d2_dice: num(fields[3])?,
            test_dice: if fields[4].is_empty() {
                None
            } else {
                Some(num(fields[4])?)
            },
            lr_lower: num(fields[5])?,
            lr_upper: num(fields[6])?,
        });
    }
    Ok(rows)
}
