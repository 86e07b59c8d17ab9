use std::io::{Read, Write};
use std::path::Path;

use super::{SeriesDataset, SplitSpec};
use crate::error::{Error, Result};

/// Loads an ETT-style CSV: header row, first column a label, remaining
/// columns decimal values, one row per time step.
pub fn load_csv(path: impl AsRef<Path>, split: SplitSpec) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(file, &name, split)
}

pub fn parse_csv(reader: impl Read, name: &str, split: SplitSpec) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 2 {
        return Err(Error::Data("need a label column and at least one value column".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n_vars = columns.len();
    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // row numbers are 1-based and count the header
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.len() != n_vars + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len() + 1,
                message: format!("expected {} fields, found {}", n_vars + 1, rec.len()),
            });
        }
        timestamps.push(rec[0].to_string());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("{cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: j + 1,
                    message: format!("{cell:?} is not finite"),
                });
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    SeriesDataset::new(name, values, n_vars, timestamps, columns, split)
}

/// Writes raw values in the format [`load_csv`] reads.
pub fn write_csv(ds: &SeriesDataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["t".to_string()];
    header.extend(ds.columns.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for t in 0..ds.len() {
        let mut rec = vec![ds.timestamps[t].clone()];
        rec.extend(ds.raw_row(t).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
