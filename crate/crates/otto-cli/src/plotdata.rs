//! results.csv reshaper: wide per-step tables become long (t, series, value)
//! rows. Values pass through as the exact strings from the input file, so
//! reshaping never reformats a number. A seed column, when present, stays an
//! identifier column.

use std::io::Write;
use std::path::Path;

use crate::{cfg, Failure};

pub fn emit(input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(input)
        .map_err(|e| cfg(format!("cannot read {}: {e}", input.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| cfg(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let t_idx = headers
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| cfg(format!("{}: missing column 't'", input.display())))?;
    let seed_idx = headers.iter().position(|h| h == "seed");
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != t_idx && Some(i) != seed_idx)
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut out_header = vec!["t"];
    if seed_idx.is_some() {
        out_header.push("seed");
    }
    out_header.extend(["series", "value"]);
    w.write_record(&out_header).expect("in-memory write");
    for record in rdr.records() {
        let record = record.map_err(|e| cfg(format!("{}: {e}", input.display())))?;
        for &ci in &value_cols {
            let mut row = vec![&record[t_idx]];
            if let Some(si) = seed_idx {
                row.push(&record[si]);
            }
            row.push(&headers[ci]);
            row.push(&record[ci]);
            w.write_record(&row).expect("in-memory write");
        }
    }
    let bytes = w.into_inner().expect("in-memory flush");
    match out {
        Some(path) => std::fs::write(path, &bytes)
            .map_err(|e| cfg(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| cfg(format!("stdout: {e}"))),
    }
}
