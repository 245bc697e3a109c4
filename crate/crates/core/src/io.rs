//! Atomic file output and plain CSV matrix readers/writers.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, UfmError};
use crate::panel::format_float;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| UfmError::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV with a header row and one line per matrix row.
pub fn matrix_to_csv(m: &DMatrix<f64>, header: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| format_float(m[(i, j)])))?;
    }
    w.into_inner()
        .map_err(|e| UfmError::Io(std::io::Error::other(e.to_string())))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>, header: &[String]) -> Result<()> {
    write_atomic(path, &matrix_to_csv(m, header)?)
}

/// Reads a headed numeric CSV back into a matrix.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, c)| {
                c.trim().parse::<f64>().map_err(|_| UfmError::NonNumericCell {
                    row: i + 2,
                    col: j + 1,
                    value: c.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(UfmError::RaggedRow {
            row: i + 2,
            expected: ncols,
            found: r.len(),
        });
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.into_iter().flatten(),
    ))
}

pub fn column_header(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}{j}")).collect()
}
