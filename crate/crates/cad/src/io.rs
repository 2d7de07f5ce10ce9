//! Plain-text series, label and score files, and atomic file replacement.

use std::fs;
use std::io::Write;
use std::path::Path;

use cad_core::data::SeriesMatrix;

use crate::error::{CliError, Result};

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Formats a value so that parsing it back yields the same bits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

fn parse_real(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok()
}

/// Loads a comma-separated numeric matrix, one timestamp per line.
///
/// A first line that does not parse as numbers is taken as a header.
pub fn load_series(path: &Path) -> Result<SeriesMatrix> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| CliError::parse(path, format!("line {line}: {e}")))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(parse_real).collect();
        if i == 0 && parsed.iter().any(Option::is_none) {
            continue;
        }
        let w = *width.get_or_insert(parsed.len());
        if parsed.len() != w {
            return Err(CliError::parse(
                path,
                format!("line {line}: expected {w} columns, found {}", parsed.len()),
            ));
        }
        let mut row = Vec::with_capacity(w);
        for (col, (v, raw)) in parsed.into_iter().zip(record.iter()).enumerate() {
            match v {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(CliError::parse(
                        path,
                        format!("line {line}, column {}: not a finite number: {raw:?}", col + 1),
                    ))
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::parse(path, "no data rows"));
    }
    let entity = path
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SeriesMatrix::from_rows(&rows)?.with_entity(entity))
}

/// Loads binary labels, one per line. `1.0`-style spellings are accepted.
pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let text = read_text(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match parse_real(t) {
            Some(0.0) => labels.push(0),
            Some(1.0) => labels.push(1),
            None if i == 0 => {}
            _ => {
                return Err(CliError::parse(
                    path,
                    format!("line {}: label must be 0 or 1, found {t:?}", i + 1),
                ))
            }
        }
    }
    if labels.is_empty() {
        return Err(CliError::parse(path, "no labels"));
    }
    Ok(labels)
}

/// Loads a series and attaches labels from a second file.
pub fn load_labeled(series: &Path, labels: &Path) -> Result<SeriesMatrix> {
    let m = load_series(series)?;
    let l = load_labels(labels)?;
    if l.len() != m.len() {
        return Err(CliError::parse(
            labels,
            format!("{} labels for {} rows of {}", l.len(), m.len(), series.display()),
        ));
    }
    Ok(m.with_labels(l)?)
}

/// Scores file: one value per line.
pub fn format_scores(scores: &[f64]) -> String {
    let mut out = String::with_capacity(scores.len() * 20);
    for &s in scores {
        out.push_str(&fmt_real(s));
        out.push('\n');
    }
    out
}

pub fn load_scores(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match parse_real(t) {
            Some(v) if !v.is_nan() => scores.push(v),
            _ => {
                return Err(CliError::parse(
                    path,
                    format!("line {}: not a score: {t:?}", i + 1),
                ))
            }
        }
    }
    if scores.is_empty() {
        return Err(CliError::parse(path, "no scores"));
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn series_with_and_without_header() {
        let d = tempfile::tempdir().unwrap();
        let a = load_series(&file(&d, "a.csv", "0.1,0.2\n0.3,0.4\n")).unwrap();
        let b = load_series(&file(&d, "b.csv", "cpu,mem\n0.1,0.2\n0.3,0.4\n")).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!((a.len(), a.metrics()), (2, 2));
    }

    #[test]
    fn ragged_and_non_numeric_rows_are_located() {
        let d = tempfile::tempdir().unwrap();
        let e = load_series(&file(&d, "r.csv", "1,2\n3\n")).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = load_series(&file(&d, "n.csv", "1,2\n3,x\n")).unwrap_err();
        assert!(e.to_string().contains("line 2, column 2"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn labels_must_be_binary_and_match_length() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(load_labels(&file(&d, "l", "0\n1\n1.0\n")).unwrap(), vec![0, 1, 1]);
        assert!(load_labels(&file(&d, "bad", "0\n2\n")).is_err());
        let s = file(&d, "s.csv", "1\n2\n");
        let l = file(&d, "l3", "0\n1\n0\n");
        assert!(load_labeled(&s, &l).is_err());
    }

    #[test]
    fn scores_roundtrip_bitwise() {
        let d = tempfile::tempdir().unwrap();
        let v = vec![0.1, 1.0 / 3.0, 1e-300, 123456.789, 0.0];
        let p = d.path().join("s.txt");
        write_atomic(&p, format_scores(&v).as_bytes()).unwrap();
        let back = load_scores(&p).unwrap();
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("x/y/z.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
