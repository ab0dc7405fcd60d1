//! Tab-separated id/text files (collections and query sets) and the id
//! ordering shared by every ranked list.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Id order used for tie-breaking: ids that parse as unsigned integers come
/// first in numeric order, all other ids follow in byte order.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Read `id<TAB>text` lines. Blank lines are skipped; ids must be unique.
pub fn read_id_text<R: BufRead>(r: R) -> Result<Vec<(String, String)>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: i + 1,
            msg: "expected id<TAB>text".into(),
        })?;
        let id = id.trim();
        if id.is_empty() {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "empty id".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(DataError::DuplicateId(id.to_string()));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn load_id_text(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, DataError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|source| DataError::File {
        path: path.display().to_string(),
        source,
    })?;
    read_id_text(std::io::BufReader::new(f))
}

pub fn write_id_text<W: std::io::Write>(mut w: W, rows: &[(String, String)]) -> std::io::Result<()> {
    for (id, text) in rows {
        writeln!(w, "{id}\t{text}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_ids_sort_numerically() {
        assert_eq!(compare_ids("9", "10"), Ordering::Less);
        assert_eq!(compare_ids("b", "a"), Ordering::Greater);
        assert_eq!(compare_ids("10", "a"), Ordering::Less);
        assert_eq!(compare_ids("007", "7"), Ordering::Less);
        let mut ids = vec!["10", "2", "x", "1", "1a", "9"];
        ids.sort_by(|a, b| compare_ids(a, b));
        assert_eq!(ids, ["1", "2", "9", "10", "1a", "x"]);
    }

    #[test]
    fn reads_and_rejects() {
        let rows = read_id_text("1\tcat sat\n\n2\tdog\r\n".as_bytes()).unwrap();
        assert_eq!(rows, vec![("1".into(), "cat sat".into()), ("2".into(), "dog".into())]);
        assert!(matches!(read_id_text("1\ta\n1\tb\n".as_bytes()), Err(DataError::DuplicateId(_))));
        assert!(matches!(read_id_text("nope\n".as_bytes()), Err(DataError::Parse { line: 1, .. })));
    }
}
