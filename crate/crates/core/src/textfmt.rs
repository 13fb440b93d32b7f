//! Plain-text matrix block format shared by model files and decomposition
//! dumps.
//!
//! A document is a header line of non-negative integers followed by matrix
//! blocks separated by one or more blank lines. Each block is row-major, one
//! row per line, entries separated by whitespace. Lines starting with `#` are
//! comments; a comment of the form `# key: value` is kept as metadata.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    pub header: Vec<usize>,
    pub blocks: Vec<Matrix>,
    pub meta: Vec<(String, String)>,
}

impl Document {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct RawBlock {
    rows: Vec<Vec<f64>>,
}

/// Parse a document. Block shapes are checked by the caller via [`expect_shape`].
pub fn parse(text: &str) -> Result<Document> {
    let mut doc = Document::default();
    let mut header_seen = false;
    let mut raw: Vec<RawBlock> = Vec::new();
    let mut current: Option<RawBlock> = None;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once(':') {
                doc.meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if trimmed.is_empty() {
            if let Some(b) = current.take() {
                raw.push(b);
            }
            continue;
        }
        if !header_seen {
            doc.header = trimmed
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::parse(lineno, format!("invalid header entry `{t}`")))
                })
                .collect::<Result<_>>()?;
            header_seen = true;
            continue;
        }
        let row = trimmed
            .split_whitespace()
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(lineno, format!("invalid number `{t}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let block = current.get_or_insert_with(|| RawBlock { rows: Vec::new() });
        if let Some(first) = block.rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    lineno,
                    format!("row has {} entries, expected {}", row.len(), first.len()),
                ));
            }
        }
        block.rows.push(row);
    }
    if let Some(b) = current.take() {
        raw.push(b);
    }
    if !header_seen {
        return Err(Error::parse(1, "missing header line"));
    }
    for b in raw {
        let cols = b.rows[0].len();
        let flat: Vec<f64> = b.rows.iter().flatten().copied().collect();
        let m = Matrix::from_row_slice(b.rows.len(), cols, &flat);
        doc.blocks.push(m);
    }
    Ok(doc)
}

/// Check that block `idx` exists and has the given shape. A zero-width block
/// cannot be written as text, so `cols == 0` expects the block to be absent.
pub fn expect_shape(doc: &Document, idx: usize, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let block = doc
        .blocks
        .get(idx)
        .ok_or_else(|| Error::parse(0, format!("missing block `{name}`")))?;
    if block.nrows() != rows || block.ncols() != cols {
        return Err(Error::parse(
            0,
            format!(
                "block `{name}` is {}x{}, expected {rows}x{cols}",
                block.nrows(),
                block.ncols()
            ),
        ));
    }
    Ok(block.clone())
}

/// Render a document. Numbers use the shortest representation that parses
/// back to the same `f64`.
pub fn render(doc: &Document) -> String {
    let mut out = String::new();
    for (k, v) in &doc.meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    let header: Vec<String> = doc.header.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(out, "{}", header.join(" "));
    for (i, block) in doc.blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for r in 0..block.nrows() {
            let row: Vec<String> = (0..block.ncols()).map(|c| format!("{}", block[(r, c)])).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_blocks_and_meta() {
        let text = "# states: a b\n2 1\n1 2\n3 4\n\n\n5 6\n";
        let doc = parse(text).unwrap();
        assert_eq!(doc.header, vec![2, 1]);
        assert_eq!(doc.blocks.len(), 2);
        assert_eq!(doc.meta("states"), Some("a b"));
        assert_eq!(doc.blocks[1][(0, 1)], 6.0);
    }

    #[test]
    fn ragged_row_names_line() {
        let err = parse("1 1\n1 2\n3\n").unwrap_err();
        assert_eq!(err, Error::Parse { line: 3, msg: "row has 1 entries, expected 2".into() });
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(parse("1 1\nNaN\n"), Err(Error::Parse { line: 2, .. })));
    }
}
