use std::io::Write;

use crate::error::{Error, Result};

/// Shortest decimal representation that parses back to the same value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Write each line of `comment` prefixed with `# `.
pub(crate) fn write_comment<W: Write>(out: &mut W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(line, e.to_string())
}
