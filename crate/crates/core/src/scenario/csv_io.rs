//! CSV export and import of scenario runs, and ingestion of external
//! measurement traces.
//!
//! A scenario file has one row per step with columns
//! `k, x1.., z_clean_1.., z_delivered_1.., a_1.., model`, channels numbered
//! from 1. Lines starting with `#` are comments.

use std::io::Write;

use super::{ModelPhase, ScenarioRun};
use crate::csvutil::{csv_err, fmt_f64, write_comment};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn write_scenario_csv<W: Write>(run: &ScenarioRun, mut out: W, comment: Option<&str>) -> Result<()> {
    write_comment(&mut out, comment)?;
    let n = run.states.ncols();
    let m = run.measurements_clean.ncols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("z_clean_{i}")));
    header.extend((1..=m).map(|i| format!("z_delivered_{i}")));
    header.extend((1..=m).map(|i| format!("a_{i}")));
    header.push("model".into());
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..run.states.nrows() {
        let mut rec = vec![k.to_string()];
        rec.extend(run.states.row(k).iter().map(|&v| fmt_f64(v)));
        rec.extend(run.measurements_clean.row(k).iter().map(|&v| fmt_f64(v)));
        rec.extend(run.measurements_delivered.row(k).iter().map(|&v| fmt_f64(v)));
        rec.extend(run.attack_trace.row(k).iter().map(|&v| fmt_f64(v)));
        rec.push(run.model_schedule[k].as_str().to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn numbered_columns(header: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix(prefix)
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|num| (num, i))
        })
        .collect();
    cols.sort_unstable();
    cols.into_iter().map(|(_, i)| i).collect()
}

fn parse_cell(rec: &csv::StringRecord, col: usize, line: usize, row: usize) -> Result<f64> {
    let cell = rec.get(col).unwrap_or("");
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::parse(line, format!("row {row}, column {}: `{cell}` is not a number", col + 1))),
    }
}

struct Table {
    header: csv::StringRecord,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_table(text: &str) -> Result<Table> {
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.is_empty() {
        return Err(Error::parse(1, "missing header row"));
    }
    let mut rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::parse(
                line,
                format!("row {row} has {} fields, expected {}", rec.len(), header.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok(Table { header, rows })
}

fn fill(table: &Table, cols: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(table.rows.len(), cols.len());
    for (row, (line, rec)) in table.rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            out[(row, j)] = parse_cell(rec, c, *line, row)?;
        }
    }
    Ok(out)
}

pub fn read_scenario_csv(text: &str) -> Result<ScenarioRun> {
    let table = read_table(text)?;
    let xs = numbered_columns(&table.header, "x");
    let clean = numbered_columns(&table.header, "z_clean_");
    let delivered = numbered_columns(&table.header, "z_delivered_");
    let attack = numbered_columns(&table.header, "a_");
    let model_col = table.header.iter().position(|h| h == "model");
    if xs.is_empty() || clean.is_empty() || clean.len() != delivered.len() || clean.len() != attack.len() {
        return Err(Error::parse(1, "header does not describe a scenario run"));
    }
    let model_col = model_col.ok_or_else(|| Error::parse(1, "missing `model` column"))?;
    let model_schedule = table
        .rows
        .iter()
        .enumerate()
        .map(|(row, (line, rec))| match rec.get(model_col) {
            Some("assumed") => Ok(ModelPhase::Assumed),
            Some("true") => Ok(ModelPhase::True),
            other => Err(Error::parse(*line, format!("row {row}: unknown model phase {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioRun {
        states: fill(&table, &xs)?,
        measurements_clean: fill(&table, &clean)?,
        measurements_delivered: fill(&table, &delivered)?,
        attack_trace: fill(&table, &attack)?,
        model_schedule,
    })
}

/// Read a `steps × m` measurement matrix. Scenario exports contribute their
/// `z_delivered_*` columns; any other file must hold exactly `m` channel
/// columns, optionally preceded by a `k` column.
pub fn read_measurements_csv(text: &str, m: usize) -> Result<Matrix> {
    let table = read_table(text)?;
    let delivered = numbered_columns(&table.header, "z_delivered_");
    let cols: Vec<usize> = if !delivered.is_empty() {
        delivered
    } else {
        let skip = usize::from(table.header.get(0) == Some("k"));
        (skip..table.header.len()).collect()
    };
    if cols.len() != m {
        return Err(Error::parse(1, format!("trace has {} measurement columns, model expects {m}", cols.len())));
    }
    if table.rows.is_empty() {
        return Err(Error::parse(2, "trace has no data rows"));
    }
    fill(&table, &cols)
}
