//! Model files: header `n m`, then the `A`, `H`, `Q`, `R` blocks.
//!
//! ```text
//! # states: delta_1 omega_1
//! # measurements: theta_1
//! 2 1
//! 1 0.01
//! 0 1
//!
//! 1 0
//!
//! 0.0001 0
//! 0 0.0001
//!
//! 0.0001
//! ```

use super::SystemModel;
use crate::error::{Error, Result};
use crate::textfmt::{self, Document};

pub fn parse_model(text: &str) -> Result<SystemModel> {
    let doc = textfmt::parse(text)?;
    let (n, m) = match doc.header.as_slice() {
        [n, m] => (*n, *m),
        _ => return Err(Error::parse(0, "model header must be `n m`")),
    };
    if n == 0 || m == 0 {
        return Err(Error::parse(0, "model dimensions must be positive"));
    }
    if doc.blocks.len() != 4 {
        return Err(Error::parse(0, format!("expected 4 matrix blocks, found {}", doc.blocks.len())));
    }
    let a = textfmt::expect_shape(&doc, 0, "A", n, n)?;
    let h = textfmt::expect_shape(&doc, 1, "H", m, n)?;
    let q = textfmt::expect_shape(&doc, 2, "Q", n, n)?;
    let r = textfmt::expect_shape(&doc, 3, "R", m, m)?;
    let labels = |key: &str, count: usize, prefix: &str| -> Result<Vec<String>> {
        match doc.meta(key) {
            Some(v) => {
                let l: Vec<String> = v.split_whitespace().map(str::to_string).collect();
                if l.len() != count {
                    return Err(Error::parse(0, format!("`{key}` lists {} names, expected {count}", l.len())));
                }
                Ok(l)
            }
            None => Ok((1..=count).map(|i| format!("{prefix}{i}")).collect()),
        }
    };
    let states = labels("states", n, "x")?;
    let meas = labels("measurements", m, "z")?;
    SystemModel::with_labels(a, h, q, r, states, meas)
}

pub fn render_model(model: &SystemModel) -> String {
    let doc = Document {
        header: vec![model.n(), model.m()],
        blocks: vec![model.a().clone(), model.h().clone(), model.q().clone(), model.r().clone()],
        meta: vec![
            ("states".into(), model.state_labels().join(" ")),
            ("measurements".into(), model.meas_labels().join(" ")),
        ],
    };
    textfmt::render(&doc)
}
