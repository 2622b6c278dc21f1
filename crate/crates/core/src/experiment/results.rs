use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// One line of a results file:
/// `config_hash  seed  coordinate  metric  value  unix_millis`, tab-separated.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub config_hash: String,
    pub seed: u64,
    pub coordinate: String,
    pub metric: String,
    pub value: f64,
    pub unix_millis: u128,
}

impl ResultRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.config_hash, self.seed, self.coordinate, self.metric, self.value, self.unix_millis
        )
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self> {
        let err = |message: String| Error::Parse { line: lineno, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [hash, seed, coordinate, metric, value, millis] = fields.as_slice() else {
            return Err(err(format!("expected 6 tab-separated fields, got {}", fields.len())));
        };
        Ok(Self {
            config_hash: hash.to_string(),
            seed: seed.parse().map_err(|e| err(format!("seed: {e}")))?,
            coordinate: coordinate.to_string(),
            metric: metric.to_string(),
            value: value.parse().map_err(|e| err(format!("value: {e}")))?,
            unix_millis: millis.parse().map_err(|e| err(format!("unix_millis: {e}")))?,
        })
    }
}

pub fn write_records<W: Write>(records: &[ResultRecord], mut out: W) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    out.flush()?;
    Ok(())
}

/// Blank lines are skipped.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ResultRecord::parse(&line, i + 1)?);
    }
    Ok(out)
}
