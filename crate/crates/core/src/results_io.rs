//! Defense results as line-delimited JSON, one [`DefenseResult`] per line.

use std::io::{BufRead, Write};

use crate::error::{BirdError, Result};
use crate::filter::DefenseResult;

pub fn write_results<W: Write>(results: &[DefenseResult], mut out: W) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r).map_err(|e| BirdError::invalid(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| BirdError::io("<results writer>", e))?;
    }
    Ok(())
}

pub fn results_to_bytes(results: &[DefenseResult]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_results(results, &mut buf)?;
    Ok(buf)
}

pub fn read_results<R: BufRead>(input: R) -> Result<Vec<DefenseResult>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| BirdError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BirdError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
