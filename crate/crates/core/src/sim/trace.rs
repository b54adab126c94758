//! JSON-lines rollout traces: one record per step.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::env::{HybridAction, Outcome, VehicleState};
use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub episode: u32,
    pub step: u32,
    /// Ego first, then every simulated neighbor.
    pub vehicles: Vec<VehicleState>,
    /// Action applied to reach this record; absent for the reset record.
    pub action: Option<HybridAction>,
    pub reward: f64,
    pub done: bool,
    pub outcome: Outcome,
}

pub fn write_records<W: Write>(out: &mut W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
