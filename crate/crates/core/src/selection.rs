//! Checkpoint selection over a training trace, plus CSV export of the trace.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::trainer::{CheckpointTrace, TraceEntry};

pub const TRACE_HEADER: [&str; 6] = ["epoch", "perplexity", "accuracy", "entropy", "erp", "checkpoint"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionCriterion {
    Perplexity,
    /// `ln(perplexity) + mean entropy`.
    Erp,
}

impl SelectionCriterion {
    /// Score to minimize. ERP is recomputed from the stored perplexity and
    /// entropy, not read from the stored `erp` field.
    pub fn score(self, metrics: &MetricsRecord) -> f64 {
        match self {
            Self::Perplexity => metrics.perplexity,
            Self::Erp => metrics.perplexity.ln() + metrics.mean_entropy,
        }
    }
}

impl FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ppx" | "perplexity" => Ok(Self::Perplexity),
            "erp" => Ok(Self::Erp),
            other => Err(Error::InvalidParameter(format!(
                "unknown criterion {other:?} (expected ppx or erp)"
            ))),
        }
    }
}

impl fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Perplexity => "ppx",
            Self::Erp => "erp",
        })
    }
}

/// Entry minimizing `criterion`; the earliest epoch wins ties.
pub fn select_checkpoint(trace: &CheckpointTrace, criterion: SelectionCriterion) -> Result<&TraceEntry> {
    let mut best: Option<(&TraceEntry, f64)> = None;
    for entry in &trace.entries {
        let score = criterion.score(&entry.metrics);
        if score.is_nan() {
            return Err(Error::NonFinite("trace metrics"));
        }
        match best {
            Some((_, s)) if s <= score => {}
            _ => best = Some((entry, score)),
        }
    }
    best.map(|(e, _)| e).ok_or(Error::EmptyDataset)
}

/// Write the trace as CSV. Reals use the shortest representation that
/// parses back to the same f64.
pub fn export_trace(trace: &CheckpointTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidParameter("empty output path".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write_trace(trace, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(trace: &CheckpointTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_io)?;
    for e in &trace.entries {
        let m = &e.metrics;
        w.write_record([
            e.epoch.to_string(),
            m.perplexity.to_string(),
            m.accuracy.to_string(),
            m.mean_entropy.to_string(),
            m.erp.to_string(),
            e.checkpoint.clone(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace written by [`export_trace`]. Frame counts are not stored and
/// come back as zero.
pub fn parse_trace(path: impl AsRef<Path>) -> Result<CheckpointTrace> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(csv_io)?;
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let header = reader.headers().map_err(csv_io)?.clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(parse_err(0, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != TRACE_HEADER.len() {
            return Err(parse_err(row, format!("expected 6 fields, got {}", record.len())));
        }
        let real = |k: usize| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .map_err(|e| parse_err(row, format!("{}: {e}", TRACE_HEADER[k])))
        };
        let epoch = record[0]
            .parse::<usize>()
            .map_err(|e| parse_err(row, format!("epoch: {e}")))?;
        entries.push(TraceEntry {
            epoch,
            metrics: MetricsRecord {
                perplexity: real(1)?,
                accuracy: real(2)?,
                mean_entropy: real(3)?,
                erp: real(4)?,
                num_frames: 0,
            },
            checkpoint: record[5].to_string(),
        });
    }
    Ok(CheckpointTrace {
        entries,
        config: None,
        history: Vec::new(),
    })
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}
