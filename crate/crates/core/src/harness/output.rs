//! Run records and their JSONL / CSV serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::OutputFormat;
use crate::error::{Error, Result};
use crate::hypergrad::OpCounters;

/// Oracle bookkeeping at record time. `comm_rounds` counts synchronous
/// rounds (every node takes part in each); the evaluation counts are summed
/// over nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub comm_rounds: u64,
    pub grad_evals: u64,
    pub grad_samples: u64,
    pub jvp_evals: u64,
    pub hvp_evals: u64,
}

impl CounterSnapshot {
    pub fn from_nodes(per_node: &[OpCounters]) -> Self {
        let mut s = Self {
            comm_rounds: per_node.first().map_or(0, |c| c.comm_rounds),
            ..Self::default()
        };
        for c in per_node {
            s.grad_evals += c.grad_evals;
            s.grad_samples += c.grad_samples;
            s.jvp_evals += c.jvp_evals;
            s.hvp_evals += c.hvp_evals;
        }
        s
    }
}

/// Metrics at the network-mean iterate after `t` iterations.
///
/// Non-finite scalars (a run about to diverge) are written as JSON `null`
/// and read back as NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub t: usize,
    #[serde(with = "lossy_f64")]
    pub upper_loss: f64,
    pub val_accuracy: Option<f64>,
    /// `None` when the reference hypergradient could not be computed.
    pub grad_norm_sq: Option<f64>,
    /// Only available for instances with a closed-form inner solution.
    pub y_gap_sq: Option<f64>,
    #[serde(with = "lossy_f64")]
    pub consensus_x: f64,
    #[serde(with = "lossy_f64")]
    pub consensus_y: f64,
    pub counters: CounterSnapshot,
    pub wall_clock_s: f64,
}

mod lossy_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl RunRecord {
    /// Equality of every field except the wall clock.
    pub fn same_metrics(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_s: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Column order of the CSV output.
pub const CSV_HEADER: [&str; 13] = [
    "t",
    "upper_loss",
    "val_accuracy",
    "grad_norm_sq",
    "y_gap_sq",
    "consensus_x",
    "consensus_y",
    "comm_rounds",
    "grad_evals",
    "grad_samples",
    "jvp_evals",
    "hvp_evals",
    "wall_clock_s",
];

#[derive(Serialize)]
struct CsvRow {
    t: usize,
    upper_loss: f64,
    val_accuracy: Option<f64>,
    grad_norm_sq: Option<f64>,
    y_gap_sq: Option<f64>,
    consensus_x: f64,
    consensus_y: f64,
    comm_rounds: u64,
    grad_evals: u64,
    grad_samples: u64,
    jvp_evals: u64,
    hvp_evals: u64,
    wall_clock_s: f64,
}

impl From<&RunRecord> for CsvRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            t: r.t,
            upper_loss: r.upper_loss,
            val_accuracy: r.val_accuracy,
            grad_norm_sq: r.grad_norm_sq,
            y_gap_sq: r.y_gap_sq,
            consensus_x: r.consensus_x,
            consensus_y: r.consensus_y,
            comm_rounds: r.counters.comm_rounds,
            grad_evals: r.counters.grad_evals,
            grad_samples: r.counters.grad_samples,
            jvp_evals: r.counters.jvp_evals,
            hvp_evals: r.counters.hvp_evals,
            wall_clock_s: r.wall_clock_s,
        }
    }
}

/// Streaming record writer; every record is flushed as soon as it is written.
pub enum RecordWriter<W: Write> {
    Jsonl(W),
    Csv(csv::Writer<W>),
}

impl RecordWriter<BufWriter<File>> {
    pub fn create(path: &Path, format: OutputFormat) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?), format))
    }
}

impl<W: Write> RecordWriter<W> {
    pub fn new(inner: W, format: OutputFormat) -> Self {
        match format {
            OutputFormat::Jsonl => Self::Jsonl(inner),
            OutputFormat::Csv => Self::Csv(
                csv::WriterBuilder::new()
                    .has_headers(true)
                    .from_writer(inner),
            ),
        }
    }

    pub fn write(&mut self, record: &RunRecord) -> Result<()> {
        match self {
            Self::Jsonl(w) => {
                serde_json::to_writer(&mut *w, record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            Self::Csv(w) => {
                w.serialize(CsvRow::from(record))?;
                w.flush()?;
            }
        }
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        match self {
            Self::Jsonl(w) => Ok(w),
            Self::Csv(w) => w
                .into_inner()
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string()))),
        }
    }
}

/// Writes `records` to `path` in `format`.
pub fn emit<'a>(
    records: impl IntoIterator<Item = &'a RunRecord>,
    format: OutputFormat,
    path: &Path,
) -> Result<()> {
    let mut w = RecordWriter::create(path, format)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

/// Reads a JSONL record file.
pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Summary statistics of a record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub records: usize,
    pub first_t: usize,
    pub last_t: usize,
    pub initial_upper_loss: f64,
    pub final_upper_loss: f64,
    pub min_upper_loss: f64,
    pub min_upper_loss_t: usize,
    pub final_val_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
    pub final_consensus_x: f64,
    pub final_consensus_y: f64,
    pub final_counters: CounterSnapshot,
    pub wall_clock_s: f64,
}

pub fn summarize(records: &[RunRecord]) -> Result<RecordSummary> {
    let (Some(first), Some(last)) = (records.first(), records.last()) else {
        return Err(Error::EmptyDataset);
    };
    let best = records
        .iter()
        .min_by(|a, b| a.upper_loss.total_cmp(&b.upper_loss))
        .expect("non-empty");
    let best_acc = records
        .iter()
        .filter_map(|r| r.val_accuracy)
        .max_by(|a, b| a.total_cmp(b));
    Ok(RecordSummary {
        records: records.len(),
        first_t: first.t,
        last_t: last.t,
        initial_upper_loss: first.upper_loss,
        final_upper_loss: last.upper_loss,
        min_upper_loss: best.upper_loss,
        min_upper_loss_t: best.t,
        final_val_accuracy: last.val_accuracy,
        best_val_accuracy: best_acc,
        final_grad_norm_sq: last.grad_norm_sq,
        final_consensus_x: last.consensus_x,
        final_consensus_y: last.consensus_y,
        final_counters: last.counters,
        wall_clock_s: last.wall_clock_s,
    })
}

/// Summary of a JSONL record file.
pub fn inspect(path: &Path) -> Result<RecordSummary> {
    summarize(&read_jsonl(path)?)
}
