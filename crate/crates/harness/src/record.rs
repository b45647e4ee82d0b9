//! Run artifacts: the JSON run record, JSON-lines step trace, ledger
//! summary and one-row summary CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use isp_core::flops::step_flops_kept;
use isp_core::ledger::{BudgetLedger, LedgerSummary, TraceRow};
use isp_core::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

pub const RECORD_SCHEMA: &str = "isp-run/1";
pub const TRACE_SCHEMA: &str = "isp-trace/1";
pub const LEDGER_SCHEMA: &str = "isp-ledger/1";
pub const SUMMARY_SCHEMA: &str = "isp-summary/1";

pub const SUMMARY_HEADER: &str = "schema,config_hash,method,seed,test_accuracy,val_accuracy,sparsity,kept,total,total_steps,total_flops,budget";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallSummary {
    pub index: usize,
    pub step: u64,
    pub target_kept: usize,
    pub kept: usize,
    pub sparsity: f64,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub command: String,
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub spec: ModelSpec,
    pub batch_size: usize,
    /// Single-pass budget `T`.
    pub budget: u64,
    pub final_test_accuracy: f64,
    pub final_val_accuracy: f64,
    pub final_sparsity: f64,
    pub kept: usize,
    pub total: usize,
    pub ledger: LedgerSummary,
    /// Charged steps divided by `T`.
    pub budget_ratio: f64,
    pub calls: Vec<CallSummary>,
    /// Artifact file names relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn summary_row(&self) -> String {
        format!(
            "{SUMMARY_SCHEMA},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.method,
            self.seed,
            self.final_test_accuracy,
            self.final_val_accuracy,
            self.final_sparsity,
            self.kept,
            self.total,
            self.ledger.total_steps,
            self.ledger.total_flops,
            self.budget
        )
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join("record.json");
        let text =
            fs::read_to_string(&path).map_err(HarnessError::io(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            what: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    schema: String,
    #[serde(flatten)]
    row: TraceRow,
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    schema: &'a str,
    #[serde(flatten)]
    summary: &'a LedgerSummary,
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(HarnessError::io(format!("writing {}", path.display())))
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(HarnessError::io(format!("creating {}", dir.display())))
}

pub fn write_trace(path: &Path, ledger: &BudgetLedger) -> Result<(), HarnessError> {
    let mut out = String::new();
    for row in ledger.trace() {
        let line = TraceLine {
            schema: TRACE_SCHEMA.into(),
            row: row.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("trace row serializes"));
        out.push('\n');
    }
    write(path, out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<TraceLine>(l)
                .map(|t| t.row)
                .map_err(|e| HarnessError::Parse {
                    what: format!("{} line {}", path.display(), i + 1),
                    detail: e.to_string(),
                })
        })
        .collect()
}

/// FLOPs implied by a step trace, recomputed row by row.
pub fn trace_flops(spec: &ModelSpec, trace: &[TraceRow]) -> u64 {
    trace
        .iter()
        .map(|r| step_flops_kept(spec, r.batch, r.kept))
        .sum()
}

pub fn write_ledger(path: &Path, ledger: &BudgetLedger) -> Result<(), HarnessError> {
    let summary = ledger.summary();
    let file = LedgerFile {
        schema: LEDGER_SCHEMA,
        summary: &summary,
    };
    write(
        path,
        serde_json::to_string_pretty(&file).expect("ledger serializes"),
    )
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<PathBuf, HarnessError> {
    let path = dir.join("record.json");
    write(
        &path,
        serde_json::to_string_pretty(record).expect("record serializes"),
    )?;
    let mut csv = String::from(SUMMARY_HEADER);
    let _ = write!(csv, "\n{}\n", record.summary_row());
    write(&dir.join("summary.csv"), csv)?;
    Ok(path)
}
