//! Canonical report serialization.
//!
//! Reports and plans serialize to JSON with a fixed key order (struct
//! declaration order) and floats rendered at 17 significant digits, so a
//! parse/re-export cycle is byte-identical and every number survives
//! losslessly.

use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::efa::EFAReport;
use crate::entropy::EntropyReport;
use crate::error::{Error, Result};
use crate::nn::ModelStats;
use crate::singularity::SingularityReport;

struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

/// Serializes with deterministic key order and 17-significant-digit
/// floats.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter);
    value.serialize(&mut ser)?;
    String::from_utf8(out).map_err(|e| Error::Parse(e.to_string()))
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

/// Atomic canonical export: temp file then rename.
pub fn export_report<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = canonical_json(value)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn import_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(text.trim_end_matches('\n'))
}

/// Bundle written by the analysis stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisDocument {
    pub efa: EFAReport,
    pub entropy: EntropyReport,
    pub singularity: SingularityReport,
}

/// One side of a model comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRow {
    pub label: String,
    pub top1_accuracy: f64,
    pub stats: ModelStats,
}

/// Baseline-versus-pruned comparison in the filters/parameters/FLOPs
/// pruned-ratio format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonDocument {
    pub baseline: ModelRow,
    pub pruned: ModelRow,
    pub accuracy_delta: f64,
    pub filters_pruned_ratio: f64,
    pub parameters_pruned_ratio: f64,
    pub flops_pruned_ratio: f64,
}

impl ComparisonDocument {
    pub fn new(baseline: ModelRow, pruned: ModelRow) -> Self {
        let pr = |a: usize, b: usize| {
            if a == 0 {
                0.0
            } else {
                1.0 - b as f64 / a as f64
            }
        };
        ComparisonDocument {
            accuracy_delta: pruned.top1_accuracy - baseline.top1_accuracy,
            filters_pruned_ratio: pr(baseline.stats.filters, pruned.stats.filters),
            parameters_pruned_ratio: pr(baseline.stats.parameters, pruned.stats.parameters),
            flops_pruned_ratio: pr(baseline.stats.flops, pruned.stats.flops),
            baseline,
            pruned,
        }
    }
}
