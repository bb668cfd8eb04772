//! Loss-combination ablations against a shared teacher.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AnysegError, Result};

use super::config::{ExperimentConfig, LossToggles};
use super::eval::{evaluate_anymodal, EvalTable};
use super::train::train_student;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub toggles: LossToggles,
}

impl AblationVariant {
    pub fn new(toggles: LossToggles) -> Self {
        Self {
            name: toggles.to_string().replace(',', "+"),
            toggles,
        }
    }

    /// The cumulative loss combinations plus the fused-feature variant.
    pub fn standard() -> Vec<Self> {
        [
            LossToggles::SUP,
            LossToggles::SUP_MAD,
            LossToggles::SUP_MAD_UMD,
            LossToggles::FULL,
            LossToggles::FULL_FUSED_KD,
        ]
        .into_iter()
        .map(Self::new)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// `Err` holds the message of an aborted run.
    pub outcome: std::result::Result<EvalTable, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn table(&self, name: &str) -> Option<&EvalTable> {
        self.rows
            .iter()
            .find(|r| r.variant.name == name)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    /// Subset mIoUs and Mean in points, then the same columns as
    /// differences to the first row. Failed runs show `FAILED` and their
    /// message.
    pub fn to_csv(&self) -> String {
        let columns: Vec<String> = self
            .rows
            .iter()
            .find_map(|r| r.outcome.as_ref().ok())
            .map(|t| t.rows.iter().map(|r| r.subset.label()).chain(["Mean".into()]).collect())
            .unwrap_or_default();
        let values = |t: &EvalTable| -> Vec<f64> {
            t.rows
                .iter()
                .map(|r| 100.0 * r.result.miou)
                .chain([100.0 * t.mean])
                .collect()
        };
        let base = self.rows.first().and_then(|r| r.outcome.as_ref().ok()).map(values);
        let mut out = String::from("variant,status");
        for c in &columns {
            let _ = write!(out, ",{c}");
        }
        for c in &columns {
            let _ = write!(out, ",d_{c}");
        }
        out.push('\n');
        for row in &self.rows {
            match &row.outcome {
                Ok(t) => {
                    let v = values(t);
                    let _ = write!(out, "{},ok", row.variant.name);
                    for x in &v {
                        let _ = write!(out, ",{x:.2}");
                    }
                    for (i, x) in v.iter().enumerate() {
                        match &base {
                            Some(b) => {
                                let _ = write!(out, ",{:+.2}", x - b[i]);
                            }
                            None => out.push(','),
                        }
                    }
                }
                Err(msg) => {
                    let _ = write!(out, "{},FAILED: {}", row.variant.name, msg.replace([',', '\n'], ";"));
                    out.push_str(&",".repeat(2 * columns.len()));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| AnysegError::io(path, e))
    }
}

/// Trains one student per variant from the same seed and teacher, writes
/// each run under `out_dir/<variant>` and evaluates it on `eval`. A failed
/// run is recorded in its row and the remaining variants still run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train: &Dataset,
    eval: &Dataset,
    teacher_checkpoint: &Path,
    variants: &[AblationVariant],
    out_dir: &Path,
) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut run_cfg = cfg.clone();
        run_cfg.toggles = v.toggles;
        let dir = out_dir.join(v.name.replace('+', "_"));
        let outcome = train_student(&run_cfg, train, teacher_checkpoint, &dir).and_then(|s| {
            let table = evaluate_anymodal(&s.run.params, eval)?;
            table.write_csv(&dir.join("eval.csv"))?;
            Ok(table)
        });
        rows.push(AblationRow {
            variant: v.clone(),
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    let table = AblationTable { rows };
    fs::create_dir_all(out_dir).map_err(|e| AnysegError::io(out_dir, e))?;
    table.write_csv(&out_dir.join("ablation.csv"))?;
    Ok(table)
}
