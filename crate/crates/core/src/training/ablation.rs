use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{train_on, TrainConfig};
use crate::data::{batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EVAL_BATCH;
use crate::segnet::load_checkpoint;

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub t: usize,
    pub mean_dsc: f64,
    pub mean_hd95: f64,
    /// Fraction of exactly-zero entries in the final `gamma2` of every
    /// decoder stage, pooled over the validation split.
    pub final_sparsity_gamma2: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "T,mean_dsc,mean_hd95,final_sparsity_gamma2";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.t, self.mean_dsc, self.mean_hd95, self.final_sparsity_gamma2
        )
    }
}

/// Pooled zero fraction of the last `gamma2` snapshot of every stage of the
/// checkpointed network on `data.val`.
pub fn final_sparsity(checkpoint: &Path, data: &Dataset) -> Result<f64> {
    let mut net = load_checkpoint::<f32>(checkpoint)?;
    let (mut zeros, mut total) = (0usize, 0usize);
    for chunk in data.val.chunks(EVAL_BATCH) {
        let items: Vec<_> = chunk.iter().map(|c| (&c.image[..], &c.mask)).collect();
        let (x, _) = batch::<f32>(&items)?;
        let (_, traces) = net.logits_traced(&x)?;
        for snap in traces.iter().filter_map(|t| t.snapshots.last()) {
            zeros += snap.gamma2.iter().filter(|&&v| v == 0.0).count();
            total += snap.gamma2.len();
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        zeros as f64 / total as f64
    })
}

/// Trains one model per `T` (applied to every decoder stage) with otherwise
/// identical settings, into `out/T{t}`, and appends one row per model to
/// `out/ablation.csv` as soon as it is done.
pub fn ablate_t(
    base: &TrainConfig,
    data: &Dataset,
    ts: &[usize],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if ts.is_empty() {
        return Err(Error::Config("need at least one T".into()));
    }
    fs::create_dir_all(out)?;
    let mut csv = BufWriter::new(File::create(out.join(ABLATION_FILE))?);
    writeln!(csv, "{}", AblationRow::CSV_HEADER)?;
    csv.flush()?;
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut cfg = base.clone();
        cfg.model.set_all_iterations(t);
        cfg.out = out.join(format!("T{t}"));
        let outcome = train_on(&cfg, data)?;
        let row = AblationRow {
            t,
            mean_dsc: outcome.report.mean_dsc,
            mean_hd95: outcome.report.mean_hd95,
            final_sparsity_gamma2: final_sparsity(&outcome.checkpoint, data)?,
        };
        writeln!(csv, "{}", row.csv_row())?;
        csv.flush()?;
        rows.push(row);
    }
    Ok(rows)
}
