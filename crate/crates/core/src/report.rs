//! Training reports: one record per epoch, serializable as CSV (a row
//! per epoch) and JSON (the full document, geometry vectors included).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::GeometryStats;
use crate::losses::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub top1: f64,
    pub top5: f64,
    pub geometry: GeometryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Mean loss decomposition over the epoch's batches.
    pub loss: LossBreakdown,
    /// Running top-1 accuracy over the training batches (pre-update
    /// predictions).
    pub train_top1: f64,
    pub eval: Option<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    /// Evaluation of the freshly initialized model, before any update.
    pub init_eval: Option<EvalRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "epoch,lr,ce,kl,soa,coa,ca,total,train_top1,eval_top1,eval_top5,offdiag_cos_mean,offdiag_cos_max,within_class_cos_mean,accuracy_std";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let (top1, top5, odm, odx, wc, astd) = match &e.eval {
                Some(ev) => (
                    Some(ev.top1),
                    Some(ev.top5),
                    ev.geometry.offdiag_cos_mean,
                    ev.geometry.offdiag_cos_max,
                    Some(ev.geometry.within_class_cos_mean),
                    Some(ev.geometry.accuracy_std),
                ),
                None => (None, None, None, None, None, None),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.loss.ce,
                e.loss.kl,
                e.loss.soa,
                e.loss.coa,
                e.loss.ca,
                e.loss.total,
                e.train_top1,
                opt(top1),
                opt(top5),
                opt(odm),
                opt(odx),
                opt(wc),
                opt(astd),
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv_string())
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json)
    }

    pub fn load_json(path: &Path) -> std::io::Result<TrainReport> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
