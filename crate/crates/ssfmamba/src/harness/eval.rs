//! Checkpoint evaluation: argmax segmentation, region metrics, reporting.

use std::path::Path;

use crate::data;
use crate::diffcore::NdArray;
use crate::error::{Error, Result};
use crate::harness::metrics::{compose_regions, dice, hd95, REGION_NAMES};
use crate::network::{self, Model};

/// Per-voxel argmax over the class axis of [K, ...spatial] logits; ties go to
/// the lowest class id.
pub fn argmax_labels(logits: &NdArray) -> Vec<u8> {
    let k = logits.shape()[0];
    let m: usize = logits.shape()[1..].iter().product();
    let z = logits.data();
    let mut out = Vec::with_capacity(m);
    for col in 0..m {
        let mut best = 0usize;
        let mut best_v = z[col];
        for ch in 1..k {
            let v = z[ch * m + col];
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        out.push(best as u8);
    }
    out
}

#[derive(Clone, Debug)]
pub struct CaseMetrics {
    pub id: String,
    /// WT, TC, ET order.
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: [f64; 3],
    pub mean_hd95: [f64; 3],
    pub wall_seconds: f64,
    pub config_echo: String,
}

impl MetricsReport {
    /// Aligned human-readable table.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "case", "WT.dice", "TC.dice", "ET.dice", "WT.hd95", "TC.hd95", "ET.hd95"
        ));
        for c in &self.cases {
            s.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.3} {:>8.3}\n",
                c.id, c.dice[0], c.dice[1], c.dice[2], c.hd95[0], c.hd95[1], c.hd95[2]
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.3} {:>8.3}\n",
            "mean",
            self.mean_dice[0],
            self.mean_dice[1],
            self.mean_dice[2],
            self.mean_hd95[0],
            self.mean_hd95[1],
            self.mean_hd95[2]
        ));
        s.push_str(&format!("wall_seconds={:.3}\n", self.wall_seconds));
        s
    }

    /// One parse-friendly line per case-region plus means.
    pub fn machine_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.cases {
            for (r, name) in REGION_NAMES.iter().enumerate() {
                out.push(format!(
                    "case={} region={name} dice={} hd95={}",
                    c.id, c.dice[r], c.hd95[r]
                ));
            }
        }
        for (r, name) in REGION_NAMES.iter().enumerate() {
            out.push(format!(
                "mean region={name} dice={} hd95={}",
                self.mean_dice[r], self.mean_hd95[r]
            ));
        }
        out
    }
}

/// Region metrics between predicted and reference voxel class ids.
pub fn case_metrics(
    id: &str,
    pred: &[u8],
    gt: &[u8],
    dims: (usize, usize, usize),
) -> Result<CaseMetrics> {
    let pred_regions = compose_regions(pred)?;
    let gt_regions = compose_regions(gt)?;
    let mut d = [0.0; 3];
    let mut h = [0.0; 3];
    for r in 0..3 {
        d[r] = dice(&pred_regions[r], &gt_regions[r])?;
        h[r] = hd95(&pred_regions[r], &gt_regions[r], dims)?;
    }
    Ok(CaseMetrics {
        id: id.to_string(),
        dice: d,
        hd95: h,
    })
}

/// Run the model over every case in a dataset directory.
pub fn evaluate(model: &Model, data_dir: &Path) -> Result<MetricsReport> {
    let started = std::time::Instant::now();
    let ids = data::list_cases(data_dir)?;
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no cases found in {}",
            data_dir.display()
        )));
    }
    let mut cases = Vec::with_capacity(ids.len());
    for id in &ids {
        let case = data::load_case(data_dir, id)?;
        let channels = case.image.shape()[0];
        if channels != model.config.in_channels {
            return Err(Error::Config(format!(
                "case {id} has {channels} modalities, model expects {}",
                model.config.in_channels
            )));
        }
        let logits = network::forward(model, &case.image)?;
        let pred = argmax_labels(&logits);
        cases.push(case_metrics(id, &pred, &case.labels, case.dims())?);
    }
    let mut mean_dice = [0.0; 3];
    let mut mean_hd95 = [0.0; 3];
    for c in &cases {
        for r in 0..3 {
            mean_dice[r] += c.dice[r];
            mean_hd95[r] += c.hd95[r];
        }
    }
    for r in 0..3 {
        mean_dice[r] /= cases.len() as f64;
        mean_hd95[r] /= cases.len() as f64;
    }
    Ok(MetricsReport {
        cases,
        mean_dice,
        mean_hd95,
        wall_seconds: started.elapsed().as_secs_f64(),
        config_echo: serde_json::to_string(&model.config)?,
    })
}
