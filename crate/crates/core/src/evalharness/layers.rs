use std::path::Path;

use serde::Serialize;

use crate::calibration::{channel_avg, CalibrationArtifact};
use crate::datagen::ImageBatch;
use crate::error::{input_err, Result};
use crate::smallnet::ModelCheckpoint;

pub const SOURCE_ID: &str = "id";
pub const SOURCE_IMPRESSION: &str = "impression";
pub const SOURCE_BN: &str = "bn_running_mean";

/// One `(class, layer, source)` channel-weighted activation mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub class: usize,
    pub layer: usize,
    pub source: String,
    pub value: f64,
}

/// Mean weighted channel average per class and layer for ID samples of
/// that class, every OOD set (all samples), the impressions, and the BN
/// running means, all under the class's `β`.
pub fn emit_layer_comparison(
    checkpoint: &ModelCheckpoint,
    artifact: &CalibrationArtifact,
    id_batch: &ImageBatch,
    ood_batches: &[(&str, &ImageBatch)],
) -> Result<Vec<LayerRow>> {
    artifact.check_fingerprint(checkpoint)?;
    let net = checkpoint.net();
    let labels = id_batch.labels().ok_or_else(|| input_err("ID batch must be labeled"))?;
    let (_, id_taps) = net.forward_with_taps(id_batch.pixels())?;
    let ood_taps = ood_batches
        .iter()
        .map(|(name, b)| Ok((*name, net.forward_with_taps(b.pixels())?.1)))
        .collect::<Result<Vec<_>>>()?;
    let bn = net.bn_stats();
    let mut rows = Vec::new();
    for (c, cal) in artifact.classes.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for l in 0..artifact.num_layers() {
            let beta = &cal.beta[l];
            let mut push = |source: &str, value: f64| {
                rows.push(LayerRow { class: c, layer: l, source: source.to_string(), value });
            };
            if !members.is_empty() {
                let mut s = 0.0;
                for &i in &members {
                    s += channel_avg(id_taps.sample(l, i), beta)?;
                }
                push(SOURCE_ID, s / members.len() as f64);
            }
            for (name, taps) in &ood_taps {
                let n = taps.batch_len();
                let mut s = 0.0;
                for i in 0..n {
                    s += channel_avg(taps.sample(l, i), beta)?;
                }
                push(&format!("ood:{name}"), s / n as f64);
            }
            push(SOURCE_IMPRESSION, cal.cavg[l]);
            let bn_mean = bn.layers[l].running_mean.iter().zip(beta).map(|(m, b)| m * b).sum();
            push(SOURCE_BN, bn_mean);
        }
    }
    Ok(rows)
}

pub fn write_layer_csv(path: &Path, rows: &[LayerRow]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `(votes, total)`: how many `(class, layer)` pairs have the impression
/// mean at least as close to the ID mean as the BN running mean is.
pub fn impression_gap_votes(rows: &[LayerRow]) -> (usize, usize) {
    let find = |c: usize, l: usize, src: &str| {
        rows.iter().find(|r| r.class == c && r.layer == l && r.source == src).map(|r| r.value)
    };
    let mut votes = 0;
    let mut total = 0;
    for r in rows.iter().filter(|r| r.source == SOURCE_ID) {
        if let (Some(imp), Some(bn)) = (find(r.class, r.layer, SOURCE_IMPRESSION), find(r.class, r.layer, SOURCE_BN)) {
            total += 1;
            if (r.value - imp).abs() <= (r.value - bn).abs() {
                votes += 1;
            }
        }
    }
    (votes, total)
}
