use log::info;
use rand::Rng;

use super::metrics::MetricSet;
use super::pipeline::{EvalSets, RunPaths};
use super::report::{MetricsReport, ReportCell};
use super::AblationMode;
use crate::calibration::{empirical_cavg, CalibrationArtifact, ClassCalibration};
use crate::config::PipelineConfig;
use crate::datagen::ImageBatch;
use crate::detector::{score_with, write_score_csv};
use crate::error::{input_err, Result};
use crate::inversion::SynthesisDataset;
use crate::seeding::{self, Stream};
use crate::smallnet::{ModelCheckpoint, SmallNet};

/// A point drawn uniformly from the open `n`-simplex.
fn simplex_draw(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // exponential spacings; 1 - U lies in (0, 1]
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + f64::MIN_POSITIVE).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn impressions_of<'a>(synthesis: &'a SynthesisDataset, class: usize) -> Result<&'a ImageBatch> {
    synthesis
        .classes
        .iter()
        .find(|cs| cs.class == class)
        .map(|cs| &cs.images)
        .ok_or_else(|| input_err(format!("no impressions for class {class}")))
}

/// Calibration artifact for one ablation mode, derived from the full one.
pub fn build_variant(
    mode: AblationMode,
    base: &CalibrationArtifact,
    net: &SmallNet,
    synthesis: &SynthesisDataset,
    seed: u64,
) -> Result<CalibrationArtifact> {
    let nl = base.num_layers();
    let mut out = base.clone();
    match mode {
        AblationMode::Mgi => {}
        AblationMode::PenultimateOnly => {
            for cal in &mut out.classes {
                cal.alpha = (0..nl).map(|l| if l + 1 == nl { 1.0 } else { 0.0 }).collect();
            }
        }
        AblationMode::UniformMean => {
            for (c, cal) in out.classes.iter_mut().enumerate() {
                cal.alpha = vec![1.0 / nl as f64; nl];
                cal.beta = base.layer_channels.iter().map(|&h| vec![1.0 / h as f64; h]).collect();
                cal.cavg = empirical_cavg(net, impressions_of(synthesis, c)?, &cal.beta)?;
            }
        }
        AblationMode::RandomWeights => {
            for (c, cal) in out.classes.iter_mut().enumerate() {
                let mut rng = seeding::rng(seed, Stream::Ablation, c as u64);
                cal.alpha = simplex_draw(&mut rng, nl);
                cal.beta = base.layer_channels.iter().map(|&h| simplex_draw(&mut rng, h)).collect();
                cal.cavg = empirical_cavg(net, impressions_of(synthesis, c)?, &cal.beta)?;
            }
        }
        AblationMode::BnStatsReference => {
            let bn = net.bn_stats();
            for cal in &mut out.classes {
                cal.cavg = bn_reference(&bn.layers, cal);
            }
        }
    }
    Ok(out)
}

/// `Σ_k β_k · running_mean_k` per layer.
fn bn_reference(layers: &[crate::smallnet::BnLayerStats], cal: &ClassCalibration) -> Vec<f64> {
    layers
        .iter()
        .zip(&cal.beta)
        .map(|(s, b)| s.running_mean.iter().zip(b).map(|(m, w)| m * w).sum())
        .collect()
}

/// Scores every mode on the ID test batch and each configured OOD set.
/// Writes score files and `<report_name>.json` / `.csv`.
pub fn run_ablation(
    cfg: &PipelineConfig,
    paths: &RunPaths,
    modes: &[AblationMode],
    report_name: &str,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let ck = ModelCheckpoint::load(&paths.checkpoint())?;
    let artifact = CalibrationArtifact::load(&paths.artifact())?;
    artifact.check_fingerprint(&ck)?;
    let synthesis = SynthesisDataset::load_dir(&paths.synthesis_dir())?;
    synthesis.check_fingerprint(&ck)?;
    let sets = EvalSets::from_config(cfg)?;
    let net = ck.net();
    let mut report = MetricsReport::new("ablation", vec![cfg.seed], serde_json::to_value(cfg)?);
    for &mode in modes {
        info!("ablation: {}", mode.name());
        let variant = build_variant(mode, &artifact, net, &synthesis, cfg.seed)?;
        let score = |batch: &ImageBatch, set: &str| -> Result<Vec<f64>> {
            let results = score_with(net, &variant, batch.pixels())?;
            write_score_csv(&paths.score_file(&format!("ablation_{}_{set}", mode.name())), set, &results)?;
            Ok(results.into_iter().map(|r| r.score).collect())
        };
        let id_scores = score(&sets.id, "id")?;
        for (kind, batch) in &sets.ood {
            let ood_scores = score(batch, kind.name())?;
            let mut cell = ReportCell::new(mode.name(), kind.name(), MetricSet::compute(&id_scores, &ood_scores)?);
            cell.id_scores = Some(RunPaths::score_ref(&format!("ablation_{}_id", mode.name())));
            cell.ood_scores = Some(RunPaths::score_ref(&format!("ablation_{}_{}", mode.name(), kind.name())));
            report.cells.push(cell);
        }
    }
    report.save(&paths.report_json(report_name), &paths.report_csv(report_name))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_draws_are_positive_and_normalized() {
        let mut rng = seeding::rng(5, Stream::Ablation, 0);
        for n in 1..8 {
            let p = simplex_draw(&mut rng, n);
            assert_eq!(p.len(), n);
            assert!(p.iter().all(|&v| v > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = simplex_draw(&mut seeding::rng(5, Stream::Ablation, 1), 4);
        let b = simplex_draw(&mut seeding::rng(5, Stream::Ablation, 1), 4);
        assert_eq!(a, b);
    }
}
