//! Stage runners over a run directory. Each stage reads the outputs of the
//! previous one and fails with [`Error::MissingArtifact`] if they are absent.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::metrics::MetricSet;
use super::report::{MetricsReport, ReportCell};
use super::Method;
use crate::calibration::{build_artifact, CalibrationArtifact};
use crate::config::PipelineConfig;
use crate::datagen::{generate_id_dataset, generate_ood_dataset, split, ImageBatch, OodKind};
use crate::detector::{
    auto_threshold, baseline_energy, baseline_msp, baseline_odin, batch_logits, c2ir_score, decide,
    write_plain_scores, write_score_csv, Threshold,
};
use crate::error::{Error, Result};
use crate::inversion::{synthesize_all, SynthesisDataset};
use crate::smallnet::{build_model, train, ModelCheckpoint};

/// File layout of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn for_config(cfg: &PipelineConfig, out: &Path) -> Self {
        Self::new(cfg.run_dir(out))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn synthesis_dir(&self) -> PathBuf {
        self.root.join("impressions")
    }

    pub fn artifact(&self) -> PathBuf {
        self.root.join("calibration.bin")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn report_json(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.json"))
    }

    pub fn report_csv(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.csv"))
    }

    pub fn layer_csv(&self) -> PathBuf {
        self.root.join("layer_comparison.csv")
    }

    /// Path relative to the run root, as recorded in reports.
    pub fn score_ref(name: &str) -> String {
        format!("scores/{name}.csv")
    }

    pub fn score_file(&self, name: &str) -> PathBuf {
        self.root.join(Self::score_ref(name))
    }
}

/// ID test images and the configured OOD sets.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub id: ImageBatch,
    pub ood: Vec<(OodKind, ImageBatch)>,
}

impl EvalSets {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let (_, test) = id_data(cfg)?;
        let id = eval_id_batch(cfg, &test);
        let ood = cfg
            .ood_kinds()?
            .into_iter()
            .map(|k| Ok((k, generate_ood_dataset(&cfg.ood_spec(k))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { id, ood })
    }
}

/// The generated ID dataset split into `(train, test)`.
pub fn id_data(cfg: &PipelineConfig) -> Result<(ImageBatch, ImageBatch)> {
    let data = generate_id_dataset(&cfg.dataset_spec())?;
    split(&data, (cfg.data.train_fraction, 1.0 - cfg.data.train_fraction), cfg.seed)
}

/// First `eval.id_samples` test images, spread evenly over classes.
pub fn eval_id_batch(cfg: &PipelineConfig, test: &ImageBatch) -> ImageBatch {
    let nc = cfg.data.num_classes;
    let (per, extra) = (cfg.eval.id_samples / nc, cfg.eval.id_samples % nc);
    let mut idx: Vec<usize> = (0..nc)
        .flat_map(|c| {
            let take = per + usize::from(c < extra);
            test.class_indices(c).into_iter().take(take)
        })
        .collect();
    idx.sort_unstable();
    test.select(&idx)
}

fn write_config_echo(cfg: &PipelineConfig, paths: &RunPaths) -> Result<()> {
    fs::create_dir_all(paths.root())?;
    fs::write(paths.config_file(), cfg.to_toml_string())?;
    Ok(())
}

pub fn stage_train(cfg: &PipelineConfig, paths: &RunPaths) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    write_config_echo(cfg, paths)?;
    let (train_set, test_set) = id_data(cfg)?;
    let net = build_model(&cfg.arch_config(), cfg.seed)?;
    info!("training on {} images", train_set.len());
    let ck = train(net, &train_set, Some(&test_set), &cfg.train, cfg.seed)?;
    ck.save(&paths.checkpoint())?;
    Ok(ck)
}

pub fn stage_invert(cfg: &PipelineConfig, paths: &RunPaths) -> Result<SynthesisDataset> {
    cfg.validate()?;
    let ck = ModelCheckpoint::load(&paths.checkpoint())?;
    let synth = synthesize_all(&ck, &cfg.inversion_config())?;
    synth.save_dir(&paths.synthesis_dir())?;
    Ok(synth)
}

pub fn stage_calibrate(paths: &RunPaths) -> Result<CalibrationArtifact> {
    let ck = ModelCheckpoint::load(&paths.checkpoint())?;
    let synth = SynthesisDataset::load_dir(&paths.synthesis_dir())?;
    let artifact = build_artifact(&ck, &synth)?;
    artifact.save(&paths.artifact())?;
    Ok(artifact)
}

/// Checkpoint and artifact of a run, checked against each other.
pub fn load_scoring_inputs(paths: &RunPaths) -> Result<(ModelCheckpoint, CalibrationArtifact)> {
    let ck = ModelCheckpoint::load(&paths.checkpoint())?;
    let artifact = CalibrationArtifact::load(&paths.artifact())?;
    artifact.check_fingerprint(&ck)?;
    Ok((ck, artifact))
}

/// Runs every stage whose output is missing, then loads all three.
pub fn ensure_stages(
    cfg: &PipelineConfig,
    paths: &RunPaths,
) -> Result<(ModelCheckpoint, SynthesisDataset, CalibrationArtifact)> {
    if !paths.checkpoint().exists() {
        stage_train(cfg, paths)?;
    }
    if !paths.synthesis_dir().join("manifest.json").exists() {
        stage_invert(cfg, paths)?;
    }
    if !paths.artifact().exists() {
        stage_calibrate(paths)?;
    }
    let (ck, artifact) = load_scoring_inputs(paths)?;
    let synth = SynthesisDataset::load_dir(&paths.synthesis_dir())?;
    synth.check_fingerprint(&ck)?;
    Ok((ck, synth, artifact))
}

/// Decision threshold: fixed, or the 95th percentile of impression scores.
pub fn resolve_threshold(
    cfg: &PipelineConfig,
    ck: &ModelCheckpoint,
    artifact: &CalibrationArtifact,
    paths: &RunPaths,
) -> Result<f64> {
    match cfg.detector.threshold {
        Threshold::Fixed(t) => Ok(t),
        Threshold::Auto(_) => {
            let synth = SynthesisDataset::load_dir(&paths.synthesis_dir())?;
            let mut scores = Vec::new();
            for cs in &synth.classes {
                scores.extend(c2ir_score(ck, artifact, cs.images.pixels())?.into_iter().map(|r| r.score));
            }
            auto_threshold(&scores)
        }
    }
}

/// Scores named sets (`id` or an OOD set name) with decisions; returns the
/// written files.
pub fn stage_score(cfg: &PipelineConfig, paths: &RunPaths, sets: &[String]) -> Result<Vec<PathBuf>> {
    let (ck, artifact) = load_scoring_inputs(paths)?;
    let threshold = resolve_threshold(cfg, &ck, &artifact, paths)?;
    info!("decision threshold {threshold}");
    let mut written = Vec::new();
    for name in sets {
        let batch = if name == "id" {
            let (_, test) = id_data(cfg)?;
            eval_id_batch(cfg, &test)
        } else {
            generate_ood_dataset(&cfg.ood_spec(OodKind::parse(name)?))?
        };
        let mut results = c2ir_score(&ck, &artifact, batch.pixels())?;
        for r in &mut results {
            r.decision = Some(decide(r.score, threshold));
        }
        let path = paths.score_file(&format!("score_{name}"));
        write_score_csv(&path, name, &results)?;
        written.push(path);
    }
    Ok(written)
}

/// Per-sample scores of `method`, higher = more OOD.
pub fn method_scores(
    method: Method,
    cfg: &PipelineConfig,
    ck: &ModelCheckpoint,
    artifact: &CalibrationArtifact,
    batch: &ImageBatch,
) -> Result<Vec<f64>> {
    let net = ck.net();
    let x = batch.pixels();
    let rows = |f: &dyn Fn(&[f64]) -> f64| -> Result<Vec<f64>> {
        Ok(batch_logits(net, x)?.rows().into_iter().map(|r| f(&r.to_vec())).collect())
    };
    let scores = match method {
        Method::C2ir => c2ir_score(ck, artifact, x)?.into_iter().map(|r| r.score).collect(),
        Method::Msp => rows(&baseline_msp)?,
        Method::Energy => rows(&|l| baseline_energy(l, cfg.detector.energy_temperature))?,
        Method::Odin => baseline_odin(net, x, cfg.detector.odin_temperature, cfg.detector.odin_epsilon)?,
    };
    if scores.iter().any(|s: &f64| !s.is_finite()) {
        return Err(Error::Numerical(format!("{} produced a non-finite score", method.name())));
    }
    Ok(scores)
}

/// Every configured method on the ID test batch and every configured OOD
/// set. Writes score files, `benchmark.json` and `benchmark.csv`.
pub fn run_benchmark(cfg: &PipelineConfig, paths: &RunPaths) -> Result<MetricsReport> {
    cfg.validate()?;
    let (ck, artifact) = load_scoring_inputs(paths)?;
    let sets = EvalSets::from_config(cfg)?;
    let mut report = MetricsReport::new("benchmark", vec![cfg.seed], serde_json::to_value(cfg)?);
    for method in cfg.methods()? {
        info!("benchmark: {}", method.name());
        let id_scores = score_and_write(method, cfg, &ck, &artifact, &sets.id, "id", paths)?;
        for (kind, batch) in &sets.ood {
            let ood_scores = score_and_write(method, cfg, &ck, &artifact, batch, kind.name(), paths)?;
            let mut cell = ReportCell::new(method.name(), kind.name(), MetricSet::compute(&id_scores, &ood_scores)?);
            cell.id_scores = Some(RunPaths::score_ref(&format!("{}_id", method.name())));
            cell.ood_scores = Some(RunPaths::score_ref(&format!("{}_{}", method.name(), kind.name())));
            report.cells.push(cell);
        }
    }
    report.save(&paths.report_json("benchmark"), &paths.report_csv("benchmark"))?;
    Ok(report)
}

fn score_and_write(
    method: Method,
    cfg: &PipelineConfig,
    ck: &ModelCheckpoint,
    artifact: &CalibrationArtifact,
    batch: &ImageBatch,
    set: &str,
    paths: &RunPaths,
) -> Result<Vec<f64>> {
    let path = paths.score_file(&format!("{}_{set}", method.name()));
    if method == Method::C2ir {
        let full = c2ir_score(ck, artifact, batch.pixels())?;
        let scores: Vec<f64> = full.iter().map(|r| r.score).collect();
        write_score_csv(&path, set, &full)?;
        Ok(scores)
    } else {
        let scores = method_scores(method, cfg, ck, artifact, batch)?;
        write_plain_scores(&path, set, &scores)?;
        Ok(scores)
    }
}
