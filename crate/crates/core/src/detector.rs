//! OOD scorers. Every scorer here follows one convention: higher = more OOD.

use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::calibration::{channel_avg, CalibrationArtifact};
use crate::error::{config_err, input_err, Error, Result};
use crate::numerics::{argmax, log_sum_exp, softmax};
use crate::smallnet::{input_gradient, MaxLogSoftmax, ModelCheckpoint, SmallNet};

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub msp_class: usize,
    /// `Δ_l ≥ 0` per layer.
    pub deviations: Vec<f64>,
    pub score: f64,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub threshold: Threshold,
    pub energy_temperature: f64,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::Auto(AutoTag::Auto),
            energy_temperature: 1.0,
            odin_temperature: 1000.0,
            odin_epsilon: 0.0014,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_temperature > 0.0) || !(self.odin_temperature > 0.0) {
            return Err(config_err("temperatures must be positive"));
        }
        if !(self.odin_epsilon >= 0.0) {
            return Err(config_err("ODIN noise magnitude must be non-negative"));
        }
        Ok(())
    }
}

/// Arg-max class; ties go to the lowest index.
pub fn msp_class(logits: &[f64]) -> Result<usize> {
    if logits.len() < 2 {
        return Err(input_err("need at least two logits"));
    }
    Ok(argmax(logits))
}

/// `|C-Avg(A^l(x); β^c_l) − cavg_c[l]|` for a single sample.
pub fn layer_deviation(
    tap: ndarray::ArrayView3<'_, f64>,
    artifact: &CalibrationArtifact,
    class: usize,
    layer: usize,
) -> Result<f64> {
    let cal = artifact
        .classes
        .get(class)
        .ok_or_else(|| input_err(format!("class {class} not in artifact")))?;
    let beta = cal.beta.get(layer).ok_or_else(|| input_err(format!("layer {layer} not in artifact")))?;
    Ok((channel_avg(tap, beta)? - cal.cavg[layer]).abs())
}

/// Weighted deviation scores; checks the artifact was built for this model.
pub fn c2ir_score(
    checkpoint: &ModelCheckpoint,
    artifact: &CalibrationArtifact,
    x: &Array4<f64>,
) -> Result<Vec<ScoreResult>> {
    artifact.check_fingerprint(checkpoint)?;
    score_with(checkpoint.net(), artifact, x)
}

/// Scoring without the fingerprint check (used for ablation variants).
pub fn score_with(net: &SmallNet, artifact: &CalibrationArtifact, x: &Array4<f64>) -> Result<Vec<ScoreResult>> {
    if artifact.layer_channels != net.layer_channels() || artifact.num_classes() != net.num_classes() {
        return Err(input_err("artifact shapes do not match the model"));
    }
    let mut out = Vec::with_capacity(x.len_of(Axis(0)));
    for start in (0..x.len_of(Axis(0))).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.len_of(Axis(0)));
        let (logits, taps) = net.forward_with_taps(&x.slice(s![start..end, .., .., ..]).to_owned())?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let c = msp_class(&row.to_vec())?;
            let deviations = (0..taps.num_layers())
                .map(|l| layer_deviation(taps.sample(l, i), artifact, c, l))
                .collect::<Result<Vec<_>>>()?;
            let score = artifact.classes[c].alpha.iter().zip(&deviations).map(|(a, d)| a * d).sum();
            out.push(ScoreResult { msp_class: c, deviations, score, decision: None });
        }
    }
    Ok(out)
}

/// `out` iff `score > threshold`.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::Out
    } else {
        Decision::In
    }
}

/// 95th percentile (linear interpolation between order statistics) of the
/// impression scores, treated as pseudo in-distribution.
pub fn auto_threshold(impression_scores: &[f64]) -> Result<f64> {
    if impression_scores.len() < 20 {
        return Err(input_err(format!(
            "auto threshold needs at least 20 impression scores, got {}",
            impression_scores.len()
        )));
    }
    if impression_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite impression score".into()));
    }
    let mut v = impression_scores.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = 0.95 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(if lo == hi { v[lo] } else { v[lo] + frac * (v[hi] - v[lo]) })
}

/// `1 − max softmax`.
pub fn baseline_msp(logits: &[f64]) -> f64 {
    let p = softmax(logits);
    1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Free energy `−T · log Σ exp(logit / T)`.
pub fn baseline_energy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    -temperature * log_sum_exp(&scaled)
}

fn tempered_msp_score(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    baseline_msp(&scaled)
}

/// ODIN: step the input by `ε · sign(∇ log max softmax(f(x)/T))`, then
/// return `1 − max softmax(f(x̃)/T)`.
pub fn baseline_odin(net: &SmallNet, x: &Array4<f64>, temperature: f64, epsilon: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !(epsilon >= 0.0) {
        return Err(config_err("ODIN needs temperature > 0 and epsilon ≥ 0"));
    }
    let mut out = Vec::with_capacity(x.len_of(Axis(0)));
    for start in (0..x.len_of(Axis(0))).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.len_of(Axis(0)));
        let mut xb = x.slice(s![start..end, .., .., ..]).to_owned();
        if epsilon > 0.0 {
            let (_, g) = input_gradient(net, &xb, &MaxLogSoftmax { temperature })?;
            ndarray::Zip::from(&mut xb).and(&g).for_each(|v, &g| {
                let sign = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
                *v += epsilon * sign;
            });
        }
        let logits = net.logits(&xb)?;
        out.extend(logits.rows().into_iter().map(|r| tempered_msp_score(&r.to_vec(), temperature)));
    }
    Ok(out)
}

/// Logits of a whole batch, chunked.
pub fn batch_logits(net: &SmallNet, x: &Array4<f64>) -> Result<Array2<f64>> {
    let n = x.len_of(Axis(0));
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        rows.push(net.logits(&x.slice(s![start..end, .., .., ..]).to_owned())?);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| input_err(e.to_string()))
}

/// CSV with `sample_id, source_set, msp_class, delta_1..delta_L, score`.
pub fn write_score_csv(path: &Path, source_set: &str, results: &[ScoreResult]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let nl = results.first().map_or(0, |r| r.deviations.len());
    let mut header = vec!["sample_id".to_string(), "source_set".into(), "msp_class".into()];
    header.extend((1..=nl).map(|l| format!("delta_{l}")));
    header.push("score".into());
    if results.iter().any(|r| r.decision.is_some()) {
        header.push("decision".into());
    }
    w.write_record(&header)?;
    for (i, r) in results.iter().enumerate() {
        let mut rec = vec![i.to_string(), source_set.to_string(), r.msp_class.to_string()];
        rec.extend(r.deviations.iter().map(|d| d.to_string()));
        rec.push(r.score.to_string());
        if let Some(d) = r.decision {
            rec.push(match d {
                Decision::In => "in".into(),
                Decision::Out => "out".into(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column CSV of plain per-sample scores for baseline methods.
pub fn write_plain_scores(path: &Path, source_set: &str, scores: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "source_set", "score"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), source_set.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
