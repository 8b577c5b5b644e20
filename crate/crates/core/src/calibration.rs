//! Channel weights, layer weights and class-conditional activation means.
//!
//! For each class `c`, with `D_c` the final impressions:
//!
//! * `w̄[l][k]` is the mean over `D_c` of the spatial mean of `∂y^c/∂A^l_k`,
//!   and `β[l] = softmax(w̄[l])`;
//! * every stored trajectory is replayed with that `β` to get
//!   `δ_l(t) = Σ_k β[l][k]·g[l][k](t) / (y_t − y_{t−1})`, averaged over the
//!   iterations with `|Δy| ≥ 1e-6`, then over trajectories, and
//!   `α = softmax(δ̄)`;
//! * `cavg[l]` is the mean over `D_c` of the `β`-weighted channel average
//!   of `A^l`.

use std::path::Path;

use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::datagen::ImageBatch;
use crate::error::{input_err, Error, Result};
use crate::inversion::{SynthesisDataset, TrajectoryRecord};
use crate::smallnet::{ModelCheckpoint, SmallNet};

pub const CALIBRATION_KIND: &str = "calibration";

/// Iterations whose class-score change is smaller than this are skipped.
pub const DELTA_Y_GUARD: f64 = 1e-6;

const CHUNK: usize = 128;

/// Per-layer channel gradient averages `w̄[l][k]` for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGradientStats {
    pub per_layer: Vec<Vec<f64>>,
}

/// Everything the detector needs about one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCalibration {
    /// `β[l][k]`, a probability vector per layer.
    pub beta: Vec<Vec<f64>>,
    /// `α[l]`, a probability vector over layers.
    pub alpha: Vec<f64>,
    /// Mean weighted channel average of the impressions, per layer.
    pub cavg: Vec<f64>,
    /// Pre-softmax layer sensitivities `δ̄[l]`.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub classes: Vec<ClassCalibration>,
    pub layer_channels: Vec<usize>,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    fingerprint: String,
    layer_channels: Vec<usize>,
    num_classes: usize,
}

/// `Σ_k β_k · mean_{i,j} A_{k,i,j}` of a single map `[h, d, d]`.
pub fn channel_avg(tap: ArrayView3<'_, f64>, beta: &[f64]) -> Result<f64> {
    let (h, d1, d2) = tap.dim();
    if h != beta.len() {
        return Err(input_err(format!("{} channel weights for a map with {h} channels", beta.len())));
    }
    let area = (d1 * d2) as f64;
    Ok(tap
        .outer_iter()
        .zip(beta)
        .map(|(ch, b)| b * ch.sum() / area)
        .sum())
}

/// Softmax with max subtraction. Errors on empty or non-finite input.
pub fn normalize_weights(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(input_err("cannot normalize an empty weight vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite importance value in {v:?}")));
    }
    Ok(crate::numerics::softmax(v))
}

fn chunks(images: &ImageBatch) -> impl Iterator<Item = Array4<f64>> + '_ {
    let n = images.len();
    (0..n).step_by(CHUNK).map(move |s| {
        images.pixels().slice(ndarray::s![s..(s + CHUNK).min(n), .., .., ..]).to_owned()
    })
}

/// Mean over `images` of the per-layer weighted channel averages.
pub fn empirical_cavg(net: &SmallNet, images: &ImageBatch, beta: &[Vec<f64>]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(input_err("empty impression set"));
    }
    if beta.len() != net.num_layers() {
        return Err(input_err("one channel-weight vector per layer required"));
    }
    let mut sums = vec![0.0; net.num_layers()];
    for x in chunks(images) {
        let (_, taps) = net.forward_with_taps(&x)?;
        for (l, sum) in sums.iter_mut().enumerate() {
            for i in 0..taps.batch_len() {
                *sum += channel_avg(taps.sample(l, i), &beta[l])?;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / images.len() as f64).collect())
}

/// `w̄[l][k]`: class-logit gradients w.r.t. each tap, averaged over space and images.
pub fn channel_gradient_avg(net: &SmallNet, images: &ImageBatch, class: usize) -> Result<ChannelGradientStats> {
    if images.is_empty() {
        return Err(input_err("empty impression set"));
    }
    let mut sums: Vec<Vec<f64>> = net.layer_channels().iter().map(|&h| vec![0.0; h]).collect();
    for x in chunks(images) {
        let (_, _, grads) = net.activation_gradients(&x, class)?;
        for (l, g) in grads.iter().enumerate() {
            let (_, _, h, w) = g.dim();
            let area = (h * w) as f64;
            for (k, s) in sums[l].iter_mut().enumerate() {
                *s += g.index_axis(Axis(1), k).sum() / area;
            }
        }
    }
    let n = images.len() as f64;
    Ok(ChannelGradientStats {
        per_layer: sums.into_iter().map(|v| v.into_iter().map(|s| s / n).collect()).collect(),
    })
}

/// `δ_l` of one trajectory under channel weights `beta`.
pub fn layer_sensitivity(trajectory: &TrajectoryRecord, beta: &[Vec<f64>]) -> Result<Vec<f64>> {
    if trajectory.grads.len() != beta.len() {
        return Err(input_err("trajectory and channel weights disagree on layer count"));
    }
    let deltas = trajectory.score_deltas();
    let kept: Vec<usize> = (0..deltas.len()).filter(|&t| deltas[t].abs() >= DELTA_Y_GUARD).collect();
    if kept.is_empty() {
        return Err(Error::Numerical(
            "degenerate trajectory: every iteration has |Δy| below the guard".into(),
        ));
    }
    beta.iter()
        .zip(&trajectory.grads)
        .map(|(b, g)| {
            if g.ncols() != b.len() {
                return Err(input_err("trajectory gradient width does not match channel weights"));
            }
            let total: f64 = kept
                .iter()
                .map(|&t| g.row(t).iter().zip(b).map(|(gk, bk)| gk * bk).sum::<f64>() / deltas[t])
                .sum();
            Ok(total / kept.len() as f64)
        })
        .collect()
}

/// `(β, δ̄, α)` from gradient averages and trajectories.
pub fn importance_weights(
    wbar: &ChannelGradientStats,
    trajectories: &[TrajectoryRecord],
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    if trajectories.is_empty() {
        return Err(input_err("no trajectories to replay"));
    }
    let beta = wbar.per_layer.iter().map(|w| normalize_weights(w)).collect::<Result<Vec<_>>>()?;
    let nl = beta.len();
    let mut delta = vec![0.0; nl];
    for t in trajectories {
        for (d, s) in delta.iter_mut().zip(layer_sensitivity(t, &beta)?) {
            *d += s;
        }
    }
    delta.iter_mut().for_each(|d| *d /= trajectories.len() as f64);
    let alpha = normalize_weights(&delta)?;
    Ok((beta, delta, alpha))
}

pub fn calibrate_class(
    net: &SmallNet,
    class: usize,
    images: &ImageBatch,
    trajectories: &[TrajectoryRecord],
) -> Result<ClassCalibration> {
    let wbar = channel_gradient_avg(net, images, class)?;
    let (beta, delta, alpha) = importance_weights(&wbar, trajectories)?;
    let cavg = empirical_cavg(net, images, &beta)?;
    Ok(ClassCalibration { beta, alpha, cavg, delta })
}

pub fn build_artifact(checkpoint: &ModelCheckpoint, synthesis: &SynthesisDataset) -> Result<CalibrationArtifact> {
    synthesis.check_fingerprint(checkpoint)?;
    let net = checkpoint.net();
    if synthesis.classes.len() != net.num_classes() {
        return Err(input_err("synthesis does not cover every class"));
    }
    let classes = synthesis
        .classes
        .iter()
        .map(|cs| {
            if cs.images.is_empty() {
                return Err(input_err(format!("class {} has no impressions", cs.class)));
            }
            calibrate_class(net, cs.class, &cs.images, &cs.trajectories).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("class {}: {m}", cs.class)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationArtifact { classes, layer_channels: net.layer_channels(), fingerprint: checkpoint.fingerprint() })
}

impl CalibrationArtifact {
    pub fn num_layers(&self) -> usize {
        self.layer_channels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn check_fingerprint(&self, checkpoint: &ModelCheckpoint) -> Result<()> {
        let fp = checkpoint.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch { expected: fp, found: self.fingerprint.clone() });
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let meta = ArtifactMeta {
            fingerprint: self.fingerprint.clone(),
            layer_channels: self.layer_channels.clone(),
            num_classes: self.classes.len(),
        };
        let (nc, nl) = (self.classes.len(), self.num_layers());
        let mut a = Archive::new(CALIBRATION_KIND, serde_json::to_value(meta).unwrap());
        let gather = |f: &dyn Fn(&ClassCalibration) -> &Vec<f64>| -> Vec<f64> {
            self.classes.iter().flat_map(|c| f(c).iter().copied()).collect()
        };
        a.push("alpha", &[nc, nl], gather(&|c| &c.alpha));
        a.push("delta", &[nc, nl], gather(&|c| &c.delta));
        a.push("cavg", &[nc, nl], gather(&|c| &c.cavg));
        for (l, &h) in self.layer_channels.iter().enumerate() {
            a.push(format!("beta{l}"), &[nc, h], gather(&|c| &c.beta[l]));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != CALIBRATION_KIND {
            return Err(Error::Format(format!("expected calibration archive, found `{}`", a.kind)));
        }
        let meta: ArtifactMeta = serde_json::from_value(a.meta.clone())?;
        let (nc, nl) = (meta.num_classes, meta.layer_channels.len());
        let alpha = a.get_shaped("alpha", &[nc, nl])?;
        let delta = a.get_shaped("delta", &[nc, nl])?;
        let cavg = a.get_shaped("cavg", &[nc, nl])?;
        let betas = meta
            .layer_channels
            .iter()
            .enumerate()
            .map(|(l, &h)| a.get_shaped(&format!("beta{l}"), &[nc, h]))
            .collect::<Result<Vec<_>>>()?;
        let classes = (0..nc)
            .map(|c| ClassCalibration {
                alpha: alpha[c * nl..(c + 1) * nl].to_vec(),
                delta: delta[c * nl..(c + 1) * nl].to_vec(),
                cavg: cavg[c * nl..(c + 1) * nl].to_vec(),
                beta: betas
                    .iter()
                    .zip(&meta.layer_channels)
                    .map(|(b, &h)| b[c * h..(c + 1) * h].to_vec())
                    .collect(),
            })
            .collect();
        Ok(Self { classes, layer_channels: meta.layer_channels, fingerprint: meta.fingerprint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "calibrate", path: path.to_path_buf() });
        }
        Self::from_archive(&Archive::load(path)?)
    }
}
