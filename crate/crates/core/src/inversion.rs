//! Class-conditional model inversion.
//!
//! A batch of noise images is optimized with Adam against
//!
//! ```text
//! CE(f(x̂), c) + w · Σ_l ( ‖μ_l(x̂) − E_bn^l‖₂ + ‖σ²_l(x̂) − Var_bn^l‖₂ )
//! ```
//!
//! where `μ_l`, `σ²_l` are batch moments of the BN-layer inputs and the
//! network itself runs in inference mode. After every step the batch-mean
//! class logit and the batch/spatial-mean gradient of that logit with
//! respect to every tap are recorded; calibration replays these records.

use std::fs;
use std::path::Path;

use log::{debug, info};
use ndarray::{Array2, Array4, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::datagen::ImageBatch;
use crate::error::{config_err, input_err, Error, Result};
use crate::numerics::{argmax, log_sum_exp};
use crate::seeding::{self, Stream};
use crate::smallnet::layers::channel_moments;
use crate::smallnet::{BnMode, ForwardTrace, ModelCheckpoint, Seeds, SmallNet, Want};

pub const SYNTHESIS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub samples_per_class: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_loss_weight: f64,
    /// Squared total-variation prior; off by default.
    pub tv_weight: f64,
    /// Minimum fraction of final impressions whose MSP class is the target.
    pub min_msp_agreement: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 32,
            samples_per_class: 64,
            step_size: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_loss_weight: 1.0,
            tv_weight: 0.0,
            min_msp_agreement: 0.8,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err("inversion batch size must be at least 2"));
        }
        if self.samples_per_class == 0 {
            return Err(config_err("samples_per_class must be positive"));
        }
        if self.samples_per_class % self.batch_size == 1 {
            return Err(config_err(
                "samples_per_class leaves a final batch of one image (batch variance undefined)",
            ));
        }
        if !(self.step_size > 0.0) {
            return Err(config_err("step size must be positive"));
        }
        if self.bn_loss_weight < 0.0 || self.tv_weight < 0.0 {
            return Err(config_err("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Sizes of the optimization batches for one class.
    pub fn batch_sizes(&self) -> Vec<usize> {
        let mut left = self.samples_per_class;
        let mut out = Vec::new();
        while left > 0 {
            let b = left.min(self.batch_size);
            out.push(b);
            left -= b;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub mean_match: f64,
    pub var_match: f64,
    pub prior: f64,
}

impl LossComponents {
    pub fn total(&self, bn_loss_weight: f64, tv_weight: f64) -> f64 {
        self.ce + bn_loss_weight * (self.mean_match + self.var_match) + tv_weight * self.prior
    }

    fn to_vec(self) -> [f64; 4] {
        [self.ce, self.mean_match, self.var_match, self.prior]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self { ce: v[0], mean_match: v[1], var_match: v[2], prior: v[3] }
    }
}

/// Optimization record of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Batch-mean class logit of the initial noise.
    pub initial_score: f64,
    pub initial_loss: LossComponents,
    /// `y_t` for `t = 1..=T`.
    pub scores: Vec<f64>,
    /// Per layer, `[T, h_l]`: batch- and spatial-mean `∂y_t/∂A^l`.
    pub grads: Vec<Array2<f64>>,
    pub losses: Vec<LossComponents>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `y_t − y_{t−1}` for `t = 1..=T`.
    pub fn score_deltas(&self) -> Vec<f64> {
        let mut prev = self.initial_score;
        self.scores
            .iter()
            .map(|&y| {
                let d = y - prev;
                prev = y;
                d
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSynthesis {
    pub class: usize,
    pub images: ImageBatch,
    pub trajectories: Vec<TrajectoryRecord>,
    pub msp_agreement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisDataset {
    pub classes: Vec<ClassSynthesis>,
    pub config: InversionConfig,
    pub fingerprint: String,
    pub layer_channels: Vec<usize>,
}

/// Loss components, total, and the backward seeds of the total, from an
/// inference-mode trace of the batch being optimized.
fn loss_terms(
    net: &SmallNet,
    trace: &ForwardTrace,
    x: &Array4<f64>,
    class: usize,
    bn_loss_weight: f64,
    tv_weight: f64,
) -> (LossComponents, Seeds, Option<Array4<f64>>) {
    let logits = &trace.logits;
    let n = logits.nrows() as f64;
    let mut ce = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let r = row.to_vec();
        let lse = log_sum_exp(&r);
        ce += lse - r[class];
        for (j, v) in r.iter().enumerate() {
            d_logits[[i, j]] = (v - lse).exp() / n;
        }
        d_logits[[i, class]] -= 1.0 / n;
    }
    ce /= n;

    let mut mean_match = 0.0;
    let mut var_match = 0.0;
    let mut bn_seeds = Vec::with_capacity(trace.blocks.len());
    for (bt, block) in trace.blocks.iter().zip(net.blocks()) {
        let z = &bt.bn_input;
        let (mu, var) = channel_moments(z);
        let dm: Vec<f64> = mu.iter().zip(&block.running_mean).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = var.iter().zip(&block.running_var).map(|(a, b)| a - b).collect();
        let m_norm = dm.iter().map(|v| v * v).sum::<f64>().sqrt();
        let v_norm = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
        mean_match += m_norm;
        var_match += v_norm;
        let (nb, c, h, w) = z.dim();
        let count = (nb * h * w) as f64;
        // ∂‖a‖/∂a = a/‖a‖ (zero at the origin)
        let gm: Vec<f64> =
            dm.iter().map(|v| if m_norm > 0.0 { bn_loss_weight * v / m_norm } else { 0.0 }).collect();
        let gv: Vec<f64> =
            dv.iter().map(|v| if v_norm > 0.0 { bn_loss_weight * v / v_norm } else { 0.0 }).collect();
        let hw = h * w;
        let zs = z.as_slice().unwrap();
        let mut seed = vec![0.0; zs.len()];
        for b in 0..nb {
            for k in 0..c {
                for i in (b * c + k) * hw..(b * c + k + 1) * hw {
                    seed[i] = (gm[k] + gv[k] * 2.0 * (zs[i] - mu[k])) / count;
                }
            }
        }
        bn_seeds.push(Some(Array4::from_shape_vec((nb, c, h, w), seed).unwrap()));
    }

    let (prior, prior_grad) = if tv_weight > 0.0 {
        let (p, g) = tv_prior(x);
        (p, Some(g.mapv(|v| v * tv_weight)))
    } else {
        (0.0, None)
    };

    let comps = LossComponents { ce, mean_match, var_match, prior };
    let seeds = Seeds { logits: Some(d_logits), taps: Vec::new(), bn_inputs: bn_seeds };
    (comps, seeds, prior_grad)
}

/// Batch-mean squared total variation and its gradient.
fn tv_prior(x: &Array4<f64>) -> (f64, Array4<f64>) {
    let (n, c, h, w) = x.dim();
    let mut g = Array4::<f64>::zeros(x.raw_dim());
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if i + 1 < h {
                        let d = x[[b, ch, i + 1, j]] - x[[b, ch, i, j]];
                        total += d * d;
                        g[[b, ch, i + 1, j]] += 2.0 * d;
                        g[[b, ch, i, j]] -= 2.0 * d;
                    }
                    if j + 1 < w {
                        let d = x[[b, ch, i, j + 1]] - x[[b, ch, i, j]];
                        total += d * d;
                        g[[b, ch, i, j + 1]] += 2.0 * d;
                        g[[b, ch, i, j]] -= 2.0 * d;
                    }
                }
            }
        }
    }
    (total / n as f64, g.mapv(|v| v / n as f64))
}

/// Inversion loss of a batch for target class `class`.
pub fn inversion_loss(
    net: &SmallNet,
    x: &Array4<f64>,
    class: usize,
    config: &InversionConfig,
) -> Result<(f64, LossComponents)> {
    Ok(inversion_loss_and_grad(net, x, class, config)?.0)
}

/// Loss, components, and gradient with respect to `x`.
pub fn inversion_loss_and_grad(
    net: &SmallNet,
    x: &Array4<f64>,
    class: usize,
    config: &InversionConfig,
) -> Result<((f64, LossComponents), Array4<f64>)> {
    if x.len_of(Axis(0)) < 2 {
        return Err(input_err("inversion loss needs a batch of at least 2 (batch variance)"));
    }
    if class >= net.num_classes() {
        return Err(input_err(format!("class {class} out of range")));
    }
    let trace = net.forward_trace(x, BnMode::Eval)?;
    let (comps, seeds, prior_grad) =
        loss_terms(net, &trace, x, class, config.bn_loss_weight, config.tv_weight);
    let mut g = net
        .backward(&trace, &seeds, Want { input: true, ..Want::default() })
        .input
        .unwrap();
    if let Some(p) = prior_grad {
        g += &p;
    }
    Ok(((comps.total(config.bn_loss_weight, config.tv_weight), comps), g))
}

/// Batch means of the class-`class` logit and of the per-channel spatial-mean
/// tap gradients.
fn score_and_channel_grads(net: &SmallNet, trace: &ForwardTrace, class: usize) -> (f64, Vec<Vec<f64>>) {
    let n = trace.logits.nrows();
    let score = trace.logits.column(class).mean().unwrap();
    let mut seed = Array2::zeros(trace.logits.raw_dim());
    seed.column_mut(class).fill(1.0);
    let grads = net.backward(trace, &Seeds::from_logits(seed), Want { taps: true, ..Want::default() });
    let per_layer = grads
        .taps
        .iter()
        .map(|g| {
            let (_, c, h, w) = g.dim();
            let area = (h * w * n) as f64;
            (0..c).map(|k| g.index_axis(Axis(1), k).sum() / area).collect()
        })
        .collect();
    (score, per_layer)
}

fn squash_noise(n: usize, net: &SmallNet, seed: u64, class: usize, batch: usize) -> Array4<f64> {
    let arch = net.arch();
    let s = arch.input_size;
    let mut rng = seeding::rng(seed, Stream::Inversion, ((class as u64) << 32) | batch as u64);
    Array4::from_shape_simple_fn((n, arch.input_channels, s, s), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        1.0 / (1.0 + (-z).exp())
    })
}

/// Optimizes one batch; returns final images and the trajectory.
fn invert_batch(
    net: &SmallNet,
    class: usize,
    mut x: Array4<f64>,
    config: &InversionConfig,
) -> Result<(Array4<f64>, TrajectoryRecord)> {
    let (w_bn, w_tv) = (config.bn_loss_weight, config.tv_weight);
    let nl = net.num_layers();
    let iters = config.iterations;

    let mut trace = net.forward_trace(&x, BnMode::Eval)?;
    let (mut comps, mut seeds, mut prior_grad) = loss_terms(net, &trace, &x, class, w_bn, w_tv);
    let initial_loss = comps;
    let initial_score = trace.logits.column(class).mean().unwrap();
    if !comps.total(w_bn, w_tv).is_finite() {
        return Err(Error::Numerical(format!("class {class}: non-finite loss at iteration 0")));
    }

    let mut scores = Vec::with_capacity(iters);
    let mut losses = Vec::with_capacity(iters);
    let mut grads: Vec<Array2<f64>> =
        net.layer_channels().iter().map(|&h| Array2::zeros((iters, h))).collect();
    let mut m = Array4::<f64>::zeros(x.raw_dim());
    let mut v = Array4::<f64>::zeros(x.raw_dim());
    let (b1, b2, eps, lr) = (config.adam_beta1, config.adam_beta2, config.adam_eps, config.step_size);

    for t in 1..=iters {
        let mut g = net.backward(&trace, &seeds, Want { input: true, ..Want::default() }).input.unwrap();
        if let Some(p) = &prior_grad {
            g += p;
        }
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        ndarray::Zip::from(&mut x).and(&mut m).and(&mut v).and(&g).for_each(|x, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *x = (*x - step).clamp(0.0, 1.0);
        });

        trace = net.forward_trace(&x, BnMode::Eval)?;
        (comps, seeds, prior_grad) = loss_terms(net, &trace, &x, class, w_bn, w_tv);
        let total = comps.total(w_bn, w_tv);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("class {class}: non-finite loss at iteration {t}")));
        }
        let (score, channel_grads) = score_and_channel_grads(net, &trace, class);
        scores.push(score);
        losses.push(comps);
        for l in 0..nl {
            for (k, gk) in channel_grads[l].iter().enumerate() {
                grads[l][[t - 1, k]] = *gk;
            }
        }
        if t % 100 == 0 {
            debug!("class {class} iter {t}: ce {:.4} mean {:.4} var {:.4}", comps.ce, comps.mean_match, comps.var_match);
        }
    }
    Ok((x, TrajectoryRecord { initial_score, initial_loss, scores, grads, losses }))
}

/// Synthesizes `samples_per_class` impressions of `class`.
pub fn invert_class(
    checkpoint: &ModelCheckpoint,
    class: usize,
    config: &InversionConfig,
) -> Result<ClassSynthesis> {
    config.validate()?;
    let net = checkpoint.net();
    if class >= net.num_classes() {
        return Err(input_err(format!("class {class} out of range")));
    }
    let mut images = Vec::new();
    let mut trajectories = Vec::new();
    for (b, &size) in config.batch_sizes().iter().enumerate() {
        let x0 = squash_noise(size, net, config.seed, class, b);
        let (x, traj) = invert_batch(net, class, x0, config)?;
        images.push(x);
        trajectories.push(traj);
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let pixels = ndarray::concatenate(Axis(0), &views).unwrap();
    let logits = net.logits(&pixels)?;
    let agree = logits.rows().into_iter().filter(|r| argmax(&r.to_vec()) == class).count();
    let msp_agreement = agree as f64 / pixels.len_of(Axis(0)) as f64;
    let n = pixels.len_of(Axis(0));
    let images = ImageBatch::labeled(pixels, vec![class; n], net.num_classes())?;
    info!("class {class}: {n} impressions, MSP agreement {msp_agreement:.3}");
    Ok(ClassSynthesis { class, images, trajectories, msp_agreement })
}

pub fn synthesize_all(checkpoint: &ModelCheckpoint, config: &InversionConfig) -> Result<SynthesisDataset> {
    config.validate()?;
    let net = checkpoint.net();
    let classes = (0..net.num_classes())
        .map(|c| {
            invert_class(checkpoint, c, config).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("synthesis of class {c} failed: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthesisDataset {
        classes,
        config: config.clone(),
        fingerprint: checkpoint.fingerprint(),
        layer_channels: net.layer_channels(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthesisManifest {
    schema_version: u32,
    fingerprint: String,
    config: InversionConfig,
    num_classes: usize,
    layer_channels: Vec<usize>,
    image_shape: Vec<usize>,
    msp_agreement: Vec<f64>,
}

impl SynthesisDataset {
    pub fn total_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn check_fingerprint(&self, checkpoint: &ModelCheckpoint) -> Result<()> {
        let fp = checkpoint.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch { expected: fp, found: self.fingerprint.clone() });
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let image_shape = self.classes.first().map(|c| c.images.pixels().shape().to_vec()).unwrap_or_default();
        let manifest = SynthesisManifest {
            schema_version: SYNTHESIS_SCHEMA_VERSION,
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            num_classes: self.classes.len(),
            layer_channels: self.layer_channels.clone(),
            image_shape,
            msp_agreement: self.classes.iter().map(|c| c.msp_agreement).collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        for cs in &self.classes {
            let c = cs.class;
            let mut img = Archive::new("impressions", serde_json::json!({ "class": c }));
            let px = cs.images.pixels();
            img.push("pixels", px.shape(), px.iter().copied().collect());
            img.save(&dir.join(format!("class{c}_images.bin")))?;

            let mut tr = Archive::new(
                "trajectory",
                serde_json::json!({ "class": c, "batches": cs.trajectories.len() }),
            );
            for (b, t) in cs.trajectories.iter().enumerate() {
                tr.push(format!("b{b}.initial_score"), &[1], vec![t.initial_score]);
                tr.push(format!("b{b}.initial_loss"), &[4], t.initial_loss.to_vec().to_vec());
                tr.push(format!("b{b}.scores"), &[t.len()], t.scores.clone());
                tr.push(
                    format!("b{b}.losses"),
                    &[t.len(), 4],
                    t.losses.iter().flat_map(|l| l.to_vec()).collect(),
                );
                for (l, g) in t.grads.iter().enumerate() {
                    tr.push(format!("b{b}.grad{l}"), g.shape(), g.iter().copied().collect());
                }
            }
            tr.save(&dir.join(format!("class{c}_trajectory.bin")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingArtifact { stage: "invert", path: mpath });
        }
        let manifest: SynthesisManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        if manifest.schema_version != SYNTHESIS_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported synthesis schema {}", manifest.schema_version)));
        }
        let iters = manifest.config.iterations;
        let mut classes = Vec::new();
        for c in 0..manifest.num_classes {
            let img = Archive::load_kind(&dir.join(format!("class{c}_images.bin")), "impressions")?;
            let (shape, data) = img.get("pixels")?;
            let [n, ch, h, w]: [usize; 4] =
                shape.try_into().map_err(|_| Error::Format("impression tensor must be 4-d".into()))?;
            let pixels = Array4::from_shape_vec((n, ch, h, w), data.to_vec()).unwrap();
            let images = ImageBatch::labeled(pixels, vec![c; n], manifest.num_classes)?;

            let tr = Archive::load_kind(&dir.join(format!("class{c}_trajectory.bin")), "trajectory")?;
            let nb = manifest.config.batch_sizes().len();
            let mut trajectories = Vec::with_capacity(nb);
            for b in 0..nb {
                let losses = tr.get_shaped(&format!("b{b}.losses"), &[iters, 4])?;
                let grads = manifest
                    .layer_channels
                    .iter()
                    .enumerate()
                    .map(|(l, &h)| {
                        let g = tr.get_shaped(&format!("b{b}.grad{l}"), &[iters, h])?;
                        Ok(Array2::from_shape_vec((iters, h), g.to_vec()).unwrap())
                    })
                    .collect::<Result<Vec<_>>>()?;
                trajectories.push(TrajectoryRecord {
                    initial_score: tr.get_shaped(&format!("b{b}.initial_score"), &[1])?[0],
                    initial_loss: LossComponents::from_slice(tr.get_shaped(&format!("b{b}.initial_loss"), &[4])?),
                    scores: tr.get_shaped(&format!("b{b}.scores"), &[iters])?.to_vec(),
                    grads,
                    losses: losses.chunks_exact(4).map(LossComponents::from_slice).collect(),
                });
            }
            classes.push(ClassSynthesis {
                class: c,
                images,
                trajectories,
                msp_agreement: manifest.msp_agreement.get(c).copied().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            classes,
            config: manifest.config,
            fingerprint: manifest.fingerprint,
            layer_channels: manifest.layer_channels,
        })
    }
}
