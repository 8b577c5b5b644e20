#![allow(dead_code)]

use impress::config::PipelineConfig;
use impress::datagen::{generate_id_dataset, DatasetSpec};
use impress::smallnet::{build_model, train, ArchConfig, ModelCheckpoint, TrainHyper};

/// A configuration small enough to run every stage in a few seconds.
pub fn tiny_config() -> PipelineConfig {
    PipelineConfig::default()
        .with_overrides(&[
            "data.image_size=8",
            "data.samples_per_class=40",
            "arch.block_channels=[4, 4, 4]",
            "train.epochs=2",
            "train.batch_size=16",
            "inversion.iterations=6",
            "inversion.batch_size=4",
            "inversion.samples_per_class=8",
            "inversion.min_msp_agreement=0.0",
            "eval.id_samples=20",
            "eval.ood_samples=20",
        ])
        .expect("tiny config is valid")
}

pub fn tiny_arch(block_channels: Vec<usize>) -> ArchConfig {
    ArchConfig { block_channels, input_size: 8, ..ArchConfig::default() }
}

/// A briefly trained network so BN running statistics are non-trivial.
pub fn tiny_checkpoint(block_channels: Vec<usize>, seed: u64) -> ModelCheckpoint {
    let arch = tiny_arch(block_channels);
    let spec = DatasetSpec { image_size: 8, samples_per_class: 24, seed, ..DatasetSpec::default() };
    let data = generate_id_dataset(&spec).unwrap();
    let net = build_model(&arch, seed).unwrap();
    let hyper = TrainHyper { epochs: 2, batch_size: 16, ..TrainHyper::default() };
    train(net, &data, None, &hyper, seed).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub mod oracle {
    /// `P(ood > id) + ½ P(ood = id)` by enumerating all pairs.
    pub fn auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                if b > a {
                    s += 1.0;
                } else if b == a {
                    s += 0.5;
                }
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    fn frac_le(v: &[f64], t: f64) -> f64 {
        v.iter().filter(|&&x| x <= t).count() as f64 / v.len() as f64
    }

    fn frac_gt(v: &[f64], t: f64) -> f64 {
        v.iter().filter(|&&x| x > t).count() as f64 / v.len() as f64
    }

    pub fn tnr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
        let t = id
            .iter()
            .copied()
            .filter(|&t| frac_le(id, t) >= tpr)
            .fold(f64::INFINITY, f64::min);
        frac_gt(ood, t)
    }

    pub fn detection_accuracy(id: &[f64], ood: &[f64]) -> f64 {
        id.iter()
            .chain(ood)
            .map(|&t| 0.5 * (frac_le(id, t) + frac_gt(ood, t)))
            .fold(0.0, f64::max)
    }

    /// Mean over ID samples of the precision at that sample's own score.
    pub fn aupr_in(id: &[f64], ood: &[f64]) -> f64 {
        id.iter()
            .map(|&t| {
                let tp = id.iter().filter(|&&x| x <= t).count() as f64;
                let fp = ood.iter().filter(|&&x| x <= t).count() as f64;
                tp / (tp + fp)
            })
            .sum::<f64>()
            / id.len() as f64
    }
}

pub mod calib_oracle {
    use impress::calibration::DELTA_Y_GUARD;
    use impress::inversion::{LossComponents, TrajectoryRecord};
    use impress::smallnet::SmallNet;
    use ndarray::{Array2, Array4};

    pub fn trajectory(initial: f64, scores: Vec<f64>, grads: Vec<Array2<f64>>) -> TrajectoryRecord {
        let n = scores.len();
        TrajectoryRecord {
            initial_score: initial,
            initial_loss: LossComponents::default(),
            scores,
            grads,
            losses: vec![LossComponents::default(); n],
        }
    }

    /// Straight-line computation of `β`, `α` and the reference means, written
    /// with explicit loops over raw arrays.
    pub struct Oracle {
        pub beta: Vec<Vec<f64>>,
        pub alpha: Vec<f64>,
        pub cavg: Vec<f64>,
    }

    fn oracle_softmax(v: &[f64]) -> Vec<f64> {
        let mut m = v[0];
        for &x in v {
            if x > m {
                m = x;
            }
        }
        let mut e = vec![0.0; v.len()];
        let mut z = 0.0;
        for i in 0..v.len() {
            e[i] = (v[i] - m).exp();
            z += e[i];
        }
        for x in e.iter_mut() {
            *x /= z;
        }
        e
    }

    pub fn oracle(net: &SmallNet, class: usize, images: &Array4<f64>, trajs: &[TrajectoryRecord]) -> Oracle {
        let n = images.shape()[0];
        let (_, taps, grads) = net.activation_gradients(images, class).unwrap();
        let nl = grads.len();
        // channel gradient averages, then channel weights
        let mut beta = Vec::new();
        for g in &grads {
            let (_, h, d1, d2) = g.dim();
            let mut w = vec![0.0; h];
            for k in 0..h {
                let mut s = 0.0;
                for i in 0..n {
                    for a in 0..d1 {
                        for b in 0..d2 {
                            s += g[[i, k, a, b]];
                        }
                    }
                }
                w[k] = s / (n * d1 * d2) as f64;
            }
            beta.push(oracle_softmax(&w));
        }
        // layer sensitivities per trajectory, averaged over trajectories
        let mut delta_bar = vec![0.0; nl];
        for tr in trajs {
            for l in 0..nl {
                let mut sum = 0.0;
                let mut count = 0;
                let mut prev = tr.initial_score;
                for t in 0..tr.scores.len() {
                    let dy = tr.scores[t] - prev;
                    prev = tr.scores[t];
                    if dy.abs() < DELTA_Y_GUARD {
                        continue;
                    }
                    let mut num = 0.0;
                    for k in 0..beta[l].len() {
                        num += beta[l][k] * tr.grads[l][[t, k]];
                    }
                    sum += num / dy;
                    count += 1;
                }
                delta_bar[l] += sum / count as f64 / trajs.len() as f64;
            }
        }
        let alpha = oracle_softmax(&delta_bar);
        // reference means with the channel weights
        let mut cavg = vec![0.0; nl];
        for l in 0..nl {
            let t = &taps.layers[l];
            let (_, h, d1, d2) = t.dim();
            for i in 0..n {
                for k in 0..h {
                    let mut s = 0.0;
                    for a in 0..d1 {
                        for b in 0..d2 {
                            s += t[[i, k, a, b]];
                        }
                    }
                    cavg[l] += beta[l][k] * s / (d1 * d2) as f64 / n as f64;
                }
            }
        }
        Oracle { beta, alpha, cavg }
    }
}
