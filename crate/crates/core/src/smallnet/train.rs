//! Mini-batch SGD with momentum and BN running-statistic accumulation.

use log::info;
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, TrainingMeta};
use super::model::{running_update, BnMode, ParamGrads, Seeds, SmallNet, Want};
use crate::datagen::ImageBatch;
use crate::error::{config_err, input_err, Error, Result};
use crate::numerics::{argmax, log_sum_exp};
use crate::seeding::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 64, lr: 0.05, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err("training batch size must be at least 2 for batch norm"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err("invalid optimizer hyperparameters"));
        }
        Ok(())
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut loss = 0.0;
    let mut d = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let r = row.to_vec();
        let lse = log_sum_exp(&r);
        loss += lse - r[targets[i]];
        for (j, v) in r.iter().enumerate() {
            d[[i, j]] = (v - lse).exp() / n;
        }
        d[[i, targets[i]]] -= 1.0 / n;
    }
    (loss / n, d)
}

struct Velocity {
    conv: Vec<Array4<f64>>,
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    head_weight: Array2<f64>,
    head_bias: Vec<f64>,
}

impl Velocity {
    fn zeros(net: &SmallNet) -> Self {
        Self {
            conv: net.blocks.iter().map(|b| Array4::zeros(b.weight.raw_dim())).collect(),
            gamma: net.blocks.iter().map(|b| vec![0.0; b.gamma.len()]).collect(),
            beta: net.blocks.iter().map(|b| vec![0.0; b.beta.len()]).collect(),
            head_weight: Array2::zeros(net.head_weight.raw_dim()),
            head_bias: vec![0.0; net.head_bias.len()],
        }
    }
}

fn sgd_step(net: &mut SmallNet, vel: &mut Velocity, g: &ParamGrads, hyper: &TrainHyper) {
    let (lr, mu, wd) = (hyper.lr, hyper.momentum, hyper.weight_decay);
    for (l, block) in net.blocks.iter_mut().enumerate() {
        let v = &mut vel.conv[l];
        ndarray::Zip::from(v).and(&mut block.weight).and(&g.conv[l]).for_each(|v, w, &g| {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        });
        for ((v, p), &g) in vel.gamma[l].iter_mut().zip(&mut block.gamma).zip(&g.gamma[l]) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        for ((v, p), &g) in vel.beta[l].iter_mut().zip(&mut block.beta).zip(&g.beta[l]) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    ndarray::Zip::from(&mut vel.head_weight)
        .and(&mut net.head_weight)
        .and(&g.head_weight)
        .for_each(|v, w, &g| {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        });
    for ((v, p), &g) in vel.head_bias.iter_mut().zip(&mut net.head_bias).zip(&g.head_bias) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

/// Fraction of `set` whose arg-max logit equals its label.
pub fn accuracy(net: &SmallNet, set: &ImageBatch) -> Result<f64> {
    let labels = set.labels().ok_or_else(|| input_err("accuracy requires labels"))?;
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(256) {
        let end = (start + 256).min(set.len());
        let x = set.pixels().slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let logits = net.logits(&x)?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            correct += (argmax(&row.to_vec()) == labels[start + i]) as usize;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains `net` in place and packages it as a checkpoint.
pub fn train(
    mut net: SmallNet,
    train_set: &ImageBatch,
    test_set: Option<&ImageBatch>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ModelCheckpoint> {
    hyper.validate()?;
    let labels = train_set.labels().ok_or_else(|| input_err("training set must be labeled"))?;
    net.check_input(train_set.pixels())?;
    let momentum = net.arch().bn_momentum;
    let mut vel = Velocity::zeros(&net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..hyper.epochs {
        let mut rng = seeding::rng(seed, Stream::Shuffle, epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train_set.pixels().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = net.forward_trace(&x, BnMode::Train)?;
            let (loss, dlogits) = cross_entropy(&trace.logits, &y);
            if !loss.is_finite() {
                return Err(Error::Training { epoch, detail: format!("loss became {loss}") });
            }
            let grads = net.backward(
                &trace,
                &Seeds::from_logits(dlogits),
                Want { params: true, ..Want::default() },
            );
            sgd_step(&mut net, &mut vel, grads.params.as_ref().unwrap(), hyper);
            for (block, bt) in net.blocks.iter_mut().zip(&trace.blocks) {
                let (bm, bv) = bt.batch_moments.as_ref().unwrap();
                for k in 0..bm.len() {
                    block.running_mean[k] = running_update(block.running_mean[k], bm[k], momentum);
                    block.running_var[k] = running_update(block.running_var[k], bv[k], momentum);
                }
            }
            total += loss;
            batches += 1;
        }
        last_loss = total / batches.max(1) as f64;
        let finite_bn = net
            .blocks
            .iter()
            .all(|b| b.running_mean.iter().chain(&b.running_var).all(|v| v.is_finite()));
        if !last_loss.is_finite() || !finite_bn {
            return Err(Error::Training { epoch, detail: "non-finite loss or BN statistics".into() });
        }
        info!("epoch {:>2}: mean loss {last_loss:.4}", epoch + 1);
    }
    let test_accuracy = test_set.map(|t| accuracy(&net, t)).transpose()?;
    if let Some(acc) = test_accuracy {
        info!("test accuracy {acc:.4}");
    }
    Ok(ModelCheckpoint::new(
        net,
        TrainingMeta {
            seed,
            epochs: hyper.epochs,
            final_train_loss: last_loss,
            test_accuracy,
            hyper: hyper.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform() {
        let logits = Array2::zeros((3, 4));
        let (loss, d) = cross_entropy(&logits, &[0, 1, 2]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        for row in d.rows() {
            assert!(row.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_gradient_fd() {
        let logits = Array2::from_shape_vec((2, 3), vec![0.3, -1.2, 2.0, 1.0, 0.5, -0.5]).unwrap();
        let t = [2, 0];
        let (_, d) = cross_entropy(&logits, &t);
        for i in 0..2 {
            for j in 0..3 {
                let h = 1e-6;
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (cross_entropy(&p, &t).0 - cross_entropy(&m, &t).0) / (2.0 * h);
                assert!((fd - d[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_hyper() {
        assert!(TrainHyper { batch_size: 1, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { lr: 0.0, ..TrainHyper::default() }.validate().is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        use crate::datagen::{generate_id_dataset, DatasetSpec};
        use crate::smallnet::ArchConfig;
        let data = generate_id_dataset(&DatasetSpec { samples_per_class: 8, ..DatasetSpec::default() })
            .unwrap();
        let net = SmallNet::new(&ArchConfig { block_channels: vec![4], ..ArchConfig::default() }, 0)
            .unwrap();
        let hyper = TrainHyper { lr: 1e200, epochs: 3, batch_size: 8, ..TrainHyper::default() };
        match train(net, &data, None, &hyper, 0) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
