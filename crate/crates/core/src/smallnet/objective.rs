//! Scalar objectives of a forward pass, used to request input gradients.

use ndarray::{Array2, Array4};

use super::model::{BnMode, Seeds, SmallNet, Want};
use crate::error::{input_err, Result};
use crate::numerics::{argmax, softmax};

/// Value and partial derivatives of an objective with respect to the logits
/// and taps of an inference-mode forward pass.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub value: f64,
    pub d_logits: Option<Array2<f64>>,
    pub d_taps: Vec<Option<Array4<f64>>>,
}

pub trait Objective {
    fn evaluate(&self, logits: &Array2<f64>, taps: &[Array4<f64>]) -> Result<ObjectiveValue>;
}

/// A constant; its gradient is identically zero.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Objective for Constant {
    fn evaluate(&self, _: &Array2<f64>, _: &[Array4<f64>]) -> Result<ObjectiveValue> {
        Ok(ObjectiveValue { value: self.0, d_logits: None, d_taps: Vec::new() })
    }
}

/// `Σ_n logit_n[class]`.
#[derive(Debug, Clone, Copy)]
pub struct ClassLogitSum {
    pub class: usize,
}

impl Objective for ClassLogitSum {
    fn evaluate(&self, logits: &Array2<f64>, _: &[Array4<f64>]) -> Result<ObjectiveValue> {
        if self.class >= logits.ncols() {
            return Err(input_err(format!("class {} out of range", self.class)));
        }
        let mut d = Array2::zeros(logits.raw_dim());
        d.column_mut(self.class).fill(1.0);
        Ok(ObjectiveValue {
            value: logits.column(self.class).sum(),
            d_logits: Some(d),
            d_taps: Vec::new(),
        })
    }
}

/// `Σ_n log softmax(logits_n / T)[argmax_n]`, the quantity ODIN ascends.
/// The argmax is held fixed (piecewise-smooth).
#[derive(Debug, Clone, Copy)]
pub struct MaxLogSoftmax {
    pub temperature: f64,
}

impl Objective for MaxLogSoftmax {
    fn evaluate(&self, logits: &Array2<f64>, _: &[Array4<f64>]) -> Result<ObjectiveValue> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(input_err("temperature must be positive and finite"));
        }
        let mut value = 0.0;
        let mut d = Array2::zeros(logits.raw_dim());
        for (i, row) in logits.rows().into_iter().enumerate() {
            let scaled: Vec<f64> = row.iter().map(|v| v / self.temperature).collect();
            let p = softmax(&scaled);
            let k = argmax(&scaled);
            value += p[k].ln();
            for (j, pj) in p.iter().enumerate() {
                let indicator = if j == k { 1.0 } else { 0.0 };
                d[[i, j]] = (indicator - pj) / self.temperature;
            }
        }
        Ok(ObjectiveValue { value, d_logits: Some(d), d_taps: Vec::new() })
    }
}

/// Gradient of `objective` with respect to the input batch.
/// Returns `(objective value, gradient shaped like x)`.
pub fn input_gradient(
    net: &SmallNet,
    x: &Array4<f64>,
    objective: &dyn Objective,
) -> Result<(f64, Array4<f64>)> {
    let trace = net.forward_trace(x, BnMode::Eval)?;
    let taps = trace.taps();
    let ov = objective.evaluate(&trace.logits, &taps)?;
    if !ov.value.is_finite() {
        return Err(input_err("objective is not finite, so not differentiable here"));
    }
    if let Some(d) = &ov.d_logits {
        if d.dim() != trace.logits.dim() || d.iter().any(|v| !v.is_finite()) {
            return Err(input_err("objective logit gradient is malformed or non-finite"));
        }
    }
    if ov.d_taps.len() > taps.len() {
        return Err(input_err("objective returned gradients for more taps than exist"));
    }
    for (d, t) in ov.d_taps.iter().zip(&taps) {
        if let Some(d) = d {
            if d.dim() != t.dim() || d.iter().any(|v| !v.is_finite()) {
                return Err(input_err("objective tap gradient is malformed or non-finite"));
            }
        }
    }
    if ov.d_logits.is_none() && ov.d_taps.iter().all(Option::is_none) {
        return Ok((ov.value, Array4::zeros(x.raw_dim())));
    }
    let seeds = Seeds { logits: ov.d_logits, taps: ov.d_taps, bn_inputs: Vec::new() };
    let grads = net.backward(&trace, &seeds, Want { input: true, ..Want::default() });
    Ok((ov.value, grads.input.expect("input gradient requested")))
}
