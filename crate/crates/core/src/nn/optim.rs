use indexmap::IndexMap;

use super::{ParameterSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for the trainable tensors of a [`ParameterSet`].
///
/// `learning_rate` is read on every step, so population-based training can
/// change it between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: IndexMap<String, Tensor<T>>,
    pub second_moment: IndexMap<String, Tensor<T>>,
    pub step: u64,
    pub learning_rate: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>, learning_rate: f64) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.to_string(), Tensor::zeros(p.value.shape())))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            learning_rate,
        }
    }

    pub fn cast<U: Scalar>(&self) -> OptimizerState<U> {
        let conv = |m: &IndexMap<String, Tensor<T>>| m.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        OptimizerState {
            first_moment: conv(&self.first_moment),
            second_moment: conv(&self.second_moment),
            step: self.step,
            learning_rate: self.learning_rate,
        }
    }

    pub fn numel(&self) -> usize {
        self.first_moment.values().chain(self.second_moment.values()).map(Tensor::numel).sum()
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step<T: Scalar>(params: &mut ParameterSet<T>, grads: &ParameterSet<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if !params.same_schema(grads) {
        return Err(Error::shape("adam_step", "gradient schema differs from parameters"));
    }
    for (name, g) in grads.iter() {
        if g.trainable && !g.value.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(ADAM_BETA1);
    let b2 = T::of(ADAM_BETA2);
    let c1 = T::one() / (T::one() - T::of(ADAM_BETA1.powi(t)));
    let c2 = T::one() / (T::one() - T::of(ADAM_BETA2.powi(t)));
    let lr = T::of(state.learning_rate);
    let eps = T::of(ADAM_EPS);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.get(name);
        let m = state
            .first_moment
            .get_mut(name)
            .ok_or_else(|| Error::shape("adam_step", format!("no moment for {name}")))?;
        let v = state.second_moment.get_mut(name).unwrap();
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi * c1;
            let vhat = *vi * c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `teacher ← decay·teacher + (1 − decay)·student` for every tensor,
/// batch-norm running statistics included.
pub fn ema_update<T: Scalar>(teacher: &mut ParameterSet<T>, student: &ParameterSet<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} outside [0, 1]")));
    }
    if !teacher.same_schema(student) {
        return Err(Error::shape("ema_update", "teacher and student schemas differ"));
    }
    let d = T::of(decay);
    let s = T::one() - d;
    for ((_, tp), (_, sp)) in teacher.iter_mut().zip(student.iter()) {
        for (t, &v) in tp.value.data_mut().iter_mut().zip(sp.value.data()) {
            *t = d * *t + s * v;
        }
    }
    Ok(())
}
