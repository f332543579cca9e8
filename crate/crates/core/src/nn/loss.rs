use serde::{Deserialize, Serialize};

use super::ops::{log_softmax, softmax};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean negative log-likelihood over the batch, and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    if n == 0 {
        return Ok((T::zero(), Tensor::zeros(&[0, k])));
    }
    let logp = log_softmax(logits)?;
    let mut grad = softmax(logits)?;
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        loss = loss - logp.data()[i * k + l];
        grad.data_mut()[i * k + l] = grad.data()[i * k + l] - T::one();
    }
    grad.data_mut().iter_mut().for_each(|g| *g = *g * inv_n);
    Ok((loss * inv_n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher ‖ student).
    #[default]
    TeacherStudent,
    /// KL(student ‖ teacher).
    StudentTeacher,
}

/// Mean KL divergence between teacher and student output distributions.
/// The teacher is a constant; the returned gradient is with respect to the
/// student logits only.
pub fn kl_consistency<T: Scalar>(
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
    direction: KlDirection,
) -> Result<(T, Tensor<T>)> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::shape(
            "kl_consistency",
            format!("{:?} vs {:?}", teacher_logits.shape(), student_logits.shape()),
        ));
    }
    let (n, k) = student_logits.dims2("kl_consistency")?;
    if n == 0 {
        return Ok((T::zero(), Tensor::zeros(&[0, k])));
    }
    let lt = log_softmax(teacher_logits)?;
    let ls = log_softmax(student_logits)?;
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = T::zero();
    for i in 0..n {
        let r = i * k..(i + 1) * k;
        let (lt, ls) = (&lt.data()[r.clone()], &ls.data()[r.clone()]);
        let g = &mut grad.data_mut()[r];
        match direction {
            KlDirection::TeacherStudent => {
                let mut row = T::zero();
                for j in 0..k {
                    let pt = lt[j].exp();
                    row = row + pt * (lt[j] - ls[j]);
                    g[j] = (ls[j].exp() - pt) * inv_n;
                }
                total = total + row;
            }
            KlDirection::StudentTeacher => {
                let row: T = (0..k).map(|j| ls[j].exp() * (ls[j] - lt[j])).sum();
                for j in 0..k {
                    let ps = ls[j].exp();
                    g[j] = ps * (ls[j] - lt[j] - row) * inv_n;
                }
                total = total + row;
            }
        }
    }
    Ok((total * inv_n, grad))
}
