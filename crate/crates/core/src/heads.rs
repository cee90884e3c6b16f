//! Few-shot classifier (prototype metric head) and the training-only global
//! classifiers.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::backbone::LinearHead;
use crate::error::{Error, Result};

pub const INITIAL_TEMPERATURE: f64 = 10.0;

/// Prototype head: logits are negative squared distances to class means,
/// divided by a learnable positive temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct FslHead<T = f32> {
    /// `[1]`, log of the temperature.
    pub log_temperature: Tensor<T>,
}

impl<T: Scalar> Default for FslHead<T> {
    fn default() -> Self {
        Self {
            log_temperature: Tensor::scalar(T::of(INITIAL_TEMPERATURE.ln())),
        }
    }
}

impl<T: Scalar> FslHead<T> {
    pub fn temperature(&self) -> f64 {
        self.log_temperature.data()[0].as_f64().exp()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.log_temperature]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.log_temperature]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Var {
        tape.leaf(self.log_temperature.clone(), trainable)
    }
}

/// Number of shots per class, or an episode error if the support labels are
/// not `n_way` classes with equal counts.
pub fn shots_per_class(labels: &[usize], n_way: usize) -> Result<usize> {
    if n_way == 0 || labels.is_empty() {
        return Err(Error::Episode("empty support set".into()));
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Episode(format!("support label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|c| *c == 0) {
        return Err(Error::Episode(format!("class {missing} missing from the support set")));
    }
    let k = counts[0];
    if counts.iter().any(|c| *c != k) {
        return Err(Error::Episode(format!("unequal shots per class: {counts:?}")));
    }
    Ok(k)
}

/// Log-probabilities `[queries, n_way]` for each query against the class
/// prototypes of the support set.
pub fn fsl_predict<T: Scalar>(
    tape: &mut Tape<T>,
    log_temperature: Var,
    support_feats: Var,
    support_labels: &[usize],
    query_feats: Var,
    n_way: usize,
) -> Result<Var> {
    let k = shots_per_class(support_labels, n_way)?;
    let ns = tape.shape(support_feats)[0];
    if ns != support_labels.len() {
        return Err(Error::Episode(format!(
            "{ns} support features for {} labels",
            support_labels.len()
        )));
    }
    let inv_k = T::of(1.0 / k as f64);
    let mut avg = vec![T::zero(); n_way * ns];
    for (j, &l) in support_labels.iter().enumerate() {
        avg[l * ns + j] = inv_k;
    }
    let avg = tape.constant(Tensor::new([n_way, ns], avg)?);
    let protos = tape.matmul(avg, support_feats)?;
    let dist = tape.sq_dist(query_feats, protos)?;
    let neg_log_t = tape.scale(log_temperature, -T::one());
    let inv_t = tape.exp(neg_log_t);
    let scaled = tape.mul(dist, inv_t)?;
    let logits = tape.scale(scaled, -T::one());
    tape.log_softmax(logits)
}

pub fn fsl_loss<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, query_labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(log_probs, query_labels)
}

/// Linear classifier over every training class of one dataset.
pub type GlobalClassifier<T = f32> = LinearHead<T>;

/// Cross-entropy of the global classifier's logits.
pub fn global_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: [Var; 2],
    feats: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = LinearHead::logits(tape, vars, feats)?;
    let lp = tape.log_softmax(logits)?;
    tape.cross_entropy(lp, labels)
}
