use super::adaptive::loss_total;
use super::Model;
use crate::dataset::Batch;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{grad_check, NormMode, Tape, Var};

/// Finite-difference check of the full training loss (cross-entropy plus
/// the weighted penalty) with respect to every parameter tensor.
///
/// Returns the largest relative error per parameter, in [`Model::params`] order.
pub fn model_gradient_check<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    mode: NormMode,
    eps: T,
) -> Result<Vec<(String, T)>> {
    let lambda = T::from_f64_lossy(model.config().lambda);
    let names: Vec<(String, crate::tensor::Tensor<T>)> =
        model.params().into_iter().map(|(n, _, t)| (n, t.clone())).collect();
    let mut report = Vec::with_capacity(names.len());
    for (index, (name, value)) in names.iter().enumerate() {
        let f = |tape: &mut Tape<T>, probe: Var| -> Result<Var> {
            let mut m = model.clone();
            let images = tape.leaf(batch.images.clone());
            let vars: Vec<Var> = m
                .params()
                .into_iter()
                .enumerate()
                .map(|(i, (_, _, t))| if i == index { probe } else { tape.leaf(t.clone()) })
                .collect();
            let fwd = m.forward_with(tape, images, vars, mode)?;
            loss_total(tape, fwd.logits, &batch.labels, fwd.adaptive, lambda)
        };
        report.push((name.clone(), grad_check(f, value, eps)?));
    }
    Ok(report)
}
