//! Depth prediction and per-image evaluation of a trained model.

use crate::error::{Error, Result};
use crate::geometry::{disp_to_depth, DepthRange};
use crate::metrics::{evaluate_depth, MetricsReport};
use crate::model::MonoVit;
use crate::synth::Triplet;
use crate::tensor::{Tape, Tensor};

/// Adds a batch axis to a `[3,H,W]` image.
pub fn as_batch(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [3, h, w] => image.reshaped(&[1, 3, h, w]),
        [_, 3, _, _] => Ok(image.clone()),
        _ => Err(Error::shape(
            "as_batch",
            format!("expected an RGB image, got {:?}", image.shape()),
        )),
    }
}

/// Full-resolution depth `[N,1,H,W]` for `[N,3,H,W]` or `[3,H,W]` input.
pub fn predict_depth(model: &MonoVit, image: &Tensor, range: DepthRange) -> Result<Tensor> {
    let disp = model.predict(&as_batch(image)?)?;
    let tape = Tape::new();
    let depth = disp_to_depth(tape.constant(disp), range)?;
    let v = (*depth.value()).clone();
    Ok(v)
}

/// Median-scaled metrics of every triplet's target frame. `train_range`
/// converts disparity to depth; `eval_range` masks and clamps.
pub fn evaluate_triplets(
    model: &MonoVit,
    triplets: &[Triplet],
    train_range: DepthRange,
    eval_range: DepthRange,
) -> Result<Vec<MetricsReport>> {
    triplets
        .iter()
        .map(|t| {
            let pred = predict_depth(model, &t.target, train_range)?;
            evaluate_depth(pred.data(), t.depth.data(), eval_range)
        })
        .collect()
}
