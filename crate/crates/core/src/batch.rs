//! Stacking triplets into batched tensors and placing them on a tape.

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::losses::{reprojection_error, ViewSet};
use crate::pose::{PoseVar, Se3};
use crate::synth::Triplet;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct Batch {
    /// Indices of the triplets in their dataset.
    pub ids: Vec<usize>,
    pub target: Tensor,
    pub src_fwd: Tensor,
    pub src_bwd: Tensor,
    pub depth: Tensor,
    pub pose_fwd: Vec<Se3>,
    pub pose_bwd: Vec<Se3>,
    pub intrinsics: Intrinsics,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let shape = parts[0].shape();
    if parts.iter().any(|p| p.shape() != shape) {
        return Err(Error::shape("stack", "triplets differ in size"));
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(shape);
    Tensor::new(
        &out_shape,
        parts
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect(),
    )
}

impl Batch {
    pub fn new(triplets: &[Triplet], ids: &[usize]) -> Result<Self> {
        let Some(&first) = ids.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let pick: Vec<&Triplet> = ids
            .iter()
            .map(|&i| {
                triplets
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("triplet {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let k = triplets[first].intrinsics;
        if pick.iter().any(|t| t.intrinsics != k) {
            return Err(Error::invalid(
                "triplets in one batch must share intrinsics",
            ));
        }
        let field =
            |f: fn(&Triplet) -> &Tensor| stack(&pick.iter().map(|t| f(t)).collect::<Vec<_>>());
        Ok(Batch {
            ids: ids.to_vec(),
            target: field(|t| &t.target)?,
            src_fwd: field(|t| &t.src_fwd)?,
            src_bwd: field(|t| &t.src_bwd)?,
            depth: field(|t| &t.depth)?,
            pose_fwd: pick.iter().map(|t| t.pose_fwd).collect(),
            pose_bwd: pick.iter().map(|t| t.pose_bwd).collect(),
            intrinsics: k,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Frames as constants with the given poses.
    pub fn views<'t>(&self, tape: &'t Tape, poses: [PoseVar<'t>; 2]) -> ViewSet<'t> {
        ViewSet {
            target: tape.constant(self.target.clone()),
            sources: [
                tape.constant(self.src_fwd.clone()),
                tape.constant(self.src_bwd.clone()),
            ],
            poses,
            intrinsics: self.intrinsics,
        }
    }

    /// Frames with the ground-truth poses.
    pub fn gt_views<'t>(&self, tape: &'t Tape) -> ViewSet<'t> {
        let poses = [
            PoseVar::constant(tape, &self.pose_fwd),
            PoseVar::constant(tape, &self.pose_bwd),
        ];
        self.views(tape, poses)
    }
}

/// Mean in-view photometric error of warping the sources with ground-truth
/// depth and ground-truth poses whose translations are offset by `offset`.
pub fn gt_reprojection_error(t: &Triplet, alpha: f64, offset: [f64; 3]) -> Result<f64> {
    let b = Batch::new(std::slice::from_ref(t), &[0])?;
    let tape = Tape::new();
    let shift = |p: &Se3| {
        let mut q = *p;
        for (a, o) in q.translation.iter_mut().zip(offset) {
            *a += o;
        }
        q
    };
    let poses = [
        PoseVar::constant(&tape, &[shift(&t.pose_fwd)]),
        PoseVar::constant(&tape, &[shift(&t.pose_bwd)]),
    ];
    let views = b.views(&tape, poses);
    reprojection_error(&views, tape.constant(b.depth.clone()), alpha)
}

/// Per-frame camera travel, the larger of the two source translations.
pub fn motion_magnitude(t: &Triplet) -> f64 {
    let n = |p: &Se3| p.translation.iter().map(|v| v * v).sum::<f64>().sqrt();
    n(&t.pose_fwd).max(n(&t.pose_bwd))
}
