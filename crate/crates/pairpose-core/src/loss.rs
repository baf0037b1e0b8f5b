//! Training losses: pose regression, dense correspondence mapping, and
//! their joint combination.
//!
//! The pose loss measures the mean distance between model points transformed
//! by the ground-truth pose and by the predicted pose; symmetric objects use
//! the closest-point variant so geometrically correct poses are not
//! penalized. The dense-correspondence loss supervises a per-pixel head that
//! regresses each observed point's canonical-frame coordinate, obtained by
//! transforming the observed cloud with the inverse ground-truth pose.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, MlpSpec, ParamStore};
use crate::se3::{Point3, RigidTransform};

/// Canonical-frame supervision targets, one per observed point.
#[derive(Debug, Clone, PartialEq)]
pub struct DcmTargets {
    pub targets: Vec<Point3>,
}

/// Targets are the observed cloud mapped through the inverse ground-truth
/// pose.
pub fn make_dcm_targets(observed_cloud: &[Point3], gt_pose: &RigidTransform) -> DcmTargets {
    DcmTargets {
        targets: gt_pose.inverse().transform_points(observed_cloud),
    }
}

/// Per-pixel regression head from fused features to canonical coordinates.
#[derive(Debug, Clone)]
pub struct DcmHead {
    pub d_fusion: usize,
}

impl DcmHead {
    pub fn new(d_fusion: usize) -> Self {
        DcmHead { d_fusion }
    }

    fn spec(&self) -> MlpSpec {
        MlpSpec::new("dcm_head", vec![self.d_fusion, self.d_fusion, 3])
    }

    pub fn register_params(
        &self,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<()> {
        self.spec().register(store, rng)
    }

    /// `[P × d_fusion]` features to `[P × 3]` coordinates.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, features: TensorId) -> Result<TensorId> {
        self.spec().forward(g, params, features)
    }
}

/// Mean Euclidean distance between predicted and target coordinates.
pub fn dcm_loss(g: &mut Graph, predicted: TensorId, targets: &DcmTargets) -> Result<TensorId> {
    let p = targets.targets.len();
    if *g.shape(predicted) != [p, 3] {
        return Err(Error::ShapeMismatch {
            op: "dcm_loss",
            lhs: g.shape(predicted).to_vec(),
            rhs: vec![p, 3],
        });
    }
    let flat: Vec<f64> = targets.targets.iter().flatten().copied().collect();
    let t = g.constant(&[p, 3], flat)?;
    let diff = g.sub(predicted, t)?;
    let norms = g.row_norms(diff)?;
    Ok(g.mean(norms))
}

/// Model points transformed by the tracked pose `(rot, trans)`: the graph
/// counterpart of [`RigidTransform::transform_points`], with matching
/// accumulation order.
pub fn transform_rows(
    g: &mut Graph,
    rot: TensorId,
    trans: TensorId,
    points: &[Point3],
) -> Result<TensorId> {
    let m = points.len();
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let x = g.constant(&[m, 3], flat)?;
    let rt = g.transpose(rot)?;
    let xr = g.matmul(x, rt)?;
    g.add_row_broadcast(xr, trans)
}

/// Mean distance between ground-truth-transformed and prediction-transformed
/// model points, matched index to index. Differentiable in the prediction.
pub fn pose_loss_add(
    g: &mut Graph,
    rot: TensorId,
    trans: TensorId,
    gt: &RigidTransform,
    model_points: &[Point3],
) -> Result<TensorId> {
    if model_points.is_empty() {
        return Err(Error::EmptyInput("pose_loss_add"));
    }
    let pred = transform_rows(g, rot, trans, model_points)?;
    let gt_flat: Vec<f64> = gt
        .transform_points(model_points)
        .iter()
        .flatten()
        .copied()
        .collect();
    let gt_pts = g.constant(&[model_points.len(), 3], gt_flat)?;
    let diff = g.sub(gt_pts, pred)?;
    let norms = g.row_norms(diff)?;
    Ok(g.mean(norms))
}

/// Closest-point variant for symmetric objects: each ground-truth point
/// matches its nearest predicted point. The selection is made on forward
/// values (ties to the lowest index) and gradient flows through the selected
/// rows only.
pub fn pose_loss_adds(
    g: &mut Graph,
    rot: TensorId,
    trans: TensorId,
    gt: &RigidTransform,
    model_points: &[Point3],
) -> Result<TensorId> {
    if model_points.is_empty() {
        return Err(Error::EmptyInput("pose_loss_adds"));
    }
    let m = model_points.len();
    let pred = transform_rows(g, rot, trans, model_points)?;
    let gt_points = gt.transform_points(model_points);

    let pred_vals = g.value(pred).to_vec();
    let mut nearest = Vec::with_capacity(m);
    for gp in &gt_points {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for k in 0..m {
            let dx = gp[0] - pred_vals[k * 3];
            let dy = gp[1] - pred_vals[k * 3 + 1];
            let dz = gp[2] - pred_vals[k * 3 + 2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        nearest.push(best);
        g.note_branch(best as u64);
    }

    let selected = g.gather_rows(pred, &nearest)?;
    let gt_flat: Vec<f64> = gt_points.iter().flatten().copied().collect();
    let gt_const = g.constant(&[m, 3], gt_flat)?;
    let diff = g.sub(gt_const, selected)?;
    let norms = g.row_norms(diff)?;
    Ok(g.mean(norms))
}

/// Dispatch on the object's symmetry flag.
pub fn pose_loss(
    g: &mut Graph,
    rot: TensorId,
    trans: TensorId,
    gt: &RigidTransform,
    model_points: &[Point3],
    symmetric: bool,
) -> Result<TensorId> {
    if symmetric {
        pose_loss_adds(g, rot, trans, gt, model_points)
    } else {
        pose_loss_add(g, rot, trans, gt, model_points)
    }
}

/// Scalar values of one training step's losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub l_pr: f64,
    pub l_dcm: f64,
    pub l_joint: f64,
    pub lambda: f64,
}

/// `l_joint = l_pr + lambda * l_dcm`, as a graph node plus its report.
pub fn joint_loss(
    g: &mut Graph,
    l_pr: TensorId,
    l_dcm: Option<TensorId>,
    lambda: f64,
) -> Result<(TensorId, LossReport)> {
    if lambda < 0.0 {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let (node, dcm_value) = match l_dcm {
        Some(dcm) => {
            let scaled = g.scale(dcm, lambda);
            (g.add(l_pr, scaled)?, g.value(dcm)[0])
        }
        None => (l_pr, 0.0),
    };
    let report = LossReport {
        l_pr: g.value(l_pr)[0],
        l_dcm: dcm_value,
        l_joint: g.value(node)[0],
        lambda,
    };
    Ok((node, report))
}
