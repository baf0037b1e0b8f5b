//! Iterative residual pose refinement.
//!
//! Each step maps the observed cloud into the estimated canonical frame with
//! the inverse of the current pose, encodes it with a geometry-only
//! pointwise MLP, regresses a residual transform, and composes it onto the
//! current estimate. The head starts at zero weights with an identity bias,
//! so an untrained refiner is a no-op.

use crate::autodiff::{Graph, TensorId};
use crate::error::Result;
use crate::nn::{BoundParams, MlpSpec, ParamStore};
use crate::pairing::{PoseHead, PoseHeadOut, PosePrediction};
use crate::se3::Point3;

#[derive(Debug, Clone)]
pub struct Refiner {
    pub feat_dim: usize,
    pub hidden_dim: usize,
}

/// Graph handles for one refinement step: the refined pose nodes feed the
/// refiner's training loss.
pub struct RefineStepOut {
    pub residual: PoseHeadOut,
    /// `[3,3]` rotation of the refined pose.
    pub rot: TensorId,
    /// `[3]` translation of the refined pose.
    pub trans: TensorId,
    pub prediction: PosePrediction,
}

impl Refiner {
    pub fn new(feat_dim: usize, hidden_dim: usize) -> Self {
        Refiner {
            feat_dim,
            hidden_dim,
        }
    }

    fn encoder_spec(&self) -> MlpSpec {
        MlpSpec::new("refiner.enc", vec![3, self.feat_dim, self.feat_dim])
    }

    fn head(&self) -> PoseHead {
        PoseHead::with_prefix("refiner.head", self.feat_dim, self.hidden_dim)
    }

    /// Registers parameters under the `refiner.` checkpoint section.
    pub fn register_params(
        &self,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<()> {
        self.encoder_spec().register(store, rng)?;
        self.head().register_params(store, rng, [0.0; 3])
    }

    /// One tracked refinement step on an existing graph.
    pub fn refine_step_graph(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        observed_cloud: &[Point3],
        current: &PosePrediction,
    ) -> Result<RefineStepOut> {
        let current_t = current.to_transform();
        let canonical = current_t.inverse().transform_points(observed_cloud);
        let flat: Vec<f64> = canonical.iter().flatten().copied().collect();
        let input = g.constant(&[canonical.len(), 3], flat)?;
        let feats = self.encoder_spec().forward(g, params, input)?;
        let feats = g.relu(feats);
        let residual = self.head().regress_pose(g, params, feats)?;

        // Refined pose = current ∘ residual, with the residual tracked.
        let rc = g.constant(&[3, 3], current_t.rotation_flat().to_vec())?;
        let rot = g.matmul(rc, residual.rot)?;
        let dt = g.reshape(residual.trans, &[3, 1])?;
        let rotated_dt = g.matmul(rc, dt)?;
        let rotated_dt = g.reshape(rotated_dt, &[3])?;
        let tc = g.constant(&[3], current_t.translation.to_vec())?;
        let trans = g.add(rotated_dt, tc)?;

        let prediction = PosePrediction::from_raw(
            current.q.mul(&residual.prediction.q),
            {
                let tv = g.value(trans);
                [tv[0], tv[1], tv[2]]
            },
        )?;
        Ok(RefineStepOut {
            residual,
            rot,
            trans,
            prediction,
        })
    }

    /// One refinement step with frozen parameters.
    pub fn refine_step(
        &self,
        store: &ParamStore,
        observed_cloud: &[Point3],
        current: &PosePrediction,
    ) -> Result<PosePrediction> {
        let mut g = Graph::inference();
        let params = store.bind(&mut g, false);
        Ok(self
            .refine_step_graph(&mut g, &params, observed_cloud, current)?
            .prediction)
    }

    /// `iterations` chained refinement steps; zero iterations returns the
    /// initial pose unchanged.
    pub fn iterative_refine(
        &self,
        store: &ParamStore,
        observed_cloud: &[Point3],
        initial: &PosePrediction,
        iterations: usize,
    ) -> Result<PosePrediction> {
        let mut pose = *initial;
        for _ in 0..iterations {
            pose = self.refine_step(store, observed_cloud, &pose)?;
        }
        Ok(pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{Quaternion, RigidTransform};
    use crate::seed;

    fn fresh() -> (Refiner, ParamStore) {
        let refiner = Refiner::new(16, 32);
        let mut store = ParamStore::new();
        refiner.register_params(&mut store, &mut seed::rng(77)).unwrap();
        (refiner, store)
    }

    fn cloud() -> Vec<Point3> {
        use rand::Rng;
        let mut rng = seed::rng(5);
        (0..24)
            .map(|_| {
                [
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(0.4..0.6),
                ]
            })
            .collect()
    }

    fn some_pose() -> PosePrediction {
        let q = Quaternion::from_axis_angle([0.3, -0.5, 0.8], 0.4).unwrap();
        PosePrediction::from_raw(q, [0.02, -0.01, 0.5]).unwrap()
    }

    #[test]
    fn identity_head_is_a_fixed_point() {
        let (refiner, store) = fresh();
        let current = some_pose();
        let out = refiner.refine_step(&store, &cloud(), &current).unwrap();
        assert!((out.q.w - current.q.w).abs() < 1e-12);
        assert!((out.q.x - current.q.x).abs() < 1e-12);
        for i in 0..3 {
            assert!((out.t[i] - current.t[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iterations_returns_initial() {
        let (refiner, store) = fresh();
        let current = some_pose();
        let out = refiner
            .iterative_refine(&store, &cloud(), &current, 0)
            .unwrap();
        assert_eq!(out, current);
    }

    #[test]
    fn identity_head_any_iterations_returns_initial() {
        let (refiner, store) = fresh();
        let current = some_pose();
        let out = refiner
            .iterative_refine(&store, &cloud(), &current, 4)
            .unwrap();
        for i in 0..3 {
            assert!((out.t[i] - current.t[i]).abs() < 1e-9);
        }
        assert!((out.q.w - current.q.w).abs() < 1e-9);
    }

    #[test]
    fn iterative_refine_equals_manual_chaining() {
        let (refiner, mut store) = fresh();
        // Give the residual head nonzero weights so steps actually move.
        {
            let w = store.get_mut("refiner.head.1.w").unwrap();
            for (i, v) in w.data.iter_mut().enumerate() {
                *v = ((i % 11) as f64 - 5.0) * 0.002;
            }
        }
        let pts = cloud();
        let initial = some_pose();
        let chained = refiner.iterative_refine(&store, &pts, &initial, 3).unwrap();
        let mut manual = initial;
        for _ in 0..3 {
            manual = refiner.refine_step(&store, &pts, &manual).unwrap();
        }
        assert_eq!(chained, manual);
    }

    #[test]
    fn composition_order_applies_residual_in_canonical_frame() {
        let (refiner, mut store) = fresh();
        {
            let w = store.get_mut("refiner.head.1.w").unwrap();
            for (i, v) in w.data.iter_mut().enumerate() {
                *v = ((i % 7) as f64 - 3.0) * 0.004;
            }
        }
        let pts = cloud();
        let current = some_pose();
        let mut g = Graph::inference();
        let params = store.bind(&mut g, false);
        let step = refiner
            .refine_step_graph(&mut g, &params, &pts, &current)
            .unwrap();
        // The graph-composed pose must equal the plain composition of the
        // current transform with the recorded residual.
        let composed = current
            .to_transform()
            .compose(&step.residual.prediction.to_transform());
        let refined = step.prediction.to_transform();
        for i in 0..3 {
            for j in 0..3 {
                assert!((composed.rotation[i][j] - refined.rotation[i][j]).abs() < 1e-9);
            }
            assert!((composed.translation[i] - refined.translation[i]).abs() < 1e-12);
        }
        // And the tracked nodes carry the same values.
        let rot_vals = g.value(step.rot);
        for (k, v) in composed.rotation_flat().iter().enumerate() {
            assert!((rot_vals[k] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn refined_pose_satisfies_rotation_invariants() {
        let (refiner, mut store) = fresh();
        {
            let w = store.get_mut("refiner.head.1.w").unwrap();
            for (i, v) in w.data.iter_mut().enumerate() {
                *v = ((i % 13) as f64 - 6.0) * 0.01;
            }
        }
        let out = refiner
            .iterative_refine(&store, &cloud(), &some_pose(), 3)
            .unwrap();
        RigidTransform::new(out.to_transform().rotation, out.t).unwrap();
    }
}
