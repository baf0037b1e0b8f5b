//! Full network assembly: encoder, pair encoding, pose head, and the
//! optional dense-correspondence head, wired for training and inference.

use crate::autodiff::{Graph, TensorId};
use crate::config::ModelConfig;
use crate::encoder::{Encoder, FusedFeatureSet};
use crate::error::Result;
use crate::loss::{self, DcmHead, DcmTargets, LossReport};
use crate::nn::{BoundParams, ParamStore};
use crate::pairing::{
    generate_pairs, PairEncoder, PairIndexSet, PoseHead, PoseHeadOut, PosePrediction,
};
use crate::se3::Point3;
use crate::seed;
use crate::synth::{CameraIntrinsics, ObjectModel, SceneSample};

pub struct PoseNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub pair_encoder: PairEncoder,
    pub pose_head: PoseHead,
    pub dcm_head: Option<DcmHead>,
}

/// Graph handles from one forward pass.
pub struct ForwardOut {
    pub fused: FusedFeatureSet,
    pub pair_features: TensorId,
    pub head: PoseHeadOut,
    pub dcm_prediction: Option<TensorId>,
}

impl PoseNet {
    pub fn new(cfg: &ModelConfig) -> Self {
        let encoder = Encoder::new(cfg.d_rgb, cfg.d_depth, cfg.d_fusion, cfg.group_size);
        let pair_encoder = PairEncoder::new(cfg.pair_mode, cfg.d_fusion, cfg.rank_l, cfg.d_out);
        let pose_head = PoseHead::new(pair_encoder.output_dim());
        let dcm_head = cfg.dcm_enabled.then(|| DcmHead::new(cfg.d_fusion));
        PoseNet {
            cfg: *cfg,
            encoder,
            pair_encoder,
            pose_head,
            dcm_head,
        }
    }

    /// Fresh parameter store; `translation_init` seeds the pose head bias
    /// with a plausible object distance so training starts in range.
    pub fn init_params(&self, init_seed: u64, translation_init: [f64; 3]) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed::derive(init_seed, seed::stream::PARAM_INIT, 0));
        self.encoder.register_params(&mut store, &mut rng)?;
        self.pair_encoder.register_params(&mut store, &mut rng)?;
        self.pose_head
            .register_params(&mut store, &mut rng, translation_init)?;
        if let Some(dcm) = &self.dcm_head {
            dcm.register_params(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Grouping radii for an object, as fractions of its diameter.
    pub fn radii_for(&self, model: &ObjectModel) -> [f64; 2] {
        [
            self.cfg.radii_frac[0] * model.diameter,
            self.cfg.radii_frac[1] * model.diameter,
        ]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        sample: &SceneSample,
        intrinsics: &CameraIntrinsics,
        model: &ObjectModel,
        pairs: &PairIndexSet,
    ) -> Result<ForwardOut> {
        let fused = self
            .encoder
            .encode_sample(g, params, sample, intrinsics, self.radii_for(model))?;
        let pair_features = self
            .pair_encoder
            .encode_rows(g, params, fused.features, pairs)?;
        let head = self.pose_head.regress_pose(g, params, pair_features)?;
        let dcm_prediction = match &self.dcm_head {
            Some(dcm) => Some(dcm.forward(g, params, fused.features)?),
            None => None,
        };
        Ok(ForwardOut {
            fused,
            pair_features,
            head,
            dcm_prediction,
        })
    }

    /// Builds the joint training loss for one forward pass.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        fwd: &ForwardOut,
        sample: &SceneSample,
        model: &ObjectModel,
        loss_points: &[Point3],
    ) -> Result<(TensorId, LossReport)> {
        let l_pr = loss::pose_loss(
            g,
            fwd.head.rot,
            fwd.head.trans,
            &sample.gt_pose,
            loss_points,
            model.symmetric,
        )?;
        let l_dcm = match fwd.dcm_prediction {
            Some(pred) => {
                let targets: DcmTargets =
                    loss::make_dcm_targets(&sample.observed_cloud, &sample.gt_pose);
                Some(loss::dcm_loss(g, pred, &targets)?)
            }
            None => None,
        };
        loss::joint_loss(g, l_pr, l_dcm, self.cfg.lambda)
    }

    /// Untracked prediction for one sample.
    pub fn predict(
        &self,
        store: &ParamStore,
        sample: &SceneSample,
        intrinsics: &CameraIntrinsics,
        model: &ObjectModel,
        pair_seed: u64,
    ) -> Result<PosePrediction> {
        let mut g = Graph::inference();
        let params = store.bind(&mut g, false);
        let pairs = generate_pairs(sample.point_count(), pair_seed)?;
        let out = self.forward(&mut g, &params, sample, intrinsics, model, &pairs)?;
        Ok(out.head.prediction)
    }
}
