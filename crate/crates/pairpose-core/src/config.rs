//! Experiment configuration.
//!
//! One JSON document describes a complete run: dataset generation, network
//! dimensions, optimizer, training schedule, evaluation, and refiner.
//! Unknown keys are rejected so typos fail loudly; missing sections fall
//! back to defaults. The resolved config is echoed verbatim into every run
//! manifest, which makes a run reconstructible from the manifest alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairing::PairMode;
use crate::synth::PrimitiveKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub refiner: RefinerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            refiner: RefinerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("d_rgb", m.d_rgb),
            ("d_depth", m.d_depth),
            ("d_fusion", m.d_fusion),
            ("rank_l", m.rank_l),
            ("d_out", m.d_out),
            ("group_size", m.group_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be >= 1")));
            }
        }
        if m.lambda < 0.0 {
            return Err(Error::config("model.lambda must be >= 0"));
        }
        if m.radii_frac[0] <= 0.0 || m.radii_frac[1] <= 0.0 {
            return Err(Error::config("model.radii_frac entries must be positive"));
        }
        if self.optimizer.step_size <= 0.0 {
            return Err(Error::config("optimizer.step_size must be positive"));
        }
        if self.train.batch_size == 0 || self.train.loss_points == 0 {
            return Err(Error::config("train.batch_size and train.loss_points must be >= 1"));
        }
        if self.dataset.objects.is_empty() {
            return Err(Error::config("dataset.objects must not be empty"));
        }
        if self.dataset.point_budget == 0 {
            return Err(Error::config("dataset.point_budget must be >= 1"));
        }
        if self.eval.metric_points == 0 {
            return Err(Error::config("eval.metric_points must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.dataset.occlusion.probability) {
            return Err(Error::config("dataset.occlusion.probability must be in [0,1]"));
        }
        self.dataset.camera.to_intrinsics()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectSpec {
    pub kind: PrimitiveKind,
    /// Characteristic size, meters.
    pub scale: f64,
    /// Surface points in the canonical model.
    pub density: usize,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        ObjectSpec {
            kind: PrimitiveKind::Box,
            scale: 0.1,
            density: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub objects: Vec<ObjectSpec>,
    pub train_count: usize,
    pub test_count: usize,
    /// Depth noise std, meters.
    pub noise_sigma: f64,
    pub occlusion: OcclusionConfig,
    /// Points kept per sample.
    pub point_budget: usize,
    pub min_visible: usize,
    pub camera: CameraConfig,
    pub pose: PoseRangeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            objects: vec![
                ObjectSpec {
                    kind: PrimitiveKind::Box,
                    ..ObjectSpec::default()
                },
                ObjectSpec {
                    kind: PrimitiveKind::Cylinder,
                    ..ObjectSpec::default()
                },
                ObjectSpec {
                    kind: PrimitiveKind::Blob,
                    ..ObjectSpec::default()
                },
            ],
            train_count: 2000,
            test_count: 200,
            noise_sigma: 0.002,
            occlusion: OcclusionConfig::default(),
            point_budget: 500,
            min_visible: 32,
            camera: CameraConfig::default(),
            pose: PoseRangeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    /// Fraction of samples rendered with an occluder patch.
    pub probability: f64,
    /// Occluder width as a fraction of the object's projected extent.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            probability: 0.3,
            min_fraction: 0.1,
            max_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            fx: 280.0,
            fy: 280.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
        }
    }
}

impl CameraConfig {
    pub fn to_intrinsics(&self) -> Result<crate::synth::CameraIntrinsics> {
        crate::synth::CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRangeConfig {
    /// Rotation angles are drawn uniformly in `[0, max]` about uniform axes.
    pub max_rotation_deg: f64,
    pub translation_center: [f64; 3],
    pub translation_extent: [f64; 3],
}

impl Default for PoseRangeConfig {
    fn default() -> Self {
        PoseRangeConfig {
            max_rotation_deg: 25.0,
            translation_center: [0.0, 0.0, 0.5],
            translation_extent: [0.05, 0.04, 0.05],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_rgb: usize,
    pub d_depth: usize,
    pub d_fusion: usize,
    /// Rank of the bilinear factorization.
    pub rank_l: usize,
    /// Pair-feature output dimension (kept equal to d_fusion by default).
    pub d_out: usize,
    pub pair_mode: PairMode,
    pub dcm_enabled: bool,
    /// Trade-off weight on the dense-correspondence loss.
    pub lambda: f64,
    /// Neighbors per grouping neighborhood.
    pub group_size: usize,
    /// Grouping radii as fractions of the object diameter, one per
    /// abstraction round.
    pub radii_frac: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale dimensions.
    pub fn toy() -> Self {
        ModelConfig {
            d_rgb: 32,
            d_depth: 32,
            d_fusion: 64,
            rank_l: 16,
            d_out: 64,
            pair_mode: PairMode::Lrbp,
            dcm_enabled: true,
            lambda: 1.0,
            group_size: 8,
            radii_frac: [0.1, 0.2],
        }
    }

    /// Full-width encoder channels (128-dimensional features throughout).
    pub fn full() -> Self {
        ModelConfig {
            d_rgb: 128,
            d_depth: 128,
            d_fusion: 128,
            rank_l: 32,
            d_out: 128,
            ..ModelConfig::toy()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Model points sampled for the pose loss each step.
    pub loss_points: usize,
    /// Optional global-norm gradient clip; escape hatch for instability.
    pub grad_clip: Option<f64>,
    /// Checkpoint/log flush cadence in steps (also logs the final step).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2500,
            batch_size: 8,
            loss_points: 64,
            grad_clip: None,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Model points sampled for the ADD/ADD-S metrics.
    pub metric_points: usize,
    /// Refinement iterations applied at evaluation time.
    pub refine_iterations: usize,
    /// Accuracy-threshold sweep upper bound, meters.
    pub auc_max_threshold: f64,
    /// Success threshold as a fraction of the object diameter.
    pub diameter_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric_points: 200,
            refine_iterations: 2,
            auc_max_threshold: 0.10,
            diameter_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub step_size: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            feat_dim: 64,
            hidden_dim: 128,
            steps: 800,
            batch_size: 8,
            step_size: 1e-4,
        }
    }
}
