//! Deterministic training and evaluation orchestration.
//!
//! Training is single-threaded over steps; within a step, the per-sample
//! forward/backward passes of a mini-batch run in parallel and their
//! gradients are reduced in fixed slot order, so results are identical
//! across thread counts. Every random draw derives from the experiment seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::{ExperimentConfig, OptimizerConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalRecord, EvalSummary, SummaryOptions, SymmetryMap};
use crate::loss::LossReport;
use crate::model::PoseNet;
use crate::nn::ParamStore;
use crate::pairing::{generate_pairs, pairing_seed, PairMode, PairingPhase, PosePrediction};
use crate::refine::Refiner;
use crate::se3::{sample_model_points, RigidTransform};
use crate::seed;
use crate::synth::{CameraIntrinsics, GeneratedDataset, ObjectModel, SceneSample};

/// Parameters plus Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl TrainState {
    pub fn new(store: ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        TrainState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            store,
            step: 0,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }
}

/// One Adam update with bias correction. Aborts on non-finite gradients.
pub fn adam_step(state: &mut TrainState, grads: &[Vec<f64>], hp: &OptimizerConfig) -> Result<()> {
    if grads.len() != state.store.len() {
        return Err(Error::contract(format!(
            "adam_step: {} gradient tensors for {} parameters",
            grads.len(),
            state.store.len()
        )));
    }
    for (entry, g) in state.store.entries().iter().zip(grads) {
        if g.len() != entry.data.len() {
            return Err(Error::contract(format!(
                "adam_step: gradient for {:?} has {} values, parameter has {}",
                entry.name,
                g.len(),
                entry.data.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {:?}", entry.name),
                step: state.step,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    for i in 0..grads.len() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let name = state.store.entries()[i].name.clone();
        let data = &mut state.store.get_mut(&name).expect("entry exists").data;
        for j in 0..data.len() {
            let g = grads[i][j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            data[j] -= hp.step_size * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LogRow {
    pub step: u64,
    pub l_pr: f64,
    pub l_dcm: f64,
    pub l_joint: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

fn symmetry_map(models: &[ObjectModel]) -> SymmetryMap {
    models
        .iter()
        .map(|m| (m.id.clone(), m.symmetric))
        .collect()
}

fn model_index(models: &[ObjectModel]) -> HashMap<&str, usize> {
    models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id.as_str(), i))
        .collect()
}

/// Trains the network on the generated dataset. When `out_dir` is given,
/// writes `checkpoint.bin`, `train_log.csv`, and `manifest.json`.
pub fn train(
    cfg: &ExperimentConfig,
    data: &GeneratedDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = PoseNet::new(&cfg.model);
    let store = net.init_params(cfg.seed, cfg.dataset.pose.translation_center)?;
    let mut state = TrainState::new(store);
    let by_id = model_index(&data.models);
    let mut batch_rng = seed::rng(seed::derive(cfg.seed, seed::stream::BATCH, 0));
    let mut log = Vec::new();

    for step in 0..cfg.train.steps {
        let batch: Vec<usize> = (0..cfg.train.batch_size)
            .map(|_| batch_rng.random_range(0..data.train.len()))
            .collect();

        let results: Vec<Result<(Vec<Vec<f64>>, LossReport)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &sample_idx)| {
                let sample = &data.train[sample_idx];
                let model = &data.models[by_id[sample.object_id.as_str()]];
                let mut g = Graph::new();
                let bound = state.store.bind(&mut g, true);
                let pair_seed =
                    pairing_seed(PairingPhase::Train { step }, cfg.seed, sample_idx as u64);
                let pairs = generate_pairs(sample.point_count(), pair_seed)?;
                let fwd = net.forward(&mut g, &bound, sample, &data.intrinsics, model, &pairs)?;
                let pts_seed = seed::derive(
                    cfg.seed,
                    seed::stream::LOSS_POINTS,
                    step * cfg.train.batch_size as u64 + slot as u64,
                );
                let pts = sample_model_points(model, cfg.train.loss_points, pts_seed)?;
                let (loss_node, report) = net.training_loss(&mut g, &fwd, sample, model, &pts)?;
                if !report.l_joint.is_finite() {
                    return Err(Error::NonFinite {
                        context: "training loss".into(),
                        step,
                    });
                }
                g.backward(loss_node)?;
                let grads = state.store.gradients(&g, &bound)?;
                Ok((grads, report))
            })
            .collect();

        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut sum = LossReport {
            l_pr: 0.0,
            l_dcm: 0.0,
            l_joint: 0.0,
            lambda: cfg.model.lambda,
        };
        for r in results {
            let (g, report) = r?;
            sum.l_pr += report.l_pr;
            sum.l_dcm += report.l_dcm;
            sum.l_joint += report.l_joint;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("batch is nonempty");
        let scale = 1.0 / cfg.train.batch_size as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        if let Some(clip) = cfg.train.grad_clip {
            let norm: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        adam_step(&mut state, &grads, &cfg.optimizer)?;

        let b = cfg.train.batch_size as f64;
        if step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps {
            log.push(LogRow {
                step,
                l_pr: sum.l_pr / b,
                l_dcm: sum.l_dcm / b,
                l_joint: sum.l_joint / b,
            });
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint::write_checkpoint(&state.store, &dir.join("checkpoint.bin"))?;
        write_log_csv(&log, &dir.join("train_log.csv"))?;
        write_manifest(cfg, data, "train", dir)?;
    }
    Ok(TrainOutcome { state, log })
}

pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut text = String::from("step,l_pr,l_dcm,l_joint\n");
    for row in log {
        writeln!(text, "{},{},{},{}", row.step, row.l_pr, row.l_dcm, row.l_joint)
            .expect("writing to a string");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// FNV-1a over the serialized samples; proves two runs saw identical data.
pub fn dataset_hash(samples: &[SceneSample], intrinsics: &CameraIntrinsics) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for v in [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy] {
        eat(&v.to_le_bytes());
    }
    for s in samples {
        eat(s.object_id.as_bytes());
        for v in s.gt_pose.rotation_flat() {
            eat(&v.to_le_bytes());
        }
        for row in &s.observed_cloud {
            for v in row {
                eat(&v.to_le_bytes());
            }
        }
        eat(&s.invisible_pct.to_le_bytes());
    }
    format!("{h:016x}")
}

fn write_manifest(
    cfg: &ExperimentConfig,
    data: &GeneratedDataset,
    command: &str,
    dir: &Path,
) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg,
        "train_dataset_hash": dataset_hash(&data.train, &data.intrinsics),
        "test_dataset_hash": dataset_hash(&data.test, &data.intrinsics),
        "train_samples": data.train.len(),
        "test_samples": data.test.len(),
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Evaluates an arbitrary predictor over the samples, producing one record
/// per sample. Used directly by tests with oracle predictors.
pub fn evaluate_records<F>(
    samples: &[SceneSample],
    models: &[ObjectModel],
    metric_points: usize,
    metric_seed: u64,
    predictor: F,
) -> Result<Vec<EvalRecord>>
where
    F: Fn(usize, &SceneSample, &ObjectModel) -> Result<RigidTransform> + Sync,
{
    let by_id = model_index(models);
    // Metric points are fixed per object so every sample of an object is
    // scored on the same point set.
    let metric_pts: Vec<Vec<crate::se3::Point3>> = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            sample_model_points(
                m,
                metric_points,
                seed::derive(metric_seed, seed::stream::MODEL_POINTS, i as u64),
            )
        })
        .collect::<Result<_>>()?;
    samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let mi = by_id[sample.object_id.as_str()];
            let model = &models[mi];
            let pred = predictor(idx, sample, model)?;
            let add = eval::add_metric(&pred, &sample.gt_pose, &metric_pts[mi]);
            let adds = eval::adds_metric(&pred, &sample.gt_pose, &metric_pts[mi]);
            EvalRecord::new(
                sample.object_id.clone(),
                add,
                adds,
                sample.invisible_pct,
                model.diameter,
            )
        })
        .collect()
}

/// Network evaluation: predicts every sample (with `refine_iterations`
/// refinement steps when the checkpoint carries refiner parameters) and
/// summarizes.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ExperimentConfig,
    samples: &[SceneSample],
    models: &[ObjectModel],
    intrinsics: &CameraIntrinsics,
    refine_iterations: usize,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let net = PoseNet::new(&cfg.model);
    let refiner = Refiner::new(cfg.refiner.feat_dim, cfg.refiner.hidden_dim);
    let has_refiner = store.get("refiner.enc.0.w").is_some();
    if refine_iterations > 0 && !has_refiner {
        return Err(Error::Checkpoint(
            "checkpoint has no refiner parameters; run refiner training first".into(),
        ));
    }
    let records = evaluate_records(
        samples,
        models,
        cfg.eval.metric_points,
        cfg.seed,
        |idx, sample, model| {
            let pair_seed = pairing_seed(PairingPhase::Eval, cfg.seed, idx as u64);
            let mut pose: PosePrediction =
                net.predict(store, sample, intrinsics, model, pair_seed)?;
            if refine_iterations > 0 {
                pose = refiner.iterative_refine(
                    store,
                    &sample.observed_cloud,
                    &pose,
                    refine_iterations,
                )?;
            }
            Ok(pose.to_transform())
        },
    )?;
    let options = SummaryOptions {
        auc_max_threshold: cfg.eval.auc_max_threshold,
        diameter_fraction: cfg.eval.diameter_fraction,
        ..SummaryOptions::default()
    };
    let summary = eval::summarize(&records, &symmetry_map(models), &options)?;
    Ok((records, summary))
}

/// Trains the residual refiner against the frozen main network's
/// predictions. Returns the refiner-only parameter store; merge it into the
/// main checkpoint for evaluation.
pub fn train_refiner(
    cfg: &ExperimentConfig,
    main_store: &ParamStore,
    data: &GeneratedDataset,
) -> Result<ParamStore> {
    let net = PoseNet::new(&cfg.model);
    let refiner = Refiner::new(cfg.refiner.feat_dim, cfg.refiner.hidden_dim);
    let mut store = ParamStore::new();
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::stream::PARAM_INIT, 1));
    refiner.register_params(&mut store, &mut rng)?;
    let by_id = model_index(&data.models);

    // The main network is frozen; its per-sample predictions are fixed by
    // the eval pairing seed, so compute them once.
    let initial: Vec<PosePrediction> = data
        .train
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let model = &data.models[by_id[sample.object_id.as_str()]];
            let pair_seed = pairing_seed(PairingPhase::Eval, cfg.seed, idx as u64);
            net.predict(main_store, sample, &data.intrinsics, model, pair_seed)
        })
        .collect::<Result<_>>()?;

    let mut state = TrainState::new(store);
    let hp = OptimizerConfig {
        step_size: cfg.refiner.step_size,
        ..cfg.optimizer
    };
    let mut batch_rng = seed::rng(seed::derive(cfg.seed, seed::stream::BATCH, 1));
    for step in 0..cfg.refiner.steps {
        let batch: Vec<usize> = (0..cfg.refiner.batch_size)
            .map(|_| batch_rng.random_range(0..data.train.len()))
            .collect();
        let results: Vec<Result<Vec<Vec<f64>>>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &sample_idx)| {
                let sample = &data.train[sample_idx];
                let model = &data.models[by_id[sample.object_id.as_str()]];
                let mut g = Graph::new();
                let bound = state.store.bind(&mut g, true);
                let step_out = refiner.refine_step_graph(
                    &mut g,
                    &bound,
                    &sample.observed_cloud,
                    &initial[sample_idx],
                )?;
                let pts_seed = seed::derive(
                    cfg.seed,
                    seed::stream::LOSS_POINTS,
                    0x8000_0000_0000_0000 | (step * cfg.refiner.batch_size as u64 + slot as u64),
                );
                let pts = sample_model_points(model, cfg.train.loss_points, pts_seed)?;
                let l = crate::loss::pose_loss(
                    &mut g,
                    step_out.rot,
                    step_out.trans,
                    &sample.gt_pose,
                    &pts,
                    model.symmetric,
                )?;
                if !g.value(l)[0].is_finite() {
                    return Err(Error::NonFinite {
                        context: "refiner loss".into(),
                        step,
                    });
                }
                g.backward(l)?;
                state.store.gradients(&g, &bound)
            })
            .collect();
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let g = r?;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("batch is nonempty");
        let scale = 1.0 / cfg.refiner.batch_size as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        adam_step(&mut state, &grads, &hp)?;
    }
    Ok(state.store)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub pair_mode: &'static str,
    pub dcm: bool,
    pub seed: u64,
    pub mean_add_s_m: f64,
    pub accuracy_pct: f64,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows for one seed, in grid order.
    pub fn rows_for_seed(&self, seed: u64) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.seed == seed).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "pair_mode  dcm    seed  mean_add_s_m  accuracy_pct  dataset_hash\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<9}  {:<5}  {:<4}  {:<12.6}  {:<12.2}  {}",
                r.pair_mode, r.dcm, r.seed, r.mean_add_s_m, r.accuracy_pct, r.dataset_hash
            )
            .expect("writing to a string");
        }
        out
    }
}

/// Trains and evaluates the {ELS, CON, LRBP} × {±DCM} grid for each seed.
/// Cells within one seed share the generated dataset.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(6 * seeds.len());
    for &s in seeds {
        let mut data_cfg = base.clone();
        data_cfg.seed = s;
        let data = crate::synth::generate_dataset(&data_cfg.dataset, s)?;
        let hash = dataset_hash(&data.train, &data.intrinsics);
        for mode in [PairMode::Els, PairMode::Con, PairMode::Lrbp] {
            for dcm in [false, true] {
                let mut cfg = base.clone();
                cfg.seed = s;
                cfg.model.pair_mode = mode;
                cfg.model.dcm_enabled = dcm;
                let outcome = train(&cfg, &data, None)?;
                let (_, summary) = evaluate(
                    &outcome.state.store,
                    &cfg,
                    &data.test,
                    &data.models,
                    &data.intrinsics,
                    0,
                )?;
                rows.push(AblationRow {
                    pair_mode: mode.name(),
                    dcm,
                    seed: s,
                    mean_add_s_m: summary.overall_mean_add_s_m,
                    accuracy_pct: summary.overall_accuracy_pct,
                    dataset_hash: hash.clone(),
                });
            }
        }
    }
    Ok(AblationTable { rows })
}
