//! Analytic-vs-finite-difference gradient verification.
//!
//! Every differentiable operation is checked coordinate-by-coordinate
//! against central differences at randomly drawn inputs kept away from relu
//! and pooling kinks; the composed network is checked with directional
//! derivatives. A perturbation that flips any data-dependent branch (seen
//! through the graph's branch signature) would poison the difference
//! quotient, so such coordinates are skipped and counted.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TensorId};
use crate::config::{DatasetConfig, ExperimentConfig, ModelConfig};
use crate::error::Result;
use crate::model::PoseNet;
use crate::pairing::{generate_pairs, PairMode};
use crate::se3::sample_model_points;
use crate::seed;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1)`: relative for large values, absolute near
/// zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.coords_checked > 0
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} | max rel err {:.3e} (tol {:.0e}) over {} trials, {} coords ({} skipped at kinks)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.trials,
            self.coords_checked,
            self.coords_skipped,
        )
    }
}

/// One randomized check instance: an input vector and a builder that maps it
/// into a graph, returning the scalar loss and the leaves carrying `x`.
struct Trial {
    x: Vec<f64>,
    build: Box<dyn Fn(&mut Graph, &[f64]) -> Result<(TensorId, Vec<TensorId>)>>,
}

fn eval_loss(trial: &Trial, x: &[f64]) -> Result<(f64, u64)> {
    let mut g = Graph::inference();
    let (loss, _) = (trial.build)(&mut g, x)?;
    Ok((g.value(loss)[0], g.branch_signature()))
}

fn eval_grad(trial: &Trial) -> Result<(Vec<f64>, u64)> {
    let mut g = Graph::new();
    let (loss, leaves) = (trial.build)(&mut g, &trial.x)?;
    g.backward(loss)?;
    let mut grad = Vec::with_capacity(trial.x.len());
    for id in leaves {
        grad.extend_from_slice(g.grad(id).expect("leaf gradient populated"));
    }
    Ok((grad, g.branch_signature()))
}

fn check_op(
    name: &str,
    trials: usize,
    base_seed: u64,
    make_trial: impl Fn(&mut ChaCha8Rng) -> Trial,
) -> Result<CheckReport> {
    let mut report = CheckReport {
        name: name.to_string(),
        trials,
        coords_checked: 0,
        coords_skipped: 0,
        max_rel_err: 0.0,
        tolerance: TOLERANCE,
    };
    for t in 0..trials {
        let mut rng = seed::rng(seed::derive(base_seed, seed::stream::GRADCHECK, t as u64));
        let trial = make_trial(&mut rng);
        let (grad, base_sig) = eval_grad(&trial)?;
        assert_eq!(grad.len(), trial.x.len(), "{name}: gradient length mismatch");
        for i in 0..trial.x.len() {
            let mut xp = trial.x.clone();
            xp[i] += FD_STEP;
            let mut xm = trial.x.clone();
            xm[i] -= FD_STEP;
            let (fp, sig_p) = eval_loss(&trial, &xp)?;
            let (fm, sig_m) = eval_loss(&trial, &xm)?;
            if sig_p != base_sig || sig_m != base_sig {
                report.coords_skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let rel = relative_error(grad[i], fd);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values with magnitude in `[margin, 1 + margin]`, i.e. at least `margin`
/// away from the relu kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            sign * (margin + rng.random_range(0.0..1.0))
        })
        .collect()
}

/// Weighted sum of all elements with fixed nonzero weights; the standard
/// scalarization for Jacobian checks.
fn weighted_sum(g: &mut Graph, out: TensorId, weights: &[f64]) -> Result<TensorId> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, weights.to_vec())?;
    let prod = g.hadamard(out, w)?;
    Ok(g.sum(prod))
}

fn weights_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            sign * rng.random_range(0.5..1.5)
        })
        .collect()
}

/// Per-operation gradient suite: `trials` random inputs per op, every input
/// coordinate checked by central differences.
pub fn run_op_suite(trials: usize, base_seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    reports.push(check_op("matmul", trials, base_seed ^ 1, |rng| {
        let (m, k, n) = (3, 4, 2);
        let x = uniform(rng, m * k + k * n, -1.0, 1.0);
        let w = weights_for(rng, m * n);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[3, 4], x[..12].to_vec(), true)?;
                let b = g.leaf(&[4, 2], x[12..].to_vec(), true)?;
                let out = g.matmul(a, b)?;
                Ok((weighted_sum(g, out, &w)?, vec![a, b]))
            }),
        }
    })?);

    reports.push(check_op("hadamard", trials, base_seed ^ 2, |rng| {
        let x = uniform(rng, 12, -1.0, 1.0);
        let w = weights_for(rng, 6);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[2, 3], x[..6].to_vec(), true)?;
                let b = g.leaf(&[2, 3], x[6..].to_vec(), true)?;
                let out = g.hadamard(a, b)?;
                Ok((weighted_sum(g, out, &w)?, vec![a, b]))
            }),
        }
    })?);

    reports.push(check_op("add_sub_scale", trials, base_seed ^ 3, |rng| {
        let x = uniform(rng, 10, -1.0, 1.0);
        let w = weights_for(rng, 5);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[5], x[..5].to_vec(), true)?;
                let b = g.leaf(&[5], x[5..].to_vec(), true)?;
                let s = g.add(a, b)?;
                let d = g.sub(s, b)?;
                let sc = g.scale(d, -1.7);
                Ok((weighted_sum(g, sc, &w)?, vec![a, b]))
            }),
        }
    })?);

    reports.push(check_op("relu", trials, base_seed ^ 4, |rng| {
        // Inputs at least 1e-3 from the kink.
        let x = away_from_zero(rng, 8, 1e-3);
        let w = weights_for(rng, 8);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[8], x.to_vec(), true)?;
                let out = g.relu(a);
                Ok((weighted_sum(g, out, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("sqrt", trials, base_seed ^ 5, |rng| {
        let x = uniform(rng, 6, 0.1, 2.0);
        let w = weights_for(rng, 6);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[6], x.to_vec(), true)?;
                let out = g.sqrt(a);
                Ok((weighted_sum(g, out, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("mean_sum", trials, base_seed ^ 6, |rng| {
        let x = uniform(rng, 9, -1.0, 1.0);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[3, 3], x.to_vec(), true)?;
                let m = g.mean(a);
                let s = g.sum(a);
                let both = g.add(m, s)?;
                Ok((both, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("max_pool_rows", trials, base_seed ^ 7, |rng| {
        // Resample until every column's top-two margin clears the kink band.
        let x = loop {
            let c = uniform(rng, 5 * 3, -1.0, 1.0);
            if column_margins_ok(&c, 5, 3, 1e-3) {
                break c;
            }
        };
        let w = weights_for(rng, 3);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[5, 3], x.to_vec(), true)?;
                let out = g.max_pool_rows(a)?;
                Ok((weighted_sum(g, out, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("max_pool_segments", trials, base_seed ^ 8, |rng| {
        let x = loop {
            let c = uniform(rng, 6 * 2, -1.0, 1.0);
            if column_margins_ok(&c[..6], 3, 2, 1e-3) && column_margins_ok(&c[6..], 3, 2, 1e-3) {
                break c;
            }
        };
        let w = weights_for(rng, 4);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[6, 2], x.to_vec(), true)?;
                let out = g.max_pool_segments(a, &[0, 3, 6])?;
                Ok((weighted_sum(g, out, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("concat_slice_gather", trials, base_seed ^ 9, |rng| {
        let x = uniform(rng, 12, -1.0, 1.0);
        let w = weights_for(rng, 8);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[2, 3], x[..6].to_vec(), true)?;
                let b = g.leaf(&[2, 3], x[6..].to_vec(), true)?;
                let cat = g.concat_cols(a, b)?;
                let picked = g.gather_rows(cat, &[1, 0, 1, 1])?;
                let flat = g.reshape(picked, &[24])?;
                let sliced = g.slice1d(flat, 4, 8)?;
                Ok((weighted_sum(g, sliced, &w)?, vec![a, b]))
            }),
        }
    })?);

    reports.push(check_op("add_row_broadcast", trials, base_seed ^ 10, |rng| {
        let x = uniform(rng, 4 * 3 + 3, -1.0, 1.0);
        let w = weights_for(rng, 12);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[4, 3], x[..12].to_vec(), true)?;
                let v = g.leaf(&[3], x[12..].to_vec(), true)?;
                let out = g.add_row_broadcast(a, v)?;
                Ok((weighted_sum(g, out, &w)?, vec![a, v]))
            }),
        }
    })?);

    reports.push(check_op("div_scalar", trials, base_seed ^ 11, |rng| {
        let mut x = uniform(rng, 7, -1.0, 1.0);
        let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        x[6] = sign * rng.random_range(0.5..2.0);
        let w = weights_for(rng, 6);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[6], x[..6].to_vec(), true)?;
                let s = g.leaf(&[], vec![x[6]], true)?;
                let out = g.div_scalar(a, s)?;
                Ok((weighted_sum(g, out, &w)?, vec![a, s]))
            }),
        }
    })?);

    reports.push(check_op("row_norms", trials, base_seed ^ 12, |rng| {
        // Rows bounded away from the norm kink at zero.
        let x = away_from_zero(rng, 4 * 3, 0.2);
        let w = weights_for(rng, 4);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[4, 3], x.to_vec(), true)?;
                let out = g.row_norms(a)?;
                Ok((weighted_sum(g, out, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("transpose_reshape", trials, base_seed ^ 13, |rng| {
        let x = uniform(rng, 6, -1.0, 1.0);
        let w = weights_for(rng, 6);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[2, 3], x.to_vec(), true)?;
                let t = g.transpose(a)?;
                let r = g.reshape(t, &[6])?;
                Ok((weighted_sum(g, r, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("interp_rows", trials, base_seed ^ 14, |rng| {
        let x = uniform(rng, 3 * 2, -1.0, 1.0);
        let w = weights_for(rng, 4);
        let mix = vec![
            vec![(0usize, 0.6), (1usize, 0.4)],
            vec![(2usize, 1.0)],
        ];
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[3, 2], x.to_vec(), true)?;
                let out = g.interp_rows(a, &mix)?;
                Ok((weighted_sum(g, out, &w)?, vec![a]))
            }),
        }
    })?);

    reports.push(check_op("quat_to_rotmat", trials, base_seed ^ 15, |rng| {
        let x = away_from_zero(rng, 4, 0.2);
        let w = weights_for(rng, 9);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let q = g.leaf(&[4], x.to_vec(), true)?;
                // Normalize in-graph, as the pose head does.
                let sq = g.hadamard(q, q)?;
                let ss = g.sum(sq);
                let n = g.sqrt(ss);
                let qn = g.div_scalar(q, n)?;
                let r = crate::se3::quat_to_rotmat(g, qn)?;
                Ok((weighted_sum(g, r, &w)?, vec![q]))
            }),
        }
    })?);

    reports.push(check_op("lrbp_composition", trials, base_seed ^ 17, |rng| {
        // The bilinear pooling expression end to end:
        // Pᵀ·relu((Uᵀa) ∘ (Vᵀb)), differentiated in a, b, U, V, and P.
        let (d, l, d_out) = (4usize, 2usize, 3usize);
        let mut x = uniform(rng, 2 * d, -1.0, 1.0);
        x.extend(uniform(rng, 2 * d * l + l * d_out, -1.0, 1.0));
        let w = weights_for(rng, d_out);
        Trial {
            x,
            build: Box::new(move |g, x| {
                let a = g.leaf(&[1, d], x[0..d].to_vec(), true)?;
                let b = g.leaf(&[1, d], x[d..2 * d].to_vec(), true)?;
                let mut at = 2 * d;
                let u = g.leaf(&[d, l], x[at..at + d * l].to_vec(), true)?;
                at += d * l;
                let v = g.leaf(&[d, l], x[at..at + d * l].to_vec(), true)?;
                at += d * l;
                let p = g.leaf(&[l, d_out], x[at..at + l * d_out].to_vec(), true)?;
                let ua = g.matmul(a, u)?;
                let vb = g.matmul(b, v)?;
                let had = g.hadamard(ua, vb)?;
                let act = g.relu(had);
                let out = g.matmul(act, p)?;
                Ok((weighted_sum(g, out, &w)?, vec![a, b, u, v, p]))
            }),
        }
    })?);

    reports.push(check_op("mlp_forward", trials, base_seed ^ 16, |rng| {
        // Parameters and input both checked: layers [3 -> 4 -> 2].
        let sizes = [3usize, 4, 2];
        let n_params = 3 * 4 + 4 + 4 * 2 + 2;
        let mut x = uniform(rng, n_params, -1.0, 1.0);
        x.extend(uniform(rng, 2 * 3, -1.0, 1.0));
        let w = weights_for(rng, 2 * 2);
        let _ = sizes;
        Trial {
            x,
            build: Box::new(move |g, x| {
                let w0 = g.leaf(&[3, 4], x[0..12].to_vec(), true)?;
                let b0 = g.leaf(&[4], x[12..16].to_vec(), true)?;
                let w1 = g.leaf(&[4, 2], x[16..24].to_vec(), true)?;
                let b1 = g.leaf(&[2], x[24..26].to_vec(), true)?;
                let input = g.leaf(&[2, 3], x[26..32].to_vec(), true)?;
                let z0 = g.matmul(input, w0)?;
                let z0 = g.add_row_broadcast(z0, b0)?;
                let h = g.relu(z0);
                let z1 = g.matmul(h, w1)?;
                let out = g.add_row_broadcast(z1, b1)?;
                Ok((weighted_sum(g, out, &w)?, vec![w0, b0, w1, b1, input]))
            }),
        }
    })?);

    Ok(reports)
}

fn column_margins_ok(data: &[f64], rows: usize, cols: usize, margin: f64) -> bool {
    for j in 0..cols {
        let mut top = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for i in 0..rows {
            let v = data[i * cols + j];
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        if top - second < margin {
            return false;
        }
    }
    true
}

fn tiny_experiment(pair_mode: PairMode, dcm: bool) -> ExperimentConfig {
    ExperimentConfig {
        seed: 1234,
        dataset: DatasetConfig {
            train_count: 2,
            test_count: 1,
            point_budget: 14,
            min_visible: 8,
            noise_sigma: 0.001,
            ..DatasetConfig::default()
        },
        model: ModelConfig {
            d_rgb: 6,
            d_depth: 6,
            d_fusion: 12,
            rank_l: 4,
            d_out: 12,
            group_size: 4,
            pair_mode,
            dcm_enabled: dcm,
            ..ModelConfig::toy()
        },
        ..Default::default()
    }
}

/// Directional-derivative check of the composed network: encoder, pair
/// encoding, pose head, optional dense-correspondence head, joint loss.
/// Each trial draws a random direction over all parameters; directions that
/// cross a branch are redrawn.
pub fn run_network_check(
    name: &str,
    pair_mode: PairMode,
    dcm: bool,
    trials: usize,
    base_seed: u64,
) -> Result<CheckReport> {
    let cfg = tiny_experiment(pair_mode, dcm);
    let data = crate::synth::generate_dataset(&cfg.dataset, cfg.seed)?;
    let net = PoseNet::new(&cfg.model);
    let store = net.init_params(cfg.seed, cfg.dataset.pose.translation_center)?;

    let eval_with = |store: &crate::nn::ParamStore,
                     sample_idx: usize,
                     track: bool|
     -> Result<(f64, u64, Option<Vec<Vec<f64>>>)> {
        let sample = &data.train[sample_idx];
        let model = data
            .models
            .iter()
            .find(|m| m.id == sample.object_id)
            .expect("model exists");
        let mut g = if track { Graph::new() } else { Graph::inference() };
        let bound = store.bind(&mut g, track);
        let pairs = generate_pairs(sample.point_count(), 99)?;
        let fwd = net.forward(&mut g, &bound, sample, &data.intrinsics, model, &pairs)?;
        let pts = sample_model_points(model, 10, 77)?;
        let (loss, _) = net.training_loss(&mut g, &fwd, sample, model, &pts)?;
        let value = g.value(loss)[0];
        let sig = g.branch_signature();
        let grads = if track {
            g.backward(loss)?;
            Some(store.gradients(&g, &bound)?)
        } else {
            None
        };
        Ok((value, sig, grads))
    };

    let mut report = CheckReport {
        name: name.to_string(),
        trials,
        coords_checked: 0,
        coords_skipped: 0,
        max_rel_err: 0.0,
        tolerance: TOLERANCE,
    };
    for t in 0..trials {
        let sample_idx = t % data.train.len();
        let (_, base_sig, grads) = eval_with(&store, sample_idx, true)?;
        let grads = grads.expect("tracked run returns gradients");
        let mut rng = seed::rng(seed::derive(base_seed, seed::stream::GRADCHECK, 1000 + t as u64));
        let mut done = false;
        for _attempt in 0..20 {
            let direction: Vec<Vec<f64>> = store
                .entries()
                .iter()
                .map(|e| uniform(&mut rng, e.data.len(), -1.0, 1.0))
                .collect();
            let shifted = |scale: f64| -> crate::nn::ParamStore {
                let mut s = store.clone();
                for (entry, dir) in store.entries().iter().zip(&direction) {
                    let target = s.get_mut(&entry.name).expect("same entries");
                    for (v, d) in target.data.iter_mut().zip(dir) {
                        *v += scale * d;
                    }
                }
                s
            };
            let (fp, sig_p, _) = eval_with(&shifted(FD_STEP), sample_idx, false)?;
            let (fm, sig_m, _) = eval_with(&shifted(-FD_STEP), sample_idx, false)?;
            if sig_p != base_sig || sig_m != base_sig {
                report.coords_skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let analytic: f64 = grads
                .iter()
                .zip(&direction)
                .flat_map(|(g, d)| g.iter().zip(d))
                .map(|(g, d)| g * d)
                .sum();
            let rel = relative_error(analytic, fd);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.coords_checked += 1;
            done = true;
            break;
        }
        if !done {
            return Err(crate::error::Error::contract(format!(
                "{name}: could not find a branch-stable direction in 20 draws (trial {t})"
            )));
        }
    }
    Ok(report)
}

/// The full suite: every op plus the composed network in its main
/// configuration and the ablation variants.
pub fn run_full_suite(op_trials: usize, network_trials: usize, base_seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = run_op_suite(op_trials, base_seed)?;
    reports.push(run_network_check(
        "network_lrbp_dcm",
        PairMode::Lrbp,
        true,
        network_trials,
        base_seed ^ 0xAA,
    )?);
    reports.push(run_network_check(
        "network_lrbp_only",
        PairMode::Lrbp,
        false,
        network_trials / 4 + 1,
        base_seed ^ 0xBB,
    )?);
    reports.push(run_network_check(
        "network_els_dcm",
        PairMode::Els,
        true,
        network_trials / 4 + 1,
        base_seed ^ 0xCC,
    )?);
    reports.push(run_network_check(
        "network_con_dcm",
        PairMode::Con,
        true,
        network_trials / 4 + 1,
        base_seed ^ 0xDD,
    )?);
    Ok(reports)
}
