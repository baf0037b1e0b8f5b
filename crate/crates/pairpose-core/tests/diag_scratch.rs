//! Scratch diagnostic (not part of the suite): error decomposition.
#![allow(dead_code)]

use pairpose_core::checkpoint::read_checkpoint;
use pairpose_core::config::ExperimentConfig;
use pairpose_core::model::PoseNet;
use pairpose_core::pairing::{pairing_seed, PairingPhase};
use pairpose_core::synth::generate_dataset;

#[test]
#[ignore]
fn decompose_errors() {
    let cfg_text = std::fs::read_to_string("/tmp/run/expC.json").unwrap();
    let cfg = ExperimentConfig::from_json(&cfg_text).unwrap();
    let store = read_checkpoint(std::path::Path::new("/tmp/run/expC/checkpoint.bin")).unwrap();
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let net = PoseNet::new(&cfg.model);

    let mut per_object: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> =
        Default::default();
    for (idx, sample) in data.test.iter().enumerate() {
        let model = data
            .models
            .iter()
            .find(|m| m.id == sample.object_id)
            .unwrap();
        let pair_seed = pairing_seed(PairingPhase::Eval, cfg.seed, idx as u64);
        let pred = net
            .predict(&store, sample, &data.intrinsics, model, pair_seed)
            .unwrap();
        let t_err: f64 = (0..3)
            .map(|i| (pred.t[i] - sample.gt_pose.translation[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        // Rotation geodesic angle between prediction and gt.
        let rp = pred.to_transform().rotation;
        let rg = sample.gt_pose.rotation;
        let mut trace = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                trace += rp[j][i] * rg[j][i];
            }
        }
        let angle = (((trace - 1.0) / 2.0).clamp(-1.0, 1.0)).acos();
        let e = per_object.entry(sample.object_id.clone()).or_default();
        e.0.push(t_err);
        e.1.push(angle.to_degrees());
        e.2 += 1;
    }
    for (id, (t, a, n)) in per_object {
        let mt = t.iter().sum::<f64>() / n as f64;
        let ma = a.iter().sum::<f64>() / n as f64;
        let mut ts = t.clone();
        ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut asrt = a.clone();
        asrt.sort_by(|x, y| x.partial_cmp(y).unwrap());
        println!(
            "{id}: n={n} mean|dt|={:.4} m (p90 {:.4}), mean angle={:.2} deg (p90 {:.2})",
            mt,
            ts[(n * 9) / 10],
            ma,
            asrt[(n * 9) / 10]
        );
    }
}
