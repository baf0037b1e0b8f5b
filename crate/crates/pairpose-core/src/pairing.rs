//! Pixel-pair generation, pair-feature encoding, and pose regression.
//!
//! Each of the P fused pixel features is paired with one feature drawn by a
//! seeded random permutation of the same set, giving P pairs. A pair is
//! encoded either by low-rank bilinear pooling `Pᵀ·relu((Uᵀa) ∘ (Vᵀb))`, by
//! element-wise sum, or by concatenation plus an affine projection. Max
//! pooling over the P pair features yields the global vector the pose head
//! regresses a quaternion and translation from.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, MlpSpec, ParamStore};
use crate::se3::{self, Quaternion, RigidTransform, MIN_QUAT_NORM};
use crate::seed;

/// How two pixel features combine into one pair feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PairMode {
    /// Element-wise sum; output keeps the fused dimension.
    Els,
    /// Concatenation followed by an affine projection.
    Con,
    /// Low-rank bilinear pooling.
    Lrbp,
}

impl PairMode {
    pub fn name(&self) -> &'static str {
        match self {
            PairMode::Els => "ELS",
            PairMode::Con => "CON",
            PairMode::Lrbp => "LRBP",
        }
    }
}

/// P ordered pairs `(i, partner[i])`; the first components enumerate every
/// pixel once, the partners are a permutation, so self-pairs can occur.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndexSet {
    partner: Vec<usize>,
}

impl PairIndexSet {
    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    pub fn partners(&self) -> &[usize] {
        &self.partner
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.partner.iter().copied().enumerate()
    }
}

/// Pairing phase: training resamples the permutation every forward pass,
/// evaluation derives it from the sample id so reruns are identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingPhase {
    Train { step: u64 },
    Eval,
}

/// Seed for one pairing draw.
pub fn pairing_seed(phase: PairingPhase, base_seed: u64, sample_index: u64) -> u64 {
    match phase {
        PairingPhase::Train { step } => seed::derive(
            base_seed,
            seed::stream::PAIRING,
            step.wrapping_mul(0x1_0000_0001) ^ sample_index,
        ),
        PairingPhase::Eval => seed::derive(base_seed, seed::stream::PAIRING, sample_index),
    }
}

/// Uniform random permutation pairing under `seed`.
pub fn generate_pairs(p: usize, pair_seed: u64) -> Result<PairIndexSet> {
    if p == 0 {
        return Err(Error::EmptyInput("generate_pairs"));
    }
    let mut partner: Vec<usize> = (0..p).collect();
    partner.shuffle(&mut seed::rng(pair_seed));
    Ok(PairIndexSet { partner })
}

/// Parameter shapes for one pair-encoding mode.
#[derive(Debug, Clone)]
pub struct PairEncoder {
    pub mode: PairMode,
    pub d_fusion: usize,
    pub rank: usize,
    pub d_out: usize,
}

impl PairEncoder {
    pub fn new(mode: PairMode, d_fusion: usize, rank: usize, d_out: usize) -> Self {
        PairEncoder {
            mode,
            d_fusion,
            rank,
            d_out,
        }
    }

    /// Dimension of one encoded pair feature.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            PairMode::Els => self.d_fusion,
            PairMode::Con | PairMode::Lrbp => self.d_out,
        }
    }

    /// Number of learnable parameters in the encoder itself.
    pub fn param_count(&self) -> usize {
        match self.mode {
            PairMode::Els => 0,
            PairMode::Con => 2 * self.d_fusion * self.d_out + self.d_out,
            PairMode::Lrbp => self.d_fusion * self.rank * 2 + self.rank * self.d_out,
        }
    }

    pub fn register_params(
        &self,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<()> {
        use rand::Rng;
        match self.mode {
            PairMode::Els => Ok(()),
            PairMode::Con => {
                let spec = MlpSpec::new("pair.con", vec![2 * self.d_fusion, self.d_out]);
                spec.register(store, rng)
            }
            PairMode::Lrbp => {
                let mut mat = |rows: usize, cols: usize| -> Vec<f64> {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    (0..rows * cols)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect()
                };
                store.add(
                    "pair.u",
                    vec![self.d_fusion, self.rank],
                    mat(self.d_fusion, self.rank),
                )?;
                store.add(
                    "pair.v",
                    vec![self.d_fusion, self.rank],
                    mat(self.d_fusion, self.rank),
                )?;
                store.add(
                    "pair.p",
                    vec![self.rank, self.d_out],
                    mat(self.rank, self.d_out),
                )?;
                Ok(())
            }
        }
    }

    /// Low-rank bilinear pooling of two feature vectors:
    /// `Pᵀ·relu((Uᵀa) ∘ (Vᵀb))`.
    pub fn lrbp(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        a: TensorId,
        b: TensorId,
    ) -> Result<TensorId> {
        let a2 = g.reshape(a, &[1, self.d_fusion])?;
        let b2 = g.reshape(b, &[1, self.d_fusion])?;
        let out = self.lrbp_rows(g, params, a2, b2)?;
        g.reshape(out, &[self.d_out])
    }

    fn lrbp_rows(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        a: TensorId,
        b: TensorId,
    ) -> Result<TensorId> {
        let ua = g.matmul(a, params.get("pair.u"))?;
        let vb = g.matmul(b, params.get("pair.v"))?;
        let had = g.hadamard(ua, vb)?;
        let act = g.relu(had);
        g.matmul(act, params.get("pair.p"))
    }

    /// Encodes every pair: row k combines feature rows `k` and
    /// `pairs.partner[k]` of `features` (`[P×d_fusion]`).
    pub fn encode_rows(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        features: TensorId,
        pairs: &PairIndexSet,
    ) -> Result<TensorId> {
        let p = g.shape(features)[0];
        if pairs.len() != p {
            return Err(Error::contract(format!(
                "pair set covers {} pixels, features have {p}",
                pairs.len()
            )));
        }
        let partners = g.gather_rows(features, pairs.partners())?;
        match self.mode {
            PairMode::Els => g.add(features, partners),
            PairMode::Con => {
                let both = g.concat_cols(features, partners)?;
                let spec = MlpSpec::new("pair.con", vec![2 * self.d_fusion, self.d_out]);
                spec.forward(g, params, both)
            }
            PairMode::Lrbp => self.lrbp_rows(g, params, features, partners),
        }
    }
}

/// Regressed pose: unit quaternion plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub q: Quaternion,
    pub t: [f64; 3],
}

impl PosePrediction {
    pub fn identity() -> Self {
        PosePrediction {
            q: Quaternion::IDENTITY,
            t: [0.0; 3],
        }
    }

    /// Normalizes the quaternion; errors below the degeneracy threshold.
    pub fn from_raw(q: Quaternion, t: [f64; 3]) -> Result<Self> {
        Ok(PosePrediction {
            q: q.normalized()?,
            t,
        })
    }

    /// Wraps an already-unit quaternion without renormalizing, preserving
    /// the exact values the pose head produced.
    pub fn new_unit(q: Quaternion, t: [f64; 3]) -> Self {
        debug_assert!((q.norm() - 1.0).abs() < 1e-6, "quaternion is not unit");
        PosePrediction { q, t }
    }

    /// Rotation matrix form. The stored quaternion is unit by construction,
    /// so the entries are computed directly; this keeps the value path
    /// bitwise-equal to the tracked path.
    pub fn to_transform(&self) -> RigidTransform {
        let e = se3::rot_entries_unit(&self.q);
        RigidTransform {
            rotation: [[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]],
            translation: self.t,
        }
    }
}

/// Graph handles produced by the pose head; the rotation and translation
/// nodes feed the pose loss.
pub struct PoseHeadOut {
    pub raw: TensorId,
    pub quat: TensorId,
    pub trans: TensorId,
    pub rot: TensorId,
    pub prediction: PosePrediction,
}

/// The pose regression head: max pooling over pair features, then an MLP to
/// 7 reals split into a normalized quaternion and a translation.
#[derive(Debug, Clone)]
pub struct PoseHead {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl PoseHead {
    pub fn new(d_in: usize) -> Self {
        PoseHead {
            prefix: "pose_head".into(),
            d_in,
            hidden: 2 * d_in,
        }
    }

    /// Head under a different parameter prefix (the refiner reuses this).
    pub fn with_prefix(prefix: impl Into<String>, d_in: usize, hidden: usize) -> Self {
        PoseHead {
            prefix: prefix.into(),
            d_in,
            hidden,
        }
    }

    fn spec(&self) -> MlpSpec {
        MlpSpec::new(self.prefix.clone(), vec![self.d_in, self.hidden, 7])
    }

    pub fn register_params(
        &self,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        initial_translation: [f64; 3],
    ) -> Result<()> {
        let bias = [
            1.0,
            0.0,
            0.0,
            0.0,
            initial_translation[0],
            initial_translation[1],
            initial_translation[2],
        ];
        self.spec().register_zero_final(store, rng, &bias)
    }

    /// Max-pools the `[P×d]` pair features and regresses a pose.
    pub fn regress_pose(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        pair_features: TensorId,
    ) -> Result<PoseHeadOut> {
        let pooled = g.max_pool_rows(pair_features)?;
        let raw = self.spec().forward(g, params, pooled)?;
        let q_raw = g.slice1d(raw, 0, 4)?;
        let trans = g.slice1d(raw, 4, 3)?;
        let sq = g.hadamard(q_raw, q_raw)?;
        let ss = g.sum(sq);
        let norm = g.sqrt(ss);
        let n = g.value(norm)[0];
        if n < MIN_QUAT_NORM {
            return Err(Error::DegenerateQuaternion {
                norm: n,
                min: MIN_QUAT_NORM,
            });
        }
        let quat = g.div_scalar(q_raw, norm)?;
        let rot = se3::quat_to_rotmat(g, quat)?;
        let qv = g.value(quat);
        let tv = g.value(trans);
        let prediction = PosePrediction::new_unit(
            Quaternion::new(qv[0], qv[1], qv[2], qv[3]),
            [tv[0], tv[1], tv[2]],
        );
        Ok(PoseHeadOut {
            raw,
            quat,
            trans,
            rot,
            prediction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_pairs_with_itself() {
        let pairs = generate_pairs(1, 42).unwrap();
        assert_eq!(pairs.partners(), &[0]);
    }

    #[test]
    fn pairing_is_deterministic_and_a_permutation() {
        let a = generate_pairs(64, 7).unwrap();
        let b = generate_pairs(64, 7).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.partners().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn first_components_enumerate_all_pixels() {
        let pairs = generate_pairs(17, 3).unwrap();
        let firsts: Vec<usize> = pairs.pairs().map(|(i, _)| i).collect();
        assert_eq!(firsts, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn train_seeds_differ_by_step_eval_seeds_do_not() {
        let t0 = pairing_seed(PairingPhase::Train { step: 0 }, 9, 4);
        let t1 = pairing_seed(PairingPhase::Train { step: 1 }, 9, 4);
        assert_ne!(t0, t1);
        let e0 = pairing_seed(PairingPhase::Eval, 9, 4);
        let e1 = pairing_seed(PairingPhase::Eval, 9, 4);
        assert_eq!(e0, e1);
    }

    fn identity_lrbp(d: usize) -> (PairEncoder, ParamStore) {
        let enc = PairEncoder::new(PairMode::Lrbp, d, d, d);
        let mut store = ParamStore::new();
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        store.add("pair.u", vec![d, d], eye.clone()).unwrap();
        store.add("pair.v", vec![d, d], eye.clone()).unwrap();
        store.add("pair.p", vec![d, d], eye).unwrap();
        (enc, store)
    }

    #[test]
    fn lrbp_identity_params_reduce_to_relu_hadamard() {
        let (enc, store) = identity_lrbp(2);
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let a = g.leaf(&[2], vec![1.0, -2.0], false).unwrap();
        let b = g.leaf(&[2], vec![3.0, 4.0], false).unwrap();
        let out = enc.lrbp(&mut g, &params, a, b).unwrap();
        assert_eq!(g.value(out), &[3.0, 0.0]);
    }

    #[test]
    fn lrbp_zero_input_annihilates() {
        let enc = PairEncoder::new(PairMode::Lrbp, 4, 2, 4);
        let mut store = ParamStore::new();
        enc.register_params(&mut store, &mut seed::rng(5)).unwrap();
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let a = g.leaf(&[4], vec![0.0; 4], false).unwrap();
        let b = g.leaf(&[4], vec![1.0, -1.0, 2.0, 0.5], false).unwrap();
        let out = enc.lrbp(&mut g, &params, a, b).unwrap();
        assert_eq!(g.value(out), &[0.0; 4]);
    }

    #[test]
    fn lrbp_parameter_count_beats_concat_projection() {
        // d_fusion=64, l=16: 3*64*16 = 3072 < 2*64*64 = 8192.
        let lrbp = PairEncoder::new(PairMode::Lrbp, 64, 16, 64);
        assert_eq!(lrbp.param_count(), 3 * 64 * 16);
        let con = PairEncoder::new(PairMode::Con, 64, 16, 64);
        assert!(con.param_count() >= 2 * 64 * 64);
        assert!(lrbp.param_count() < 2 * 64 * 64);
    }

    #[test]
    fn swapping_u_v_and_reversing_pairs_is_symmetric() {
        let d = 3;
        let enc = PairEncoder::new(PairMode::Lrbp, d, 2, d);
        let mut store = ParamStore::new();
        enc.register_params(&mut store, &mut seed::rng(8)).unwrap();
        let u = store.get("pair.u").unwrap().data.clone();
        let v = store.get("pair.v").unwrap().data.clone();
        let mut swapped = store.clone();
        swapped.get_mut("pair.u").unwrap().data = v;
        swapped.get_mut("pair.v").unwrap().data = u;

        let a_data = vec![0.3, -0.8, 1.2];
        let b_data = vec![-0.5, 0.9, 0.1];
        let run = |s: &ParamStore, first: &[f64], second: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let params = s.bind(&mut g, false);
            let a = g.leaf(&[3], first.to_vec(), false).unwrap();
            let b = g.leaf(&[3], second.to_vec(), false).unwrap();
            let out = enc.lrbp(&mut g, &params, a, b).unwrap();
            g.value(out).to_vec()
        };
        assert_eq!(run(&store, &a_data, &b_data), run(&swapped, &b_data, &a_data));
    }

    #[test]
    fn els_with_zero_partner_is_identity() {
        let enc = PairEncoder::new(PairMode::Els, 3, 1, 3);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let feats = g
            .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0], false)
            .unwrap();
        // Pair row 0 with the zero row and row 1 with itself.
        let pairs = PairIndexSet {
            partner: vec![1, 1],
        };
        let out = enc.encode_rows(&mut g, &params, feats, &pairs).unwrap();
        assert_eq!(&g.value(out)[0..3], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn con_identity_block_recovers_first_half() {
        let d = 2;
        let enc = PairEncoder::new(PairMode::Con, d, 1, d);
        let mut store = ParamStore::new();
        // Projection [I; 0] selects the first feature of each pair.
        store
            .add(
                "pair.con.0.w",
                vec![2 * d, d],
                vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap();
        store.add("pair.con.0.b", vec![d], vec![0.0; d]).unwrap();
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let feats = g
            .leaf(&[2, 2], vec![0.7, -0.3, 5.0, 2.0], false)
            .unwrap();
        let pairs = PairIndexSet {
            partner: vec![1, 0],
        };
        let out = enc.encode_rows(&mut g, &params, feats, &pairs).unwrap();
        assert_eq!(g.value(out), &[0.7, -0.3, 5.0, 2.0]);
    }

    #[test]
    fn zero_head_with_identity_bias_gives_identity_pose() {
        let head = PoseHead::new(4);
        let mut store = ParamStore::new();
        head.register_params(&mut store, &mut seed::rng(2), [0.0; 3])
            .unwrap();
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let feats = g
            .leaf(&[3, 4], (0..12).map(|i| i as f64 / 3.0).collect(), false)
            .unwrap();
        let out = head.regress_pose(&mut g, &params, feats).unwrap();
        assert_eq!(out.prediction.q, Quaternion::IDENTITY);
        assert_eq!(out.prediction.t, [0.0; 3]);
        let r = out.prediction.to_transform();
        assert_eq!(r.rotation, RigidTransform::identity().rotation);
    }

    #[test]
    fn duplicated_pair_rows_leave_prediction_unchanged() {
        let head = PoseHead::new(3);
        let mut store = ParamStore::new();
        head.register_params(&mut store, &mut seed::rng(6), [0.0, 0.0, 0.5])
            .unwrap();
        // Give the final layer nonzero weights so the prediction depends on
        // the pooled vector.
        {
            let w = store.get_mut("pose_head.1.w").unwrap();
            for (i, v) in w.data.iter_mut().enumerate() {
                *v = ((i % 5) as f64 - 2.0) * 0.05;
            }
        }
        let data = vec![0.1, -0.4, 0.9, 2.0, 0.3, -1.5];
        let predict = |rows: Vec<f64>, n: usize| {
            let mut g = Graph::new();
            let params = store.bind(&mut g, false);
            let feats = g.leaf(&[n, 3], rows, false).unwrap();
            let out = head.regress_pose(&mut g, &params, feats).unwrap();
            out.prediction
        };
        let once = predict(data.clone(), 2);
        let mut doubled = data.clone();
        doubled.extend_from_slice(&data);
        let twice = predict(doubled, 4);
        assert_eq!(once, twice);
    }

    #[test]
    fn degenerate_head_norm_is_an_error() {
        let head = PoseHead::new(2);
        let mut store = ParamStore::new();
        head.register_params(&mut store, &mut seed::rng(1), [0.0; 3])
            .unwrap();
        // Force the quaternion part of the bias to zero.
        store.get_mut("pose_head.1.b").unwrap().data = vec![0.0; 7];
        let mut g = Graph::new();
        let params = store.bind(&mut g, true);
        let feats = g.leaf(&[1, 2], vec![0.0, 0.0], false).unwrap();
        assert!(matches!(
            head.regress_pose(&mut g, &params, feats),
            Err(Error::DegenerateQuaternion { .. })
        ));
    }

    #[test]
    fn prediction_invariant_under_pair_row_permutation() {
        let head = PoseHead::new(3);
        let mut store = ParamStore::new();
        head.register_params(&mut store, &mut seed::rng(4), [0.0; 3])
            .unwrap();
        {
            let w = store.get_mut("pose_head.1.w").unwrap();
            for (i, v) in w.data.iter_mut().enumerate() {
                *v = ((i % 7) as f64 - 3.0) * 0.03;
            }
        }
        let rows = vec![0.5, -0.2, 0.8, 1.5, 0.0, -0.9, 0.2, 0.4, 0.6];
        let permuted = vec![0.2, 0.4, 0.6, 0.5, -0.2, 0.8, 1.5, 0.0, -0.9];
        let predict = |data: Vec<f64>| {
            let mut g = Graph::new();
            let params = store.bind(&mut g, false);
            let feats = g.leaf(&[3, 3], data, false).unwrap();
            head.regress_pose(&mut g, &params, feats).unwrap().prediction
        };
        assert_eq!(predict(rows), predict(permuted));
    }
}
