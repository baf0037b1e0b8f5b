//! Evaluation protocol: ADD and ADD-S distances, accuracy-threshold curves
//! with exact area-under-curve, diameter-fraction accuracy, and
//! occlusion-binned analysis, plus CSV/JSON result emission.
//!
//! ADD matches model points index to index; ADD-S matches each
//! ground-truth-transformed point to its closest prediction-transformed
//! point. Reported "ADD(S)" mixes the two by the object's symmetry flag.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{Point3, RigidTransform};

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub object_id: String,
    /// Matched-point mean distance, meters.
    pub add: f64,
    /// Closest-point mean distance, meters.
    pub adds: f64,
    pub invisible_pct: f64,
    pub diameter: f64,
}

impl EvalRecord {
    pub fn new(
        object_id: impl Into<String>,
        add: f64,
        adds: f64,
        invisible_pct: f64,
        diameter: f64,
    ) -> Result<Self> {
        if add < 0.0 || adds < 0.0 {
            return Err(Error::contract("distances must be non-negative"));
        }
        if adds > add + 1e-12 {
            return Err(Error::contract(format!(
                "closest-point distance {adds} exceeds matched distance {add}"
            )));
        }
        Ok(EvalRecord {
            object_id: object_id.into(),
            add,
            adds,
            invisible_pct,
            diameter,
        })
    }
}

/// Mean distance between model points under the ground-truth and predicted
/// poses, matched by index. Shares its arithmetic order with the training
/// loss, so values agree bitwise on shared inputs.
pub fn add_metric(pred: &RigidTransform, gt: &RigidTransform, model_points: &[Point3]) -> f64 {
    let mut total = 0.0;
    for &x in model_points {
        let a = gt.transform_point(x);
        let b = pred.transform_point(x);
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        total += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    total / model_points.len() as f64
}

/// Mean distance from each ground-truth-transformed point to its closest
/// prediction-transformed point (ties to the lowest index).
pub fn adds_metric(pred: &RigidTransform, gt: &RigidTransform, model_points: &[Point3]) -> f64 {
    let gt_pts = gt.transform_points(model_points);
    let pred_pts = pred.transform_points(model_points);
    let mut total = 0.0;
    for a in &gt_pts {
        let mut best = f64::INFINITY;
        let mut best_k = 0usize;
        for (k, b) in pred_pts.iter().enumerate() {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            let dz = a[2] - b[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < best {
                best = d2;
                best_k = k;
            }
        }
        let b = pred_pts[best_k];
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        total += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    total / model_points.len() as f64
}

/// Exact area under the accuracy-threshold curve for thresholds in
/// `[0, max_threshold]`, normalized to `[0,1]`. A prediction counts as
/// correct when its error is strictly below the threshold; errors beyond
/// the sweep contribute nothing.
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("auc"));
    }
    if max_threshold <= 0.0 {
        return Err(Error::contract("auc: max_threshold must be positive"));
    }
    let n = errors.len() as f64;
    let total: f64 = errors
        .iter()
        .map(|&e| (max_threshold - e).max(0.0))
        .sum();
    Ok(total / (n * max_threshold))
}

/// Percentage of records whose error is strictly below
/// `fraction × diameter`. An error exactly at the threshold is a failure.
pub fn accuracy_at_diameter_fraction(
    errors: &[f64],
    diameters: &[f64],
    fraction: f64,
) -> Result<f64> {
    if errors.len() != diameters.len() {
        return Err(Error::contract(format!(
            "accuracy_at_diameter_fraction: {} errors vs {} diameters",
            errors.len(),
            diameters.len()
        )));
    }
    if fraction <= 0.0 {
        return Err(Error::contract("fraction must be positive"));
    }
    if errors.is_empty() {
        return Err(Error::EmptyInput("accuracy_at_diameter_fraction"));
    }
    let hits = errors
        .iter()
        .zip(diameters)
        .filter(|(e, d)| **e < fraction * **d)
        .count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Map from object id to its symmetry flag; selects ADD vs ADD-S per record.
pub type SymmetryMap = HashMap<String, bool>;

/// The ADD(S) convention: closest-point distance for symmetric objects,
/// matched distance otherwise.
pub fn mixed_error(record: &EvalRecord, symmetry: &SymmetryMap) -> Result<f64> {
    match symmetry.get(&record.object_id) {
        Some(true) => Ok(record.adds),
        Some(false) => Ok(record.add),
        None => Err(Error::contract(format!(
            "unknown object id {:?} in evaluation records",
            record.object_id
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Accuracy at the diameter-fraction threshold; absent for empty bins.
    pub accuracy_pct: Option<f64>,
}

/// Groups records by invisible fraction into half-open bins
/// `[edges[i], edges[i+1])` (the last bin also includes its upper edge) and
/// reports per-bin diameter-fraction accuracy of the ADD(S) error.
pub fn occlusion_binned_eval(
    records: &[EvalRecord],
    bin_edges: &[f64],
    symmetry: &SymmetryMap,
    diameter_fraction: f64,
) -> Result<Vec<OcclusionBin>> {
    if bin_edges.len() < 2 {
        return Err(Error::contract("need at least two bin edges"));
    }
    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("bin edges must be strictly increasing"));
    }
    let bins = bin_edges.len() - 1;
    let mut grouped: Vec<Vec<&EvalRecord>> = vec![Vec::new(); bins];
    for r in records {
        let v = r.invisible_pct;
        let slot = if v >= bin_edges[bins - 1] && v <= bin_edges[bins] {
            bins - 1
        } else {
            match bin_edges.windows(2).position(|w| v >= w[0] && v < w[1]) {
                Some(i) => i,
                None => {
                    return Err(Error::contract(format!(
                        "invisible fraction {v} outside bin range [{}, {}]",
                        bin_edges[0],
                        bin_edges[bins]
                    )))
                }
            }
        };
        grouped[slot].push(r);
    }
    let mut out = Vec::with_capacity(bins);
    for (i, members) in grouped.iter().enumerate() {
        let accuracy_pct = if members.is_empty() {
            None
        } else {
            let errors: Vec<f64> = members
                .iter()
                .map(|r| mixed_error(r, symmetry))
                .collect::<Result<_>>()?;
            let diameters: Vec<f64> = members.iter().map(|r| r.diameter).collect();
            Some(accuracy_at_diameter_fraction(
                &errors,
                &diameters,
                diameter_fraction,
            )?)
        };
        out.push(OcclusionBin {
            lo: bin_edges[i],
            hi: bin_edges[i + 1],
            count: members.len(),
            accuracy_pct,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryOptions {
    pub auc_max_threshold: f64,
    pub diameter_fraction: f64,
    pub occlusion_bin_edges: Vec<f64>,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions {
            auc_max_threshold: 0.10,
            diameter_fraction: 0.10,
            occlusion_bin_edges: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub count: usize,
    pub symmetric: bool,
    /// AUC of the closest-point error.
    pub adds_auc: f64,
    /// AUC of the symmetry-mixed error.
    pub add_s_auc: f64,
    pub mean_add_m: f64,
    pub mean_adds_m: f64,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold_m: f64,
    pub accuracy_pct: f64,
}

/// Aggregate evaluation results; serialized as the summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub record_count: usize,
    pub overall_adds_auc: f64,
    pub overall_add_s_auc: f64,
    pub overall_mean_add_s_m: f64,
    pub overall_accuracy_pct: f64,
    pub per_object: BTreeMap<String, ObjectSummary>,
    pub occlusion: Vec<OcclusionBin>,
    /// Accuracy of the ADD(S) error sampled at 1 mm threshold steps.
    pub curve: Vec<CurvePoint>,
    pub options: SummaryOptions,
}

impl EvalSummary {
    fn empty(options: SummaryOptions) -> Self {
        EvalSummary {
            record_count: 0,
            overall_adds_auc: 0.0,
            overall_add_s_auc: 0.0,
            overall_mean_add_s_m: 0.0,
            overall_accuracy_pct: 0.0,
            per_object: BTreeMap::new(),
            occlusion: Vec::new(),
            curve: Vec::new(),
            options,
        }
    }
}

/// Builds the full summary: pooled and per-object AUCs, diameter-fraction
/// accuracy, occlusion table, and the 1 mm-step accuracy curve.
pub fn summarize(
    records: &[EvalRecord],
    symmetry: &SymmetryMap,
    options: &SummaryOptions,
) -> Result<EvalSummary> {
    if records.is_empty() {
        return Ok(EvalSummary::empty(options.clone()));
    }
    let mixed: Vec<f64> = records
        .iter()
        .map(|r| mixed_error(r, symmetry))
        .collect::<Result<_>>()?;
    let adds_all: Vec<f64> = records.iter().map(|r| r.adds).collect();
    let diameters: Vec<f64> = records.iter().map(|r| r.diameter).collect();

    let mut per_object = BTreeMap::new();
    let mut by_object: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_object.entry(&r.object_id).or_default().push(i);
    }
    for (id, idx) in by_object {
        let adds: Vec<f64> = idx.iter().map(|&i| records[i].adds).collect();
        let add: Vec<f64> = idx.iter().map(|&i| records[i].add).collect();
        let mix: Vec<f64> = idx.iter().map(|&i| mixed[i]).collect();
        let dia: Vec<f64> = idx.iter().map(|&i| records[i].diameter).collect();
        per_object.insert(
            id.to_string(),
            ObjectSummary {
                count: idx.len(),
                symmetric: *symmetry
                    .get(id)
                    .ok_or_else(|| Error::contract(format!("unknown object id {id:?}")))?,
                adds_auc: auc(&adds, options.auc_max_threshold)?,
                add_s_auc: auc(&mix, options.auc_max_threshold)?,
                mean_add_m: add.iter().sum::<f64>() / add.len() as f64,
                mean_adds_m: adds.iter().sum::<f64>() / adds.len() as f64,
                accuracy_pct: accuracy_at_diameter_fraction(
                    &mix,
                    &dia,
                    options.diameter_fraction,
                )?,
            },
        );
    }

    let steps = (options.auc_max_threshold * 1000.0).round() as usize;
    let curve = (0..=steps)
        .map(|k| {
            let tau = k as f64 / 1000.0;
            let hits = mixed.iter().filter(|&&e| e < tau).count();
            CurvePoint {
                threshold_m: tau,
                accuracy_pct: 100.0 * hits as f64 / mixed.len() as f64,
            }
        })
        .collect();

    Ok(EvalSummary {
        record_count: records.len(),
        overall_adds_auc: auc(&adds_all, options.auc_max_threshold)?,
        overall_add_s_auc: auc(&mixed, options.auc_max_threshold)?,
        overall_mean_add_s_m: mixed.iter().sum::<f64>() / mixed.len() as f64,
        overall_accuracy_pct: accuracy_at_diameter_fraction(
            &mixed,
            &diameters,
            options.diameter_fraction,
        )?,
        per_object,
        occlusion: occlusion_binned_eval(
            records,
            &options.occlusion_bin_edges,
            symmetry,
            options.diameter_fraction,
        )?,
        curve,
        options: options.clone(),
    })
}

const CSV_HEADER: &str = "object_id,add_m,adds_m,invisible_pct,diameter_m";

/// Writes one CSV row per record. Float formatting is shortest-round-trip,
/// so reading the file back reproduces identical values.
pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(64 * (records.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in records {
        writeln!(
            text,
            "{},{},{},{},{}",
            r.object_id, r.add, r.adds, r.invisible_pct, r.diameter
        )
        .expect("writing to a string");
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::MalformedFile {
                offset: 0,
                reason: format!("bad CSV header {other:?}"),
            })
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedFile {
                offset: (lineno + 2) as u64,
                reason: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedFile {
                offset: (lineno + 2) as u64,
                reason: format!("bad number {s:?}"),
            })
        };
        records.push(EvalRecord::new(
            fields[0],
            num(fields[1])?,
            num(fields[2])?,
            num(fields[3])?,
            num(fields[4])?,
        )?);
    }
    Ok(records)
}

/// Writes `records.csv` and `summary.json` under `dir`.
pub fn emit_results(records: &[EvalRecord], summary: &EvalSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records_csv(records, &dir.join("records.csv"))?;
    let json = serde_json::to_string_pretty(summary)?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}
