//! Dataset generation and file round-tripping.
//!
//! File layout (all integers and reals little-endian):
//!
//! ```text
//! magic        8 bytes  b"PPDSET01"
//! intrinsics   fx fy cx cy as f64, width height as u32
//! sample_count u64
//! per sample:
//!   body_len u64, then the body:
//!     id_len u32 | object id UTF-8
//!     rotation 9 × f64 (row-major) | translation 3 × f64
//!     invisible_pct f64
//!     point_count u64
//!     observed_cloud 3P × f64 | pixel_colors 3P × f64 | pixel_coords 2P × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::se3::{Quaternion, RigidTransform};
use crate::seed;

use super::{
    make_primitive_model, render_scene, CameraIntrinsics, ObjectModel, Occluder, RenderParams,
    SceneSample,
};

const MAGIC: &[u8; 8] = b"PPDSET01";

pub fn write_dataset(
    samples: &[SceneSample],
    intrinsics: &CameraIntrinsics,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(intrinsics.width as u32).to_le_bytes())?;
    w.write_all(&(intrinsics.height as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        let body = encode_sample(s);
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
    }
    w.flush()?;
    Ok(())
}

fn encode_sample(s: &SceneSample) -> Vec<u8> {
    let p = s.point_count();
    let mut out = Vec::with_capacity(4 + s.object_id.len() + 8 * (13 + 8 * p));
    out.extend_from_slice(&(s.object_id.len() as u32).to_le_bytes());
    out.extend_from_slice(s.object_id.as_bytes());
    for v in s.gt_pose.rotation_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.gt_pose.translation {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.invisible_pct.to_le_bytes());
    out.extend_from_slice(&(p as u64).to_le_bytes());
    for row in &s.observed_cloud {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for row in &s.pixel_colors {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for row in &s.pixel_coords {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedFile {
                offset: self.base + self.pos as u64,
                reason: format!("need {n} more bytes, sample body ends early"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_rows<const N: usize>(&mut self, count: usize) -> Result<Vec<[f64; N]>> {
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = [0.0; N];
            for v in &mut row {
                *v = self.f64()?;
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SceneSample>, CameraIntrinsics)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 8 + 4 * 8 + 8 + 8];
    let mut read_so_far = 0usize;
    while read_so_far < header.len() {
        match r.read(&mut header[read_so_far..])? {
            0 => {
                return Err(Error::MalformedFile {
                    offset: read_so_far as u64,
                    reason: "file ends inside the header".into(),
                })
            }
            n => read_so_far += n,
        }
    }
    if &header[..8] != MAGIC {
        return Err(Error::MalformedFile {
            offset: 0,
            reason: format!("bad magic, expected {MAGIC:?}"),
        });
    }
    let f = |i: usize| f64::from_le_bytes(header[8 + 8 * i..16 + 8 * i].try_into().unwrap());
    let width = u32::from_le_bytes(header[40..44].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[44..48].try_into().unwrap()) as usize;
    let intrinsics = CameraIntrinsics::new(f(0), f(1), f(2), f(3), width, height)
        .map_err(|e| Error::MalformedFile {
            offset: 8,
            reason: format!("invalid intrinsics: {e}"),
        })?;
    let count = u64::from_le_bytes(header[48..56].try_into().unwrap());

    let mut offset = header.len() as u64;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(|_| Error::MalformedFile {
            offset,
            reason: "file ends before a sample length prefix".into(),
        })?;
        offset += 8;
        let body_len = u64::from_le_bytes(len_bytes) as usize;
        let mut body = vec![0u8; body_len];
        r.read_exact(&mut body).map_err(|_| Error::MalformedFile {
            offset,
            reason: format!("sample body truncated (expected {body_len} bytes)"),
        })?;
        samples.push(decode_sample(&body, offset)?);
        offset += body_len as u64;
    }
    Ok((samples, intrinsics))
}

fn decode_sample(body: &[u8], base: u64) -> Result<SceneSample> {
    let mut c = Cursor {
        bytes: body,
        pos: 0,
        base,
    };
    let id_len = c.u32()? as usize;
    let at = c.base + c.pos as u64;
    let id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|_| Error::MalformedFile {
        offset: at,
        reason: "object id is not UTF-8".into(),
    })?;
    let mut rot = [[0.0; 3]; 3];
    for row in &mut rot {
        for v in row.iter_mut() {
            *v = c.f64()?;
        }
    }
    let mut t = [0.0; 3];
    for v in &mut t {
        *v = c.f64()?;
    }
    let gt_pose = RigidTransform::new(rot, t).map_err(|e| Error::MalformedFile {
        offset: base,
        reason: format!("stored pose is not rigid: {e}"),
    })?;
    let invisible_pct = c.f64()?;
    let p = c.u64()? as usize;
    let sample = SceneSample {
        object_id: id,
        gt_pose,
        observed_cloud: c.f64_rows::<3>(p)?,
        pixel_colors: c.f64_rows::<3>(p)?,
        pixel_coords: c.f64_rows::<2>(p)?,
        invisible_pct,
    };
    if c.pos != body.len() {
        return Err(Error::MalformedFile {
            offset: base + c.pos as u64,
            reason: "trailing bytes after sample body".into(),
        });
    }
    sample.validate().map_err(|e| Error::MalformedFile {
        offset: base,
        reason: e.to_string(),
    })?;
    Ok(sample)
}

/// Dataset produced by [`generate_dataset`]: samples plus the models and
/// camera they were rendered with.
pub struct GeneratedDataset {
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub models: Vec<ObjectModel>,
    pub intrinsics: CameraIntrinsics,
}

/// Canonical models for a dataset config; deterministic under the seed, so
/// datasets written to disk do not need to store them.
pub fn models_from_config(cfg: &DatasetConfig, base_seed: u64) -> Result<Vec<ObjectModel>> {
    cfg.objects
        .iter()
        .enumerate()
        .map(|(i, o)| make_primitive_model(o.kind, o.scale, o.density, base_seed ^ (i as u64)))
        .collect()
}

/// Renders the configured number of train and test scenes. Per-sample seeds
/// derive from `(seed, split, index)`, so samples are independent and the
/// whole dataset reproduces bit-for-bit; generation parallelizes over
/// samples without affecting the result.
pub fn generate_dataset(cfg: &DatasetConfig, base_seed: u64) -> Result<GeneratedDataset> {
    let intrinsics = cfg.camera.to_intrinsics()?;
    let models = models_from_config(cfg, base_seed)?;

    let render = |split: u64, count: usize| -> Result<Vec<SceneSample>> {
        (0..count)
            .into_par_iter()
            .map(|index| {
                let scene_seed =
                    seed::derive(base_seed, seed::stream::SCENE, split * 0x10_0000 + index as u64);
                render_one(cfg, &models, &intrinsics, index, scene_seed)
            })
            .collect()
    };
    Ok(GeneratedDataset {
        train: render(0, cfg.train_count)?,
        test: render(1, cfg.test_count)?,
        models,
        intrinsics,
    })
}

fn render_one(
    cfg: &DatasetConfig,
    models: &[ObjectModel],
    intrinsics: &CameraIntrinsics,
    index: usize,
    scene_seed: u64,
) -> Result<SceneSample> {
    let model = &models[index % models.len()];
    let mut rng = seed::rng(seed::derive(scene_seed, seed::stream::OCCLUDER, 0));

    let max_angle = cfg.pose.max_rotation_deg.to_radians();
    let axis = loop {
        let a = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>();
        if n > 1e-6 && n <= 1.0 {
            break a;
        }
    };
    let angle = rng.random_range(0.0..max_angle.max(f64::MIN_POSITIVE));
    let q = Quaternion::from_axis_angle(axis, angle)?;
    let mut t = [0.0; 3];
    for i in 0..3 {
        let e = cfg.pose.translation_extent[i];
        t[i] = cfg.pose.translation_center[i]
            + if e > 0.0 { rng.random_range(-e..e) } else { 0.0 };
    }
    let pose = RigidTransform::from_quat(&q, t)?;

    let occluders = if rng.random_range(0.0..1.0) < cfg.occlusion.probability {
        let cloud = pose.transform_points(&model.points);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        let mut min_z = f64::INFINITY;
        for p in &cloud {
            lo[0] = lo[0].min(p[0]);
            hi[0] = hi[0].max(p[0]);
            lo[1] = lo[1].min(p[1]);
            hi[1] = hi[1].max(p[1]);
            min_z = min_z.min(p[2]);
        }
        let frac = rng.random_range(cfg.occlusion.min_fraction..cfg.occlusion.max_fraction);
        let depth = 0.6 * min_z;
        // Patch coordinates live at the occluder depth; scale the object's
        // x/y extent onto that plane.
        let s = depth / min_z;
        let width = (hi[0] - lo[0]) * frac;
        let from_left = rng.random_range(0.0..1.0) < 0.5;
        let x_range = if from_left {
            (lo[0] * s - 1.0, (lo[0] + width) * s)
        } else {
            ((hi[0] - width) * s, hi[0] * s + 1.0)
        };
        vec![Occluder {
            x_range,
            y_range: (lo[1] * s - 1.0, hi[1] * s + 1.0),
            depth,
        }]
    } else {
        Vec::new()
    };

    let params = RenderParams {
        noise_sigma: cfg.noise_sigma,
        point_budget: cfg.point_budget,
        min_visible: cfg.min_visible,
    };
    match render_scene(model, &pose, intrinsics, &occluders, &params, scene_seed) {
        Ok(sample) => Ok(sample),
        // Occluder swallowed the object; retry the same scene unoccluded.
        Err(Error::FullyOccluded { .. }) if !occluders.is_empty() => {
            render_scene(model, &pose, intrinsics, &[], &params, scene_seed)
        }
        Err(e) => Err(e),
    }
}

/// Loader for external RGB-D benchmark archives (YCB-Video / LineMOD style
/// directory trees). The on-disk contract would be: per-object PLY model
/// plus per-frame depth, color, mask, and pose files. Out of scope for the
/// synthetic pipeline; the entry point documents the seam.
pub fn load_external_archive(_root: &Path) -> Result<GeneratedDataset> {
    Err(Error::Unimplemented(
        "external RGB-D archive loading; use generate_dataset instead",
    ))
}
