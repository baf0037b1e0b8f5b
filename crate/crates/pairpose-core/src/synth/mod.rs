//! Synthetic object models and RGB-D scenes.
//!
//! Stand-in for captured datasets: primitive objects with deterministic
//! surface point sets and a position-based color function, rendered through a
//! pinhole camera with planar occluders and optional depth noise. Generation
//! is stateless given a seed, so samples can be produced in parallel.

mod dataset;
mod render;

pub use dataset::{
    generate_dataset, load_external_archive, models_from_config, read_dataset, write_dataset,
    GeneratedDataset,
};
pub use render::{
    invisible_surface_pct, render_depth_map, render_scene, DepthMap, RenderParams,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::se3::{Point3, RigidTransform};

/// Canonical object: point set in meters, its diameter, and whether the
/// shape is rotationally symmetric (selects the closest-point metric).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: String,
    pub points: Vec<Point3>,
    /// Maximum pairwise distance within `points`.
    pub diameter: f64,
    pub symmetric: bool,
}

impl ObjectModel {
    /// Builds a model, computing the diameter from the point set.
    pub fn new(id: impl Into<String>, points: Vec<Point3>, symmetric: bool) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("object model needs at least one point"));
        }
        let diameter = max_pairwise_distance(&points);
        if diameter <= 0.0 {
            return Err(Error::contract("object model has zero extent"));
        }
        Ok(ObjectModel {
            id: id.into(),
            points,
            diameter,
            symmetric,
        })
    }

    pub fn bounding_box(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }

    /// Deterministic surface color for a canonical-frame position, in
    /// `[0,1]^3`: per channel, a smooth directional ramp across the object
    /// plus a milder sinusoidal octave. The ramp makes the color triple an
    /// (approximately affine) chart of the canonical position, so the
    /// texture branch carries signal a toy-capacity encoder can actually
    /// use; the octave adds texture and breaks residual ambiguities.
    /// Symmetric models get a texture that depends only on radius and
    /// height, so the symmetry flag stays truthful.
    pub fn color_at(&self, p: Point3) -> [f64; 3] {
        let h = fnv1a(self.id.as_bytes());
        let base = std::f64::consts::TAU / self.diameter;
        let coords = if self.symmetric {
            [(p[0] * p[0] + p[1] * p[1]).sqrt(), p[2], 0.0]
        } else {
            [p[0], p[1], p[2]]
        };
        let mut out = [0.0; 3];
        for (ch, slot) in out.iter_mut().enumerate() {
            let m = mix(h, ch as u64);
            let unit = |bits: u64| (bits % 2001) as f64 / 1000.0 - 1.0;
            let mut dir = [unit(m), unit(m >> 16), unit(m >> 32)];
            if self.symmetric {
                dir[2] = 0.0;
            }
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2])
                .sqrt()
                .max(1e-6);
            let ramp = (dir[0] * coords[0] + dir[1] * coords[1] + dir[2] * coords[2])
                / (norm * self.diameter);
            let f = 3.0 + ((m >> 8) % 4) as f64;
            let g = 1.0 + ((m >> 24) % 3) as f64;
            let k = 2.0 + ((m >> 40) % 3) as f64;
            let phase = ((m >> 48) % 6283) as f64 / 1000.0;
            let wave = (base * (f * coords[0] + g * coords[1] + k * coords[2]) + phase).sin();
            *slot = (0.5 + 0.75 * ramp + 0.1 * wave).clamp(0.0, 1.0);
        }
        out
    }
}

fn max_pairwise_distance(points: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d: f64 = (0..3)
                .map(|k| (points[i][k] - points[j][k]) * (points[i][k] - points[j][k]))
                .sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn mix(h: u64, v: u64) -> u64 {
    let mut z = h ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Cylinder,
    Blob,
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Box => "box",
            PrimitiveKind::Cylinder => "cylinder",
            PrimitiveKind::Blob => "blob",
        }
    }
}

/// Builds a primitive surface model. `scale` is the characteristic size in
/// meters and `density` the number of sampled surface points (extreme points
/// that pin the diameter are always added on top). Cylinders are flagged
/// symmetric; boxes and blobs are not.
pub fn make_primitive_model(
    kind: PrimitiveKind,
    scale: f64,
    density: usize,
    seed: u64,
) -> Result<ObjectModel> {
    if scale <= 0.0 {
        return Err(Error::contract(format!(
            "primitive scale must be positive, got {scale}"
        )));
    }
    let mut rng = crate::seed::rng(crate::seed::derive(seed, kind as u64 + 101, 0));
    let id = format!("{}-{:08x}", kind.name(), seed as u32);
    match kind {
        PrimitiveKind::Box => {
            let h = scale / 2.0;
            let mut points = Vec::with_capacity(density + 8);
            for &x in &[-h, h] {
                for &y in &[-h, h] {
                    for &z in &[-h, h] {
                        points.push([x, y, z]);
                    }
                }
            }
            for _ in 0..density {
                let face = rng.random_range(0..6u8);
                let u = rng.random_range(-h..h);
                let v = rng.random_range(-h..h);
                points.push(match face {
                    0 => [h, u, v],
                    1 => [-h, u, v],
                    2 => [u, h, v],
                    3 => [u, -h, v],
                    4 => [u, v, h],
                    _ => [u, v, -h],
                });
            }
            ObjectModel::new(id, points, false)
        }
        PrimitiveKind::Cylinder => {
            let r = 0.35 * scale;
            let h = scale / 2.0;
            let mut points = vec![
                [r, 0.0, h],
                [-r, 0.0, h],
                [0.0, r, h],
                [0.0, -r, h],
                [r, 0.0, -h],
                [-r, 0.0, -h],
                [0.0, r, -h],
                [0.0, -r, -h],
            ];
            let lateral = 2.0 * std::f64::consts::PI * r * scale;
            let caps = 2.0 * std::f64::consts::PI * r * r;
            let p_lateral = lateral / (lateral + caps);
            for _ in 0..density {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                if rng.random_range(0.0..1.0) < p_lateral {
                    let z = rng.random_range(-h..h);
                    points.push([r * theta.cos(), r * theta.sin(), z]);
                } else {
                    let rr = r * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if rng.random_range(0.0..1.0) < 0.5 { h } else { -h };
                    points.push([rr * theta.cos(), rr * theta.sin(), z]);
                }
            }
            ObjectModel::new(id, points, true)
        }
        PrimitiveKind::Blob => {
            // Deformed sphere: low-order angular harmonics keep the surface
            // smooth but clearly asymmetric.
            let base = 0.5 * scale;
            let amps: Vec<(f64, f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(0.04..0.12),
                        rng.random_range(1.0..3.0f64).round(),
                        rng.random_range(1.0..3.0f64).round(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let radius = |theta: f64, phi: f64| -> f64 {
                let mut r = 1.0;
                for &(a, ft, fp, pt, pp) in &amps {
                    r += a * (ft * theta + pt).cos() * (fp * phi + pp).cos();
                }
                base * r
            };
            let mut points = Vec::with_capacity(density);
            for _ in 0..density.max(8) {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi = z.acos();
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let s = phi.sin();
                let r = radius(theta, phi);
                points.push([r * s * theta.cos(), r * s * theta.sin(), r * z]);
            }
            ObjectModel::new(id, points, false)
        }
    }
}

/// Pinhole camera model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let c = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::contract("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::contract("principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Projects a camera-frame point with positive depth to pixel
    /// coordinates `(u, v)`.
    pub fn project(&self, p: Point3) -> Option<[f64; 2]> {
        if p[2] <= 0.0 {
            return None;
        }
        Some([
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ])
    }

    pub fn in_image(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] < self.width as f64 && uv[1] >= 0.0 && uv[1] < self.height as f64
    }

    /// Back-projects a pixel plus depth to a camera-frame point.
    pub fn back_project(&self, uv: [f64; 2], depth: f64) -> Point3 {
        [
            (uv[0] - self.cx) * depth / self.fx,
            (uv[1] - self.cy) * depth / self.fy,
            depth,
        ]
    }
}

/// Axis-aligned rectangular occluder at a fixed camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub depth: f64,
}

impl Occluder {
    /// True when the ray from the camera to `p` passes through the patch in
    /// front of the point.
    pub fn hides(&self, p: Point3) -> bool {
        if p[2] <= self.depth || self.depth <= 0.0 {
            return false;
        }
        let s = self.depth / p[2];
        let (x, y) = (p[0] * s, p[1] * s);
        x >= self.x_range.0 && x <= self.x_range.1 && y >= self.y_range.0 && y <= self.y_range.1
    }
}

/// One training or evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub object_id: String,
    pub gt_pose: RigidTransform,
    /// Visible points in the camera frame, meters.
    pub observed_cloud: Vec<Point3>,
    /// Per-point color features in `[0,1]`.
    pub pixel_colors: Vec<[f64; 3]>,
    /// Per-point image coordinates.
    pub pixel_coords: Vec<[f64; 2]>,
    /// Fraction of the model's projected points hidden by occluders or
    /// falling outside the image.
    pub invisible_pct: f64,
}

impl SceneSample {
    pub fn point_count(&self) -> usize {
        self.observed_cloud.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.observed_cloud.len();
        if p == 0 {
            return Err(Error::contract("scene sample has no points"));
        }
        if self.pixel_colors.len() != p || self.pixel_coords.len() != p {
            return Err(Error::contract(format!(
                "scene sample field lengths disagree: cloud {p}, colors {}, coords {}",
                self.pixel_colors.len(),
                self.pixel_coords.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.invisible_pct) {
            return Err(Error::contract(format!(
                "invisible_pct {} outside [0,1]",
                self.invisible_pct
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_diameter_is_sqrt3() {
        let m = make_primitive_model(PrimitiveKind::Box, 1.0, 100, 1).unwrap();
        assert!((m.diameter - 3.0f64.sqrt()).abs() < 1e-9);
        assert!(!m.symmetric);
    }

    #[test]
    fn primitives_are_deterministic() {
        for kind in [PrimitiveKind::Box, PrimitiveKind::Cylinder, PrimitiveKind::Blob] {
            let a = make_primitive_model(kind, 0.2, 150, 9).unwrap();
            let b = make_primitive_model(kind, 0.2, 150, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cylinder_is_symmetric_flagged() {
        let m = make_primitive_model(PrimitiveKind::Cylinder, 0.1, 50, 2).unwrap();
        assert!(m.symmetric);
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(make_primitive_model(PrimitiveKind::Box, 0.0, 10, 0).is_err());
        assert!(make_primitive_model(PrimitiveKind::Blob, -1.0, 10, 0).is_err());
    }

    #[test]
    fn diameter_matches_max_pairwise() {
        for kind in [PrimitiveKind::Box, PrimitiveKind::Cylinder, PrimitiveKind::Blob] {
            let m = make_primitive_model(kind, 0.15, 120, 4).unwrap();
            assert!((m.diameter - max_pairwise_distance(&m.points)).abs() < 1e-9);
            assert!(m.diameter > 0.0);
        }
    }

    #[test]
    fn colors_are_in_unit_range_and_symmetric_for_cylinder() {
        let m = make_primitive_model(PrimitiveKind::Cylinder, 0.1, 80, 3).unwrap();
        for &p in &m.points {
            let c = m.color_at(p);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Rotating a surface point about z must not change its color.
        let p = [0.035, 0.0, 0.01];
        let angle: f64 = 1.1;
        let q = [
            p[0] * angle.cos() - p[1] * angle.sin(),
            p[0] * angle.sin() + p[1] * angle.cos(),
            p[2],
        ];
        let (ca, cb) = (m.color_at(p), m.color_at(q));
        for i in 0..3 {
            assert!((ca[i] - cb[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).is_ok());
        assert!(CameraIntrinsics::new(-1.0, 300.0, 160.0, 120.0, 320, 240).is_err());
        assert!(CameraIntrinsics::new(300.0, 300.0, 400.0, 120.0, 320, 240).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let cam = CameraIntrinsics::new(280.0, 290.0, 160.0, 120.0, 320, 240).unwrap();
        let p = [0.05, -0.03, 0.6];
        let uv = cam.project(p).unwrap();
        let back = cam.back_project(uv, p[2]);
        for i in 0..3 {
            assert!((p[i] - back[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn occluder_ray_test() {
        let occ = Occluder {
            x_range: (-0.1, 0.1),
            y_range: (-0.1, 0.1),
            depth: 0.3,
        };
        assert!(occ.hides([0.0, 0.0, 0.6]));
        // Point in front of the occluder is never hidden.
        assert!(!occ.hides([0.0, 0.0, 0.2]));
        // Ray passes outside the patch.
        assert!(!occ.hides([0.5, 0.0, 0.6]));
    }
}
