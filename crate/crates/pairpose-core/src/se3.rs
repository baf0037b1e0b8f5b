//! Rotations, rigid transforms, and canonical point-set sampling.
//!
//! All values are immutable after construction and freely shareable across
//! threads. Arithmetic orders are fixed: the same quaternion produces the
//! same rotation matrix bit-for-bit whether it goes through the plain value
//! path or the gradient-tracked [`quat_to_rotmat`] op.

use rand::Rng;

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::synth::ObjectModel;

pub const MIN_QUAT_NORM: f64 = 1e-9;

pub type Point3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Rotation matrix entries for a unit quaternion, row-major. Shared kernel
/// for the value path and the autodiff op.
#[inline]
pub(crate) fn unit_quat_rot_entries(w: f64, x: f64, y: f64, z: f64) -> [f64; 9] {
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    /// Accumulation order matches the in-graph normalization path.
    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quaternion> {
        let n = self.norm();
        if n < MIN_QUAT_NORM {
            return Err(Error::DegenerateQuaternion {
                norm: n,
                min: MIN_QUAT_NORM,
            });
        }
        Ok(Quaternion {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        })
    }

    /// Hamilton product; `self * rhs` rotates by `rhs` first, then `self`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    pub fn from_axis_angle(axis: Point3, angle: f64) -> Result<Quaternion> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < MIN_QUAT_NORM {
            return Err(Error::contract("axis-angle: zero axis"));
        }
        let half = angle / 2.0;
        let s = half.sin() / n;
        Ok(Quaternion {
            w: half.cos(),
            x: axis[0] * s,
            y: axis[1] * s,
            z: axis[2] * s,
        })
    }

    /// Uniform random unit quaternion (Shoemake's subgroup method).
    pub fn random_uniform(rng: &mut impl Rng) -> Quaternion {
        let u1: f64 = rng.random_range(0.0..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let u3: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        Quaternion {
            w: a * u2.sin(),
            x: a * u2.cos(),
            y: b * u3.sin(),
            z: b * u3.cos(),
        }
    }
}

/// Rotation entries for a quaternion that is already unit-norm, row-major.
/// Skips normalization so callers holding head-normalized quaternions stay
/// bitwise-aligned with the tracked path.
pub fn rot_entries_unit(q: &Quaternion) -> [f64; 9] {
    unit_quat_rot_entries(q.w, q.x, q.y, q.z)
}

/// Converts a quaternion to a proper rotation matrix, normalizing first.
pub fn quat_to_rot(q: &Quaternion) -> Result<Mat3> {
    let u = q.normalized()?;
    let e = unit_quat_rot_entries(u.w, u.x, u.y, u.z);
    Ok([[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]])
}

/// A pose: rotation matrix plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Point3,
}

impl RigidTransform {
    pub const ROTATION_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates RᵀR = I and det R = 1 to [`Self::ROTATION_TOL`].
    pub fn new(rotation: Mat3, translation: Point3) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > Self::ROTATION_TOL {
                    return Err(Error::contract(format!(
                        "rotation is not orthonormal: (RᵀR)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > Self::ROTATION_TOL {
            return Err(Error::contract(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn from_quat(q: &Quaternion, translation: Point3) -> Result<Self> {
        Ok(RigidTransform {
            rotation: quat_to_rot(q)?,
            translation,
        })
    }

    /// Applies the transform to one point: `R·p + t`. The accumulation order
    /// here is the reference for the tracked loss path.
    #[inline]
    pub fn transform_point(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn transform_points(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|&p| self.transform_point(p)).collect()
    }

    /// `(Rᵀ, −Rᵀ·t)`.
    pub fn inverse(&self) -> RigidTransform {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let nt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform {
            rotation: rt,
            translation: nt,
        }
    }

    /// Composition applying `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        RigidTransform {
            rotation: r,
            translation: self.transform_point(other.translation),
        }
    }

    pub fn rotation_flat(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }
}

/// Gradient-tracked unit-quaternion-to-rotation conversion: a `[4]` tensor
/// (assumed normalized upstream in the graph) becomes a `[3,3]` matrix.
pub fn quat_to_rotmat(g: &mut Graph, q: TensorId) -> Result<TensorId> {
    if *g.shape(q) != [4] {
        return Err(Error::BadShape {
            op: "quat_to_rotmat",
            expected: "a [4] quaternion",
            got: g.shape(q).to_vec(),
        });
    }
    let v = g.value(q);
    let entries = unit_quat_rot_entries(v[0], v[1], v[2], v[3]).to_vec();
    Ok(g.push_op(&[q], vec![3, 3], entries, || {
        Box::new(move |up, graph| {
            let v = graph.value(q);
            let (w, x, y, z) = (v[0], v[1], v[2], v[3]);
            // Rows of dR/dq for each matrix entry, laid out [dw, dx, dy, dz].
            let jac: [[f64; 4]; 9] = [
                [0.0, 0.0, -4.0 * y, -4.0 * z],
                [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
                [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
                [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
                [0.0, -4.0 * x, 0.0, -4.0 * z],
                [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
                [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
                [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
                [0.0, -4.0 * x, -4.0 * y, 0.0],
            ];
            let mut dq = [0.0; 4];
            for (entry, row) in jac.iter().enumerate() {
                for k in 0..4 {
                    dq[k] += up[entry] * row[k];
                }
            }
            graph.accumulate_grad(q, &dq);
        })
    }))
}

/// Draws `count` points uniformly with replacement from the model's point
/// set. Deterministic under `seed`.
pub fn sample_model_points(model: &ObjectModel, count: usize, seed: u64) -> Result<Vec<Point3>> {
    if model.points.is_empty() {
        return Err(Error::contract("sample_model_points: empty model"));
    }
    if count == 0 {
        return Err(Error::contract("sample_model_points: count must be >= 1"));
    }
    let mut rng = crate::seed::rng(seed);
    Ok((0..count)
        .map(|_| model.points[rng.random_range(0..model.points.len())])
        .collect())
}
