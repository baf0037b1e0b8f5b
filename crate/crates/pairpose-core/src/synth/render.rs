//! Scene rendering and occlusion measurement.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::se3::RigidTransform;
use crate::seed;

use super::{CameraIntrinsics, ObjectModel, Occluder, SceneSample};

#[derive(Debug, Clone, Copy)]
pub struct RenderParams {
    /// Std of Gaussian noise added to the z coordinate of observed points,
    /// meters.
    pub noise_sigma: f64,
    /// Visible points are subsampled down to this budget.
    pub point_budget: usize,
    /// Fewer visible points than this is a fully-occluded error.
    pub min_visible: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            noise_sigma: 0.002,
            point_budget: 500,
            min_visible: 32,
        }
    }
}

/// Projects the posed model through the camera, removes points hidden by
/// occluders or outside the image, subsamples survivors to the point budget,
/// and attaches colors plus optional depth noise.
pub fn render_scene(
    model: &ObjectModel,
    pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    occluders: &[Occluder],
    params: &RenderParams,
    scene_seed: u64,
) -> Result<SceneSample> {
    let cam_points = pose.transform_points(&model.points);
    if cam_points.iter().any(|p| p[2] <= 0.0) {
        return Err(Error::contract(
            "render_scene: pose places points at non-positive depth",
        ));
    }
    let mut visible: Vec<usize> = Vec::with_capacity(cam_points.len());
    let mut pixels: Vec<[f64; 2]> = vec![[0.0, 0.0]; cam_points.len()];
    for (i, &p) in cam_points.iter().enumerate() {
        let uv = intrinsics.project(p).expect("depth checked above");
        if !intrinsics.in_image(uv) {
            continue;
        }
        if occluders.iter().any(|o| o.hides(p)) {
            continue;
        }
        pixels[i] = uv;
        visible.push(i);
    }
    let invisible_pct = 1.0 - visible.len() as f64 / cam_points.len() as f64;
    if visible.len() < params.min_visible {
        return Err(Error::FullyOccluded {
            visible: visible.len(),
            min: params.min_visible,
        });
    }

    let mut rng = seed::rng(scene_seed);
    let chosen: Vec<usize> = if visible.len() > params.point_budget {
        let mut picked = rand::seq::index::sample(&mut rng, visible.len(), params.point_budget)
            .into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|k| visible[k]).collect()
    } else {
        visible
    };

    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).map_err(|e| Error::contract(e.to_string()))?)
    } else {
        None
    };

    let mut observed = Vec::with_capacity(chosen.len());
    let mut colors = Vec::with_capacity(chosen.len());
    let mut coords = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let mut p = cam_points[i];
        if let Some(n) = &noise {
            p[2] += n.sample(&mut rng);
        }
        observed.push(p);
        colors.push(model.color_at(model.points[i]));
        coords.push(pixels[i]);
    }

    let sample = SceneSample {
        object_id: model.id.clone(),
        gt_pose: *pose,
        observed_cloud: observed,
        pixel_colors: colors,
        pixel_coords: coords,
        invisible_pct,
    };
    sample.validate()?;
    Ok(sample)
}

/// Dense depth image; 0 marks pixels with no observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    fn keep_min(&mut self, u: usize, v: usize, depth: f64) {
        let slot = &mut self.data[v * self.width + u];
        if *slot == 0.0 || depth < *slot {
            *slot = depth;
        }
    }
}

/// Z-buffers the posed model's points and any occluder patches onto the
/// pixel grid, keeping the nearest depth per pixel.
pub fn render_depth_map(
    model: &ObjectModel,
    pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    occluders: &[Occluder],
) -> DepthMap {
    let mut depth = DepthMap::empty(intrinsics.width, intrinsics.height);
    for p in pose.transform_points(&model.points) {
        let Some(uv) = intrinsics.project(p) else {
            continue;
        };
        if !intrinsics.in_image(uv) {
            continue;
        }
        depth.keep_min(uv[0] as usize, uv[1] as usize, p[2]);
    }
    for occ in occluders {
        if occ.depth <= 0.0 {
            continue;
        }
        let lo = intrinsics.project([occ.x_range.0, occ.y_range.0, occ.depth]);
        let hi = intrinsics.project([occ.x_range.1, occ.y_range.1, occ.depth]);
        let (Some(lo), Some(hi)) = (lo, hi) else {
            continue;
        };
        let u0 = lo[0].max(0.0) as usize;
        let u1 = (hi[0].min(intrinsics.width as f64 - 1.0)).max(0.0) as usize;
        let v0 = lo[1].max(0.0) as usize;
        let v1 = (hi[1].min(intrinsics.height as f64 - 1.0)).max(0.0) as usize;
        for v in v0..=v1 {
            for u in u0..=u1 {
                depth.keep_min(u, v, occ.depth);
            }
        }
    }
    depth
}

/// Fraction of the model's points that are invisible under the ground-truth
/// pose: the projection falls outside the image, or the observed depth at
/// that pixel differs from the point's depth by more than `h` meters.
pub fn invisible_surface_pct(
    model: &ObjectModel,
    gt_pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    depth_map: &DepthMap,
    h: f64,
) -> f64 {
    assert_eq!(
        (depth_map.width, depth_map.height),
        (intrinsics.width, intrinsics.height),
        "depth map dimensions must match the intrinsics"
    );
    let points = gt_pose.transform_points(&model.points);
    let mut invisible = 0usize;
    for p in &points {
        let visible = match intrinsics.project(*p) {
            Some(uv) if intrinsics.in_image(uv) => {
                let observed = depth_map.at(uv[0] as usize, uv[1] as usize);
                (observed - p[2]).abs() <= h
            }
            _ => false,
        };
        if !visible {
            invisible += 1;
        }
    }
    invisible as f64 / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_primitive_model, PrimitiveKind};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap()
    }

    fn centered_pose() -> RigidTransform {
        RigidTransform::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.5],
        )
        .unwrap()
    }

    fn noiseless(budget: usize) -> RenderParams {
        RenderParams {
            noise_sigma: 0.0,
            point_budget: budget,
            min_visible: 8,
        }
    }

    #[test]
    fn clean_render_matches_transformed_model_points() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 300, 1).unwrap();
        let pose = centered_pose();
        let sample =
            render_scene(&model, &pose, &camera(), &[], &noiseless(200), 7).unwrap();
        let transformed = pose.transform_points(&model.points);
        for obs in &sample.observed_cloud {
            assert!(
                transformed
                    .iter()
                    .any(|t| (0..3).all(|i| (t[i] - obs[i]).abs() < 1e-12)),
                "observed point {obs:?} is not a transformed model point"
            );
        }
        assert_eq!(sample.point_count(), 200);
        assert!(sample.invisible_pct.abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic_under_seed() {
        let model = make_primitive_model(PrimitiveKind::Blob, 0.1, 400, 2).unwrap();
        let pose = centered_pose();
        let params = RenderParams {
            noise_sigma: 0.002,
            point_budget: 128,
            min_visible: 8,
        };
        let a = render_scene(&model, &pose, &camera(), &[], &params, 99).unwrap();
        let b = render_scene(&model, &pose, &camera(), &[], &params, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn half_occluder_hides_about_half() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 4000, 3).unwrap();
        let pose = centered_pose();
        // Patch in front of the object covering everything left of center.
        let occ = Occluder {
            x_range: (-1.0, 0.0),
            y_range: (-1.0, 1.0),
            depth: 0.3,
        };
        let sample =
            render_scene(&model, &pose, &camera(), &[occ], &noiseless(500), 11).unwrap();
        assert!(
            (sample.invisible_pct - 0.5).abs() <= 0.05,
            "invisible fraction {}",
            sample.invisible_pct
        );
    }

    #[test]
    fn fully_occluded_scene_errors() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 200, 4).unwrap();
        let occ = Occluder {
            x_range: (-10.0, 10.0),
            y_range: (-10.0, 10.0),
            depth: 0.1,
        };
        let err = render_scene(
            &model,
            &centered_pose(),
            &camera(),
            &[occ],
            &noiseless(100),
            5,
        );
        assert!(matches!(err, Err(Error::FullyOccluded { .. })));
    }

    #[test]
    fn behind_camera_pose_rejected() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 50, 5).unwrap();
        let pose = RigidTransform::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, -0.5],
        )
        .unwrap();
        assert!(render_scene(&model, &pose, &camera(), &[], &noiseless(50), 0).is_err());
    }

    #[test]
    fn zero_noise_backprojection_reproduces_cloud() {
        let model = make_primitive_model(PrimitiveKind::Cylinder, 0.1, 300, 6).unwrap();
        let cam = camera();
        let sample =
            render_scene(&model, &centered_pose(), &cam, &[], &noiseless(150), 13).unwrap();
        for (p, uv) in sample.observed_cloud.iter().zip(&sample.pixel_coords) {
            let back = cam.back_project(*uv, p[2]);
            for i in 0..3 {
                assert!((back[i] - p[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_depth_map_means_fully_invisible() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 100, 7).unwrap();
        let cam = camera();
        let depth = DepthMap::empty(cam.width, cam.height);
        let pct = invisible_surface_pct(&model, &centered_pose(), &cam, &depth, 0.02);
        assert_eq!(pct, 1.0);
    }

    #[test]
    fn self_rendered_depth_map_bounded_by_backface_oracle() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 1500, 8).unwrap();
        let cam = camera();
        let pose = centered_pose();
        let depth = render_depth_map(&model, &pose, &cam, &[]);
        let pct = invisible_surface_pct(&model, &pose, &cam, &depth, 0.02);

        // Brute-force z-buffer oracle: a point is back-facing when another
        // model point shares its pixel at a depth more than h nearer.
        let pts = pose.transform_points(&model.points);
        let h = 0.02;
        let mut backface = 0usize;
        for (i, p) in pts.iter().enumerate() {
            let uv = cam.project(*p).unwrap();
            let (pu, pv) = (uv[0] as usize, uv[1] as usize);
            let occluded = pts.iter().enumerate().any(|(j, q)| {
                if i == j {
                    return false;
                }
                match cam.project(*q) {
                    Some(quv) => {
                        quv[0] as usize == pu && quv[1] as usize == pv && q[2] < p[2] - h
                    }
                    None => false,
                }
            });
            if occluded {
                backface += 1;
            }
        }
        let backface_frac = backface as f64 / pts.len() as f64;
        assert!(
            pct <= backface_frac + 1e-12,
            "invisible {pct} exceeds back-face fraction {backface_frac}"
        );
    }

    #[test]
    fn invisible_pct_monotone_in_occluder_area() {
        let model = make_primitive_model(PrimitiveKind::Box, 0.1, 1000, 9).unwrap();
        let cam = camera();
        let pose = centered_pose();
        let mut last = -1.0;
        for frac in [0.0, 0.3, 0.6, 1.0] {
            let occluders = if frac == 0.0 {
                vec![]
            } else {
                vec![Occluder {
                    x_range: (-0.2, -0.2 + 0.4 * frac),
                    y_range: (-0.2, 0.2),
                    depth: 0.3,
                }]
            };
            let depth = render_depth_map(&model, &pose, &cam, &occluders);
            let pct = invisible_surface_pct(&model, &pose, &cam, &depth, 0.02);
            assert!(pct >= last - 1e-12, "occlusion fraction regressed: {pct} < {last}");
            last = pct;
        }
    }
}
