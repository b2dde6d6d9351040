//! Organized point clouds from depth maps: backprojection, grid normal
//! estimation and the gated nearest-neighbor correspondence search used by
//! the ICP energies.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::depth::DepthMap;

/// Organized point cloud over the depth-image grid.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub width: u32,
    pub height: u32,
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// Depth measurement present at this pixel.
    pub valid: Vec<bool>,
    /// Normal estimate present (implies `valid`).
    pub normal_valid: Vec<bool>,
}

impl PointCloud {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Backprojects every valid depth pixel; normals come from
/// [`estimate_normals`] with unit step on the same map.
pub fn backproject_depth(depth: &DepthMap, camera: &CameraIntrinsics) -> PointCloud {
    backproject_depth_with(depth, camera, 1)
}

/// Backprojection with a configurable normal-estimation step. Tracking at
/// far range uses a wider step (and a smoothed copy of the depth map) so
/// the normal gate survives sensor noise.
pub fn backproject_depth_with(depth: &DepthMap, camera: &CameraIntrinsics, normal_step: u32) -> PointCloud {
    let (w, h) = (depth.width as usize, depth.height as usize);
    let mut points = vec![Vector3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let z = depth.values[y * w + x];
            if z > 0.0 {
                points[y * w + x] = camera.backproject(x as f64 + 0.5, y as f64 + 0.5, z);
                valid[y * w + x] = true;
            }
        }
    }
    let (normals, normal_valid) = estimate_normals_from_points(&points, &valid, w, h, normal_step as i64);
    PointCloud {
        width: depth.width,
        height: depth.height,
        points,
        normals,
        valid,
        normal_valid,
    }
}

/// Unit normals from central-difference tangents on the organized grid,
/// oriented toward the camera. Pixels without enough valid neighbors are
/// marked invalid.
pub fn estimate_normals(depth: &DepthMap, camera: &CameraIntrinsics, step: u32) -> (Vec<Vector3<f64>>, Vec<bool>) {
    let cloud = backproject_depth_with(depth, camera, step);
    (cloud.normals, cloud.normal_valid)
}

fn estimate_normals_from_points(
    points: &[Vector3<f64>],
    valid: &[bool],
    w: usize,
    h: usize,
    step: i64,
) -> (Vec<Vector3<f64>>, Vec<bool>) {
    let mut normals = vec![Vector3::zeros(); w * h];
    let mut ok = vec![false; w * h];
    let at = |x: i64, y: i64| -> Option<&Vector3<f64>> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return None;
        }
        let i = y as usize * w + x as usize;
        valid[i].then(|| &points[i])
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            if !valid[i] {
                continue;
            }
            let center = &points[i];
            // Central difference when both sides exist, one-sided otherwise.
            let tangent = |a: Option<&Vector3<f64>>, b: Option<&Vector3<f64>>| match (a, b) {
                (Some(p), Some(q)) => Some(p - q),
                (Some(p), None) => Some(p - center),
                (None, Some(q)) => Some(center - q),
                (None, None) => None,
            };
            let tu = tangent(at(x + step, y), at(x - step, y));
            let tv = tangent(at(x, y + step), at(x, y - step));
            let (tu, tv) = match (tu, tv) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            let mut n = tu.cross(&tv);
            let len = n.norm();
            if len < 1e-15 {
                continue;
            }
            n /= len;
            if n.dot(center) > 0.0 {
                n = -n;
            }
            normals[i] = n;
            ok[i] = true;
        }
    }
    (normals, ok)
}

/// 3x3 box smoothing over valid pixels, used to stabilize normals at far
/// range. Invalid pixels stay invalid.
pub fn smooth_depth(depth: &DepthMap, passes: u32) -> DepthMap {
    let (w, h) = (depth.width as i64, depth.height as i64);
    let mut cur = depth.clone();
    for _ in 0..passes {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if cur.values[i] <= 0.0 {
                    continue;
                }
                let mut sum = 0.0;
                let mut count = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (xj, yj) = (x + dx, y + dy);
                        if xj < 0 || yj < 0 || xj >= w || yj >= h {
                            continue;
                        }
                        let v = cur.values[(yj * w + xj) as usize];
                        if v > 0.0 {
                            sum += v;
                            count += 1.0;
                        }
                    }
                }
                next.values[i] = sum / count;
            }
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    /// Maximum model-to-cloud distance for a pair, meters.
    pub max_distance: f64,
    /// Maximum angle between model and cloud normals, degrees.
    pub normal_angle_deg: f64,
    /// Uniform-stride subsampling cap on model vertices.
    pub max_pairs: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig { max_distance: 0.05, normal_angle_deg: 60.0, max_pairs: 1000 }
    }
}

/// Model-vertex / cloud-point pairs surviving the distance and normal gates.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(u32, u32)>,
    pub weights: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Uniform voxel hash over the valid cloud points; cell size equals the
/// gate distance so the 27-cell neighborhood covers every candidate.
struct VoxelGrid {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl VoxelGrid {
    fn build(cloud: &PointCloud, cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            if !cloud.valid[i] || !cloud.normal_valid[i] {
                continue;
            }
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        VoxelGrid { cell, map }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    fn nearest_within(&self, p: &Vector3<f64>, cloud: &PointCloud, max_d: f64) -> Option<(u32, f64)> {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let mut best: Option<(u32, f64)> = None;
        let max_d2 = max_d * max_d;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(indices) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in indices {
                            let d2 = (cloud.points[i as usize] - p).norm_squared();
                            if d2 <= max_d2 && best.map_or(true, |(_, b)| d2 < b) {
                                best = Some((i, d2));
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Finds gated nearest-neighbor pairs between the posed model surface and
/// the cloud. Model vertices are subsampled with a uniform stride to at
/// most `cfg.max_pairs`. An empty result signals the caller to fall back
/// to 2D-only refinement for the frame.
pub fn find_correspondences(
    model_points: &[Vector3<f64>],
    model_normals: &[Vector3<f64>],
    cloud: &PointCloud,
    cfg: &IcpConfig,
) -> CorrespondenceSet {
    let mut out = CorrespondenceSet::default();
    if cloud.valid_count() == 0 || model_points.is_empty() {
        return out;
    }
    let grid = VoxelGrid::build(cloud, cfg.max_distance.max(1e-6));
    let stride = model_points.len().div_ceil(cfg.max_pairs.max(1)).max(1);
    let cos_gate = cfg.normal_angle_deg.to_radians().cos();
    for v in (0..model_points.len()).step_by(stride) {
        let p = &model_points[v];
        if let Some((ci, _)) = grid.nearest_within(p, cloud, cfg.max_distance) {
            let mn = &model_normals[v];
            if mn.norm_squared() < 0.25 {
                continue; // vertex without a meaningful normal
            }
            if mn.dot(&cloud.normals[ci as usize]) >= cos_gate {
                out.pairs.push((v as u32, ci));
                out.weights.push(1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::default_vga()
    }

    fn plane_depth(w: u32, h: u32, f: impl Fn(f64, f64) -> f64) -> DepthMap {
        let mut d = DepthMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                d.set(x, y, f(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        d
    }

    #[test]
    fn principal_point_backprojects_to_axis() {
        let k = camera();
        let mut d = DepthMap::new(640, 480);
        // Pixel whose center is the principal point.
        d.set(319, 239, 1.0);
        let cloud = backproject_depth(&d, &k);
        let p = cloud.points[(239 * 640 + 319) as usize];
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn backprojection_inverts_projection() {
        let k = camera();
        let d = plane_depth(32, 24, |x, y| 1.0 + 0.001 * x + 0.002 * y);
        let cloud = backproject_depth(&d, &k);
        for y in 0..24u32 {
            for x in 0..32u32 {
                let p = cloud.points[(y * 32 + x) as usize];
                let uv = k.project(&p).unwrap();
                assert_relative_eq!(uv.x, x as f64 + 0.5, epsilon = 1e-9);
                assert_relative_eq!(uv.y, y as f64 + 0.5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constant_depth_backprojects_coplanar() {
        let k = camera();
        let d = plane_depth(16, 16, |_, _| 1.7);
        let cloud = backproject_depth(&d, &k);
        for (p, ok) in cloud.points.iter().zip(cloud.valid.iter()) {
            if *ok {
                assert!((p.z - 1.7).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frontoparallel_plane_normals_point_at_camera() {
        let k = camera();
        let d = plane_depth(16, 16, |_, _| 1.0);
        let cloud = backproject_depth(&d, &k);
        for i in 0..cloud.points.len() {
            if cloud.normal_valid[i] {
                assert!((cloud.normals[i] - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
            }
        }
        assert!(cloud.normal_valid.iter().filter(|v| **v).count() > 0);
    }

    #[test]
    fn tilted_plane_normal_is_analytic() {
        let k = camera();
        // Plane z = 1 + x (45 degrees about the y axis): normal along
        // (1, 0, -1)/sqrt(2) once oriented toward the camera.
        // Express depth as a function of pixel: z = 1 / (1 - (u - cx)/fx).
        let d = plane_depth(64, 64, |u, _| {
            let t = (u - k.cx) / k.fx;
            1.0 / (1.0 - t)
        });
        let cloud = backproject_depth(&d, &k);
        let want = Vector3::new(1.0, 0.0, -1.0).normalize();
        let i = (32 * 64 + 32) as usize;
        assert!(cloud.normal_valid[i]);
        assert!((cloud.normals[i] - want).norm() < 1e-3);
    }

    #[test]
    fn isolated_pixel_has_no_normal() {
        let k = camera();
        let mut d = DepthMap::new(8, 8);
        d.set(4, 4, 1.0);
        let cloud = backproject_depth(&d, &k);
        assert!(cloud.valid[(4 * 8 + 4) as usize]);
        assert!(!cloud.normal_valid[(4 * 8 + 4) as usize]);
    }

    #[test]
    fn empty_depth_gives_empty_cloud() {
        let cloud = backproject_depth(&DepthMap::new(8, 8), &camera());
        assert_eq!(cloud.valid_count(), 0);
    }

    #[test]
    fn self_correspondence_matches_at_zero_distance() {
        let k = camera();
        let d = plane_depth(64, 64, |_, _| 1.2);
        let cloud = backproject_depth(&d, &k);
        // Sample cloud points as the "model".
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        for i in (0..cloud.points.len()).step_by(97) {
            if cloud.valid[i] && cloud.normal_valid[i] {
                pts.push(cloud.points[i]);
                nrm.push(cloud.normals[i]);
            }
        }
        let corr = find_correspondences(&pts, &nrm, &cloud, &IcpConfig::default());
        assert_eq!(corr.len(), pts.len());
        for (v, c) in &corr.pairs {
            assert!((pts[*v as usize] - cloud.points[*c as usize]).norm() < 1e-12);
        }
    }

    #[test]
    fn displaced_cloud_yields_no_pairs() {
        let k = camera();
        let d = plane_depth(32, 32, |_, _| 2.5);
        let cloud = backproject_depth(&d, &k);
        // Model one meter in front of the cloud, 5 cm gate.
        let pts = vec![Vector3::new(0.0, 0.0, 1.5)];
        let nrm = vec![Vector3::new(0.0, 0.0, -1.0)];
        let corr = find_correspondences(&pts, &nrm, &cloud, &IcpConfig::default());
        assert!(corr.is_empty());
    }

    #[test]
    fn tighter_gates_never_add_pairs() {
        let k = camera();
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(21);
        let d = plane_depth(48, 48, |_, _| 1.5 + 0.0 * 0.0);
        let mut noisy = d.clone();
        for v in &mut noisy.values {
            *v += rng.random_range(-0.01..0.01);
        }
        let cloud = backproject_depth(&noisy, &k);
        let clean = backproject_depth(&d, &k);
        let pts: Vec<_> = clean.points.iter().copied().collect();
        let nrm: Vec<_> = clean
            .normals
            .iter()
            .zip(clean.normal_valid.iter())
            .map(|(n, ok)| if *ok { *n } else { Vector3::zeros() })
            .collect();
        let mut last = usize::MAX;
        for gate in [0.05, 0.02, 0.01, 0.005, 0.002] {
            let cfg = IcpConfig { max_distance: gate, ..Default::default() };
            let n = find_correspondences(&pts, &nrm, &cloud, &cfg).len();
            assert!(n <= last, "pairs grew from {last} to {n} at gate {gate}");
            last = n;
        }
    }

    #[test]
    fn smoothing_preserves_linear_fields_in_the_interior() {
        let d = plane_depth(16, 16, |x, y| 1.0 + 0.01 * x + 0.02 * y);
        let s = smooth_depth(&d, 2);
        for y in 3..13u32 {
            for x in 3..13u32 {
                assert!((s.at(x, y) - d.at(x, y)).abs() < 1e-12);
            }
        }
    }
}
