//! Software z-buffer rasterizer with perspective-correct depth, used both
//! to render the prior depth map for recovery and to synthesize frames.

use nalgebra::{Vector2, Vector3};

use crate::camera::CameraIntrinsics;
use crate::depth::DepthMap;
use crate::image::RgbImage;
use crate::model::MeshTopology;

const Z_NEAR: f64 = 1e-6;

/// Rasterizes the mesh into a depth map and, when per-vertex colors are
/// given, a color image. Back-facing triangles (geometric normal pointing
/// away from the camera) are culled; uncovered pixels stay invalid (zero
/// depth, black).
pub fn rasterize(
    vertices: &[Vector3<f64>],
    topology: &MeshTopology,
    camera: &CameraIntrinsics,
    colors: Option<&[Vector3<f64>]>,
) -> (DepthMap, Option<RgbImage>) {
    let (w, h) = (camera.width, camera.height);
    let mut depth = DepthMap::new(w, h);
    let mut zbuf = vec![f64::INFINITY; (w * h) as usize];
    let mut image = colors.map(|_| RgbImage::new(w, h));

    let projected: Vec<Option<Vector2<f64>>> = vertices
        .iter()
        .map(|v| (v.z > Z_NEAR).then(|| camera.project_unchecked(v)))
        .collect();

    for tri in &topology.triangles {
        let (ia, ib, ic) = (tri[0] as usize, tri[1] as usize, tri[2] as usize);
        let (va, vb, vc) = (vertices[ia], vertices[ib], vertices[ic]);
        let (pa, pb, pc) = match (projected[ia], projected[ib], projected[ic]) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => continue,
        };
        // Cull triangles whose outward normal points away from the camera.
        let normal = (vb - va).cross(&(vc - va));
        let centroid = (va + vb + vc) / 3.0;
        if normal.dot(&centroid) >= 0.0 {
            continue;
        }
        let area = edge(&pa, &pb, &pc);
        if area == 0.0 {
            continue;
        }
        let min_x = pa.x.min(pb.x).min(pc.x);
        let max_x = pa.x.max(pb.x).max(pc.x);
        let min_y = pa.y.min(pb.y).min(pc.y);
        let max_y = pa.y.max(pb.y).max(pc.y);
        let x0 = (min_x - 0.5).floor().max(0.0) as u32;
        let x1 = ((max_x - 0.5).ceil() as i64).min(w as i64 - 1).max(0) as u32;
        let y0 = (min_y - 0.5).floor().max(0.0) as u32;
        let y1 = ((max_y - 0.5).ceil() as i64).min(h as i64 - 1).max(0) as u32;
        if min_x > w as f64 || min_y > h as f64 || max_x < 0.0 || max_y < 0.0 {
            continue;
        }
        let inv_area = 1.0 / area;
        let (iza, izb, izc) = (1.0 / va.z, 1.0 / vb.z, 1.0 / vc.z);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let l0 = edge(&pb, &pc, &p) * inv_area;
                let l1 = edge(&pc, &pa, &p) * inv_area;
                let l2 = edge(&pa, &pb, &p) * inv_area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // Perspective-correct: 1/z is linear in screen space.
                let inv_z = l0 * iza + l1 * izb + l2 * izc;
                let z = 1.0 / inv_z;
                let idx = (y * w + x) as usize;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    depth.values[idx] = z;
                    if let (Some(img), Some(cols)) = (image.as_mut(), colors) {
                        let c = (cols[ia] * (l0 * iza) + cols[ib] * (l1 * izb) + cols[ic] * (l2 * izc)) * z;
                        img.set_pixel(
                            x,
                            y,
                            [to_u8(c.x), to_u8(c.y), to_u8(c.z)],
                        );
                    }
                }
            }
        }
    }
    (depth, image)
}

/// Renders only the depth channel; the prior map for depth recovery.
pub fn render_prior_depth(
    vertices: &[Vector3<f64>],
    topology: &MeshTopology,
    camera: &CameraIntrinsics,
) -> DepthMap {
    rasterize(vertices, topology, camera, None).0
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;

    fn small_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 4.5, 4.5, 10, 10).unwrap()
    }

    fn tri_topology(n_vertices: usize, tris: Vec<[u32; 3]>) -> MeshTopology {
        MeshTopology::new(tris, vec![], n_vertices).unwrap()
    }

    #[test]
    fn frontal_triangle_writes_its_depth() -> Result<()> {
        let k = small_camera();
        // Large triangle at z = 1 facing the camera (wound so the normal
        // points toward -z).
        let verts = vec![
            Vector3::new(-0.2, 0.2, 1.0),
            Vector3::new(0.2, 0.2, 1.0),
            Vector3::new(0.0, -0.25, 1.0),
        ];
        let topo = tri_topology(3, vec![[0, 1, 2]]);
        let depth = render_prior_depth(&verts, &topo, &k);
        assert_eq!(depth.at(4, 4), 1.0);
        Ok(())
    }

    #[test]
    fn nearer_triangle_wins_the_z_buffer() {
        let k = small_camera();
        let verts = vec![
            // far triangle at z = 2
            Vector3::new(-0.5, 0.5, 2.0),
            Vector3::new(0.5, 0.5, 2.0),
            Vector3::new(0.0, -0.6, 2.0),
            // near triangle at z = 1
            Vector3::new(-0.25, 0.25, 1.0),
            Vector3::new(0.25, 0.25, 1.0),
            Vector3::new(0.0, -0.3, 1.0),
        ];
        let topo = tri_topology(6, vec![[0, 1, 2], [3, 4, 5]]);
        let depth = render_prior_depth(&verts, &topo, &k);
        assert_eq!(depth.at(4, 4), 1.0);
    }

    #[test]
    fn back_facing_mesh_renders_nothing() {
        let k = small_camera();
        let verts = vec![
            Vector3::new(-0.2, 0.2, 1.0),
            Vector3::new(0.2, 0.2, 1.0),
            Vector3::new(0.0, -0.25, 1.0),
        ];
        // Opposite winding: normal points away from the camera.
        let topo = tri_topology(3, vec![[0, 2, 1]]);
        let depth = render_prior_depth(&verts, &topo, &k);
        assert_eq!(depth.valid_count(), 0);
    }

    #[test]
    fn covered_pixels_backproject_onto_the_triangle_plane() {
        let k = small_camera();
        // Slanted triangle; its plane is z = 1 + 0.5 x + 0.25 y.
        let plane = |x: f64, y: f64| 1.0 + 0.5 * x + 0.25 * y;
        let mk = |x: f64, y: f64| Vector3::new(x, y, plane(x, y));
        let verts = vec![mk(-0.3, 0.3), mk(0.3, 0.3), mk(0.0, -0.35)];
        let topo = tri_topology(3, vec![[0, 1, 2]]);
        let depth = render_prior_depth(&verts, &topo, &k);
        let mut covered = 0;
        for y in 0..10 {
            for x in 0..10 {
                let z = depth.at(x, y);
                if z > 0.0 {
                    covered += 1;
                    let p = k.backproject(x as f64 + 0.5, y as f64 + 0.5, z);
                    let residual = (p.z - plane(p.x, p.y)).abs();
                    assert!(residual < 1e-6, "pixel ({x},{y}) off-plane by {residual}");
                }
            }
        }
        assert!(covered > 4);
    }
}
