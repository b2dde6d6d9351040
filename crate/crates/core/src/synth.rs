//! Procedural face rig, RGBD rendering with a distance-dependent sensor
//! model, and the on-disk sequence layout. The rig stands in for a captured
//! blendshape database and provides exact ground truth for closed-loop
//! tests of every other module.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::cloud::backproject_depth;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::math::canonicalize_axis_angle;
use crate::model::{
    ExpressionWeights, IdentityVector, MeshTopology, ReducedCoreTensor, RigidPose,
};
use crate::raster::rasterize;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    /// Vertex grid rows; the mesh has `rows * cols` vertices.
    pub rows: u32,
    pub cols: u32,
    pub n_identities: usize,
    pub n_expressions: usize,
    pub n_landmarks: usize,
    pub seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { rows: 20, cols: 30, n_identities: 8, n_expressions: 12, n_landmarks: 16, seed: 7 }
    }
}

/// The generative rig: a reduced core tensor assembled so that one-hot
/// identity and expression weights reproduce the stored truth meshes
/// exactly, plus topology, landmarks and a per-vertex albedo pattern.
pub struct SyntheticRig {
    pub config: RigConfig,
    pub tensor: ReducedCoreTensor,
    pub topology: Arc<MeshTopology>,
    pub albedo: Vec<f64>,
    truth: Vec<Vec<Vec<Vector3<f64>>>>,
}

impl SyntheticRig {
    pub fn n_vertices(&self) -> usize {
        (self.config.rows * self.config.cols) as usize
    }

    /// Stored ground-truth mesh for identity `i`, expression mode `j`.
    pub fn truth_mesh(&self, identity: usize, expression: usize) -> &[Vector3<f64>] {
        &self.truth[identity][expression]
    }

    /// Mesh of an arbitrary identity mixture at expression weights `e`,
    /// through the same contraction the tracker uses.
    pub fn mesh(&self, w_id: &IdentityVector, e: &ExpressionWeights) -> Result<Vec<Vector3<f64>>> {
        let gamma = expression_to_mode_weights(e, self.tensor.exp_basis());
        self.tensor.contract(w_id, &gamma)
    }
}

/// Maps blend weights `e` to expression-mode weights
/// `gamma = (1 - sum e_j) u_0 + sum e_j u_j`.
pub fn expression_to_mode_weights(e: &ExpressionWeights, exp_basis: &[Vec<f64>]) -> Vec<f64> {
    let ne = exp_basis.len();
    let mut gamma = vec![0.0; ne];
    let esum: f64 = e.as_slice().iter().sum();
    for (g, u0) in gamma.iter_mut().zip(exp_basis[0].iter()) {
        *g = (1.0 - esum) * u0;
    }
    for (j, &ej) in e.as_slice().iter().enumerate() {
        for (g, uj) in gamma.iter_mut().zip(exp_basis[j + 1].iter()) {
            *g += ej * uj;
        }
    }
    gamma
}

struct Bump {
    center: (f64, f64),
    sigma: (f64, f64),
    amp: f64,
}

impl Bump {
    fn mask(&self, u: f64, v: f64) -> f64 {
        let du = (u - self.center.0) / self.sigma.0;
        let dv = (v - self.center.1) / self.sigma.1;
        (-0.5 * (du * du + dv * dv)).exp()
    }
}

struct ExprTemplate {
    center: (f64, f64),
    sigma: (f64, f64),
    dir: Vector3<f64>,
    normal_amp: f64,
}

fn expression_templates() -> Vec<ExprTemplate> {
    vec![
        // jaw open
        ExprTemplate { center: (0.0, 0.72), sigma: (0.45, 0.22), dir: Vector3::new(0.0, 0.014, 0.002), normal_amp: 0.0 },
        // brow raise
        ExprTemplate { center: (0.0, -0.52), sigma: (0.55, 0.12), dir: Vector3::new(0.0, -0.008, 0.0), normal_amp: -0.002 },
        // smile corners
        ExprTemplate { center: (-0.32, 0.45), sigma: (0.14, 0.10), dir: Vector3::new(-0.005, -0.006, -0.002), normal_amp: 0.0 },
        ExprTemplate { center: (0.32, 0.45), sigma: (0.14, 0.10), dir: Vector3::new(0.005, -0.006, -0.002), normal_amp: 0.0 },
        // cheek puffs
        ExprTemplate { center: (-0.48, 0.15), sigma: (0.16, 0.18), dir: Vector3::zeros(), normal_amp: 0.009 },
        ExprTemplate { center: (0.48, 0.15), sigma: (0.16, 0.18), dir: Vector3::zeros(), normal_amp: 0.009 },
        // pucker
        ExprTemplate { center: (0.0, 0.45), sigma: (0.16, 0.10), dir: Vector3::new(0.0, 0.0, -0.008), normal_amp: 0.004 },
        // eye squeezes
        ExprTemplate { center: (-0.38, -0.28), sigma: (0.11, 0.08), dir: Vector3::zeros(), normal_amp: -0.005 },
        ExprTemplate { center: (0.38, -0.28), sigma: (0.11, 0.08), dir: Vector3::zeros(), normal_amp: -0.005 },
        // frown
        ExprTemplate { center: (0.0, 0.50), sigma: (0.30, 0.10), dir: Vector3::new(0.0, 0.005, 0.0), normal_amp: 0.002 },
        // nose wrinkle
        ExprTemplate { center: (0.0, 0.0), sigma: (0.13, 0.10), dir: Vector3::new(0.0, -0.004, 0.0), normal_amp: 0.003 },
    ]
}

/// Canonical landmark sites in the rig's (u, v) chart.
fn landmark_sites(n: usize) -> Vec<(f64, f64)> {
    let canonical = [
        (0.0, 0.10),    // nose tip
        (-0.20, -0.28), // inner eyes
        (0.20, -0.28),
        (-0.52, -0.28), // outer eyes
        (0.52, -0.28),
        (-0.35, -0.50), // brows
        (0.35, -0.50),
        (-0.30, 0.45), // mouth corners
        (0.30, 0.45),
        (0.0, 0.36), // lips
        (0.0, 0.55),
        (0.0, 0.85), // chin
        (-0.60, 0.12), // cheeks
        (0.60, 0.12),
        (0.0, -0.70), // forehead
        (0.0, -0.05), // nose bridge
    ];
    let mut out: Vec<(f64, f64)> = canonical.iter().copied().take(n).collect();
    // Extra landmarks spread deterministically over the face.
    let mut k = 0u64;
    while out.len() < n {
        k += 1;
        let u = ((k as f64 * 0.618_033_988_749_895).fract() - 0.5) * 1.5;
        let v = ((k as f64 * 0.381_966_011_250_105).fract() - 0.5) * 1.6;
        out.push((u, v));
    }
    out
}

/// Builds the procedural rig: deformed-ellipsoid base with facial features,
/// smooth random identity fields, and localized expression fields. The core
/// tensor slice at one-hot weights equals the stored truth mesh exactly.
pub fn gen_rig(cfg: &RigConfig) -> Result<SyntheticRig> {
    if cfg.rows < 4 || cfg.cols < 4 {
        return Err(Error::Config("rig grid must be at least 4x4".into()));
    }
    if cfg.n_identities < 1 || cfg.n_expressions < 2 {
        return Err(Error::Config("rig needs >= 1 identity and >= 2 expression modes".into()));
    }
    let (rows, cols) = (cfg.rows as usize, cfg.cols as usize);
    let nv = rows * cols;
    if cfg.n_landmarks > nv {
        return Err(Error::Config("more landmarks than vertices".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Half-axes of the head ellipsoid, meters. +y is down, the face looks
    // along -z toward the camera.
    let (ax, ay, az) = (0.085, 0.115, 0.075);
    let uv = |r: usize, c: usize| -> (f64, f64) {
        (
            2.0 * c as f64 / (cols - 1) as f64 - 1.0,
            2.0 * r as f64 / (rows - 1) as f64 - 1.0,
        )
    };
    let bumps = [
        Bump { center: (0.0, 0.10), sigma: (0.09, 0.14), amp: 0.022 }, // nose
        Bump { center: (-0.38, -0.28), sigma: (0.13, 0.10), amp: -0.008 }, // eye sockets
        Bump { center: (0.38, -0.28), sigma: (0.13, 0.10), amp: -0.008 },
        Bump { center: (0.0, -0.45), sigma: (0.70, 0.08), amp: 0.005 }, // brow ridge
        Bump { center: (0.0, 0.45), sigma: (0.22, 0.08), amp: 0.004 }, // mouth
        Bump { center: (0.0, 0.85), sigma: (0.25, 0.12), amp: 0.006 }, // chin
    ];

    let mut base = Vec::with_capacity(nv);
    let mut outward = Vec::with_capacity(nv);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = uv(r, c);
            let azi = u * 70.0_f64.to_radians();
            let ele = v * 55.0_f64.to_radians();
            let p = Vector3::new(
                ax * azi.sin() * ele.cos(),
                ay * ele.sin(),
                -az * azi.cos() * ele.cos(),
            );
            let n = Vector3::new(p.x / (ax * ax), p.y / (ay * ay), p.z / (az * az)).normalize();
            let mut q = p;
            for b in &bumps {
                q += n * (b.amp * b.mask(u, v));
            }
            base.push(q);
            outward.push(n);
        }
    }

    // Identity modes: per-identity global scale plus a smooth random
    // low-frequency displacement field along the outward normal.
    let mut id_scale = Vec::with_capacity(cfg.n_identities);
    let mut id_field: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_identities);
    for _ in 0..cfg.n_identities {
        id_scale.push(1.0 + rng.random_range(-0.05..0.05));
        let mut waves = Vec::new();
        for _ in 0..5 {
            waves.push((
                rng.random_range(-0.004..0.004),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ));
        }
        let mut field = Vec::with_capacity(nv);
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = uv(r, c);
                let mut f = 0.0;
                for &(a, ku, kv, p1, p2) in &waves {
                    f += a
                        * (std::f64::consts::PI * ku * u + p1).cos()
                        * (std::f64::consts::PI * kv * v + p2).cos();
                }
                field.push(f);
            }
        }
        id_field.push(field);
    }

    // Expression modes: mode 0 is neutral (zero field), the rest are the
    // localized templates with seeded amplitude jitter.
    let templates = expression_templates();
    let mut exp_fields: Vec<Vec<Vector3<f64>>> = vec![vec![Vector3::zeros(); nv]];
    for j in 1..cfg.n_expressions {
        let t = &templates[(j - 1) % templates.len()];
        let jitter = rng.random_range(0.8..1.2);
        let du = if j - 1 >= templates.len() { rng.random_range(-0.15..0.15) } else { 0.0 };
        let mut field = Vec::with_capacity(nv);
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = uv(r, c);
                let duc = (u - t.center.0 - du) / t.sigma.0;
                let dvc = (v - t.center.1) / t.sigma.1;
                let mask = (-0.5 * (duc * duc + dvc * dvc)).exp();
                field.push((t.dir + outward[r * cols + c] * t.normal_amp) * (mask * jitter));
            }
        }
        exp_fields.push(field);
    }

    // Truth meshes and the tensor: slice (i, j) is mesh(i, j).
    let mut truth = Vec::with_capacity(cfg.n_identities);
    for i in 0..cfg.n_identities {
        let mut per_exp = Vec::with_capacity(cfg.n_expressions);
        for field in exp_fields.iter() {
            let mesh: Vec<Vector3<f64>> = (0..nv)
                .map(|k| base[k] * id_scale[i] + outward[k] * id_field[i][k] + field[k])
                .collect();
            per_exp.push(mesh);
        }
        truth.push(per_exp);
    }
    let (ni, ne) = (cfg.n_identities, cfg.n_expressions);
    let mut data = vec![0.0f64; 3 * nv * ni * ne];
    for (i, per_exp) in truth.iter().enumerate() {
        for (j, mesh) in per_exp.iter().enumerate() {
            for (k, p) in mesh.iter().enumerate() {
                for c in 0..3 {
                    let row = 3 * k + c;
                    data[(row * ni + i) * ne + j] = p[c];
                }
            }
        }
    }
    let exp_basis: Vec<Vec<f64>> = (0..ne)
        .map(|j| (0..ne).map(|k| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let tensor = ReducedCoreTensor::new(data, nv, ni, ne, exp_basis)?;

    // Grid triangulation, wound so geometric normals point outward.
    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let v00 = (r * cols + c) as u32;
            let v01 = v00 + 1;
            let v10 = v00 + cols as u32;
            let v11 = v10 + 1;
            for tri in [[v00, v10, v11], [v00, v11, v01]] {
                let (a, b, cc) = (tri[0] as usize, tri[1] as usize, tri[2] as usize);
                let n = (base[b] - base[a]).cross(&(base[cc] - base[a]));
                let o = outward[a] + outward[b] + outward[cc];
                if n.dot(&o) >= 0.0 {
                    triangles.push(tri);
                } else {
                    triangles.push([tri[0], tri[2], tri[1]]);
                }
            }
        }
    }

    // Landmarks: map uv sites to distinct grid vertices.
    let mut landmark_vertices: Vec<u32> = Vec::with_capacity(cfg.n_landmarks);
    for (u, v) in landmark_sites(cfg.n_landmarks) {
        let c0 = (((u + 1.0) * (cols - 1) as f64 / 2.0).round() as i64).clamp(0, cols as i64 - 1);
        let r0 = (((v + 1.0) * (rows - 1) as f64 / 2.0).round() as i64).clamp(0, rows as i64 - 1);
        let mut placed = None;
        'search: for radius in 0..rows.max(cols) as i64 {
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    if dr.abs().max(dc.abs()) != radius {
                        continue;
                    }
                    let (r, c) = (r0 + dr, c0 + dc);
                    if r < 0 || c < 0 || r >= rows as i64 || c >= cols as i64 {
                        continue;
                    }
                    let idx = (r as usize * cols + c as usize) as u32;
                    if !landmark_vertices.contains(&idx) {
                        placed = Some(idx);
                        break 'search;
                    }
                }
            }
        }
        landmark_vertices.push(placed.ok_or_else(|| Error::Degenerate("no free vertex for landmark".into()))?);
    }
    let topology = Arc::new(MeshTopology::new(triangles, landmark_vertices, nv)?);

    // Per-vertex albedo: smooth pattern plus high-frequency noise so the
    // pixel-difference features have something to latch onto.
    let mut albedo = Vec::with_capacity(nv);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = uv(r, c);
            let smooth = 0.55 + 0.18 * (7.3 * u + 1.1).sin() * (5.7 * v - 0.4).cos();
            let noise: f64 = rng.random_range(-0.27..0.27);
            albedo.push((smooth + noise).clamp(0.12, 0.97));
        }
    }

    Ok(SyntheticRig { config: *cfg, tensor, topology, albedo, truth })
}

/// Distance-dependent sensor model. The axial noise and quantization step
/// grow quadratically with depth; lateral jitter displaces the sampled
/// pixel; grazing incidence drops measurements.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Axial sigma coefficient, mm per m^2: sigma(z) = a z^2.
    pub axial_mm_per_m2: f64,
    /// Quantization step coefficient, mm per m^2: q(z) = q z^2.
    pub quant_mm_per_m2: f64,
    /// Lateral jitter sigma, pixels.
    pub lateral_sigma_px: f64,
    /// Incidence angle beyond which dropout applies, degrees.
    pub dropout_grazing_deg: f64,
    pub dropout_prob: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            axial_mm_per_m2: 1.425,
            quant_mm_per_m2: 2.85,
            lateral_sigma_px: 0.5,
            dropout_grazing_deg: 75.0,
            dropout_prob: 0.8,
        }
    }
}

impl NoiseModel {
    /// Axial noise sigma at depth `z` meters, in millimeters.
    pub fn axial_sigma_mm(&self, z: f64) -> f64 {
        self.axial_mm_per_m2 * z * z
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Lighting {
    /// Unit vector toward the light, camera frame.
    pub to_light: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting { to_light: [-0.25, -0.35, -0.90], ambient: 0.35, diffuse: 0.65 }
    }
}

/// One rendered observation: the sensor-simulated depth alongside the
/// clean render and the true landmark projections.
pub struct RenderedFrame {
    pub color: RgbImage,
    pub depth: DepthMap,
    pub clean_depth: DepthMap,
    pub truth_landmarks: Vec<Vector2<f64>>,
}

/// Renders the rig at the given identity and pose. The depth channel of the
/// clean render is shared bit-for-bit with [`crate::raster::render_prior_depth`];
/// the sensor model, when present, perturbs a copy.
pub fn render_rgbd(
    rig: &SyntheticRig,
    w_id: &IdentityVector,
    pose: &RigidPose,
    expr: &ExpressionWeights,
    camera: &CameraIntrinsics,
    lighting: &Lighting,
    noise: Option<&NoiseModel>,
    rng: &mut ChaCha8Rng,
) -> Result<RenderedFrame> {
    let local = rig.mesh(w_id, expr)?;
    let posed = crate::model::transform(&local, pose);
    let normals = rig.topology.vertex_normals(&posed);
    let to_light = Vector3::new(lighting.to_light[0], lighting.to_light[1], lighting.to_light[2]).normalize();
    let colors: Vec<Vector3<f64>> = normals
        .iter()
        .zip(rig.albedo.iter())
        .map(|(n, a)| {
            let shade = (lighting.ambient + lighting.diffuse * n.dot(&to_light).max(0.0)) * a;
            Vector3::new(shade, shade * 0.92, shade * 0.85)
        })
        .collect();
    let (clean_depth, color) = rasterize(&posed, &rig.topology, camera, Some(&colors));
    let color = color.expect("colors requested");
    let mut truth_landmarks = Vec::with_capacity(rig.topology.n_landmarks());
    for &lv in &rig.topology.landmark_vertices {
        truth_landmarks.push(camera.project(&posed[lv as usize])?);
    }
    let depth = match noise {
        None => clean_depth.clone(),
        Some(model) => apply_sensor_noise(&clean_depth, camera, model, rng),
    };
    Ok(RenderedFrame { color, depth, clean_depth, truth_landmarks })
}

fn apply_sensor_noise(
    clean: &DepthMap,
    camera: &CameraIntrinsics,
    model: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> DepthMap {
    let (w, h) = (clean.width as i64, clean.height as i64);
    let cloud = backproject_depth(clean, camera);
    let grazing_cos = model.dropout_grazing_deg.to_radians().cos();
    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = DepthMap::new(clean.width, clean.height);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if clean.values[i] <= 0.0 {
                continue;
            }
            // Lateral jitter: sample the clean surface at a displaced pixel.
            let (mut xs, mut ys) = (x, y);
            if model.lateral_sigma_px > 0.0 {
                let dx: f64 = unit_normal.sample(rng) * model.lateral_sigma_px;
                let dy: f64 = unit_normal.sample(rng) * model.lateral_sigma_px;
                xs = (x + dx.round() as i64).clamp(0, w - 1);
                ys = (y + dy.round() as i64).clamp(0, h - 1);
            }
            let z0 = clean.values[(ys * w + xs) as usize];
            if z0 <= 0.0 {
                continue;
            }
            // Grazing-angle dropout.
            if cloud.normal_valid[i] {
                let p = cloud.points[i].normalize();
                let cos_inc = cloud.normals[i].dot(&p).abs();
                if cos_inc < grazing_cos && rng.random::<f64>() < model.dropout_prob {
                    continue;
                }
            }
            let sigma_m = model.axial_sigma_mm(z0) / 1000.0;
            let mut z = z0 + unit_normal.sample(rng) * sigma_m;
            let q = model.quant_mm_per_m2 * z0 * z0 / 1000.0;
            if q > 0.0 {
                z = (z / q).round() * q;
            }
            if z > 0.0 {
                out.values[i] = z;
            }
        }
    }
    out
}

/// Ground-truth trajectory: smooth sinusoids over pose and expression that
/// keep the face in frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceSpec {
    pub frames: u32,
    pub distance_m: f64,
    pub seed: u64,
    /// Identity weights of the rendered subject, length `n_identities`.
    pub identity: Vec<f64>,
    pub yaw_amp_deg: f64,
    pub pitch_amp_deg: f64,
    pub roll_amp_deg: f64,
    pub trans_amp_m: f64,
    pub expr_amp: f64,
    pub noise: Option<NoiseModel>,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            frames: 100,
            distance_m: 1.5,
            seed: 11,
            identity: Vec::new(),
            yaw_amp_deg: 30.0,
            pitch_amp_deg: 15.0,
            roll_amp_deg: 5.0,
            trans_amp_m: 0.02,
            expr_amp: 0.6,
            noise: Some(NoiseModel::default()),
        }
    }
}

impl SequenceSpec {
    pub fn identity_vector(&self, n_identities: usize) -> Result<IdentityVector> {
        if self.identity.is_empty() {
            return Ok(IdentityVector::one_hot(n_identities, 0));
        }
        if self.identity.len() != n_identities {
            return Err(Error::Config(format!(
                "sequence identity has {} weights, rig has {} identities",
                self.identity.len(),
                n_identities
            )));
        }
        IdentityVector::new(self.identity.clone())
    }
}

/// Precomputed sinusoid channels of a sequence trajectory.
pub struct Trajectory {
    frames: u32,
    distance: f64,
    channels: TrajectoryChannels,
    n_expr: usize,
}

struct TrajectoryChannels {
    yaw: (f64, f64, f64),
    pitch: (f64, f64, f64),
    roll: (f64, f64, f64),
    tx: (f64, f64, f64),
    ty: (f64, f64, f64),
    tz: (f64, f64, f64),
    expr: Vec<(usize, f64, f64, f64)>,
}

impl Trajectory {
    pub fn new(spec: &SequenceSpec, n_expr: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut chan = |amp: f64| -> (f64, f64, f64) {
            (
                amp,
                rng.random_range(0.6..1.4),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        let yaw = chan(spec.yaw_amp_deg.to_radians());
        let pitch = chan(spec.pitch_amp_deg.to_radians());
        let roll = chan(spec.roll_amp_deg.to_radians());
        let tx = chan(spec.trans_amp_m);
        let ty = chan(spec.trans_amp_m);
        let tz = chan(spec.trans_amp_m);
        let mut expr = Vec::new();
        let active = 3.min(n_expr);
        for _ in 0..active {
            let j = rng.random_range(0..n_expr);
            let amp = spec.expr_amp;
            let freq = rng.random_range(0.6..1.4);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            expr.push((j, amp, freq, phase));
        }
        Trajectory {
            frames: spec.frames.max(1),
            distance: spec.distance_m,
            channels: TrajectoryChannels { yaw, pitch, roll, tx, ty, tz, expr },
            n_expr,
        }
    }

    pub fn theta(&self, frame: u32) -> (RigidPose, ExpressionWeights) {
        let t = frame as f64 / self.frames as f64;
        let eval = |(amp, freq, phase): (f64, f64, f64)| amp * (std::f64::consts::TAU * freq * t + phase).sin();
        let c = &self.channels;
        let rot = Rotation3::from_euler_angles(eval(c.pitch), eval(c.yaw), eval(c.roll));
        let axis_angle = canonicalize_axis_angle(&rot.scaled_axis());
        let translation = Vector3::new(eval(c.tx), eval(c.ty), self.distance + eval(c.tz));
        let mut e = vec![0.0; self.n_expr];
        for &(j, amp, freq, phase) in &c.expr {
            let v = amp * (0.5 + 0.5 * (std::f64::consts::TAU * freq * t + phase).sin());
            e[j] = (e[j] + v).clamp(0.0, 1.0);
        }
        (
            RigidPose { rotation: axis_angle, translation },
            ExpressionWeights::clamped(e),
        )
    }
}

/// Everything a sequence on disk is generated from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub rig: RigConfig,
    pub camera: CameraIntrinsics,
    pub sequence: SequenceSpec,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            rig: RigConfig::default(),
            camera: CameraIntrinsics::default_vga(),
            sequence: SequenceSpec::default(),
        }
    }
}

pub struct SequenceSummary {
    pub frames: u32,
    pub distance_m: f64,
    /// Axial noise sigma at the nominal distance, mm; zero when noiseless.
    pub axial_sigma_mm: f64,
}

/// Ground truth for one frame.
#[derive(Debug, Clone)]
pub struct TruthFrame {
    pub pose: RigidPose,
    pub expr: ExpressionWeights,
    pub landmarks: Vec<Vector2<f64>>,
}

pub fn color_frame_name(index: u32) -> String {
    format!("frame_{index:05}.ppm")
}

pub fn depth_frame_name(index: u32) -> String {
    format!("frame_{index:05}.pgm16")
}

/// Writes the full sequence directory: rig files, intrinsics, color and
/// depth frames, `truth.csv` and the `seq.toml` summary.
pub fn write_sequence(dir: &Path, cfg: &SequenceConfig) -> Result<SequenceSummary> {
    cfg.camera.validate()?;
    std::fs::create_dir_all(dir)?;
    let rig = gen_rig(&cfg.rig)?;
    rig.tensor.save(&dir.join("tensor.btct"))?;
    rig.topology.save_triangles(&dir.join("topology.txt"))?;
    rig.topology.save_landmarks(&dir.join("landmarks.txt"))?;
    cfg.camera.save(&dir.join("intrinsics.txt"))?;
    let toml_text = toml::to_string(cfg).map_err(|e| Error::Config(format!("seq.toml: {e}")))?;
    std::fs::write(dir.join("seq.toml"), toml_text)?;

    let spec = &cfg.sequence;
    let w_id = spec.identity_vector(cfg.rig.n_identities)?;
    let trajectory = Trajectory::new(spec, cfg.rig.n_expressions - 1);
    let lighting = Lighting::default();

    let frames: Result<Vec<TruthFrame>> = (0..spec.frames)
        .into_par_iter()
        .map(|f| {
            let (pose, expr) = trajectory.theta(f);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(f as u64 + 1);
            let frame = render_rgbd(
                &rig,
                &w_id,
                &pose,
                &expr,
                &cfg.camera,
                &lighting,
                spec.noise.as_ref(),
                &mut rng,
            )?;
            frame.color.save_ppm(&dir.join(color_frame_name(f)))?;
            frame.depth.save_pgm16(&dir.join(depth_frame_name(f)))?;
            Ok(TruthFrame { pose, expr, landmarks: frame.truth_landmarks })
        })
        .collect();
    let frames = frames?;
    write_truth_csv(&dir.join("truth.csv"), &frames)?;

    Ok(SequenceSummary {
        frames: spec.frames,
        distance_m: spec.distance_m,
        axial_sigma_mm: spec
            .noise
            .map(|n| n.axial_sigma_mm(spec.distance_m))
            .unwrap_or(0.0),
    })
}

fn write_truth_csv(path: &Path, frames: &[TruthFrame]) -> Result<()> {
    let mut s = String::new();
    if let Some(first) = frames.first() {
        s.push_str("frame,rx,ry,rz,tx,ty,tz");
        for j in 0..first.expr.len() {
            s.push_str(&format!(",e{j}"));
        }
        for i in 0..first.landmarks.len() {
            s.push_str(&format!(",l{i}u,l{i}v"));
        }
        s.push('\n');
    }
    for (f, row) in frames.iter().enumerate() {
        s.push_str(&f.to_string());
        for v in row.pose.rotation.iter().chain(row.pose.translation.iter()) {
            s.push_str(&format!(",{v}"));
        }
        for v in row.expr.as_slice() {
            s.push_str(&format!(",{v}"));
        }
        for l in &row.landmarks {
            s.push_str(&format!(",{},{}", l.x, l.y));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_truth_csv(path: &Path, n_expr: usize, n_landmarks: usize) -> Result<Vec<TruthFrame>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("truth.csv line {}: bad number {t:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        let expect = 1 + 6 + n_expr + 2 * n_landmarks;
        if fields.len() != expect {
            return Err(Error::Format(format!(
                "truth.csv line {}: {} fields, expected {expect}",
                lineno + 1,
                fields.len()
            )));
        }
        let pose = RigidPose::new(
            Vector3::new(fields[1], fields[2], fields[3]),
            Vector3::new(fields[4], fields[5], fields[6]),
        )?;
        let expr = ExpressionWeights::clamped(fields[7..7 + n_expr].to_vec());
        let mut landmarks = Vec::with_capacity(n_landmarks);
        for i in 0..n_landmarks {
            let b = 7 + n_expr + 2 * i;
            landmarks.push(Vector2::new(fields[b], fields[b + 1]));
        }
        out.push(TruthFrame { pose, expr, landmarks });
    }
    Ok(out)
}

/// A sequence directory opened for tracking or evaluation. Frames load
/// lazily; the rig tensor and topology come from the directory itself.
pub struct LoadedSequence {
    pub dir: PathBuf,
    pub config: SequenceConfig,
    pub tensor: ReducedCoreTensor,
    pub topology: Arc<MeshTopology>,
    pub camera: CameraIntrinsics,
    pub truth: Vec<TruthFrame>,
}

impl LoadedSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let toml_text = std::fs::read_to_string(dir.join("seq.toml"))?;
        let config: SequenceConfig =
            toml::from_str(&toml_text).map_err(|e| Error::Config(format!("seq.toml: {e}")))?;
        let tensor = ReducedCoreTensor::load(&dir.join("tensor.btct"))?;
        let topology = Arc::new(MeshTopology::load(
            &dir.join("topology.txt"),
            &dir.join("landmarks.txt"),
            tensor.n_vertices(),
        )?);
        let camera = CameraIntrinsics::load(&dir.join("intrinsics.txt"))?;
        let truth = read_truth_csv(
            &dir.join("truth.csv"),
            config.rig.n_expressions - 1,
            config.rig.n_landmarks,
        )?;
        Ok(LoadedSequence { dir: dir.to_path_buf(), config, tensor, topology, camera, truth })
    }

    pub fn n_frames(&self) -> u32 {
        self.truth.len() as u32
    }

    pub fn color(&self, frame: u32) -> Result<RgbImage> {
        RgbImage::load_ppm(&self.dir.join(color_frame_name(frame)))
    }

    pub fn depth(&self, frame: u32) -> Result<DepthMap> {
        DepthMap::load_pgm16(&self.dir.join(depth_frame_name(frame)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_blendshapes;

    fn small_rig_cfg(seed: u64) -> RigConfig {
        RigConfig { rows: 12, cols: 16, n_identities: 4, n_expressions: 6, n_landmarks: 10, seed }
    }

    #[test]
    fn one_hot_contraction_reproduces_truth_meshes() {
        let rig = gen_rig(&small_rig_cfg(3)).unwrap();
        for i in 0..4 {
            let w = IdentityVector::one_hot(4, i);
            let shapes = build_blendshapes(&rig.tensor, &w, rig.topology.clone()).unwrap();
            for j in 0..6 {
                let truth = rig.truth_mesh(i, j);
                for (p, q) in shapes.shapes[j].iter().zip(truth.iter()) {
                    assert!((p - q).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rig_generation_is_deterministic() {
        let a = gen_rig(&small_rig_cfg(5)).unwrap();
        let b = gen_rig(&small_rig_cfg(5)).unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.topology.triangles, b.topology.triangles);
        assert_eq!(a.albedo, b.albedo);
        let c = gen_rig(&small_rig_cfg(6)).unwrap();
        assert_ne!(a.tensor, c.tensor);
    }

    #[test]
    fn triangles_are_nondegenerate_across_seeds() {
        for seed in 0..20 {
            let rig = gen_rig(&small_rig_cfg(seed)).unwrap();
            for i in 0..rig.config.n_identities {
                let mesh = rig.truth_mesh(i, 0);
                for t in &rig.topology.triangles {
                    let (a, b, c) = (t[0] as usize, t[1] as usize, t[2] as usize);
                    let area = 0.5 * (mesh[b] - mesh[a]).cross(&(mesh[c] - mesh[a])).norm();
                    assert!(area > 1e-10, "seed {seed}: degenerate triangle area {area}");
                }
            }
        }
    }

    #[test]
    fn noiseless_render_matches_prior_depth_renderer() {
        let rig = gen_rig(&small_rig_cfg(9)).unwrap();
        let camera = CameraIntrinsics::default_vga();
        let w = IdentityVector::one_hot(4, 1);
        let e = ExpressionWeights::clamped(vec![0.3, 0.0, 0.5, 0.0, 0.1]);
        let pose = RigidPose::new(Vector3::new(0.1, 0.2, 0.05), Vector3::new(0.01, -0.02, 1.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = render_rgbd(&rig, &w, &pose, &e, &camera, &Lighting::default(), None, &mut rng).unwrap();
        let mesh = rig.mesh(&w, &e).unwrap();
        let posed = crate::model::transform(&mesh, &pose);
        let prior = crate::raster::render_prior_depth(&posed, &rig.topology, &camera);
        assert_eq!(frame.clean_depth.values, prior.values);
        assert_eq!(frame.depth.values, prior.values);
    }

    #[test]
    fn axial_noise_scales_quadratically_and_matches_statistics() {
        let model = NoiseModel {
            lateral_sigma_px: 0.0,
            quant_mm_per_m2: 0.0,
            dropout_prob: 0.0,
            ..Default::default()
        };
        assert!((model.axial_sigma_mm(2.0) - 4.0 * model.axial_sigma_mm(1.0)).abs() < 1e-12);
        assert!((model.axial_sigma_mm(2.0) - 5.7).abs() < 1e-9);

        // Empirical sigma over a flat wall at 2 m within 5%.
        let camera = CameraIntrinsics::default_vga();
        let mut clean = DepthMap::new(200, 100);
        clean.values.fill(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noisy = apply_sensor_noise(&clean, &camera, &model, &mut rng);
        let diffs: Vec<f64> = noisy
            .values
            .iter()
            .zip(clean.values.iter())
            .filter(|(n, _)| **n > 0.0)
            .map(|(n, c)| (n - c) * 1000.0)
            .collect();
        assert!(diffs.len() > 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let sigma = var.sqrt();
        let want = model.axial_sigma_mm(2.0);
        assert!(
            (sigma - want).abs() / want < 0.05,
            "empirical sigma {sigma} vs configured {want}"
        );
    }

    #[test]
    fn sequence_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SequenceConfig {
            rig: small_rig_cfg(4),
            camera: CameraIntrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240).unwrap(),
            sequence: SequenceSpec { frames: 3, distance_m: 1.0, seed: 13, ..Default::default() },
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_sequence(&a, &cfg).unwrap();
        write_sequence(&b, &cfg).unwrap();
        for name in ["tensor.btct", "truth.csv", "seq.toml", "frame_00000.ppm", "frame_00002.pgm16"] {
            let fa = std::fs::read(a.join(name)).unwrap();
            let fb = std::fs::read(b.join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs between identical runs");
        }
        let seq = LoadedSequence::open(&a).unwrap();
        assert_eq!(seq.n_frames(), 3);
        assert_eq!(seq.truth[0].landmarks.len(), 10);
        let img = seq.color(0).unwrap();
        assert_eq!((img.width, img.height), (320, 240));
        let d = seq.depth(2).unwrap();
        assert!(d.valid_count() > 100);
    }

    #[test]
    fn truth_landmarks_match_reprojection_of_truth_theta() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SequenceConfig {
            rig: small_rig_cfg(4),
            camera: CameraIntrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240).unwrap(),
            sequence: SequenceSpec { frames: 2, distance_m: 1.0, seed: 21, noise: None, ..Default::default() },
        };
        let p = dir.path().join("seq");
        write_sequence(&p, &cfg).unwrap();
        let seq = LoadedSequence::open(&p).unwrap();
        let rig = gen_rig(&cfg.rig).unwrap();
        let w = cfg.sequence.identity_vector(cfg.rig.n_identities).unwrap();
        for truth in &seq.truth {
            let mesh = rig.mesh(&w, &truth.expr).unwrap();
            let posed = crate::model::transform(&mesh, &truth.pose);
            for (k, &lv) in rig.topology.landmark_vertices.iter().enumerate() {
                let proj = seq.camera.project(&posed[lv as usize]).unwrap();
                assert!((proj - truth.landmarks[k]).norm() < 1e-9);
            }
        }
    }
}
