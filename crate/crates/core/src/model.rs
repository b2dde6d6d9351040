//! The multilinear blendshape face representation: reduced core tensor,
//! per-subject expression blendshapes, linear blending, rigid transform and
//! landmark projection.
//!
//! All types are immutable after construction and the operations are pure,
//! so everything here can be shared freely across threads.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::math::{canonicalize_axis_angle, rotation_matrix};

/// 3-mode tensor of shape `(3*n_vertices, n_identities, n_expressions)`
/// together with the pre-computed expression-mode weight vectors.
///
/// Data is stored vertex-major: entry `(row, i, j)` lives at
/// `(row * n_identities + i) * n_expressions + j`, where rows `3k..3k+3`
/// are the x, y, z coordinates of vertex `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCoreTensor {
    data: Vec<f64>,
    n_vertices: usize,
    n_identities: usize,
    n_expressions: usize,
    /// `exp_basis[j]` is the weight vector of the j-th expression mode;
    /// index 0 is the neutral expression.
    exp_basis: Vec<Vec<f64>>,
}

impl ReducedCoreTensor {
    pub fn new(
        data: Vec<f64>,
        n_vertices: usize,
        n_identities: usize,
        n_expressions: usize,
        exp_basis: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if n_vertices == 0 || n_identities == 0 || n_expressions == 0 {
            return Err(Error::DimensionMismatch("tensor dims must all be >= 1".into()));
        }
        let expect = 3 * n_vertices * n_identities * n_expressions;
        if data.len() != expect {
            return Err(Error::DimensionMismatch(format!(
                "tensor data has {} entries, expected {}",
                data.len(),
                expect
            )));
        }
        if exp_basis.len() != n_expressions || exp_basis.iter().any(|u| u.len() != n_expressions) {
            return Err(Error::DimensionMismatch(format!(
                "exp_basis must be {n_expressions} vectors of length {n_expressions}"
            )));
        }
        Ok(ReducedCoreTensor { data, n_vertices, n_identities, n_expressions, exp_basis })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn n_expressions(&self) -> usize {
        self.n_expressions
    }

    pub fn exp_basis(&self) -> &[Vec<f64>] {
        &self.exp_basis
    }

    #[inline]
    pub fn value(&self, row: usize, identity: usize, expression: usize) -> f64 {
        self.data[(row * self.n_identities + identity) * self.n_expressions + expression]
    }

    fn check_weights(&self, w_id: &IdentityVector, w_exp: &[f64]) -> Result<()> {
        if w_id.len() != self.n_identities {
            return Err(Error::DimensionMismatch(format!(
                "identity vector has {} entries, tensor expects {}",
                w_id.len(),
                self.n_identities
            )));
        }
        if w_exp.len() != self.n_expressions {
            return Err(Error::DimensionMismatch(format!(
                "expression vector has {} entries, tensor expects {}",
                w_exp.len(),
                self.n_expressions
            )));
        }
        Ok(())
    }

    /// Tensor contraction at the identity mode and the expression mode:
    /// `V[row] = sum_i sum_j C[row, i, j] w_id[i] w_exp[j]`.
    pub fn contract(&self, w_id: &IdentityVector, w_exp: &[f64]) -> Result<Vec<Vector3<f64>>> {
        self.check_weights(w_id, w_exp)?;
        let all: Vec<u32> = (0..self.n_vertices as u32).collect();
        Ok(self.contract_at(w_id, w_exp, &all))
    }

    /// Contraction evaluated only at the listed vertices. Weights must
    /// already be validated against the tensor dimensions.
    pub fn contract_at(&self, w_id: &IdentityVector, w_exp: &[f64], vertices: &[u32]) -> Vec<Vector3<f64>> {
        let ni = self.n_identities;
        let ne = self.n_expressions;
        let mut out = Vec::with_capacity(vertices.len());
        for &v in vertices {
            let mut coords = [0.0f64; 3];
            for (c, coord) in coords.iter_mut().enumerate() {
                let row = 3 * v as usize + c;
                let base = row * ni * ne;
                let mut acc = 0.0;
                for (i, &wi) in w_id.as_slice().iter().enumerate() {
                    if wi == 0.0 {
                        continue;
                    }
                    let slice = &self.data[base + i * ne..base + i * ne + ne];
                    let mut inner = 0.0;
                    for (s, &we) in slice.iter().zip(w_exp.iter()) {
                        inner += s * we;
                    }
                    acc += wi * inner;
                }
                *coord = acc;
            }
            out.push(Vector3::new(coords[0], coords[1], coords[2]));
        }
        out
    }

    /// Identity-mode contraction at the listed vertices, leaving the
    /// expression mode free: returns, per vertex, a `3 x n_expressions`
    /// block `M` with `V = M w_exp`.
    pub fn contract_identity_at(&self, w_id: &IdentityVector, vertices: &[u32]) -> Vec<nalgebra::DMatrix<f64>> {
        let ni = self.n_identities;
        let ne = self.n_expressions;
        let mut out = Vec::with_capacity(vertices.len());
        for &v in vertices {
            let mut m = nalgebra::DMatrix::zeros(3, ne);
            for c in 0..3 {
                let row = 3 * v as usize + c;
                let base = row * ni * ne;
                for (i, &wi) in w_id.as_slice().iter().enumerate() {
                    if wi == 0.0 {
                        continue;
                    }
                    let slice = &self.data[base + i * ne..base + i * ne + ne];
                    for (j, &s) in slice.iter().enumerate() {
                        m[(c, j)] += wi * s;
                    }
                }
            }
            out.push(m);
        }
        out
    }

    /// Expression-mode contraction at the listed vertices, leaving the
    /// identity mode free: per vertex a `3 x n_identities` block `M` with
    /// `V = M w_id`.
    pub fn contract_expression_at(&self, w_exp: &[f64], vertices: &[u32]) -> Vec<nalgebra::DMatrix<f64>> {
        let ni = self.n_identities;
        let ne = self.n_expressions;
        let mut out = Vec::with_capacity(vertices.len());
        for &v in vertices {
            let mut m = nalgebra::DMatrix::zeros(3, ni);
            for c in 0..3 {
                let row = 3 * v as usize + c;
                let base = row * ni * ne;
                for i in 0..ni {
                    let slice = &self.data[base + i * ne..base + i * ne + ne];
                    let mut inner = 0.0;
                    for (s, &we) in slice.iter().zip(w_exp.iter()) {
                        inner += s * we;
                    }
                    m[(c, i)] = inner;
                }
            }
            out.push(m);
        }
        out
    }

    /// Binary tensor file: magic `BTCT`, version, dims, data, exp basis.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"BTCT")?;
        f.write_all(&1u32.to_le_bytes())?;
        for d in [self.n_vertices, self.n_identities, self.n_expressions] {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        for u in &self.exp_basis {
            for v in u {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = crate::io::ByteReader::new(&bytes);
        r.expect_magic(b"BTCT")?;
        let version = r.read_u32()?;
        if version != 1 {
            return Err(Error::Format(format!("tensor file: unsupported version {version}")));
        }
        let nv = r.read_u32()? as usize;
        let ni = r.read_u32()? as usize;
        let ne = r.read_u32()? as usize;
        let n = 3usize
            .checked_mul(nv)
            .and_then(|x| x.checked_mul(ni))
            .and_then(|x| x.checked_mul(ne))
            .ok_or_else(|| Error::Format("tensor file: dims overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64()?);
        }
        let mut exp_basis = Vec::with_capacity(ne);
        for _ in 0..ne {
            let mut u = Vec::with_capacity(ne);
            for _ in 0..ne {
                u.push(r.read_f64()?);
            }
            exp_basis.push(u);
        }
        ReducedCoreTensor::new(data, nv, ni, ne, exp_basis)
    }
}

/// Identity weights over the tensor's identity mode.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityVector(Vec<f64>);

impl IdentityVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("identity vector entries must be finite".into()));
        }
        Ok(IdentityVector(w))
    }

    /// Uniform weights summing to one; the cold-start identity.
    pub fn uniform(n: usize) -> Self {
        IdentityVector(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        IdentityVector(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Expression blend weights `e`, one per non-neutral expression, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionWeights(Vec<f64>);

impl ExpressionWeights {
    pub fn new(e: Vec<f64>) -> Result<Self> {
        if let Some(bad) = e.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("expression weight {bad} outside [0, 1]")));
        }
        Ok(ExpressionWeights(e))
    }

    pub fn zeros(n: usize) -> Self {
        ExpressionWeights(vec![0.0; n])
    }

    /// Clamps each entry into [0, 1].
    pub fn clamped(e: Vec<f64>) -> Self {
        ExpressionWeights(e.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Triangle connectivity plus the landmark-to-vertex correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    pub triangles: Vec<[u32; 3]>,
    pub landmark_vertices: Vec<u32>,
    pub n_vertices: usize,
}

impl MeshTopology {
    pub fn new(triangles: Vec<[u32; 3]>, landmark_vertices: Vec<u32>, n_vertices: usize) -> Result<Self> {
        for t in &triangles {
            if t.iter().any(|&i| i as usize >= n_vertices) {
                return Err(Error::DimensionMismatch(format!(
                    "triangle {t:?} references vertex beyond {n_vertices}"
                )));
            }
        }
        for &l in &landmark_vertices {
            if l as usize >= n_vertices {
                return Err(Error::DimensionMismatch(format!(
                    "landmark vertex {l} beyond {n_vertices}"
                )));
            }
        }
        let mut seen = landmark_vertices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != landmark_vertices.len() {
            return Err(Error::Degenerate("landmark vertices must be distinct".into()));
        }
        Ok(MeshTopology { triangles, landmark_vertices, n_vertices })
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_vertices.len()
    }

    /// Area-weighted vertex normals under the mesh winding convention.
    /// Vertices without incident area get a zero normal.
    pub fn vertex_normals(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); vertices.len()];
        for t in &self.triangles {
            let (a, b, c) = (t[0] as usize, t[1] as usize, t[2] as usize);
            let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
            normals[a] += n;
            normals[b] += n;
            normals[c] += n;
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-18 {
                *n /= len;
            }
        }
        normals
    }

    /// Text form: one `i0 i1 i2` triangle per line.
    pub fn save_triangles(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.triangles {
            s.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Text form: one landmark vertex index per line.
    pub fn save_landmarks(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for &l in &self.landmark_vertices {
            s.push_str(&format!("{l}\n"));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(triangles_path: &Path, landmarks_path: &Path, n_vertices: usize) -> Result<Self> {
        let mut triangles = Vec::new();
        for (lineno, raw) in std::fs::read_to_string(triangles_path)?.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::Format(format!("topology line {}: bad index {t:?}", lineno + 1)))
            });
            let a = it.next().ok_or_else(|| Error::Format("topology: short line".into()))??;
            let b = it.next().ok_or_else(|| Error::Format("topology: short line".into()))??;
            let c = it.next().ok_or_else(|| Error::Format("topology: short line".into()))??;
            if it.next().is_some() {
                return Err(Error::Format(format!("topology line {}: extra tokens", lineno + 1)));
            }
            triangles.push([a, b, c]);
        }
        let mut landmark_vertices = Vec::new();
        for (lineno, raw) in std::fs::read_to_string(landmarks_path)?.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            landmark_vertices.push(line.parse::<u32>().map_err(|_| {
                Error::Format(format!("landmarks line {}: bad index {line:?}", lineno + 1))
            })?);
        }
        MeshTopology::new(triangles, landmark_vertices, n_vertices)
    }
}

/// Per-subject expression blendshapes: `shapes[0]` is the neutral shape.
#[derive(Debug, Clone)]
pub struct BlendshapeSet {
    pub shapes: Vec<Vec<Vector3<f64>>>,
    pub topology: Arc<MeshTopology>,
}

impl BlendshapeSet {
    pub fn n_vertices(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn n_expressions(&self) -> usize {
        self.shapes.len()
    }

    pub fn neutral(&self) -> &[Vector3<f64>] {
        &self.shapes[0]
    }

    /// Linear blend `V = B0 + sum_j (Bj - B0) e_j`.
    pub fn blend(&self, e: &ExpressionWeights) -> Result<Vec<Vector3<f64>>> {
        self.check_expr(e)?;
        let b0 = &self.shapes[0];
        let mut out = b0.clone();
        for (j, &ej) in e.as_slice().iter().enumerate() {
            if ej == 0.0 {
                continue;
            }
            let bj = &self.shapes[j + 1];
            for (o, (bjv, b0v)) in out.iter_mut().zip(bj.iter().zip(b0.iter())) {
                *o += (bjv - b0v) * ej;
            }
        }
        Ok(out)
    }

    /// Blend evaluated only at the listed vertices.
    pub fn blend_at(&self, e: &ExpressionWeights, vertices: &[u32]) -> Result<Vec<Vector3<f64>>> {
        self.check_expr(e)?;
        let b0 = &self.shapes[0];
        let mut out: Vec<Vector3<f64>> = vertices.iter().map(|&v| b0[v as usize]).collect();
        for (j, &ej) in e.as_slice().iter().enumerate() {
            if ej == 0.0 {
                continue;
            }
            let bj = &self.shapes[j + 1];
            for (o, &v) in out.iter_mut().zip(vertices.iter()) {
                *o += (bj[v as usize] - b0[v as usize]) * ej;
            }
        }
        Ok(out)
    }

    /// Delta shapes `Bj - B0` at the listed vertices, the blend derivative
    /// with respect to `e_j`.
    pub fn deltas_at(&self, vertices: &[u32]) -> Vec<Vec<Vector3<f64>>> {
        let b0 = &self.shapes[0];
        (1..self.shapes.len())
            .map(|j| {
                vertices
                    .iter()
                    .map(|&v| self.shapes[j][v as usize] - b0[v as usize])
                    .collect()
            })
            .collect()
    }

    fn check_expr(&self, e: &ExpressionWeights) -> Result<()> {
        if e.len() != self.shapes.len() - 1 {
            return Err(Error::DimensionMismatch(format!(
                "expression weights have {} entries, blendshapes expect {}",
                e.len(),
                self.shapes.len() - 1
            )));
        }
        Ok(())
    }
}

/// Builds the subject's expression blendshapes `Bj` by contracting the
/// tensor with `w_id` and each expression-mode weight vector.
pub fn build_blendshapes(
    tensor: &ReducedCoreTensor,
    w_id: &IdentityVector,
    topology: Arc<MeshTopology>,
) -> Result<BlendshapeSet> {
    if w_id.len() != tensor.n_identities() {
        return Err(Error::DimensionMismatch(format!(
            "identity vector has {} entries, tensor expects {}",
            w_id.len(),
            tensor.n_identities()
        )));
    }
    if topology.n_vertices != tensor.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "topology covers {} vertices, tensor has {}",
            topology.n_vertices,
            tensor.n_vertices()
        )));
    }
    let all: Vec<u32> = (0..tensor.n_vertices() as u32).collect();
    let blocks = tensor.contract_identity_at(w_id, &all);
    let ne = tensor.n_expressions();
    let mut shapes = Vec::with_capacity(ne);
    for u in tensor.exp_basis() {
        let shape: Vec<Vector3<f64>> = blocks
            .iter()
            .map(|m| {
                let mut p = Vector3::zeros();
                for (j, &uj) in u.iter().enumerate() {
                    if uj != 0.0 {
                        p += Vector3::new(m[(0, j)], m[(1, j)], m[(2, j)]) * uj;
                    }
                }
                p
            })
            .collect();
        shapes.push(shape);
    }
    Ok(BlendshapeSet { shapes, topology })
}

/// Global rigid pose: axis-angle rotation (radians) and translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if translation.z <= 0.0 {
            return Err(Error::OutOfRange(format!(
                "subject must be in front of the camera (tz = {})",
                translation.z
            )));
        }
        Ok(RigidPose { rotation: canonicalize_axis_angle(&rotation), translation })
    }

    pub fn identity_at(translation: Vector3<f64>) -> Result<Self> {
        RigidPose::new(Vector3::zeros(), translation)
    }

    pub fn rotation_matrix(&self) -> nalgebra::Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }
}

/// Applies `S = R V + T` per vertex.
pub fn transform(vertices: &[Vector3<f64>], pose: &RigidPose) -> Vec<Vector3<f64>> {
    let r = pose.rotation_matrix();
    vertices.iter().map(|v| r * v + pose.translation).collect()
}

/// The full regressed parameter set `P = (R, T, e, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub pose: RigidPose,
    pub expr: ExpressionWeights,
    /// Per-landmark 2D displacements in pixels, `D_i = proj(S_i) - l_i`.
    pub displacements: Vec<Vector2<f64>>,
}

impl ShapeParams {
    pub fn new(pose: RigidPose, expr: ExpressionWeights, displacements: Vec<Vector2<f64>>) -> Self {
        ShapeParams { pose, expr, displacements }
    }

    pub fn rest(n_expr: usize, n_landmarks: usize, translation: Vector3<f64>) -> Result<Self> {
        Ok(ShapeParams {
            pose: RigidPose::identity_at(translation)?,
            expr: ExpressionWeights::zeros(n_expr),
            displacements: vec![Vector2::zeros(); n_landmarks],
        })
    }

    pub fn n_landmarks(&self) -> usize {
        self.displacements.len()
    }

    /// Parameter dimension `6 + (n_e - 1) + 2 n_l`.
    pub fn dim(n_expr: usize, n_landmarks: usize) -> usize {
        6 + n_expr + 2 * n_landmarks
    }

    /// Flattens to `[rot(3), trans(3), e, D(u, v per landmark)]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::dim(self.expr.len(), self.displacements.len()));
        v.extend_from_slice(self.pose.rotation.as_slice());
        v.extend_from_slice(self.pose.translation.as_slice());
        v.extend_from_slice(self.expr.as_slice());
        for d in &self.displacements {
            v.push(d.x);
            v.push(d.y);
        }
        v
    }

    /// Inverse of [`ShapeParams::to_vector`]. Expression weights are clamped
    /// into bounds; rotation is canonicalized.
    pub fn from_vector(v: &[f64], n_expr: usize, n_landmarks: usize) -> Result<Self> {
        if v.len() != Self::dim(n_expr, n_landmarks) {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                v.len(),
                Self::dim(n_expr, n_landmarks)
            )));
        }
        let pose = RigidPose::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )?;
        let expr = ExpressionWeights::clamped(v[6..6 + n_expr].to_vec());
        let mut displacements = Vec::with_capacity(n_landmarks);
        for i in 0..n_landmarks {
            let b = 6 + n_expr + 2 * i;
            displacements.push(Vector2::new(v[b], v[b + 1]));
        }
        Ok(ShapeParams { pose, expr, displacements })
    }
}

/// Projected landmark positions `l_i = proj(S_i(R, T, e)) - D_i`.
pub fn landmark_positions_2d(
    shapes: &BlendshapeSet,
    params: &ShapeParams,
    camera: &CameraIntrinsics,
) -> Result<Vec<Vector2<f64>>> {
    let lm = &shapes.topology.landmark_vertices;
    if params.displacements.len() != lm.len() {
        return Err(Error::DimensionMismatch(format!(
            "params carry {} displacements, topology has {} landmarks",
            params.displacements.len(),
            lm.len()
        )));
    }
    let local = shapes.blend_at(&params.expr, lm)?;
    let posed = transform(&local, &params.pose);
    let mut out = Vec::with_capacity(lm.len());
    for (p, d) in posed.iter().zip(params.displacements.iter()) {
        out.push(camera.project(p)? - d);
    }
    Ok(out)
}
