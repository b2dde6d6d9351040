//! Shape-parameter recovery from landmark-annotated images and guess-truth
//! pair generation for regressor training.
//!
//! The projective depth/size ambiguity of a bilinear face model under a
//! single camera is broken by fitting in an affine chart: identity weights
//! are constrained to sum to one and the expression-mode vector is
//! restricted to the affine hull of the expression basis. The synthetic rig
//! stores its ground truth in exactly this normalization.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::math::rotate_point_jacobian;
use crate::model::{
    BlendshapeSet, ExpressionWeights, IdentityVector, MeshTopology, ReducedCoreTensor, RigidPose,
    ShapeParams,
};
use crate::solver::{minimize, GaussNewtonOptions};

/// One landmark-annotated image of a subject.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Arc<RgbImage>,
    pub image_path: Option<PathBuf>,
    pub landmarks: Vec<Vector2<f64>>,
    pub subject_id: String,
    /// Some landmarks fall outside the image; tolerated but flagged.
    pub out_of_bounds: bool,
}

impl TrainingSample {
    pub fn new(
        image: Arc<RgbImage>,
        image_path: Option<PathBuf>,
        landmarks: Vec<Vector2<f64>>,
        subject_id: impl Into<String>,
    ) -> Self {
        let (w, h) = (image.width as f64, image.height as f64);
        let out_of_bounds = landmarks
            .iter()
            .any(|l| l.x < 0.0 || l.y < 0.0 || l.x >= w || l.y >= h);
        TrainingSample { image, image_path, landmarks, subject_id: subject_id.into(), out_of_bounds }
    }
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    /// Reprojection RMSE at the solution, pixels.
    pub rmse_px: f64,
    pub converged: bool,
    pub rank_deficient: bool,
    /// Final value of the squared-error objective.
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SampleFit {
    pub pose: RigidPose,
    pub w_id: IdentityVector,
    /// Expression-mode weights (the discarded `w_exp` of the first stage).
    pub w_exp: Vec<f64>,
    /// Coordinates of `w_exp` in the affine expression chart.
    pub expr_coords: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

// --- affine charts -------------------------------------------------------

fn widen_identity(a: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(a.len() + 1);
    w.push(1.0 - a.iter().sum::<f64>());
    w.extend_from_slice(a);
    w
}

fn reduce_identity(w: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = w.iter().sum();
    if s.abs() < 1e-12 {
        return Err(Error::Degenerate("identity weights sum to zero".into()));
    }
    Ok(w[1..].iter().map(|v| v / s).collect())
}

fn gamma_from_coords(c: &[f64], exp_basis: &[Vec<f64>]) -> Vec<f64> {
    let ne = exp_basis.len();
    let mut gamma = vec![0.0; ne];
    let csum: f64 = c.iter().sum();
    for (g, u0) in gamma.iter_mut().zip(exp_basis[0].iter()) {
        *g = (1.0 - csum) * u0;
    }
    for (j, &cj) in c.iter().enumerate() {
        for (g, uj) in gamma.iter_mut().zip(exp_basis[j + 1].iter()) {
            *g += cj * uj;
        }
    }
    gamma
}

// --- the Eq. 5 family of problems ---------------------------------------

/// Which parameter blocks the landmark-reprojection fit optimizes.
struct FitLayout {
    free_identity: bool,
    free_expression: bool,
    n_id: usize,
    n_exp: usize,
}

impl FitLayout {
    fn dim(&self) -> usize {
        6 + if self.free_identity { self.n_id - 1 } else { 0 }
            + if self.free_expression { self.n_exp - 1 } else { 0 }
    }
}

struct ReprojectionProblem<'a> {
    tensor: &'a ReducedCoreTensor,
    camera: &'a CameraIntrinsics,
    landmarks: &'a [Vector2<f64>],
    landmark_vertices: &'a [u32],
    layout: FitLayout,
    fixed_identity: Vec<f64>,
    fixed_expr_coords: Vec<f64>,
}

impl ReprojectionProblem<'_> {
    fn unpack(&self, x: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>, Vec<f64>, Vec<f64>) {
        let rot = Vector3::new(x[0], x[1], x[2]);
        let trans = Vector3::new(x[3], x[4], x[5]);
        let mut k = 6;
        let a = if self.layout.free_identity {
            let v = x.as_slice()[k..k + self.layout.n_id - 1].to_vec();
            k += self.layout.n_id - 1;
            v
        } else {
            Vec::new()
        };
        let c = if self.layout.free_expression {
            x.as_slice()[k..k + self.layout.n_exp - 1].to_vec()
        } else {
            self.fixed_expr_coords.clone()
        };
        let w_id = if self.layout.free_identity { widen_identity(&a) } else { self.fixed_identity.clone() };
        (rot, trans, w_id, c)
    }

    fn eval(&self, x: &DVector<f64>, want_jac: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let (rot, trans, w_id, c) = self.unpack(x);
        let gamma = gamma_from_coords(&c, self.tensor.exp_basis());
        let w = IdentityVector::new(w_id.clone()).expect("finite weights");
        let local = self.tensor.contract_at(&w, &gamma, self.landmark_vertices);
        let r_mat = crate::math::rotation_matrix(&rot);
        let nl = self.landmarks.len();
        let mut residual = DVector::zeros(2 * nl);
        let mut jac = want_jac.then(|| DMatrix::zeros(2 * nl, self.layout.dim()));

        // Expression-mode blocks per landmark, only when needed.
        let id_blocks = (want_jac && self.layout.free_identity)
            .then(|| self.tensor.contract_expression_at(&gamma, self.landmark_vertices));
        let exp_blocks = (want_jac && self.layout.free_expression)
            .then(|| self.tensor.contract_identity_at(&w, self.landmark_vertices));

        for (i, v_local) in local.iter().enumerate() {
            let s = r_mat * v_local + trans;
            if s.z <= 1e-9 {
                residual[2 * i] = 1e4;
                residual[2 * i + 1] = 1e4;
                continue;
            }
            let proj = self.camera.project_unchecked(&s);
            residual[2 * i] = proj.x - self.landmarks[i].x;
            residual[2 * i + 1] = proj.y - self.landmarks[i].y;
            if let Some(jm) = jac.as_mut() {
                let jp = self.camera.project_jacobian(&s);
                let jrot = jp * rotate_point_jacobian(&rot, v_local);
                for row in 0..2 {
                    for col in 0..3 {
                        jm[(2 * i + row, col)] = jrot[(row, col)];
                        jm[(2 * i + row, 3 + col)] = jp[(row, col)];
                    }
                }
                let mut k = 6;
                if let Some(blocks) = id_blocks.as_ref() {
                    let m = &blocks[i];
                    let col0 = Vector3::new(m[(0, 0)], m[(1, 0)], m[(2, 0)]);
                    for q in 1..self.layout.n_id {
                        let colq = Vector3::new(m[(0, q)], m[(1, q)], m[(2, q)]);
                        let dv = jp * (r_mat * (colq - col0));
                        jm[(2 * i, k)] = dv.x;
                        jm[(2 * i + 1, k)] = dv.y;
                        k += 1;
                    }
                }
                if let Some(blocks) = exp_blocks.as_ref() {
                    let m = &blocks[i];
                    let basis = self.tensor.exp_basis();
                    for j in 1..self.layout.n_exp {
                        let mut du = Vector3::zeros();
                        for q in 0..self.layout.n_exp {
                            let coeff = basis[j][q] - basis[0][q];
                            if coeff != 0.0 {
                                du += Vector3::new(m[(0, q)], m[(1, q)], m[(2, q)]) * coeff;
                            }
                        }
                        let dv = jp * (r_mat * du);
                        jm[(2 * i, k)] = dv.x;
                        jm[(2 * i + 1, k)] = dv.y;
                        k += 1;
                    }
                }
            }
        }
        (residual, jac)
    }
}

/// Degenerate observed geometry: all landmarks close to a line.
fn landmarks_collinear(landmarks: &[Vector2<f64>]) -> bool {
    let n = landmarks.len() as f64;
    let mean = landmarks.iter().fold(Vector2::zeros(), |a, l| a + l) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for l in landmarks {
        let d = l - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let lam_max = tr / 2.0 + disc;
    let lam_min = tr / 2.0 - disc;
    lam_min <= 1e-6 * lam_max.max(1e-12)
}

fn pose_block_rank_deficient(problem: &ReprojectionProblem, x: &DVector<f64>) -> bool {
    let (_, jac) = problem.eval(x, true);
    let jac = jac.unwrap();
    let pose_block = jac.columns(0, 6).into_owned();
    let svd = pose_block.svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    min_sv <= 1e-8 * max_sv.max(1e-12)
}

/// Similarity-alignment bootstrap for the translation: depth from the
/// widest model landmark pair against its observed pixel distance.
fn initial_translation(
    mean_shape: &[Vector3<f64>],
    landmarks: &[Vector2<f64>],
    camera: &CameraIntrinsics,
) -> Vector3<f64> {
    let mut best = (0usize, 1usize, 0.0f64);
    for i in 0..mean_shape.len() {
        for j in i + 1..mean_shape.len() {
            let d = (mean_shape[i] - mean_shape[j]).norm();
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let dpx = (landmarks[best.0] - landmarks[best.1]).norm();
    let z0 = if dpx > 1e-9 { (camera.fx * best.2 / dpx).clamp(0.2, 10.0) } else { 1.0 };
    let n = landmarks.len() as f64;
    let centroid_px = landmarks.iter().fold(Vector2::zeros(), |a, l| a + l) / n;
    let centroid_3d = mean_shape.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut t = camera.backproject(centroid_px.x, centroid_px.y, z0) - centroid_3d;
    if t.z < 0.1 {
        t.z = 0.1;
    }
    t
}

fn run_fit(
    problem: &ReprojectionProblem,
    x0: DVector<f64>,
    max_iterations: usize,
) -> Result<(DVector<f64>, crate::solver::GaussNewtonReport)> {
    let opts = GaussNewtonOptions {
        max_iterations,
        step_tolerance: 1e-12,
        objective_tolerance: 1e-16,
        ..Default::default()
    };
    minimize(x0, |x, want| problem.eval(x, want), &opts)
}

fn landmark_vertices_checked<'t>(
    tensor: &'t ReducedCoreTensor,
    topology: &'t MeshTopology,
) -> Result<&'t [u32]> {
    if topology.n_vertices != tensor.n_vertices() {
        return Err(Error::DimensionMismatch("topology does not match tensor".into()));
    }
    Ok(&topology.landmark_vertices)
}

/// Tensor, topology and camera bundled so the fitting entry points stay
/// readable; all fits of one training run share one context.
pub struct FitContext<'a> {
    pub tensor: &'a ReducedCoreTensor,
    pub topology: &'a MeshTopology,
    pub camera: &'a CameraIntrinsics,
}

impl FitContext<'_> {
    /// Eq. 5: joint `(R, T, w_id, w_exp)` from one sample.
    pub fn fit_sample(&self, sample: &TrainingSample, init: Option<&SampleFit>) -> Result<SampleFit> {
        self.fit_impl(sample, init, None)
    }

    /// Eq. 5 restricted: `(R, T, w_exp)` with `w_id` frozen.
    pub fn fit_sample_fixed_identity(
        &self,
        sample: &TrainingSample,
        w_id: &IdentityVector,
        init: Option<&SampleFit>,
    ) -> Result<SampleFit> {
        self.fit_impl(sample, init, Some(w_id))
    }

    fn fit_impl(
        &self,
        sample: &TrainingSample,
        init: Option<&SampleFit>,
        fixed_identity: Option<&IdentityVector>,
    ) -> Result<SampleFit> {
        let tensor = self.tensor;
        let camera = self.camera;
        let landmark_vertices = landmark_vertices_checked(tensor, self.topology)?;
        let nl = sample.landmarks.len();
        if nl != landmark_vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "sample has {nl} landmarks, topology expects {}",
                landmark_vertices.len()
            )));
        }
        if nl < 6 {
            return Err(Error::Degenerate(format!(
                "need at least 6 landmarks to constrain the fit, got {nl}"
            )));
        }
        let n_id = tensor.n_identities();
        let n_exp = tensor.n_expressions();

        let (a0, c0, pose0) = match init {
            Some(prev) => (
                reduce_identity(prev.w_id.as_slice())?,
                prev.expr_coords.clone(),
                prev.pose,
            ),
            None => {
                let a0 = vec![1.0 / n_id as f64; n_id - 1];
                let c0 = vec![1.0 / n_exp as f64; n_exp - 1];
                let gamma0 = gamma_from_coords(&c0, tensor.exp_basis());
                let w0 = IdentityVector::new(widen_identity(&a0))?;
                let mean_shape = tensor.contract_at(&w0, &gamma0, landmark_vertices);
                let t0 = initial_translation(&mean_shape, &sample.landmarks, camera);
                let pose0 = RigidPose::new(Vector3::zeros(), t0)?;

                // Pose-only bootstrap on the mean shape.
                let bootstrap = ReprojectionProblem {
                    tensor,
                    camera,
                    landmarks: &sample.landmarks,
                    landmark_vertices,
                    layout: FitLayout { free_identity: false, free_expression: false, n_id, n_exp },
                    fixed_identity: w0.as_slice().to_vec(),
                    fixed_expr_coords: c0.clone(),
                };
                let mut x0 = DVector::zeros(6);
                x0.rows_mut(0, 3).copy_from(&pose0.rotation);
                x0.rows_mut(3, 3).copy_from(&pose0.translation);
                let (xp, _) = run_fit(&bootstrap, x0, 60)?;
                let pose0 = RigidPose::new(
                    Vector3::new(xp[0], xp[1], xp[2]),
                    Vector3::new(xp[3], xp[4], xp[5].max(0.05)),
                )?;
                (a0, c0, pose0)
            }
        };

        let free_identity = fixed_identity.is_none();
        let fixed_w = match fixed_identity {
            Some(w) => {
                if w.len() != n_id {
                    return Err(Error::DimensionMismatch("fixed identity length".into()));
                }
                w.as_slice().to_vec()
            }
            None => widen_identity(&a0),
        };
        let problem = ReprojectionProblem {
            tensor,
            camera,
            landmarks: &sample.landmarks,
            landmark_vertices,
            layout: FitLayout { free_identity, free_expression: true, n_id, n_exp },
            fixed_identity: fixed_w.clone(),
            fixed_expr_coords: c0.clone(),
        };
        let mut x0 = DVector::zeros(problem.layout.dim());
        x0.rows_mut(0, 3).copy_from(&pose0.rotation);
        x0.rows_mut(3, 3).copy_from(&pose0.translation);
        let mut k = 6;
        if free_identity {
            for (i, v) in a0.iter().enumerate() {
                x0[k + i] = *v;
            }
            k += n_id - 1;
        }
        for (j, v) in c0.iter().enumerate() {
            x0[k + j] = *v;
        }

        let (x, report) = run_fit(&problem, x0, 120)?;
        let (rot, trans, w_id, c) = problem.unpack(&x);
        let gamma = gamma_from_coords(&c, tensor.exp_basis());
        let rank_deficient =
            landmarks_collinear(&sample.landmarks) || pose_block_rank_deficient(&problem, &x);
        Ok(SampleFit {
            pose: RigidPose::new(rot, trans)?,
            w_id: IdentityVector::new(w_id)?,
            w_exp: gamma,
            expr_coords: c,
            diagnostics: FitDiagnostics {
                rmse_px: (report.objective / nl as f64).sqrt(),
                converged: report.converged,
                rank_deficient,
                objective: report.objective,
                iterations: report.iterations,
            },
        })
    }

    /// Eq. 6 alternation: shared identity across all samples of one
    /// subject, re-fitting per-sample pose and expression in between.
    pub fn joint_identity_refinement(
        &self,
        samples: &[TrainingSample],
        outer_iterations: usize,
    ) -> Result<JointIdentityFit> {
        if samples.is_empty() {
            return Err(Error::Config("joint identity refinement needs at least one sample".into()));
        }
        if samples.iter().any(|s| s.subject_id != samples[0].subject_id) {
            return Err(Error::Config("joint identity refinement mixes subjects".into()));
        }
        let tensor = self.tensor;
        let n_id = tensor.n_identities();
        let landmark_vertices = landmark_vertices_checked(tensor, self.topology)?;

        let mut fits: Vec<SampleFit> = samples
            .iter()
            .map(|s| self.fit_sample(s, None))
            .collect::<Result<_>>()?;

        // Shared chart coordinates: mean of the per-sample identities.
        let mut a_shared = vec![0.0f64; n_id - 1];
        for f in &fits {
            let a = reduce_identity(f.w_id.as_slice())?;
            for (s, v) in a_shared.iter_mut().zip(a.iter()) {
                *s += v / fits.len() as f64;
            }
        }

        let total_objective = |a: &[f64], fits: &[SampleFit]| -> f64 {
            let w = IdentityVector::new(widen_identity(a)).expect("finite");
            let mut total = 0.0;
            for (s, f) in samples.iter().zip(fits.iter()) {
                let local = tensor.contract_at(&w, &f.w_exp, landmark_vertices);
                let r = f.pose.rotation_matrix();
                for (i, v) in local.iter().enumerate() {
                    let p = r * v + f.pose.translation;
                    if p.z <= 1e-9 {
                        total += 1e8;
                        continue;
                    }
                    let proj = self.camera.project_unchecked(&p);
                    total += (proj - s.landmarks[i]).norm_squared();
                }
            }
            total
        };

        let mut history = vec![total_objective(&a_shared, &fits)];
        for _ in 0..outer_iterations {
            // (a) shared identity step with poses and expressions fixed.
            a_shared = self.solve_shared_identity(samples, &fits, &a_shared)?;
            // (b) per-sample pose/expression refits at the shared identity.
            let w_shared = IdentityVector::new(widen_identity(&a_shared))?;
            let mut next = Vec::with_capacity(fits.len());
            for (s, f) in samples.iter().zip(fits.iter()) {
                let mut warm = f.clone();
                warm.w_id = w_shared.clone();
                next.push(self.fit_sample_fixed_identity(s, &w_shared, Some(&warm))?);
            }
            fits = next;
            history.push(total_objective(&a_shared, &fits));
        }

        Ok(JointIdentityFit {
            w_id: IdentityVector::new(widen_identity(&a_shared))?,
            objective_history: history,
            per_sample: fits,
        })
    }

    fn solve_shared_identity(
        &self,
        samples: &[TrainingSample],
        fits: &[SampleFit],
        a0: &[f64],
    ) -> Result<Vec<f64>> {
        let tensor = self.tensor;
        let camera = self.camera;
        let landmark_vertices = landmark_vertices_checked(tensor, self.topology)?;
        let n_id = tensor.n_identities();
        let nl = landmark_vertices.len();

        // Per sample, per landmark: 3 x n_id blocks at the fixed w_exp.
        let blocks: Vec<Vec<DMatrix<f64>>> = fits
            .iter()
            .map(|f| tensor.contract_expression_at(&f.w_exp, landmark_vertices))
            .collect();

        let eval = |x: &DVector<f64>, want_jac: bool| {
            let w = widen_identity(x.as_slice());
            let rows = 2 * nl * samples.len();
            let mut residual = DVector::zeros(rows);
            let mut jac = want_jac.then(|| DMatrix::zeros(rows, n_id - 1));
            for (k, (s, f)) in samples.iter().zip(fits.iter()).enumerate() {
                let r_mat = f.pose.rotation_matrix();
                for i in 0..nl {
                    let m = &blocks[k][i];
                    let mut v = Vector3::zeros();
                    for (q, wq) in w.iter().enumerate() {
                        if *wq != 0.0 {
                            v += Vector3::new(m[(0, q)], m[(1, q)], m[(2, q)]) * *wq;
                        }
                    }
                    let p = r_mat * v + f.pose.translation;
                    let row = 2 * (k * nl + i);
                    if p.z <= 1e-9 {
                        residual[row] = 1e4;
                        residual[row + 1] = 1e4;
                        continue;
                    }
                    let proj = camera.project_unchecked(&p);
                    residual[row] = proj.x - s.landmarks[i].x;
                    residual[row + 1] = proj.y - s.landmarks[i].y;
                    if let Some(jm) = jac.as_mut() {
                        let jp = camera.project_jacobian(&p);
                        let col0 = Vector3::new(m[(0, 0)], m[(1, 0)], m[(2, 0)]);
                        for q in 1..n_id {
                            let colq = Vector3::new(m[(0, q)], m[(1, q)], m[(2, q)]);
                            let dv = jp * (r_mat * (colq - col0));
                            jm[(row, q - 1)] = dv.x;
                            jm[(row + 1, q - 1)] = dv.y;
                        }
                    }
                }
            }
            (residual, jac)
        };

        let opts = GaussNewtonOptions { max_iterations: 60, ..Default::default() };
        let (x, _) = minimize(DVector::from_column_slice(a0), eval, &opts)?;
        Ok(x.as_slice().to_vec())
    }

    /// Eq. 7: recovers `(R, T, e)` against the subject's blendshapes with
    /// `e` kept in [0, 1]; the residual displacements `D` are returned in
    /// the resulting parameter set.
    pub fn fit_expression_displacement(
        &self,
        sample: &TrainingSample,
        shapes: &BlendshapeSet,
        init: Option<&ShapeParams>,
    ) -> Result<(ShapeParams, FitDiagnostics)> {
        let camera = self.camera;
        let landmark_vertices = &shapes.topology.landmark_vertices;
        let nl = sample.landmarks.len();
        if nl != landmark_vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "sample has {nl} landmarks, topology expects {}",
                landmark_vertices.len()
            )));
        }
        if nl < 6 {
            return Err(Error::Degenerate(format!(
                "need at least 6 landmarks to constrain the fit, got {nl}"
            )));
        }
        let n_e = shapes.n_expressions() - 1;
        let b0: Vec<Vector3<f64>> = landmark_vertices
            .iter()
            .map(|&v| shapes.neutral()[v as usize])
            .collect();
        let deltas = shapes.deltas_at(landmark_vertices);

        let pose0 = match init {
            Some(p) => p.pose,
            None => {
                let t0 = initial_translation(&b0, &sample.landmarks, camera);
                RigidPose::new(Vector3::zeros(), t0)?
            }
        };
        let e0: Vec<f64> = match init {
            Some(p) => p.expr.as_slice().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            None => vec![0.0; n_e],
        };

        let eval = |x: &DVector<f64>, want_jac: bool| {
            let rot = Vector3::new(x[0], x[1], x[2]);
            let trans = Vector3::new(x[3], x[4], x[5]);
            let e = &x.as_slice()[6..];
            let r_mat = crate::math::rotation_matrix(&rot);
            let mut residual = DVector::zeros(2 * nl);
            let mut jac = want_jac.then(|| DMatrix::zeros(2 * nl, 6 + n_e));
            for i in 0..nl {
                let mut v = b0[i];
                for (j, ej) in e.iter().enumerate() {
                    if *ej != 0.0 {
                        v += deltas[j][i] * *ej;
                    }
                }
                let p = r_mat * v + trans;
                if p.z <= 1e-9 {
                    residual[2 * i] = 1e4;
                    residual[2 * i + 1] = 1e4;
                    continue;
                }
                let proj = camera.project_unchecked(&p);
                residual[2 * i] = proj.x - sample.landmarks[i].x;
                residual[2 * i + 1] = proj.y - sample.landmarks[i].y;
                if let Some(jm) = jac.as_mut() {
                    let jp = camera.project_jacobian(&p);
                    let jrot = jp * rotate_point_jacobian(&rot, &v);
                    for row in 0..2 {
                        for col in 0..3 {
                            jm[(2 * i + row, col)] = jrot[(row, col)];
                            jm[(2 * i + row, 3 + col)] = jp[(row, col)];
                        }
                    }
                    for j in 0..n_e {
                        let dv = jp * (r_mat * deltas[j][i]);
                        jm[(2 * i, 6 + j)] = dv.x;
                        jm[(2 * i + 1, 6 + j)] = dv.y;
                    }
                }
            }
            (residual, jac)
        };

        let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); 6];
        bounds[5] = (1e-3, f64::INFINITY); // keep the subject in front of the camera
        bounds.extend(std::iter::repeat((0.0, 1.0)).take(n_e));
        let opts = GaussNewtonOptions { max_iterations: 120, bounds, ..Default::default() };
        let mut x0 = DVector::zeros(6 + n_e);
        x0.rows_mut(0, 3).copy_from(&pose0.rotation);
        x0.rows_mut(3, 3).copy_from(&pose0.translation);
        for (j, v) in e0.iter().enumerate() {
            x0[6 + j] = *v;
        }
        let (x, report) = minimize(x0, eval, &opts)?;

        let pose = RigidPose::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))?;
        let expr = ExpressionWeights::clamped(x.as_slice()[6..].to_vec());
        let local = shapes.blend_at(&expr, landmark_vertices)?;
        let posed = crate::model::transform(&local, &pose);
        let mut displacements = Vec::with_capacity(nl);
        for (p, l) in posed.iter().zip(sample.landmarks.iter()) {
            displacements.push(camera.project(p)? - l);
        }
        let params = ShapeParams::new(pose, expr, displacements);
        let diagnostics = FitDiagnostics {
            rmse_px: (report.objective / nl as f64).sqrt(),
            converged: report.converged,
            rank_deficient: landmarks_collinear(&sample.landmarks),
            objective: report.objective,
            iterations: report.iterations,
        };
        Ok((params, diagnostics))
    }
}

#[derive(Debug, Clone)]
pub struct JointIdentityFit {
    pub w_id: IdentityVector,
    /// Total Eq. 6 objective before the alternation and after each outer
    /// iteration; non-increasing by construction.
    pub objective_history: Vec<f64>,
    pub per_sample: Vec<SampleFit>,
}

// --- guess-truth pairs ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub sigma_rot: f64,
    pub sigma_trans: [f64; 3],
    pub sigma_expr: f64,
    pub sigma_disp: f64,
    pub pairs_per_sample: usize,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            sigma_rot: 0.05,
            sigma_trans: [0.01, 0.01, 0.05],
            sigma_expr: 0.1,
            sigma_disp: 2.0,
            pairs_per_sample: 8,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_rot < 0.0
            || self.sigma_trans.iter().any(|s| *s < 0.0)
            || self.sigma_expr < 0.0
            || self.sigma_disp < 0.0
        {
            return Err(Error::Config("perturbation sigmas must be nonnegative".into()));
        }
        if self.pairs_per_sample < 1 {
            return Err(Error::Config("pairs_per_sample must be at least 1".into()));
        }
        Ok(())
    }
}

/// A fitted training truth ready for pair generation.
#[derive(Debug, Clone)]
pub struct FittedTruth {
    pub image: Arc<RgbImage>,
    pub image_path: Option<PathBuf>,
    pub shapes: Arc<BlendshapeSet>,
    pub w_id: IdentityVector,
    pub params: ShapeParams,
}

/// One regressor training pair: the image, the subject's blendshapes, a
/// perturbed guess and the fitted truth.
#[derive(Debug, Clone)]
pub struct GuessTruthPair {
    pub image: Arc<RgbImage>,
    pub image_path: Option<PathBuf>,
    pub shapes: Arc<BlendshapeSet>,
    pub w_id: IdentityVector,
    pub guess: ShapeParams,
    pub truth: ShapeParams,
}

/// Emits `pairs_per_sample` Gaussian-perturbed guesses per truth,
/// deterministically under the configured seed. Expression weights are
/// re-clamped into [0, 1] and the depth kept positive.
pub fn make_training_pairs(truths: &[FittedTruth], cfg: &PerturbConfig) -> Result<Vec<GuessTruthPair>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(truths.len() * cfg.pairs_per_sample);
    for truth in truths {
        for _ in 0..cfg.pairs_per_sample {
            let p = &truth.params;
            let mut rot = p.pose.rotation;
            let mut trans = p.pose.translation;
            for k in 0..3 {
                rot[k] += unit.sample(&mut rng) * cfg.sigma_rot;
                trans[k] += unit.sample(&mut rng) * cfg.sigma_trans[k];
            }
            trans.z = trans.z.max(0.01);
            let e: Vec<f64> = p
                .expr
                .as_slice()
                .iter()
                .map(|v| (v + unit.sample(&mut rng) * cfg.sigma_expr).clamp(0.0, 1.0))
                .collect();
            let d: Vec<Vector2<f64>> = p
                .displacements
                .iter()
                .map(|d| {
                    Vector2::new(
                        d.x + unit.sample(&mut rng) * cfg.sigma_disp,
                        d.y + unit.sample(&mut rng) * cfg.sigma_disp,
                    )
                })
                .collect();
            out.push(GuessTruthPair {
                image: truth.image.clone(),
                image_path: truth.image_path.clone(),
                shapes: truth.shapes.clone(),
                w_id: truth.w_id.clone(),
                guess: ShapeParams::new(RigidPose::new(rot, trans)?, ExpressionWeights::clamped(e), d),
                truth: p.clone(),
            });
        }
    }
    Ok(out)
}

// --- training manifest ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub subject_id: String,
    pub landmarks: Vec<Vector2<f64>>,
}

/// Text manifest: `image_path subject_id u0 v0 u1 v1 ...` per line.
pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.image_path.to_string_lossy());
        s.push(' ');
        s.push_str(&e.subject_id);
        for l in &e.landmarks {
            s.push_str(&format!(" {} {}", l.x, l.y));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let image_path = PathBuf::from(
            toks.next()
                .ok_or_else(|| Error::Format(format!("manifest line {}: empty", lineno + 1)))?,
        );
        let subject_id = toks
            .next()
            .ok_or_else(|| Error::Format(format!("manifest line {}: missing subject", lineno + 1)))?
            .to_string();
        let rest: Vec<f64> = toks
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("manifest line {}: bad number {t:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if rest.len() % 2 != 0 || rest.is_empty() {
            return Err(Error::Format(format!(
                "manifest line {}: landmark coordinates must come in pairs",
                lineno + 1
            )));
        }
        let landmarks = rest.chunks(2).map(|c| Vector2::new(c[0], c[1])).collect();
        out.push(ManifestEntry { image_path, subject_id, landmarks });
    }
    Ok(out)
}

// --- pair store -----------------------------------------------------------

/// Binary pair store (`BTGP`): image path references plus the serialized
/// guess and truth parameter sets and the subject identity weights.
pub fn save_pair_store(path: &Path, pairs: &[GuessTruthPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"BTGP")?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(pairs.len() as u32).to_le_bytes())?;
    let (n_e, n_l, n_id) = match pairs.first() {
        Some(p) => (p.truth.expr.len(), p.truth.displacements.len(), p.w_id.len()),
        None => (0, 0, 0),
    };
    for v in [n_e, n_l, n_id] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    for p in pairs {
        let path_str = p
            .image_path
            .as_ref()
            .ok_or_else(|| Error::Config("pair store requires image paths".into()))?
            .to_string_lossy()
            .into_owned();
        f.write_all(&(path_str.len() as u32).to_le_bytes())?;
        f.write_all(path_str.as_bytes())?;
        for v in p.w_id.as_slice() {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in p.truth.to_vector().iter().chain(p.guess.to_vector().iter()) {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a pair store; images resolve relative to the store's directory
/// and blendshapes are rebuilt from the stored identity weights.
pub fn load_pair_store(
    path: &Path,
    tensor: &ReducedCoreTensor,
    topology: Arc<MeshTopology>,
) -> Result<Vec<GuessTruthPair>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = crate::io::ByteReader::new(&bytes);
    r.expect_magic(b"BTGP")?;
    let version = r.read_u32()?;
    if version != 1 {
        return Err(Error::Format(format!("pair store: unsupported version {version}")));
    }
    let n_pairs = r.read_u32()? as usize;
    let n_e = r.read_u32()? as usize;
    let n_l = r.read_u32()? as usize;
    let n_id = r.read_u32()? as usize;
    let dim = ShapeParams::dim(n_e, n_l);

    let mut images: std::collections::HashMap<PathBuf, Arc<RgbImage>> = Default::default();
    let mut shapes_cache: std::collections::HashMap<Vec<u64>, Arc<BlendshapeSet>> = Default::default();
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = r.read_u32()? as usize;
        let path_str = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("pair store: non-utf8 path".into()))?;
        let rel = PathBuf::from(&path_str);
        let full = if rel.is_absolute() { rel.clone() } else { base.join(&rel) };
        let mut w = Vec::with_capacity(n_id);
        for _ in 0..n_id {
            w.push(r.read_f64()?);
        }
        let mut truth_v = Vec::with_capacity(dim);
        for _ in 0..dim {
            truth_v.push(r.read_f64()?);
        }
        let mut guess_v = Vec::with_capacity(dim);
        for _ in 0..dim {
            guess_v.push(r.read_f64()?);
        }
        let image = match images.get(&full) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(RgbImage::load_ppm(&full)?);
                images.insert(full.clone(), img.clone());
                img
            }
        };
        let key: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
        let shapes = match shapes_cache.get(&key) {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(crate::model::build_blendshapes(
                    tensor,
                    &IdentityVector::new(w.clone())?,
                    topology.clone(),
                )?);
                shapes_cache.insert(key, s.clone());
                s
            }
        };
        out.push(GuessTruthPair {
            image,
            image_path: Some(rel),
            shapes,
            w_id: IdentityVector::new(w)?,
            truth: ShapeParams::from_vector(&truth_v, n_e, n_l)?,
            guess: ShapeParams::from_vector(&guess_v, n_e, n_l)?,
        });
    }
    Ok(out)
}
