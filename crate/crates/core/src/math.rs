//! Small numeric helpers shared across the crate: axis-angle rotations,
//! their derivatives, and scalar minimization.

use nalgebra::{Matrix3, Rotation3, Vector3};

/// Rotation matrix of an axis-angle vector (exponential map).
pub fn rotation_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*axis_angle).into_inner()
}

/// Skew-symmetric cross-product matrix `[v]_x` so that `[v]_x w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Derivative of `R(w) v` with respect to the axis-angle vector `w`.
///
/// Uses the closed form
/// `d(Rv)/dw = -R [v]_x (w w^T + (R^T - I)[w]_x) / |w|^2`,
/// which reduces to `-[v]_x` at the identity. Near zero the quotient is
/// replaced by its series `I - [w]_x / 2` to avoid cancellation.
pub fn rotate_point_jacobian(axis_angle: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation_matrix(axis_angle);
    let theta2 = axis_angle.norm_squared();
    let m = if theta2 < 1e-8 {
        Matrix3::identity() - skew(axis_angle) * 0.5
    } else {
        let wx = skew(axis_angle);
        (axis_angle * axis_angle.transpose() + (r.transpose() - Matrix3::identity()) * wx)
            / theta2
    };
    -r * skew(v) * m
}

/// Wraps an axis-angle vector so its magnitude lies in [0, pi).
pub fn canonicalize_axis_angle(v: &Vector3<f64>) -> Vector3<f64> {
    let theta = v.norm();
    if theta < std::f64::consts::PI || theta == 0.0 {
        return *v;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t > std::f64::consts::PI {
        t -= two_pi; // flip axis via negative magnitude
    }
    v * (t / theta)
}

/// Axis-angle vector of a rotation matrix.
pub fn axis_angle_from_matrix(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Golden-section search for the minimum of `f` on `[a, b]`.
///
/// Returns the abscissa and value of the best point seen, including the
/// bracket endpoints. `f` is assumed unimodal on the bracket; if it is not,
/// the result is still the best probed point.
pub fn golden_section_min<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut hi) = (a.min(b), a.max(b));
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
        let (xc, fc) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        if fc < best.1 {
            best = (xc, fc);
        }
    }
    let fa = f(a);
    let fb = f(b);
    if fa < best.1 {
        best = (a, fa);
    }
    if fb < best.1 {
        best = (b, fb);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_of_zero_is_identity() {
        let r = rotation_matrix(&Vector3::zeros());
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let w = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = rotation_matrix(&w) * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(p, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rotate_jacobian_matches_finite_differences() {
        let cases = [
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(1e-9, 0.0, -1e-9),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(-1.2, 0.4, 0.9),
        ];
        let v = Vector3::new(0.21, -0.53, 0.87);
        let h = 1e-6;
        for w in cases {
            let jac = rotate_point_jacobian(&w, &v);
            for k in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[k] += h;
                wm[k] -= h;
                let fd = (rotation_matrix(&wp) * v - rotation_matrix(&wm) * v) / (2.0 * h);
                for row in 0..3 {
                    assert_relative_eq!(jac[(row, k)], fd[row], epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn canonicalize_wraps_large_angles() {
        let w = Vector3::new(0.0, 0.0, 1.5 * std::f64::consts::PI);
        let c = canonicalize_axis_angle(&w);
        assert!(c.norm() < std::f64::consts::PI);
        let (ra, rb) = (rotation_matrix(&w), rotation_matrix(&c));
        assert_relative_eq!(ra, rb, epsilon = 1e-12);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, _) = golden_section_min(|x| (x - 0.37).powi(2), -1.0, 1.0, 60);
        assert_relative_eq!(x, 0.37, epsilon = 1e-8);
    }
}
