//! Rigid pose and perspective projection, with analytic Jacobians.
//!
//! Rotations are parameterized as axis-angle vectors through the exponential
//! map, evaluated in the series form `R = I + f(s)·K + g(s)·K²` with
//! `K = [ω]ₓ` and `s = ‖ω‖²`, which is smooth through ω = 0.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Camera-space near-plane threshold in model units.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
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
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidInput(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Fixed default: focal length 1.2·W, principal point at the center.
    pub fn default_for_image(width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx: 1.2 * width as f64,
            fy: 1.2 * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// `sin θ / θ` and `(1 - cos θ)/θ²` as functions of `s = θ²`, with their
/// derivatives in `s`. Series near zero keep everything smooth.
fn rotation_coefficients(s: f64) -> (f64, f64, f64, f64) {
    if s <= 1e-4 {
        let f = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
        let g = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
        let fp = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90720.0;
        let gp = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s * s * s / 725760.0;
        (f, g, fp, gp)
    } else {
        let theta = s.sqrt();
        let (sin_t, cos_t) = theta.sin_cos();
        let f = sin_t / theta;
        let g = (1.0 - cos_t) / s;
        let fp = (theta * cos_t - sin_t) / (2.0 * theta * theta * theta);
        let gp = (theta * sin_t - 2.0 * (1.0 - cos_t)) / (2.0 * s * s);
        (f, g, fp, gp)
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation matrix from an axis-angle vector (Rodrigues / exponential map).
pub fn rotation_matrix(axis_angle: &[f64; 3]) -> Matrix3<f64> {
    let w = Vector3::new(axis_angle[0], axis_angle[1], axis_angle[2]);
    let s = w.norm_squared();
    let (f, g, _, _) = rotation_coefficients(s);
    let k = skew(&w);
    Matrix3::identity() + k * f + k * k * g
}

/// The three partial derivatives `∂R/∂ωⱼ` of the exponential map.
pub fn rotation_jacobian(axis_angle: &[f64; 3]) -> [Matrix3<f64>; 3] {
    let w = Vector3::new(axis_angle[0], axis_angle[1], axis_angle[2]);
    let s = w.norm_squared();
    let (f, g, fp, gp) = rotation_coefficients(s);
    let k = skew(&w);
    let k2 = k * k;
    let mut out = [Matrix3::zeros(); 3];
    for (j, d) in out.iter_mut().enumerate() {
        let mut e = Vector3::zeros();
        e[j] = 1.0;
        let ej_wt = e * w.transpose();
        *d = (k * fp + k2 * gp) * (2.0 * w[j])
            + skew(&e) * f
            + (ej_wt + ej_wt.transpose() - Matrix3::identity() * (2.0 * w[j])) * g;
    }
    out
}

/// `Φ(v) = R v + t`: rigid head pose applied to one point.
pub fn rigid_transform(v: &[f64; 3], rotation: &[f64; 3], translation: &[f64; 3]) -> [f64; 3] {
    let r = rotation_matrix(rotation);
    let out = r * Vector3::new(v[0], v[1], v[2]) + Vector3::new(translation[0], translation[1], translation[2]);
    [out.x, out.y, out.z]
}

/// Wrap an axis-angle vector so its magnitude stays below π.
pub fn wrap_axis_angle(axis_angle: &mut [f64; 3]) {
    let theta = (axis_angle[0].powi(2) + axis_angle[1].powi(2) + axis_angle[2].powi(2)).sqrt();
    if theta > std::f64::consts::PI {
        let turns = (theta / (2.0 * std::f64::consts::PI)).round();
        let wrapped = theta - 2.0 * std::f64::consts::PI * turns;
        let scale = wrapped / theta;
        for c in axis_angle.iter_mut() {
            *c *= scale;
        }
    }
}

/// Perspective projection into screen space; `None` for points at or behind
/// the near plane (flagged, not an abort — visibility filters them).
pub fn project(v_cam: &[f64; 3], intr: &CameraIntrinsics) -> Option<[f64; 2]> {
    if v_cam[2] <= NEAR_PLANE {
        return None;
    }
    Some(project_unchecked(v_cam, intr))
}

#[inline]
pub(crate) fn project_unchecked(v_cam: &[f64; 3], intr: &CameraIntrinsics) -> [f64; 2] {
    [
        intr.fx * v_cam[0] / v_cam[2] + intr.cx,
        intr.fy * v_cam[1] / v_cam[2] + intr.cy,
    ]
}

/// Projection with the depth clamped to the near plane. Used for landmark
/// projections, which must stay defined (with zero gradient through the
/// clamp) while a bad pose estimate momentarily puts a vertex behind the
/// camera. The flag reports whether the clamp engaged.
pub(crate) fn project_depth_clamped(v_cam: &[f64; 3], intr: &CameraIntrinsics) -> ([f64; 2], bool) {
    let clamped = v_cam[2] <= NEAR_PLANE;
    let z = if clamped { NEAR_PLANE } else { v_cam[2] };
    ([intr.fx * v_cam[0] / z + intr.cx, intr.fy * v_cam[1] / z + intr.cy], clamped)
}

/// Jacobian `∂u/∂v̂` of the projection, rows (u_x, u_y) by columns (x, y, z).
pub fn projection_jacobian(v_cam: &[f64; 3], intr: &CameraIntrinsics) -> [[f64; 3]; 2] {
    let z = v_cam[2];
    [
        [intr.fx / z, 0.0, -intr.fx * v_cam[0] / (z * z)],
        [0.0, intr.fy / z, -intr.fy * v_cam[1] / (z * z)],
    ]
}

/// Invert the projection at a known depth.
pub fn unproject(u: &[f64; 2], depth: f64, intr: &CameraIntrinsics) -> [f64; 3] {
    [
        (u[0] - intr.cx) * depth / intr.fx,
        (u[1] - intr.cy) * depth / intr.fy,
        depth,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_pose_is_identity() {
        let v = [0.3, -0.7, 2.0];
        let out = rigid_transform(&v, &[0.0; 3], &[0.0; 3]);
        assert_eq!(out, v);
    }

    #[test]
    fn quarter_turn_about_z() {
        let out = rigid_transform(&[1.0, 0.0, 0.0], &[0.0, 0.0, std::f64::consts::FRAC_PI_2], &[0.0; 3]);
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let intr = CameraIntrinsics::default_for_image(128, 128);
        let u = project(&[0.0, 0.0, 1.0], &intr).unwrap();
        assert_eq!(u, [intr.cx, intr.cy]);
    }

    #[test]
    fn similar_triangles() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let u = project(&[1.0, 0.0, 1.0], &intr).unwrap();
        assert_abs_diff_eq!(u[0], 150.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let intr = CameraIntrinsics::default_for_image(64, 64);
        assert!(project(&[0.0, 0.0, -1.0], &intr).is_none());
        assert!(project(&[0.0, 0.0, 0.005], &intr).is_none());
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let intr = CameraIntrinsics::default_for_image(128, 128);
        let mut rng = crate::rng::derive_rng(3, "camera-test", 0);
        use rand::Rng;
        for _ in 0..20 {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)];
            let u1 = project(&v, &intr).unwrap();
            let u2 = project(&[v[0], v[1], 2.0 * v[2]], &intr).unwrap();
            assert_abs_diff_eq!(u2[0] - intr.cx, (u1[0] - intr.cx) / 2.0, epsilon = 1e-10);
            assert_abs_diff_eq!(u2[1] - intr.cy, (u1[1] - intr.cy) / 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn unproject_recovers_camera_point() {
        let intr = CameraIntrinsics::default_for_image(128, 96);
        let v = [0.4, -0.2, 2.3];
        let u = project(&v, &intr).unwrap();
        let back = unproject(&u, v[2], &intr);
        for c in 0..3 {
            assert_abs_diff_eq!(back[c], v[c], epsilon = 1e-10);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let cases = [
            [0.0, 0.0, 0.0],
            [0.3, -0.2, 0.5],
            [1.5, 0.4, -0.9],
            [1e-5, -2e-5, 3e-6],
        ];
        let h = 1e-6;
        for w in cases {
            let jac = rotation_jacobian(&w);
            for j in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[j] += h;
                wm[j] -= h;
                let rp = rotation_matrix(&wp);
                let rm = rotation_matrix(&wm);
                let fd = (rp - rm) / (2.0 * h);
                for r in 0..3 {
                    for c in 0..3 {
                        assert_abs_diff_eq!(jac[j][(r, c)], fd[(r, c)], epsilon = 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn wrapping_keeps_rotation_equivalent() {
        let mut w = [0.0, 0.0, 4.0]; // > π
        let before = rotation_matrix(&w);
        wrap_axis_angle(&mut w);
        let after = rotation_matrix(&w);
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        assert!(theta <= std::f64::consts::PI);
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(before[(r, c)], after[(r, c)], epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn exponential_map_lands_in_so3(
            x in -3.0f64..3.0,
            y in -3.0f64..3.0,
            z in -3.0f64..3.0,
        ) {
            let r = rotation_matrix(&[x, y, z]);
            let rtr = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[(i, j)] - expect).abs() <= 1e-12);
                }
            }
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }
    }
}
