//! Spherical-harmonics illumination and Lambertian per-vertex shading.
//!
//! Nine unnormalized real SH polynomials per color channel; any constant
//! normalization folds into the learned illumination weights, so fixing this
//! convention makes values exactly testable. Illumination vectors stack the
//! 9 bands as RGB triplets: `gamma[3*band + channel]`.

use crate::error::{Error, Result};

/// 9 SH weights per color channel, band-major: `gamma[3*band + channel]`.
pub type Illumination = [f64; 27];

/// Evaluate the 9 SH basis polynomials at a unit direction.
///
/// Order: `1, n_y, n_z, n_x, n_x·n_y, n_y·n_z, 3n_z²−1, n_x·n_z, n_x²−n_y²`.
pub fn sh_basis(n: &[f64; 3]) -> Result<[f64; 9]> {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "spherical-harmonics direction must be unit length, got {len}"
        )));
    }
    Ok(sh_basis_raw(n))
}

#[inline]
pub(crate) fn sh_basis_raw(n: &[f64; 3]) -> [f64; 9] {
    let [x, y, z] = *n;
    [
        1.0,
        y,
        z,
        x,
        x * y,
        y * z,
        3.0 * z * z - 1.0,
        x * z,
        x * x - y * y,
    ]
}

/// Rows `∂H_b/∂n` of the SH basis Jacobian.
#[inline]
pub(crate) fn sh_basis_jacobian(n: &[f64; 3]) -> [[f64; 3]; 9] {
    let [x, y, z] = *n;
    [
        [0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [y, x, 0.0],
        [0.0, z, y],
        [0.0, 0.0, 6.0 * z],
        [z, 0.0, x],
        [2.0 * x, -2.0 * y, 0.0],
    ]
}

/// Per-channel incident irradiance `Σ_b γ_b · H_b(n)`.
#[inline]
pub fn irradiance(n: &[f64; 3], gamma: &Illumination) -> [f64; 3] {
    let h = sh_basis_raw(n);
    let mut out = [0.0f64; 3];
    for (b, hb) in h.iter().enumerate() {
        out[0] += gamma[3 * b] * hb;
        out[1] += gamma[3 * b + 1] * hb;
        out[2] += gamma[3 * b + 2] * hb;
    }
    out
}

/// Shaded vertex color `c = r ⊙ Σ_b γ_b · H_b(n)`. Not clamped.
#[inline]
pub fn shade(albedo: &[f64; 3], n: &[f64; 3], gamma: &Illumination) -> [f64; 3] {
    let e = irradiance(n, gamma);
    [albedo[0] * e[0], albedo[1] * e[1], albedo[2] * e[2]]
}

/// Ambient (band-0 only) illumination with the given per-channel weight.
pub fn band0(rgb: [f64; 3]) -> Illumination {
    let mut g = [0.0f64; 27];
    g[..3].copy_from_slice(&rgb);
    g
}
