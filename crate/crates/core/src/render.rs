//! Per-vertex differentiable rendering and a z-buffered preview rasterizer.
//!
//! The loss pipeline samples images at projected vertices; full-image
//! rasterization exists only for dataset synthesis and visualization and
//! never sits inside the loss. Both paths share one forward routine so
//! rendered records and loss evaluations agree bit for bit.

use crate::camera::{project_depth_clamped, rotation_matrix, CameraIntrinsics, NEAR_PLANE};
use crate::img::Image;
use crate::mesh::{accumulate_face_normals, Mesh, DEGENERATE_NORMAL, NORMAL_LEN_GUARD};
use crate::model::{FaceModel, FrameParams, IdentityParams};
use crate::shading::{sh_basis_raw, Illumination};
use nalgebra::{Matrix3, Vector3};

/// Per-vertex records for one frame: everything the losses and the rasterizer
/// need, for every vertex (visibility is a flag, not a filter).
#[derive(Debug, Clone)]
pub struct FrameRender {
    /// Screen positions (depth-clamped projection, defined for all vertices).
    pub screen: Vec<[f64; 2]>,
    /// Shaded colors from camera-space normals. Not clamped.
    pub color: Vec<[f64; 3]>,
    /// Membership in the visible set V̂.
    pub visible: Vec<bool>,
    /// Camera-space positions.
    pub cam_pos: Vec<[f64; 3]>,
    /// Camera-space unit normals.
    pub cam_normal: Vec<[f64; 3]>,
    /// Vertices at or behind the near plane (projection was clamped).
    pub behind: Vec<bool>,
}

impl FrameRender {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Screen positions of the mesh landmark vertices.
    pub fn landmark_screens(&self, mesh: &Mesh) -> Vec<[f64; 2]> {
        mesh.landmarks
            .iter()
            .map(|&l| self.screen[l as usize])
            .collect()
    }
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct FrameForward {
    pub screen: Vec<[f64; 2]>,
    pub behind: Vec<bool>,
    pub color: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
    pub cam_pos: Vec<[f64; 3]>,
    pub cam_normal: Vec<[f64; 3]>,
    pub rotation: Matrix3<f64>,
    /// Unnormalized model-space normal accumulators.
    pub normal_accum: Vec<[f64; 3]>,
    /// Model-space unit normals.
    pub model_normal: Vec<[f64; 3]>,
    pub normal_len: Vec<f64>,
    /// Vertices that fell back to the fixed normal (zero normal gradient).
    pub degenerate: Vec<bool>,
    pub irradiance: Vec<[f64; 3]>,
}

impl FrameForward {
    pub fn into_render(self) -> FrameRender {
        FrameRender {
            screen: self.screen,
            color: self.color,
            visible: self.visible,
            cam_pos: self.cam_pos,
            cam_normal: self.cam_normal,
            behind: self.behind,
        }
    }
}

/// Visibility: the normal faces the camera at the origin, the vertex sits in
/// front of the near plane, and the projection lands inside the image with a
/// one-pixel margin.
pub fn visible_set(
    cam_pos: &[[f64; 3]],
    cam_normals: &[[f64; 3]],
    intr: &CameraIntrinsics,
) -> Vec<bool> {
    cam_pos
        .iter()
        .zip(cam_normals)
        .map(|(p, n)| {
            if p[2] <= NEAR_PLANE {
                return false;
            }
            let facing = n[0] * p[0] + n[1] * p[1] + n[2] * p[2];
            if facing >= 0.0 {
                return false;
            }
            let (u, _) = project_depth_clamped(p, intr);
            u[0] >= 1.0
                && u[0] <= intr.width as f64 - 1.0
                && u[1] >= 1.0
                && u[1] <= intr.height as f64 - 1.0
        })
        .collect()
}

/// Shared forward pass over assembled positions and albedo for one frame.
pub(crate) fn forward_frame(
    mesh: &Mesh,
    positions: &[f64],
    albedo: &[f64],
    frame: &FrameParams,
    intr: &CameraIntrinsics,
) -> FrameForward {
    let n = mesh.vertex_count();
    let mut fwd = FrameForward {
        screen: vec![[0.0; 2]; n],
        behind: vec![false; n],
        color: vec![[0.0; 3]; n],
        visible: vec![false; n],
        cam_pos: vec![[0.0; 3]; n],
        cam_normal: vec![[0.0; 3]; n],
        rotation: rotation_matrix(&frame.rotation),
        normal_accum: vec![[0.0; 3]; n],
        model_normal: vec![[0.0; 3]; n],
        normal_len: vec![0.0; n],
        degenerate: vec![false; n],
        irradiance: vec![[0.0; 3]; n],
    };

    let mut accum = vec![0.0f64; positions.len()];
    accumulate_face_normals(&mesh.faces, positions, &mut accum);

    let r = &fwd.rotation;
    let t = Vector3::new(frame.translation[0], frame.translation[1], frame.translation[2]);
    for i in 0..n {
        let m = [accum[3 * i], accum[3 * i + 1], accum[3 * i + 2]];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        fwd.normal_accum[i] = m;
        fwd.normal_len[i] = len;
        let nm = if len <= NORMAL_LEN_GUARD {
            fwd.degenerate[i] = true;
            DEGENERATE_NORMAL
        } else {
            [m[0] / len, m[1] / len, m[2] / len]
        };
        fwd.model_normal[i] = nm;

        let p = Vector3::new(positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]);
        let cam = r * p + t;
        fwd.cam_pos[i] = [cam.x, cam.y, cam.z];
        let cn = r * Vector3::new(nm[0], nm[1], nm[2]);
        fwd.cam_normal[i] = [cn.x, cn.y, cn.z];

        let (u, behind) = project_depth_clamped(&fwd.cam_pos[i], intr);
        fwd.screen[i] = u;
        fwd.behind[i] = behind;

        let e = shade_irradiance(&fwd.cam_normal[i], &frame.gamma);
        fwd.irradiance[i] = e;
        let a = [albedo[3 * i], albedo[3 * i + 1], albedo[3 * i + 2]];
        fwd.color[i] = [a[0] * e[0], a[1] * e[1], a[2] * e[2]];
    }
    fwd.visible = visible_set(&fwd.cam_pos, &fwd.cam_normal, intr);
    fwd
}

#[inline]
fn shade_irradiance(n: &[f64; 3], gamma: &Illumination) -> [f64; 3] {
    let h = sh_basis_raw(n);
    let mut out = [0.0f64; 3];
    for (b, hb) in h.iter().enumerate() {
        out[0] += gamma[3 * b] * hb;
        out[1] += gamma[3 * b + 1] * hb;
        out[2] += gamma[3 * b + 2] * hb;
    }
    out
}

/// Render per-vertex records for one frame.
pub fn render_vertices(
    model: &FaceModel,
    identity: &IdentityParams,
    frame: &FrameParams,
    intr: &CameraIntrinsics,
) -> FrameRender {
    let positions = model.assemble_vertices(&identity.alpha, &frame.delta);
    let albedo = model.assemble_appearance(&identity.beta);
    forward_frame(&model.mesh, &positions, &albedo, frame, intr).into_render()
}

#[derive(Debug, Clone)]
pub struct RasterOptions {
    pub background: [f64; 3],
    pub background_image: Option<Image>,
    /// Rounds of edge padding: silhouette-adjacent background pixels take the
    /// mean of their covered neighbors, so bilinear samples at boundary
    /// vertices do not mix in background color.
    pub edge_padding: usize,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions {
            background: [0.5, 0.5, 0.5],
            background_image: None,
            edge_padding: 2,
        }
    }
}

#[inline]
fn edge(a: &[f64; 2], b: &[f64; 2], px: f64, py: f64) -> f64 {
    (px - a[0]) * (b[1] - a[1]) - (py - a[1]) * (b[0] - a[0])
}

/// Z-buffered triangle rasterization with barycentric-interpolated colors
/// over a background. Synthesis and visualization only.
pub fn rasterize_preview(
    render: &FrameRender,
    faces: &[[u32; 3]],
    intr: &CameraIntrinsics,
    opts: &RasterOptions,
) -> Image {
    let (w, h) = (intr.width, intr.height);
    let mut img = match &opts.background_image {
        Some(bg) => bg.clone(),
        None => Image::constant(w, h, opts.background),
    };
    assert_eq!(img.width, w);
    assert_eq!(img.height, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut covered = vec![false; w * h];

    for f in faces {
        let [a, b, c] = [f[0] as usize, f[1] as usize, f[2] as usize];
        if render.behind[a] || render.behind[b] || render.behind[c] {
            continue;
        }
        let (sa, sb, sc) = (&render.screen[a], &render.screen[b], &render.screen[c]);
        let den = edge(sa, sb, sc[0], sc[1]);
        if den.abs() < 1e-12 {
            continue;
        }
        let min_x = sa[0].min(sb[0]).min(sc[0]).floor().max(0.0) as usize;
        let max_x = (sa[0].max(sb[0]).max(sc[0]).ceil() as usize).min(w.saturating_sub(1));
        let min_y = sa[1].min(sb[1]).min(sc[1]).floor().max(0.0) as usize;
        let max_y = (sa[1].max(sb[1]).max(sc[1]).ceil() as usize).min(h.saturating_sub(1));
        if min_x > max_x || min_y > max_y {
            continue;
        }
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                let w0 = edge(sb, sc, cx, cy) / den;
                let w1 = edge(sc, sa, cx, cy) / den;
                let w2 = edge(sa, sb, cx, cy) / den;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * render.cam_pos[a][2] + w1 * render.cam_pos[b][2] + w2 * render.cam_pos[c][2];
                let idx = py * w + px;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    covered[idx] = true;
                    let mut rgb = [0.0f64; 3];
                    for ch in 0..3 {
                        rgb[ch] = (w0 * render.color[a][ch]
                            + w1 * render.color[b][ch]
                            + w2 * render.color[c][ch])
                            .clamp(0.0, 1.0);
                    }
                    img.set_pixel(px, py, rgb);
                }
            }
        }
    }

    for _ in 0..opts.edge_padding {
        let snapshot = covered.clone();
        let mut additions = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if snapshot[idx] {
                    continue;
                }
                let mut sum = [0.0f64; 3];
                let mut count = 0usize;
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if snapshot[nidx] {
                        let p = img.pixel(nx as usize, ny as usize);
                        for c in 0..3 {
                            sum[c] += p[c];
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    additions.push((x, y, [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64]));
                }
            }
        }
        for (x, y, rgb) in additions {
            img.set_pixel(x, y, rgb);
            covered[y * w + x] = true;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrameParams;
    use crate::procedural::{face_mask, icosphere};
    use crate::shading::band0;
    use approx::assert_abs_diff_eq;

    fn frame_render_from(
        screens: Vec<[f64; 2]>,
        colors: Vec<[f64; 3]>,
        z: f64,
    ) -> FrameRender {
        let n = screens.len();
        FrameRender {
            screen: screens,
            color: colors,
            visible: vec![true; n],
            cam_pos: vec![[0.0, 0.0, z]; n],
            cam_normal: vec![[0.0, 0.0, -1.0]; n],
            behind: vec![false; n],
        }
    }

    #[test]
    fn sphere_front_hemisphere_is_visible() {
        let sphere = icosphere(2);
        let frame = FrameParams {
            rotation: [0.0; 3],
            translation: [0.0, 0.0, 5.0],
            gamma: band0([1.0, 1.0, 1.0]),
            delta: nalgebra::DVector::zeros(0),
        };
        let intr = CameraIntrinsics::default_for_image(256, 256);
        let albedo = vec![0.5; 3 * sphere.vertex_count()];
        let fwd = forward_frame(&sphere, &sphere.vertices, &albedo, &frame, &intr);
        for i in 0..sphere.vertex_count() {
            // oracle: sign of n·v per vertex in camera space
            let n = fwd.cam_normal[i];
            let p = fwd.cam_pos[i];
            let dot = n[0] * p[0] + n[1] * p[1] + n[2] * p[2];
            assert_eq!(fwd.visible[i], dot < 0.0, "vertex {i}");
        }
        let count = fwd.visible.iter().filter(|&&v| v).count();
        assert!(count > 0 && count < sphere.vertex_count());
    }

    #[test]
    fn behind_camera_vertex_is_excluded() {
        let intr = CameraIntrinsics::default_for_image(64, 64);
        let vis = visible_set(&[[0.0, 0.0, -2.0]], &[[0.0, 0.0, -1.0]], &intr);
        assert_eq!(vis, vec![false]);
    }

    #[test]
    fn away_facing_normals_give_empty_set() {
        let intr = CameraIntrinsics::default_for_image(64, 64);
        let pos = vec![[0.0, 0.0, 2.0], [0.1, 0.1, 2.5]];
        let nrm = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let vis = visible_set(&pos, &nrm, &intr);
        assert!(vis.iter().all(|&v| !v));
    }

    #[test]
    fn out_of_margin_projection_is_excluded() {
        let intr = CameraIntrinsics::default_for_image(64, 64);
        // projects at u_x = 1.2*64*10/1 + 32, far off screen
        let vis = visible_set(&[[10.0, 0.0, 1.0]], &[[0.0, 0.0, -1.0]], &intr);
        assert_eq!(vis, vec![false]);
    }

    #[test]
    fn neutral_frontal_band0_colors_equal_albedo() {
        let mesh = face_mask(15, 15);
        let blend = crate::synthetic::synthetic_blendshapes(&mesh, 3, 1);
        let model = crate::model::init_model(&mesh, 25, 4, 4, 2, &blend, 0).unwrap();
        let identity = crate::model::IdentityParams::zeros(4, 2);
        let frame = FrameParams {
            rotation: [0.0; 3],
            translation: [0.0, 0.0, 3.0],
            gamma: band0([1.0, 1.0, 1.0]),
            delta: nalgebra::DVector::zeros(3),
        };
        let intr = CameraIntrinsics::default_for_image(128, 128);
        let render = render_vertices(&model, &identity, &frame, &intr);
        for i in 0..mesh.vertex_count() {
            if render.visible[i] {
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        render.color[i][c],
                        model.appear_mean[3 * i + c],
                        epsilon = 1e-12
                    );
                }
            }
        }
        assert!(render.visible_count() > mesh.vertex_count() / 2);
    }

    #[test]
    fn empty_scene_leaves_background() {
        let intr = CameraIntrinsics::default_for_image(32, 32);
        let render = FrameRender {
            screen: vec![[0.0, 0.0]; 3],
            color: vec![[1.0, 0.0, 0.0]; 3],
            visible: vec![false; 3],
            cam_pos: vec![[0.0, 0.0, -1.0]; 3],
            cam_normal: vec![[0.0, 0.0, 1.0]; 3],
            behind: vec![true; 3],
        };
        let img = rasterize_preview(&render, &[[0, 1, 2]], &intr, &RasterOptions::default());
        assert_eq!(img, Image::constant(32, 32, [0.5, 0.5, 0.5]));
    }

    #[test]
    fn full_screen_triangle_fills_constant_color() {
        let intr = CameraIntrinsics::default_for_image(32, 32);
        let render = frame_render_from(
            vec![[-40.0, -40.0], [110.0, -40.0], [16.0, 140.0]],
            vec![[0.2, 0.4, 0.6]; 3],
            1.0,
        );
        let img = rasterize_preview(&render, &[[0, 1, 2]], &intr, &RasterOptions::default());
        for y in 0..32 {
            for x in 0..32 {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    assert_abs_diff_eq!(p[c], [0.2, 0.4, 0.6][c], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_depth_test() {
        let intr = CameraIntrinsics::default_for_image(16, 16);
        let mut render = frame_render_from(
            vec![
                [-20.0, -20.0],
                [60.0, -20.0],
                [8.0, 70.0],
                [-20.0, -20.0],
                [60.0, -20.0],
                [8.0, 70.0],
            ],
            vec![[1.0, 0.0, 0.0]; 6],
            2.0,
        );
        for i in 3..6 {
            render.cam_pos[i] = [0.0, 0.0, 1.0];
            render.color[i] = [0.0, 1.0, 0.0];
        }
        let img = rasterize_preview(&render, &[[0, 1, 2], [3, 4, 5]], &intr, &RasterOptions::default());
        assert_eq!(img.pixel(8, 8), [0.0, 1.0, 0.0]);
    }
}
