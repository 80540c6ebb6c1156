//! Procedural test geometry: a desk-scale face mask and an icosphere.
//!
//! The mask is a gently domed grid with nose, brow, cheek and mouth features.
//! It is not meant to look human; it provides the curvature variation, the
//! open boundary and the 66 landmark vertices that the pipeline needs, at a
//! size where tests run in seconds.

use crate::graph::farthest_point_indices;
use crate::mesh::{Mesh, LANDMARK_COUNT};
use std::collections::HashMap;

/// Build the default face mask with `rows * cols` vertices and 66 landmarks.
pub fn face_mask(rows: usize, cols: usize) -> Mesh {
    assert!(
        rows * cols >= LANDMARK_COUNT,
        "mask grid needs at least {LANDMARK_COUNT} vertices for the landmarks"
    );
    let mut vertices = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let s = -1.0 + 2.0 * c as f64 / (cols - 1) as f64;
            let t = -1.0 + 2.0 * r as f64 / (rows - 1) as f64;
            vertices.extend_from_slice(&mask_point(s, t));
        }
    }
    // outward side faces -z (toward a camera looking down +z), so winding is
    // counter-clockwise seen from -z
    let mut faces = Vec::with_capacity((rows - 1) * (cols - 1) * 2);
    let v = |r: usize, c: usize| (r * cols + c) as u32;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            faces.push([v(r, c), v(r + 1, c + 1), v(r, c + 1)]);
            faces.push([v(r, c), v(r + 1, c), v(r + 1, c + 1)]);
        }
    }
    let mut mesh = Mesh::new(vertices, faces, None).expect("procedural mask is well formed");
    // Spread landmarks from the central (nose-tip) vertex outward.
    let center = nearest_vertex(&mesh, [0.0, -0.12 * 1.2, 0.0]);
    let landmarks = farthest_point_indices(&mesh.vertices, LANDMARK_COUNT, center);
    mesh.set_landmarks(landmarks).expect("landmarks are distinct");
    mesh
}

fn mask_point(s: f64, t: f64) -> [f64; 3] {
    let x = 0.9 * s;
    let y = 1.2 * t;
    // gentle slopes: under a +/-45 degree yaw the surface should stay clear
    // of grazing view angles, where point sampling and rasterization drift
    // apart
    let dome = 0.38 * (1.0 - 0.5 * (s * s + t * t));
    let nose = 0.10 * (-(s / 0.28).powi(2) - ((t + 0.10) / 0.32).powi(2)).exp();
    let brow = 0.04 * (-((t - 0.35) / 0.20).powi(2) - (s / 0.55).powi(2)).exp();
    let mouth = -0.03 * (-((t + 0.55) / 0.18).powi(2) - (s / 0.30).powi(2)).exp();
    let cheek = 0.025
        * (-((s.abs() - 0.45) / 0.25).powi(2) - ((t + 0.15) / 0.30).powi(2)).exp();
    let socket = -0.035
        * (-((s.abs() - 0.35) / 0.18).powi(2) - ((t - 0.25) / 0.15).powi(2)).exp();
    [x, y, -(dome + nose + brow + mouth + cheek + socket)]
}

fn nearest_vertex(mesh: &Mesh, p: [f64; 3]) -> u32 {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for i in 0..mesh.vertex_count() {
        let v = mesh.vertex(i);
        let d = (v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2) + (v[2] - p[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = i as u32;
        }
    }
    best
}

/// Unit icosphere by repeated 4-way subdivision of an icosahedron.
pub fn icosphere(subdivisions: usize) -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut verts {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        *v = [v[0] / len, v[1] / len, v[2] / len];
    }
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mid = |a: u32, b: u32, verts: &mut Vec<[f64; 3]>, mids: &mut HashMap<(u32, u32), u32>| {
                let key = (a.min(b), a.max(b));
                *mids.entry(key).or_insert_with(|| {
                    let va = verts[a as usize];
                    let vb = verts[b as usize];
                    let mut m = [
                        (va[0] + vb[0]) / 2.0,
                        (va[1] + vb[1]) / 2.0,
                        (va[2] + vb[2]) / 2.0,
                    ];
                    let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    m = [m[0] / len, m[1] / len, m[2] / len];
                    verts.push(m);
                    (verts.len() - 1) as u32
                })
            };
            let ab = mid(f[0], f[1], &mut verts, &mut midpoints);
            let bc = mid(f[1], f[2], &mut verts, &mut midpoints);
            let ca = mid(f[2], f[0], &mut verts, &mut midpoints);
            new_faces.push([f[0], ab, ca]);
            new_faces.push([f[1], bc, ab]);
            new_faces.push([f[2], ca, bc]);
            new_faces.push([ab, bc, ca]);
        }
        faces = new_faces;
    }
    let flat: Vec<f64> = verts.iter().flat_map(|v| v.iter().copied()).collect();
    Mesh::new(flat, faces, None).expect("icosphere is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_has_expected_size_and_landmarks() {
        let mesh = face_mask(45, 45);
        assert_eq!(mesh.vertex_count(), 2025);
        assert_eq!(mesh.faces.len(), 2 * 44 * 44);
        assert_eq!(mesh.landmarks.len(), 66);
        let mut sorted = mesh.landmarks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 66);
    }

    #[test]
    fn mask_is_deterministic() {
        let a = face_mask(20, 20);
        let b = face_mask(20, 20);
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.landmarks, b.landmarks);
    }

    #[test]
    fn icosphere_vertices_are_unit() {
        let mesh = icosphere(2);
        assert_eq!(mesh.vertex_count(), 162);
        for i in 0..mesh.vertex_count() {
            let v = mesh.vertex(i);
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }
}
