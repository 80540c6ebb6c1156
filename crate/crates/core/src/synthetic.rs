//! Synthetic bases for desk-scale experiments.
//!
//! The toy blendshape set and the held-out ground-truth models are built from
//! smooth localized displacement/color fields. Smoothness matters: per-vertex
//! white noise would alias at render resolution and break the agreement
//! between rasterized frames and vertex sampling.

use crate::graph::{build_deformation_graph, build_skinning_matrix, graph_neighborhoods};
use crate::mesh::Mesh;
use crate::model::{
    fit_graph_blendshapes, ocl_project, orthonormalize, BlendshapeSet, FaceModel, SKIN_TONE,
};
use crate::rng::derive_rng;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A sum of Gaussian bumps over point positions: one scalar field per blob,
/// scaled by a per-blob 3-vector amplitude.
fn smooth_vector_field(positions: &[f64], blobs: usize, width_range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = positions.len() / 3;
    let mut field = vec![0.0f64; positions.len()];
    let (lo, hi) = bounds(positions);
    for _ in 0..blobs {
        let center = [
            rng.random_range(lo[0]..hi[0]),
            rng.random_range(lo[1]..hi[1]),
            rng.random_range(lo[2]..hi[2]),
        ];
        let width = rng.random_range(width_range.0..width_range.1);
        let amp = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        for i in 0..n {
            let dx = positions[3 * i] - center[0];
            let dy = positions[3 * i + 1] - center[1];
            let dz = positions[3 * i + 2] - center[2];
            let w = (-(dx * dx + dy * dy + dz * dz) / (width * width)).exp();
            field[3 * i] += amp[0] * w;
            field[3 * i + 1] += amp[1] * w;
            field[3 * i + 2] += amp[2] * w;
        }
    }
    field
}

fn bounds(positions: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in positions.chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    for c in 0..3 {
        if hi[c] - lo[c] < 1e-9 {
            hi[c] = lo[c] + 1e-9;
        }
    }
    (lo, hi)
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Build `count` smooth localized blendshapes with unit-order magnitudes and
/// the sampling standard deviations the dataset generator will use.
pub fn synthetic_blendshapes(mesh: &Mesh, count: usize, seed: u64) -> BlendshapeSet {
    let diag = mesh.bounding_box_diagonal();
    let mut basis = DMatrix::<f64>::zeros(mesh.vertices.len(), count);
    let mut sigmas = Vec::with_capacity(count);
    for j in 0..count {
        let mut rng = derive_rng(seed, "toy-blendshape", j as u64);
        let field = smooth_vector_field(&mesh.vertices, 2, (0.12 * diag, 0.3 * diag), &mut rng);
        // scale so one sigma of activation moves vertices ~1.2% of the diagonal
        let scale = 0.012 * diag / rms(&field).max(1e-12);
        for (i, v) in field.iter().enumerate() {
            basis[(i, j)] = v * scale;
        }
        sigmas.push(rng.random_range(0.6..1.4));
    }
    BlendshapeSet { basis, sigmas }
}

/// Scales for a held-out ground-truth model.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthScales {
    /// RMS per-vertex displacement per unit of identity activation,
    /// as a fraction of the bounding-box diagonal.
    pub geometry_rms: f64,
    /// RMS per-channel albedo change per unit of appearance activation.
    pub appearance_rms: f64,
    /// Peak amplitude of the smooth offset added to the mean appearance.
    pub mean_appearance_amp: f64,
}

impl Default for GroundTruthScales {
    fn default() -> Self {
        GroundTruthScales {
            geometry_rms: 0.015,
            appearance_rms: 0.05,
            mean_appearance_amp: 0.06,
        }
    }
}

/// Build a ground-truth model with smooth identity geometry and appearance
/// variation. Distinct seeds give models a learner never sees at init.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_ground_truth_model(
    mesh: &Mesh,
    node_count: usize,
    skinning_k: usize,
    identity_dim: usize,
    appearance_dim: usize,
    blend: &BlendshapeSet,
    scales: GroundTruthScales,
    seed: u64,
) -> crate::error::Result<FaceModel> {
    let mut graph = build_deformation_graph(mesh, node_count)?;
    let skinning = build_skinning_matrix(mesh, &graph, skinning_k)?;
    graph.neighborhoods = graph_neighborhoods(&skinning);
    let graph_blendshapes = orthonormalize(&fit_graph_blendshapes(&blend.basis, &skinning)?)?;

    let diag = mesh.bounding_box_diagonal();
    let ng3 = 3 * graph.node_count();
    let mut geom_basis = DMatrix::<f64>::zeros(ng3, identity_dim);
    let mut scratch = vec![0.0f64; mesh.vertices.len()];
    for j in 0..identity_dim {
        let mut rng = derive_rng(seed, "gt-geom", j as u64);
        let field = smooth_vector_field(&graph.node_positions, 3, (0.2 * diag, 0.45 * diag), &mut rng);
        for (i, v) in field.iter().enumerate() {
            geom_basis[(i, j)] = *v;
        }
    }
    // project first, then scale each column by its skinned mesh displacement
    let mut geom_basis = ocl_project(&geom_basis, &graph_blendshapes)?;
    for j in 0..identity_dim {
        let col: Vec<f64> = geom_basis.column(j).iter().copied().collect();
        skinning.apply(&col, &mut scratch);
        let target = scales.geometry_rms * diag;
        let scale = target / rms(&scratch).max(1e-12);
        geom_basis.column_mut(j).scale_mut(scale);
    }

    let nv3 = mesh.vertices.len();
    let mut appear_basis = DMatrix::<f64>::zeros(nv3, appearance_dim);
    for j in 0..appearance_dim {
        let mut rng = derive_rng(seed, "gt-appear", j as u64);
        let field = smooth_vector_field(&mesh.vertices, 3, (0.25 * diag, 0.5 * diag), &mut rng);
        let scale = scales.appearance_rms / rms(&field).max(1e-12);
        for (i, v) in field.iter().enumerate() {
            appear_basis[(i, j)] = v * scale;
        }
    }

    let mut rng = derive_rng(seed, "gt-mean-appear", 0);
    let offset = smooth_vector_field(&mesh.vertices, 4, (0.2 * diag, 0.4 * diag), &mut rng);
    let peak = offset.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut appear_mean = Vec::with_capacity(nv3);
    for (i, o) in offset.iter().enumerate() {
        appear_mean.push(SKIN_TONE[i % 3] + o / peak * scales.mean_appearance_amp);
    }

    let mean_graph = graph.node_positions.clone();
    let model = FaceModel {
        mesh: mesh.clone(),
        graph,
        skinning,
        mean_graph,
        geom_basis,
        blendshapes: blend.basis.clone(),
        graph_blendshapes,
        appear_mean,
        appear_basis,
        expression_sigmas: blend.sigmas.clone(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::face_mask;

    #[test]
    fn blendshapes_are_deterministic_and_sized() {
        let mesh = face_mask(15, 15);
        let a = synthetic_blendshapes(&mesh, 8, 3);
        let b = synthetic_blendshapes(&mesh, 8, 3);
        assert_eq!(a.basis, b.basis);
        assert_eq!(a.sigmas, b.sigmas);
        assert_eq!(a.basis.ncols(), 8);
        assert_eq!(a.basis.nrows(), 3 * mesh.vertex_count());
        assert!(a.sigmas.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn ground_truth_model_validates_and_has_scaled_columns() {
        let mesh = face_mask(21, 21);
        let blend = synthetic_blendshapes(&mesh, 4, 3);
        let scales = GroundTruthScales::default();
        let model =
            synthetic_ground_truth_model(&mesh, 40, 4, 5, 3, &blend, scales, 11).unwrap();
        let diag = mesh.bounding_box_diagonal();
        let mut scratch = vec![0.0; mesh.vertices.len()];
        for j in 0..5 {
            let col: Vec<f64> = model.geom_basis.column(j).iter().copied().collect();
            model.skinning.apply(&col, &mut scratch);
            let rms = (scratch.iter().map(|v| v * v).sum::<f64>() / scratch.len() as f64).sqrt();
            let expect = scales.geometry_rms * diag;
            assert!((rms - expect).abs() / expect < 1e-9, "column {j} rms {rms}");
        }
        // identity variation stays orthogonal to the expression basis
        let residual = model.graph_blendshapes.transpose() * &model.geom_basis;
        assert!(residual.amax() <= 1e-10);
    }

    #[test]
    fn distinct_seeds_give_distinct_models() {
        let mesh = face_mask(11, 11);
        let blend = synthetic_blendshapes(&mesh, 3, 3);
        let a = synthetic_ground_truth_model(&mesh, 25, 4, 4, 2, &blend, Default::default(), 1)
            .unwrap();
        let b = synthetic_ground_truth_model(&mesh, 25, 4, 4, 2, &blend, Default::default(), 2)
            .unwrap();
        assert_ne!(a.geom_basis, b.geom_basis);
        assert_ne!(a.appear_basis, b.appear_basis);
    }
}
