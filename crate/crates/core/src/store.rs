//! Model and blendshape serialization over the named-array archive.
//!
//! Matrices are stored column-major with dims `[rows, cols]`. The archive is
//! self-contained for rendering and fitting: besides the model arrays it
//! carries the mesh faces, landmark indices and graph node ids.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{graph_neighborhoods, DeformationGraph, SkinningMatrix};
use crate::mesh::Mesh;
use crate::model::{BlendshapeSet, FaceModel};
use nalgebra::DMatrix;
use std::path::Path;

fn matrix_entry(arc: &mut Archive, name: &str, m: &DMatrix<f64>) {
    arc.insert_f64(name, vec![m.nrows(), m.ncols()], m.as_slice().to_vec());
}

fn matrix_from(arc: &Archive, path: &Path, name: &str) -> Result<DMatrix<f64>> {
    let (dims, data) = arc.f64_entry(path, name)?;
    if dims.len() != 2 {
        return Err(Error::archive(path, format!("`{name}` must be 2-d")));
    }
    Ok(DMatrix::from_column_slice(dims[0], dims[1], data))
}

pub fn save_model(model: &FaceModel, path: impl AsRef<Path>) -> Result<()> {
    let mut arc = Archive::new();
    write_model_arrays(&mut arc, model, "");
    arc.write(path)
}

pub(crate) fn write_model_arrays(arc: &mut Archive, model: &FaceModel, prefix: &str) {
    let p = |n: &str| format!("{prefix}{n}");
    arc.insert_f64(&p("mean_shape"), vec![model.mesh.vertices.len()], model.mesh.vertices.clone());
    arc.insert_f64(&p("mean_graph"), vec![model.mean_graph.len()], model.mean_graph.clone());
    matrix_entry(arc, &p("geom_basis"), &model.geom_basis);
    arc.insert_f64(&p("appear_mean"), vec![model.appear_mean.len()], model.appear_mean.clone());
    matrix_entry(arc, &p("appear_basis"), &model.appear_basis);
    matrix_entry(arc, &p("blendshapes"), &model.blendshapes);
    matrix_entry(arc, &p("graph_blendshapes"), &model.graph_blendshapes);
    arc.insert_i64(
        &p("skinning_indices"),
        vec![model.skinning.vertex_count, model.skinning.k],
        model.skinning.indices.iter().map(|&i| i as i64).collect(),
    );
    arc.insert_f64(
        &p("skinning_weights"),
        vec![model.skinning.vertex_count, model.skinning.k],
        model.skinning.weights.clone(),
    );
    arc.insert_f64(
        &p("expression_sigmas"),
        vec![model.expression_sigmas.len()],
        model.expression_sigmas.clone(),
    );
    arc.insert_i64(
        &p("landmark_indices"),
        vec![model.mesh.landmarks.len()],
        model.mesh.landmarks.iter().map(|&i| i as i64).collect(),
    );
    arc.insert_i64(
        &p("faces"),
        vec![model.mesh.faces.len(), 3],
        model.mesh.faces.iter().flat_map(|f| f.iter().map(|&v| v as i64)).collect(),
    );
    arc.insert_i64(
        &p("graph_node_ids"),
        vec![model.graph.node_vertex_ids.len()],
        model.graph.node_vertex_ids.iter().map(|&i| i as i64).collect(),
    );
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FaceModel> {
    let path = path.as_ref();
    let arc = Archive::read(path)?;
    read_model_arrays(&arc, path, "")
}

pub(crate) fn read_model_arrays(arc: &Archive, path: &Path, prefix: &str) -> Result<FaceModel> {
    let p = |n: &str| format!("{prefix}{n}");
    let (_, mean_shape) = arc.f64_entry(path, &p("mean_shape"))?;
    let (fdims, faces_raw) = arc.i64_entry(path, &p("faces"))?;
    if fdims.len() != 2 || fdims[1] != 3 {
        return Err(Error::archive(path, "`faces` must be |F| x 3"));
    }
    let faces: Vec<[u32; 3]> = faces_raw
        .chunks_exact(3)
        .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
        .collect();
    let (_, landmarks) = arc.i64_entry(path, &p("landmark_indices"))?;
    let mesh = Mesh::new(mean_shape.to_vec(), faces, None)?
        .with_landmarks(landmarks.iter().map(|&i| i as u32).collect())?;

    let (_, mean_graph) = arc.f64_entry(path, &p("mean_graph"))?;
    let (_, node_ids) = arc.i64_entry(path, &p("graph_node_ids"))?;
    let (sdims, skin_idx) = arc.i64_entry(path, &p("skinning_indices"))?;
    let (wdims, skin_w) = arc.f64_entry(path, &p("skinning_weights"))?;
    if sdims.len() != 2 || wdims != sdims {
        return Err(Error::archive(path, "skinning arrays must be |V| x k and match"));
    }
    let skinning = SkinningMatrix {
        vertex_count: sdims[0],
        node_count: mean_graph.len() / 3,
        k: sdims[1],
        indices: skin_idx.iter().map(|&i| i as u32).collect(),
        weights: skin_w.to_vec(),
    };
    if skinning.vertex_count != mesh.vertex_count() {
        return Err(Error::archive(path, "skinning vertex count does not match mesh"));
    }
    let mut graph = DeformationGraph {
        node_positions: mean_graph.to_vec(),
        node_vertex_ids: node_ids.iter().map(|&i| i as u32).collect(),
        neighborhoods: Vec::new(),
    };
    graph.neighborhoods = graph_neighborhoods(&skinning);

    let (_, sigmas) = arc.f64_entry(path, &p("expression_sigmas"))?;
    let model = FaceModel {
        mean_graph: mean_graph.to_vec(),
        geom_basis: matrix_from(arc, path, &p("geom_basis"))?,
        blendshapes: matrix_from(arc, path, &p("blendshapes"))?,
        graph_blendshapes: matrix_from(arc, path, &p("graph_blendshapes"))?,
        appear_mean: arc.f64_entry(path, &p("appear_mean"))?.1.to_vec(),
        appear_basis: matrix_from(arc, path, &p("appear_basis"))?,
        expression_sigmas: sigmas.to_vec(),
        mesh,
        graph,
        skinning,
    };
    model.validate()?;
    Ok(model)
}

/// Blendshape input uses the same container: `blendshapes` and
/// `expression_sigmas` only.
pub fn save_blendshapes(set: &BlendshapeSet, path: impl AsRef<Path>) -> Result<()> {
    let mut arc = Archive::new();
    matrix_entry(&mut arc, "blendshapes", &set.basis);
    arc.insert_f64("expression_sigmas", vec![set.sigmas.len()], set.sigmas.clone());
    arc.write(path)
}

pub fn load_blendshapes(path: impl AsRef<Path>) -> Result<BlendshapeSet> {
    let path = path.as_ref();
    let arc = Archive::read(path)?;
    let basis = matrix_from(&arc, path, "blendshapes")?;
    let (_, sigmas) = arc.f64_entry(path, "expression_sigmas")?;
    if sigmas.len() != basis.ncols() {
        return Err(Error::archive(path, "one sigma per blendshape required"));
    }
    Ok(BlendshapeSet { basis, sigmas: sigmas.to_vec() })
}
