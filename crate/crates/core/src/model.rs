//! The learnable face identity model.
//!
//! Geometry lives in a low-dimensional subspace on the deformation graph and
//! transfers to the mesh through skinning; expressions come from a fixed
//! blendshape basis applied directly on the mesh. Identity and expression
//! stay separated because the learned graph basis is projected onto the
//! orthogonal complement of the graph-domain blendshape basis both inside
//! every forward assembly and after every optimizer update.

use crate::error::{Error, Result};
use crate::graph::{
    build_deformation_graph, build_skinning_matrix, graph_neighborhoods, DeformationGraph,
    SkinningMatrix,
};
use crate::mesh::Mesh;
use crate::rng::derive_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Initial mean appearance: a constant mid-range skin tone.
pub const SKIN_TONE: [f64; 3] = [0.8, 0.6, 0.5];

const GEOM_INIT_RELATIVE_STD: f64 = 1e-3;
const APPEAR_INIT_STD: f64 = 1e-3;

/// A fixed expression basis plus the per-mode standard deviations used to
/// regularize its parameters.
#[derive(Debug, Clone)]
pub struct BlendshapeSet {
    /// `3|V| x b` displacement columns.
    pub basis: DMatrix<f64>,
    /// `b` positive standard deviations.
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FaceModel {
    pub mesh: Mesh,
    pub graph: DeformationGraph,
    pub skinning: SkinningMatrix,
    /// Mean graph node positions, `3|G|`.
    pub mean_graph: Vec<f64>,
    /// Learnable graph deformation basis, `3|G| x g`. Kept inside the
    /// orthogonal complement of `graph_blendshapes` between updates.
    pub geom_basis: DMatrix<f64>,
    /// Fixed mesh-domain expression basis, `3|V| x b`.
    pub blendshapes: DMatrix<f64>,
    /// Orthonormal graph-domain expression basis, `3|G| x b`.
    pub graph_blendshapes: DMatrix<f64>,
    /// Learnable mean appearance, `3|V|` RGB.
    pub appear_mean: Vec<f64>,
    /// Learnable appearance basis, `3|V| x |β|`.
    pub appear_basis: DMatrix<f64>,
    /// Per-mode expression standard deviations, `b`.
    pub expression_sigmas: Vec<f64>,
}

/// Identity parameters shared by every frame of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

impl IdentityParams {
    pub fn zeros(g: usize, n_beta: usize) -> Self {
        IdentityParams {
            alpha: DVector::zeros(g),
            beta: DVector::zeros(n_beta),
        }
    }
}

/// Per-frame pose, illumination and expression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    /// Axis-angle rotation, magnitude kept below π by wrapping.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    /// SH illumination, band-major RGB triplets.
    pub gamma: [f64; 27],
    pub delta: DVector<f64>,
}

impl FrameParams {
    pub fn neutral(b: usize) -> Self {
        FrameParams {
            rotation: [0.0; 3],
            translation: [0.0; 3],
            gamma: [0.0; 27],
            delta: DVector::zeros(b),
        }
    }
}

impl FaceModel {
    /// Mean mesh shape `v̄`, `3|V|`.
    pub fn mean_shape(&self) -> &[f64] {
        &self.mesh.vertices
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn identity_dim(&self) -> usize {
        self.geom_basis.ncols()
    }

    pub fn appearance_dim(&self) -> usize {
        self.appear_basis.ncols()
    }

    pub fn expression_dim(&self) -> usize {
        self.blendshapes.ncols()
    }

    /// The geometry basis as used everywhere: projected onto the orthogonal
    /// complement of the graph blendshapes.
    pub fn projected_geom_basis(&self) -> DMatrix<f64> {
        ocl_project(&self.geom_basis, &self.graph_blendshapes)
            .expect("model dimensions are consistent")
    }

    /// Re-project the stored basis after an optimizer update so checkpoints
    /// stay inside the complement.
    pub fn reproject_geom_basis(&mut self) {
        self.geom_basis = self.projected_geom_basis();
    }

    /// Graph node positions `ḡ + OCL(Θ_s)·α`, `3|G|`.
    pub fn assemble_graph(&self, alpha: &DVector<f64>) -> Vec<f64> {
        let p = self.projected_geom_basis();
        let disp = &p * alpha;
        self.mean_graph
            .iter()
            .zip(disp.iter())
            .map(|(m, d)| m + d)
            .collect()
    }

    /// Mesh vertex positions `v̄ + S·OCL(Θ_s)·α + B·δ`, `3|V|`.
    ///
    /// The skinning acts on the assembled graph displacement; the dense
    /// product `S·OCL(Θ_s)` is never materialized.
    pub fn assemble_vertices(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Vec<f64> {
        let p = self.projected_geom_basis();
        self.assemble_vertices_with_projected(&p, alpha, delta)
    }

    pub(crate) fn assemble_vertices_with_projected(
        &self,
        projected: &DMatrix<f64>,
        alpha: &DVector<f64>,
        delta: &DVector<f64>,
    ) -> Vec<f64> {
        let graph_disp = projected * alpha;
        let mut out = vec![0.0f64; self.mesh.vertices.len()];
        self.skinning.apply(graph_disp.as_slice(), &mut out);
        for (o, base) in out.iter_mut().zip(&self.mesh.vertices) {
            *o += base;
        }
        let expr = &self.blendshapes * delta;
        for (o, e) in out.iter_mut().zip(expr.iter()) {
            *o += e;
        }
        out
    }

    /// Identity geometry without expression: `v(α, 0)`.
    pub fn neutral_vertices(&self, alpha: &DVector<f64>) -> Vec<f64> {
        self.assemble_vertices(alpha, &DVector::zeros(self.expression_dim()))
    }

    /// Per-vertex appearance `r̄ + Θ_a·β`, `3|V|`. Not clamped.
    pub fn assemble_appearance(&self, beta: &DVector<f64>) -> Vec<f64> {
        let var = &self.appear_basis * beta;
        self.appear_mean
            .iter()
            .zip(var.iter())
            .map(|(m, v)| m + v)
            .collect()
    }

    /// Consistency checks on dimensions, orthonormality and sigmas.
    pub fn validate(&self) -> Result<()> {
        let nv3 = self.mesh.vertices.len();
        let ng3 = 3 * self.graph.node_count();
        if self.mean_graph.len() != ng3 {
            return Err(Error::Dimension("mean graph length".into()));
        }
        if self.geom_basis.nrows() != ng3 {
            return Err(Error::Dimension("geometry basis rows".into()));
        }
        if self.blendshapes.nrows() != nv3 {
            return Err(Error::Dimension("blendshape rows".into()));
        }
        if self.graph_blendshapes.nrows() != ng3 {
            return Err(Error::Dimension("graph blendshape rows".into()));
        }
        if self.appear_mean.len() != nv3 || self.appear_basis.nrows() != nv3 {
            return Err(Error::Dimension("appearance rows".into()));
        }
        if self.expression_sigmas.len() != self.blendshapes.ncols() {
            return Err(Error::Dimension("expression sigma count".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if self.expression_sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("expression sigmas must be positive".into()));
        }
        if self.mesh.landmarks.len() != crate::mesh::LANDMARK_COUNT {
            return Err(Error::InvalidInput(format!(
                "model mesh needs {} landmarks, has {}",
                crate::mesh::LANDMARK_COUNT,
                self.mesh.landmarks.len()
            )));
        }
        let bg = &self.graph_blendshapes;
        let gram = bg.transpose() * bg;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - expect).abs() > 1e-10 {
                    return Err(Error::InvalidInput(format!(
                        "graph blendshapes not orthonormal at ({i}, {j}): {}",
                        gram[(i, j)]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solve `min_X ‖S·X − B‖_F` for the graph-domain blendshapes.
///
/// The skinning acts channel-wise, so the normal equations factor into the
/// scalar weight matrix: one `|G| x |G|` SPD solve shared by all columns and
/// channels. Rank deficiency is reported with the offending node.
pub fn fit_graph_blendshapes(
    blendshapes: &DMatrix<f64>,
    skinning: &SkinningMatrix,
) -> Result<DMatrix<f64>> {
    let nv = skinning.vertex_count;
    let ng = skinning.node_count;
    if blendshapes.nrows() != 3 * nv {
        return Err(Error::Dimension(format!(
            "blendshape rows {} do not match 3 x {nv} vertices",
            blendshapes.nrows()
        )));
    }
    let b = blendshapes.ncols();
    // normal matrix WᵀW assembled from the sparse rows
    let mut wtw = DMatrix::<f64>::zeros(ng, ng);
    for v in 0..nv {
        let row: Vec<(u32, f64)> = skinning.row(v).collect();
        for &(a, wa) in &row {
            for &(c, wc) in &row {
                wtw[(a as usize, c as usize)] += wa * wc;
            }
        }
    }
    for node in 0..ng {
        if wtw[(node, node)] <= 0.0 {
            return Err(Error::RankDeficientSkinning { node });
        }
    }
    let chol = match nalgebra::Cholesky::new(wtw.clone()) {
        Some(c) => c,
        None => {
            let node = (0..ng)
                .min_by(|&a, &b| wtw[(a, a)].partial_cmp(&wtw[(b, b)]).unwrap())
                .unwrap_or(0);
            return Err(Error::RankDeficientSkinning { node });
        }
    };
    let mut out = DMatrix::<f64>::zeros(3 * ng, b);
    let mut rhs = DVector::<f64>::zeros(ng);
    for j in 0..b {
        for ch in 0..3 {
            rhs.fill(0.0);
            for v in 0..nv {
                let y = blendshapes[(3 * v + ch, j)];
                if y == 0.0 {
                    continue;
                }
                for (node, w) in skinning.row(v) {
                    rhs[node as usize] += w * y;
                }
            }
            let x = chol.solve(&rhs);
            for node in 0..ng {
                out[(3 * node + ch, j)] = x[node];
            }
        }
    }
    Ok(out)
}

/// Orthonormalize columns by modified Gram–Schmidt with re-orthogonalization.
/// Preserves the column span; numerically dependent columns are an error.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut q = m.clone();
    let n = q.ncols();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.column(i).into_owned();
                let dot = q.column(j).dot(&qi);
                let mut col = q.column_mut(j);
                col.axpy(-dot, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if norm < 1e-10 {
            return Err(Error::DependentColumn { column: j, pivot: norm });
        }
        q.column_mut(j, ).scale_mut(1.0 / norm);
    }
    Ok(q)
}

/// Project `Θ_s` onto the orthogonal complement of an orthonormal basis:
/// `Θ_s − B_G (B_Gᵀ Θ_s)`.
pub fn ocl_project(theta: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if theta.nrows() != basis.nrows() {
        return Err(Error::Dimension(format!(
            "row mismatch: {} vs {}",
            theta.nrows(),
            basis.nrows()
        )));
    }
    let coeff = basis.transpose() * theta;
    Ok(theta - basis * coeff)
}

/// Complement projection for a general (non-orthonormal) basis:
/// `Θ_s − B (BᵀB)⁻¹ Bᵀ Θ_s`. Fallback route kept for cross-checking the
/// orthonormal fast path.
pub fn ocl_project_general(theta: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if theta.nrows() != basis.nrows() {
        return Err(Error::Dimension(format!(
            "row mismatch: {} vs {}",
            theta.nrows(),
            basis.nrows()
        )));
    }
    let gram = basis.transpose() * basis;
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or_else(|| Error::Degenerate("basis has dependent columns".into()))?;
    let bt_theta = basis.transpose() * theta;
    let solved = chol.solve(&bt_theta);
    Ok(theta - basis * solved)
}

/// Complement projection applied to a single stacked vector.
pub(crate) fn ocl_project_vec(v: &[f64], basis: &DMatrix<f64>) -> Vec<f64> {
    let dv = DVector::from_column_slice(v);
    let coeff = basis.transpose() * &dv;
    let out = dv - basis * coeff;
    out.as_slice().to_vec()
}

/// Build a fresh model on a mesh: graph and skinning from the mean shape,
/// blendshapes transferred and orthonormalized, constant skin tone, and
/// small-noise bases seeded deterministically.
pub fn init_model(
    mesh: &Mesh,
    node_count: usize,
    skinning_k: usize,
    identity_dim: usize,
    appearance_dim: usize,
    blend: &BlendshapeSet,
    seed: u64,
) -> Result<FaceModel> {
    if mesh.landmarks.len() != crate::mesh::LANDMARK_COUNT {
        return Err(Error::InvalidInput(format!(
            "mesh needs {} landmarks for a model, has {}",
            crate::mesh::LANDMARK_COUNT,
            mesh.landmarks.len()
        )));
    }
    if blend.basis.nrows() != mesh.vertices.len() {
        return Err(Error::Dimension(format!(
            "blendshape rows {} do not match mesh ({})",
            blend.basis.nrows(),
            mesh.vertices.len()
        )));
    }
    if blend.sigmas.len() != blend.basis.ncols() {
        return Err(Error::Dimension("one sigma per blendshape required".into()));
    }
    let mut graph = build_deformation_graph(mesh, node_count)?;
    let skinning = build_skinning_matrix(mesh, &graph, skinning_k)?;
    graph.neighborhoods = graph_neighborhoods(&skinning);
    let graph_blendshapes = orthonormalize(&fit_graph_blendshapes(&blend.basis, &skinning)?)?;

    let ng3 = 3 * graph.node_count();
    let nv3 = mesh.vertices.len();
    let geom_std = GEOM_INIT_RELATIVE_STD * mesh.bounding_box_diagonal();
    let mut rng = derive_rng(seed, "model-init-geom", 0);
    let geom_raw = DMatrix::from_fn(ng3, identity_dim, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        geom_std * z
    });
    let geom_basis = ocl_project(&geom_raw, &graph_blendshapes)?;
    let mut rng = derive_rng(seed, "model-init-appear", 0);
    let appear_basis = DMatrix::from_fn(nv3, appearance_dim, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        APPEAR_INIT_STD * z
    });
    let mut appear_mean = Vec::with_capacity(nv3);
    for _ in 0..mesh.vertex_count() {
        appear_mean.extend_from_slice(&SKIN_TONE);
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
