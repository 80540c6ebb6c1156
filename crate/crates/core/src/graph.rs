//! Deformation graphs: farthest-point downsampling, skinning weights and
//! node neighborhoods.
//!
//! Graph nodes carry pure displacements (no rotations), so linear blend
//! skinning reduces to a sparse weight matrix whose scalar weights expand to
//! 3x3 identity blocks when acting on stacked displacement vectors.

use crate::error::{Error, Result};
use crate::mesh::Mesh;

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    /// Flat node positions, length `3 * node_count`.
    pub node_positions: Vec<f64>,
    /// Mesh vertex each node was sampled from.
    pub node_vertex_ids: Vec<u32>,
    /// Symmetric node neighborhoods; empty until [`graph_neighborhoods`] runs.
    pub neighborhoods: Vec<Vec<u32>>,
}

impl DeformationGraph {
    pub fn node_count(&self) -> usize {
        self.node_vertex_ids.len()
    }

    pub fn node(&self, i: usize) -> [f64; 3] {
        [
            self.node_positions[3 * i],
            self.node_positions[3 * i + 1],
            self.node_positions[3 * i + 2],
        ]
    }
}

/// Per-vertex skinning weights over at most `k` graph nodes.
///
/// Rows are padded to exactly `k` entries with zero weights so the layout
/// serializes as two dense `|V| x k` arrays.
#[derive(Debug, Clone)]
pub struct SkinningMatrix {
    pub vertex_count: usize,
    pub node_count: usize,
    pub k: usize,
    /// Node indices, `vertex_count * k`.
    pub indices: Vec<u32>,
    /// Weights, `vertex_count * k`; each vertex row sums to 1.
    pub weights: Vec<f64>,
}

impl SkinningMatrix {
    /// Entries `(node, weight)` for one vertex, zero-weight padding included.
    pub fn row(&self, vertex: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let base = vertex * self.k;
        (0..self.k).map(move |j| (self.indices[base + j], self.weights[base + j]))
    }

    /// Apply to stacked node displacements (`3 * node_count`), writing stacked
    /// vertex displacements (`3 * vertex_count`).
    pub fn apply(&self, node_disp: &[f64], out: &mut [f64]) {
        debug_assert_eq!(node_disp.len(), 3 * self.node_count);
        debug_assert_eq!(out.len(), 3 * self.vertex_count);
        for v in 0..self.vertex_count {
            let mut acc = [0.0f64; 3];
            for (node, w) in self.row(v) {
                let n = node as usize;
                acc[0] += w * node_disp[3 * n];
                acc[1] += w * node_disp[3 * n + 1];
                acc[2] += w * node_disp[3 * n + 2];
            }
            out[3 * v..3 * v + 3].copy_from_slice(&acc);
        }
    }

    /// Transpose action: scatter stacked vertex vectors back onto nodes.
    pub fn apply_transpose(&self, vertex_vals: &[f64], out: &mut [f64]) {
        debug_assert_eq!(vertex_vals.len(), 3 * self.vertex_count);
        debug_assert_eq!(out.len(), 3 * self.node_count);
        out.fill(0.0);
        for v in 0..self.vertex_count {
            for (node, w) in self.row(v) {
                let n = node as usize;
                out[3 * n] += w * vertex_vals[3 * v];
                out[3 * n + 1] += w * vertex_vals[3 * v + 1];
                out[3 * n + 2] += w * vertex_vals[3 * v + 2];
            }
        }
    }

    /// Dense `|V| x |G|` scalar weight matrix (tests and small solves).
    pub fn to_dense_scalar(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.vertex_count, self.node_count);
        for v in 0..self.vertex_count {
            for (node, w) in self.row(v) {
                m[(v, node as usize)] += w;
            }
        }
        m
    }
}

/// Deterministic farthest-point sample of `count` vertex indices.
///
/// Ties resolve to the lowest index, so identical inputs give identical sets.
pub fn farthest_point_indices(positions: &[f64], count: usize, start: u32) -> Vec<u32> {
    let n = positions.len() / 3;
    assert!(count >= 1 && count <= n);
    let mut chosen = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start;
    chosen.push(current);
    for _ in 1..count {
        let c = current as usize;
        let cp = [positions[3 * c], positions[3 * c + 1], positions[3 * c + 2]];
        let mut best = 0u32;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = (positions[3 * i] - cp[0]).powi(2)
                + (positions[3 * i + 1] - cp[1]).powi(2)
                + (positions[3 * i + 2] - cp[2]).powi(2);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i as u32;
            }
        }
        current = best;
        chosen.push(current);
    }
    chosen
}

/// Downsample the mesh to `node_count` graph nodes by farthest-point sampling
/// from vertex 0. Neighborhoods stay empty until a skinning matrix exists.
pub fn build_deformation_graph(mesh: &Mesh, node_count: usize) -> Result<DeformationGraph> {
    let n = mesh.vertex_count();
    if node_count < 1 || node_count > n {
        return Err(Error::InvalidInput(format!(
            "node count {node_count} out of range 1..={n}"
        )));
    }
    let node_vertex_ids = if node_count == n {
        (0..n as u32).collect()
    } else {
        farthest_point_indices(&mesh.vertices, node_count, 0)
    };
    let mut node_positions = Vec::with_capacity(3 * node_count);
    for &v in &node_vertex_ids {
        let p = mesh.vertex(v as usize);
        node_positions.extend_from_slice(&p);
    }
    Ok(DeformationGraph {
        node_positions,
        node_vertex_ids,
        neighborhoods: vec![Vec::new(); node_count],
    })
}

/// Bind each vertex to its `k` nearest nodes with distance-falloff weights
/// `w ∝ (1 - d/d_{k+1})²`, normalized per vertex. A vertex coincident with a
/// node takes weight 1 on that node.
pub fn build_skinning_matrix(mesh: &Mesh, graph: &DeformationGraph, k: usize) -> Result<SkinningMatrix> {
    let g = graph.node_count();
    if k < 1 {
        return Err(Error::InvalidInput("skinning support k must be >= 1".into()));
    }
    if k > g {
        return Err(Error::InvalidInput(format!(
            "skinning support k = {k} exceeds node count {g}"
        )));
    }
    let n = mesh.vertex_count();
    let mut indices = vec![0u32; n * k];
    let mut weights = vec![0.0f64; n * k];
    let mut dists: Vec<(f64, u32)> = Vec::with_capacity(g);
    for v in 0..n {
        let p = mesh.vertex(v);
        dists.clear();
        for node in 0..g {
            let q = graph.node(node);
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            dists.push((d, node as u32));
        }
        // stable nearest ordering: distance, then node index
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let base = v * k;
        if dists[0].0 == 0.0 {
            indices[base] = dists[0].1;
            weights[base] = 1.0;
            for j in 1..k {
                indices[base + j] = dists[0].1;
                weights[base + j] = 0.0;
            }
            continue;
        }
        let cutoff = if k < g { dists[k].0 } else { 2.0 * dists[k - 1].0 };
        let mut sum = 0.0;
        for j in 0..k {
            let w = (1.0 - dists[j].0 / cutoff).max(0.0).powi(2);
            indices[base + j] = dists[j].1;
            weights[base + j] = w;
            sum += w;
        }
        if sum <= 0.0 {
            // all support nodes equidistant at the cutoff; fall back to uniform
            for j in 0..k {
                weights[base + j] = 1.0 / k as f64;
            }
        } else {
            for j in 0..k {
                weights[base + j] /= sum;
            }
        }
    }
    Ok(SkinningMatrix {
        vertex_count: n,
        node_count: g,
        k,
        indices,
        weights,
    })
}

/// Node neighborhoods: `j ∈ N_i` iff some vertex carries nonzero weight on
/// both `i` and `j`. Symmetric, no self-loops.
pub fn graph_neighborhoods(skinning: &SkinningMatrix) -> Vec<Vec<u32>> {
    let g = skinning.node_count;
    let mut sets: Vec<std::collections::BTreeSet<u32>> = vec![Default::default(); g];
    for v in 0..skinning.vertex_count {
        let row: Vec<(u32, f64)> = skinning.row(v).filter(|&(_, w)| w != 0.0).collect();
        for (a, _) in &row {
            for (b, _) in &row {
                if a != b {
                    sets[*a as usize].insert(*b);
                }
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}
