//! Reverse-mode differentiation of the full objective.
//!
//! The computation from parameters to loss is a fixed pipeline, so instead of
//! a generic expression graph the tape keeps per-stage forward state and runs
//! fused analytic Jacobians backward: image sampling → shading/SH → projection
//! → rigid pose → normals → skinning/blendshapes → subspace bases. Visibility
//! and the sparsity edge weights are constants of one evaluation; the
//! finite-difference checker detects coordinates whose perturbation crosses a
//! bilinear cell or flips visibility and excludes them.

use crate::camera::{projection_jacobian, rotation_jacobian};
use crate::dataset::MultiFrameSample;
use crate::error::{Error, Result};
use crate::losses::{
    expression_reg, landmark_loss, membrane_energy, sparsity_energy, LandmarkSet, LossBreakdown,
    LossConfig,
};
use crate::model::{FaceModel, FrameParams, IdentityParams};
use crate::params::{BlockKind, ParamVector};
use crate::render::{forward_frame, FrameForward};
use crate::shading::{sh_basis_jacobian, sh_basis_raw};
use nalgebra::{DMatrix, DVector, Matrix3};

/// Which parameter blocks receive gradients. Frozen blocks get exact zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveBlocks {
    pub alpha: bool,
    pub beta: bool,
    pub rotation: bool,
    pub translation: bool,
    pub gamma: bool,
    pub delta: bool,
    pub geom_basis: bool,
    pub appear_basis: bool,
    pub appear_mean: bool,
}

impl ActiveBlocks {
    pub fn all() -> Self {
        ActiveBlocks {
            alpha: true,
            beta: true,
            rotation: true,
            translation: true,
            gamma: true,
            delta: true,
            geom_basis: true,
            appear_basis: true,
            appear_mean: true,
        }
    }

    pub fn none() -> Self {
        ActiveBlocks {
            alpha: false,
            beta: false,
            rotation: false,
            translation: false,
            gamma: false,
            delta: false,
            geom_basis: false,
            appear_basis: false,
            appear_mean: false,
        }
    }

    pub fn sample_only() -> Self {
        ActiveBlocks { geom_basis: false, appear_basis: false, appear_mean: false, ..Self::all() }
    }

    pub fn pose_only() -> Self {
        ActiveBlocks { rotation: true, translation: true, ..Self::none() }
    }

    pub fn contains(&self, kind: BlockKind) -> bool {
        match kind {
            BlockKind::Alpha => self.alpha,
            BlockKind::Beta => self.beta,
            BlockKind::Rotation(_) => self.rotation,
            BlockKind::Translation(_) => self.translation,
            BlockKind::Gamma(_) => self.gamma,
            BlockKind::Delta(_) => self.delta,
            BlockKind::GeomBasis => self.geom_basis,
            BlockKind::AppearBasis => self.appear_basis,
            BlockKind::AppearMean => self.appear_mean,
        }
    }

    fn need_vertex_grad(&self) -> bool {
        self.alpha || self.geom_basis || self.delta
    }

    fn need_albedo_grad(&self) -> bool {
        self.beta || self.appear_basis || self.appear_mean
    }
}

#[derive(Debug, Clone)]
pub struct FrameGradients {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub gamma: [f64; 27],
    pub delta: DVector<f64>,
}

/// Gradients of the weighted total loss for every block.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub frames: Vec<FrameGradients>,
    pub geom_basis: DMatrix<f64>,
    pub appear_basis: DMatrix<f64>,
    pub appear_mean: Vec<f64>,
}

impl Gradients {
    fn zeros(model: &FaceModel, frame_count: usize) -> Self {
        Gradients {
            alpha: DVector::zeros(model.identity_dim()),
            beta: DVector::zeros(model.appearance_dim()),
            frames: (0..frame_count)
                .map(|_| FrameGradients {
                    rotation: [0.0; 3],
                    translation: [0.0; 3],
                    gamma: [0.0; 27],
                    delta: DVector::zeros(model.expression_dim()),
                })
                .collect(),
            geom_basis: DMatrix::zeros(3 * model.node_count(), model.identity_dim()),
            appear_basis: DMatrix::zeros(3 * model.vertex_count(), model.appearance_dim()),
            appear_mean: vec![0.0; 3 * model.vertex_count()],
        }
    }

    fn reset(&mut self) {
        self.alpha.fill(0.0);
        self.beta.fill(0.0);
        for f in &mut self.frames {
            f.rotation = [0.0; 3];
            f.translation = [0.0; 3];
            f.gamma = [0.0; 27];
            f.delta.fill(0.0);
        }
        self.geom_basis.fill(0.0);
        self.appear_basis.fill(0.0);
        self.appear_mean.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-evaluation record of the discrete state: visibility per frame and the
/// bilinear cells sampled by the photometric term. Two evaluations with equal
/// diagnostics saw the same piecewise region of the objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalDiag {
    pub visible: Vec<Vec<bool>>,
    pub cells: Vec<Vec<[usize; 2]>>,
}

/// One sampled visible vertex in the photometric term.
#[derive(Debug, Clone, Copy)]
struct SampleRec {
    vertex: usize,
    value: [f64; 3],
    jac: [[f64; 2]; 3],
}

/// Reverse-mode accumulation state: forward intermediates of the last
/// evaluation plus gradient buffers aligned to the parameter blocks.
#[derive(Debug, Default)]
pub struct GradientTape {
    grads: Option<Gradients>,
    pub diag: EvalDiag,
    forwards: Vec<FrameForward>,
    positions: Vec<Vec<f64>>,
    samples: Vec<Vec<SampleRec>>,
    landmark_screens: Vec<Vec<[f64; 2]>>,
    albedo: Vec<f64>,
    graph_disp: Vec<f64>,
    g_vertex: Vec<f64>,
    g_maccum: Vec<f64>,
    g_albedo: Vec<f64>,
    g_graph: Vec<f64>,
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape::default()
    }

    /// Gradients of the last evaluation. Meaningful only after a call with
    /// active blocks.
    pub fn gradients(&self) -> &Gradients {
        self.grads.as_ref().expect("no gradient evaluation recorded")
    }

    /// Move the gradients out (the next evaluation re-allocates them).
    pub fn take_gradients(&mut self) -> Gradients {
        self.grads.take().expect("no gradient evaluation recorded")
    }
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn rt_mul(r: &Matrix3<f64>, v: &[f64; 3]) -> [f64; 3] {
    // transpose multiply
    [
        r[(0, 0)] * v[0] + r[(1, 0)] * v[1] + r[(2, 0)] * v[2],
        r[(0, 1)] * v[0] + r[(1, 1)] * v[1] + r[(2, 1)] * v[2],
        r[(0, 2)] * v[0] + r[(1, 2)] * v[1] + r[(2, 2)] * v[2],
    ]
}

/// Evaluate the total loss, and when `active` is given also its gradient for
/// every active block, on one multi-frame sample. Loss values are identical
/// to [`crate::losses::total_loss`]; visibility and `edge_weights` are
/// treated as constants of the evaluation.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &FaceModel,
    sample: &MultiFrameSample,
    identity: &IdentityParams,
    frames: &[FrameParams],
    cfg: &LossConfig,
    edge_weights: &[f64],
    active: Option<&ActiveBlocks>,
    tape: &mut GradientTape,
) -> Result<LossBreakdown> {
    cfg.weights.validate()?;
    cfg.sparsity.validate()?;
    let m = sample.frames.len();
    if frames.len() != m {
        return Err(Error::Dimension(format!(
            "{} frame parameter sets for {m} frames",
            frames.len()
        )));
    }
    if identity.alpha.len() != model.identity_dim() || identity.beta.len() != model.appearance_dim() {
        return Err(Error::Dimension("identity parameter dimensions".into()));
    }
    if edge_weights.len() != model.mesh.edges().len() {
        return Err(Error::Dimension(format!(
            "{} edge weights for {} mesh edges",
            edge_weights.len(),
            model.mesh.edges().len()
        )));
    }
    let intr = sample.intrinsics();
    let w = cfg.weights;
    let nv = model.vertex_count();

    // forward: identity-level assembly shared by all frames
    let projected = model.projected_geom_basis();
    let graph_disp_v = &projected * &identity.alpha;
    let mut base = vec![0.0f64; 3 * nv];
    model.skinning.apply(graph_disp_v.as_slice(), &mut base);
    for (b, v) in base.iter_mut().zip(model.mesh.vertices.iter()) {
        *b += v;
    }
    tape.albedo = model.assemble_appearance(&identity.beta);
    tape.graph_disp = graph_disp_v.as_slice().to_vec();

    tape.forwards.clear();
    tape.positions.clear();
    tape.samples.clear();
    tape.landmark_screens.clear();
    for (f, params) in frames.iter().enumerate() {
        if params.delta.len() != model.expression_dim() {
            return Err(Error::Dimension(format!("delta dimension in frame {f}")));
        }
        let expr = &model.blendshapes * &params.delta;
        let mut positions = base.clone();
        for (p, e) in positions.iter_mut().zip(expr.iter()) {
            *p += e;
        }
        let fwd = forward_frame(&model.mesh, &positions, &tape.albedo, params, &intr);
        tape.landmark_screens.push(
            model
                .mesh
                .landmarks
                .iter()
                .map(|&l| fwd.screen[l as usize])
                .collect(),
        );
        tape.positions.push(positions);
        tape.forwards.push(fwd);
    }

    // loss terms, iteration order shared with the loss-only path
    let mut pho = 0.0f64;
    let mut visible_total = 0usize;
    for (f, fwd) in tape.forwards.iter().enumerate() {
        let image = &sample.frames[f].image;
        let mut recs = Vec::new();
        for i in 0..nv {
            if !fwd.visible[i] {
                continue;
            }
            let (value, jac, cell) = image.sample_bilinear_unchecked(&fwd.screen[i]);
            if w.pho > 0.0 {
                for ch in 0..3 {
                    let e = value[ch] - fwd.color[i][ch];
                    pho += e * e;
                }
            }
            recs.push((SampleRec { vertex: i, value, jac }, cell));
            visible_total += 1;
        }
        tape.samples.push(recs.iter().map(|(r, _)| *r).collect());
        if tape.diag.cells.len() <= f {
            tape.diag.cells.push(Vec::new());
        }
        tape.diag.cells[f] = recs.iter().map(|(_, c)| *c).collect();
    }
    tape.diag.cells.truncate(m);
    tape.diag.visible = tape.forwards.iter().map(|f| f.visible.clone()).collect();
    if visible_total == 0 {
        return Err(Error::ModelInvisible);
    }
    // same operation as the loss-only path so values agree bitwise
    if cfg.normalize {
        pho /= visible_total as f64;
    }
    let pho_norm = if cfg.normalize { 1.0 / visible_total as f64 } else { 1.0 };

    let lan = if w.lan > 0.0 {
        let sets: Vec<LandmarkSet> = sample.frames.iter().map(|f| f.landmarks.clone()).collect();
        landmark_loss(&sets, &tape.landmark_screens, cfg.normalize)
    } else {
        0.0
    };
    let smo = if w.smo > 0.0 {
        membrane_energy(&model.graph.neighborhoods, &tape.graph_disp)
    } else {
        0.0
    };
    let spa = if w.spa > 0.0 {
        sparsity_energy(model.mesh.edges(), &tape.albedo, edge_weights, &cfg.sparsity)
    } else {
        0.0
    };
    let ble = if w.ble > 0.0 {
        let deltas: Vec<&DVector<f64>> = frames.iter().map(|f| &f.delta).collect();
        expression_reg(&deltas, &model.expression_sigmas)
    } else {
        0.0
    };
    let breakdown = LossBreakdown::with_weights(&w, pho, lan, smo, spa, ble);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), block: "total".into() });
    }

    let Some(active) = active else {
        return Ok(breakdown);
    };

    // backward
    let mut grads = match tape.grads.take() {
        Some(mut g)
            if g.frames.len() == m
                && g.alpha.len() == model.identity_dim()
                && g.beta.len() == model.appearance_dim()
                && g.appear_mean.len() == 3 * nv
                && g.geom_basis.nrows() == 3 * model.node_count()
                && g.geom_basis.ncols() == model.identity_dim() =>
        {
            g.reset();
            g
        }
        _ => Gradients::zeros(model, m),
    };
    let need_vertex = active.need_vertex_grad();
    let need_albedo = active.need_albedo_grad();
    tape.g_albedo.resize(3 * nv, 0.0);
    tape.g_albedo.fill(0.0);
    tape.g_graph.resize(3 * model.node_count(), 0.0);
    tape.g_graph.fill(0.0);
    tape.g_vertex.resize(3 * nv, 0.0);
    tape.g_maccum.resize(3 * nv, 0.0);

    let lan_norm = if cfg.normalize {
        1.0 / (m * crate::mesh::LANDMARK_COUNT) as f64
    } else {
        1.0
    };

    for f in 0..m {
        let fwd = &tape.forwards[f];
        let positions = &tape.positions[f];
        let params = &frames[f];
        tape.g_vertex.fill(0.0);
        tape.g_maccum.fill(0.0);
        let mut a_accum = Matrix3::<f64>::zeros();
        let mut g_translation = [0.0f64; 3];
        let rot = &fwd.rotation;

        if w.pho > 0.0 {
            let scale = w.pho * pho_norm;
            for rec in &tape.samples[f] {
                let i = rec.vertex;
                let mut g_u = [0.0f64; 2];
                let mut g_c = [0.0f64; 3];
                for ch in 0..3 {
                    let e = rec.value[ch] - fwd.color[i][ch];
                    let coeff = 2.0 * scale * e;
                    g_u[0] += coeff * rec.jac[ch][0];
                    g_u[1] += coeff * rec.jac[ch][1];
                    g_c[ch] = -coeff;
                }
                let albedo_i = [
                    tape.albedo[3 * i],
                    tape.albedo[3 * i + 1],
                    tape.albedo[3 * i + 2],
                ];
                if need_albedo {
                    for ch in 0..3 {
                        tape.g_albedo[3 * i + ch] += g_c[ch] * fwd.irradiance[i][ch];
                    }
                }
                let g_s = [g_c[0] * albedo_i[0], g_c[1] * albedo_i[1], g_c[2] * albedo_i[2]];
                let nhat = fwd.cam_normal[i];
                if active.gamma {
                    let h = sh_basis_raw(&nhat);
                    for (b, hb) in h.iter().enumerate() {
                        for ch in 0..3 {
                            grads.frames[f].gamma[3 * b + ch] += g_s[ch] * hb;
                        }
                    }
                }
                let mut g_nhat = [0.0f64; 3];
                if need_vertex || active.rotation {
                    let jh = sh_basis_jacobian(&nhat);
                    for (b, row) in jh.iter().enumerate() {
                        let gh = g_s[0] * params.gamma[3 * b]
                            + g_s[1] * params.gamma[3 * b + 1]
                            + g_s[2] * params.gamma[3 * b + 2];
                        for c in 0..3 {
                            g_nhat[c] += gh * row[c];
                        }
                    }
                }
                // projection backward (visible vertices are in front)
                let jp = projection_jacobian(&fwd.cam_pos[i], &intr);
                let g_vhat = [
                    jp[0][0] * g_u[0] + jp[1][0] * g_u[1],
                    jp[0][1] * g_u[0] + jp[1][1] * g_u[1],
                    jp[0][2] * g_u[0] + jp[1][2] * g_u[1],
                ];
                if active.translation {
                    for c in 0..3 {
                        g_translation[c] += g_vhat[c];
                    }
                }
                let pos_i = [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
                let n_model = fwd.model_normal[i];
                if active.rotation {
                    for r in 0..3 {
                        for c in 0..3 {
                            a_accum[(r, c)] += g_vhat[r] * pos_i[c] + g_nhat[r] * n_model[c];
                        }
                    }
                }
                if need_vertex {
                    let gv = rt_mul(rot, &g_vhat);
                    for c in 0..3 {
                        tape.g_vertex[3 * i + c] += gv[c];
                    }
                    if !fwd.degenerate[i] {
                        let gn = rt_mul(rot, &g_nhat);
                        let len = fwd.normal_len[i];
                        let ndot = n_model[0] * gn[0] + n_model[1] * gn[1] + n_model[2] * gn[2];
                        for c in 0..3 {
                            tape.g_maccum[3 * i + c] += (gn[c] - n_model[c] * ndot) / len;
                        }
                    }
                }
            }
        }

        if w.lan > 0.0 && (active.translation || active.rotation || need_vertex) {
            let scale = w.lan * lan_norm;
            let set = &sample.frames[f].landmarks;
            for (l, &vid) in model.mesh.landmarks.iter().enumerate() {
                let i = vid as usize;
                if fwd.behind[i] {
                    continue; // clamped projection: treated as constant
                }
                let conf = set.confidences[l];
                if conf == 0.0 {
                    continue;
                }
                let u = fwd.screen[i];
                let s = set.positions[l];
                let coeff = 2.0 * scale * conf;
                let g_u = [coeff * (u[0] - s[0]), coeff * (u[1] - s[1])];
                let jp = projection_jacobian(&fwd.cam_pos[i], &intr);
                let g_vhat = [
                    jp[0][0] * g_u[0] + jp[1][0] * g_u[1],
                    jp[0][1] * g_u[0] + jp[1][1] * g_u[1],
                    jp[0][2] * g_u[0] + jp[1][2] * g_u[1],
                ];
                if active.translation {
                    for c in 0..3 {
                        g_translation[c] += g_vhat[c];
                    }
                }
                if active.rotation {
                    let pos_i = [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
                    for r in 0..3 {
                        for c in 0..3 {
                            a_accum[(r, c)] += g_vhat[r] * pos_i[c];
                        }
                    }
                }
                if need_vertex {
                    let gv = rt_mul(rot, &g_vhat);
                    for c in 0..3 {
                        tape.g_vertex[3 * i + c] += gv[c];
                    }
                }
            }
        }

        if need_vertex {
            // normal accumulation backward: spread each vertex-normal gradient
            // through the incident face cross products
            for face in &model.mesh.faces {
                let [a, b, c] = [face[0] as usize, face[1] as usize, face[2] as usize];
                let g_cross = [
                    tape.g_maccum[3 * a] + tape.g_maccum[3 * b] + tape.g_maccum[3 * c],
                    tape.g_maccum[3 * a + 1] + tape.g_maccum[3 * b + 1] + tape.g_maccum[3 * c + 1],
                    tape.g_maccum[3 * a + 2] + tape.g_maccum[3 * b + 2] + tape.g_maccum[3 * c + 2],
                ];
                if g_cross[0] == 0.0 && g_cross[1] == 0.0 && g_cross[2] == 0.0 {
                    continue;
                }
                let pa = [positions[3 * a], positions[3 * a + 1], positions[3 * a + 2]];
                let pb = [positions[3 * b], positions[3 * b + 1], positions[3 * b + 2]];
                let pc = [positions[3 * c], positions[3 * c + 1], positions[3 * c + 2]];
                let e1 = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
                let e2 = [pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]];
                let g_e1 = cross(&e2, &g_cross);
                let g_e2 = cross(&g_cross, &e1);
                for c2 in 0..3 {
                    tape.g_vertex[3 * b + c2] += g_e1[c2];
                    tape.g_vertex[3 * c + c2] += g_e2[c2];
                    tape.g_vertex[3 * a + c2] -= g_e1[c2] + g_e2[c2];
                }
            }
            if active.delta {
                let gv = DVector::from_column_slice(&tape.g_vertex);
                let gd = model.blendshapes.transpose() * gv;
                grads.frames[f].delta += gd;
            }
            if active.alpha || active.geom_basis {
                let mut scatter = vec![0.0f64; 3 * model.node_count()];
                model.skinning.apply_transpose(&tape.g_vertex, &mut scatter);
                for (g, s) in tape.g_graph.iter_mut().zip(&scatter) {
                    *g += s;
                }
            }
        }

        if active.rotation {
            let jr = rotation_jacobian(&params.rotation);
            for j in 0..3 {
                let mut sum = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        sum += jr[j][(r, c)] * a_accum[(r, c)];
                    }
                }
                grads.frames[f].rotation[j] = sum;
            }
        }
        if active.translation {
            grads.frames[f].translation = g_translation;
        }
    }

    // smoothness backward: ordered pairs over node neighborhoods
    if w.smo > 0.0 && (active.alpha || active.geom_basis) {
        for (i, hood) in model.graph.neighborhoods.iter().enumerate() {
            for &j in hood {
                let j = j as usize;
                for c in 0..3 {
                    let d = tape.graph_disp[3 * i + c] - tape.graph_disp[3 * j + c];
                    let g = 2.0 * w.smo * d;
                    tape.g_graph[3 * i + c] += g;
                    tape.g_graph[3 * j + c] -= g;
                }
            }
        }
    }

    // sparsity backward: each undirected edge carries both ordered terms
    if w.spa > 0.0 && need_albedo {
        let cfg_s = &cfg.sparsity;
        let eps2 = cfg_s.eps_norm * cfg_s.eps_norm;
        for (e, &wij) in model.mesh.edges().iter().zip(edge_weights) {
            let (i, j) = (e[0] as usize, e[1] as usize);
            let mut d = [0.0f64; 3];
            let mut d2 = 0.0;
            for c in 0..3 {
                d[c] = tape.albedo[3 * i + c] - tape.albedo[3 * j + c];
                d2 += d[c] * d[c];
            }
            let phi_p = (cfg_s.p / 2.0) * (d2 + eps2).powf(cfg_s.p / 2.0 - 1.0);
            let coeff = w.spa * 4.0 * wij * phi_p;
            for c in 0..3 {
                tape.g_albedo[3 * i + c] += coeff * d[c];
                tape.g_albedo[3 * j + c] -= coeff * d[c];
            }
        }
    }

    if w.ble > 0.0 && active.delta {
        for (f, params) in frames.iter().enumerate() {
            for (u, sigma) in model.expression_sigmas.iter().enumerate() {
                grads.frames[f].delta[u] += w.ble * 2.0 * params.delta[u] / (sigma * sigma);
            }
        }
    }

    // identity and model blocks
    if active.alpha {
        let gg = DVector::from_column_slice(&tape.g_graph);
        grads.alpha = projected.transpose() * gg;
    }
    if active.geom_basis {
        // complement-projected graph gradient, outer product with alpha
        let projected_g = crate::model::ocl_project_vec(&tape.g_graph, &model.graph_blendshapes);
        for k in 0..model.identity_dim() {
            let ak = identity.alpha[k];
            if ak == 0.0 {
                continue;
            }
            for (r, pg) in projected_g.iter().enumerate() {
                grads.geom_basis[(r, k)] += pg * ak;
            }
        }
    }
    if active.beta {
        let ga = DVector::from_column_slice(&tape.g_albedo);
        grads.beta = model.appear_basis.transpose() * ga;
    }
    if active.appear_basis {
        for k in 0..model.appearance_dim() {
            let bk = identity.beta[k];
            if bk == 0.0 {
                continue;
            }
            for (r, ga) in tape.g_albedo.iter().enumerate() {
                grads.appear_basis[(r, k)] += ga * bk;
            }
        }
    }
    if active.appear_mean {
        grads.appear_mean.copy_from_slice(&tape.g_albedo);
    }

    tape.grads = Some(grads);
    Ok(breakdown)
}

/// Flat-vector evaluation against a [`ParamVector`]: scatter, evaluate, and
/// return the loss plus a gradient aligned to the vector (zeros on frozen
/// blocks). Non-finite values are reported with the first offending block.
pub fn evaluate_with_gradient(
    model: &FaceModel,
    sample: &MultiFrameSample,
    params: &ParamVector,
    cfg: &LossConfig,
    edge_weights: &[f64],
    tape: &mut GradientTape,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (identity, frames) = params.to_structured(model);
    let mut scratch;
    let model_ref = if params.has_model_blocks() {
        scratch = model.clone();
        params.scatter_model(&mut scratch);
        &scratch
    } else {
        model
    };
    let active = active_from_params(params);
    let breakdown = evaluate(
        model_ref,
        sample,
        &identity,
        &frames,
        cfg,
        edge_weights,
        Some(&active),
        tape,
    )?;
    let flat = flatten_gradients(params, tape.gradients());
    if let Some(block) = params.first_non_finite(&flat) {
        return Err(Error::NonFinite { what: "gradient".into(), block: block.to_string() });
    }
    Ok((breakdown, flat))
}

pub(crate) fn active_from_params(params: &ParamVector) -> ActiveBlocks {
    let mut active = ActiveBlocks::none();
    for b in params.blocks() {
        if !b.active {
            continue;
        }
        match b.kind {
            BlockKind::Alpha => active.alpha = true,
            BlockKind::Beta => active.beta = true,
            BlockKind::Rotation(_) => active.rotation = true,
            BlockKind::Translation(_) => active.translation = true,
            BlockKind::Gamma(_) => active.gamma = true,
            BlockKind::Delta(_) => active.delta = true,
            BlockKind::GeomBasis => active.geom_basis = true,
            BlockKind::AppearBasis => active.appear_basis = true,
            BlockKind::AppearMean => active.appear_mean = true,
        }
    }
    active
}

pub(crate) fn flatten_gradients(params: &ParamVector, grads: &Gradients) -> Vec<f64> {
    let mut flat = vec![0.0; params.len()];
    for b in params.blocks() {
        if !b.active {
            continue;
        }
        let dst = &mut flat[b.offset..b.offset + b.len];
        match b.kind {
            BlockKind::Alpha => dst.copy_from_slice(grads.alpha.as_slice()),
            BlockKind::Beta => dst.copy_from_slice(grads.beta.as_slice()),
            BlockKind::Rotation(f) => dst.copy_from_slice(&grads.frames[f].rotation),
            BlockKind::Translation(f) => dst.copy_from_slice(&grads.frames[f].translation),
            BlockKind::Gamma(f) => dst.copy_from_slice(&grads.frames[f].gamma),
            BlockKind::Delta(f) => dst.copy_from_slice(grads.frames[f].delta.as_slice()),
            BlockKind::GeomBasis => dst.copy_from_slice(grads.geom_basis.as_slice()),
            BlockKind::AppearBasis => dst.copy_from_slice(grads.appear_basis.as_slice()),
            BlockKind::AppearMean => dst.copy_from_slice(&grads.appear_mean),
        }
    }
    flat
}

/// Report for one checked coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub block: BlockKind,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub coords: Vec<CoordCheck>,
}

impl BlockCheck {
    /// Pass when every checked coordinate agrees relatively within `tol` or
    /// absolutely within `atol` (central differences of an O(1) loss carry
    /// ~1e-11 cancellation noise, which the relative criterion alone would
    /// flag on exact-zero gradients).
    pub fn passes(&self, tol: f64, atol: f64) -> bool {
        self.coords
            .iter()
            .filter(|c| c.skipped.is_none())
            .all(|c| c.rel_err <= tol || (c.analytic - c.numeric).abs() <= atol)
    }
}

/// Central-difference check of one block against the tape gradient.
///
/// Coordinates whose perturbation changes the visible set or crosses a
/// bilinear cell boundary are reported as skipped, not failed. `max_coords`
/// caps the number of checked coordinates (deterministic subsample).
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    model: &FaceModel,
    sample: &MultiFrameSample,
    params: &ParamVector,
    block: BlockKind,
    step: f64,
    cfg: &LossConfig,
    edge_weights: &[f64],
    max_coords: Option<usize>,
    seed: u64,
    tape: &mut GradientTape,
) -> Result<BlockCheck> {
    let binfo = params
        .block(block)
        .ok_or_else(|| Error::InvalidInput(format!("no block `{block}` in the layout")))?;
    if !binfo.active {
        return Err(Error::InvalidInput(format!("block `{block}` is frozen")));
    }
    let (offset, len) = (binfo.offset, binfo.len);
    let (_, analytic_flat) = evaluate_with_gradient(model, sample, params, cfg, edge_weights, tape)?;

    // deterministic coordinate subsample
    let coords: Vec<usize> = match max_coords {
        Some(cap) if cap < len => {
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::derive_rng(seed, "fd-coords", offset as u64);
            let mut all: Vec<usize> = (0..len).collect();
            all.shuffle(&mut rng);
            let mut take: Vec<usize> = all.into_iter().take(cap).collect();
            take.sort_unstable();
            take
        }
        _ => (0..len).collect(),
    };

    let mut scratch_model = model.clone();
    let mut scratch_pv = params.clone();
    let mut eval_at = |pv: &ParamVector, tape: &mut GradientTape| -> Result<(f64, EvalDiag)> {
        let (identity, frames) = pv.to_structured(model);
        let model_ref: &FaceModel = if pv.has_model_blocks() {
            pv.scatter_model(&mut scratch_model);
            &scratch_model
        } else {
            model
        };
        let breakdown = evaluate(model_ref, sample, &identity, &frames, cfg, edge_weights, None, tape)?;
        Ok((breakdown.total, tape.diag.clone()))
    };

    let mut checks = Vec::with_capacity(coords.len());
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    for &k in &coords {
        let idx = offset + k;
        let saved = scratch_pv.data[idx];
        scratch_pv.data[idx] = saved + step;
        let plus = eval_at(&scratch_pv, tape);
        scratch_pv.data[idx] = saved - step;
        let minus = eval_at(&scratch_pv, tape);
        scratch_pv.data[idx] = saved;
        let ((lp, dp), (lm, dm)) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            _ => {
                checks.push(CoordCheck {
                    coord: idx,
                    analytic: analytic_flat[idx],
                    numeric: f64::NAN,
                    rel_err: f64::NAN,
                    skipped: Some("evaluation failed under perturbation".into()),
                });
                skipped += 1;
                continue;
            }
        };
        if dp != dm {
            checks.push(CoordCheck {
                coord: idx,
                analytic: analytic_flat[idx],
                numeric: f64::NAN,
                rel_err: f64::NAN,
                skipped: Some("skipped: discrete event".into()),
            });
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = analytic_flat[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        checks.push(CoordCheck { coord: idx, analytic, numeric, rel_err: rel, skipped: None });
    }
    Ok(BlockCheck {
        block,
        checked: checks.len() - skipped,
        skipped,
        max_rel_err: max_rel,
        coords: checks,
    })
}
