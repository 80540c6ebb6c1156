//! The objective: photometric and landmark data terms plus smoothness,
//! reflectance-sparsity and expression regularizers, combined by weights.
//!
//! Photometric and landmark terms are normalized (by total visible-vertex
//! count and by frames x landmarks) so weight defaults transfer across mesh
//! resolutions and frame counts; the raw-sum mode is a config switch.
//! Neighbor sums run over ordered pairs, so every undirected edge counts
//! twice, matching the written double sums.

use crate::dataset::MultiFrameSample;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::mesh::LANDMARK_COUNT;
use crate::model::{FaceModel, FrameParams, IdentityParams};
use crate::render::{render_vertices, FrameRender};
use crate::camera::CameraIntrinsics;
use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pho: f64,
    pub lan: f64,
    pub smo: f64,
    pub spa: f64,
    pub ble: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pho: 20.0, lan: 2.0, smo: 0.002, spa: 1e-4, ble: 0.02 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pho, self.lan, self.smo, self.spa, self.ble];
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("loss weights must be nonnegative".into()));
        }
        if self.pho <= 0.0 && self.lan <= 0.0 {
            return Err(Error::InvalidInput(
                "at least one data term (photometric or landmark) must be weighted".into(),
            ));
        }
        Ok(())
    }

    pub fn data_only() -> Self {
        LossWeights { pho: 1.0, lan: 1.0, smo: 0.0, spa: 0.0, ble: 0.0 }
    }

    pub fn landmarks_only() -> Self {
        LossWeights { pho: 0.0, lan: 1.0, smo: 0.0, spa: 0.0, ble: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityConfig {
    /// Chroma falloff in the edge weights.
    pub eta: f64,
    /// Norm exponent of the sparsity prior.
    pub p: f64,
    pub eps_chroma: f64,
    pub eps_norm: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig { eta: 80.0, p: 0.9, eps_chroma: 1e-4, eps_norm: 1e-6 }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if !(self.eta > 0.0) {
            return Err(Error::InvalidInput("sparsity eta must be positive".into()));
        }
        if !(self.p > 0.0 && self.p <= 2.0) {
            return Err(Error::InvalidInput("sparsity exponent must lie in (0, 2]".into()));
        }
        Ok(())
    }
}

/// Weights plus evaluation options for the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub sparsity: SparsityConfig,
    /// Normalize the photometric term by total visible count and the
    /// landmark term by frames x landmarks.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            sparsity: SparsityConfig::default(),
            normalize: true,
        }
    }
}

/// 66 detected feature points with confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub positions: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
}

impl LandmarkSet {
    pub fn new(positions: Vec<[f64; 2]>, confidences: Vec<f64>) -> Result<Self> {
        if positions.len() != LANDMARK_COUNT || confidences.len() != LANDMARK_COUNT {
            return Err(Error::InvalidInput(format!(
                "expected {LANDMARK_COUNT} landmarks, got {} positions / {} confidences",
                positions.len(),
                confidences.len()
            )));
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("confidences must lie in [0, 1]".into()));
        }
        Ok(LandmarkSet { positions, confidences })
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
    }
}

/// Per-term values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub pho: f64,
    pub lan: f64,
    pub smo: f64,
    pub spa: f64,
    pub ble: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn with_weights(w: &LossWeights, pho: f64, lan: f64, smo: f64, spa: f64, ble: f64) -> Self {
        LossBreakdown {
            pho,
            lan,
            smo,
            spa,
            ble,
            total: w.pho * pho + w.lan * lan + w.smo * smo + w.spa * spa + w.ble * ble,
        }
    }
}

/// `Σ_f Σ_{i∈V̂} ‖F(u_i) − c_i‖²`, optionally divided by `Σ_f |V̂|`.
pub fn photometric_loss(images: &[Image], renders: &[FrameRender], normalize: bool) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (image, render) in images.iter().zip(renders) {
        for i in 0..render.visible.len() {
            if !render.visible[i] {
                continue;
            }
            let sampled = image
                .sample_bilinear(&render.screen[i])
                .expect("visible vertices project inside the sampling domain");
            let c = render.color[i];
            for ch in 0..3 {
                let e = sampled[ch] - c[ch];
                total += e * e;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::ModelInvisible);
    }
    Ok(if normalize { total / count as f64 } else { total })
}

/// `Σ_f Σ_i c_i ‖s_i − u_i‖²`, optionally divided by `M · 66`.
pub fn landmark_loss(
    landmarks: &[LandmarkSet],
    landmark_screens: &[Vec<[f64; 2]>],
    normalize: bool,
) -> f64 {
    let mut total = 0.0f64;
    for (set, screens) in landmarks.iter().zip(landmark_screens) {
        for ((s, &c), u) in set.positions.iter().zip(&set.confidences).zip(screens) {
            let dx = s[0] - u[0];
            let dy = s[1] - u[1];
            total += c * (dx * dx + dy * dy);
        }
    }
    if normalize {
        total / (landmarks.len() * LANDMARK_COUNT) as f64
    } else {
        total
    }
}

/// First-order membrane energy over node displacements, ordered pairs.
pub fn membrane_energy(neighborhoods: &[Vec<u32>], displacements: &[f64]) -> f64 {
    let mut total = 0.0f64;
    for (i, hood) in neighborhoods.iter().enumerate() {
        let ti = &displacements[3 * i..3 * i + 3];
        for &j in hood {
            let tj = &displacements[3 * j as usize..3 * j as usize + 3];
            for c in 0..3 {
                let d = ti[c] - tj[c];
                total += d * d;
            }
        }
    }
    total
}

/// Smoothness of the identity deformation on the graph.
pub fn smoothness_loss(model: &FaceModel, alpha: &DVector<f64>) -> f64 {
    let p = model.projected_geom_basis();
    let disp = p * alpha;
    membrane_energy(&model.graph.neighborhoods, disp.as_slice())
}

/// Intensity-normalized color.
#[inline]
pub fn chroma(c: &[f64; 3], eps: f64) -> [f64; 3] {
    let s = c[0] + c[1] + c[2] + eps;
    [c[0] / s, c[1] / s, c[2] / s]
}

/// Per-edge sparsity weights `w_ij = exp(−η‖h_i − h_j‖)` from the shaded
/// colors at the given parameters, averaged over frames. Aligned with
/// `mesh.edges()`; constants (no gradient) until recomputed.
pub fn chroma_weights(
    model: &FaceModel,
    identity: &IdentityParams,
    frames: &[FrameParams],
    intr: &CameraIntrinsics,
    cfg: &SparsityConfig,
) -> Vec<f64> {
    let n = model.vertex_count();
    let mut mean_chroma = vec![[0.0f64; 3]; n];
    for frame in frames {
        let render = render_vertices(model, identity, frame, intr);
        for i in 0..n {
            let h = chroma(&render.color[i], cfg.eps_chroma);
            for c in 0..3 {
                mean_chroma[i][c] += h[c] / frames.len() as f64;
            }
        }
    }
    model
        .mesh
        .edges()
        .iter()
        .map(|&[i, j]| {
            let hi = mean_chroma[i as usize];
            let hj = mean_chroma[j as usize];
            let d = ((hi[0] - hj[0]).powi(2) + (hi[1] - hj[1]).powi(2) + (hi[2] - hj[2]).powi(2))
                .sqrt();
            (-cfg.eta * d).exp()
        })
        .collect()
}

/// Uniform edge weights (used before the first refresh).
pub fn uniform_edge_weights(model: &FaceModel) -> Vec<f64> {
    vec![1.0; model.mesh.edges().len()]
}

/// One ordered-pair sparsity term `w · (‖d‖² + ε²)^(p/2)`.
#[inline]
pub fn sparsity_pair_term(diff_norm_sq: f64, weight: f64, cfg: &SparsityConfig) -> f64 {
    weight * (diff_norm_sq + cfg.eps_norm * cfg.eps_norm).powf(cfg.p / 2.0)
}

/// Sparsity energy over mesh edges (each undirected edge counted twice).
pub fn sparsity_energy(
    edges: &[[u32; 2]],
    appearance: &[f64],
    edge_weights: &[f64],
    cfg: &SparsityConfig,
) -> f64 {
    debug_assert_eq!(edges.len(), edge_weights.len());
    let mut total = 0.0f64;
    for (e, &w) in edges.iter().zip(edge_weights) {
        let (i, j) = (e[0] as usize, e[1] as usize);
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = appearance[3 * i + c] - appearance[3 * j + c];
            d2 += d * d;
        }
        total += 2.0 * sparsity_pair_term(d2, w, cfg);
    }
    total
}

/// Local reflectance sparsity prior at the given appearance parameters.
pub fn sparsity_loss(
    model: &FaceModel,
    beta: &DVector<f64>,
    edge_weights: &[f64],
    cfg: &SparsityConfig,
) -> f64 {
    let appearance = model.assemble_appearance(beta);
    sparsity_energy(model.mesh.edges(), &appearance, edge_weights, cfg)
}

/// `Σ_f Σ_u (δ_u/σ_u)²`.
pub fn expression_reg(deltas: &[&DVector<f64>], sigmas: &[f64]) -> f64 {
    let mut total = 0.0f64;
    for delta in deltas {
        for (d, s) in delta.iter().zip(sigmas) {
            let r = d / s;
            total += r * r;
        }
    }
    total
}

/// Evaluate all five terms and the weighted total on a multi-frame sample.
/// Terms with zero weight are skipped and reported as zero.
pub fn total_loss(
    model: &FaceModel,
    sample: &MultiFrameSample,
    identity: &IdentityParams,
    frames: &[FrameParams],
    cfg: &LossConfig,
    edge_weights: &[f64],
    intr: &CameraIntrinsics,
) -> Result<LossBreakdown> {
    cfg.weights.validate()?;
    cfg.sparsity.validate()?;
    if frames.len() != sample.frames.len() {
        return Err(Error::Dimension(format!(
            "{} frame parameter sets for {} frames",
            frames.len(),
            sample.frames.len()
        )));
    }
    let w = &cfg.weights;
    let renders: Vec<FrameRender> = frames
        .iter()
        .map(|f| render_vertices(model, identity, f, intr))
        .collect();
    let images: Vec<Image> = sample.frames.iter().map(|f| f.image.clone()).collect();
    let pho = if w.pho > 0.0 {
        photometric_loss(&images, &renders, cfg.normalize)?
    } else {
        0.0
    };
    let lan = if w.lan > 0.0 {
        let sets: Vec<LandmarkSet> = sample.frames.iter().map(|f| f.landmarks.clone()).collect();
        let screens: Vec<Vec<[f64; 2]>> = renders
            .iter()
            .map(|r| r.landmark_screens(&model.mesh))
            .collect();
        landmark_loss(&sets, &screens, cfg.normalize)
    } else {
        0.0
    };
    let smo = if w.smo > 0.0 { smoothness_loss(model, &identity.alpha) } else { 0.0 };
    let spa = if w.spa > 0.0 {
        sparsity_loss(model, &identity.beta, edge_weights, &cfg.sparsity)
    } else {
        0.0
    };
    let ble = if w.ble > 0.0 {
        let deltas: Vec<&DVector<f64>> = frames.iter().map(|f| &f.delta).collect();
        expression_reg(&deltas, &model.expression_sigmas)
    } else {
        0.0
    };
    Ok(LossBreakdown::with_weights(w, pho, lan, smo, spa, ble))
}
