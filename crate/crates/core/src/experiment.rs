//! The model-recovery experiment: generate a synthetic corpus from a held-out
//! ground-truth model, learn a fresh model from the images, then fit held-out
//! subjects monocularly and multi-frame and score geometry and albedo
//! recovery. This is both the main end-to-end exercise of the engine and the
//! basis of the acceptance suite.

use crate::config::Settings;
use crate::dataset::{generate_synthetic, GeneratorConfig, MultiFrameSample};
use crate::error::Result;
use crate::eval::{albedo_correlation, per_vertex_rmse_pct, EvalReport, EvalRow};
use crate::model::FaceModel;
use crate::optim::{fit_sample, learn_model, FitOptions, LearnOptions, LearnResult};
use crate::procedural::face_mask;
use crate::synthetic::{synthetic_blendshapes, synthetic_ground_truth_model, GroundTruthScales};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub settings: Settings,
    pub train_subjects: usize,
    pub heldout_subjects: usize,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            settings: Settings::default(),
            train_subjects: 50,
            heldout_subjects: 12,
            seed: 0,
        }
    }
}

pub struct RecoveryExperiment {
    pub gt_model: FaceModel,
    pub train: Vec<MultiFrameSample>,
    pub heldout: Vec<MultiFrameSample>,
    pub settings: Settings,
    pub seed: u64,
}

impl RecoveryExperiment {
    /// Build the ground-truth model and both corpora.
    pub fn prepare(cfg: &RecoveryConfig) -> Result<Self> {
        let s = &cfg.settings;
        let mesh = face_mask(s.mesh_rows, s.mesh_cols);
        let blend = synthetic_blendshapes(&mesh, s.blendshape_count, cfg.seed ^ 0xb1e4d);
        let scales = GroundTruthScales {
            geometry_rms: s.gt_geometry_rms,
            appearance_rms: s.gt_appearance_rms,
            ..Default::default()
        };
        let gt_model = synthetic_ground_truth_model(
            &mesh,
            s.graph_nodes,
            s.skinning_k,
            s.gt_identity_dim,
            s.gt_appearance_dim,
            &blend,
            scales,
            cfg.seed ^ 0x67f00d,
        )?;
        let train = generate_synthetic(
            &gt_model,
            &GeneratorConfig {
                subjects: cfg.train_subjects,
                ..s.generator_config(cfg.seed)
            },
        )?;
        let heldout = generate_synthetic(
            &gt_model,
            &GeneratorConfig {
                subjects: cfg.heldout_subjects,
                ..s.generator_config(cfg.seed ^ 0x4e1d0)
            },
        )?;
        Ok(RecoveryExperiment {
            gt_model,
            train,
            heldout,
            settings: s.clone(),
            seed: cfg.seed,
        })
    }

    /// Learn a model from the training corpus restricted to `m` frames.
    pub fn learn(&self, m: usize, seed_salt: u64) -> Result<LearnResult> {
        let dataset: Vec<MultiFrameSample> = self
            .train
            .iter()
            .map(|s| s.take_frames(m.min(s.frame_count())))
            .collect::<Result<Vec<_>>>()?;
        let mesh = &self.gt_model.mesh;
        let blend = crate::model::BlendshapeSet {
            basis: self.gt_model.blendshapes.clone(),
            sigmas: self.gt_model.expression_sigmas.clone(),
        };
        let initial = crate::model::init_model(
            mesh,
            self.settings.graph_nodes,
            self.settings.skinning_k,
            self.settings.identity_dim,
            self.settings.appearance_dim,
            &blend,
            self.seed ^ seed_salt,
        )?;
        let schedule = self.settings.learn_schedule();
        let opts = LearnOptions {
            ..self.settings.learn_options(self.seed ^ seed_salt)
        };
        learn_model(&dataset, &initial, &schedule, &opts)
    }

    /// Fit every held-out subject with `m` frames against a learned model and
    /// score geometry + albedo recovery.
    pub fn fit_heldout(&self, model: &FaceModel, m: usize, condition: &str) -> Result<EvalReport> {
        let opts = FitOptions {
            schedule: self.settings.fit_schedule(),
            cfg: self.settings.loss_config(),
            ..Default::default()
        };
        let rows: Result<Vec<EvalRow>> = self
            .heldout
            .par_iter()
            .map(|sample| {
                let sub = sample.take_frames(m.min(sample.frame_count()))?;
                let fit = fit_sample(model, &sub, &opts)?;
                let gt = sample.ground_truth.as_ref().expect("synthetic sample");
                let neutral = model.neutral_vertices(&fit.identity.alpha);
                let (rmse, rmse_pct) = per_vertex_rmse_pct(&neutral, &gt.neutral_vertices)?;
                let albedo = model.assemble_appearance(&fit.identity.beta);
                let corr = albedo_correlation(&albedo, &gt.albedo)?;
                Ok(EvalRow {
                    subject: sample.subject.clone(),
                    rmse,
                    rmse_pct,
                    albedo_corr: Some(corr),
                    shading_ratio_err: None,
                })
            })
            .collect();
        Ok(EvalReport { condition: condition.to_string(), rows: rows? })
    }

    /// Yaw spread (max - min, degrees) of a held-out subject's frames.
    pub fn yaw_spread_deg(&self, sample: &MultiFrameSample) -> f64 {
        let gt = sample.ground_truth.as_ref().expect("synthetic sample");
        let yaws: Vec<f64> = gt
            .frames
            .iter()
            .map(|f| {
                let r = crate::camera::rotation_matrix(&f.rotation);
                (-r[(2, 0)]).atan2(r[(2, 2)]).to_degrees()
            })
            .collect();
        let lo = yaws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = yaws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}
