//! Plain-text `key=value` run configuration.
//!
//! Every knob has a default; a config file overrides keys. Unknown keys are
//! an error (typos should not silently fall back to defaults). `#` starts a
//! comment; blank lines are ignored.

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights, SparsityConfig};
use crate::optim::{FitOptions, LearnOptions, Schedule};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    // loss weights
    pub lambda_pho: f64,
    pub lambda_lan: f64,
    pub lambda_smo: f64,
    pub lambda_spa: f64,
    pub lambda_ble: f64,
    pub normalize_losses: bool,
    // sparsity prior
    pub spa_eta: f64,
    pub spa_p: f64,
    pub spa_eps_chroma: f64,
    pub spa_eps_norm: f64,
    // optimizer
    pub lr_params: f64,
    pub lr_model: f64,
    pub lr_appearance_boost: f64,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub joint_iters: usize,
    pub finetune_iters: usize,
    pub fit_pose_iters: usize,
    pub fit_full_iters: usize,
    pub weights_refresh: usize,
    // learner model dimensions
    pub graph_nodes: usize,
    pub skinning_k: usize,
    pub identity_dim: usize,
    pub appearance_dim: usize,
    pub blendshape_count: usize,
    // default procedural mesh
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    // synthetic generator / ground-truth model
    pub gen_subjects: usize,
    pub gen_frames: usize,
    pub gen_width: usize,
    pub gen_height: usize,
    pub gen_yaw_deg: f64,
    pub gen_identity_std: f64,
    pub gen_appearance_std: f64,
    pub gen_expression_scale: f64,
    pub gen_illumination_scale: f64,
    pub gt_identity_dim: usize,
    pub gt_appearance_dim: usize,
    pub gt_geometry_rms: f64,
    pub gt_appearance_rms: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            lambda_pho: 20.0,
            lambda_lan: 2.0,
            lambda_smo: 0.002,
            lambda_spa: 1e-4,
            lambda_ble: 0.02,
            normalize_losses: true,
            spa_eta: 80.0,
            spa_p: 0.9,
            spa_eps_chroma: 1e-4,
            spa_eps_norm: 1e-6,
            lr_params: 1e-2,
            lr_model: 1e-3,
            lr_appearance_boost: 10.0,
            batch_size: 4,
            warmup_iters: 900,
            joint_iters: 2500,
            finetune_iters: 1500,
            fit_pose_iters: 150,
            fit_full_iters: 800,
            weights_refresh: 100,
            graph_nodes: 60,
            skinning_k: 4,
            identity_dim: 16,
            appearance_dim: 8,
            blendshape_count: 8,
            mesh_rows: 45,
            mesh_cols: 45,
            gen_subjects: 10,
            gen_frames: 4,
            gen_width: 128,
            gen_height: 128,
            gen_yaw_deg: 45.0,
            gen_identity_std: 1.0,
            gen_appearance_std: 1.0,
            gen_expression_scale: 1.0,
            gen_illumination_scale: 0.05,
            gt_identity_dim: 8,
            gt_appearance_dim: 6,
            gt_geometry_rms: 0.015,
            gt_appearance_rms: 0.05,
        }
    }
}

impl Settings {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut settings = Settings::default();
        settings.apply_text(&text)?;
        Ok(settings)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("config line without `=`: `{line}`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn f64v(key: &str, value: &str) -> Result<f64> {
            value.parse().map_err(|_| Error::ConfigValue {
                key: key.into(),
                msg: format!("`{value}` is not a number"),
            })
        }
        fn usizev(key: &str, value: &str) -> Result<usize> {
            value.parse().map_err(|_| Error::ConfigValue {
                key: key.into(),
                msg: format!("`{value}` is not a nonnegative integer"),
            })
        }
        fn boolv(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::ConfigValue {
                    key: key.into(),
                    msg: format!("`{value}` is not a boolean"),
                }),
            }
        }
        match key {
            "lambda_pho" => self.lambda_pho = f64v(key, value)?,
            "lambda_lan" => self.lambda_lan = f64v(key, value)?,
            "lambda_smo" => self.lambda_smo = f64v(key, value)?,
            "lambda_spa" => self.lambda_spa = f64v(key, value)?,
            "lambda_ble" => self.lambda_ble = f64v(key, value)?,
            "normalize_losses" => self.normalize_losses = boolv(key, value)?,
            "spa_eta" => self.spa_eta = f64v(key, value)?,
            "spa_p" => self.spa_p = f64v(key, value)?,
            "spa_eps_chroma" => self.spa_eps_chroma = f64v(key, value)?,
            "spa_eps_norm" => self.spa_eps_norm = f64v(key, value)?,
            "lr_params" => self.lr_params = f64v(key, value)?,
            "lr_model" => self.lr_model = f64v(key, value)?,
            "lr_appearance_boost" => self.lr_appearance_boost = f64v(key, value)?,
            "batch_size" => self.batch_size = usizev(key, value)?,
            "warmup_iters" => self.warmup_iters = usizev(key, value)?,
            "joint_iters" => self.joint_iters = usizev(key, value)?,
            "finetune_iters" => self.finetune_iters = usizev(key, value)?,
            "fit_pose_iters" => self.fit_pose_iters = usizev(key, value)?,
            "fit_full_iters" => self.fit_full_iters = usizev(key, value)?,
            "weights_refresh" => self.weights_refresh = usizev(key, value)?,
            "graph_nodes" => self.graph_nodes = usizev(key, value)?,
            "skinning_k" => self.skinning_k = usizev(key, value)?,
            "identity_dim" => self.identity_dim = usizev(key, value)?,
            "appearance_dim" => self.appearance_dim = usizev(key, value)?,
            "blendshape_count" => self.blendshape_count = usizev(key, value)?,
            "mesh_rows" => self.mesh_rows = usizev(key, value)?,
            "mesh_cols" => self.mesh_cols = usizev(key, value)?,
            "gen_subjects" => self.gen_subjects = usizev(key, value)?,
            "gen_frames" => self.gen_frames = usizev(key, value)?,
            "gen_width" => self.gen_width = usizev(key, value)?,
            "gen_height" => self.gen_height = usizev(key, value)?,
            "gen_yaw_deg" => self.gen_yaw_deg = f64v(key, value)?,
            "gen_identity_std" => self.gen_identity_std = f64v(key, value)?,
            "gen_appearance_std" => self.gen_appearance_std = f64v(key, value)?,
            "gen_expression_scale" => self.gen_expression_scale = f64v(key, value)?,
            "gen_illumination_scale" => self.gen_illumination_scale = f64v(key, value)?,
            "gt_identity_dim" => self.gt_identity_dim = usizev(key, value)?,
            "gt_appearance_dim" => self.gt_appearance_dim = usizev(key, value)?,
            "gt_geometry_rms" => self.gt_geometry_rms = f64v(key, value)?,
            "gt_appearance_rms" => self.gt_appearance_rms = f64v(key, value)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                pho: self.lambda_pho,
                lan: self.lambda_lan,
                smo: self.lambda_smo,
                spa: self.lambda_spa,
                ble: self.lambda_ble,
            },
            sparsity: SparsityConfig {
                eta: self.spa_eta,
                p: self.spa_p,
                eps_chroma: self.spa_eps_chroma,
                eps_norm: self.spa_eps_norm,
            },
            normalize: self.normalize_losses,
        }
    }

    pub fn learn_schedule(&self) -> Schedule {
        let mut schedule = Schedule::default_learn(
            self.warmup_iters,
            self.joint_iters,
            self.finetune_iters,
            self.batch_size,
        );
        for phase in &mut schedule.phases {
            phase.rates.pose = if phase.name == "warmup-pose" { 3.0 * self.lr_params } else { self.lr_params };
            phase.rates.illumination = self.lr_params;
            phase.rates.expression = self.lr_params;
            phase.rates.identity = self.lr_params;
            phase.rates.geom_basis = self.lr_model;
            phase.rates.appearance = if phase.name == "appearance" {
                self.lr_appearance_boost * self.lr_model
            } else {
                self.lr_model
            };
        }
        schedule
    }

    pub fn fit_schedule(&self) -> Schedule {
        let mut schedule = Schedule::default_fit(self.fit_pose_iters, self.fit_full_iters);
        for phase in &mut schedule.phases {
            phase.rates.pose = if phase.name == "pose" { 3.0 * self.lr_params } else { self.lr_params };
            phase.rates.illumination = self.lr_params;
            phase.rates.expression = self.lr_params;
            phase.rates.identity = self.lr_params;
        }
        schedule
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            schedule: self.fit_schedule(),
            cfg: self.loss_config(),
            weights_refresh: self.weights_refresh,
            ..Default::default()
        }
    }

    pub fn learn_options(&self, seed: u64) -> LearnOptions {
        LearnOptions {
            cfg: self.loss_config(),
            seed,
            weights_refresh: self.weights_refresh,
            ..Default::default()
        }
    }

    pub fn generator_config(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            subjects: self.gen_subjects,
            frames_per_subject: self.gen_frames,
            width: self.gen_width,
            height: self.gen_height,
            identity_std: self.gen_identity_std,
            appearance_std: self.gen_appearance_std,
            expression_scale: self.gen_expression_scale,
            yaw_half_range_deg: self.gen_yaw_deg,
            illumination_scale: self.gen_illumination_scale,
            seed,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let mut s = Settings::default();
        s.apply_text("lambda_pho = 2.0\n# comment\nbatch_size=8\nnormalize_losses=false\n")
            .unwrap();
        assert_eq!(s.lambda_pho, 2.0);
        assert_eq!(s.batch_size, 8);
        assert!(!s.normalize_losses);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut s = Settings::default();
        let err = s.apply_text("lambda_typo=1.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda_typo"));
    }

    #[test]
    fn bad_value_is_named() {
        let mut s = Settings::default();
        let err = s.apply_text("batch_size=abc\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    #[test]
    fn schedules_follow_rates() {
        let mut s = Settings::default();
        s.apply_text("lr_model=0.002\nlr_appearance_boost=5\n").unwrap();
        let sched = s.learn_schedule();
        let last = sched.phases.last().unwrap();
        assert_eq!(last.rates.appearance, 0.01);
        assert_eq!(sched.phases[2].rates.appearance, 0.002);
    }
}
