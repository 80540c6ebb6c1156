//! Multi-frame samples: synthetic generation with stored ground truth,
//! lossless(-modulo-8-bit) serialization, and ingestion of externally
//! prepared image + landmark data.
//!
//! Directory layout:
//! ```text
//! dataset/
//!   manifest.txt          # "<subject> <frame.png> <frame.png> ..." per line
//!   gt_model.arc          # generator model (synthetic datasets only)
//!   <subject>/f000.png    # frames
//!   <subject>/f000.lmk.csv# "index,x,y,confidence", 66 rows
//!   <subject>/gt.arc      # ground-truth parameters (synthetic only)
//! ```

use crate::archive::Archive;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::losses::LandmarkSet;
use crate::mesh::LANDMARK_COUNT;
use crate::model::{FaceModel, FrameParams, IdentityParams};
use crate::render::{forward_frame, rasterize_preview, RasterOptions};
use crate::rng::derive_rng;
use nalgebra::{DVector, Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// Ground truth carried by synthetic samples.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub identity: IdentityParams,
    pub frames: Vec<FrameParams>,
    /// Identity geometry `v(α, 0)` of the generator model, `3|V|`.
    pub neutral_vertices: Vec<f64>,
    /// Albedo `r(β)` of the generator model, `3|V|`.
    pub albedo: Vec<f64>,
}

/// M frames of one subject with landmark sets and optional ground truth.
#[derive(Debug, Clone)]
pub struct MultiFrameSample {
    pub subject: String,
    pub frames: Vec<Frame>,
    pub ground_truth: Option<GroundTruth>,
}

impl MultiFrameSample {
    pub fn new(subject: String, frames: Vec<Frame>, ground_truth: Option<GroundTruth>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput(format!("sample {subject} has no frames")));
        }
        let (w, h) = (frames[0].image.width, frames[0].image.height);
        if frames.iter().any(|f| f.image.width != w || f.image.height != h) {
            return Err(Error::InvalidInput(format!(
                "sample {subject} mixes image sizes"
            )));
        }
        Ok(MultiFrameSample { subject, frames, ground_truth })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.frames[0].image.width, self.frames[0].image.height)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let (w, h) = self.image_size();
        CameraIntrinsics::default_for_image(w, h)
    }

    /// A single-frame view of frame `f` (ground truth dropped).
    pub fn take_frames_at(&self, f: usize) -> MultiFrameSample {
        MultiFrameSample {
            subject: self.subject.clone(),
            frames: vec![self.frames[f].clone()],
            ground_truth: None,
        }
    }

    /// Restrict to the first `m` frames (fitting with fewer views).
    pub fn take_frames(&self, m: usize) -> Result<MultiFrameSample> {
        if m == 0 || m > self.frames.len() {
            return Err(Error::InvalidInput(format!(
                "cannot take {m} of {} frames",
                self.frames.len()
            )));
        }
        let gt = self.ground_truth.as_ref().map(|g| GroundTruth {
            identity: g.identity.clone(),
            frames: g.frames[..m].to_vec(),
            neutral_vertices: g.neutral_vertices.clone(),
            albedo: g.albedo.clone(),
        });
        MultiFrameSample::new(self.subject.clone(), self.frames[..m].to_vec(), gt)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub subjects: usize,
    pub frames_per_subject: usize,
    pub width: usize,
    pub height: usize,
    /// Std of the identity geometry parameters α.
    pub identity_std: f64,
    /// Std of the appearance parameters β.
    pub appearance_std: f64,
    /// Scale on the per-mode expression sigmas during sampling.
    pub expression_scale: f64,
    /// Yaw range ±deg; pairwise yaw separation ≥ range/M is guaranteed.
    pub yaw_half_range_deg: f64,
    /// Std of pitch and roll in degrees.
    pub pitch_roll_std_deg: f64,
    /// Std of the translation jitter in model units.
    pub translation_jitter: f64,
    /// Std of the SH band 1..8 perturbations.
    pub illumination_scale: f64,
    /// Fraction of the image the face height should fill.
    pub framing: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            subjects: 1,
            frames_per_subject: 4,
            width: 128,
            height: 128,
            identity_std: 1.0,
            appearance_std: 1.0,
            expression_scale: 1.0,
            yaw_half_range_deg: 45.0,
            pitch_roll_std_deg: 4.0,
            translation_jitter: 0.05,
            illumination_scale: 0.05,
            framing: 0.78,
            seed: 0,
        }
    }
}

/// Base depth that frames the mesh at the configured fill fraction.
pub fn framing_depth(model: &FaceModel, intr: &CameraIntrinsics, fill: f64) -> f64 {
    let (lo, hi) = model.mesh.bounding_box();
    let w = hi[0] - lo[0];
    let h = hi[1] - lo[1];
    let zx = intr.fx * w / (fill * intr.width as f64);
    let zy = intr.fy * h / (fill * intr.height as f64);
    zx.max(zy)
}

/// Yaws with guaranteed pairwise separation `range/M`: evenly spaced slots
/// plus sorted uniform slack, shuffled across frames.
fn sample_yaws(m: usize, half_range_deg: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let range = 2.0 * half_range_deg;
    if m == 1 {
        return vec![rng.random_range(-half_range_deg..half_range_deg)];
    }
    let sep = range / m as f64;
    let slack = range - (m - 1) as f64 * sep; // = range/M
    let mut offsets: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..slack)).collect();
    offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut yaws: Vec<f64> = (0..m)
        .map(|k| -half_range_deg + k as f64 * sep + offsets[k])
        .collect();
    // shuffle assignment to frames
    for i in (1..yaws.len()).rev() {
        let j = rng.random_range(0..=i);
        yaws.swap(i, j);
    }
    yaws
}

fn axis_angle_from_ypr(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> [f64; 3] {
    let yaw = yaw_deg.to_radians();
    let pitch = pitch_deg.to_radians();
    let roll = roll_deg.to_radians();
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    let sa = r.scaled_axis();
    [sa.x, sa.y, sa.z]
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
}

/// Generate synthetic multi-frame samples from a held-out ground-truth model.
pub fn generate_synthetic(gt_model: &FaceModel, config: &GeneratorConfig) -> Result<Vec<MultiFrameSample>> {
    if config.frames_per_subject == 0 {
        return Err(Error::InvalidInput("frames_per_subject must be >= 1".into()));
    }
    gt_model.validate()?;
    let intr = CameraIntrinsics::default_for_image(config.width, config.height);
    (0..config.subjects)
        .into_par_iter()
        .map(|idx| generate_subject(gt_model, config, &intr, idx))
        .collect()
}

fn generate_subject(
    gt_model: &FaceModel,
    config: &GeneratorConfig,
    intr: &CameraIntrinsics,
    idx: usize,
) -> Result<MultiFrameSample> {
    let m = config.frames_per_subject;
    let mut rng = derive_rng(config.seed, "subject", idx as u64);
    let alpha = normal_vec(&mut rng, gt_model.identity_dim(), config.identity_std);
    let mut beta = normal_vec(&mut rng, gt_model.appearance_dim(), config.appearance_std);
    // keep albedo inside a printable range so image clamping stays inactive
    for _ in 0..12 {
        let albedo = gt_model.assemble_appearance(&beta);
        let min = albedo.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = albedo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min >= 0.02 && max <= 0.98 {
            break;
        }
        beta *= 0.8;
    }
    let identity = IdentityParams { alpha, beta };
    let albedo = gt_model.assemble_appearance(&identity.beta);
    let positions_neutral = gt_model.assemble_vertices(&identity.alpha, &DVector::zeros(gt_model.expression_dim()));

    let yaws = sample_yaws(m, config.yaw_half_range_deg, &mut rng);
    let base_depth = framing_depth(gt_model, intr, config.framing);
    let mut frames = Vec::with_capacity(m);
    let mut frame_params = Vec::with_capacity(m);
    let projected_basis = gt_model.projected_geom_basis();
    for (f, &yaw) in yaws.iter().enumerate() {
        let mut frng = derive_rng(config.seed, "frame", (idx as u64) << 16 | f as u64);
        let pitch: f64 = frng.sample::<f64, _>(StandardNormal) * config.pitch_roll_std_deg;
        let roll: f64 = frng.sample::<f64, _>(StandardNormal) * config.pitch_roll_std_deg;
        let rotation = axis_angle_from_ypr(yaw, pitch, roll);
        let translation = [
            frng.sample::<f64, _>(StandardNormal) * config.translation_jitter,
            frng.sample::<f64, _>(StandardNormal) * config.translation_jitter,
            base_depth + frng.sample::<f64, _>(StandardNormal) * config.translation_jitter,
        ];
        let delta = DVector::from_fn(gt_model.expression_dim(), |u, _| {
            let z: f64 = frng.sample(StandardNormal);
            config.expression_scale * gt_model.expression_sigmas[u] * z
        });
        let mut gamma = [0.0f64; 27];
        for ch in 0..3 {
            gamma[ch] = frng.random_range(0.65..0.9);
        }
        for b in 1..9 {
            for ch in 0..3 {
                gamma[3 * b + ch] = frng.sample::<f64, _>(StandardNormal) * config.illumination_scale;
            }
        }
        let mut params = FrameParams { rotation, translation, gamma, delta };

        // shading is linear in gamma: rescale so rendered colors stay inside
        // [0, 1] and the stored ground truth reproduces the file exactly
        let positions = gt_model.assemble_vertices_with_projected(
            &projected_basis,
            &identity.alpha,
            &params.delta,
        );
        for _ in 0..10 {
            let fwd = forward_frame(&gt_model.mesh, &positions, &albedo, &params, intr);
            let mut max = f64::NEG_INFINITY;
            let mut min = f64::INFINITY;
            for (color, visible) in fwd.color.iter().zip(&fwd.visible) {
                if !visible {
                    continue;
                }
                for c in 0..3 {
                    max = max.max(color[c]);
                    min = min.min(color[c]);
                }
            }
            if max > 0.995 {
                let s = 0.995 / max;
                for g in params.gamma.iter_mut() {
                    *g *= s;
                }
                continue;
            }
            if min < 0.005 {
                for b in 1..9 {
                    for ch in 0..3 {
                        params.gamma[3 * b + ch] *= 0.7;
                    }
                }
                continue;
            }
            break;
        }

        let fwd = forward_frame(&gt_model.mesh, &positions, &albedo, &params, intr);
        let render = fwd.into_render();
        let image = rasterize_preview(&render, &gt_model.mesh.faces, intr, &RasterOptions::default());
        let landmarks = LandmarkSet::new(
            render.landmark_screens(&gt_model.mesh),
            vec![1.0; LANDMARK_COUNT],
        )?;
        frames.push(Frame { image, landmarks });
        frame_params.push(params);
    }

    MultiFrameSample::new(
        format!("subj{idx:04}"),
        frames,
        Some(GroundTruth {
            identity,
            frames: frame_params,
            neutral_vertices: positions_neutral,
            albedo,
        }),
    )
}

// --- serialization ---------------------------------------------------------

fn landmark_csv(set: &LandmarkSet) -> String {
    let mut out = String::new();
    for (i, (p, c)) in set.positions.iter().zip(&set.confidences).enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", p[0], p[1], c));
    }
    out
}

fn parse_landmark_csv(text: &str, path: &Path) -> Result<LandmarkSet> {
    let mut positions = Vec::new();
    let mut confidences = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, lineno + 1, "expected index,x,y,confidence"));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad number `{s}`")))
        };
        positions.push([parse(fields[1])?, parse(fields[2])?]);
        confidences.push(parse(fields[3])?);
    }
    if positions.len() != LANDMARK_COUNT {
        return Err(Error::InvalidInput(format!(
            "{}: expected {LANDMARK_COUNT} landmark rows, got {}",
            path.display(),
            positions.len()
        )));
    }
    LandmarkSet::new(positions, confidences)
}

fn ground_truth_archive(gt: &GroundTruth) -> Archive {
    let mut arc = Archive::new();
    let m = gt.frames.len();
    let b = gt.frames.first().map(|f| f.delta.len()).unwrap_or(0);
    arc.insert_f64("alpha", vec![gt.identity.alpha.len()], gt.identity.alpha.as_slice().to_vec());
    arc.insert_f64("beta", vec![gt.identity.beta.len()], gt.identity.beta.as_slice().to_vec());
    let mut rot = Vec::with_capacity(3 * m);
    let mut trans = Vec::with_capacity(3 * m);
    let mut gammas = Vec::with_capacity(27 * m);
    let mut deltas = Vec::with_capacity(b * m);
    for f in &gt.frames {
        rot.extend_from_slice(&f.rotation);
        trans.extend_from_slice(&f.translation);
        gammas.extend_from_slice(&f.gamma);
        deltas.extend_from_slice(f.delta.as_slice());
    }
    arc.insert_f64("rotations", vec![m, 3], rot);
    arc.insert_f64("translations", vec![m, 3], trans);
    arc.insert_f64("gammas", vec![m, 27], gammas);
    arc.insert_f64("deltas", vec![m, b], deltas);
    arc.insert_f64("neutral_vertices", vec![gt.neutral_vertices.len()], gt.neutral_vertices.clone());
    arc.insert_f64("albedo", vec![gt.albedo.len()], gt.albedo.clone());
    arc
}

fn ground_truth_from_archive(arc: &Archive, path: &Path) -> Result<GroundTruth> {
    let (_, alpha) = arc.f64_entry(path, "alpha")?;
    let (_, beta) = arc.f64_entry(path, "beta")?;
    let (rdims, rot) = arc.f64_entry(path, "rotations")?;
    let (_, trans) = arc.f64_entry(path, "translations")?;
    let (_, gammas) = arc.f64_entry(path, "gammas")?;
    let (ddims, deltas) = arc.f64_entry(path, "deltas")?;
    let m = rdims[0];
    let b = ddims[1];
    let mut frames = Vec::with_capacity(m);
    for f in 0..m {
        let mut gamma = [0.0f64; 27];
        gamma.copy_from_slice(&gammas[27 * f..27 * (f + 1)]);
        frames.push(FrameParams {
            rotation: [rot[3 * f], rot[3 * f + 1], rot[3 * f + 2]],
            translation: [trans[3 * f], trans[3 * f + 1], trans[3 * f + 2]],
            gamma,
            delta: DVector::from_column_slice(&deltas[b * f..b * (f + 1)]),
        });
    }
    Ok(GroundTruth {
        identity: IdentityParams {
            alpha: DVector::from_column_slice(alpha),
            beta: DVector::from_column_slice(beta),
        },
        frames,
        neutral_vertices: arc.f64_entry(path, "neutral_vertices")?.1.to_vec(),
        albedo: arc.f64_entry(path, "albedo")?.1.to_vec(),
    })
}

/// Write a parameter set (ground truth or fit result) as an archive.
pub fn save_params_archive(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    ground_truth_archive(gt).write(path)
}

pub fn load_params_archive(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    ground_truth_from_archive(&Archive::read(path)?, path)
}

/// Write one sample into `dir/<subject>/`, returning the frame file names.
pub fn save_sample(sample: &MultiFrameSample, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref().join(&sample.subject);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut names = Vec::new();
    for (i, frame) in sample.frames.iter().enumerate() {
        let png = format!("f{i:03}.png");
        frame.image.write_png(dir.join(&png))?;
        let csv_path = dir.join(format!("f{i:03}.lmk.csv"));
        std::fs::write(&csv_path, landmark_csv(&frame.landmarks))
            .map_err(|e| Error::io(&csv_path, e))?;
        names.push(format!("{}/{png}", sample.subject));
    }
    if let Some(gt) = &sample.ground_truth {
        ground_truth_archive(gt).write(dir.join("gt.arc"))?;
    }
    Ok(names)
}

/// Load one sample from explicit frame image paths (landmarks expected as
/// `<frame>.lmk.csv` siblings, ground truth as `gt.arc` when present).
pub fn load_sample_frames(base: &Path, subject: &str, frame_files: &[String]) -> Result<MultiFrameSample> {
    let mut seen = std::collections::HashSet::new();
    let mut frames = Vec::new();
    for rel in frame_files {
        if !seen.insert(rel.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate frame path `{rel}` in sample {subject}"
            )));
        }
        let img_path = base.join(rel);
        if !img_path.exists() {
            return Err(Error::InvalidInput(format!(
                "manifest references missing file {}",
                img_path.display()
            )));
        }
        let image = Image::read_png(&img_path)?;
        let lmk_path = img_path.with_extension("").with_extension("lmk.csv");
        let lmk_text = std::fs::read_to_string(&lmk_path).map_err(|e| Error::io(&lmk_path, e))?;
        let landmarks = parse_landmark_csv(&lmk_text, &lmk_path)?;
        frames.push(Frame { image, landmarks });
    }
    let gt_path = base.join(subject).join("gt.arc");
    let ground_truth = if gt_path.exists() {
        Some(ground_truth_from_archive(&Archive::read(&gt_path)?, &gt_path)?)
    } else {
        None
    };
    MultiFrameSample::new(subject.to_string(), frames, ground_truth)
}

/// Load `dir/<subject>/` by scanning for `f*.png`.
pub fn load_sample(dir: impl AsRef<Path>, subject: &str) -> Result<MultiFrameSample> {
    let base = dir.as_ref();
    let sdir = base.join(subject);
    let mut files: Vec<String> = std::fs::read_dir(&sdir)
        .map_err(|e| Error::io(&sdir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with('f') && n.ends_with(".png"))
        .map(|n| format!("{subject}/{n}"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no frames found under {}",
            sdir.display()
        )));
    }
    load_sample_frames(base, subject, &files)
}

/// Write a dataset: per-subject directories plus the manifest, and the
/// generator model when given.
pub fn save_dataset(
    samples: &[MultiFrameSample],
    gt_model: Option<&FaceModel>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for sample in samples {
        let names = save_sample(sample, dir)?;
        manifest.push_str(&sample.subject);
        for n in names {
            manifest.push(' ');
            manifest.push_str(&n);
        }
        manifest.push('\n');
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    if let Some(model) = gt_model {
        crate::store::save_model(model, dir.join("gt_model.arc"))?;
    }
    Ok(())
}

/// Load every sample named by `dir/manifest.txt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<MultiFrameSample>> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let subject = it
            .next()
            .ok_or_else(|| Error::parse(&mpath, lineno + 1, "empty manifest line"))?;
        let files: Vec<String> = it.map(|s| s.to_string()).collect();
        if files.is_empty() {
            return Err(Error::parse(&mpath, lineno + 1, "subject lists no frames"));
        }
        samples.push(load_sample_frames(dir, subject, &files)?);
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "manifest {} lists no samples",
            mpath.display()
        )));
    }
    Ok(samples)
}

/// Ingest externally prepared data: group frames by the manifest, drop frames
/// whose mean landmark confidence falls below the threshold, and drop samples
/// left with fewer than `min_frames` frames.
pub fn ingest_external(
    manifest_path: impl AsRef<Path>,
    min_frames: usize,
    confidence_threshold: f64,
) -> Result<Vec<MultiFrameSample>> {
    let mpath = manifest_path.as_ref();
    let base = mpath.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(mpath).map_err(|e| Error::io(mpath, e))?;
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let subject = it
            .next()
            .ok_or_else(|| Error::parse(mpath, lineno + 1, "empty manifest line"))?;
        let files: Vec<String> = it.map(|s| s.to_string()).collect();
        let sample = load_sample_frames(base, subject, &files)?;
        let kept: Vec<Frame> = sample
            .frames
            .into_iter()
            .filter(|f| f.landmarks.mean_confidence() >= confidence_threshold)
            .collect();
        if kept.len() < min_frames {
            continue;
        }
        samples.push(MultiFrameSample::new(subject.to_string(), kept, None)?);
    }
    Ok(samples)
}
