//! Subcommand implementations.

use crate::{ensure_dir, require_nonempty, GlobalArgs};
use anyhow::{bail, Context};
use facefit::camera::CameraIntrinsics;
use facefit::dataset::{
    generate_synthetic, load_dataset, load_params_archive, save_dataset, save_params_archive,
    GroundTruth, MultiFrameSample,
};
use facefit::eval::{
    disentanglement_metrics, format_summary_table, per_vertex_rmse_pct, EvalReport, EvalRow,
};
use facefit::grad::finite_difference_check;
use facefit::losses::LossBreakdown;
use facefit::mesh::{load_landmarks, load_mesh};
use facefit::model::{BlendshapeSet, FaceModel, FrameParams, IdentityParams};
use facefit::optim::{fit_sample, learn_model, LearnOptions, LOG_CSV_HEADER};
use facefit::params::{BlockKind, ParamVector};
use facefit::render::{rasterize_preview, render_vertices, RasterOptions};
use facefit::shading::band0;
use facefit::store::{load_blendshapes, load_model, save_model};
use facefit::synthetic::{synthetic_blendshapes, synthetic_ground_truth_model, GroundTruthScales};
use std::path::{Path, PathBuf};

fn load_mesh_with_landmarks(
    mesh_path: &Path,
    landmarks: Option<&Path>,
) -> anyhow::Result<facefit::mesh::Mesh> {
    let mut mesh = load_mesh(mesh_path)?;
    let lmk_path = match landmarks {
        Some(p) => p.to_path_buf(),
        None => mesh_path.with_extension("lmk"),
    };
    let lmk = load_landmarks(&lmk_path, mesh.vertex_count())
        .with_context(|| format!("landmark sidecar {}", lmk_path.display()))?;
    mesh.set_landmarks(lmk)?;
    Ok(mesh)
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    global: &GlobalArgs,
    out: PathBuf,
    subjects: Option<usize>,
    frames: Option<usize>,
    size: Option<usize>,
    mesh: Option<PathBuf>,
    landmarks: Option<PathBuf>,
    blendshapes: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut settings = global.settings()?;
    if let Some(s) = subjects {
        settings.gen_subjects = s;
    }
    if let Some(f) = frames {
        settings.gen_frames = f;
    }
    if let Some(px) = size {
        settings.gen_width = px;
        settings.gen_height = px;
    }
    let mesh = match &mesh {
        Some(path) => load_mesh_with_landmarks(path, landmarks.as_deref())?,
        None => facefit::procedural::face_mask(settings.mesh_rows, settings.mesh_cols),
    };
    let blend = match &blendshapes {
        Some(path) => load_blendshapes(path)?,
        None => synthetic_blendshapes(&mesh, settings.blendshape_count, global.seed ^ 0xb1e4d),
    };
    let scales = GroundTruthScales {
        geometry_rms: settings.gt_geometry_rms,
        appearance_rms: settings.gt_appearance_rms,
        ..Default::default()
    };
    let gt_model = synthetic_ground_truth_model(
        &mesh,
        settings.graph_nodes,
        settings.skinning_k,
        settings.gt_identity_dim,
        settings.gt_appearance_dim,
        &blend,
        scales,
        global.seed ^ 0x67f00d,
    )?;
    let config = settings.generator_config(global.seed);
    let samples = generate_synthetic(&gt_model, &config)?;
    ensure_dir(&out)?;
    save_dataset(&samples, Some(&gt_model), &out)?;
    facefit::mesh::save_mesh(&mesh, out.join("mesh.mesh"))?;
    facefit::mesh::save_landmarks(&mesh.landmarks, out.join("mesh.lmk"))?;
    facefit::store::save_blendshapes(&blend, out.join("blendshapes.arc"))?;
    std::fs::write(out.join("run.txt"), global.run_metadata())?;
    println!(
        "generated {} subjects x {} frames at {}x{} under {}",
        samples.len(),
        config.frames_per_subject,
        config.width,
        config.height,
        out.display()
    );
    Ok(())
}

fn write_trace_csv(trace: &[LossBreakdown], path: &Path) -> anyhow::Result<()> {
    let mut text = format!("{LOG_CSV_HEADER}\n");
    for (i, b) in trace.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i, b.pho, b.lan, b.smo, b.spa, b.ble, b.total
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn learn(
    global: &GlobalArgs,
    dataset_dir: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    frames: Option<usize>,
) -> anyhow::Result<()> {
    let settings = global.settings()?;
    let mut dataset = load_dataset(&dataset_dir)?;
    if let Some(m) = frames {
        dataset = dataset
            .iter()
            .map(|s| s.take_frames(m.min(s.frame_count())))
            .collect::<facefit::Result<Vec<_>>>()?;
    }
    require_nonempty(&dataset, "dataset")?;

    // topology and the fixed expression basis come from the generator model;
    // the learnable bases start from scratch
    let gt_model_path = dataset_dir.join("gt_model.arc");
    if !gt_model_path.exists() {
        bail!(
            "{} not found; learning needs the dataset mesh and blendshapes",
            gt_model_path.display()
        );
    }
    let gt_model = load_model(&gt_model_path)?;
    let blend = BlendshapeSet {
        basis: gt_model.blendshapes.clone(),
        sigmas: gt_model.expression_sigmas.clone(),
    };
    let initial = facefit::model::init_model(
        &gt_model.mesh,
        settings.graph_nodes,
        settings.skinning_k,
        settings.identity_dim,
        settings.appearance_dim,
        &blend,
        global.seed,
    )?;

    ensure_dir(&out)?;
    let schedule = settings.learn_schedule();
    let opts = LearnOptions {
        checkpoint_dir: Some(out.clone()),
        resume,
        log_path: Some(out.join("train_log.csv")),
        ..settings.learn_options(global.seed)
    };
    let result = learn_model(&dataset, &initial, &schedule, &opts)?;
    save_model(&result.model, out.join("model.arc"))?;
    // final per-sample parameters, one archive per subject
    for params in &result.store {
        let neutral = result.model.neutral_vertices(&params.identity.alpha);
        let albedo = result.model.assemble_appearance(&params.identity.beta);
        let gt = GroundTruth {
            identity: params.identity.clone(),
            frames: params.frames.clone(),
            neutral_vertices: neutral,
            albedo,
        };
        save_params_archive(&gt, out.join(format!("params_{}.arc", params.subject)))?;
    }
    std::fs::write(out.join("run.txt"), global.run_metadata())?;
    let first = result.log.first().map(|r| r.breakdown.total).unwrap_or(f64::NAN);
    let last = result.log.last().map(|r| r.breakdown.total).unwrap_or(f64::NAN);
    println!(
        "learned model over {} iterations: total loss {first:.6} -> {last:.6}; wrote {}",
        result.log.len(),
        out.join("model.arc").display()
    );
    Ok(())
}

pub fn fit(
    global: &GlobalArgs,
    model_path: PathBuf,
    dataset_dir: PathBuf,
    subject: Option<String>,
    frames: Option<usize>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let settings = global.settings()?;
    let model = load_model(&model_path)?;
    let mut dataset = load_dataset(&dataset_dir)?;
    if let Some(s) = &subject {
        dataset.retain(|x| &x.subject == s);
        if dataset.is_empty() {
            bail!("subject `{s}` not found in {}", dataset_dir.display());
        }
    }
    ensure_dir(&out)?;
    let opts = settings.fit_options();
    let mut rows = Vec::new();
    for sample in &dataset {
        let sample = match frames {
            Some(m) => sample.take_frames(m)?,
            None => sample.clone(),
        };
        let result = fit_sample(&model, &sample, &opts)
            .with_context(|| format!("fitting {}", sample.subject))?;
        write_trace_csv(&result.trace, &out.join(format!("fit_{}.csv", sample.subject)))?;
        let neutral = model.neutral_vertices(&result.identity.alpha);
        let albedo = model.assemble_appearance(&result.identity.beta);
        save_params_archive(
            &GroundTruth {
                identity: result.identity.clone(),
                frames: result.frames.clone(),
                neutral_vertices: neutral.clone(),
                albedo: albedo.clone(),
            },
            out.join(format!("params_{}.arc", sample.subject)),
        )?;
        // overlays: fitted render composited over each input frame
        let intr = sample.intrinsics();
        for (f, frame) in sample.frames.iter().enumerate() {
            let render = render_vertices(&model, &result.identity, &result.frames[f], &intr);
            let img = rasterize_preview(
                &render,
                &model.mesh.faces,
                &intr,
                &RasterOptions {
                    background_image: Some(frame.image.clone()),
                    edge_padding: 0,
                    ..Default::default()
                },
            );
            img.write_png(out.join(format!("overlay_{}_f{f:03}.png", sample.subject)))?;
        }
        // ground truth present: append evaluation metrics
        if let Some(gt) = &sample.ground_truth {
            let row = evaluate_against_gt(&model, &sample, gt, &result.identity, &result.frames, &neutral, &albedo)?;
            rows.push(row);
        }
        let last = result.trace.last().map(|b| b.total).unwrap_or(f64::NAN);
        println!("fit {} (m={}): final loss {last:.6}", sample.subject, sample.frame_count());
    }
    if !rows.is_empty() {
        let report = EvalReport {
            condition: format!("fit m={}", frames.map(|m| m.to_string()).unwrap_or_else(|| "all".into())),
            rows,
        };
        std::fs::write(out.join("eval.csv"), report.to_csv())?;
        std::fs::write(out.join("summary.txt"), format_summary_table(&[report]))?;
    }
    std::fs::write(out.join("run.txt"), global.run_metadata())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_against_gt(
    model: &FaceModel,
    sample: &MultiFrameSample,
    gt: &GroundTruth,
    identity: &IdentityParams,
    fitted_frames: &[FrameParams],
    neutral: &[f64],
    albedo: &[f64],
) -> anyhow::Result<EvalRow> {
    let (rmse, rmse_pct) = per_vertex_rmse_pct(neutral, &gt.neutral_vertices)?;
    let intr = sample.intrinsics();
    // reference surface and visibility from the ground-truth frames
    let mut ratio_sum = 0.0;
    let mut corr = None;
    for (f, gt_frame) in gt.frames.iter().enumerate() {
        let normals = facefit::mesh::compute_vertex_normals(&model.mesh, &gt.neutral_vertices)?;
        let rotated: Vec<[f64; 3]> = (0..model.vertex_count())
            .map(|i| {
                let n = [normals[3 * i], normals[3 * i + 1], normals[3 * i + 2]];
                facefit::camera::rigid_transform(&n, &gt_frame.rotation, &[0.0; 3])
            })
            .collect();
        let cam_pos: Vec<[f64; 3]> = (0..model.vertex_count())
            .map(|i| {
                let p = [
                    gt.neutral_vertices[3 * i],
                    gt.neutral_vertices[3 * i + 1],
                    gt.neutral_vertices[3 * i + 2],
                ];
                facefit::camera::rigid_transform(&p, &gt_frame.rotation, &gt_frame.translation)
            })
            .collect();
        let visible = facefit::render::visible_set(&cam_pos, &rotated, &intr);
        let (c, ratio) = disentanglement_metrics(
            albedo,
            &gt.albedo,
            &fitted_frames[f].gamma,
            &gt_frame.gamma,
            &rotated,
            &visible,
        )?;
        corr.get_or_insert(c);
        ratio_sum += ratio / gt.frames.len() as f64;
    }
    let _ = identity;
    Ok(EvalRow {
        subject: sample.subject.clone(),
        rmse,
        rmse_pct,
        albedo_corr: corr,
        shading_ratio_err: Some(ratio_sum),
    })
}

pub fn render(
    global: &GlobalArgs,
    model_path: PathBuf,
    out: PathBuf,
    yaw_deg: f64,
    size: usize,
) -> anyhow::Result<()> {
    let model = load_model(&model_path)?;
    ensure_dir(&out)?;
    let intr = CameraIntrinsics::default_for_image(size, size);
    let depth = facefit::dataset::framing_depth(&model, &intr, 0.78);
    let identity = IdentityParams::zeros(model.identity_dim(), model.appearance_dim());
    let yaw = yaw_deg.to_radians();
    let mut frame = FrameParams::neutral(model.expression_dim());
    frame.rotation = [0.0, yaw, 0.0];
    frame.translation = [0.0, 0.0, depth];
    frame.gamma = band0([1.0, 1.0, 1.0]);
    let opts = RasterOptions { edge_padding: 0, ..Default::default() };

    // lit render: albedo under band-0 white light
    let lit = render_vertices(&model, &identity, &frame, &intr);
    rasterize_preview(&lit, &model.mesh.faces, &intr, &opts)
        .write_png(out.join("lit.png"))?;

    // albedo pass: colors are the appearance values themselves
    let mut albedo_render = lit.clone();
    let albedo = model.assemble_appearance(&identity.beta);
    for i in 0..model.vertex_count() {
        albedo_render.color[i] = [albedo[3 * i], albedo[3 * i + 1], albedo[3 * i + 2]];
    }
    rasterize_preview(&albedo_render, &model.mesh.faces, &intr, &opts)
        .write_png(out.join("albedo.png"))?;

    // geometry shading: neutral gray albedo under a headlight
    let mut headlight = band0([0.55, 0.55, 0.55]);
    for ch in 0..3 {
        headlight[3 * 2 + ch] = -0.4; // n_z band: brightens camera-facing normals
    }
    let geo_frame = FrameParams { gamma: headlight, ..frame.clone() };
    let mut geo_model = model.clone();
    geo_model.appear_mean.iter_mut().for_each(|v| *v = 0.85);
    geo_model.appear_basis.fill(0.0);
    let geo = render_vertices(&geo_model, &identity, &geo_frame, &intr);
    rasterize_preview(&geo, &geo_model.mesh.faces, &intr, &opts)
        .write_png(out.join("geometry.png"))?;

    // overlay: lit render with projected landmarks marked
    let mut overlay = rasterize_preview(&lit, &model.mesh.faces, &intr, &opts);
    for &l in &model.mesh.landmarks {
        let u = lit.screen[l as usize];
        let (x, y) = (u[0].round() as i64, u[1].round() as i64);
        for (dx, dy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as usize) < overlay.width && (py as usize) < overlay.height {
                overlay.set_pixel(px as usize, py as usize, [0.0, 1.0, 0.2]);
            }
        }
    }
    overlay.write_png(out.join("overlay.png"))?;
    std::fs::write(out.join("run.txt"), global.run_metadata())?;
    println!("wrote geometry/albedo/lit/overlay under {}", out.display());
    Ok(())
}

pub fn gradcheck(
    global: &GlobalArgs,
    step: f64,
    tolerance: f64,
    max_coords: usize,
    block: Option<String>,
) -> anyhow::Result<()> {
    let settings = global.settings()?;
    // toy instance: ~500 vertices, two frames
    let mesh = facefit::procedural::face_mask(22, 23);
    let blend = synthetic_blendshapes(&mesh, 4, global.seed ^ 0xb1e4d);
    let gt_model = synthetic_ground_truth_model(
        &mesh,
        40,
        settings.skinning_k,
        5,
        3,
        &blend,
        Default::default(),
        global.seed ^ 0x67f00d,
    )?;
    let config = facefit::dataset::GeneratorConfig {
        subjects: 1,
        frames_per_subject: 2,
        width: 64,
        height: 64,
        seed: global.seed,
        ..Default::default()
    };
    let sample = generate_synthetic(&gt_model, &config)?
        .into_iter()
        .next()
        .expect("one subject requested");

    // perturbed parameters on a model with visible appearance variation
    let mut model = facefit::model::init_model(&mesh, 40, settings.skinning_k, 5, 3, &blend, global.seed)?;
    model.appear_basis *= 30.0;
    let gt = sample.ground_truth.as_ref().expect("synthetic sample");
    let mut pv = ParamVector::layout(&model, sample.frame_count(), true);
    let mut identity = gt.identity.clone();
    identity.alpha *= 0.9;
    let mut frames = gt.frames.clone();
    for f in &mut frames {
        f.rotation[1] += 0.02;
        f.delta *= 0.8;
    }
    pv.gather_sample(&identity, &frames);
    pv.gather_model(&model);

    let mut cfg = settings.loss_config();
    // resolve the p<1 sparsity curvature at a scale the FD step can see
    cfg.sparsity.eps_norm = cfg.sparsity.eps_norm.max(1e-3);
    let edge_weights = facefit::losses::uniform_edge_weights(&model);

    let all_blocks = vec![
        BlockKind::Alpha,
        BlockKind::Beta,
        BlockKind::Rotation(0),
        BlockKind::Translation(0),
        BlockKind::Gamma(0),
        BlockKind::Delta(0),
        BlockKind::Rotation(1),
        BlockKind::Translation(1),
        BlockKind::Gamma(1),
        BlockKind::Delta(1),
        BlockKind::GeomBasis,
        BlockKind::AppearBasis,
        BlockKind::AppearMean,
    ];
    let blocks: Vec<BlockKind> = match &block {
        Some(name) => {
            let matched: Vec<BlockKind> = all_blocks
                .iter()
                .copied()
                .filter(|b| b.to_string() == *name || b.to_string().starts_with(name.as_str()))
                .collect();
            if matched.is_empty() {
                bail!("unknown block `{name}`");
            }
            matched
        }
        None => all_blocks,
    };

    let mut tape = facefit::grad::GradientTape::new();
    let mut failed = false;
    println!("{:<16} {:>12} {:>9} {:>9}  status", "block", "max rel err", "checked", "skipped");
    for b in blocks {
        let report = finite_difference_check(
            &model,
            &sample,
            &pv,
            b,
            step,
            &cfg,
            &edge_weights,
            Some(max_coords),
            global.seed,
            &mut tape,
        )?;
        let ok = report.passes(tolerance, 1e-9);
        if !ok {
            failed = true;
        }
        println!(
            "{:<16} {:>12.3e} {:>9} {:>9}  {}",
            b.to_string(),
            report.max_rel_err,
            report.checked,
            report.skipped,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}

pub fn eval(
    _global: &GlobalArgs,
    dataset_dir: PathBuf,
    fits: PathBuf,
    out: PathBuf,
    condition: String,
) -> anyhow::Result<()> {
    let dataset = load_dataset(&dataset_dir)?;
    let gt_model_path = dataset_dir.join("gt_model.arc");
    if !gt_model_path.exists() {
        bail!("{} not found; evaluation needs ground truth", gt_model_path.display());
    }
    let gt_model = load_model(&gt_model_path)?;
    let mut rows = Vec::new();
    for sample in &dataset {
        let gt = sample.ground_truth.as_ref().with_context(|| {
            format!("sample {} has no ground truth (gt.arc missing)", sample.subject)
        })?;
        let params_path = fits.join(format!("params_{}.arc", sample.subject));
        if !params_path.exists() {
            continue;
        }
        let fit = load_params_archive(&params_path)?;
        let row = evaluate_against_gt(
            &gt_model,
            sample,
            gt,
            &fit.identity,
            &fit.frames,
            &fit.neutral_vertices,
            &fit.albedo,
        )?;
        rows.push(row);
    }
    require_nonempty(&rows, "no matching params_<subject>.arc found; evaluation set")?;
    let report = EvalReport { condition, rows };
    ensure_dir(&out)?;
    std::fs::write(out.join("eval.csv"), report.to_csv())?;
    let table = format_summary_table(&[report]);
    std::fs::write(out.join("summary.txt"), &table)?;
    println!("{table}");
    Ok(())
}
