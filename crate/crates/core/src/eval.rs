//! Geometric evaluation: rigid alignment, per-vertex RMSE on shared topology,
//! and albedo/illumination disentanglement metrics on synthetic ground truth.

use crate::error::{Error, Result};
use crate::shading::{shade, Illumination};
use nalgebra::{Matrix3, Vector3};

/// Closed-form rigid alignment (no scaling) minimizing
/// `Σ ‖R·s_i + t − t_i‖²`, with reflection correction.
pub fn procrustes_align(source: &[f64], target: &[f64]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if source.len() != target.len() {
        return Err(Error::Dimension(format!(
            "point sets differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    let n = source.len() / 3;
    if n < 3 {
        return Err(Error::InvalidInput("need at least 3 points".into()));
    }
    let mut sc = Vector3::zeros();
    let mut tc = Vector3::zeros();
    for i in 0..n {
        sc += Vector3::new(source[3 * i], source[3 * i + 1], source[3 * i + 2]);
        tc += Vector3::new(target[3 * i], target[3 * i + 1], target[3 * i + 2]);
    }
    sc /= n as f64;
    tc /= n as f64;
    let mut h = Matrix3::<f64>::zeros();
    for i in 0..n {
        let s = Vector3::new(source[3 * i], source[3 * i + 1], source[3 * i + 2]) - sc;
        let t = Vector3::new(target[3 * i], target[3 * i + 1], target[3 * i + 2]) - tc;
        h += s * t.transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let sv = svd.singular_values;
    if sv[2] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Degenerate(
            "cross-covariance rank < 3 (degenerate point configuration)".into(),
        ));
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = v * correction * u.transpose();
    let t = tc - r * sc;
    Ok((r, t))
}

pub fn apply_rigid(points: &[f64], r: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    for p in points.chunks_exact(3) {
        let q = r * Vector3::new(p[0], p[1], p[2]) + t;
        out.extend_from_slice(&[q.x, q.y, q.z]);
    }
    out
}

/// Per-vertex RMSE after rigid alignment (identity correspondence — both
/// vectors live on the same topology).
pub fn per_vertex_rmse(reconstruction: &[f64], ground_truth: &[f64]) -> Result<f64> {
    let (r, t) = procrustes_align(reconstruction, ground_truth)?;
    let aligned = apply_rigid(reconstruction, &r, &t);
    let n = ground_truth.len() / 3;
    let mut sum = 0.0;
    for i in 0..n {
        for c in 0..3 {
            let d = aligned[3 * i + c] - ground_truth[3 * i + c];
            sum += d * d;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// RMSE in model units plus as a percentage of the ground-truth bounding-box
/// diagonal.
pub fn per_vertex_rmse_pct(reconstruction: &[f64], ground_truth: &[f64]) -> Result<(f64, f64)> {
    let rmse = per_vertex_rmse(reconstruction, ground_truth)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in ground_truth.chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    Ok((rmse, 100.0 * rmse / diag))
}

/// Per-channel Pearson correlation of recovered vs. ground-truth albedo after
/// a global per-channel least-squares scale (the albedo/light product has an
/// inherent scale ambiguity).
pub fn albedo_correlation(recovered: &[f64], ground_truth: &[f64]) -> Result<[f64; 3]> {
    if recovered.len() != ground_truth.len() || !recovered.len().is_multiple_of(3) {
        return Err(Error::Dimension("albedo arrays must match".into()));
    }
    let n = recovered.len() / 3;
    let mut out = [0.0f64; 3];
    for ch in 0..3 {
        let rec: Vec<f64> = (0..n).map(|i| recovered[3 * i + ch]).collect();
        let gt: Vec<f64> = (0..n).map(|i| ground_truth[3 * i + ch]).collect();
        let dot: f64 = rec.iter().zip(&gt).map(|(a, b)| a * b).sum();
        let nrm: f64 = rec.iter().map(|a| a * a).sum();
        let scale = if nrm > 0.0 { dot / nrm } else { 1.0 };
        let scaled: Vec<f64> = rec.iter().map(|a| a * scale).collect();
        out[ch] = pearson(&scaled, &gt);
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// RMSE of `shade(1, n, γ_rec)/shade(1, n, γ_gt) − 1` over visible vertices
/// and channels. Channels where the reference shading is near zero are
/// skipped.
pub fn shading_ratio_error(
    normals: &[[f64; 3]],
    visible: &[bool],
    recovered: &Illumination,
    ground_truth: &Illumination,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    let ones = [1.0, 1.0, 1.0];
    for (n, &vis) in normals.iter().zip(visible) {
        if !vis {
            continue;
        }
        let rec = shade(&ones, n, recovered);
        let gt = shade(&ones, n, ground_truth);
        for c in 0..3 {
            if gt[c].abs() < 1e-6 {
                continue;
            }
            let r = rec[c] / gt[c] - 1.0;
            sum += r * r;
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    (sum / count as f64).sqrt()
}

/// Combined disentanglement metrics on one sample.
pub fn disentanglement_metrics(
    recovered_albedo: &[f64],
    gt_albedo: &[f64],
    recovered_gamma: &Illumination,
    gt_gamma: &Illumination,
    normals: &[[f64; 3]],
    visible: &[bool],
) -> Result<([f64; 3], f64)> {
    let corr = albedo_correlation(recovered_albedo, gt_albedo)?;
    let ratio = shading_ratio_error(normals, visible, recovered_gamma, gt_gamma);
    Ok((corr, ratio))
}

/// One evaluated sample.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub subject: String,
    pub rmse: f64,
    pub rmse_pct: f64,
    pub albedo_corr: Option<[f64; 3]>,
    pub shading_ratio_err: Option<f64>,
}

/// Evaluation results for one condition (for example "train M=4 / test M=1").
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub condition: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_rmse(&self) -> f64 {
        self.rows.iter().map(|r| r.rmse).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn sd_rmse(&self) -> f64 {
        let mean = self.mean_rmse();
        let var = self
            .rows
            .iter()
            .map(|r| (r.rmse - mean) * (r.rmse - mean))
            .sum::<f64>()
            / self.rows.len().max(1) as f64;
        var.sqrt()
    }

    pub fn median_rmse_pct(&self) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.rmse_pct).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.is_empty() {
            return f64::NAN;
        }
        let mid = v.len() / 2;
        if v.len().is_multiple_of(2) {
            (v[mid - 1] + v[mid]) / 2.0
        } else {
            v[mid]
        }
    }

    pub fn mean_albedo_corr(&self) -> Option<[f64; 3]> {
        let rows: Vec<&[f64; 3]> = self.rows.iter().filter_map(|r| r.albedo_corr.as_ref()).collect();
        if rows.is_empty() {
            return None;
        }
        let mut mean = [0.0f64; 3];
        for r in &rows {
            for c in 0..3 {
                mean[c] += r[c] / rows.len() as f64;
            }
        }
        Some(mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,rmse,rmse_pct_diag,corr_r,corr_g,corr_b,shading_ratio_err\n");
        for r in &self.rows {
            let corr = r.albedo_corr.unwrap_or([f64::NAN; 3]);
            let ratio = r.shading_ratio_err.unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.subject, r.rmse, r.rmse_pct, corr[0], corr[1], corr[2], ratio
            ));
        }
        out
    }
}

/// Human-readable summary: one column per condition, Mean and SD rows.
pub fn format_summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let width = 22usize;
    out.push_str(&format!("{:<10}", ""));
    for r in reports {
        out.push_str(&format!("{:>width$}", r.condition, width = width));
    }
    out.push('\n');
    out.push_str(&format!("{:<10}", "Mean"));
    for r in reports {
        out.push_str(&format!("{:>width$}", format!("{:.4} ({:.2}%)", r.mean_rmse(), {
            let mean_pct = r.rows.iter().map(|x| x.rmse_pct).sum::<f64>() / r.rows.len().max(1) as f64;
            mean_pct
        }), width = width));
    }
    out.push('\n');
    out.push_str(&format!("{:<10}", "SD"));
    for r in reports {
        out.push_str(&format!("{:>width$}", format!("{:.4}", r.sd_rmse()), width = width));
    }
    out.push('\n');
    out.push_str(&format!("{:<10}", "Median%"));
    for r in reports {
        out.push_str(&format!("{:>width$}", format!("{:.2}%", r.median_rmse_pct()), width = width));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::derive_rng(seed, "eval-test", 0);
        (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_sets_align_to_identity() {
        let pts = random_points(20, 1);
        let (r, t) = procrustes_align(&pts, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(r[(i, j)], expect, epsilon = 1e-10);
            }
            assert_abs_diff_eq!(t[i], 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn known_rigid_motion_is_recovered() {
        let pts = random_points(30, 2);
        let rot = crate::camera::rotation_matrix(&[0.4, -0.3, 0.8]);
        let trans = Vector3::new(1.0, -2.0, 0.5);
        let moved = apply_rigid(&pts, &rot, &trans);
        let (r, t) = procrustes_align(&pts, &moved).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r[(i, j)], rot[(i, j)], epsilon = 1e-10);
            }
            assert_abs_diff_eq!(t[i], trans[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn colinear_points_are_degenerate() {
        let pts: Vec<f64> = (0..10).flat_map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(procrustes_align(&pts, &pts).is_err());
    }

    #[test]
    fn rmse_zero_for_identical_and_rigidly_moved() {
        let pts = random_points(25, 3);
        assert_abs_diff_eq!(per_vertex_rmse(&pts, &pts).unwrap(), 0.0, epsilon = 1e-10);
        let moved: Vec<f64> = pts
            .chunks_exact(3)
            .flat_map(|p| [p[0] + 1.0, p[1] + 2.0, p[2] + 3.0])
            .collect();
        assert_abs_diff_eq!(per_vertex_rmse(&moved, &pts).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn rmse_is_rigid_invariant_and_symmetric() {
        let a = random_points(40, 4);
        let mut b = random_points(40, 5);
        for v in &mut b {
            *v *= 0.3;
        }
        let b: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let base = per_vertex_rmse(&a, &b).unwrap();
        let rot = crate::camera::rotation_matrix(&[0.2, 0.9, -0.4]);
        let trans = Vector3::new(-3.0, 0.7, 2.0);
        let a_moved = apply_rigid(&a, &rot, &trans);
        assert_abs_diff_eq!(per_vertex_rmse(&a_moved, &b).unwrap(), base, epsilon = 1e-10);
        // symmetry after alignment
        assert_abs_diff_eq!(per_vertex_rmse(&b, &a).unwrap(), base, epsilon = 1e-10);
    }

    #[test]
    fn unit_offsets_give_unit_rmse_before_alignment_bound() {
        let mut rng = crate::rng::derive_rng(6, "eval-test", 1);
        let gt = random_points(200, 7);
        // every vertex offset by a random unit vector
        let mut rec = gt.clone();
        for i in 0..200 {
            let v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            for c in 0..3 {
                rec[3 * i + c] += v[c] / len;
            }
        }
        // raw rmse is exactly 1; alignment can only reduce it
        let mut raw = 0.0;
        for (a, b) in rec.iter().zip(&gt) {
            raw += (a - b) * (a - b);
        }
        let raw = (raw / 200.0).sqrt();
        assert_abs_diff_eq!(raw, 1.0, epsilon = 1e-12);
        let aligned = per_vertex_rmse(&rec, &gt).unwrap();
        assert!(aligned <= 1.0 + 1e-12);
    }

    #[test]
    fn perfect_recovery_scores_perfectly() {
        let albedo = random_points(50, 8).iter().map(|v| 0.5 + 0.2 * v).collect::<Vec<f64>>();
        let corr = albedo_correlation(&albedo, &albedo).unwrap();
        for c in corr {
            assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);
        }
        let normals: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let t = i as f64 / 20.0 * std::f64::consts::PI;
                [t.sin() * 0.6, t.cos() * 0.6, (1.0f64 - 0.36).sqrt()]
            })
            .collect();
        let visible = vec![true; 20];
        let gamma = crate::shading::band0([0.8, 0.7, 0.6]);
        assert_eq!(shading_ratio_error(&normals, &visible, &gamma, &gamma), 0.0);
    }

    #[test]
    fn scale_ambiguity_does_not_hurt_correlation() {
        let gt: Vec<f64> = random_points(60, 9).iter().map(|v| 0.6 + 0.3 * v).collect();
        let scaled: Vec<f64> = gt.iter().map(|v| v * 1.7).collect();
        let corr = albedo_correlation(&scaled, &gt).unwrap();
        for c in corr {
            assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn noisy_recovery_matches_closed_form_correlation() {
        // corr = 1/sqrt(1 + σ²/var) for independent additive noise
        let mut rng = crate::rng::derive_rng(10, "eval-test", 2);
        use rand_distr::StandardNormal;
        let n = 60000;
        let mut gt = Vec::with_capacity(3 * n);
        let mut rec = Vec::with_capacity(3 * n);
        let signal_sd = 0.2;
        let noise_sd = 0.1;
        for _ in 0..3 * n {
            let s: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            gt.push(0.5 + signal_sd * s);
            rec.push(0.5 + signal_sd * s + noise_sd * e);
        }
        let corr = albedo_correlation(&rec, &gt).unwrap();
        let expect = 1.0 / (1.0f64 + (noise_sd / signal_sd).powi(2)).sqrt();
        for c in corr {
            assert_abs_diff_eq!(c, expect, epsilon = 0.01);
        }
    }

    #[test]
    fn report_aggregates_recompute_exactly() {
        let report = EvalReport {
            condition: "test".into(),
            rows: vec![
                EvalRow { subject: "a".into(), rmse: 1.0, rmse_pct: 10.0, albedo_corr: None, shading_ratio_err: None },
                EvalRow { subject: "b".into(), rmse: 3.0, rmse_pct: 30.0, albedo_corr: None, shading_ratio_err: None },
            ],
        };
        assert_eq!(report.mean_rmse(), 2.0);
        assert_eq!(report.sd_rmse(), 1.0);
        assert_eq!(report.median_rmse_pct(), 20.0);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 3);
    }
}
