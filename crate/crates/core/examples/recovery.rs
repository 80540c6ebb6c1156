//! Run the model-recovery experiment at a configurable scale and print the
//! per-condition summary.
//!
//!     cargo run --release -p facefit --example recovery -- [train_subjects] [heldout_subjects]
//!
//! Defaults to a quick 12/6 split; the acceptance suite runs 50/12.

use facefit::experiment::{RecoveryConfig, RecoveryExperiment};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_subjects = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12usize);
    let heldout = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6usize);

    let cfg = RecoveryConfig {
        train_subjects,
        heldout_subjects: heldout,
        ..Default::default()
    };
    let t0 = Instant::now();
    let exp = RecoveryExperiment::prepare(&cfg).unwrap();
    println!(
        "generated {train_subjects} training + {heldout} held-out subjects in {:.1}s",
        t0.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let learn_m4 = exp.learn(4, 0x907a).unwrap();
    println!(
        "learned from M=4 frames in {:.1}s (loss {:.4} -> {:.4})",
        t.elapsed().as_secs_f64(),
        learn_m4.log.first().unwrap().breakdown.total,
        learn_m4.log.last().unwrap().breakdown.total
    );
    let t = Instant::now();
    let learn_m1 = exp.learn(1, 0x907a).unwrap();
    println!(
        "learned from M=1 frames in {:.1}s (loss {:.4} -> {:.4})",
        t.elapsed().as_secs_f64(),
        learn_m1.log.first().unwrap().breakdown.total,
        learn_m1.log.last().unwrap().breakdown.total
    );

    let mut reports = Vec::new();
    for (label, model) in [("M=4", &learn_m4.model), ("M=1", &learn_m1.model)] {
        for m in [1usize, 4] {
            let report = exp
                .fit_heldout(model, m, &format!("train {label} / test m={m}"))
                .unwrap();
            let corr = report.mean_albedo_corr().unwrap();
            println!(
                "{:<22} median rmse {:.2}% of diag, mean {:.4} units, albedo corr [{:.3} {:.3} {:.3}]",
                report.condition,
                report.median_rmse_pct(),
                report.mean_rmse(),
                corr[0],
                corr[1],
                corr[2]
            );
            reports.push(report);
        }
    }
    println!();
    println!("{}", facefit::eval::format_summary_table(&reports));
}
