//! 48³ probe with the candidate acceptance configuration; run with
//! `cargo test -p sscardiac --test scratch48 -- --ignored --nocapture`.

use sscardiac::metrics::endpoint_error;
use sscardiac::network::{SsNetConfig, SsSlConfig};
use sscardiac::phantom::{analytic_field, corpus_spec, export_study, generate};
use sscardiac::pipeline::{
    evaluate_study, load_study, motion_epe, predicted_consistency, run_all_interval_schemes,
    train_motion, train_segmentation, Direction, InferArm, MotionNet, SegNet, TrainConfig,
};
use sscardiac::volume::DeformationField;
use std::time::Instant;

#[test]
#[ignore]
fn probe_48() {
    let base = std::env::temp_dir().join(format!("sscardiac_p48_{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let dims = [48usize; 3];
    let t_points = 10usize;
    let corpus_seed = 20260808u64;
    let n_train = 6;
    let n_hold = 2;

    let t0 = Instant::now();
    let mut dirs = Vec::new();
    for i in 0..n_train + n_hold {
        let spec = corpus_spec(dims, t_points, corpus_seed, i, true);
        let seq = generate(&spec).unwrap();
        if let Err(e) = seq.check_invariants() {
            println!("study {i} invariant: {e}");
        }
        let dir = base.join(format!("study_{i:02}"));
        export_study(&seq, &dir).unwrap();
        dirs.push(dir);
    }
    println!("gen: {:.1?}", t0.elapsed());

    let motion_cfg = TrainConfig {
        studies: dirs[..n_train]
            .iter()
            .map(|p| p.to_string_lossy().to_string())
            .collect(),
        epochs_motion: 24,
        learning_rate: 1.5e-3,
        lambda_smooth: 0.1,
        lambda_consist: 0.1,
        patch_dims: [32, 32, 32],
        seed: 11,
        ssnet: SsNetConfig {
            base_channels: 6,
            depth: 3,
        },
        ..TrainConfig::default()
    };
    let seg_cfg = TrainConfig {
        epochs_seg: 15,
        learning_rate: 5e-4,
        sssl: SsSlConfig {
            base_channels: 8,
            depth: 3,
            num_classes: 2,
        },
        ..motion_cfg.clone()
    };

    let train_studies: Vec<_> = motion_cfg
        .studies
        .iter()
        .map(|s| load_study(std::path::Path::new(s), &motion_cfg).unwrap())
        .collect();
    let holdouts: Vec<_> = dirs[n_train..]
        .iter()
        .map(|p| load_study(p, &motion_cfg).unwrap())
        .collect();

    let t0 = Instant::now();
    let motion_out = train_motion(&motion_cfg, &train_studies, &base).unwrap();
    println!(
        "motion {:.0?}: losses(every 3rd) {:?}",
        t0.elapsed(),
        motion_out
            .epoch_losses
            .iter()
            .step_by(3)
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    let (motion, _) = MotionNet::load(&motion_out.checkpoint).unwrap();

    for h in &holdouts {
        let epe = motion_epe(&motion, h).unwrap();
        let zero_epe = {
            let mut acc = 0.0;
            let mut c = 0;
            for (_, truth) in h.truth_fields.iter() {
                acc += endpoint_error(&DeformationField::zeros(truth.dims, truth.spacing), truth)
                    .unwrap();
                c += 1;
            }
            acc / c as f64
        };
        let sigma = predicted_consistency(&motion, h, &motion_cfg).unwrap();
        println!("holdout {}: EPE {epe:.4} (zero {zero_epe:.4}), sigma {sigma:.4}", h.study_id());
    }

    let t0 = Instant::now();
    let seg_out = train_segmentation(&seg_cfg, &motion, &train_studies, &base).unwrap();
    println!(
        "seg {:.0?}: losses {:?}",
        t0.elapsed(),
        seg_out
            .epoch_losses
            .iter()
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    let (seg, _) = SegNet::load(&seg_out.checkpoint).unwrap();

    let t0 = Instant::now();
    for (arm, name) in [
        (InferArm::Baseline, "baseline"),
        (InferArm::Single(Direction::Past), "single"),
        (InferArm::Bidirectional, "bidir"),
    ] {
        let mut all = Vec::new();
        for h in &holdouts {
            all.extend(evaluate_study(&motion, &seg, h, &seg_cfg, arm).unwrap());
        }
        let mean: f64 = all.iter().map(|r| r.dice).sum::<f64>() / all.len() as f64;
        println!("{name}: mean dice {mean:.4} over {} records", all.len());
    }
    println!("arms eval: {:.0?}", t0.elapsed());

    let t0 = Instant::now();
    for h in &holdouts {
        for o in run_all_interval_schemes(&motion, &seg, h, &seg_cfg).unwrap() {
            println!(
                "{} {}: ED {:.4} ES {:.4}",
                h.study_id(),
                o.scheme.name(),
                o.dice_ed,
                o.dice_es
            );
            if o.scheme.name() == "D5" {
                if let Some(chain) = &o.composed_truth_to_es {
                    let spec = corpus_spec(dims, t_points, corpus_seed, n_train, true);
                    let direct = analytic_field(&spec, 1, 5).unwrap();
                    // Only meaningful for the first holdout whose spec this is.
                    let _ = direct;
                    let _ = chain;
                }
            }
        }
    }
    println!("ablation: {:.0?}", t0.elapsed());
}
