//! Manual end-to-end probe used to size the training schedule; run with
//! `cargo test -p sscardiac --test scratch_train -- --ignored --nocapture`.

use sscardiac::metrics::endpoint_error;
use sscardiac::network::{SsNetConfig, SsSlConfig};
use sscardiac::phantom::{analytic_field, export_study, generate, PhantomSpec};
use sscardiac::pipeline::{
    evaluate_study, load_study, motion_epe, predicted_consistency, train_motion,
    train_segmentation, Direction, InferArm, MotionNet, SegNet, TrainConfig,
};
use sscardiac::volume::DeformationField;
use std::path::PathBuf;
use std::time::Instant;

fn corpus_spec(seed: u64) -> PhantomSpec {
    let mut rng = sscardiac::rng::Rng::new(seed ^ 0xc0ffee);
    PhantomSpec {
        dims: [32, 32, 32],
        time_points: 8,
        cavity_semi_axes: [
            rng.uniform(5.6, 6.8),
            rng.uniform(5.6, 6.8),
            rng.uniform(7.0, 8.0),
        ],
        myo_thickness: rng.uniform(1.8, 2.4),
        ejection_fraction: rng.uniform(0.26, 0.34),
        max_twist_deg: rng.uniform(5.0, 8.0),
        papillary_count: 2,
        papillary_radius: rng.uniform(1.4, 1.9),
        noise_sigma: 0.02,
        spacing_mm: [1.0, 1.0, 1.0],
        seed,
    }
}

#[test]
#[ignore]
fn scratch_end_to_end() {
    let base = std::env::temp_dir().join(format!("sscardiac_scratch_{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();

    let n_train = 3usize;
    let n_hold = 1usize;
    let mut study_dirs: Vec<PathBuf> = Vec::new();
    let t0 = Instant::now();
    for i in 0..n_train + n_hold {
        let spec = corpus_spec(100 + i as u64);
        let seq = generate(&spec).unwrap();
        if let Err(e) = seq.check_invariants() {
            println!("study {i}: invariant: {e}");
        }
        let dir = base.join(format!("study_{i:02}"));
        export_study(&seq, &dir).unwrap();
        study_dirs.push(dir);
    }
    println!("phantom gen: {:.1?}", t0.elapsed());

    let cfg = TrainConfig {
        studies: study_dirs[..n_train]
            .iter()
            .map(|p| p.to_string_lossy().to_string())
            .collect(),
        epochs_motion: 60,
        epochs_seg: 20,
        learning_rate: 1e-3,
        lambda_smooth: 0.1,
        lambda_consist: 0.1,
        patch_dims: [32, 32, 32],
        seed: 7,
        ssnet: SsNetConfig {
            base_channels: 6,
            depth: 3,
        },
        sssl: SsSlConfig {
            base_channels: 8,
            depth: 3,
            num_classes: 2,
        },
        ..TrainConfig::default()
    };
    let train_studies: Vec<_> = cfg
        .studies
        .iter()
        .map(|s| load_study(std::path::Path::new(s), &cfg).unwrap())
        .collect();
    let holdout = load_study(&study_dirs[n_train], &cfg).unwrap();

    let t0 = Instant::now();
    let motion_out = train_motion(&cfg, &train_studies, &base).unwrap();
    println!(
        "motion train {:.1?}: losses {:?}",
        t0.elapsed(),
        motion_out
            .epoch_losses
            .iter()
            .step_by(4)
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    let (motion, _) = MotionNet::load(&motion_out.checkpoint).unwrap();

    let epe = motion_epe(&motion, &holdout).unwrap();
    let zero_epe = {
        let mut acc = 0.0;
        let mut cnt = 0;
        for (_, truth) in holdout.truth_fields.iter() {
            let zero = DeformationField::zeros(truth.dims, truth.spacing);
            acc += endpoint_error(&zero, truth).unwrap();
            cnt += 1;
        }
        acc / cnt as f64
    };
    let sigma = predicted_consistency(&motion, &holdout, &cfg).unwrap();
    println!("holdout EPE {epe:.4} (zero-field EPE {zero_epe:.4}), consistency {sigma:.4}");

    let t0 = Instant::now();
    let seg_out = train_segmentation(&cfg, &motion, &train_studies, &base).unwrap();
    println!(
        "seg train {:.1?}: losses {:?}",
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
        let records = evaluate_study(&motion, &seg, &holdout, &cfg, arm).unwrap();
        let mean: f64 = records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64;
        println!("{name}: mean dice {mean:.4}");
    }
    println!("eval: {:.1?}", t0.elapsed());

    let t0 = Instant::now();
    for o in sscardiac::pipeline::run_all_interval_schemes(&motion, &seg, &holdout, &cfg).unwrap() {
        println!(
            "{}: dice ED {:.4} ES {:.4}",
            o.scheme.name(),
            o.dice_ed,
            o.dice_es
        );
    }
    println!("ablation: {:.1?}", t0.elapsed());

    // Direct vs chained analytic field sanity at this scale.
    let spec = corpus_spec(100 + n_train as u64);
    let direct = analytic_field(&spec, 1, 5).unwrap();
    let legs: Vec<_> = (1..5)
        .map(|a| analytic_field(&spec, a, a + 1).unwrap())
        .collect();
    let mut acc = legs[0].clone();
    for leg in &legs[1..] {
        acc = sscardiac::transform::compose(leg, &acc).unwrap();
    }
    println!(
        "chain vs direct EPE: {:.4}",
        endpoint_error(&acc, &direct).unwrap()
    );
}
