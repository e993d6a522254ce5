use super::*;
use crate::rng::Rng;

fn vol_leaf<S: Scalar>(g: &mut Graph<S>, c: usize, n: usize, fill: f64, req: bool) -> NodeId {
    let d = Dims::new(n, n, n);
    let len = c * d.voxel_count();
    g.leaf(Shape::vol(c, d), vec![S::from_f64(fill); len], req)
}

fn random_vol(rng: &mut Rng, c: usize, n: usize, lo: f64, hi: f64) -> (Shape, Vec<f64>) {
    let d = Dims::new(n, n, n);
    let len = c * d.voxel_count();
    (
        Shape::vol(c, d),
        (0..len).map(|_| rng.uniform(lo, hi)).collect(),
    )
}

#[test]
fn conv_of_ones_counts_taps() {
    let mut g = Graph::<f32>::new();
    let input = vol_leaf(&mut g, 1, 4, 1.0, false);
    let weight = g.leaf(Shape::conv_weight(1, 1), vec![1.0; 27], false);
    let bias = g.leaf(Shape(vec![1]), vec![0.0], false);
    let out = g.conv3d(input, weight, bias, 1, 1).unwrap();
    let d = Dims::new(4, 4, 4);
    let v = g.values(out);
    // Interior voxel: all 27 taps inside. Face-center: 18. Corner: 8.
    assert_eq!(v[d.index(1, 1, 1)], 27.0);
    assert_eq!(v[d.index(2, 2, 2)], 27.0);
    assert_eq!(v[d.index(0, 1, 1)], 18.0);
    assert_eq!(v[d.index(1, 3, 2)], 18.0);
    assert_eq!(v[d.index(0, 0, 0)], 8.0);
}

#[test]
fn conv_identity_kernel_preserves_input() {
    let mut g = Graph::<f32>::new();
    let d = Dims::new(5, 4, 3);
    let data: Vec<f32> = (0..d.voxel_count()).map(|i| (i as f32 * 0.13).sin()).collect();
    let input = g.leaf(Shape::vol(1, d), data.clone(), false);
    let mut w = vec![0.0f32; 27];
    w[(1 * 3 + 1) * 3 + 1] = 1.0; // center tap
    let weight = g.leaf(Shape::conv_weight(1, 1), w, false);
    let bias = g.leaf(Shape(vec![1]), vec![0.0], false);
    let out = g.conv3d(input, weight, bias, 1, 1).unwrap();
    assert_eq!(g.values(out), data.as_slice());
}

#[test]
fn conv_stride2_halves_extents() {
    let mut g = Graph::<f32>::new();
    let input = vol_leaf(&mut g, 1, 8, 0.5, false);
    let weight = g.leaf(Shape::conv_weight(1, 1), vec![0.1; 27], false);
    let bias = g.leaf(Shape(vec![1]), vec![0.0], false);
    let out = g.conv3d(input, weight, bias, 2, 1).unwrap();
    assert_eq!(g.shape(out).0, vec![1, 4, 4, 4]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let input = vol_leaf(&mut g, 2, 4, 1.0, false);
    let weight = g.leaf(Shape::conv_weight(1, 3), vec![0.0; 81], false);
    let bias = g.leaf(Shape(vec![1]), vec![0.0], false);
    assert!(g.conv3d(input, weight, bias, 1, 1).is_err());
}

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Shape(vec![3]), vec![2.0, -2.0, 0.0], false);
    let y = g.leaky_relu(x, 0.2);
    assert_eq!(g.values(y), &[2.0, -0.4, 0.0]);
}

#[test]
fn upsample_replicates_and_adjoint_counts_replicas() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Shape::vol(1, Dims::new(1, 1, 1)), vec![5.0], true);
    let up = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.shape(up).0, vec![1, 2, 2, 2]);
    assert!(g.values(up).iter().all(|&v| v == 5.0));
    // Sum of the 8 replicas: adjoint of ones is 8 at the source voxel.
    let mut din = vec![0.0f64; 1];
    kernels::upsample2x_backward(&vec![1.0f64; 8], 1, Dims::new(1, 1, 1), &mut din);
    assert_eq!(din[0], 8.0);
}

#[test]
fn concat_stacks_channels_and_routes_gradients() {
    let mut g = Graph::<f64>::new();
    let d = Dims::new(2, 2, 2);
    let a = g.leaf(Shape::vol(2, d), vec![1.0; 16], true);
    let b = g.leaf(Shape::vol(3, d), vec![2.0; 24], true);
    let cat = g.concat_channels(a, b).unwrap();
    assert_eq!(g.shape(cat).0, vec![5, 2, 2, 2]);
    // Scale each half differently so the routed gradients differ.
    let zeros = g.zeros_leaf(Shape::vol(5, d));
    let loss = g.l1_mean(cat, zeros).unwrap();
    g.backward(loss).unwrap();
    let ga = g.grad(a).unwrap();
    let gb = g.grad(b).unwrap();
    assert!(ga.iter().all(|&v| (v - 1.0 / 40.0).abs() < 1e-12));
    assert!(gb.iter().all(|&v| (v - 1.0 / 40.0).abs() < 1e-12));
}

#[test]
fn concat_rejects_extent_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = vol_leaf(&mut g, 1, 2, 0.0, false);
    let b = vol_leaf(&mut g, 1, 3, 0.0, false);
    assert!(g.concat_channels(a, b).is_err());
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::<f32>::new();
    let d = Dims::new(1, 1, 1);
    let x = g.leaf(Shape::vol(2, d), vec![0.0, 0.0], false);
    let s = g.softmax_channels(x).unwrap();
    assert_eq!(g.values(s), &[0.5, 0.5]);

    let y = g.leaf(Shape::vol(2, d), vec![1000.0, 0.0], false);
    let s2 = g.softmax_channels(y).unwrap();
    let v = g.values(s2);
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-6);
    assert!(v[1].abs() < 1e-6);
}

#[test]
fn l1_mean_trivial_cases() {
    let mut g = Graph::<f32>::new();
    let a = vol_leaf(&mut g, 1, 3, 0.7, false);
    let b = vol_leaf(&mut g, 1, 3, 0.7, false);
    let zero = g.l1_mean(a, b).unwrap();
    assert_eq!(g.values(zero)[0], 0.0);

    let c = vol_leaf(&mut g, 1, 3, -1.5, false);
    let diff = g.l1_mean(a, c).unwrap();
    assert!((g.values(diff)[0] - 2.2).abs() < 1e-6);
}

#[test]
fn backward_linear_case_grad_is_other_factor() {
    // loss = mean(w·x) with positive values: grad_w = x / n.
    let mut g = Graph::<f64>::new();
    let d = Dims::new(2, 2, 2);
    let x_data: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.1).collect();
    let w = g.leaf(Shape::vol(1, d), vec![1.0; 8], true);
    let x = g.leaf(Shape::vol(1, d), x_data.clone(), false);
    let wx = g.mul(w, x).unwrap();
    let zeros = g.zeros_leaf(Shape::vol(1, d));
    let loss = g.l1_mean(wx, zeros).unwrap();
    g.backward(loss).unwrap();
    let gw = g.grad(w).unwrap();
    for (i, &gv) in gw.iter().enumerate() {
        assert!((gv - x_data[i] / 8.0).abs() < 1e-12);
    }
}

#[test]
fn fan_out_accumulates_sum_of_contributions() {
    // s = 2x + 3x used through two scale nodes; d(mean s)/dx = 5/n.
    let mut g = Graph::<f64>::new();
    let d = Dims::new(2, 2, 1);
    let x = g.leaf(Shape::vol(1, d), vec![1.0, 2.0, 3.0, 4.0], true);
    let a = g.scale(x, 2.0);
    let b = g.scale(x, 3.0);
    let s = g.add(a, b).unwrap();
    let zeros = g.zeros_leaf(Shape::vol(1, d));
    let loss = g.l1_mean(s, zeros).unwrap();
    g.backward(loss).unwrap();
    let gx = g.grad(x).unwrap();
    assert!(gx.iter().all(|&v| (v - 5.0 / 4.0 / 1.0).abs() < 1e-12 || (v - 1.25).abs() < 1e-12));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = vol_leaf(&mut g, 1, 2, 1.0, true);
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}

#[test]
fn leaf_without_requires_grad_untouched() {
    let mut g = Graph::<f64>::new();
    let d = Dims::new(2, 2, 2);
    let w = g.leaf(Shape::vol(1, d), vec![0.3; 8], true);
    let x = g.leaf(Shape::vol(1, d), vec![0.7; 8], false);
    let wx = g.mul(w, x).unwrap();
    let zeros = g.zeros_leaf(Shape::vol(1, d));
    let loss = g.l1_mean(wx, zeros).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(w).is_some());
    assert!(g.grad(x).is_none());
}

#[test]
fn smoothness_constant_field_is_zero() {
    let mut g = Graph::<f32>::new();
    let f = vol_leaf(&mut g, 3, 4, 0.37, false);
    let psi = g.smoothness_psi(f).unwrap();
    assert_eq!(g.values(psi)[0], 0.0);
}

#[test]
fn smoothness_ramp_matches_hand_oracle() {
    // u_x(x,y,z) = x on 3³: every x-difference of the first component is 1,
    // including the duplicated far-face term, so the sum is 27 and the mean
    // over 3 components · 27 voxels is 1/3.
    let d = Dims::new(3, 3, 3);
    let n = d.voxel_count();
    let mut data = vec![0.0f64; 3 * n];
    for z in 0..3 {
        for y in 0..3 {
            for x in 0..3 {
                data[d.index(x, y, z)] = x as f64;
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let f = g.leaf(Shape::vol(3, d), data, false);
    let psi = g.smoothness_psi(f).unwrap();
    assert!((g.values(psi)[0] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn seg_loss_perfect_prediction_is_tiny() {
    let d = Dims::new(3, 3, 3);
    let n = d.voxel_count();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut probs = vec![0.0f64; 2 * n];
    for (i, &y) in labels.iter().enumerate() {
        probs[y as usize * n + i] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Shape::vol(2, d), probs, false);
    let loss = g.segmentation_loss(p, &labels, 2, 0.5).unwrap();
    assert!(g.values(loss)[0] <= 1e-4, "loss {}", g.values(loss)[0]);
}

#[test]
fn seg_loss_uniform_prediction_cross_entropy_is_ln2() {
    let d = Dims::new(2, 2, 2);
    let n = d.voxel_count();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let probs = vec![0.5f64; 2 * n];
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Shape::vol(2, d), probs, false);
    // alpha = 0 isolates the cross-entropy term.
    let loss = g.segmentation_loss(p, &labels, 2, 0.0).unwrap();
    assert!((g.values(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn seg_loss_rejects_out_of_range_label() {
    let d = Dims::new(2, 1, 1);
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Shape::vol(2, d), vec![0.5; 4], false);
    assert!(g.segmentation_loss(p, &[0, 2], 2, 0.5).is_err());
}

#[test]
fn forward_and_grads_are_deterministic() {
    let run = || {
        let mut rng = Rng::new(99);
        let (shape_x, x_data) = random_vol(&mut rng, 2, 4, -1.0, 1.0);
        let (shape_w, w_data) = (Shape::conv_weight(2, 2), {
            let mut v = Vec::new();
            for _ in 0..2 * 2 * 27 {
                v.push(rng.uniform(-0.3, 0.3));
            }
            v
        });
        let mut g = Graph::<f32>::new();
        let x = g.leaf(shape_x, x_data.iter().map(|&v| v as f32).collect(), false);
        let w = g.leaf(shape_w, w_data.iter().map(|&v| v as f32).collect(), true);
        let b = g.leaf(Shape(vec![2]), vec![0.01, -0.02], true);
        let y = g.conv3d(x, w, b, 1, 1).unwrap();
        let a = g.leaky_relu(y, 0.2);
        let zeros = g.zeros_leaf(g.shape(a).clone());
        let loss = g.l1_mean(a, zeros).unwrap();
        g.backward(loss).unwrap();
        (
            g.values(loss).to_vec(),
            g.grad(w).unwrap().to_vec(),
            g.grad(b).unwrap().to_vec(),
        )
    };
    let (l1, gw1, gb1) = run();
    let (l2, gw2, gb2) = run();
    assert_eq!(l1, l2);
    assert_eq!(gw1, gw2);
    assert_eq!(gb1, gb2);
}

// -- finite-difference checks ------------------------------------------------

const FD_EPS: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

#[test]
fn gradcheck_conv3d() {
    let mut rng = Rng::new(11);
    let input = random_vol(&mut rng, 2, 4, -1.0, 1.0);
    let weight = (
        Shape::conv_weight(3, 2),
        gradcheck::random_buffer(&mut rng, 3 * 2 * 27, -0.5, 0.5),
    );
    let bias = (
        Shape(vec![3]),
        gradcheck::random_buffer(&mut rng, 3, -0.1, 0.1),
    );
    for stride in [1usize, 2] {
        let report = gradcheck(
            &[input.clone(), weight.clone(), bias.clone()],
            FD_EPS,
            40,
            7,
            |g, ids| {
                let y = g.conv3d(ids[0], ids[1], ids[2], stride, 1)?;
                let sq = g.mul(y, y)?;
                let zeros = g.zeros_leaf(g.shape(sq).clone());
                g.l1_mean(sq, zeros)
            },
        )
        .unwrap();
        assert!(
            report.passes(FD_TOL),
            "stride {stride}: max rel err {}",
            report.max_rel_err
        );
    }
}

#[test]
fn gradcheck_leaky_relu_away_from_kink() {
    let mut rng = Rng::new(5);
    // Keep inputs away from 0 where the subgradient is arbitrary.
    let data: Vec<f64> = (0..27)
        .map(|_| {
            let v = rng.uniform(0.2, 1.0);
            if rng.next_f64() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    let input = (Shape::vol(1, Dims::new(3, 3, 3)), data);
    let report = gradcheck(&[input], 1e-5, 0, 3, |g, ids| {
        let y = g.leaky_relu(ids[0], 0.2);
        let sq = g.mul(y, y)?;
        let zeros = g.zeros_leaf(g.shape(sq).clone());
        g.l1_mean(sq, zeros)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_upsample_and_concat() {
    let mut rng = Rng::new(17);
    let a = random_vol(&mut rng, 2, 3, -1.0, 1.0);
    let b = random_vol(&mut rng, 1, 3, -1.0, 1.0);
    let report = gradcheck(&[a, b], FD_EPS, 0, 1, |g, ids| {
        let up = g.upsample_nearest2x(ids[0])?;
        let up_b = g.upsample_nearest2x(ids[1])?;
        let cat = g.concat_channels(up, up_b)?;
        let sq = g.mul(cat, cat)?;
        let zeros = g.zeros_leaf(g.shape(sq).clone());
        g.l1_mean(sq, zeros)
    })
    .unwrap();
    assert!(report.passes(FD_TOL), "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_softmax_jacobian() {
    let mut rng = Rng::new(23);
    let logits = random_vol(&mut rng, 3, 2, -2.0, 2.0);
    let weights = random_vol(&mut rng, 3, 2, 0.1, 1.0);
    let report = gradcheck(&[logits, weights.clone()], 1e-5, 0, 2, |g, ids| {
        let p = g.softmax_channels(ids[0])?;
        // Weighted sum of probabilities exercises the full Jacobian.
        let weighted = g.mul(p, ids[1])?;
        let zeros = g.zeros_leaf(g.shape(weighted).clone());
        g.l1_mean(weighted, zeros)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_smoothness_psi() {
    let mut rng = Rng::new(31);
    let field = random_vol(&mut rng, 3, 4, -1.0, 1.0);
    let report = gradcheck(&[field], 1e-5, 0, 2, |g, ids| g.smoothness_psi(ids[0])).unwrap();
    assert!(report.passes(FD_TOL), "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_segmentation_loss() {
    let mut rng = Rng::new(37);
    let d = Dims::new(3, 3, 3);
    let n = d.voxel_count();
    let logits = random_vol(&mut rng, 2, 3, -1.0, 1.0);
    let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
    let report = gradcheck(&[logits], 1e-5, 0, 5, |g, ids| {
        let p = g.softmax_channels(ids[0])?;
        g.segmentation_loss(p, &labels, 2, 0.5)
    })
    .unwrap();
    assert!(report.passes(FD_TOL), "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_warp_image_and_field() {
    let mut rng = Rng::new(41);
    let img = random_vol(&mut rng, 1, 5, 0.0, 1.0);
    // Sub-voxel displacements keep samples interior and off the kinks.
    let field = (
        Shape::vol(3, Dims::new(5, 5, 5)),
        gradcheck::random_buffer(&mut rng, 3 * 125, -0.4, 0.4)
            .iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
            .collect(),
    );
    let report = gradcheck(&[img, field], 1e-5, 60, 13, |g, ids| {
        let w = g.warp(ids[0], ids[1])?;
        let sq = g.mul(w, w)?;
        let zeros = g.zeros_leaf(g.shape(sq).clone());
        g.l1_mean(sq, zeros)
    })
    .unwrap();
    assert!(report.passes(FD_TOL), "max rel err {}", report.max_rel_err);
}

/// Rough conv throughput probe; run manually with
/// `cargo test -p sscardiac bench_conv -- --ignored --nocapture`.
#[test]
#[ignore]
fn bench_conv_throughput() {
    let mut rng = Rng::new(1);
    let d = Dims::new(48, 48, 48);
    let cin = 8;
    let cout = 8;
    let input: Vec<f32> = (0..cin * d.voxel_count())
        .map(|_| rng.uniform(-1.0, 1.0) as f32)
        .collect();
    let weight: Vec<f32> = (0..cout * cin * 27)
        .map(|_| rng.uniform(-0.2, 0.2) as f32)
        .collect();
    let bias = vec![0.0f32; cout];
    let mut out = vec![0.0f32; cout * d.voxel_count()];
    let macs = (cout * cin * 27 * d.voxel_count()) as f64;
    let reps = 10;
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        kernels::conv3d_forward(&input, cin, d, &weight, cout, &bias, 1, &mut out, d);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward: {:.3} s/call, {:.2} GMAC/s", dt, macs / dt / 1e9);

    let gout = out.clone();
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = vec![0.0f32; cout];
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        kernels::conv3d_backward_weights(&input, cin, d, &gout, cout, d, 1, &mut dw, &mut db);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("backward_w: {:.3} s/call, {:.2} GMAC/s", dt, macs / dt / 1e9);

    let mut din = vec![0.0f32; input.len()];
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        kernels::conv3d_backward_input(&weight, cin, cout, d, &gout, d, 1, &mut din);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("backward_in: {:.3} s/call, {:.2} GMAC/s", dt, macs / dt / 1e9);
}
