//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).

mod common;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    edgy_surface_cloud, givens_reference, per_block_energy, random_cloud, DenseOracle,
};
use pcac::codec::lossless_round_trip;
use pcac::coding::params::{InvSqrtConfig, ModelParams, PredictorConfig};
use pcac::coding::rlgr::{rlgr_decode, rlgr_encode};
use pcac::eval::rd_sweep;
use pcac::hierarchy::{build_hierarchy, AKernel};
use pcac::predictor::PredictorKind;
use pcac::trainer::{
    self, evaluate_lagrangian, finite_difference_gradient, objective_and_gradient, sample_crops,
    Corpus, ParamLayout, TrainConfig,
};
use pcac::trainer::graph::{CropPlan, ForwardSpec};
use pcac::transform::{self, TransformPlan};

fn report(n: u32, desc: &str, pass: bool) {
    println!(
        "ACCEPTANCE {n:02} [{}] {desc}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion {n} failed: {desc}");
}

const PREDICTORS: [PredictorKind; 4] = [
    PredictorKind::None,
    PredictorKind::Linear,
    PredictorKind::Gpcc,
    PredictorKind::Pbf,
];

fn suite_clouds() -> Vec<pcac::VoxelizedCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE01);
    (0..50)
        .map(|i| {
            let depth = rng.random_range(3..=6u8);
            let max_pts = 1usize << (3 * depth).min(13);
            let n = rng.random_range(8..=max_pts.min(5000));
            random_cloud(n, depth, 3, 0x5EED + i, 0.0, 255.0)
        })
        .collect()
}

#[test]
fn acceptance_01_perfect_reconstruction() {
    let start = Instant::now();
    let clouds = suite_clouds();
    let mut worst = 0.0f64;
    for cloud in &clouds {
        let l0 = cloud.depth / 2;
        for kind in PREDICTORS {
            let params = ModelParams::defaults(cloud.depth, l0, kind);
            let (recon, _) = lossless_round_trip(cloud, &params).unwrap();
            for (a, b) in recon.iter().zip(&cloud.attributes) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 * 255.0 && elapsed < 60.0;
    report(
        1,
        &format!(
            "perfect reconstruction, 50 clouds x 4 predictors: max |err| {worst:.3e} \
             (< {:.1e}), {elapsed:.1}s (< 60s)",
            1e-9 * 255.0
        ),
        pass,
    );
}

#[test]
fn acceptance_02_critical_sampling() {
    let clouds = suite_clouds();
    let mut checked = 0usize;
    let mut exact = true;
    for cloud in &clouds {
        let l0 = cloud.depth / 2;
        let params = ModelParams::defaults(cloud.depth, l0, PredictorKind::None);
        let (_, pyramid) = lossless_round_trip(cloud, &params).unwrap();
        exact &= pyramid.coeff_count() == cloud.len();
        let enc = pcac::codec::encode_cloud(
            cloud,
            &params,
            &pcac::codec::EncodeOptions {
                step_override: Some(8.0),
                ..Default::default()
            },
        )
        .unwrap();
        let (header, quantized) = pcac::coding::bitstream::read_bitstream(&enc.bytes).unwrap();
        let symbols: usize = quantized.root.len() / 3
            + quantized.high.iter().map(|h| h.len() / 3).sum::<usize>();
        exact &= symbols == cloud.len() && header.point_count as usize == cloud.len();
        checked += 1;
    }
    report(
        2,
        &format!("critical sampling exact on {checked} clouds (zero tolerance)"),
        exact,
    );
}

#[test]
fn acceptance_03_orthogonality_and_parseval() {
    let clouds = suite_clouds();
    let mut worst_ortho = 0.0f64;
    let mut worst_parseval = 0.0f64;
    for cloud in &clouds {
        let h = build_hierarchy(cloud, cloud.depth / 2).unwrap();
        let kernels = vec![AKernel::unit(); h.level_count() - 1];
        let plan = TransformPlan::new(h, kernels).unwrap();
        for level in &plan.bases {
            for basis in level.iter().flatten() {
                let cols = basis.coeff_count();
                for k in 0..cols {
                    let dot: f64 = (0..basis.m)
                        .map(|j| basis.a[j] * basis.g[j] * basis.zmat[j * cols + k])
                        .sum();
                    worst_ortho = worst_ortho.max(dot.abs());
                }
            }
        }
        let pyramid = transform::analyze(&plan, &cloud.attributes, 3).unwrap();
        let input_energy: f64 = cloud.attributes.iter().map(|v| v * v).sum();
        let rel = (pyramid.total_energy() - input_energy).abs() / input_energy;
        worst_parseval = worst_parseval.max(rel);
    }
    let pass = worst_ortho < 1e-12 && worst_parseval < 1e-9;
    report(
        3,
        &format!(
            "orthogonality max |a'Gz| {worst_ortho:.3e} (< 1e-12), Parseval rel err \
             {worst_parseval:.3e} (< 1e-9)"
        ),
        pass,
    );
}

#[test]
fn acceptance_04_classical_raht_agreement() {
    let mut worst_dc = 0.0f64;
    let mut worst_energy = 0.0f64;
    for i in 0..20 {
        let cloud = random_cloud(180, 4, 2, 0xC1A5 + i, 0.0, 1.0);
        let h = build_hierarchy(&cloud, 0).unwrap();
        let kernels = vec![AKernel::unit(); h.level_count() - 1];
        let plan = TransformPlan::new(h.clone(), kernels).unwrap();
        let pyramid = transform::analyze(&plan, &cloud.attributes, 2).unwrap();
        for c in 0..2 {
            let channel: Vec<f64> = cloud.attributes.iter().skip(c).step_by(2).copied().collect();
            let reference = givens_reference(&h, &channel);
            for (i, dc) in reference.dc.iter().enumerate() {
                worst_dc = worst_dc.max((pyramid.root[i * 2 + c] - dc).abs());
            }
            for li in 0..h.level_count() - 1 {
                let ours: Vec<f64> = pyramid.high[li].iter().skip(c).step_by(2).copied().collect();
                let our_energy = per_block_energy(&h, li, &ours);
                for (a, b) in our_energy.iter().zip(&reference.block_ac_energy[li]) {
                    worst_energy = worst_energy.max((a - b).abs());
                }
            }
        }
    }
    let pass = worst_dc < 1e-10 && worst_energy < 1e-10;
    report(
        4,
        &format!(
            "classical transform agreement on 20 depth-4 clouds: DC max err {worst_dc:.3e}, \
             per-block energy max err {worst_energy:.3e} (both < 1e-10)"
        ),
        pass,
    );
}

#[test]
fn acceptance_05_dense_oracle_equivalence() {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DAC1E);
    for trial in 0..12 {
        let n = [1, 2, 5, 9, 17, 33, 48, 64][trial % 8];
        let depth = 3 + (trial % 2) as u8;
        let cloud = random_cloud(n, depth, 1, 0xDE45E + trial as u64, 0.0, 1.0);
        let h = build_hierarchy(&cloud, 0).unwrap();
        let kernels: Vec<AKernel> = (0..h.level_count() - 1)
            .map(|_| {
                if trial % 3 == 0 {
                    AKernel::unit()
                } else {
                    let mut k = AKernel::unit();
                    for w in k.0.iter_mut() {
                        *w = rng.random_range(0.6..1.4);
                    }
                    k
                }
            })
            .collect();
        let plan = TransformPlan::new(h.clone(), kernels.clone()).unwrap();
        let oracle = DenseOracle::build(&h, &kernels);
        let y = DVector::from_vec(cloud.attributes.clone());
        let dense_lowpass = oracle.lowpass(&y);

        let lp = transform::analyze_lowpass(&plan, &cloud.attributes, 1).unwrap();
        for (li, dense) in dense_lowpass.iter().enumerate() {
            for (a, b) in lp.normalized[li].iter().zip(dense.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        let pyramid = transform::analyze(&plan, &cloud.attributes, 1).unwrap();
        let dense_root = oracle.orthonormalize_root(&dense_lowpass[0]);
        for (a, b) in pyramid.root.iter().zip(dense_root.iter()) {
            worst = worst.max((a - b).abs());
        }
        for li in 0..h.level_count() - 1 {
            let g_star = transform::analyze_highpass(&plan, li, &lp.normalized[li + 1], 1).unwrap();
            let via_residual = oracle.highpass_residual_route(&h, li, &dense_lowpass);
            let via_direct = oracle.highpass_direct_route(&h, li, &dense_lowpass[li + 1]);
            for ((a, b), c) in g_star.iter().zip(via_residual.iter()).zip(via_direct.iter()) {
                worst = worst.max((a - b).abs()).max((a - c).abs());
            }
            let bar = transform::orthonormalize_highpass(&plan, li, &g_star, 1);
            let dense_bar = oracle.orthonormalize_highpass(&h, li, &via_direct);
            for (a, b) in bar.iter().zip(dense_bar.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    report(
        5,
        &format!(
            "dense normal-equation oracle reproduces all coefficients: max err {worst:.3e} \
             (< 1e-10)"
        ),
        worst < 1e-10,
    );
}

#[test]
fn acceptance_06_constrained_prediction_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC05E7);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let m = rng.random_range(2..=8usize);
        let g: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..5.0)).collect();
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..2.0)).collect();
        let f_next: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let f_pred: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        // dense per-block complement basis built straight from the
        // selection-matrix definition
        let gp: f64 = (0..m).map(|j| a[j] * a[j] * g[j]).sum();
        let mut z = DMatrix::zeros(m, m - 1);
        for k in 1..m {
            for j in 0..m {
                let e = if j == k { 1.0 } else { 0.0 };
                z[(j, k - 1)] = e - a[j] * (a[k] * g[k]) / gp;
            }
        }
        let gdiag = DMatrix::from_diagonal(&DVector::from_vec(g.clone()));
        let psi_gram = z.transpose() * &gdiag * &z;
        let delta: DVector<f64> =
            DVector::from_iterator(m, f_next.iter().zip(&f_pred).map(|(a, b)| a - b));
        let g_dprime = psi_gram
            .clone()
            .lu()
            .solve(&(z.transpose() * &gdiag * &delta))
            .unwrap();
        let highpass_norm2 = (g_dprime.transpose() * &psi_gram * &g_dprime)[(0, 0)];
        let residual_norm2 = (delta.transpose() * &gdiag * &delta)[(0, 0)];
        if highpass_norm2 > residual_norm2 * (1.0 + 1e-12) + 1e-12 {
            violations += 1;
        }
    }
    report(
        6,
        &format!(
            "constrained-prediction contraction |g''| <= |df''| on 1000 random blocks: \
             {violations} violations (require 0)"
        ),
        violations == 0,
    );
}

#[test]
fn acceptance_07_rlgr_losslessness_and_efficiency() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7161);
    let mut all_exact = true;
    for case in 0..10_000usize {
        let len = rng.random_range(0..256);
        let symbols: Vec<i64> = (0..len)
            .map(|_| match case % 5 {
                0 => {
                    // geometric magnitudes
                    let mag = (rng.random::<f64>().ln() / 0.6f64.ln()) as i64;
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                }
                1 => rng.random_range(-5..=5),
                2 => rng.random_range(i32::MIN as i64..=i32::MAX as i64),
                3 => {
                    // adversarial run patterns
                    if rng.random_bool(0.95) {
                        0
                    } else {
                        rng.random::<i64>() >> rng.random_range(0..40)
                    }
                }
                _ => {
                    if rng.random_bool(0.3) {
                        0
                    } else {
                        rng.random::<i64>()
                    }
                }
            })
            .collect();
        let bytes = rlgr_encode(&symbols);
        match rlgr_decode(&bytes, symbols.len()) {
            Ok(back) => all_exact &= back == symbols,
            Err(_) => all_exact = false,
        }
    }

    let mut efficiency = Vec::new();
    let mut efficient = true;
    for &b in &[0.5f64, 2.0, 8.0] {
        let lambda = (-1.0 / b).exp();
        let n = 100_000;
        let symbols: Vec<i64> = (0..n)
            .map(|_| {
                let mag = ((rng.random::<f64>().ln() / lambda.ln()).floor() as i64).min(1 << 30);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let bits = rlgr_encode(&symbols).len() as f64 * 8.0 / n as f64;
        let mut hist = std::collections::HashMap::new();
        for &s in &symbols {
            *hist.entry(s).or_insert(0usize) += 1;
        }
        let entropy: f64 = hist
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.log2()
            })
            .sum();
        efficient &= bits <= 1.15 * entropy;
        efficiency.push(format!("b={b}: {bits:.3}/{entropy:.3}"));
    }
    report(
        7,
        &format!(
            "entropy coder: 10^4 fuzzed sequences lossless ({all_exact}), bits/entropy within \
             15% [{}]",
            efficiency.join(", ")
        ),
        all_exact && efficient,
    );
}

#[test]
fn acceptance_08_rd_monotonicity() {
    let deltas = [4.0, 8.0, 16.0, 32.0, 64.0];
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in [41u64, 42] {
        let cloud = edgy_surface_cloud(6, 12_000, seed);
        let yuv = pcac::cloud_io::rgb_to_yuv(&cloud).unwrap();
        let params = ModelParams::defaults(6, 2, PredictorKind::Linear);
        let points = rd_sweep(&yuv, &params, &deltas, None).unwrap();
        for pair in points.windows(2) {
            // deltas ascend: rate and PSNR must not increase
            pass &= pair[1].bits_per_voxel <= pair[0].bits_per_voxel;
            pass &= pair[1].psnr_yuv <= pair[0].psnr_yuv;
        }
        detail.push(format!(
            "crop {seed}: bpv {:.3}..{:.3}, psnr {:.1}..{:.1}",
            points[0].bits_per_voxel,
            points.last().unwrap().bits_per_voxel,
            points[0].psnr_yuv,
            points.last().unwrap().psnr_yuv
        ));
    }
    report(
        8,
        &format!(
            "rate and distortion monotone across step sweep on 2 fixed crops [{}]",
            detail.join("; ")
        ),
        pass,
    );
}

#[test]
fn acceptance_09_directional_coding_gain() {
    let start = Instant::now();
    let corpus = Corpus::from_clouds(
        (0..6)
            .map(|i| {
                pcac::cloud_io::rgb_to_yuv(&edgy_surface_cloud(7, 60_000, 900 + i)).unwrap()
            })
            .collect(),
    );
    let cfg = TrainConfig {
        lambda: 0.02,
        crop_bits: 6,
        batch_size: 10,
        holdout_size: 4,
        iterations: 200,
        learning_rate: 3e-3,
        seed: 11,
        taylor_order: 8,
        min_crop_points: 8,
    };
    let mut linear_init = ModelParams::defaults(7, 1, PredictorKind::Linear);
    linear_init.quantizer.step = 4.0;
    let mut pbf_init = ModelParams::defaults(7, 1, PredictorKind::Pbf);
    pbf_init.quantizer.step = 4.0;
    if let PredictorConfig::Pbf(p) = &mut pbf_init.predictor {
        p.r = vec![1.0, 1.0, 0.0, 0.0];
    }

    // the held-out set every variant is judged on
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let _ = sample_crops(&corpus, &cfg, cfg.batch_size, &mut rng).unwrap();
    let heldout = sample_crops(&corpus, &cfg, cfg.holdout_size, &mut rng).unwrap();

    let j_untrained = evaluate_lagrangian(&heldout, &linear_init, cfg.lambda, true)
        .unwrap()
        .j;
    let (linear_trained, _) = trainer::train(&corpus, &cfg, &linear_init).unwrap();
    let j_linear = evaluate_lagrangian(&heldout, &linear_trained, cfg.lambda, true)
        .unwrap()
        .j;
    let (pbf_trained, _) = trainer::train(&corpus, &cfg, &pbf_init).unwrap();
    let j_pbf = evaluate_lagrangian(&heldout, &pbf_trained, cfg.lambda, true)
        .unwrap()
        .j;

    let elapsed = start.elapsed().as_secs_f64();
    let pass = j_linear < j_untrained && j_pbf <= j_linear && elapsed < 900.0;
    report(
        9,
        &format!(
            "directional coding gain: untrained J {j_untrained:.4} > trained linear J \
             {j_linear:.4} >= trained PBF J {j_pbf:.4}, {elapsed:.0}s (< 900s)"
        ),
        pass,
    );
}

#[test]
fn acceptance_10_gradient_validation() {
    let cloud = random_cloud(200, 4, 2, 0x66AD, 0.0, 255.0);
    let mut pass = true;
    let mut worst: (String, f64) = (String::new(), 0.0);
    for kind in [PredictorKind::Linear, PredictorKind::Pbf] {
        let mut params = ModelParams::defaults(4, 1, kind);
        params.tied_kernels = false;
        params.inv_sqrt = InvSqrtConfig::taylor_default(3, 6);
        params.quantizer.step = 4.0;
        params.quantizer.channel_scale = vec![1.0, 1.0];
        if let PredictorConfig::Pbf(p) = &mut params.predictor {
            p.r = vec![1.0, 0.7, 0.2];
            p.sigma_y = 32.0;
        }
        let (layout, mut theta) = ParamLayout::flatten(&params).unwrap();
        // move off the all-ones initialization, where tied Gershgorin
        // bounds make the objective nondifferentiable
        let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
        for t in theta.iter_mut() {
            *t += rng.random_range(-0.025..0.025);
        }
        let spec = ForwardSpec::from_params(&params, 2);
        let plans = vec![CropPlan::new(cloud.clone(), 3, kind).unwrap()];
        let lambda = 0.05;
        let (_, grad) = objective_and_gradient(&plans, &layout, &theta, &spec, lambda).unwrap();
        let fd = finite_difference_gradient(&plans, &layout, &theta, &spec, lambda, 1e-4).unwrap();
        for (name, range) in &layout.groups {
            let g = &grad[range.clone()];
            let f = &fd[range.clone()];
            let diff: f64 = g
                .iter()
                .zip(f.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel = diff / norm.max(1e-9);
            if rel > worst.1 {
                worst = (format!("{kind:?}/{name}"), rel);
            }
            pass &= rel < 1e-3;
        }
    }
    report(
        10,
        &format!(
            "reverse-mode gradient vs central differences on a 200-point instance: worst \
             group {} rel err {:.2e} (< 1e-3)",
            worst.0, worst.1
        ),
        pass,
    );
}
