//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success. The desk-scale training runs (full and base ablation) are
//! shared across criteria through a lazily-initialized fixture.
//!
//! Criteria:
//! 1. finite-difference verification of every loss gradient (tiny config)
//! 2. loss identities at their documented fixed points
//! 3. hand-computed masked color statistics
//! 4. SSIM against an independent reference implementation
//! 5. desk-scale training behavior (loss decrease, color transfer,
//!    classifier balance, base-vs-full ablation ordering)
//! 6. shape-prior warm start mask IoU
//! 7. engineering round trips (checkpoint, resume, config, CLI outputs)

use std::process::Command;
use std::sync::LazyLock;
use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlab::autodiff::{bind_params, collect_grads, ParamSet, Tape};
use dlab::config::{
    desk_config, parse_config, serialize_config, Ablation, AdvLossMode, ColorStatNormalizer,
    InitMode, ModelConfig, TrainConfig,
};
use dlab::data::generate_dataset;
use dlab::losses::{
    classifier_adv_loss, color_consistency_loss, encoder_adv_loss, masked_color_stats,
    reconstruction_loss, total_loss, ColorStats,
};
use dlab::metrics::{classifier_balance, mask_iou_report, ssim, transfer_color_report, Assignment};
use dlab::networks::{init_random_params, NetworkParams};
use dlab::perceptual::fixed_random_extractor;
use dlab::trainer::{
    classifier_loss, encoders_forward, generator_losses, init_state, load_checkpoint,
    save_checkpoint, train, IterRecord, TrainOptions,
};
use dlab::types::{ClassifierScore, ImageBatch, MaskSet};

fn pass(criterion: &str, detail: String) {
    println!("ACCEPTANCE {criterion}: PASS  ({detail})");
}

include!("acceptance_gradcheck.rs");

// ---------------------------------------------------------------------------
// Criterion 2: loss identities.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_loss_identities() {
    // reconstruction_loss(x, x) = 0
    let extractor = fixed_random_extractor::<f32>(5, 3);
    let mut data = ndarray::Array4::zeros((2, 32, 32, 3));
    data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 11) as f32 / 5.5) - 1.0);
    let x = ImageBatch(data);
    assert_eq!(reconstruction_loss(&x, &x, &extractor).unwrap(), 0.0);

    // classifier_adv_loss(1, 0) = 0
    let s = |v: f32| ClassifierScore(ndarray::Array1::from_vec(vec![v]));
    assert_eq!(classifier_adv_loss(&s(1.0), &s(0.0)).unwrap(), 0.0);

    // literal encoder loss has its minimum 0.5 at score 0.5
    assert_eq!(encoder_adv_loss(&s(0.5), &s(0.0), AdvLossMode::LiteralEq3).unwrap(), 0.5);
    for v in [0.0f32, 0.2, 0.4, 0.6, 0.8, 1.0] {
        assert!(encoder_adv_loss(&s(v), &s(0.0), AdvLossMode::LiteralEq3).unwrap() >= 0.5);
    }

    // color consistency at identical stats = 0
    let stats = ColorStats {
        mean: ndarray::Array2::from_elem((1, 3), 0.3),
        variance: ndarray::Array2::from_elem((1, 3), 0.1),
    };
    assert_eq!(color_consistency_loss(&stats, &stats).unwrap(), 0.0);

    // paper weights on unit components: 0.01 + 1 + 1 = 2.01
    let cfg = TrainConfig::default();
    let total = total_loss(1.0, 1.0, 1.0, &cfg);
    assert!((total - 2.01).abs() <= 4.0 * f64::EPSILON, "total = {total}");

    pass("2 (loss identities)", "all fixed points exact".into());
}

// ---------------------------------------------------------------------------
// Criterion 3: color statistics oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_color_statistics_oracle() {
    let mut data = ndarray::Array4::zeros((1, 2, 2, 3));
    for c in 0..3 {
        data[[0, 0, 0, c]] = 1.0;
        data[[0, 1, 1, c]] = 1.0;
    }
    let image = ImageBatch(data);

    let ones = MaskSet(ndarray::Array4::from_elem((1, 1, 2, 2), 1.0f32));
    let stats = masked_color_stats(&image, &ones, ColorStatNormalizer::TotalPixels).unwrap();
    assert_eq!(stats.mean[[0, 0]], 0.5);
    assert_eq!(stats.variance[[0, 0]], 0.25);

    let mut corner = ndarray::Array4::zeros((1, 1, 2, 2));
    corner[[0, 0, 0, 0]] = 1.0f32;
    let stats =
        masked_color_stats(&image, &MaskSet(corner), ColorStatNormalizer::TotalPixels).unwrap();
    assert_eq!(stats.mean[[0, 0]], 0.25);
    assert_eq!(stats.variance[[0, 0]], 0.1875);

    pass("3 (color statistics)", "mu = 0.25, sigma = 0.1875 reproduced exactly".into());
}

// ---------------------------------------------------------------------------
// Criterion 4: SSIM oracle.
// ---------------------------------------------------------------------------

/// Independent SSIM reference: direct per-window loops over explicit sums.
fn reference_ssim(x: &Array3<f32>, y: &Array3<f32>) -> f64 {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let win = 11usize;
    let sigma = 1.5f64;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut kernel = [[0.0f64; 11]; 11];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            ksum += *k;
        }
    }
    for row in kernel.iter_mut() {
        for k in row.iter_mut() {
            *k /= ksum;
        }
    }
    let mut channel_total = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = kernel[i][j];
                        let xv = (x[[oy + i, ox + j, c]] as f64 + 1.0) / 2.0;
                        let yv = (y[[oy + i, ox + j, c]] as f64 + 1.0) / 2.0;
                        mx += k * xv;
                        my += k * yv;
                        sxx += k * xv * xv;
                        syy += k * yv * yv;
                        sxy += k * xv * yv;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        channel_total += acc / count as f64;
    }
    channel_total / 3.0
}

#[test]
fn criterion_4_ssim_oracle() {
    let dataset = generate_dataset(6, 64, 64, 21).unwrap();
    let base = dataset.image(0).clone();
    assert_eq!(ssim(&base, &base).unwrap(), 1.0, "ssim(x, x) must be exactly 1");

    // five fixed fixture pairs: distinct sprite, noise, darkening, shift, blur
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let noisy = {
        let mut img = base.clone();
        img.mapv_inplace(|v| (v + rng.random_range(-0.1..0.1f32)).clamp(-1.0, 1.0));
        img
    };
    let darker = base.mapv(|v| (v * 0.7).clamp(-1.0, 1.0));
    let shifted = {
        let mut img = base.clone();
        for y in 0..64 {
            for x in 0..62 {
                for c in 0..3 {
                    img[[y, x, c]] = base[[y, x + 2, c]];
                }
            }
        }
        img
    };
    let blurred = {
        let mut img = base.clone();
        for y in 1..63 {
            for x in 1..63 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += base[[y + dy - 1, x + dx - 1, c]];
                        }
                    }
                    img[[y, x, c]] = acc / 9.0;
                }
            }
        }
        img
    };
    let pairs: [(&Array3<f32>, &Array3<f32>); 5] = [
        (&base, dataset.image(1)),
        (&base, &noisy),
        (&base, &darker),
        (&base, &shifted),
        (&base, &blurred),
    ];
    let mut worst = 0.0f64;
    for (i, (a, b)) in pairs.iter().enumerate() {
        let got = ssim(a, b).unwrap();
        let want = reference_ssim(a, b);
        let diff = (got - want).abs();
        assert!(diff < 1e-6, "pair {i}: ssim {got} vs reference {want} (diff {diff:.2e})");
        worst = worst.max(diff);
    }
    pass("4 (SSIM oracle)", format!("5 fixture pairs within 1e-6 (worst {worst:.2e})"));
}

// ---------------------------------------------------------------------------
// Criterion 5 and 6: desk-scale training runs, shared fixture.
// ---------------------------------------------------------------------------

struct DeskRun {
    log: Vec<IterRecord>,
    color_error: f64,
    balance: f64,
}

struct DeskArtifacts {
    full: DeskRun,
    base_color_error: f64,
    warm_start_iou: f64,
    wall_minutes: f64,
}

static DESK: LazyLock<DeskArtifacts> = LazyLock::new(|| {
    let start = Instant::now();
    let (model_cfg, train_cfg) = desk_config();
    let train_data = generate_dataset(500, 64, 64, train_cfg.seed).unwrap();
    let heldout = generate_dataset(200, 64, 64, train_cfg.seed + 1000).unwrap();
    let extractor = fixed_random_extractor::<f32>(train_cfg.seed ^ 0x9e37_79b9_7f4a_7c15, 3);

    // full model: shape-prior warm start, then the adversarial losses
    let full_cfg = TrainConfig { ablation: Ablation::Full, ..train_cfg.clone() };
    let state0 = init_state(&model_cfg, &full_cfg, Some(&train_data)).unwrap();
    let warm =
        mask_iou_report(&state0.params, &train_data, 64, Assignment::Greedy).unwrap();
    eprintln!("[desk] warm-start mask IoU: {:.3}", warm.value);
    let (full_state, full_log) = train(
        &model_cfg,
        &full_cfg,
        &train_data,
        &extractor,
        Some(state0),
        Some(&train_data),
        &TrainOptions::default(),
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let full_color =
        transfer_color_report(&full_state.params, &heldout, 100, &mut rng, model_cfg.color_stat_normalizer)
            .unwrap();
    let mut rng_bal = ChaCha8Rng::seed_from_u64(998);
    let balance = classifier_balance(&full_state.params, &heldout, 100, &mut rng_bal).unwrap();

    // base ablation: reconstruction only, random init, same data and seed
    let base_cfg = TrainConfig { ablation: Ablation::Base, ..train_cfg.clone() };
    let (base_state, _) = train(
        &model_cfg,
        &base_cfg,
        &train_data,
        &extractor,
        None,
        Some(&train_data),
        &TrainOptions::default(),
    )
    .unwrap();
    // same held-out pairs: identical rng seed
    let mut rng2 = ChaCha8Rng::seed_from_u64(999);
    let base_color =
        transfer_color_report(&base_state.params, &heldout, 100, &mut rng2, model_cfg.color_stat_normalizer)
            .unwrap();

    let wall_minutes = start.elapsed().as_secs_f64() / 60.0;
    eprintln!(
        "[desk] full color err {:.5}, base color err {:.5}, balance {:.3}, wall {:.1} min",
        full_color.value, base_color.value, balance.value, wall_minutes
    );
    DeskArtifacts {
        full: DeskRun { log: full_log, color_error: full_color.value, balance: balance.value },
        base_color_error: base_color.value,
        warm_start_iou: warm.value,
        wall_minutes,
    }
});

fn mean_recon(records: &[IterRecord]) -> f64 {
    records.iter().map(|r| r.recon).sum::<f64>() / records.len() as f64
}

#[test]
fn criterion_5a_recon_loss_halves() {
    let desk = &*DESK;
    let early = mean_recon(&desk.full.log[0..100]);
    let late = mean_recon(&desk.full.log[4900..5000]);
    assert!(
        late < 0.5 * early,
        "recon loss went {early:.5} (iters 0-100) to {late:.5} (iters 4900-5000)"
    );
    pass(
        "5a (recon decrease)",
        format!("{early:.5} -> {late:.5} ({:.2}x)", early / late),
    );
}

#[test]
fn criterion_5b_color_transfer_error() {
    let desk = &*DESK;
    assert!(
        desk.full.color_error < 0.1,
        "color transfer error {:.5} over held-out pairs",
        desk.full.color_error
    );
    pass(
        "5b (color transfer)",
        format!("{:.5} < 0.1 on 100 held-out pairs", desk.full.color_error),
    );
}

#[test]
fn criterion_5c_classifier_balance() {
    let desk = &*DESK;
    assert!(
        (0.4..=0.75).contains(&desk.full.balance),
        "classifier accuracy {:.3} outside [0.4, 0.75]",
        desk.full.balance
    );
    pass("5c (classifier balance)", format!("accuracy {:.3}", desk.full.balance));
}

#[test]
fn criterion_5d_base_ablation_strictly_worse() {
    let desk = &*DESK;
    assert!(
        desk.base_color_error > desk.full.color_error,
        "base {:.5} should exceed full {:.5} on the same pairs",
        desk.base_color_error,
        desk.full.color_error
    );
    // the 45-minute figure is a target for commodity hardware; report it
    let target = if desk.wall_minutes < 45.0 { "within" } else { "over" };
    pass(
        "5d (ablation ordering)",
        format!(
            "base {:.5} > full {:.5}; both runs took {:.1} min ({target} the 45 min target)",
            desk.base_color_error, desk.full.color_error, desk.wall_minutes
        ),
    );
}

#[test]
fn criterion_6_shape_prior_warm_start() {
    let desk = &*DESK;
    assert!(
        desk.warm_start_iou >= 0.5,
        "warm-start mask IoU {:.3} below 0.5",
        desk.warm_start_iou
    );
    pass("6 (shape prior)", format!("mask IoU {:.3} >= 0.5 before main training", desk.warm_start_iou));
}

// ---------------------------------------------------------------------------
// Criterion 7: engineering round trips.
// ---------------------------------------------------------------------------

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_iters: 6,
        seed: 31,
        ablation: Ablation::BaseDisentangle,
        init_mode: InitMode::Random,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_7_round_trips() {
    // config round trip
    let (model_cfg0, train_cfg0) = parse_config(
        "num_masks = 5\nlambda_color = 0.25\npreset = desk\nmask_activation = softmax_over_masks\n",
    )
    .unwrap();
    let (model_cfg1, train_cfg1) = parse_config(&serialize_config(&model_cfg0, &train_cfg0)).unwrap();
    assert_eq!(model_cfg0, model_cfg1);
    assert_eq!(train_cfg0, train_cfg1);

    // checkpoint round trip is bit-exact
    let model_cfg = tiny_cfg();
    let train_cfg = tiny_train_cfg();
    let dataset = generate_dataset(6, 8, 8, 3).unwrap();
    let extractor = fixed_random_extractor::<f32>(9, 1);
    let (state, full_log) =
        train(&model_cfg, &train_cfg, &dataset, &extractor, None, None, &TrainOptions::default())
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("state.dlab");
    save_checkpoint(&state, &model_cfg, &train_cfg, &extractor, &ck).unwrap();
    let loaded = load_checkpoint(&ck, false).unwrap();
    assert_eq!(loaded.state, state, "checkpoint round trip must be bit-exact");

    // run-vs-resume: identical loss logs
    let half_cfg = TrainConfig { total_iters: 3, ..train_cfg.clone() };
    let (mid, first_half) =
        train(&model_cfg, &half_cfg, &dataset, &extractor, None, None, &TrainOptions::default())
            .unwrap();
    let ck2 = dir.path().join("mid.dlab");
    save_checkpoint(&mid, &model_cfg, &half_cfg, &extractor, &ck2).unwrap();
    let resumed = load_checkpoint(&ck2, false).unwrap();
    let (_, second_half) = train(
        &model_cfg,
        &train_cfg,
        &dataset,
        &extractor,
        Some(resumed.state),
        None,
        &TrainOptions::default(),
    )
    .unwrap();
    let stitched: Vec<IterRecord> = first_half.into_iter().chain(second_half).collect();
    assert_eq!(full_log, stitched, "resumed training must reproduce the uninterrupted log");

    // CLI: transfer with identical inputs bit-equals reconstruct
    let sprites = dir.path().join("sprites");
    let run = dir.path().join("run");
    let cfg_path = dir.path().join("t.cfg");
    std::fs::write(
        &cfg_path,
        "image_height = 16\nimage_width = 16\nnum_masks = 3\nappearance_dim = 4\n\
         decoder_fuse_channels = 8\nbatch_size = 2\ntotal_iters = 3\nseed = 8\n",
    )
    .unwrap();
    let dlab_bin = env!("CARGO_BIN_EXE_dlab");
    let ok = |out: std::process::Output| {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    ok(Command::new(dlab_bin)
        .args(["make-sprites", "--out", sprites.to_str().unwrap(), "--synthetic", "4"])
        .args(["--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap());
    ok(Command::new(dlab_bin)
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--synthetic", "6"])
        .args(["--out", run.to_str().unwrap()])
        .output()
        .unwrap());
    let image = sprites.join("train/sprite_00000.png");
    let ck_path = run.join("final.dlab");
    let rec_dir = dir.path().join("rec");
    let mix_dir = dir.path().join("mix");
    ok(Command::new(dlab_bin)
        .args(["reconstruct", "--checkpoint", ck_path.to_str().unwrap()])
        .arg(&image)
        .args(["--out", rec_dir.to_str().unwrap()])
        .output()
        .unwrap());
    ok(Command::new(dlab_bin)
        .args(["transfer", "--checkpoint", ck_path.to_str().unwrap()])
        .arg(&image)
        .arg(&image)
        .args(["--out", mix_dir.to_str().unwrap()])
        .output()
        .unwrap());
    let recon_png = std::fs::read(rec_dir.join("recon.png")).unwrap();
    let mix_png = std::fs::read(mix_dir.join("mix.png")).unwrap();
    assert_eq!(recon_png, mix_png, "transfer(x, x) must bit-equal reconstruct(x)");

    pass("7 (round trips)", "checkpoint, resume, config, and CLI outputs all exact".into());
}
