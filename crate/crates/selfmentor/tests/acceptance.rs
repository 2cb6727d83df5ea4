//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (run with `--nocapture` to see them).
//!
//! The heavy training criteria (5 and 6) run real multi-minute CPU training;
//! the rest finish in seconds.

mod common;

use std::time::Instant;

use common::*;
use rand_chacha::ChaCha8Rng;

use selfmentor::augment::{augment_supervised, AugmentConfig};
use selfmentor::autodiff::{
    bce_loss, concat_channels, conv2d_same, dice_loss, maxpool4, mse_loss, relu, sigmoid,
    upsample_nearest4, Tensor,
};
use selfmentor::data::{split, synth_capsule_dataset, Sample, SplitCounts, SplitMode};
use selfmentor::evaluation::jaccard;
use selfmentor::img::Image;
use selfmentor::synthmask::{sample_pair_set, CorruptionConfig};
use selfmentor::training::{
    main_phase, pretrain_trainee, train_referee, train_reverse, CurriculumSchedule, Decision,
    EarlyStopper, PhaseConfig, TrainOptions,
};
use selfmentor::unet::{checkpoint, UNet, UNetConfig};

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness
// ---------------------------------------------------------------------------

/// Checks one op embedded in `loss = mse(op(inputs), target)`: every tracked
/// input's autodiff gradient must match central finite differences of the f64
/// reference.
struct OpCheck<'a> {
    name: &'a str,
    /// Builds the autodiff loss from f32 input tensors.
    forward: &'a dyn Fn(&[Tensor]) -> Tensor,
    /// The f64 reference of the same loss.
    reference: &'a dyn Fn(&[Vec<f64>]) -> f64,
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
}

fn run_op_check(check: &OpCheck) {
    let tensors: Vec<Tensor> = check
        .inputs
        .iter()
        .map(|(shape, data)| Tensor::with_grad(shape, data.clone()))
        .collect();
    let loss = (check.forward)(&tensors);
    loss.backward().unwrap();

    let f64_inputs: Vec<Vec<f64>> = check.inputs.iter().map(|(_, d)| to_f64(d)).collect();
    for (i, tensor) in tensors.iter().enumerate() {
        let analytic = tensor.grad().expect("tracked input receives a gradient");
        let numeric = finite_difference_grad(&f64_inputs[i], |perturbed| {
            let mut inputs = f64_inputs.clone();
            inputs[i] = perturbed.to_vec();
            (check.reference)(&inputs)
        });
        assert_grads_close(&analytic, &numeric, &format!("{} input {i}", check.name));
    }
}

fn conv_check(rng: &mut ChaCha8Rng) -> bool {
    let (c, o, h, w) = (2usize, 3usize, 6usize, 6usize);
    let input = rand_vec(rng, c * h * w, -1.0, 1.0);
    let weights = rand_vec(rng, o * c * 9, -0.5, 0.5);
    let bias = rand_vec(rng, o, -0.2, 0.2);
    let target = rand_vec(rng, o * h * w, -1.0, 1.0);
    let t64 = to_f64(&target);
    run_op_check(&OpCheck {
        name: "conv2d_same",
        forward: &|ts| {
            mse_loss(
                &conv2d_same(&ts[0], &ts[1], &ts[2]).unwrap(),
                &Tensor::from_vec(&[1, o, h, w], target.clone()),
            )
            .unwrap()
        },
        reference: &|ins| {
            let out = conv2d_same_ref(&ins[0], &ins[1], &ins[2], (1, c, h, w), o, 3);
            mse_ref(&out, &t64)
        },
        inputs: vec![
            (vec![1, c, h, w], input),
            (vec![o, c, 3, 3], weights),
            (vec![o], bias),
        ],
    });
    true
}

fn maxpool_check(rng: &mut ChaCha8Rng) -> bool {
    use rand::seq::SliceRandom;
    let (c, h, w) = (2usize, 8usize, 8usize);
    // Values on a shuffled 0.01 grid: every pair differs by more than twice
    // the finite-difference step, so the argmax never flips under
    // perturbation.
    let mut input: Vec<f32> = (0..c * h * w).map(|i| i as f32 * 0.01 - 0.64).collect();
    input.shuffle(rng);
    let target = rand_vec(rng, c * 2 * 2, -1.0, 1.0);
    let t64 = to_f64(&target);
    run_op_check(&OpCheck {
        name: "maxpool4",
        forward: &|ts| {
            mse_loss(
                &maxpool4(&ts[0]).unwrap(),
                &Tensor::from_vec(&[1, c, 2, 2], target.clone()),
            )
            .unwrap()
        },
        reference: &|ins| mse_ref(&maxpool4_ref(&ins[0], (1, c, h, w)), &t64),
        inputs: vec![(vec![1, c, h, w], input)],
    });
    true
}

fn upsample_check(rng: &mut ChaCha8Rng) -> bool {
    let (c, h, w) = (2usize, 2usize, 2usize);
    let input = rand_vec(rng, c * h * w, -1.0, 1.0);
    let target = rand_vec(rng, c * 64, -1.0, 1.0);
    let t64 = to_f64(&target);
    run_op_check(&OpCheck {
        name: "upsample_nearest4",
        forward: &|ts| {
            mse_loss(
                &upsample_nearest4(&ts[0]).unwrap(),
                &Tensor::from_vec(&[1, c, 8, 8], target.clone()),
            )
            .unwrap()
        },
        reference: &|ins| mse_ref(&upsample4_ref(&ins[0], (1, c, h, w)), &t64),
        inputs: vec![(vec![1, c, h, w], input)],
    });
    true
}

fn concat_check(rng: &mut ChaCha8Rng) -> bool {
    let (ca, cb, h, w) = (2usize, 1usize, 4usize, 4usize);
    let a = rand_vec(rng, ca * h * w, -1.0, 1.0);
    let b = rand_vec(rng, cb * h * w, -1.0, 1.0);
    let target = rand_vec(rng, (ca + cb) * h * w, -1.0, 1.0);
    let t64 = to_f64(&target);
    run_op_check(&OpCheck {
        name: "concat_channels",
        forward: &|ts| {
            mse_loss(
                &concat_channels(&ts[0], &ts[1]).unwrap(),
                &Tensor::from_vec(&[1, ca + cb, h, w], target.clone()),
            )
            .unwrap()
        },
        reference: &|ins| mse_ref(&concat_ref(&ins[0], &ins[1], (1, ca, h, w), cb), &t64),
        inputs: vec![(vec![1, ca, h, w], a), (vec![1, cb, h, w], b)],
    });
    true
}

fn activation_checks(rng: &mut ChaCha8Rng) -> bool {
    let n = 24usize;
    // Keep relu inputs away from the kink at zero.
    let input: Vec<f32> = rand_vec(rng, n, -1.0, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let target = rand_vec(rng, n, -1.0, 1.0);
    let t64 = to_f64(&target);
    run_op_check(&OpCheck {
        name: "relu",
        forward: &|ts| {
            mse_loss(&relu(&ts[0]), &Tensor::from_vec(&[n], target.clone())).unwrap()
        },
        reference: &|ins| mse_ref(&relu_ref(&ins[0]), &t64),
        inputs: vec![(vec![n], input.clone())],
    });
    run_op_check(&OpCheck {
        name: "sigmoid",
        forward: &|ts| {
            mse_loss(&sigmoid(&ts[0]), &Tensor::from_vec(&[n], target.clone())).unwrap()
        },
        reference: &|ins| mse_ref(&sigmoid_ref(&ins[0]), &t64),
        inputs: vec![(vec![n], input)],
    });
    true
}

fn loss_checks(rng: &mut ChaCha8Rng) -> bool {
    let n = 20usize;
    let pred = rand_vec(rng, n, 0.05, 0.95);
    let target = rand_vec(rng, n, 0.05, 0.95);
    run_op_check(&OpCheck {
        name: "mse_loss",
        forward: &|ts| mse_loss(&ts[0], &ts[1]).unwrap(),
        reference: &|ins| mse_ref(&ins[0], &ins[1]),
        inputs: vec![(vec![n], pred.clone()), (vec![n], target.clone())],
    });
    run_op_check(&OpCheck {
        name: "dice_loss",
        forward: &|ts| dice_loss(&ts[0], &ts[1]).unwrap(),
        reference: &|ins| dice_ref(&ins[0], &ins[1]),
        inputs: vec![(vec![n], pred), (vec![n], target)],
    });
    // Cross-entropy curvature explodes like 1/p^3 towards the domain edge,
    // where the central-difference oracle's own truncation error at step
    // 1e-3 exceeds the tolerance; sample predictions away from it.
    let pred = rand_vec(rng, n, 0.2, 0.8);
    let target = rand_vec(rng, n, 0.05, 0.95);
    run_op_check(&OpCheck {
        name: "bce_loss",
        forward: &|ts| bce_loss(&ts[0], &ts[1]).unwrap(),
        reference: &|ins| bce_ref(&ins[0], &ins[1]),
        inputs: vec![(vec![n], pred), (vec![n], target)],
    });
    true
}

/// Full two-level U-net: gradients of the loss w.r.t. every parameter and
/// the input must match finite differences of the f64 reference forward.
fn unet_composed_check(seed: u64) {
    let config = UNetConfig::new(2, 2, 1, 1);
    let net = UNet::build(config, seed).unwrap();
    let mut rng = seeded(seed ^ 0xABCD);
    let side = 16usize;
    let input = rand_vec(&mut rng, side * side, 0.0, 1.0);
    let target = rand_vec(&mut rng, side * side, 0.0, 1.0);
    let target64 = to_f64(&target);

    let x = Tensor::with_grad(&[1, 1, side, side], input.clone());
    let out = net.forward(&x).unwrap();
    let loss = mse_loss(&out, &Tensor::from_vec(&[1, 1, side, side], target)).unwrap();
    loss.backward().unwrap();

    let ref_params = extract_params(&net);
    let base_input = to_f64(&input);

    // The composed net is piecewise linear (relu, max pooling); elements
    // whose perturbation interval straddles a kink are excluded by the
    // two-step filter, and must stay a small minority.
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut check_filtered = |analytic: &[f32], base: &[f64], what: &str, f: &mut dyn FnMut(&[f64]) -> f64| {
        let (numeric, smooth) = finite_difference_grad_filtered(base, f);
        for (i, ((a, n), ok)) in analytic.iter().zip(&numeric).zip(&smooth).enumerate() {
            if !*ok {
                skipped += 1;
                continue;
            }
            checked += 1;
            let err = rel_error(f64::from(*a), *n);
            assert!(
                err < REL_TOL,
                "{what}: element {i}: analytic {a}, finite-difference {n}, rel error {err}"
            );
        }
    };

    // Input gradient.
    check_filtered(
        &x.grad().unwrap(),
        &base_input,
        "unet input",
        &mut |perturbed| {
            let out = unet_forward_ref(&config, &ref_params, perturbed, side);
            mse_ref(&out, &target64)
        },
    );

    // Every parameter tensor.
    for (pi, (name, param)) in net.named_params().iter().enumerate() {
        let analytic = param.value.grad().expect("parameter gradient");
        let base = ref_params.values[pi].clone();
        check_filtered(&analytic, &base, &format!("unet param {name}"), &mut |perturbed| {
            let mut params = RefParams {
                names: ref_params.names.clone(),
                shapes: ref_params.shapes.clone(),
                values: ref_params.values.clone(),
            };
            params.values[pi] = perturbed.to_vec();
            let out = unet_forward_ref(&config, &params, &base_input, side);
            mse_ref(&out, &target64)
        });
    }
    assert!(
        skipped * 4 < checked,
        "too many kink-adjacent elements skipped ({skipped} of {})",
        checked + skipped
    );
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    for seed in 0..20u64 {
        let mut rng = seeded(seed);
        conv_check(&mut rng);
        maxpool_check(&mut rng);
        upsample_check(&mut rng);
        concat_check(&mut rng);
        activation_checks(&mut rng);
        loss_checks(&mut rng);
    }
    // The composed net is the expensive part; three seeds keep the whole
    // criterion far under its two-minute budget.
    for seed in [3u64, 17, 42] {
        unet_composed_check(seed);
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "gradient checks took {elapsed:?}, budget is 2 minutes"
    );
    println!(
        "ACCEPTANCE 1 PASS: all ops + composed U-net match finite differences \
         (20 seeds per op, rel tol 1e-3) in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: U-net contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_unet_contract() {
    let net = UNet::build(UNetConfig::new(3, 4, 1, 1), 7).unwrap();
    let mut rng = seeded(2);
    for trial in 0..3 {
        let x = Tensor::from_vec(&[1, 1, 64, 64], rand_vec(&mut rng, 64 * 64, 0.0, 1.0));
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64], "trial {trial}");
        assert!(
            y.data().iter().all(|v| *v > 0.0 && *v < 1.0),
            "trial {trial}: output escaped (0,1)"
        );
    }
    let bad = Tensor::zeros(&[1, 1, 60, 60]);
    let msg = match net.forward(&bad) {
        Err(selfmentor::Error::Shape(msg)) => msg,
        other => panic!("expected a shape error, got {other:?}"),
    };
    assert!(msg.contains("64"), "error must name the divisor 64: {msg}");
    println!(
        "ACCEPTANCE 2 PASS: 64x64 -> 64x64 strictly in (0,1); indivisible input error says: {msg}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: augmentation distribution
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_da_distribution() {
    let sources = synth_capsule_dataset(3, 64, 33).unwrap();
    let cfg = AugmentConfig {
        output_set_size: 10_000,
        ..AugmentConfig::default()
    };
    let mut rng = seeded(3);
    let draws = augment_supervised(&sources, &cfg, &mut rng).unwrap();
    let unchanged = draws
        .iter()
        .filter(|s| {
            sources
                .iter()
                .any(|src| src.x == s.x && src.y == s.y)
        })
        .count();
    let fraction = unchanged as f64 / draws.len() as f64;
    let expected = 9.0 / 64.0;
    assert!(
        (fraction - expected).abs() <= 0.01,
        "unchanged fraction {fraction} outside {expected} +- 0.01"
    );

    // Salt-and-pepper on a mid-gray image rewrites exactly 5% of pixels.
    let h = 64;
    let w = 64;
    let flat = Sample::labeled(
        "flat",
        Image::filled(h, w, 0.5),
        Image::zeros(h, w),
    );
    let expected_count = (0.05 * (h * w) as f64).round() as usize;
    let mut rng = seeded(4);
    let mut checked = 0;
    while checked < 50 {
        let out = augment_supervised(std::slice::from_ref(&flat), &AugmentConfig {
            output_set_size: 1,
            ..AugmentConfig::default()
        }, &mut rng)
        .unwrap();
        let changed = out[0]
            .x
            .data()
            .iter()
            .filter(|v| **v != 0.5)
            .count();
        // Only salt-and-pepper draws leave a plateau of exactly 0/1 pixels;
        // identify them by the changed values being exactly 0 or 1.
        let is_salt_pepper = changed > 0
            && out[0]
                .x
                .data()
                .iter()
                .filter(|v| **v != 0.5)
                .all(|v| *v == 0.0 || *v == 1.0);
        if is_salt_pepper {
            assert_eq!(
                changed, expected_count,
                "salt-and-pepper rewrote {changed} pixels, expected {expected_count}"
            );
            checked += 1;
        }
    }
    println!(
        "ACCEPTANCE 3 PASS: unchanged fraction {fraction:.4} within 9/64 +- 0.01; \
         salt-and-pepper rewrites exactly {expected_count} of {} pixels",
        h * w
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: Jaccard oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_jaccard_oracle() {
    let m = Image::new(2, 4, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(jaccard(&m, &m, 0.5).unwrap(), 100.0);

    let a = Image::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
    let b = Image::new(2, 2, vec![0.0, 0.0, 0.9, 0.9]);
    assert_eq!(jaccard(&a, &b, 0.5).unwrap(), 0.0);

    let y = Image::new(2, 4, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let p = Image::new(2, 4, vec![0.0, 0.0, 0.8, 0.8, 0.7, 0.7, 0.0, 0.0]);
    let ji = jaccard(&y, &p, 0.5).unwrap();
    assert!(
        (ji - 33.33).abs() <= 0.01,
        "2-of-4 overlap gave {ji}, expected 33.33 +- 0.01"
    );
    println!("ACCEPTANCE 4 PASS: identical 100%, disjoint 0%, 2-of-4 overlap {ji:.2}%");
}

// ---------------------------------------------------------------------------
// Criterion 5: referee efficacy
// ---------------------------------------------------------------------------

/// The two multi-minute training criteria hold this lock so their runtime
/// budgets measure the training itself, not contention with each other on a
/// small CPU. Timers start after acquisition.
static HEAVY_TRAINING: std::sync::Mutex<()> = std::sync::Mutex::new(());

#[test]
fn criterion_05_referee_efficacy() {
    let _serial = HEAVY_TRAINING
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner());
    let started = Instant::now();
    let side = 64;
    let corruption = CorruptionConfig::for_side(side);
    let mut referee = UNet::build(UNetConfig::new(3, 8, 1, 1), 55).unwrap();
    let phase = PhaseConfig {
        patience_referee: 50,
        ..PhaseConfig::default()
    };
    let mut opts = TrainOptions::new();
    opts.max_epochs = 100;
    opts.referee_pairs_per_epoch = 300;
    opts.referee_val_pairs = 300;
    let stats = train_referee(&mut referee, side, &corruption, &phase, &mut opts, 555).unwrap();

    let held_out = sample_pair_set(200, side, &corruption, 987_654).unwrap();
    let mut raw = 0.0f32;
    let mut corrected = 0.0f32;
    for pair in &held_out {
        raw += jaccard(&pair.clean, &pair.corrupted, 0.5).unwrap();
        let fixed = referee.predict(&pair.corrupted).unwrap();
        corrected += jaccard(&pair.clean, &fixed, 0.5).unwrap();
    }
    raw /= held_out.len() as f32;
    corrected /= held_out.len() as f32;
    let gain = corrected - raw;
    let elapsed = started.elapsed();
    assert!(
        gain >= 20.0,
        "referee gain {gain:.2} points (raw {raw:.2} -> corrected {corrected:.2}), need >= 20"
    );
    assert!(
        elapsed.as_secs() < 1800,
        "referee training took {elapsed:?}, budget is 30 minutes"
    );
    println!(
        "ACCEPTANCE 5 PASS: referee JI {raw:.2}% -> {corrected:.2}% (+{gain:.2} points, \
         {} epochs, {elapsed:?})",
        stats.epochs
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end self-mentoring benefit
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_self_mentoring_benefit() {
    let _serial = HEAVY_TRAINING
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner());
    let started = Instant::now();
    let side = 64;
    let samples = synth_capsule_dataset(200, side, 6_001).unwrap();
    let bundle = split(
        &samples,
        &SplitCounts {
            n_s_tr: 3,
            n_s_val: 1,
            n_u_tr: 100,
            n_u_val: 20,
            n_test: 50,
        },
        &SplitMode::Iid,
        6_002,
    )
    .unwrap();
    let phase = PhaseConfig {
        lambda_ae: 5.0,
        patience_referee: 50,
        ..PhaseConfig::default()
    };

    // One referee serves all seeds, as in the reference protocol; base width
    // 8 keeps it strong on 64x64 synthetic masks at a fraction of the cost.
    let mut referee = UNet::build(UNetConfig::new(3, 8, 1, 1), 6_100).unwrap();
    {
        let mut opts = TrainOptions::new();
        opts.max_epochs = 100;
        train_referee(
            &mut referee,
            side,
            &CorruptionConfig::for_side(side),
            &phase,
            &mut opts,
            6_200,
        )
        .unwrap();
    }
    let referee_bytes = checkpoint::to_bytes(&referee);

    use rayon::prelude::*;
    let results: Vec<(f32, f32)> = [0u64, 1, 2]
        .par_iter()
        .map(|&k| {
            let referee = checkpoint::from_bytes(&referee_bytes).unwrap();
            let net_seed = 6_300 + k;
            let mut opts = TrainOptions::new();
            opts.max_epochs = 3_000;
            let mut trainee = UNet::build(UNetConfig::new(3, 5, 1, 1), net_seed).unwrap();
            pretrain_trainee(
                &mut trainee,
                &bundle.s_tr,
                &bundle.s_val,
                &phase,
                &mut opts,
                net_seed ^ 0x11,
            )
            .unwrap();
            let (_, pretrained_ji) =
                selfmentor::evaluation::test_jaccard(&trainee, &bundle.test).unwrap();

            let mut reverse = UNet::build(UNetConfig::new(3, 5, 1, 1), net_seed ^ 0x22).unwrap();
            train_reverse(
                &mut reverse,
                &bundle.s_tr,
                &bundle.s_val,
                &phase,
                &mut opts,
                net_seed ^ 0x33,
            )
            .unwrap();

            let mut opts = TrainOptions::new();
            opts.max_epochs = 80;
            main_phase(
                &mut trainee,
                &referee,
                &reverse,
                &bundle,
                &phase,
                &CurriculumSchedule::default(),
                &mut opts,
                net_seed ^ 0x44,
            )
            .unwrap();
            let (_, mentored_ji) =
                selfmentor::evaluation::test_jaccard(&trainee, &bundle.test).unwrap();
            (pretrained_ji, mentored_ji)
        })
        .collect();

    let mean_pre = results.iter().map(|r| r.0).sum::<f32>() / results.len() as f32;
    let mean_post = results.iter().map(|r| r.1).sum::<f32>() / results.len() as f32;
    let gain = mean_post - mean_pre;
    let elapsed = started.elapsed();
    for (k, (pre, post)) in results.iter().enumerate() {
        println!("  seed {k}: pretrained {pre:.2}% -> self-mentored {post:.2}%");
    }
    assert!(
        gain >= 5.0,
        "self-mentoring gain {gain:.2} points (pretrained {mean_pre:.2}% -> \
         mentored {mean_post:.2}%), need >= 5"
    );
    assert!(
        elapsed.as_secs() < 7200,
        "end-to-end run took {elapsed:?}, budget is 2 hours"
    );
    println!(
        "ACCEPTANCE 6 PASS: mean test JI {mean_pre:.2}% -> {mean_post:.2}% \
         (+{gain:.2} points over 3 seeds, {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: curriculum schedule
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_curriculum_schedule() {
    let schedule = CurriculumSchedule::default();
    assert_eq!(
        schedule.percents(),
        vec![30, 37, 44, 51, 58, 65, 72, 79, 86, 93, 100]
    );

    // A tiny real phase-4 run: each round's subset must equal the
    // brute-force top-k of the scores recorded at round start.
    let (stats, bundle, _, _) = tiny_main_phase_run(77);
    for r in &stats.rounds {
        let k = schedule.active_count(r.round, bundle.u_tr.len());
        let mut pairs: Vec<(f32, usize)> = r.scores.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        expect.sort_unstable();
        assert_eq!(r.active, expect, "round {}", r.round);
    }
    println!(
        "ACCEPTANCE 7 PASS: percents 30..100 by 7; {} rounds of top-k selection match \
         the brute-force sort",
        stats.rounds.len()
    );
}

fn tiny_main_phase_run(
    seed: u64,
) -> (
    selfmentor::training::MainPhaseStats,
    selfmentor::data::DatasetBundle,
    Vec<u8>,
    Vec<u8>,
) {
    let samples = synth_capsule_dataset(40, 64, seed).unwrap();
    let bundle = split(
        &samples,
        &SplitCounts {
            n_s_tr: 2,
            n_s_val: 1,
            n_u_tr: 10,
            n_u_val: 3,
            n_test: 5,
        },
        &SplitMode::Iid,
        seed,
    )
    .unwrap();
    let mut trainee = UNet::build(UNetConfig::new(2, 2, 1, 1), seed ^ 1).unwrap();
    let referee = UNet::build(UNetConfig::new(2, 2, 1, 1), seed ^ 2).unwrap();
    let reverse = UNet::build(UNetConfig::new(2, 2, 1, 1), seed ^ 3).unwrap();
    let ref_before = checkpoint::to_bytes(&referee);
    let rev_before = checkpoint::to_bytes(&reverse);
    let phase = PhaseConfig {
        patience_main: 1,
        ..PhaseConfig::default()
    };
    let mut opts = TrainOptions::new();
    opts.max_epochs = 2;
    let stats = main_phase(
        &mut trainee,
        &referee,
        &reverse,
        &bundle,
        &phase,
        &CurriculumSchedule::default(),
        &mut opts,
        seed ^ 4,
    )
    .unwrap();
    let ref_after = checkpoint::to_bytes(&referee);
    let rev_after = checkpoint::to_bytes(&reverse);
    assert_eq!(ref_before, ref_after, "referee changed during phase 4");
    (stats, bundle, rev_before, rev_after)
}

// ---------------------------------------------------------------------------
// Criterion 8: frozen-net contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_frozen_nets_bitwise_identical() {
    let (_, _, rev_before, rev_after) = tiny_main_phase_run(88);
    assert_eq!(rev_before, rev_after, "reverse net changed during phase 4");
    println!(
        "ACCEPTANCE 8 PASS: referee and reverse checkpoints bitwise identical across phase 4 \
         ({} bytes each)",
        rev_before.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: early stopping
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_early_stopping_scripted_sequence() {
    let mut stopper: EarlyStopper<&'static str> = EarlyStopper::new(2);
    let mut decisions = Vec::new();
    for (loss, tag) in [
        (3.0, "epoch1"),
        (2.0, "epoch2"),
        (4.0, "epoch3"),
        (4.0, "epoch4"),
        (4.0, "epoch5"),
    ] {
        decisions.push(stopper.observe(loss, || tag));
    }
    assert_eq!(
        decisions,
        vec![
            Decision::Continue,
            Decision::Continue,
            Decision::Continue,
            Decision::Continue,
            Decision::Stop
        ],
        "training must stop exactly on the 5th measurement"
    );
    let (best, snapshot) = stopper.into_best().unwrap();
    assert_eq!(best, 2.0);
    assert_eq!(snapshot, "epoch2");
    println!(
        "ACCEPTANCE 9 PASS: [3,2,4,4,4] with patience 2 stops after the 5th measurement \
         and returns the epoch-2 snapshot"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: determinism and persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism_and_persistence() {
    use selfmentor::config::RunConfig;
    use selfmentor::pipeline::{run, Command};

    let tmp = tempfile::tempdir().unwrap();
    let config_text = "\
dataset.count = 30
split.n_s_tr = 2
split.n_s_val = 1
split.n_u_tr = 8
split.n_u_val = 3
split.n_test = 5
trainee.base_filters = 2
referee.base_filters = 2
reverse.base_filters = 2
phase.patience_pretrain = 2
phase.patience_main = 1
phase.patience_referee = 2
train.max_epochs = 2
referee.pairs_per_epoch = 4
referee.val_pairs = 4
eval.seeds = 1
seed = 902
";
    let mut reports = Vec::new();
    for run_idx in 0..2 {
        let out = tmp.path().join(format!("run{run_idx}"));
        let mut cfg = RunConfig::parse(config_text).unwrap();
        cfg.output_dir = out.clone();
        run(Command::FullPipeline, &cfg).unwrap();
        reports.push(std::fs::read(out.join("eval_report.txt")).unwrap());
    }
    assert_eq!(
        reports[0], reports[1],
        "identical master seeds must produce identical evaluation reports"
    );

    // Checkpoint persistence: save -> load -> forward is bitwise identical.
    let net = UNet::build(UNetConfig::new(2, 3, 1, 1), 1010).unwrap();
    let path = tmp.path().join("net.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&net), checkpoint::to_bytes(&loaded));
    let mut rng = seeded(10);
    let x = Tensor::from_vec(&[1, 1, 16, 16], rand_vec(&mut rng, 256, 0.0, 1.0));
    let a = net.forward(&x).unwrap();
    let b = loaded.forward(&x).unwrap();
    for (u, v) in a.data().iter().zip(b.data().iter()) {
        assert_eq!(u.to_bits(), v.to_bits());
    }
    println!(
        "ACCEPTANCE 10 PASS: identical seeds give byte-identical reports ({} bytes); \
         checkpoint round-trip is bitwise exact",
        reports[0].len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: background suppression
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_background_suppression() {
    use selfmentor::data::suppress_background;

    // Constant background, each pixel "object" in fewer than half the frames.
    let c = 0.37f32;
    let n = 11;
    let stack: Vec<Image> = (0..n)
        .map(|frame| {
            Image::from_fn(16, 16, |y, x| {
                if (y * 16 + x + frame) % 11 < 5 {
                    0.95
                } else {
                    c
                }
            })
        })
        .collect();
    let (median, _) = suppress_background(&stack).unwrap();
    assert!(
        median.data().iter().all(|v| *v == c),
        "median must recover the constant background exactly"
    );

    let img = Image::from_fn(16, 16, |y, x| (y * 16 + x) as f32 / 256.0);
    let identical = vec![img.clone(), img.clone(), img];
    let (_, processed) = suppress_background(&identical).unwrap();
    for p in &processed {
        assert!(p.data().iter().all(|v| *v == 0.0));
    }
    println!(
        "ACCEPTANCE 11 PASS: median recovers constant background exactly; identical stack \
         suppresses to all-zero images"
    );
}
