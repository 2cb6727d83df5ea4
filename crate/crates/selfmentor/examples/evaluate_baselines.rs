//! Runs the comparison baselines on the synthetic benchmark: standalone
//! pretraining, the self-training (pseudo-label) pipeline, and a
//! parameter-matched larger U-net.
//!
//! ```sh
//! cargo run --release --example evaluate_baselines
//! ```

use selfmentor::data::{split, synth_capsule_dataset, SplitCounts, SplitMode};
use selfmentor::evaluation::{
    large_unet_baseline, self_training_baseline, test_jaccard, smallest_filters_reaching,
};
use selfmentor::training::{pretrain_trainee, PhaseConfig, TrainOptions};
use selfmentor::unet::{UNet, UNetConfig};

fn main() -> selfmentor::Result<()> {
    let samples = synth_capsule_dataset(80, 64, 17)?;
    let bundle = split(
        &samples,
        &SplitCounts {
            n_s_tr: 3,
            n_s_val: 1,
            n_u_tr: 40,
            n_u_val: 10,
            n_test: 20,
        },
        &SplitMode::Iid,
        17,
    )?;
    let phase = PhaseConfig::default();
    let trainee_cfg = UNetConfig::new(3, 5, 1, 1);

    let mut opts = TrainOptions::new();
    opts.max_epochs = 400;
    let mut standalone = UNet::build(trainee_cfg, 1)?;
    pretrain_trainee(&mut standalone, &bundle.s_tr, &bundle.s_val, &phase, &mut opts, 2)?;
    let (_, standalone_ji) = test_jaccard(&standalone, &bundle.test)?;
    println!("standalone U-net        test JI {standalone_ji:6.2}%");

    let (student, stats) = self_training_baseline(&bundle, trainee_cfg, &phase, &mut opts, 3)?;
    let (_, student_ji) = test_jaccard(&student, &bundle.test)?;
    println!(
        "self-trained U-net      test JI {student_ji:6.2}%  ({} pseudo-labels)",
        stats.pseudo_labels
    );

    // Match the combined parameter budget of the three-net pipeline.
    let combined = trainee_cfg.param_count() * 2 + UNetConfig::new(3, 8, 1, 1).param_count();
    let filters = smallest_filters_reaching(combined);
    println!(
        "parameter-matched U-net: targeting {combined} params -> base width {filters} ({} params)",
        UNetConfig::new(3, filters, 1, 1).param_count()
    );
    let (large, chosen, _) = large_unet_baseline(&bundle, combined, &phase, &mut opts, 4)?;
    let (_, large_ji) = test_jaccard(&large, &bundle.test)?;
    println!("large U-net (F={chosen})      test JI {large_ji:6.2}%");
    Ok(())
}
