//! The full four-phase protocol at desk scale: referee, trainee pretraining,
//! reverse net, then the mentored main phase. Prints the before/after test
//! Jaccard index so the benefit of phase 4 is visible.
//!
//! Takes a few minutes:
//!
//! ```sh
//! cargo run --release --example self_mentoring
//! ```

use selfmentor::data::{split, synth_capsule_dataset, SplitCounts, SplitMode};
use selfmentor::evaluation::test_jaccard;
use selfmentor::synthmask::CorruptionConfig;
use selfmentor::training::{
    main_phase, pretrain_trainee, train_referee, train_reverse, CurriculumSchedule, PhaseConfig,
    TrainOptions,
};
use selfmentor::unet::{UNet, UNetConfig};

fn main() -> selfmentor::Result<()> {
    let side = 64;
    let samples = synth_capsule_dataset(120, side, 5)?;
    let bundle = split(
        &samples,
        &SplitCounts {
            n_s_tr: 3,
            n_s_val: 1,
            n_u_tr: 60,
            n_u_val: 10,
            n_test: 30,
        },
        &SplitMode::Iid,
        5,
    )?;

    let phase = PhaseConfig {
        patience_referee: 10,
        patience_main: 6,
        ..PhaseConfig::default()
    };

    // Phase 1: referee on synthetic pairs.
    let mut referee = UNet::build(UNetConfig::new(3, 8, 1, 1), 10)?;
    let mut opts = TrainOptions::new();
    opts.max_epochs = 25;
    opts.referee_pairs_per_epoch = 100;
    opts.referee_val_pairs = 50;
    let stats = train_referee(
        &mut referee,
        side,
        &CorruptionConfig::for_side(side),
        &phase,
        &mut opts,
        20,
    )?;
    println!("phase 1: referee trained, {} epochs", stats.epochs);

    // Phase 2: trainee pretraining on three labels.
    let mut opts = TrainOptions::new();
    opts.max_epochs = 400;
    let mut trainee = UNet::build(UNetConfig::new(3, 5, 1, 1), 11)?;
    let stats = pretrain_trainee(&mut trainee, &bundle.s_tr, &bundle.s_val, &phase, &mut opts, 21)?;
    let (_, pretrained_ji) = test_jaccard(&trainee, &bundle.test)?;
    println!("phase 2: trainee pretrained, {} epochs, test JI {pretrained_ji:.2}%", stats.epochs);

    // Phase 3: reverse net.
    let mut reverse = UNet::build(UNetConfig::new(3, 5, 1, 1), 12)?;
    let stats = train_reverse(&mut reverse, &bundle.s_tr, &bundle.s_val, &phase, &mut opts, 22)?;
    println!("phase 3: reverse net trained, {} epochs", stats.epochs);

    // Phase 4: mentored training with curriculum over the unlabeled pool.
    let mut opts = TrainOptions::new();
    opts.max_epochs = 15;
    let stats = main_phase(
        &mut trainee,
        &referee,
        &reverse,
        &bundle,
        &phase,
        &CurriculumSchedule::default(),
        &mut opts,
        23,
    )?;
    let (_, mentored_ji) = test_jaccard(&trainee, &bundle.test)?;
    println!(
        "phase 4: best validation loss {:.2} in round {}",
        stats.best_l_val, stats.best_round
    );
    for r in &stats.rounds {
        println!(
            "  round {:2} ({:3}% of unlabeled pool): {} epochs, best L_val {:.2}",
            r.round, r.percent, r.epochs, r.best_l_val
        );
    }

    println!("test JI pretrained only:  {pretrained_ji:6.2}%");
    println!("test JI self-mentored:    {mentored_ji:6.2}%");
    println!("improvement:              {:+6.2} points", mentored_ji - pretrained_ji);
    Ok(())
}
