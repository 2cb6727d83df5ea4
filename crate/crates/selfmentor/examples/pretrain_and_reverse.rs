//! Phases 2 and 3 on the synthetic capsule benchmark: pretrains the trainee
//! on three labeled pairs and teaches the reverse net to paint images back
//! from masks.
//!
//! ```sh
//! cargo run --release --example pretrain_and_reverse
//! ```

use std::path::Path;

use selfmentor::data::{split, synth_capsule_dataset, SplitCounts, SplitMode};
use selfmentor::evaluation::test_jaccard;
use selfmentor::training::{pretrain_trainee, train_reverse, PhaseConfig, TrainOptions};
use selfmentor::unet::{UNet, UNetConfig};

fn main() -> selfmentor::Result<()> {
    let samples = synth_capsule_dataset(80, 64, 11)?;
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
        11,
    )?;
    println!(
        "bundle: {} labeled train, {} labeled val, {} unlabeled train, {} test",
        bundle.s_tr.len(),
        bundle.s_val.len(),
        bundle.u_tr.len(),
        bundle.test.len()
    );

    let phase = PhaseConfig::default();
    let mut opts = TrainOptions::new();
    opts.max_epochs = 400;

    let mut trainee = UNet::build(UNetConfig::new(3, 5, 1, 1), 1)?;
    let stats = pretrain_trainee(&mut trainee, &bundle.s_tr, &bundle.s_val, &phase, &mut opts, 2)?;
    let (_, mean_ji) = test_jaccard(&trainee, &bundle.test)?;
    println!(
        "trainee pretrained in {} epochs; test JI {mean_ji:.2}% from {} labeled pairs",
        stats.epochs,
        bundle.s_tr.len()
    );

    let mut reverse = UNet::build(UNetConfig::new(3, 5, 1, 1), 3)?;
    let stats = train_reverse(&mut reverse, &bundle.s_tr, &bundle.s_val, &phase, &mut opts, 4)?;
    println!(
        "reverse net trained in {} epochs, best validation loss {:.2}",
        stats.epochs, stats.best_val
    );

    // The reverse net should paint a capsule-like image from a clean mask.
    let out = Path::new("target/example-output/pretrain_and_reverse");
    let sample = &bundle.test[0];
    sample.x.save_png(&out.join("input.png"))?;
    trainee.predict(&sample.x)?.save_png(&out.join("trainee_mask.png"))?;
    let y = sample.y.as_ref().expect("test samples are labeled");
    reverse.predict(y)?.save_png(&out.join("reverse_painting.png"))?;
    println!("images in {}", out.display());
    Ok(())
}
