//! Trains a small referee to correct corrupted masks and reports how much
//! the correction improves the Jaccard index over the raw corruption.
//!
//! A few minutes on a laptop CPU:
//!
//! ```sh
//! cargo run --release --example train_referee
//! ```

use std::path::Path;

use selfmentor::evaluation::jaccard;
use selfmentor::synthmask::{sample_pair_set, CorruptionConfig};
use selfmentor::training::{train_referee, PhaseConfig, TrainOptions};
use selfmentor::unet::{checkpoint, UNet, UNetConfig};

fn main() -> selfmentor::Result<()> {
    let side = 64;
    let corruption = CorruptionConfig::for_side(side);
    let mut referee = UNet::build(UNetConfig::new(3, 8, 1, 1), 1)?;
    println!(
        "referee: depth 3, base width 8, {} parameters",
        referee.param_count()
    );

    let phase = PhaseConfig {
        patience_referee: 10,
        ..PhaseConfig::default()
    };
    let mut opts = TrainOptions::new();
    opts.max_epochs = 30;
    opts.referee_pairs_per_epoch = 100;
    opts.referee_val_pairs = 50;
    let stats = train_referee(&mut referee, side, &corruption, &phase, &mut opts, 7)?;
    println!(
        "trained for {} epochs, best validation loss {:.1}",
        stats.epochs, stats.best_val
    );

    // Held-out pairs: corrupted-as-is vs referee-corrected.
    let held_out = sample_pair_set(40, side, &corruption, 999)?;
    let mut raw = 0.0f32;
    let mut corrected = 0.0f32;
    for pair in &held_out {
        raw += jaccard(&pair.clean, &pair.corrupted, 0.5)?;
        let fixed = referee.predict(&pair.corrupted)?;
        corrected += jaccard(&pair.clean, &fixed, 0.5)?;
    }
    raw /= held_out.len() as f32;
    corrected /= held_out.len() as f32;
    println!("mean JI of raw corruption:   {raw:6.2}%");
    println!("mean JI after the referee:   {corrected:6.2}%");

    let out = Path::new("target/example-output/train_referee");
    for (i, pair) in held_out.iter().take(4).enumerate() {
        pair.corrupted
            .save_png(&out.join(format!("{i}_corrupted.png")))?;
        referee
            .predict(&pair.corrupted)?
            .save_png(&out.join(format!("{i}_referee.png")))?;
        pair.clean.save_png(&out.join(format!("{i}_clean.png")))?;
    }
    checkpoint::save(&referee, &out.join("referee.ckpt"))?;
    println!("sample corrections and checkpoint in {}", out.display());
    Ok(())
}
