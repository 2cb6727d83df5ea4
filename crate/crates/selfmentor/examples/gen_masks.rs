//! Generates synthetic corrupted/clean mask pairs - the referee's training
//! diet - and writes them as PNG files.
//!
//! ```sh
//! cargo run --release --example gen_masks
//! ```

use std::path::Path;

use selfmentor::synthmask::{sample_pair_set, CorruptionConfig};

fn main() -> selfmentor::Result<()> {
    let side = 64;
    let count = 12;
    let corruption = CorruptionConfig::for_side(side);
    println!(
        "sampling {count} pairs at {side}x{side}, ring thickness {}..{} px, noise sigma {}",
        corruption.thickness_min, corruption.thickness_max, corruption.noise_sigma
    );

    let pairs = sample_pair_set(count, side, &corruption, 42)?;
    let out = Path::new("target/example-output/gen_masks");
    for (i, pair) in pairs.iter().enumerate() {
        pair.clean.save_png(&out.join(format!("pair_{i:03}_clean.png")))?;
        pair.corrupted
            .save_png(&out.join(format!("pair_{i:03}_corrupted.png")))?;
        println!(
            "pair {i:03}: clean area {:4} px, corrupted positives at 0.5: {:4} px",
            pair.clean.count_positive(),
            pair.corrupted.binarize(0.5).count_positive()
        );
    }
    println!("wrote {} files to {}", 2 * pairs.len(), out.display());
    Ok(())
}
