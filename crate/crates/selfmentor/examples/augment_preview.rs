//! Exercises the augmentation generator: writes before/after image pairs and
//! checks the advertised distribution (about 9/64 of supervised draws leave
//! the pair untouched).
//!
//! ```sh
//! cargo run --release --example augment_preview
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selfmentor::augment::{augment_supervised, augment_unlabeled, AugmentConfig};
use selfmentor::data::synth_capsule_dataset;

fn main() -> selfmentor::Result<()> {
    let sources = synth_capsule_dataset(3, 64, 21)?;
    let out = Path::new("target/example-output/augment_preview");

    let cfg = AugmentConfig {
        output_set_size: 12,
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let augmented = augment_supervised(&sources, &cfg, &mut rng)?;
    for (i, s) in sources.iter().enumerate() {
        s.x.save_png(&out.join(format!("source_{i}.png")))?;
    }
    for (i, s) in augmented.iter().enumerate() {
        s.x.save_png(&out.join(format!("augmented_{i:02}.png")))?;
        if let Some(y) = &s.y {
            y.save_png(&out.join(format!("augmented_{i:02}_mask.png")))?;
        }
    }
    println!("wrote {} before/after files to {}", augmented.len(), out.display());

    // Empirical no-op rate over many supervised draws.
    let single = vec![sources[0].clone()];
    let big = AugmentConfig {
        output_set_size: 10_000,
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = augment_supervised(&single, &big, &mut rng)?;
    let unchanged = draws.iter().filter(|s| s.x == sources[0].x).count();
    println!(
        "supervised no-op rate: {:.4} (expected 9/64 = {:.4})",
        unchanged as f64 / draws.len() as f64,
        9.0 / 64.0
    );

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws = augment_unlabeled(&single, &big, &mut rng)?;
    let unchanged = draws.iter().filter(|s| s.x == sources[0].x).count();
    println!(
        "unlabeled no-op rate:  {:.4} (expected 9/16 = {:.4})",
        unchanged as f64 / draws.len() as f64,
        9.0 / 16.0
    );
    Ok(())
}
