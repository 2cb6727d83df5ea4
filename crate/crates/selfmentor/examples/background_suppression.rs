//! Median-image background suppression: builds a stack of frames sharing a
//! textured background with a moving bright object, recovers the background
//! pixelwise and writes the suppressed frames.
//!
//! ```sh
//! cargo run --release --example background_suppression
//! ```

use std::path::Path;

use selfmentor::data::suppress_background;
use selfmentor::img::Image;

fn main() -> selfmentor::Result<()> {
    let side = 64;
    // A fixed gradient-plus-stripes background.
    let background = Image::from_fn(side, side, |y, x| {
        0.3 + 0.2 * (y as f32 / side as f32) + if x % 8 == 0 { 0.1 } else { 0.0 }
    });
    // Nine frames, the object visiting a different spot in each.
    let frames: Vec<Image> = (0..9)
        .map(|k| {
            let cy = 8 + (k % 3) * 20;
            let cx = 8 + (k / 3) * 20;
            Image::from_fn(side, side, |y, x| {
                let dy = y as f32 - cy as f32;
                let dx = x as f32 - cx as f32;
                if dy * dy + dx * dx < 36.0 {
                    0.95
                } else {
                    background.get(y, x)
                }
            })
        })
        .collect();

    let (median, processed) = suppress_background(&frames)?;
    let recovered = median
        .data()
        .iter()
        .zip(background.data())
        .all(|(a, b)| (a - b).abs() < 1e-6);
    println!(
        "median recovers the background exactly: {}",
        if recovered { "yes" } else { "no" }
    );

    let out = Path::new("target/example-output/background_suppression");
    background.save_png(&out.join("background_true.png"))?;
    median.save_png(&out.join("background_median.png"))?;
    for (i, (frame, clean)) in frames.iter().zip(&processed).take(3).enumerate() {
        frame.save_png(&out.join(format!("frame_{i}.png")))?;
        clean.save_png(&out.join(format!("frame_{i}_suppressed.png")))?;
    }
    println!("frames and suppressed versions in {}", out.display());
    Ok(())
}
