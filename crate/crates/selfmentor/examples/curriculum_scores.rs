//! Ranks unlabeled images by the curriculum usefulness score
//! `s(x) = -||rev(ref(tne(x))) - x||_1 / ||x||_1` and shows the expanding
//! 30% -> 100% selection schedule.
//!
//! ```sh
//! cargo run --release --example curriculum_scores
//! ```

use selfmentor::data::synth_capsule_dataset;
use selfmentor::img::Image;
use selfmentor::training::{curriculum_score, top_k_by_score, CurriculumSchedule};
use selfmentor::unet::{UNet, UNetConfig};

fn main() -> selfmentor::Result<()> {
    // Untrained nets already induce a usable ranking; training sharpens it.
    let trainee = UNet::build(UNetConfig::new(3, 4, 1, 1), 1)?;
    let referee = UNet::build(UNetConfig::new(3, 4, 1, 1), 2)?;
    let reverse = UNet::build(UNetConfig::new(3, 4, 1, 1), 3)?;

    let pool = synth_capsule_dataset(20, 64, 9)?;
    let mut scores = Vec::new();
    for sample in &pool {
        scores.push(curriculum_score(&trainee, &referee, &reverse, &sample.x)?);
    }
    println!("image scores (higher = scheduled earlier):");
    for (i, s) in scores.iter().enumerate() {
        println!("  {:>10} s = {s:8.4}", pool[i].id);
    }

    // An all-black image ranks last by construction.
    let black_score = curriculum_score(&trainee, &referee, &reverse, &Image::zeros(64, 64))?;
    println!("all-black image scores {black_score} and is scheduled last");

    let schedule = CurriculumSchedule::default();
    println!("schedule percents: {:?}", schedule.percents());
    for round in 0..schedule.rounds() {
        let k = schedule.active_count(round, pool.len());
        let active = top_k_by_score(&scores, k);
        println!("round {round:2}: {k:2} of {} images active: {active:?}", pool.len());
    }
    Ok(())
}
