//! Command orchestration: runs the training phases from a [`RunConfig`],
//! writing checkpoints, metrics logs, predicted masks and evaluation reports
//! under the configured output directory.
//!
//! Artifact layout under `output_dir`:
//!
//! ```text
//! checkpoints/referee.ckpt             phase 1
//! checkpoints/trainee_pretrained.ckpt  phase 2
//! checkpoints/reverse.ckpt             phase 3
//! checkpoints/trainee_final.ckpt       phase 4
//! checkpoints/self_trained.ckpt        self-training baseline
//! bundle.manifest                      split membership
//! metrics.log                          one line per epoch
//! masks/                               predicted/true test masks (PNG)
//! mask_pairs/                          synthetic referee pairs (PNG)
//! augment_preview/                     before/after augmentation (PNG)
//! eval_report.txt                      evaluation report
//! self_train_report.txt                baseline report
//! ```

use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::{DatasetSource, RunConfig};
use crate::data::{self, DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{self, ConfigEcho};
use crate::img::Image;
use crate::seed;
use crate::synthmask;
use crate::training::{self, AugmentPlan, LineSink, MetricsSink, TrainOptions};
use crate::unet::{checkpoint, UNet};

/// Writes `bytes` to `path` atomically: a temp file in the same directory is
/// renamed into place, so interrupted runs never leave truncated artifacts.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenMasks,
    TrainReferee,
    PretrainTrainee,
    TrainReverse,
    TrainMain,
    SelfTrainBaseline,
    Evaluate,
    FullPipeline,
    AugmentPreview,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenMasks => "gen-masks",
            Command::TrainReferee => "train-referee",
            Command::PretrainTrainee => "pretrain-trainee",
            Command::TrainReverse => "train-reverse",
            Command::TrainMain => "train-main",
            Command::SelfTrainBaseline => "self-train-baseline",
            Command::Evaluate => "evaluate",
            Command::FullPipeline => "full-pipeline",
            Command::AugmentPreview => "augment-preview",
        }
    }
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn referee(&self) -> PathBuf {
        self.checkpoint("referee")
    }

    fn trainee_pretrained(&self) -> PathBuf {
        self.checkpoint("trainee_pretrained")
    }

    fn reverse(&self) -> PathBuf {
        self.checkpoint("reverse")
    }

    fn trainee_final(&self) -> PathBuf {
        self.checkpoint("trainee_final")
    }

    fn self_trained(&self) -> PathBuf {
        self.checkpoint("self_trained")
    }

    fn metrics(&self) -> PathBuf {
        self.root.join("metrics.log")
    }

    fn manifest(&self) -> PathBuf {
        self.root.join("bundle.manifest")
    }

    fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.txt")
    }

    fn self_train_report(&self) -> PathBuf {
        self.root.join("self_train_report.txt")
    }
}

/// Runs one command against a configuration. Errors carry their CLI exit
/// code via [`Error::exit_code`].
pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths {
        root: cfg.output_dir.clone(),
    };
    std::fs::create_dir_all(&paths.root)?;
    match command {
        Command::GenMasks => gen_masks(cfg, &paths),
        Command::TrainReferee => train_referee_cmd(cfg, &paths),
        Command::PretrainTrainee => pretrain_trainee_cmd(cfg, &paths),
        Command::TrainReverse => train_reverse_cmd(cfg, &paths),
        Command::TrainMain => train_main_cmd(cfg, &paths),
        Command::SelfTrainBaseline => self_train_cmd(cfg, &paths),
        Command::Evaluate => evaluate_cmd(cfg, &paths),
        Command::FullPipeline => full_pipeline_cmd(cfg, &paths),
        Command::AugmentPreview => augment_preview_cmd(cfg, &paths),
    }
}

/// Loads or generates the working samples.
fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.dataset {
        DatasetSource::Synthetic { count, side } => {
            data::synth_capsule_dataset(*count, *side, seed::derive(cfg.seed, "dataset"))
        }
        DatasetSource::Directory {
            image_dir,
            mask_dir,
            suppress_background,
        } => {
            let mut samples = data::load_directory(image_dir, mask_dir.as_deref())?;
            if *suppress_background {
                let images: Vec<Image> = samples.iter().map(|s| s.x.clone()).collect();
                let (_, processed) = data::suppress_background(&images)?;
                for (s, p) in samples.iter_mut().zip(processed) {
                    s.x = p;
                }
            }
            Ok(samples)
        }
    }
}

fn make_bundle(cfg: &RunConfig, paths: &Paths) -> Result<DatasetBundle> {
    let samples = load_samples(cfg)?;
    let bundle = data::split(
        &samples,
        &cfg.split_counts,
        &cfg.split_mode,
        seed::derive(cfg.seed, "split"),
    )?;
    bundle.write_manifest(&paths.manifest())?;
    Ok(bundle)
}

fn bundle_side(bundle: &DatasetBundle) -> Result<usize> {
    let first = bundle
        .s_tr
        .first()
        .or_else(|| bundle.test.first())
        .ok_or_else(|| Error::Contract("bundle holds no samples".into()))?;
    if first.x.height() != first.x.width() {
        return Err(Error::Contract(format!(
            "working images must be square, got {}x{}",
            first.x.height(),
            first.x.width()
        )));
    }
    Ok(first.x.height())
}

fn metrics_sink(paths: &Paths) -> Result<LineSink<BufWriter<std::fs::File>>> {
    std::fs::create_dir_all(&paths.root)?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(paths.metrics())?;
    Ok(LineSink(BufWriter::new(file)))
}

fn train_options<'a>(cfg: &RunConfig, sink: &'a mut dyn MetricsSink) -> TrainOptions<'a> {
    let mut opts = TrainOptions::new();
    opts.optimizer = cfg.optimizer;
    opts.max_epochs = cfg.max_epochs;
    opts.referee_pairs_per_epoch = cfg.referee_pairs_per_epoch;
    opts.referee_val_pairs = cfg.referee_val_pairs;
    opts.augment = cfg.augment.map(|(config, target)| AugmentPlan {
        config,
        target,
        seed: seed::derive(cfg.seed, "augment"),
    });
    opts.sink = Some(sink);
    opts
}

fn require_checkpoint(path: &Path, produced_by: &str) -> Result<UNet> {
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "{} is missing; run `{produced_by}` first",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn gen_masks(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let side = match cfg.synthetic_side() {
        Some(side) => side,
        None => {
            let bundle = make_bundle(cfg, paths)?;
            bundle_side(&bundle)?
        }
    };
    let pairs = synthmask::sample_pair_set(
        cfg.gen_masks_count,
        side,
        &cfg.corruption,
        seed::derive(cfg.seed, "gen-masks"),
    )?;
    let dir = paths.root.join("mask_pairs");
    for (i, pair) in pairs.iter().enumerate() {
        pair.clean.save_png(&dir.join(format!("pair_{i:05}_clean.png")))?;
        pair.corrupted
            .save_png(&dir.join(format!("pair_{i:05}_corrupted.png")))?;
    }
    println!(
        "wrote {} mask pairs to {}",
        pairs.len(),
        dir.display()
    );
    Ok(())
}

fn train_referee_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let side = match cfg.synthetic_side() {
        Some(side) => side,
        None => {
            let bundle = make_bundle(cfg, paths)?;
            bundle_side(&bundle)?
        }
    };
    let mut referee = UNet::build(cfg.referee, seed::derive(cfg.seed, "referee-init"))?;
    let mut sink = metrics_sink(paths)?;
    let mut opts = train_options(cfg, &mut sink);
    let stats = training::train_referee(
        &mut referee,
        side,
        &cfg.corruption,
        &cfg.phase,
        &mut opts,
        seed::derive(cfg.seed, "referee-train"),
    )?;
    checkpoint::save(&referee, &paths.referee())?;
    println!(
        "referee trained: {} epochs, best validation loss {:.4} -> {}",
        stats.epochs,
        stats.best_val,
        paths.referee().display()
    );
    Ok(())
}

fn pretrain_trainee_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let bundle = make_bundle(cfg, paths)?;
    let mut trainee = UNet::build(cfg.trainee, seed::derive(cfg.seed, "trainee-init"))?;
    let mut sink = metrics_sink(paths)?;
    let mut opts = train_options(cfg, &mut sink);
    let stats = training::pretrain_trainee(
        &mut trainee,
        &bundle.s_tr,
        &bundle.s_val,
        &cfg.phase,
        &mut opts,
        seed::derive(cfg.seed, "trainee-fit"),
    )?;
    checkpoint::save(&trainee, &paths.trainee_pretrained())?;
    println!(
        "trainee pretrained: {} epochs ({} restarts), best validation loss {:.4} -> {}",
        stats.epochs,
        stats.restarts,
        stats.best_val,
        paths.trainee_pretrained().display()
    );
    Ok(())
}

fn train_reverse_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let bundle = make_bundle(cfg, paths)?;
    let mut reverse = UNet::build(cfg.reverse, seed::derive(cfg.seed, "reverse-init"))?;
    let mut sink = metrics_sink(paths)?;
    let mut opts = train_options(cfg, &mut sink);
    let stats = training::train_reverse(
        &mut reverse,
        &bundle.s_tr,
        &bundle.s_val,
        &cfg.phase,
        &mut opts,
        seed::derive(cfg.seed, "reverse-fit"),
    )?;
    checkpoint::save(&reverse, &paths.reverse())?;
    println!(
        "reverse net trained: {} epochs, best validation loss {:.4} -> {}",
        stats.epochs,
        stats.best_val,
        paths.reverse().display()
    );
    Ok(())
}

fn train_main_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let referee = require_checkpoint(&paths.referee(), "train-referee")?;
    let mut trainee = require_checkpoint(&paths.trainee_pretrained(), "pretrain-trainee")?;
    let reverse = require_checkpoint(&paths.reverse(), "train-reverse")?;
    let bundle = make_bundle(cfg, paths)?;
    let mut sink = metrics_sink(paths)?;
    let mut opts = train_options(cfg, &mut sink);
    let stats = training::main_phase(
        &mut trainee,
        &referee,
        &reverse,
        &bundle,
        &cfg.phase,
        &cfg.curriculum,
        &mut opts,
        seed::derive(cfg.seed, "main-phase"),
    )?;
    checkpoint::save(&trainee, &paths.trainee_final())?;
    println!(
        "main phase done: best validation loss {:.4} from round {} -> {}",
        stats.best_l_val,
        stats.best_round,
        paths.trainee_final().display()
    );
    Ok(())
}

fn self_train_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let bundle = make_bundle(cfg, paths)?;
    let mut sink = metrics_sink(paths)?;
    let mut opts = train_options(cfg, &mut sink);
    let (student, stats) = evaluation::self_training_baseline(
        &bundle,
        cfg.trainee,
        &cfg.phase,
        &mut opts,
        seed::derive(cfg.seed, "self-train"),
    )?;
    checkpoint::save(&student, &paths.self_trained())?;
    let (_, mean) = evaluation::test_jaccard(&student, &bundle.test)?;
    let report = format!(
        "pseudo_labels: {}\nteacher_epochs: {}\nstudent_epochs: {}\nmean_test_ji: {mean:.4}\n",
        stats.pseudo_labels, stats.teacher.epochs, stats.student.epochs
    );
    write_atomic(&paths.self_train_report(), report.as_bytes())?;
    println!(
        "self-training baseline: mean test JI {mean:.2}% -> {}",
        paths.self_trained().display()
    );
    Ok(())
}

fn dump_test_masks(model: &UNet, bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    for (i, sample) in bundle.test.iter().enumerate() {
        let pred = model.predict(&sample.x)?;
        pred.save_png(&dir.join(format!("test_{i:04}_pred.png")))?;
        if let Some(y) = &sample.y {
            y.save_png(&dir.join(format!("test_{i:04}_true.png")))?;
        }
    }
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let final_path = paths.trainee_final();
    if !final_path.exists() {
        return Err(Error::Prerequisite(format!(
            "{} is missing; run `train-main` first",
            final_path.display()
        )));
    }
    let bundle = make_bundle(cfg, paths)?;
    let echo = ConfigEcho::from_bundle(&bundle, &cfg.phase);
    let report = evaluation::evaluate(
        |_seed| checkpoint::load(&final_path),
        &bundle,
        &[cfg.seed],
        echo,
    )?;
    write_atomic(&paths.eval_report(), report.to_text().as_bytes())?;
    let model = checkpoint::load(&final_path)?;
    dump_test_masks(&model, &bundle, &paths.root.join("masks"))?;
    println!(
        "evaluation: mean test JI {:.2}% -> {}",
        report.grand_mean,
        paths.eval_report().display()
    );
    Ok(())
}

/// Trains phases 2-4 for one evaluation seed against a shared referee and
/// returns the final trainee. The first seed's checkpoints become the run's
/// canonical artifacts.
fn train_one_seed(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    referee: &UNet,
    eval_seed: u64,
) -> Result<(UNet, UNet, UNet)> {
    let mut opts = train_options_silent(cfg);
    let mut trainee = UNet::build(cfg.trainee, seed::derive(eval_seed, "trainee-init"))?;
    training::pretrain_trainee(
        &mut trainee,
        &bundle.s_tr,
        &bundle.s_val,
        &cfg.phase,
        &mut opts,
        seed::derive(eval_seed, "trainee-fit"),
    )?;
    let pretrained = checkpoint::from_bytes(&checkpoint::to_bytes(&trainee))?;

    let mut reverse = UNet::build(cfg.reverse, seed::derive(eval_seed, "reverse-init"))?;
    training::train_reverse(
        &mut reverse,
        &bundle.s_tr,
        &bundle.s_val,
        &cfg.phase,
        &mut opts,
        seed::derive(eval_seed, "reverse-fit"),
    )?;

    training::main_phase(
        &mut trainee,
        referee,
        &reverse,
        bundle,
        &cfg.phase,
        &cfg.curriculum,
        &mut opts,
        seed::derive(eval_seed, "main-phase"),
    )?;
    Ok((trainee, pretrained, reverse))
}

/// Options without a metrics sink, for parallel per-seed training.
fn train_options_silent(cfg: &RunConfig) -> TrainOptions<'static> {
    let mut opts = TrainOptions::new();
    opts.optimizer = cfg.optimizer;
    opts.max_epochs = cfg.max_epochs;
    opts.referee_pairs_per_epoch = cfg.referee_pairs_per_epoch;
    opts.referee_val_pairs = cfg.referee_val_pairs;
    opts.augment = cfg.augment.map(|(config, target)| AugmentPlan {
        config,
        target,
        seed: seed::derive(cfg.seed, "augment"),
    });
    opts
}

fn full_pipeline_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let bundle = make_bundle(cfg, paths)?;
    let side = bundle_side(&bundle)?;

    // Phase 1 once; the same referee serves every evaluation seed.
    let mut referee = UNet::build(cfg.referee, seed::derive(cfg.seed, "referee-init"))?;
    {
        let mut sink = metrics_sink(paths)?;
        let mut opts = train_options(cfg, &mut sink);
        training::train_referee(
            &mut referee,
            side,
            &cfg.corruption,
            &cfg.phase,
            &mut opts,
            seed::derive(cfg.seed, "referee-train"),
        )?;
    }
    checkpoint::save(&referee, &paths.referee())?;

    let eval_seeds: Vec<u64> = (0..cfg.eval_seeds)
        .map(|k| seed::derive_indexed(seed::derive(cfg.seed, "eval-seed"), k as u64))
        .collect();
    let echo = ConfigEcho::from_bundle(&bundle, &cfg.phase);
    let referee_bytes = checkpoint::to_bytes(&referee);
    // The first seed's nets become the run's canonical checkpoints; they are
    // smuggled out of the worker thread as bytes.
    type NetBytes = (Vec<u8>, Vec<u8>, Vec<u8>);
    let first_seed_nets: std::sync::Mutex<Option<NetBytes>> = std::sync::Mutex::new(None);
    let first_seed = eval_seeds[0];
    let report = evaluation::evaluate(
        |eval_seed| {
            let referee = checkpoint::from_bytes(&referee_bytes)?;
            let (trainee, pretrained, reverse) =
                train_one_seed(cfg, &bundle, &referee, eval_seed)?;
            if eval_seed == first_seed {
                *first_seed_nets.lock().expect("poisoned") = Some((
                    checkpoint::to_bytes(&trainee),
                    checkpoint::to_bytes(&pretrained),
                    checkpoint::to_bytes(&reverse),
                ));
            }
            Ok(trainee)
        },
        &bundle,
        &eval_seeds,
        echo,
    )?;
    write_atomic(&paths.eval_report(), report.to_text().as_bytes())?;

    let (final_bytes, pretrained_bytes, reverse_bytes) = first_seed_nets
        .into_inner()
        .expect("poisoned")
        .expect("first seed evaluated");
    write_atomic(&paths.trainee_pretrained(), &pretrained_bytes)?;
    write_atomic(&paths.reverse(), &reverse_bytes)?;
    write_atomic(&paths.trainee_final(), &final_bytes)?;
    let final_trainee = checkpoint::from_bytes(&final_bytes)?;
    dump_test_masks(&final_trainee, &bundle, &paths.root.join("masks"))?;
    println!(
        "full pipeline: grand mean test JI {:.2}% over {} seed(s) -> {}",
        report.grand_mean,
        eval_seeds.len(),
        paths.eval_report().display()
    );
    Ok(())
}

fn augment_preview_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    use rand::SeedableRng;
    let bundle = make_bundle(cfg, paths)?;
    let aug_cfg = cfg
        .augment
        .map(|(c, _)| c)
        .unwrap_or_default();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "augment-preview"));
    let preview_cfg = crate::augment::AugmentConfig {
        output_set_size: 16.min(aug_cfg.output_set_size.max(1)),
        ..aug_cfg
    };
    let augmented = crate::augment::augment_supervised(&bundle.s_tr, &preview_cfg, &mut rng)?;
    let dir = paths.root.join("augment_preview");
    for (i, s) in bundle.s_tr.iter().enumerate() {
        s.x.save_png(&dir.join(format!("source_{i:02}.png")))?;
        if let Some(y) = &s.y {
            y.save_png(&dir.join(format!("source_{i:02}_mask.png")))?;
        }
    }
    for (i, s) in augmented.iter().enumerate() {
        s.x.save_png(&dir.join(format!("augmented_{i:02}.png")))?;
        if let Some(y) = &s.y {
            y.save_png(&dir.join(format!("augmented_{i:02}_mask.png")))?;
        }
    }
    println!(
        "wrote {} augmented previews to {}",
        augmented.len(),
        dir.display()
    );
    Ok(())
}
