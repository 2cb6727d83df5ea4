//! Run configuration: a flat `key = value` text format with dotted section
//! keys. Unknown keys, duplicate keys and malformed values are errors that
//! cite the offending line.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::autodiff::{LossKind, OptimizerConfig};
use crate::data::{SplitCounts, SplitMode};
use crate::error::{Error, Result};
use crate::synthmask::CorruptionConfig;
use crate::training::{AugmentTarget, CurriculumSchedule, PhaseConfig};
use crate::unet::UNetConfig;

/// Where the input samples come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    /// Generated capsule benchmark: `count` samples of side `side`.
    Synthetic { count: usize, side: usize },
    /// 8-bit grayscale images in `image_dir`, masks with matching filenames
    /// in `mask_dir`.
    Directory {
        image_dir: PathBuf,
        mask_dir: Option<PathBuf>,
        /// Apply median background suppression to the loaded images.
        suppress_background: bool,
    },
}

/// Everything a run needs; the master seed determines every stochastic
/// choice.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split_counts: SplitCounts,
    pub split_mode: SplitMode,
    pub trainee: UNetConfig,
    pub referee: UNetConfig,
    pub reverse: UNetConfig,
    pub phase: PhaseConfig,
    pub curriculum: CurriculumSchedule,
    pub corruption: CorruptionConfig,
    pub optimizer: OptimizerConfig,
    pub augment: Option<(AugmentConfig, AugmentTarget)>,
    pub eval_seeds: usize,
    pub max_epochs: usize,
    pub referee_pairs_per_epoch: usize,
    pub referee_val_pairs: usize,
    pub gen_masks_count: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let side = 64;
        RunConfig {
            dataset: DatasetSource::Synthetic { count: 200, side },
            split_counts: SplitCounts {
                n_s_tr: 3,
                n_s_val: 1,
                n_u_tr: 100,
                n_u_val: 20,
                n_test: 50,
            },
            split_mode: SplitMode::Iid,
            trainee: UNetConfig::new(3, 5, 1, 1),
            referee: UNetConfig::new(3, 30, 1, 1),
            reverse: UNetConfig::new(3, 5, 1, 1),
            phase: PhaseConfig::default(),
            curriculum: CurriculumSchedule::default(),
            corruption: CorruptionConfig::for_side(side),
            optimizer: OptimizerConfig::default(),
            augment: None,
            eval_seeds: 5,
            max_epochs: 100_000,
            referee_pairs_per_epoch: 300,
            referee_val_pairs: 300,
            gen_masks_count: 300,
            seed: 42,
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Side length of the working images (synthetic side; directory datasets
    /// report their side after loading).
    pub fn synthetic_side(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Synthetic { side, .. } => Some(*side),
            DatasetSource::Directory { .. } => None,
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        let mut augment_enabled = false;
        let mut augment_cfg = AugmentConfig::default();
        let mut augment_target = AugmentTarget::SupervisedOnly;
        let mut corruption_set = false;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }

            let bad = |msg: String| Error::Config { line: line_no, msg };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| bad(format!("`{v}` is not a non-negative integer")))
            };
            let parse_f32 = |v: &str| {
                v.parse::<f32>()
                    .map_err(|_| bad(format!("`{v}` is not a number")))
            };
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("`{v}` is not a number")))
            };
            let parse_bool = |v: &str| match v {
                "true" | "yes" | "on" => Ok(true),
                "false" | "no" | "off" => Ok(false),
                _ => Err(bad(format!("`{v}` is not a boolean"))),
            };

            match key {
                "dataset.kind" => match value {
                    "synthetic" => {
                        if let DatasetSource::Directory { .. } = cfg.dataset {
                            cfg.dataset = DatasetSource::Synthetic {
                                count: 200,
                                side: 64,
                            };
                        }
                    }
                    "directory" => {
                        cfg.dataset = DatasetSource::Directory {
                            image_dir: PathBuf::new(),
                            mask_dir: None,
                            suppress_background: false,
                        }
                    }
                    _ => {
                        return Err(bad(format!(
                            "dataset.kind must be `synthetic` or `directory`, got `{value}`"
                        )))
                    }
                },
                "dataset.count" => {
                    let count = parse_usize(value)?;
                    match &mut cfg.dataset {
                        DatasetSource::Synthetic { count: c, .. } => *c = count,
                        _ => return Err(bad("dataset.count needs dataset.kind = synthetic".into())),
                    }
                }
                "dataset.side" => {
                    let side = parse_usize(value)?;
                    match &mut cfg.dataset {
                        DatasetSource::Synthetic { side: s, .. } => {
                            *s = side;
                            if !corruption_set {
                                cfg.corruption = CorruptionConfig::for_side(side);
                            }
                        }
                        _ => return Err(bad("dataset.side needs dataset.kind = synthetic".into())),
                    }
                }
                "dataset.image_dir" => match &mut cfg.dataset {
                    DatasetSource::Directory { image_dir, .. } => {
                        *image_dir = PathBuf::from(value)
                    }
                    _ => {
                        return Err(bad(
                            "dataset.image_dir needs dataset.kind = directory".into()
                        ))
                    }
                },
                "dataset.mask_dir" => match &mut cfg.dataset {
                    DatasetSource::Directory { mask_dir, .. } => {
                        *mask_dir = Some(PathBuf::from(value))
                    }
                    _ => {
                        return Err(bad("dataset.mask_dir needs dataset.kind = directory".into()))
                    }
                },
                "dataset.suppress_background" => match &mut cfg.dataset {
                    DatasetSource::Directory {
                        suppress_background,
                        ..
                    } => *suppress_background = parse_bool(value)?,
                    _ => {
                        return Err(bad(
                            "dataset.suppress_background needs dataset.kind = directory".into(),
                        ))
                    }
                },
                "split.mode" => match value {
                    "iid" => cfg.split_mode = SplitMode::Iid,
                    "centroid_region" => {
                        if !matches!(cfg.split_mode, SplitMode::CentroidRegion { .. }) {
                            cfg.split_mode = SplitMode::CentroidRegion {
                                test_region: 2,
                                labeled_region: 3,
                            };
                        }
                    }
                    _ => {
                        return Err(bad(format!(
                            "split.mode must be `iid` or `centroid_region`, got `{value}`"
                        )))
                    }
                },
                "split.test_region" | "split.labeled_region" => {
                    let region = parse_usize(value)? as u8;
                    if region > 3 {
                        return Err(bad("regions are 0..4 (2x2 grid)".into()));
                    }
                    let (mut t, mut l) = match cfg.split_mode {
                        SplitMode::CentroidRegion {
                            test_region,
                            labeled_region,
                        } => (test_region, labeled_region),
                        SplitMode::Iid => (2, 3),
                    };
                    if key == "split.test_region" {
                        t = region;
                    } else {
                        l = region;
                    }
                    cfg.split_mode = SplitMode::CentroidRegion {
                        test_region: t,
                        labeled_region: l,
                    };
                }
                "split.n_s_tr" => cfg.split_counts.n_s_tr = parse_usize(value)?,
                "split.n_s_val" => cfg.split_counts.n_s_val = parse_usize(value)?,
                "split.n_u_tr" => cfg.split_counts.n_u_tr = parse_usize(value)?,
                "split.n_u_val" => cfg.split_counts.n_u_val = parse_usize(value)?,
                "split.n_test" => cfg.split_counts.n_test = parse_usize(value)?,
                "trainee.depth" => cfg.trainee.depth = parse_usize(value)?,
                "trainee.base_filters" => cfg.trainee.base_filters = parse_usize(value)?,
                "referee.depth" => cfg.referee.depth = parse_usize(value)?,
                "referee.base_filters" => cfg.referee.base_filters = parse_usize(value)?,
                "reverse.depth" => cfg.reverse.depth = parse_usize(value)?,
                "reverse.base_filters" => cfg.reverse.base_filters = parse_usize(value)?,
                "phase.lambda_ae" => cfg.phase.lambda_ae = parse_f32(value)?,
                "phase.patience_pretrain" => cfg.phase.patience_pretrain = parse_usize(value)?,
                "phase.patience_main" => cfg.phase.patience_main = parse_usize(value)?,
                "phase.patience_referee" => cfg.phase.patience_referee = parse_usize(value)?,
                "phase.loss_kind" => {
                    cfg.phase.loss_kind = LossKind::parse(value)
                        .ok_or_else(|| bad(format!("unknown loss kind `{value}`")))?
                }
                "curriculum.start_fraction" => cfg.curriculum.start_fraction = parse_f64(value)?,
                "curriculum.increment" => cfg.curriculum.increment = parse_f64(value)?,
                "curriculum.steps" => cfg.curriculum.steps = parse_usize(value)?,
                "corruption.thickness_min" => {
                    cfg.corruption.thickness_min = parse_usize(value)?;
                    corruption_set = true;
                }
                "corruption.thickness_max" => {
                    cfg.corruption.thickness_max = parse_usize(value)?;
                    corruption_set = true;
                }
                "corruption.noise_sigma" => {
                    cfg.corruption.noise_sigma = parse_f32(value)?;
                    corruption_set = true;
                }
                "optimizer.learning_rate" => cfg.optimizer.learning_rate = parse_f32(value)?,
                "optimizer.discount" => cfg.optimizer.discount = parse_f32(value)?,
                "optimizer.epsilon" => cfg.optimizer.epsilon = parse_f32(value)?,
                "augment.enabled" => augment_enabled = parse_bool(value)?,
                "augment.target" => {
                    augment_target = match value {
                        "s_tr" => AugmentTarget::SupervisedOnly,
                        "s_tr_u_tr" => AugmentTarget::SupervisedAndUnlabeled,
                        _ => {
                            return Err(bad(format!(
                                "augment.target must be `s_tr` or `s_tr_u_tr`, got `{value}`"
                            )))
                        }
                    }
                }
                "augment.set_size" => augment_cfg.output_set_size = parse_usize(value)?,
                "eval.seeds" => cfg.eval_seeds = parse_usize(value)?,
                "train.max_epochs" => cfg.max_epochs = parse_usize(value)?,
                "referee.pairs_per_epoch" => cfg.referee_pairs_per_epoch = parse_usize(value)?,
                "referee.val_pairs" => cfg.referee_val_pairs = parse_usize(value)?,
                "gen_masks.count" => cfg.gen_masks_count = parse_usize(value)?,
                "seed" => {
                    cfg.seed = value
                        .parse::<u64>()
                        .map_err(|_| bad(format!("`{value}` is not a valid seed")))?
                }
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                _ => {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }

        if augment_enabled {
            cfg.augment = Some((augment_cfg, augment_target));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainee.validate()?;
        self.referee.validate()?;
        self.reverse.validate()?;
        self.phase.validate()?;
        self.curriculum.validate()?;
        self.optimizer.validate()?;
        if self.referee.in_channels != 1 || self.referee.out_channels != 1 {
            return Err(Error::Contract(
                "the referee must map 1 channel to 1 channel".into(),
            ));
        }
        if let DatasetSource::Synthetic { side, .. } = &self.dataset {
            self.corruption.validate(*side)?;
        }
        if self.eval_seeds == 0 {
            return Err(Error::Contract("eval.seeds must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trips_known_keys() {
        let text = "\
# demo configuration
dataset.kind = synthetic
dataset.count = 30
dataset.side = 64
split.n_s_tr = 2
split.n_u_tr = 10
split.n_u_val = 3
split.n_test = 6
phase.lambda_ae = 20
phase.loss_kind = dice
trainee.base_filters = 4
seed = 7
output_dir = runs/demo
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.split_counts.n_s_tr, 2);
        assert_eq!(cfg.phase.lambda_ae, 20.0);
        assert_eq!(cfg.phase.loss_kind, LossKind::Dice);
        assert_eq!(cfg.trainee.base_filters, 4);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/demo"));
        assert!(matches!(
            cfg.dataset,
            DatasetSource::Synthetic { count: 30, side: 64 }
        ));
    }

    #[test]
    fn unknown_key_error_cites_line_number() {
        let text = "seed = 1\nnot.a.key = 2\n";
        match RunConfig::parse(text) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("not.a.key"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_error_cites_line_number() {
        let text = "\n\nseed 1\n";
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = "seed = 1\nseed = 2\n";
        assert!(matches!(
            RunConfig::parse(text),
            Err(Error::Config { line: 2, .. })
        ));
    }

    #[test]
    fn augment_block_builds_a_plan() {
        let text = "augment.enabled = true\naugment.target = s_tr_u_tr\naugment.set_size = 50\n";
        let cfg = RunConfig::parse(text).unwrap();
        let (aug, target) = cfg.augment.unwrap();
        assert_eq!(aug.output_set_size, 50);
        assert_eq!(target, AugmentTarget::SupervisedAndUnlabeled);
    }

    #[test]
    fn centroid_regions_are_configurable() {
        let text = "split.mode = centroid_region\nsplit.test_region = 0\nsplit.labeled_region = 1\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(
            cfg.split_mode,
            SplitMode::CentroidRegion {
                test_region: 0,
                labeled_region: 1
            }
        );
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# full-line comment\n\nseed = 5 # trailing comment\n";
        assert_eq!(RunConfig::parse(text).unwrap().seed, 5);
    }
}
