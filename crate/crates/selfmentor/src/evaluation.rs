//! Jaccard-index metrics, the multi-seed evaluation protocol, and the
//! self-training and parameter-matched U-net baselines.

use rayon::prelude::*;

use crate::data::{DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::training::{pretrain_trainee, PhaseConfig, TrainOptions, TrainStats};
use crate::unet::{UNet, UNetConfig};

/// Jaccard index of a soft prediction against a binary mask, in percent.
/// The prediction is thresholded with `>=`; two empty masks agree perfectly
/// and score 100.
pub fn jaccard(y: &Image, y_hat_soft: &Image, threshold: f32) -> Result<f32> {
    if !y.same_size(y_hat_soft) {
        return Err(Error::Shape(format!(
            "jaccard: masks are {}x{} vs {}x{}",
            y.height(),
            y.width(),
            y_hat_soft.height(),
            y_hat_soft.width()
        )));
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (t, p) in y.data().iter().zip(y_hat_soft.data()) {
        let t = *t > 0.0;
        let p = *p >= threshold;
        if t && p {
            intersection += 1;
        }
        if t || p {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * intersection as f32 / union as f32)
}

/// Anything that maps an input image to a soft mask; the evaluation protocol
/// is generic over it.
pub trait Segmenter {
    fn predict_mask(&self, x: &Image) -> Result<Image>;
}

impl Segmenter for UNet {
    fn predict_mask(&self, x: &Image) -> Result<Image> {
        self.predict(x)
    }
}

/// Configuration echoed into evaluation reports.
#[derive(Debug, Clone, Copy)]
pub struct ConfigEcho {
    pub n_s_tr: usize,
    pub n_s_val: usize,
    pub lambda_ae: f32,
    pub loss_kind: crate::autodiff::LossKind,
}

impl ConfigEcho {
    pub fn from_bundle(bundle: &DatasetBundle, phase: &PhaseConfig) -> ConfigEcho {
        ConfigEcho {
            n_s_tr: bundle.s_tr.len(),
            n_s_val: bundle.s_val.len(),
            lambda_ae: phase.lambda_ae,
            loss_kind: phase.loss_kind,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub per_sample: Vec<f32>,
    pub mean: f32,
}

/// Per-seed and aggregate test Jaccard indices.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub echo: ConfigEcho,
    pub seeds: Vec<SeedResult>,
    pub grand_mean: f32,
}

impl EvalReport {
    /// Structured text form: `key: value` header lines plus a per-sample CSV
    /// block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n_s_tr: {}\n", self.echo.n_s_tr));
        out.push_str(&format!("n_s_val: {}\n", self.echo.n_s_val));
        out.push_str(&format!("lambda_ae: {}\n", self.echo.lambda_ae));
        out.push_str(&format!("loss_kind: {}\n", self.echo.loss_kind));
        out.push_str(&format!("seeds: {}\n", self.seeds.len()));
        for s in &self.seeds {
            out.push_str(&format!("mean_ji[seed={}]: {:.4}\n", s.seed, s.mean));
        }
        out.push_str(&format!("grand_mean_ji: {:.4}\n", self.grand_mean));
        out.push_str("samples:\n");
        out.push_str("seed,sample,ji\n");
        for s in &self.seeds {
            for (i, ji) in s.per_sample.iter().enumerate() {
                out.push_str(&format!("{},{},{:.4}\n", s.seed, i, ji));
            }
        }
        out
    }
}

/// Test Jaccard indices of one model over the test split.
pub fn test_jaccard<S: Segmenter>(model: &S, test: &[Sample]) -> Result<(Vec<f32>, f32)> {
    if test.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test set".into()));
    }
    let mut per_sample = Vec::with_capacity(test.len());
    for sample in test {
        let y = sample.y.as_ref().ok_or_else(|| {
            Error::Contract(format!("test sample {} has no mask", sample.id))
        })?;
        let pred = model.predict_mask(&sample.x)?;
        per_sample.push(jaccard(y, &pred, 0.5)?);
    }
    let mean = per_sample.iter().sum::<f32>() / per_sample.len() as f32;
    Ok((per_sample, mean))
}

/// Runs `factory` once per seed (in parallel), evaluates each model on the
/// test split and aggregates: the grand mean is the mean of per-seed means.
pub fn evaluate<S, F>(
    factory: F,
    bundle: &DatasetBundle,
    seeds: &[u64],
    echo: ConfigEcho,
) -> Result<EvalReport>
where
    S: Segmenter,
    F: Fn(u64) -> Result<S> + Sync,
{
    if bundle.test.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test set".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Contract("evaluation needs at least one seed".into()));
    }
    let seed_results: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedResult> {
            let model = factory(seed)?;
            let (per_sample, mean) = test_jaccard(&model, &bundle.test)?;
            Ok(SeedResult {
                seed,
                per_sample,
                mean,
            })
        })
        .collect::<Result<_>>()?;
    let grand_mean = seed_results.iter().map(|s| s.mean).sum::<f32>() / seed_results.len() as f32;
    Ok(EvalReport {
        echo,
        seeds: seed_results,
        grand_mean,
    })
}

#[derive(Debug, Clone)]
pub struct SelfTrainingStats {
    pub pseudo_labels: usize,
    pub teacher: TrainStats,
    pub student: TrainStats,
}

/// Self-training baseline: a teacher is pretrained on the labeled pairs,
/// pseudo-labels every unlabeled image (thresholded teacher output), and a
/// freshly initialized student trains on true plus pseudo pairs with early
/// stopping on true plus pseudo validation pairs.
pub fn self_training_baseline(
    bundle: &DatasetBundle,
    net_config: UNetConfig,
    phase: &PhaseConfig,
    opts: &mut TrainOptions,
    baseline_seed: u64,
) -> Result<(UNet, SelfTrainingStats)> {
    let mut teacher = UNet::build(net_config, crate::seed::derive(baseline_seed, "teacher"))?;
    let teacher_stats = pretrain_trainee(
        &mut teacher,
        &bundle.s_tr,
        &bundle.s_val,
        phase,
        opts,
        crate::seed::derive(baseline_seed, "teacher-fit"),
    )?;

    let pseudo = |samples: &[Sample], tag: &str| -> Result<Vec<Sample>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let soft = teacher.predict(&s.x)?;
                Ok(Sample::labeled(
                    format!("{}#{tag}{i}", s.id),
                    s.x.clone(),
                    soft.binarize(0.5),
                ))
            })
            .collect()
    };
    let pseudo_tr = pseudo(&bundle.u_tr, "pseudo-tr")?;
    let pseudo_val = pseudo(&bundle.u_val, "pseudo-val")?;
    let pseudo_labels = pseudo_tr.len() + pseudo_val.len();

    let mut train_pairs = bundle.s_tr.clone();
    train_pairs.extend(pseudo_tr);
    let mut val_pairs = bundle.s_val.clone();
    val_pairs.extend(pseudo_val);

    let mut student = UNet::build(net_config, crate::seed::derive(baseline_seed, "student"))?;
    let student_stats = pretrain_trainee(
        &mut student,
        &train_pairs,
        &val_pairs,
        phase,
        opts,
        crate::seed::derive(baseline_seed, "student-fit"),
    )?;

    Ok((
        student,
        SelfTrainingStats {
            pseudo_labels,
            teacher: teacher_stats,
            student: student_stats,
        },
    ))
}

/// Smallest base width whose depth-3 U-net reaches `target_params`
/// parameters.
pub fn smallest_filters_reaching(target_params: usize) -> usize {
    let mut f = 1usize;
    loop {
        if UNetConfig::new(3, f, 1, 1).param_count() >= target_params {
            return f;
        }
        f += 1;
    }
}

/// Parameter-matched baseline: standalone supervised training (the
/// pretraining procedure only) of the smallest depth-3 U-net with at least
/// `target_params` parameters.
pub fn large_unet_baseline(
    bundle: &DatasetBundle,
    target_params: usize,
    phase: &PhaseConfig,
    opts: &mut TrainOptions,
    baseline_seed: u64,
) -> Result<(UNet, usize, TrainStats)> {
    let filters = smallest_filters_reaching(target_params);
    let config = UNetConfig::new(3, filters, 1, 1);
    let mut net = UNet::build(config, crate::seed::derive(baseline_seed, "large-unet"))?;
    let stats = pretrain_trainee(
        &mut net,
        &bundle.s_tr,
        &bundle.s_val,
        phase,
        opts,
        crate::seed::derive(baseline_seed, "large-unet-fit"),
    )?;
    Ok((net, filters, stats))
}
