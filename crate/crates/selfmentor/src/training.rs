//! The four-phase training protocol.
//!
//! 1. The referee learns to correct masks on freshly resampled synthetic
//!    corrupted/clean pairs.
//! 2. The trainee is pretrained on the few labeled pairs.
//! 3. The reverse net learns the mask-to-image mapping from the same pairs.
//! 4. The trainee alone keeps training against the frozen referee and
//!    reverse nets, with a consistency loss (the referee should have nothing
//!    to correct) and a reconstruction loss on unlabeled images, under a
//!    curriculum that grows the active unlabeled subset from 30% to 100%.
//!
//! Every phase uses early stopping on a validation loss and returns the best
//! snapshot, never the last.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_supervised, augment_unlabeled, AugmentConfig};
use crate::autodiff::{
    add, l1_norm, loss, mse_loss, no_grad, rmsprop_step, scale, sub, LossKind, OptimizerConfig,
    Tensor,
};
use crate::data::{DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::seed;
use crate::synthmask::{sample_pair_set, CorruptionConfig};
use crate::unet::UNet;

/// Per-phase hyperparameters. `loss_kind` applies to the supervised and
/// consistency terms; the reconstruction and referee losses are always MSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub lambda_ae: f32,
    pub patience_pretrain: usize,
    pub patience_main: usize,
    pub patience_referee: usize,
    pub loss_kind: LossKind,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            lambda_ae: 5.0,
            patience_pretrain: 20,
            patience_main: 40,
            patience_referee: 500,
            loss_kind: LossKind::Mse,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ae < 0.0 {
            return Err(Error::Contract(format!(
                "lambda_ae must be >= 0, got {}",
                self.lambda_ae
            )));
        }
        Ok(())
    }

    /// Reconstruction-loss weight that tends to work best for a given
    /// labeled-set size: (2, 20), (3, 5), (4, 100), (5, 20), (6, 5).
    pub fn recommended_lambda_ae(n_s_tr: usize) -> Option<f32> {
        match n_s_tr {
            2 => Some(20.0),
            3 => Some(5.0),
            4 => Some(100.0),
            5 => Some(20.0),
            6 => Some(5.0),
            _ => None,
        }
    }
}

/// The curriculum grows the active unlabeled subset from `start_fraction` by
/// `increment` per round over `steps` rounds, ending at the full set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumSchedule {
    pub start_fraction: f64,
    pub increment: f64,
    pub steps: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            start_fraction: 0.30,
            increment: 0.07,
            steps: 10,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_fraction > 0.0 && self.start_fraction <= 1.0) || self.increment < 0.0 {
            return Err(Error::Contract(format!(
                "curriculum fractions out of range: {self:?}"
            )));
        }
        let last = self.start_fraction + self.steps as f64 * self.increment;
        if (last - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "curriculum must end on the full set: start {} + {} * {} = {last}, expected 1.0",
                self.start_fraction, self.steps, self.increment
            )));
        }
        Ok(())
    }

    /// Number of rounds, including the initial one.
    pub fn rounds(&self) -> usize {
        self.steps + 1
    }

    /// Active percentage per round, e.g. 30, 37, ..., 100.
    pub fn percents(&self) -> Vec<u32> {
        (0..self.rounds())
            .map(|k| ((self.start_fraction + k as f64 * self.increment) * 100.0).round() as u32)
            .collect()
    }

    /// Active subset size in round `round` for a pool of `n` items
    /// (round-half-up, at least 1 for a non-empty pool).
    pub fn active_count(&self, round: usize, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let percent = ((self.start_fraction + round as f64 * self.increment) * 100.0).round();
        let count = ((percent as usize * n) + 50) / 100;
        count.clamp(1, n)
    }
}

/// Early stopping with strict-improvement patience.
///
/// The stopper keeps the best metric and its snapshot. It stops on the
/// observation made when `epochs_since_improvement` already equals
/// `patience`, i.e. after `patience + 1` consecutive non-improving
/// observations.
#[derive(Debug)]
pub struct EarlyStopper<S> {
    patience: usize,
    best_metric: f32,
    epochs_since_improvement: usize,
    best_snapshot: Option<S>,
    history: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

impl<S> EarlyStopper<S> {
    pub fn new(patience: usize) -> EarlyStopper<S> {
        EarlyStopper {
            patience,
            best_metric: f32::INFINITY,
            epochs_since_improvement: 0,
            best_snapshot: None,
            history: Vec::new(),
        }
    }

    /// Records one validation measurement. `snapshot` is only invoked on
    /// improvement.
    pub fn observe(&mut self, metric: f32, snapshot: impl FnOnce() -> S) -> Decision {
        self.history.push(metric);
        if metric < self.best_metric {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
            self.best_snapshot = Some(snapshot());
            Decision::Continue
        } else if self.epochs_since_improvement == self.patience {
            Decision::Stop
        } else {
            self.epochs_since_improvement += 1;
            Decision::Continue
        }
    }

    pub fn best_metric(&self) -> f32 {
        self.best_metric
    }

    pub fn best_snapshot(&self) -> Option<&S> {
        self.best_snapshot.as_ref()
    }

    pub fn into_best(self) -> Option<(f32, S)> {
        self.best_snapshot.map(|s| (self.best_metric, s))
    }

    pub fn history(&self) -> &[f32] {
        &self.history
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }
}

/// One line of the metrics log. Loss fields not meaningful for a phase are
/// zero.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub phase: &'static str,
    pub round: usize,
    pub epoch: usize,
    pub l_sup: f32,
    pub l_cons: f32,
    pub l_ae: f32,
    pub l_val: f32,
    pub wall_ms: u128,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "phase={} round={} epoch={} l_sup={:.6} l_cons={:.6} l_ae={:.6} l_val={:.6} wall_ms={}",
            self.phase,
            self.round,
            self.epoch,
            self.l_sup,
            self.l_cons,
            self.l_ae,
            self.l_val,
            self.wall_ms
        )
    }
}

pub trait MetricsSink {
    fn record(&mut self, record: &EpochRecord);
}

/// Collects records in memory; handy in tests.
#[derive(Default)]
pub struct VecSink(pub Vec<EpochRecord>);

impl MetricsSink for VecSink {
    fn record(&mut self, record: &EpochRecord) {
        self.0.push(record.clone());
    }
}

/// Appends one line per record to any writer.
pub struct LineSink<W: std::io::Write>(pub W);

impl<W: std::io::Write> MetricsSink for LineSink<W> {
    fn record(&mut self, record: &EpochRecord) {
        let _ = writeln!(self.0, "{}", record.to_line());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentTarget {
    SupervisedOnly,
    SupervisedAndUnlabeled,
}

/// Data augmentation wiring for the training phases. Sets are renewed from
/// the plan's stream at every epoch; validation sets are never augmented.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    pub config: AugmentConfig,
    pub target: AugmentTarget,
    pub seed: u64,
}

/// Knobs shared by all phases: the optimizer, an epoch cap per early-stopped
/// loop, optional augmentation, optional metrics sink, and the synthetic set
/// sizes used by referee training.
pub struct TrainOptions<'a> {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    pub augment: Option<AugmentPlan>,
    pub sink: Option<&'a mut dyn MetricsSink>,
    pub referee_pairs_per_epoch: usize,
    pub referee_val_pairs: usize,
}

impl<'a> TrainOptions<'a> {
    pub fn new() -> TrainOptions<'a> {
        TrainOptions {
            optimizer: OptimizerConfig::default(),
            max_epochs: 100_000,
            augment: None,
            sink: None,
            referee_pairs_per_epoch: 300,
            referee_val_pairs: 300,
        }
    }
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions::new()
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epochs: usize,
    pub restarts: usize,
    pub best_val: f32,
    pub val_history: Vec<f32>,
}

fn record(
    opts: &mut TrainOptions,
    phase: &'static str,
    round: usize,
    epoch: usize,
    losses: (f32, f32, f32),
    l_val: f32,
    started: Instant,
) {
    if let Some(sink) = opts.sink.as_deref_mut() {
        sink.record(&EpochRecord {
            phase,
            round,
            epoch,
            l_sup: losses.0,
            l_cons: losses.1,
            l_ae: losses.2,
            l_val,
            wall_ms: started.elapsed().as_millis(),
        });
    }
}

// ---------------------------------------------------------------------------
// Phase 1: referee
// ---------------------------------------------------------------------------

/// Trains the referee on synthetic pairs: every epoch resamples a fresh
/// training set, a fixed synthetic validation set drives early stopping with
/// `patience_referee`, and the best-validation snapshot is restored into the
/// net on return.
pub fn train_referee(
    referee: &mut UNet,
    side: usize,
    corruption: &CorruptionConfig,
    phase: &PhaseConfig,
    opts: &mut TrainOptions,
    train_seed: u64,
) -> Result<TrainStats> {
    phase.validate()?;
    opts.optimizer.validate()?;
    let cfg = referee.config();
    if cfg.in_channels != 1 || cfg.out_channels != 1 {
        return Err(Error::Contract(format!(
            "referee must map 1 channel to 1 channel, got {} -> {}",
            cfg.in_channels, cfg.out_channels
        )));
    }

    let val_pairs = sample_pair_set(
        opts.referee_val_pairs,
        side,
        corruption,
        seed::derive(train_seed, "referee-val"),
    )?;
    let params = referee.params();
    let mut stopper: EarlyStopper<Vec<Vec<f32>>> = EarlyStopper::new(phase.patience_referee);
    let mut epochs = 0usize;

    for epoch in 1..=opts.max_epochs {
        let started = Instant::now();
        epochs = epoch;
        let train_pairs = sample_pair_set(
            opts.referee_pairs_per_epoch,
            side,
            corruption,
            seed::derive_indexed(seed::derive(train_seed, "referee-epoch"), epoch as u64),
        )?;
        let mut train_loss = 0.0f32;
        for pair in &train_pairs {
            let pred = referee.forward(&pair.corrupted.to_tensor())?;
            let l = mse_loss(&pred, &pair.clean.to_tensor())?;
            train_loss += l.item();
            l.backward()?;
            rmsprop_step(&params, &opts.optimizer);
        }

        let val_loss = no_grad(|| -> Result<f32> {
            let mut total = 0.0f32;
            for pair in &val_pairs {
                let pred = referee.forward(&pair.corrupted.to_tensor())?;
                total += mse_loss(&pred, &pair.clean.to_tensor())?.item();
            }
            Ok(total)
        })?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "referee validation loss became {val_loss} at epoch {epoch}"
            )));
        }
        record(
            opts,
            "referee",
            0,
            epoch,
            (train_loss, 0.0, 0.0),
            val_loss,
            started,
        );
        if stopper.observe(val_loss, || referee.snapshot()) == Decision::Stop {
            break;
        }
    }

    let history = stopper.history().to_vec();
    let (best_val, snapshot) = stopper.into_best().expect("at least one epoch observed");
    referee.restore(&snapshot);
    referee.clear_grads();
    Ok(TrainStats {
        epochs,
        restarts: 0,
        best_val,
        val_history: history,
    })
}

// ---------------------------------------------------------------------------
// Phases 2 and 3: supervised fits
// ---------------------------------------------------------------------------

/// Epochs after which a non-MSE pretraining run is restarted when the
/// training loss has not decreased.
const STALL_CHECK_EPOCHS: usize = 5;
const MAX_RESTARTS: usize = 10;

struct SupervisedFit<'a> {
    phase_name: &'static str,
    loss_kind: LossKind,
    patience: usize,
    /// Train on (y, x) instead of (x, y); used by the reverse net.
    swap_xy: bool,
    /// Reinitialize after a stalled start (non-MSE losses only).
    restart_on_stall: bool,
    train_pairs: &'a [Sample],
    val_pairs: &'a [Sample],
    fit_seed: u64,
}

impl SupervisedFit<'_> {
    fn pair_of<'s>(&self, sample: &'s Sample) -> Result<(&'s Image, &'s Image)> {
        let y = sample.y.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "sample {} has no mask for supervised fit",
                sample.id
            ))
        })?;
        Ok(if self.swap_xy {
            (y, &sample.x)
        } else {
            (&sample.x, y)
        })
    }

    fn set_loss(&self, net: &UNet, pairs: &[Sample]) -> Result<f32> {
        no_grad(|| {
            let mut total = 0.0f32;
            for sample in pairs {
                let (input, target) = self.pair_of(sample)?;
                let pred = net.forward(&input.to_tensor())?;
                total += loss(&pred, &target.to_tensor(), self.loss_kind)?.item();
            }
            Ok(total)
        })
    }

    fn run(&self, net: &mut UNet, opts: &mut TrainOptions) -> Result<TrainStats> {
        if self.train_pairs.is_empty() {
            return Err(Error::Contract(format!(
                "{} needs a non-empty training set",
                self.phase_name
            )));
        }
        if self.val_pairs.is_empty() {
            return Err(Error::Contract(format!(
                "{} needs a non-empty validation set for early stopping",
                self.phase_name
            )));
        }
        opts.optimizer.validate()?;

        let mut restarts = 0usize;
        loop {
            match self.run_once(net, opts, restarts)? {
                FitOutcome::Done(stats) => return Ok(TrainStats { restarts, ..stats }),
                FitOutcome::Stalled => {
                    restarts += 1;
                    if restarts > MAX_RESTARTS {
                        return Err(Error::Diverged(format!(
                            "{}: training stalled after {MAX_RESTARTS} restarts",
                            self.phase_name
                        )));
                    }
                    let reseed = seed::derive(
                        self.fit_seed,
                        &format!("{}-restart{restarts}", self.phase_name),
                    );
                    *net = UNet::build(*net.config(), reseed)?;
                }
            }
        }
    }

    fn run_once(
        &self,
        net: &mut UNet,
        opts: &mut TrainOptions,
        attempt: usize,
    ) -> Result<FitOutcome> {
        let params = net.params();
        let mut stopper: EarlyStopper<Vec<Vec<f32>>> = EarlyStopper::new(self.patience);
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed::derive(
            self.fit_seed,
            &format!("{}-order{attempt}", self.phase_name),
        ));
        let mut aug_rng = opts.augment.as_ref().map(|plan| {
            ChaCha8Rng::seed_from_u64(seed::derive(
                plan.seed,
                &format!("{}-da{attempt}", self.phase_name),
            ))
        });
        let check_stall = self.restart_on_stall && self.loss_kind != LossKind::Mse;
        let initial_train_loss = if check_stall {
            self.set_loss(net, self.train_pairs)?
        } else {
            0.0
        };

        let mut epochs = 0usize;
        for epoch in 1..=opts.max_epochs {
            let started = Instant::now();
            epochs = epoch;
            let epoch_set: Vec<Sample> = match (&opts.augment, &mut aug_rng) {
                (Some(plan), Some(rng)) => augment_supervised(self.train_pairs, &plan.config, rng)?,
                _ => self.train_pairs.to_vec(),
            };
            let mut order: Vec<usize> = (0..epoch_set.len()).collect();
            order.shuffle(&mut order_rng);

            let mut train_loss = 0.0f32;
            for idx in order {
                let (input, target) = self.pair_of(&epoch_set[idx])?;
                let pred = net.forward(&input.to_tensor())?;
                let l = loss(&pred, &target.to_tensor(), self.loss_kind)?;
                train_loss += l.item();
                l.backward()?;
                rmsprop_step(&params, &opts.optimizer);
            }

            let val_loss = self.set_loss(net, self.val_pairs)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} validation loss became {val_loss} at epoch {epoch}",
                    self.phase_name
                )));
            }
            record(
                opts,
                self.phase_name,
                0,
                epoch,
                (train_loss, 0.0, 0.0),
                val_loss,
                started,
            );

            if check_stall && epoch == STALL_CHECK_EPOCHS {
                let now = self.set_loss(net, self.train_pairs)?;
                if now >= initial_train_loss {
                    return Ok(FitOutcome::Stalled);
                }
            }

            if stopper.observe(val_loss, || net.snapshot()) == Decision::Stop {
                break;
            }
        }

        let history = stopper.history().to_vec();
        let (best_val, snapshot) = stopper.into_best().expect("at least one epoch observed");
        net.restore(&snapshot);
        net.clear_grads();
        Ok(FitOutcome::Done(TrainStats {
            epochs,
            restarts: 0,
            best_val,
            val_history: history,
        }))
    }
}

enum FitOutcome {
    Done(TrainStats),
    Stalled,
}

/// Phase 2: minimizes the supervised loss over the labeled training pairs
/// with early stopping (`patience_pretrain`) on the labeled validation loss.
/// With a non-MSE loss, a run whose training loss has not decreased after 5
/// epochs is reinitialized and retried.
pub fn pretrain_trainee(
    trainee: &mut UNet,
    s_tr: &[Sample],
    s_val: &[Sample],
    phase: &PhaseConfig,
    opts: &mut TrainOptions,
    fit_seed: u64,
) -> Result<TrainStats> {
    phase.validate()?;
    SupervisedFit {
        phase_name: "pretrain",
        loss_kind: phase.loss_kind,
        patience: phase.patience_pretrain,
        swap_xy: false,
        restart_on_stall: true,
        train_pairs: s_tr,
        val_pairs: s_val,
        fit_seed,
    }
    .run(trainee, opts)
}

/// Phase 3: trains the reverse net on the same pairs with inputs and outputs
/// swapped; always MSE.
pub fn train_reverse(
    reverse: &mut UNet,
    s_tr: &[Sample],
    s_val: &[Sample],
    phase: &PhaseConfig,
    opts: &mut TrainOptions,
    fit_seed: u64,
) -> Result<TrainStats> {
    phase.validate()?;
    SupervisedFit {
        phase_name: "reverse",
        loss_kind: LossKind::Mse,
        patience: phase.patience_pretrain,
        swap_xy: true,
        restart_on_stall: false,
        train_pairs: s_tr,
        val_pairs: s_val,
        fit_seed,
    }
    .run(reverse, opts)
}

// ---------------------------------------------------------------------------
// Phase 4: joint losses, curriculum, main loop
// ---------------------------------------------------------------------------

/// The phase-4 loss terms for one image, as live graph tensors: consistency
/// `||ref(tne(x)) - tne(x)||^2`, reconstruction `||rev(ref(tne(x))) - x||^2`,
/// the supervised term when a mask is given, and
/// `total = l_sup + l_cons + lambda_ae * l_ae` (consistency weight fixed to
/// one).
pub struct Phase4Losses {
    pub l_sup: Option<Tensor>,
    pub l_cons: Tensor,
    pub l_ae: Tensor,
    pub total: Tensor,
}

impl Phase4Losses {
    pub fn values(&self) -> (Option<f32>, f32, f32, f32) {
        (
            self.l_sup.as_ref().map(Tensor::item),
            self.l_cons.item(),
            self.l_ae.item(),
            self.total.item(),
        )
    }
}

/// Builds the phase-4 losses for one image. The referee and reverse nets are
/// expected to be frozen by the caller; gradients still flow through them to
/// the trainee.
pub fn phase4_losses(
    trainee: &UNet,
    referee: &UNet,
    reverse: &UNet,
    x: &Image,
    y: Option<&Image>,
    phase: &PhaseConfig,
) -> Result<Phase4Losses> {
    let xt = x.to_tensor();
    let t = trainee.forward(&xt)?;
    let r = referee.forward(&t)?;
    let a = reverse.forward(&r)?;
    // Trainee output as prediction, referee correction as target.
    let l_cons = loss(&t, &r, phase.loss_kind)?;
    let l_ae = mse_loss(&a, &xt)?;
    let mut total = add(&l_cons, &scale(&l_ae, phase.lambda_ae))?;
    let l_sup = match y {
        Some(mask) => {
            let l = loss(&t, &mask.to_tensor(), phase.loss_kind)?;
            total = add(&l, &total)?;
            Some(l)
        }
        None => None,
    };
    Ok(Phase4Losses {
        l_sup,
        l_cons,
        l_ae,
        total,
    })
}

/// Curriculum usefulness score `s(x) = -||rev(ref(tne(x))) - x||_1 / ||x||_1`
/// (never positive; perfect reconstruction scores 0). An all-black image
/// scores negative infinity and thus ranks last.
pub fn curriculum_score(trainee: &UNet, referee: &UNet, reverse: &UNet, x: &Image) -> Result<f32> {
    no_grad(|| {
        let xt = x.to_tensor();
        let denom = l1_norm(&xt);
        if denom == 0.0 {
            return Ok(f32::NEG_INFINITY);
        }
        let t = trainee.forward(&xt)?;
        let r = referee.forward(&t)?;
        let a = reverse.forward(&r)?;
        let err = sub(&a, &xt)?;
        Ok(-(l1_norm(&err) / denom))
    })
}

/// Indices of the `k` highest scores, ties broken by lower index; returned in
/// ascending index order.
pub fn top_k_by_score(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone)]
pub struct RoundStats {
    pub round: usize,
    pub percent: u32,
    /// Scores of every unlabeled training image at round start.
    pub scores: Vec<f32>,
    /// Active subset (indices into the unlabeled training set).
    pub active: Vec<usize>,
    pub epochs: usize,
    pub best_l_val: f32,
}

#[derive(Debug, Clone)]
pub struct MainPhaseStats {
    pub rounds: Vec<RoundStats>,
    pub best_l_val: f32,
    pub best_round: usize,
}

enum StepItem {
    Labeled(usize),
    Unlabeled(usize),
}

/// Phase 4. Each round rescores the unlabeled pool, trains on the top
/// fraction plus all labeled pairs, early-stops on
/// `L_val = L_sup(S_val) + L_cons(U_val) + L_ae(U_val)` with
/// `patience_main`, then continues from the round's best snapshot. The
/// trainee ends at the snapshot with the lowest validation loss seen across
/// all rounds. Referee and reverse parameters stay bitwise untouched.
#[allow(clippy::too_many_arguments)]
pub fn main_phase(
    trainee: &mut UNet,
    referee: &UNet,
    reverse: &UNet,
    bundle: &DatasetBundle,
    phase: &PhaseConfig,
    schedule: &CurriculumSchedule,
    opts: &mut TrainOptions,
    phase_seed: u64,
) -> Result<MainPhaseStats> {
    phase.validate()?;
    schedule.validate()?;
    opts.optimizer.validate()?;
    referee.set_trainable(false);
    reverse.set_trainable(false);
    let result = main_phase_inner(
        trainee, referee, reverse, bundle, phase, schedule, opts, phase_seed,
    );
    referee.set_trainable(true);
    reverse.set_trainable(true);
    result
}

#[allow(clippy::too_many_arguments)]
fn main_phase_inner(
    trainee: &mut UNet,
    referee: &UNet,
    reverse: &UNet,
    bundle: &DatasetBundle,
    phase: &PhaseConfig,
    schedule: &CurriculumSchedule,
    opts: &mut TrainOptions,
    phase_seed: u64,
) -> Result<MainPhaseStats> {
    let params = trainee.params();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed::derive(phase_seed, "main-order"));
    let mut aug_rng = opts
        .augment
        .as_ref()
        .map(|plan| ChaCha8Rng::seed_from_u64(seed::derive(plan.seed, "main-da")));

    let mut rounds: Vec<RoundStats> = Vec::with_capacity(schedule.rounds());
    let mut global_best: Option<(f32, Vec<Vec<f32>>, usize)> = None;

    for round in 0..schedule.rounds() {
        let scores: Vec<f32> = bundle
            .u_tr
            .iter()
            .map(|s| curriculum_score(trainee, referee, reverse, &s.x))
            .collect::<Result<_>>()?;
        let k = schedule.active_count(round, bundle.u_tr.len());
        let active = top_k_by_score(&scores, k);
        let percent = schedule.percents()[round];

        let mut stopper: EarlyStopper<Vec<Vec<f32>>> = EarlyStopper::new(phase.patience_main);
        let mut epochs = 0usize;
        for epoch in 1..=opts.max_epochs {
            let started = Instant::now();
            epochs = epoch;

            // Assemble this epoch's step list: all labeled pairs plus the
            // active unlabeled subset, optionally renewed through the
            // augmentation generator, in shuffled order.
            let (labeled, unlabeled): (Vec<Sample>, Vec<Sample>) =
                match (&opts.augment, &mut aug_rng) {
                    (Some(plan), Some(rng)) => {
                        let labeled = augment_supervised(&bundle.s_tr, &plan.config, rng)?;
                        let unlabeled = match plan.target {
                            AugmentTarget::SupervisedAndUnlabeled if !active.is_empty() => {
                                let sources: Vec<Sample> =
                                    active.iter().map(|i| bundle.u_tr[*i].clone()).collect();
                                augment_unlabeled(&sources, &plan.config, rng)?
                            }
                            _ => active.iter().map(|i| bundle.u_tr[*i].clone()).collect(),
                        };
                        (labeled, unlabeled)
                    }
                    _ => (
                        bundle.s_tr.to_vec(),
                        active.iter().map(|i| bundle.u_tr[*i].clone()).collect(),
                    ),
                };
            let mut items: Vec<StepItem> = (0..labeled.len())
                .map(StepItem::Labeled)
                .chain((0..unlabeled.len()).map(StepItem::Unlabeled))
                .collect();
            items.shuffle(&mut order_rng);

            for item in items {
                match item {
                    StepItem::Labeled(i) => {
                        let sample = &labeled[i];
                        let y = sample.y.as_ref().ok_or_else(|| {
                            Error::Contract(format!("labeled sample {} has no mask", sample.id))
                        })?;
                        let pred = trainee.forward(&sample.x.to_tensor())?;
                        let l = loss(&pred, &y.to_tensor(), phase.loss_kind)?;
                        l.backward()?;
                    }
                    StepItem::Unlabeled(i) => {
                        let losses = phase4_losses(
                            trainee,
                            referee,
                            reverse,
                            &unlabeled[i].x,
                            None,
                            phase,
                        )?;
                        losses.total.backward()?;
                    }
                }
                rmsprop_step(&params, &opts.optimizer);
            }

            let (sup, cons, ae) = phase4_validation(trainee, referee, reverse, bundle, phase)?;
            let l_val = sup + cons + ae;
            if !l_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "main phase validation loss became {l_val} in round {round}, epoch {epoch}"
                )));
            }
            record(opts, "main", round, epoch, (sup, cons, ae), l_val, started);
            if stopper.observe(l_val, || trainee.snapshot()) == Decision::Stop {
                break;
            }
        }

        let (best_l_val, snapshot) = stopper.into_best().expect("epoch observed");
        // Continue the next round from this round's best model.
        trainee.restore(&snapshot);
        trainee.clear_grads();
        let better = global_best
            .as_ref()
            .map(|(best, _, _)| best_l_val < *best)
            .unwrap_or(true);
        if better {
            global_best = Some((best_l_val, snapshot, round));
        }
        rounds.push(RoundStats {
            round,
            percent,
            scores,
            active,
            epochs,
            best_l_val,
        });
    }

    let (best_l_val, snapshot, best_round) = global_best.expect("at least one round");
    trainee.restore(&snapshot);
    Ok(MainPhaseStats {
        rounds,
        best_l_val,
        best_round,
    })
}

/// Validation sums for phase 4: supervised loss over the labeled validation
/// set, consistency and reconstruction losses over the unlabeled one
/// (unweighted, as tracked for model selection).
pub fn phase4_validation(
    trainee: &UNet,
    referee: &UNet,
    reverse: &UNet,
    bundle: &DatasetBundle,
    phase: &PhaseConfig,
) -> Result<(f32, f32, f32)> {
    no_grad(|| {
        let mut sup = 0.0f32;
        for sample in &bundle.s_val {
            let y = sample.y.as_ref().ok_or_else(|| {
                Error::Contract(format!("validation sample {} has no mask", sample.id))
            })?;
            let pred = trainee.forward(&sample.x.to_tensor())?;
            sup += loss(&pred, &y.to_tensor(), phase.loss_kind)?.item();
        }
        let mut cons = 0.0f32;
        let mut ae = 0.0f32;
        for sample in &bundle.u_val {
            let xt = sample.x.to_tensor();
            let t = trainee.forward(&xt)?;
            let r = referee.forward(&t)?;
            let a = reverse.forward(&r)?;
            cons += loss(&t, &r, phase.loss_kind)?.item();
            ae += mse_loss(&a, &xt)?.item();
        }
        Ok((sup, cons, ae))
    })
}
