//! Strategy zoo: the reference learners that the multi-mode method is
//! compared against, plus the task-feed interface that keeps sequential
//! strategies honest about data access.
//!
//! Every strategy is a [`TaskLearner`] driven one task at a time through a
//! [`TaskFeed`]. The feed enforces the access policy: sequential learners can
//! only read the current task, and any attempt to touch earlier data is a
//! hard error, not a silent fallback. Multi-task training is the one learner
//! fed with a cumulative policy, by definition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{drift_distance, evaluate_accuracy, AccuracyMatrix, DriftTrace, Predictor};
use crate::mota::{
    anchored_step, batch_items, estimate_fisher, initialize_task1, update_parameters,
    BacktrackConfig, CheckpointSelection, ModeSet, ModeTrainConfig,
};
use crate::nn::{backward, GradSet, LabelMask, NetworkSpec, ParamSet, TensorLike};
use crate::seeding::SeedCtx;
use crate::stream::{self, ShiftKind, TaskData, TaskDataset, TaskStream};

/// Initializer seed tag derived from the architecture alone, so strategies
/// sharing a network shape also share their starting parameters.
pub fn arch_tag(spec: &NetworkSpec) -> u64 {
    let mut parts = vec![
        spec.input_dim as u64,
        spec.output_dim as u64,
        match spec.activation {
            crate::nn::Activation::Relu => 1,
            crate::nn::Activation::Tanh => 2,
        },
    ];
    parts.extend(spec.hidden_dims.iter().map(|&h| h as u64));
    crate::seeding::derive(&parts)
}

/// Coordinates the Fisher estimate reports as exactly zero (dead units)
/// would drift without bound under any penalty weight; the sequential
/// regularized learner floors the diagonal at this value.
pub const FISHER_FLOOR: f64 = 1e-6;

// ───────────────────────── strategy names ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleTask,
    NaiveSequential,
    MultiTask,
    Ewc,
    EnsembleDistmax,
    EnsembleSeeds,
    Mota,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::SingleTask,
        Strategy::NaiveSequential,
        Strategy::MultiTask,
        Strategy::Ewc,
        Strategy::EnsembleDistmax,
        Strategy::EnsembleSeeds,
        Strategy::Mota,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SingleTask => "single_task",
            Strategy::NaiveSequential => "naive_sequential",
            Strategy::MultiTask => "multi_task",
            Strategy::Ewc => "ewc",
            Strategy::EnsembleDistmax => "ensemble_distmax",
            Strategy::EnsembleSeeds => "ensemble_seeds",
            Strategy::Mota => "mota",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

// ───────────────────────── task feed ─────────────────────────

/// What a learner may read while working on the current task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessPolicy {
    /// Only the current task's data; everything else errors.
    CurrentOnly,
    /// Tasks 1 through the current one; the multi-task exception.
    CumulativeUpTo,
}

/// The data interface handed to a learner for one task step. All reads go
/// through [`TaskFeed::task`], which enforces the policy.
pub struct TaskFeed<'a> {
    stream: &'a TaskStream,
    current: usize,
    policy: AccessPolicy,
}

impl<'a> TaskFeed<'a> {
    pub fn new(stream: &'a TaskStream, current: usize, policy: AccessPolicy) -> Result<TaskFeed<'a>> {
        if current == 0 || current > stream.num_tasks() {
            return Err(Error::Index(format!(
                "current task {current} out of range 1..={}",
                stream.num_tasks()
            )));
        }
        Ok(TaskFeed { stream, current, policy })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn num_tasks(&self) -> usize {
        self.stream.num_tasks()
    }

    pub fn num_classes(&self) -> usize {
        self.stream.num_classes
    }

    pub fn kind(&self) -> ShiftKind {
        self.stream.kind
    }

    /// Reads task `v`, subject to the feed's policy.
    pub fn task(&self, v: usize) -> Result<&'a TaskData> {
        let allowed = match self.policy {
            AccessPolicy::CurrentOnly => v == self.current,
            AccessPolicy::CumulativeUpTo => v >= 1 && v <= self.current,
        };
        if !allowed {
            return Err(Error::DataAccess(format!(
                "strategy requested task {v} while learning task {} under {:?}",
                self.current, self.policy
            )));
        }
        self.stream.task(v)
    }
}

/// Label mask for training or evaluating against task `v`: the task's label
/// set under task-incremental shift, no mask otherwise.
pub fn task_mask(stream: &TaskStream, v: usize) -> Result<Option<LabelMask>> {
    match stream.kind {
        ShiftKind::TaskIl => Ok(Some(LabelMask::from_labels(
            &stream.task(v)?.label_set,
            stream.num_classes,
        )?)),
        ShiftKind::InstanceIl | ShiftKind::DomainIl => Ok(None),
    }
}

fn feed_mask(feed: &TaskFeed<'_>, v: usize) -> Result<Option<LabelMask>> {
    match feed.kind() {
        ShiftKind::TaskIl => {
            Ok(Some(LabelMask::from_labels(&feed.task(v)?.label_set, feed.num_classes())?))
        }
        ShiftKind::InstanceIl | ShiftKind::DomainIl => Ok(None),
    }
}

// ───────────────────────── learner trait ─────────────────────────

/// One end-of-epoch parameter snapshot, tagged for trajectory export.
#[derive(Debug, Clone)]
pub struct EpochSnapshot {
    pub task: usize,
    pub epoch: usize,
    pub mode_index: usize,
    pub params: ParamSet,
}

/// A continual-learning strategy, driven one task at a time.
pub trait TaskLearner {
    /// Predictor before any task has been seen.
    fn init_predictor(&self) -> Result<Predictor>;

    /// Consumes `feed.current()`; all data reads go through the feed.
    fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()>;

    /// Predictor after the most recently learned task.
    fn predictor(&self) -> Result<Predictor>;

    /// Backtracking record for the last learned task, when the strategy has
    /// one.
    fn take_selection(&mut self) -> Option<CheckpointSelection> {
        None
    }

    /// Epoch snapshots captured during the last learned task; empty unless
    /// capture was requested.
    fn take_epoch_trail(&mut self) -> Vec<EpochSnapshot> {
        Vec::new()
    }

    /// True when a divergence guard cut any task's training short.
    fn stopped_early(&self) -> bool {
        false
    }
}

// ───────────────────────── run settings and results ─────────────────────────

/// Everything a strategy needs besides the stream and the seed context.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub base_spec: NetworkSpec,
    pub mode_spec: NetworkSpec,
    /// Mode count for the multi-mode strategy.
    pub num_modes: usize,
    pub beta_max: f64,
    pub beta_min: f64,
    pub ewc_lambda: f64,
    /// Mode count for both ensemble variants.
    pub ensemble_modes: usize,
    pub train: ModeTrainConfig,
    pub backtrack: BacktrackConfig,
    /// Record per-epoch parameter snapshots for trajectory export.
    pub capture_epochs: bool,
}

/// The capacity-fairness rule: a mode layout may not exceed the single
/// network's parameter budget.
pub fn check_capacity_fairness(base: &NetworkSpec, mode: &NetworkSpec, num_modes: usize) -> Result<()> {
    let single = base.param_count();
    let multi = num_modes * mode.param_count();
    if multi > single {
        return Err(Error::Config(format!(
            "capacity fairness violated: {num_modes} modes x {} params = {multi} > single network {single}",
            mode.param_count()
        )));
    }
    Ok(())
}

/// Everything recorded about one (strategy, stream, seed) execution.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub matrix: AccuracyMatrix,
    /// End-of-task predictors, one per task.
    pub snapshots: Vec<Predictor>,
    pub init: Predictor,
    pub drift: DriftTrace,
    /// Mean-over-transitions, summed-over-modes parameter movement; absent
    /// for single-task streams.
    pub drift_raw: Option<f64>,
    pub capacity_params: usize,
    /// Per adapted task, in task order; empty for strategies without
    /// backtracking.
    pub selections: Vec<CheckpointSelection>,
    pub epoch_trail: Vec<EpochSnapshot>,
    pub stopped_early: bool,
}

fn predictor_modes(p: &Predictor) -> Vec<&ParamSet> {
    match p {
        Predictor::Single(s) => vec![s],
        Predictor::Modes(m) => m.iter().collect(),
    }
}

/// Runs a learner across the whole stream and assembles the evaluation
/// record: accuracy matrix on the test splits, drift trace, snapshots.
pub fn drive_learner(
    strategy: Strategy,
    learner: &mut dyn TaskLearner,
    stream: &TaskStream,
    policy: AccessPolicy,
) -> Result<StrategyRun> {
    let t_count = stream.num_tasks();
    let init = learner.init_predictor()?;
    let mut snapshots = Vec::with_capacity(t_count);
    let mut selections = Vec::new();
    let mut epoch_trail = Vec::new();
    let mut stopped_early = false;

    for t in 1..=t_count {
        let feed = TaskFeed::new(stream, t, policy)?;
        learner.learn_task(&feed)?;
        snapshots.push(learner.predictor()?);
        if let Some(sel) = learner.take_selection() {
            selections.push(sel);
        }
        epoch_trail.extend(learner.take_epoch_trail());
        stopped_early |= learner.stopped_early();
    }

    let masks: Vec<Option<LabelMask>> =
        (1..=t_count).map(|v| task_mask(stream, v)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(t_count);
    for t in 1..=t_count {
        let mut row = Vec::with_capacity(t);
        for v in 1..=t {
            row.push(evaluate_accuracy(&snapshots[t - 1], &stream.task(v)?.test, masks[v - 1].as_ref())?);
        }
        rows.push(row);
    }
    let init_row = (1..=t_count)
        .map(|v| evaluate_accuracy(&init, &stream.task(v)?.test, masks[v - 1].as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let next_task = (2..=t_count)
        .map(|v| evaluate_accuracy(&snapshots[v - 2], &stream.task(v)?.test, masks[v - 1].as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let matrix = AccuracyMatrix::new(rows, init_row, next_task)?;

    let mut distances = Vec::with_capacity(t_count.saturating_sub(1));
    for t in 2..=t_count {
        let prev = predictor_modes(&snapshots[t - 2]);
        let curr = predictor_modes(&snapshots[t - 1]);
        if prev.len() != curr.len() {
            return Err(Error::State(format!(
                "mode count changed between tasks {} and {t}",
                t - 1
            )));
        }
        let row = prev
            .iter()
            .zip(&curr)
            .map(|(a, b)| drift_distance(b, a))
            .collect::<Result<Vec<_>>>()?;
        distances.push(row);
    }
    let drift = DriftTrace { distances };
    let drift_raw = if drift.distances.is_empty() {
        None
    } else {
        Some(crate::metrics::average_task_drift(&drift)?)
    };
    let capacity_params = snapshots
        .last()
        .map(Predictor::param_count)
        .unwrap_or_else(|| init.param_count());

    Ok(StrategyRun {
        strategy,
        matrix,
        snapshots,
        init,
        drift,
        drift_raw,
        capacity_params,
        selections,
        epoch_trail,
        stopped_early,
    })
}

/// Builds and drives the named strategy. The one entry point the runner
/// needs.
pub fn run_strategy(
    strategy: Strategy,
    stream: &TaskStream,
    settings: &RunSettings,
    ctx: &SeedCtx,
) -> Result<StrategyRun> {
    match strategy {
        Strategy::SingleTask => {
            let mut l = SingleTaskLearner::new(settings, ctx);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CurrentOnly)
        }
        Strategy::NaiveSequential => {
            let mut l = SequentialLearner::new(settings, ctx, 0.0);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CurrentOnly)
        }
        Strategy::MultiTask => {
            let mut l = MultiTaskLearner::new(settings, ctx);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CumulativeUpTo)
        }
        Strategy::Ewc => {
            let mut l = SequentialLearner::new(settings, ctx, settings.ewc_lambda);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CurrentOnly)
        }
        Strategy::EnsembleDistmax => {
            let mut l = EnsembleLearner::new(settings, ctx, EnsembleInit::SharedSpread);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CurrentOnly)
        }
        Strategy::EnsembleSeeds => {
            let mut l = EnsembleLearner::new(settings, ctx, EnsembleInit::PerSeed);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CurrentOnly)
        }
        Strategy::Mota => {
            let mut l = MotaLearner::new(settings, ctx);
            drive_learner(strategy, &mut l, stream, AccessPolicy::CurrentOnly)
        }
    }
}

// ───────────────────────── shared training loops ─────────────────────────

/// Result of one single-network training pass over one task.
struct PassResult {
    params: ParamSet,
    /// Parameters after each completed epoch, `epoch_snaps[e]` for epoch
    /// `e+1`.
    epoch_snaps: Vec<ParamSet>,
    stopped: bool,
}

/// Plain or anchored gradient descent over one task's training split.
///
/// `penalty` carries `(anchor, fisher, lambda)`; `lambda = 0` or no penalty
/// takes bit-identical plain steps. `mode_tag` keeps batch orders distinct
/// between ensemble members. Non-finite parameters or a numeric failure
/// revert the partial epoch and stop the pass.
fn train_one_net(
    start: &ParamSet,
    penalty: Option<(&ParamSet, &GradSet, f64)>,
    train: &TaskDataset,
    mask: Option<&LabelMask>,
    task: usize,
    mode_tag: u64,
    cfg: &ModeTrainConfig,
    ctx: &SeedCtx,
    capture: bool,
) -> Result<PassResult> {
    if train.samples.is_empty() {
        return Err(Error::Argument(format!("task {task} training data is empty")));
    }
    let n = train.samples.len();
    let mut params = start.clone();
    let mut epoch_snaps = Vec::new();
    let mut stopped = false;
    'outer: for epoch in 0..cfg.epochs {
        let epoch_start = params.clone();
        let batches = stream::batch_indices(n, cfg.batch_size, ctx.batch_seed(task as u64, epoch as u64, mode_tag))?;
        for batch in &batches {
            let items = batch_items(&train.samples, batch, mask, None);
            let stepped = backward(&params, &items).and_then(|(_, g)| match penalty {
                Some((anchor, fisher, lambda)) => anchored_step(&params, &g, anchor, fisher, lambda, cfg.lr),
                None => crate::nn::optimizer_step(&params, &g, cfg.lr),
            });
            match stepped {
                Ok(next) if next.is_finite() => params = next,
                Ok(_) => {
                    log::warn!("task {task} training diverged in epoch {epoch}; reverting the partial epoch");
                    params = epoch_start;
                    stopped = true;
                    break 'outer;
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!(
                        "task {task} training hit a numeric failure in epoch {epoch} ({msg}); \
                         reverting the partial epoch"
                    );
                    params = epoch_start;
                    stopped = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        if capture {
            epoch_snaps.push(params.clone());
        }
    }
    Ok(PassResult { params, epoch_snaps, stopped })
}

/// Gradient descent on the union of several tasks' training splits, with
/// per-sample label masks. Used by multi-task training.
fn train_union(
    start: &ParamSet,
    parts: &[(&TaskDataset, Option<LabelMask>)],
    task: usize,
    cfg: &ModeTrainConfig,
    ctx: &SeedCtx,
    capture: bool,
) -> Result<PassResult> {
    let total: usize = parts.iter().map(|(d, _)| d.samples.len()).sum();
    if total == 0 {
        return Err(Error::Argument("union training data is empty".into()));
    }
    // Flat view: (task part, sample index within the part).
    let mut index: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (p, (d, _)) in parts.iter().enumerate() {
        for s in 0..d.samples.len() {
            index.push((p, s));
        }
    }
    let mut params = start.clone();
    let mut epoch_snaps = Vec::new();
    let mut stopped = false;
    'outer: for epoch in 0..cfg.epochs {
        let epoch_start = params.clone();
        let batches = stream::batch_indices(total, cfg.batch_size, ctx.batch_seed(task as u64, epoch as u64, 0))?;
        for batch in &batches {
            let items: Vec<crate::nn::TrainItem<'_>> = batch
                .iter()
                .map(|&k| {
                    let (p, s) = index[k];
                    let (d, m) = &parts[p];
                    crate::nn::TrainItem {
                        x: &d.samples[s].x,
                        y: d.samples[s].y,
                        mask: m.as_ref(),
                        prob_override: None,
                    }
                })
                .collect();
            let stepped = backward(&params, &items)
                .and_then(|(_, g)| crate::nn::optimizer_step(&params, &g, cfg.lr));
            match stepped {
                Ok(next) if next.is_finite() => params = next,
                Ok(_) => {
                    log::warn!("union training diverged in epoch {epoch}; reverting the partial epoch");
                    params = epoch_start;
                    stopped = true;
                    break 'outer;
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!(
                        "union training hit a numeric failure in epoch {epoch} ({msg}); \
                         reverting the partial epoch"
                    );
                    params = epoch_start;
                    stopped = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        if capture {
            epoch_snaps.push(params.clone());
        }
    }
    Ok(PassResult { params, epoch_snaps, stopped })
}

fn snaps_to_trail(task: usize, mode_index: usize, snaps: Vec<ParamSet>) -> Vec<EpochSnapshot> {
    snaps
        .into_iter()
        .enumerate()
        .map(|(e, params)| EpochSnapshot { task, epoch: e + 1, mode_index, params })
        .collect()
}

// ───────────────────────── single-network learners ─────────────────────────

/// Trains a fresh copy of the shared initializer on each task alone.
struct SingleTaskLearner {
    init: ParamSet,
    cfg: ModeTrainConfig,
    ctx: SeedCtx,
    capture: bool,
    current: Option<ParamSet>,
    trail: Vec<EpochSnapshot>,
    stopped: bool,
}

impl SingleTaskLearner {
    fn new(settings: &RunSettings, ctx: &SeedCtx) -> SingleTaskLearner {
        SingleTaskLearner {
            init: ParamSet::xavier_init(&settings.base_spec, ctx.init_seed(arch_tag(&settings.base_spec))),
            cfg: settings.train,
            ctx: *ctx,
            capture: settings.capture_epochs,
            current: None,
            trail: Vec::new(),
            stopped: false,
        }
    }
}

impl TaskLearner for SingleTaskLearner {
    fn init_predictor(&self) -> Result<Predictor> {
        Ok(Predictor::Single(self.init.clone()))
    }

    fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()> {
        let t = feed.current();
        let data = feed.task(t)?;
        let mask = feed_mask(feed, t)?;
        let pass = train_one_net(&self.init, None, &data.train, mask.as_ref(), t, 0, &self.cfg, &self.ctx, self.capture)?;
        self.stopped |= pass.stopped;
        self.trail = snaps_to_trail(t, 0, pass.epoch_snaps);
        self.current = Some(pass.params);
        Ok(())
    }

    fn predictor(&self) -> Result<Predictor> {
        self.current
            .clone()
            .map(Predictor::Single)
            .ok_or_else(|| Error::State("no task learned yet".into()))
    }

    fn take_epoch_trail(&mut self) -> Vec<EpochSnapshot> {
        std::mem::take(&mut self.trail)
    }

    fn stopped_early(&self) -> bool {
        self.stopped
    }
}

/// Sequential training on one network. `lambda = 0` is the naive baseline;
/// `lambda > 0` adds the diagonal-Fisher quadratic penalty toward the
/// previous task's parameters, refreshing the Fisher estimate after each
/// task.
struct SequentialLearner {
    params: ParamSet,
    lambda: f64,
    anchor: Option<(ParamSet, GradSet)>,
    cfg: ModeTrainConfig,
    ctx: SeedCtx,
    capture: bool,
    init: ParamSet,
    learned_any: bool,
    trail: Vec<EpochSnapshot>,
    stopped: bool,
}

impl SequentialLearner {
    fn new(settings: &RunSettings, ctx: &SeedCtx, lambda: f64) -> SequentialLearner {
        let init = ParamSet::xavier_init(&settings.base_spec, ctx.init_seed(arch_tag(&settings.base_spec)));
        SequentialLearner {
            params: init.clone(),
            lambda,
            anchor: None,
            cfg: settings.train,
            ctx: *ctx,
            capture: settings.capture_epochs,
            init,
            learned_any: false,
            trail: Vec::new(),
            stopped: false,
        }
    }
}

impl TaskLearner for SequentialLearner {
    fn init_predictor(&self) -> Result<Predictor> {
        Ok(Predictor::Single(self.init.clone()))
    }

    fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()> {
        let t = feed.current();
        let data = feed.task(t)?;
        let mask = feed_mask(feed, t)?;
        let penalty = self
            .anchor
            .as_ref()
            .filter(|_| self.lambda != 0.0)
            .map(|(a, f)| (a, f, self.lambda));
        let pass = train_one_net(&self.params, penalty, &data.train, mask.as_ref(), t, 0, &self.cfg, &self.ctx, self.capture)?;
        self.stopped |= pass.stopped;
        self.trail = snaps_to_trail(t, 0, pass.epoch_snaps);
        self.params = pass.params;
        self.learned_any = true;
        if self.lambda != 0.0 {
            let mut fisher =
                estimate_fisher(&self.params, &data.train.samples, None, self.cfg.fisher_samples)?;
            for f in fisher.data_mut() {
                *f = f.max(FISHER_FLOOR);
            }
            self.anchor = Some((self.params.clone(), fisher));
        }
        Ok(())
    }

    fn predictor(&self) -> Result<Predictor> {
        if !self.learned_any {
            return Err(Error::State("no task learned yet".into()));
        }
        Ok(Predictor::Single(self.params.clone()))
    }

    fn take_epoch_trail(&mut self) -> Vec<EpochSnapshot> {
        std::mem::take(&mut self.trail)
    }

    fn stopped_early(&self) -> bool {
        self.stopped
    }
}

/// Retrains a fresh network on the union of all tasks seen so far. The final
/// stage is the joint reference that the trade-off report measures against.
struct MultiTaskLearner {
    init: ParamSet,
    cfg: ModeTrainConfig,
    ctx: SeedCtx,
    capture: bool,
    current: Option<ParamSet>,
    trail: Vec<EpochSnapshot>,
    stopped: bool,
}

impl MultiTaskLearner {
    fn new(settings: &RunSettings, ctx: &SeedCtx) -> MultiTaskLearner {
        MultiTaskLearner {
            init: ParamSet::xavier_init(&settings.base_spec, ctx.init_seed(arch_tag(&settings.base_spec))),
            cfg: settings.train,
            ctx: *ctx,
            capture: settings.capture_epochs,
            current: None,
            trail: Vec::new(),
            stopped: false,
        }
    }
}

impl TaskLearner for MultiTaskLearner {
    fn init_predictor(&self) -> Result<Predictor> {
        Ok(Predictor::Single(self.init.clone()))
    }

    fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()> {
        let t = feed.current();
        let mut parts = Vec::with_capacity(t);
        for v in 1..=t {
            let data = feed.task(v)?;
            parts.push((&data.train, feed_mask(feed, v)?));
        }
        let pass = train_union(&self.init, &parts, t, &self.cfg, &self.ctx, self.capture)?;
        self.stopped |= pass.stopped;
        self.trail = snaps_to_trail(t, 0, pass.epoch_snaps);
        self.current = Some(pass.params);
        Ok(())
    }

    fn predictor(&self) -> Result<Predictor> {
        self.current
            .clone()
            .map(Predictor::Single)
            .ok_or_else(|| Error::State("no task learned yet".into()))
    }

    fn take_epoch_trail(&mut self) -> Vec<EpochSnapshot> {
        std::mem::take(&mut self.trail)
    }

    fn stopped_early(&self) -> bool {
        self.stopped
    }
}

/// Trains the joint reference network for an arbitrary architecture: fresh
/// initializer, union of every task's training split. The runner uses this
/// to build the mode-architecture reference for the trade-off report.
pub fn train_joint_reference(
    spec: &NetworkSpec,
    stream: &TaskStream,
    cfg: &ModeTrainConfig,
    ctx: &SeedCtx,
) -> Result<ParamSet> {
    let t_count = stream.num_tasks();
    let init = ParamSet::xavier_init(spec, ctx.init_seed(arch_tag(spec)));
    let mut parts = Vec::with_capacity(t_count);
    for v in 1..=t_count {
        parts.push((&stream.task(v)?.train, task_mask(stream, v)?));
    }
    let pass = train_union(&init, &parts, t_count, cfg, ctx, false)?;
    Ok(pass.params)
}

// ───────────────────────── ensemble learners ─────────────────────────

enum EnsembleInit {
    /// All members share one initializer and task 1 trains them jointly with
    /// the spread penalty.
    SharedSpread,
    /// Member `i` starts from literal seed `i + 1`; every task is plain
    /// per-member fine-tuning.
    PerSeed,
}

/// Independent per-member fine-tuning after a diversified start; inference
/// averages the member predictions.
struct EnsembleLearner {
    variant: EnsembleInit,
    mode_spec: NetworkSpec,
    num_modes: usize,
    beta_max: f64,
    beta_min: f64,
    cfg: ModeTrainConfig,
    ctx: SeedCtx,
    capture: bool,
    members: Option<Vec<ParamSet>>,
    trail: Vec<EpochSnapshot>,
    stopped: bool,
}

impl EnsembleLearner {
    fn new(settings: &RunSettings, ctx: &SeedCtx, variant: EnsembleInit) -> EnsembleLearner {
        EnsembleLearner {
            variant,
            mode_spec: settings.mode_spec.clone(),
            num_modes: settings.ensemble_modes,
            beta_max: settings.beta_max,
            beta_min: settings.beta_min,
            cfg: settings.train,
            ctx: *ctx,
            capture: settings.capture_epochs,
            members: None,
            trail: Vec::new(),
            stopped: false,
        }
    }

    fn initial_members(&self) -> Vec<ParamSet> {
        match self.variant {
            EnsembleInit::SharedSpread => {
                let init = ParamSet::xavier_init(&self.mode_spec, self.ctx.init_seed(arch_tag(&self.mode_spec)));
                vec![init; self.num_modes]
            }
            EnsembleInit::PerSeed => (0..self.num_modes)
                .map(|i| ParamSet::xavier_init(&self.mode_spec, (i + 1) as u64))
                .collect(),
        }
    }
}

impl TaskLearner for EnsembleLearner {
    fn init_predictor(&self) -> Result<Predictor> {
        Ok(Predictor::Modes(self.initial_members()))
    }

    fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()> {
        let t = feed.current();
        let data = feed.task(t)?;
        let mask = feed_mask(feed, t)?;
        self.trail.clear();

        if t == 1 {
            if let EnsembleInit::SharedSpread = self.variant {
                let init = ParamSet::xavier_init(&self.mode_spec, self.ctx.init_seed(arch_tag(&self.mode_spec)));
                let set = initialize_task1(
                    &init,
                    self.num_modes,
                    self.beta_max,
                    self.beta_min,
                    &data.train,
                    mask.as_ref(),
                    &self.cfg,
                    &self.ctx,
                )?;
                if self.capture {
                    for m in &set.modes {
                        for (e, p) in &m.checkpoints {
                            if *e > 0 {
                                self.trail.push(EpochSnapshot {
                                    task: 1,
                                    epoch: *e,
                                    mode_index: m.mode_index,
                                    params: p.clone(),
                                });
                            }
                        }
                    }
                }
                self.members = Some(set.mode_params());
                return Ok(());
            }
        }

        let members = match self.members.take() {
            Some(m) => m,
            None => self.initial_members(),
        };
        let mut next = Vec::with_capacity(members.len());
        for (i, member) in members.iter().enumerate() {
            let pass = train_one_net(
                member,
                None,
                &data.train,
                mask.as_ref(),
                t,
                i as u64,
                &self.cfg,
                &self.ctx,
                self.capture,
            )?;
            self.stopped |= pass.stopped;
            self.trail.extend(
                pass.epoch_snaps
                    .into_iter()
                    .enumerate()
                    .map(|(e, params)| EpochSnapshot { task: t, epoch: e + 1, mode_index: i, params }),
            );
            next.push(pass.params);
        }
        self.members = Some(next);
        Ok(())
    }

    fn predictor(&self) -> Result<Predictor> {
        self.members
            .clone()
            .map(Predictor::Modes)
            .ok_or_else(|| Error::State("no task learned yet".into()))
    }

    fn take_epoch_trail(&mut self) -> Vec<EpochSnapshot> {
        std::mem::take(&mut self.trail)
    }

    fn stopped_early(&self) -> bool {
        self.stopped
    }
}

// ───────────────────────── multi-mode learner ─────────────────────────

/// The full multi-mode method: spread initialization on task 1, anchored
/// joint-inference adaptation plus checkpoint backtracking afterwards.
struct MotaLearner {
    mode_spec: NetworkSpec,
    num_modes: usize,
    beta_max: f64,
    beta_min: f64,
    cfg: ModeTrainConfig,
    backtrack: BacktrackConfig,
    ctx: SeedCtx,
    capture: bool,
    set: Option<ModeSet>,
    selection: Option<CheckpointSelection>,
    trail: Vec<EpochSnapshot>,
    stopped: bool,
}

impl MotaLearner {
    fn new(settings: &RunSettings, ctx: &SeedCtx) -> MotaLearner {
        MotaLearner {
            mode_spec: settings.mode_spec.clone(),
            num_modes: settings.num_modes,
            beta_max: settings.beta_max,
            beta_min: settings.beta_min,
            cfg: settings.train,
            backtrack: settings.backtrack,
            ctx: *ctx,
            capture: settings.capture_epochs,
            set: None,
            selection: None,
            trail: Vec::new(),
            stopped: false,
        }
    }

    fn capture_checkpoints(&mut self, task: usize) {
        if !self.capture {
            return;
        }
        if let Some(set) = &self.set {
            for m in &set.modes {
                for (e, p) in &m.checkpoints {
                    if *e > 0 {
                        self.trail.push(EpochSnapshot {
                            task,
                            epoch: *e,
                            mode_index: m.mode_index,
                            params: p.clone(),
                        });
                    }
                }
            }
        }
    }
}

impl TaskLearner for MotaLearner {
    fn init_predictor(&self) -> Result<Predictor> {
        let init = ParamSet::xavier_init(&self.mode_spec, self.ctx.init_seed(arch_tag(&self.mode_spec)));
        Ok(Predictor::Modes(vec![init; self.num_modes]))
    }

    fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()> {
        let t = feed.current();
        let data = feed.task(t)?;
        let mask = feed_mask(feed, t)?;
        self.trail.clear();
        if t == 1 {
            let init = ParamSet::xavier_init(&self.mode_spec, self.ctx.init_seed(arch_tag(&self.mode_spec)));
            let set = initialize_task1(
                &init,
                self.num_modes,
                self.beta_max,
                self.beta_min,
                &data.train,
                mask.as_ref(),
                &self.cfg,
                &self.ctx,
            )?;
            self.set = Some(set);
            self.capture_checkpoints(1);
            return Ok(());
        }
        let set = self
            .set
            .as_mut()
            .ok_or_else(|| Error::State("task 1 was never learned".into()))?;
        let report = update_parameters(set, t, &data.train, &data.val, mask.as_ref(), &self.cfg, &self.backtrack, &self.ctx)?;
        self.stopped |= report.stopped_early;
        self.selection = Some(report.selection);
        self.capture_checkpoints(t);
        Ok(())
    }

    fn predictor(&self) -> Result<Predictor> {
        self.set
            .as_ref()
            .map(|s| Predictor::Modes(s.mode_params()))
            .ok_or_else(|| Error::State("no task learned yet".into()))
    }

    fn take_selection(&mut self) -> Option<CheckpointSelection> {
        self.selection.take()
    }

    fn take_epoch_trail(&mut self) -> Vec<EpochSnapshot> {
        std::mem::take(&mut self.trail)
    }

    fn stopped_early(&self) -> bool {
        self.stopped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TensorLike;
    use crate::stream::{make_stream, StreamSpec};

    fn tiny_spec(tasks: usize) -> StreamSpec {
        StreamSpec {
            tasks,
            classes_per_task: 2,
            samples_per_class: 40,
            input_dim: 4,
            ..StreamSpec::default()
        }
    }

    fn tiny_settings(stream: &TaskStream) -> RunSettings {
        let base = NetworkSpec::new(stream.input_dim, vec![8], stream.num_classes, crate::nn::Activation::Relu);
        let mode = NetworkSpec::new(stream.input_dim, vec![3], stream.num_classes, crate::nn::Activation::Relu);
        RunSettings {
            base_spec: base,
            mode_spec: mode,
            num_modes: 2,
            beta_max: 10.0,
            beta_min: 100.0,
            ewc_lambda: 100.0,
            ensemble_modes: 2,
            train: ModeTrainConfig { epochs: 4, lr: 0.05, batch_size: 16, fisher_samples: 64 },
            backtrack: BacktrackConfig { drift_weight: 0.1, combo_cap: 4096 },
            capture_epochs: false,
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("sgd".parse::<Strategy>(), Err(Error::Config(_))));
    }

    #[test]
    fn feed_blocks_out_of_policy_reads() {
        let stream = make_stream(&tiny_spec(3), 7).unwrap();
        let feed = TaskFeed::new(&stream, 2, AccessPolicy::CurrentOnly).unwrap();
        assert!(feed.task(2).is_ok());
        assert!(matches!(feed.task(1), Err(Error::DataAccess(_))));
        assert!(matches!(feed.task(3), Err(Error::DataAccess(_))));
        let cumulative = TaskFeed::new(&stream, 2, AccessPolicy::CumulativeUpTo).unwrap();
        assert!(cumulative.task(1).is_ok());
        assert!(cumulative.task(2).is_ok());
        assert!(matches!(cumulative.task(3), Err(Error::DataAccess(_))));
    }

    /// A strategy that reaches for earlier tasks must abort the whole run.
    #[test]
    fn misbehaving_learner_fails_hard() {
        struct Nosy {
            init: ParamSet,
        }
        impl TaskLearner for Nosy {
            fn init_predictor(&self) -> Result<Predictor> {
                Ok(Predictor::Single(self.init.clone()))
            }
            fn learn_task(&mut self, feed: &TaskFeed<'_>) -> Result<()> {
                if feed.current() > 1 {
                    feed.task(feed.current() - 1)?;
                }
                Ok(())
            }
            fn predictor(&self) -> Result<Predictor> {
                Ok(Predictor::Single(self.init.clone()))
            }
        }
        let stream = make_stream(&tiny_spec(2), 7).unwrap();
        let spec = NetworkSpec::new(stream.input_dim, vec![4], stream.num_classes, crate::nn::Activation::Relu);
        let mut nosy = Nosy { init: ParamSet::xavier_init(&spec, 1) };
        let err = drive_learner(Strategy::NaiveSequential, &mut nosy, &stream, AccessPolicy::CurrentOnly);
        assert!(matches!(err, Err(Error::DataAccess(_))));
    }

    #[test]
    fn capacity_fairness_checks_budget() {
        let base = NetworkSpec::new(4, vec![8], 4, crate::nn::Activation::Relu);
        let mode = NetworkSpec::new(4, vec![3], 4, crate::nn::Activation::Relu);
        assert!(check_capacity_fairness(&base, &mode, 2).is_ok());
        assert!(matches!(check_capacity_fairness(&base, &mode, 3), Err(Error::Config(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let stream = make_stream(&tiny_spec(2), 11).unwrap();
        let settings = tiny_settings(&stream);
        let ctx = SeedCtx::new(3407, 0);
        for strategy in Strategy::ALL {
            let a = run_strategy(strategy, &stream, &settings, &ctx).unwrap();
            let b = run_strategy(strategy, &stream, &settings, &ctx).unwrap();
            assert_eq!(a.matrix.rows, b.matrix.rows, "{strategy}");
            for (pa, pb) in a.snapshots.iter().zip(&b.snapshots) {
                match (pa, pb) {
                    (Predictor::Single(x), Predictor::Single(y)) => assert_eq!(x.data(), y.data()),
                    (Predictor::Modes(xs), Predictor::Modes(ys)) => {
                        for (x, y) in xs.iter().zip(ys) {
                            assert_eq!(x.data(), y.data());
                        }
                    }
                    _ => panic!("snapshot kinds differ"),
                }
            }
        }
    }

    #[test]
    fn ewc_with_zero_penalty_matches_naive_exactly() {
        let stream = make_stream(&tiny_spec(3), 5).unwrap();
        let mut settings = tiny_settings(&stream);
        settings.ewc_lambda = 0.0;
        let ctx = SeedCtx::new(3407, 0);
        let naive = run_strategy(Strategy::NaiveSequential, &stream, &settings, &ctx).unwrap();
        let ewc = run_strategy(Strategy::Ewc, &stream, &settings, &ctx).unwrap();
        for (a, b) in naive.snapshots.iter().zip(&ewc.snapshots) {
            match (a, b) {
                (Predictor::Single(x), Predictor::Single(y)) => assert_eq!(x.data(), y.data()),
                _ => panic!("expected single-network snapshots"),
            }
        }
        assert_eq!(naive.matrix.rows, ewc.matrix.rows);
    }

    #[test]
    fn huge_penalty_pins_parameters_to_task1() {
        let stream = make_stream(&tiny_spec(3), 5).unwrap();
        let mut settings = tiny_settings(&stream);
        settings.ewc_lambda = 1e12;
        let ctx = SeedCtx::new(3407, 0);
        let run = run_strategy(Strategy::Ewc, &stream, &settings, &ctx).unwrap();
        let first = match &run.snapshots[0] {
            Predictor::Single(p) => p.clone(),
            _ => panic!(),
        };
        for snap in &run.snapshots[1..] {
            let p = match snap {
                Predictor::Single(p) => p,
                _ => panic!(),
            };
            let max_delta = p
                .data()
                .iter()
                .zip(first.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_delta < 1e-4, "max |delta| = {max_delta}");
        }
    }

    #[test]
    fn single_member_distmax_ensemble_is_naive_sequential() {
        let stream = make_stream(&tiny_spec(3), 9).unwrap();
        let mut settings = tiny_settings(&stream);
        settings.mode_spec = settings.base_spec.clone();
        settings.ensemble_modes = 1;
        let ctx = SeedCtx::new(3407, 0);
        let naive = run_strategy(Strategy::NaiveSequential, &stream, &settings, &ctx).unwrap();
        let ens = run_strategy(Strategy::EnsembleDistmax, &stream, &settings, &ctx).unwrap();
        for (a, b) in naive.snapshots.iter().zip(&ens.snapshots) {
            let x = match a {
                Predictor::Single(p) => p,
                _ => panic!(),
            };
            let y = match b {
                Predictor::Modes(m) => {
                    assert_eq!(m.len(), 1);
                    &m[0]
                }
                _ => panic!(),
            };
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(naive.matrix.rows, ens.matrix.rows);
    }

    #[test]
    fn naive_on_one_task_is_single_task() {
        let stream = make_stream(&tiny_spec(1), 13).unwrap();
        let settings = tiny_settings(&stream);
        let ctx = SeedCtx::new(3407, 0);
        let naive = run_strategy(Strategy::NaiveSequential, &stream, &settings, &ctx).unwrap();
        let single = run_strategy(Strategy::SingleTask, &stream, &settings, &ctx).unwrap();
        match (&naive.snapshots[0], &single.snapshots[0]) {
            (Predictor::Single(a), Predictor::Single(b)) => assert_eq!(a.data(), b.data()),
            _ => panic!(),
        }
        assert!(naive.drift_raw.is_none());
    }

    #[test]
    fn seed_ensemble_members_start_apart() {
        let stream = make_stream(&tiny_spec(2), 3).unwrap();
        let settings = tiny_settings(&stream);
        let ctx = SeedCtx::new(3407, 0);
        let run = run_strategy(Strategy::EnsembleSeeds, &stream, &settings, &ctx).unwrap();
        match &run.init {
            Predictor::Modes(m) => {
                assert_eq!(m.len(), 2);
                assert_ne!(m[0].data(), m[1].data());
            }
            _ => panic!(),
        }
    }

    #[test]
    fn mota_records_selection_per_adapted_task() {
        let stream = make_stream(&tiny_spec(3), 17).unwrap();
        let settings = tiny_settings(&stream);
        let ctx = SeedCtx::new(3407, 0);
        let run = run_strategy(Strategy::Mota, &stream, &settings, &ctx).unwrap();
        assert_eq!(run.selections.len(), 2);
        assert_eq!(run.snapshots.len(), 3);
        for sel in &run.selections {
            assert_eq!(sel.epochs.len(), 2);
            assert!(sel.objective.is_finite());
        }
        assert_eq!(run.capacity_params, 2 * settings.mode_spec.param_count());
    }

    #[test]
    fn matrix_shape_and_drift_trace_match_stream() {
        let stream = make_stream(&tiny_spec(3), 19).unwrap();
        let settings = tiny_settings(&stream);
        let ctx = SeedCtx::new(3407, 0);
        let run = run_strategy(Strategy::NaiveSequential, &stream, &settings, &ctx).unwrap();
        assert_eq!(run.matrix.num_tasks(), 3);
        assert_eq!(run.matrix.init_row.len(), 3);
        assert_eq!(run.matrix.next_task.len(), 2);
        assert_eq!(run.drift.distances.len(), 2);
        assert!(run.drift_raw.unwrap() > 0.0);
    }

    #[test]
    fn epoch_capture_tags_tasks_and_modes() {
        let stream = make_stream(&tiny_spec(2), 23).unwrap();
        let mut settings = tiny_settings(&stream);
        settings.capture_epochs = true;
        let ctx = SeedCtx::new(3407, 0);

        let naive = run_strategy(Strategy::NaiveSequential, &stream, &settings, &ctx).unwrap();
        assert_eq!(naive.epoch_trail.len(), 2 * settings.train.epochs);
        assert!(naive.epoch_trail.iter().all(|s| s.mode_index == 0));

        let mota = run_strategy(Strategy::Mota, &stream, &settings, &ctx).unwrap();
        assert_eq!(mota.epoch_trail.len(), 2 * 2 * settings.train.epochs);
        assert!(mota.epoch_trail.iter().any(|s| s.mode_index == 1));
        assert!(mota.epoch_trail.iter().all(|s| s.epoch >= 1 && s.epoch <= settings.train.epochs));
    }

    #[test]
    fn multi_task_sees_union_growth() {
        let stream = make_stream(&tiny_spec(3), 29).unwrap();
        let settings = tiny_settings(&stream);
        let ctx = SeedCtx::new(3407, 0);
        let run = run_strategy(Strategy::MultiTask, &stream, &settings, &ctx).unwrap();
        let t_final = run.matrix.num_tasks();
        let avg = crate::metrics::average_accuracy(&run.matrix, t_final).unwrap();
        assert!(avg > 0.5, "joint training should beat chance, got {avg}");
    }
}
