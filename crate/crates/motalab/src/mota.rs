//! Multi-mode training with joint inference and checkpoint backtracking.
//!
//! A mode set holds `N` parameter vectors of the same architecture. On the
//! first task the modes are trained jointly through random simplex mixtures
//! of their parameters, with a penalty on pairwise parameter cosine so the
//! modes spread apart. On every later task each mode takes anchored
//! (Fisher-weighted proximal) steps against the shared mixture prediction,
//! records a checkpoint per epoch, and a backtracking pass then picks the
//! per-mode checkpoint combination that minimizes validation loss plus a
//! drift penalty.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{self, GradSet, LabelMask, ParamSet, TensorLike, TrainItem};
use crate::seeding::SeedCtx;
use crate::stream::{self, TaskDataset};

/// Clamp for cosine denominators; keeps zero-norm layers from dividing by 0
/// while leaving the identical-modes case bit-exact.
const COS_EPS: f64 = 1e-12;

/// One mode: its live parameters plus the regularization state carried
/// between tasks.
#[derive(Debug, Clone)]
pub struct ModeState {
    pub mode_index: usize,
    pub params: ParamSet,
    /// Parameters at the start of the current task; the proximal target.
    pub anchor: ParamSet,
    /// Diagonal Fisher estimate from the previous task's data.
    pub fisher: GradSet,
    /// `(epoch, params)` snapshots for the current task; epoch 0 is the
    /// anchor itself.
    pub checkpoints: Vec<(usize, ParamSet)>,
}

#[derive(Debug, Clone)]
pub struct ModeSet {
    pub modes: Vec<ModeState>,
    /// Weight of the pairwise-cosine spread penalty on task 1.
    pub beta_max: f64,
    /// Anchor strength for adaptation steps on tasks 2+.
    pub beta_min: f64,
}

impl ModeSet {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn mode_params(&self) -> Vec<ParamSet> {
        self.modes.iter().map(|m| m.params.clone()).collect()
    }
}

/// Per-task training knobs shared by both phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-sample gradient budget for the Fisher estimate.
    pub fisher_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktrackConfig {
    /// Weight on the drift penalty inside the selection objective.
    pub drift_weight: f64,
    /// Exhaustive search bound; larger checkpoint grids fall back to a
    /// greedy per-mode scan.
    pub combo_cap: usize,
}

/// Outcome of the backtracking pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSelection {
    /// Selected epoch per mode (0 means "stay at the anchor").
    pub epochs: Vec<usize>,
    /// Objective value at the selected combination.
    pub objective: f64,
    /// False when the greedy fallback was used.
    pub exhaustive: bool,
}

#[derive(Debug, Clone)]
pub struct TaskAdaptReport {
    pub selection: CheckpointSelection,
    /// Selection objective recomputed from the applied parameters, before
    /// the Fisher refresh; must match `selection.objective`.
    pub objective_recomputed: f64,
    /// True when a divergence guard cut the epoch loop short.
    pub stopped_early: bool,
}

/// Draws Dirichlet(1, ..., 1) weights: i.i.d. unit exponentials, normalized.
pub fn sample_simplex_weights<R: Rng>(rng: &mut R, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Argument("cannot draw simplex weights for 0 modes".into()));
    }
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::Numeric("degenerate exponential draws for simplex weights".into()));
    }
    Ok(draws.into_iter().map(|d| d / sum).collect())
}

/// Convex combination of mode parameters under simplex weights.
pub fn interpolate_modes(modes: &[ParamSet], alpha: &[f64]) -> Result<ParamSet> {
    if modes.is_empty() || modes.len() != alpha.len() {
        return Err(Error::Argument(format!(
            "interpolation needs matching mode/weight counts, got {} and {}",
            modes.len(),
            alpha.len()
        )));
    }
    let mut out = modes[0].scaled(alpha[0]);
    for (m, &a) in modes.iter().zip(alpha).skip(1) {
        out.add_scaled(a, m)?;
    }
    Ok(out)
}

fn layer_cosine_terms(a: &ParamSet, b: &ParamSet, layer: usize) -> (f64, f64, f64) {
    let range = a.shape().layer_range(layer);
    let av = &a.data()[range.clone()];
    let bv = &b.data()[range];
    let mut dot = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (x, y) in av.iter().zip(bv) {
        dot += x * y;
        sa += x * x;
        sb += y * y;
    }
    (dot, sa, sb)
}

/// Mean cosine similarity between mode parameters, per layer, over all mode
/// pairs. Layers count the weight matrix and bias together. Identical modes
/// give exactly 1, layerwise-orthogonal modes exactly 0.
pub fn pairwise_cosine(modes: &[ParamSet]) -> Result<f64> {
    Ok(cosine_impl(modes, false)?.0)
}

/// `pairwise_cosine` plus its gradient with respect to each mode.
pub fn pairwise_cosine_grad(modes: &[ParamSet]) -> Result<(f64, Vec<GradSet>)> {
    let (v, g) = cosine_impl(modes, true)?;
    Ok((v, g))
}

fn cosine_impl(modes: &[ParamSet], with_grad: bool) -> Result<(f64, Vec<GradSet>)> {
    if modes.is_empty() {
        return Err(Error::Argument("pairwise cosine needs at least one mode".into()));
    }
    let shape = modes[0].shape();
    for m in modes {
        nn::check_same_shape(m.shape(), shape)?;
    }
    let n = modes.len();
    let mut grads: Vec<GradSet> = if with_grad {
        modes.iter().map(|m| m.zeros_like()).collect()
    } else {
        Vec::new()
    };
    if n < 2 {
        return Ok((0.0, grads));
    }
    let layers = shape.num_layers();
    let normalizer = (layers * n * (n - 1)) as f64 / 2.0;
    let mut total = 0.0;
    for layer in 0..layers {
        let range = shape.layer_range(layer);
        for i in 0..n {
            for j in (i + 1)..n {
                let (dot, sa, sb) = layer_cosine_terms(&modes[i], &modes[j], layer);
                let sa_c = sa.max(COS_EPS);
                let sb_c = sb.max(COS_EPS);
                let denom = (sa_c * sb_c).sqrt();
                total += dot / denom;
                if with_grad {
                    let scale = 1.0 / (normalizer * denom);
                    let (left, right) = grads.split_at_mut(j);
                    let gi = &mut left[i].data_mut()[range.clone()];
                    let ai = &modes[i].data()[range.clone()];
                    let bj = &modes[j].data()[range.clone()];
                    for k in 0..gi.len() {
                        gi[k] += scale * (bj[k] - (dot / sa_c) * ai[k]);
                    }
                    let gj = &mut right[0].data_mut()[range.clone()];
                    for k in 0..gj.len() {
                        gj[k] += scale * (ai[k] - (dot / sb_c) * bj[k]);
                    }
                }
            }
        }
    }
    Ok((total / normalizer, grads))
}

/// Quadratic anchor penalty `sum_d (lambda/2) F_d (theta_d - a_d)^2`.
pub fn ewc_penalty(params: &ParamSet, anchor: &ParamSet, fisher: &GradSet, lambda: f64) -> Result<f64> {
    check_ewc_args(params, anchor, fisher, lambda)?;
    let mut acc = 0.0;
    for ((t, a), f) in params.data().iter().zip(anchor.data()).zip(fisher.data()) {
        let d = t - a;
        acc += 0.5 * lambda * f * d * d;
    }
    Ok(acc)
}

/// Gradient of `ewc_penalty`: `lambda * F (theta - a)`.
pub fn ewc_penalty_grad(params: &ParamSet, anchor: &ParamSet, fisher: &GradSet, lambda: f64) -> Result<GradSet> {
    check_ewc_args(params, anchor, fisher, lambda)?;
    let data = params
        .data()
        .iter()
        .zip(anchor.data())
        .zip(fisher.data())
        .map(|((t, a), f)| lambda * f * (t - a))
        .collect();
    Ok(GradSet::from_parts(params.shape().clone(), data))
}

fn check_ewc_args(params: &ParamSet, anchor: &ParamSet, fisher: &GradSet, lambda: f64) -> Result<()> {
    nn::check_same_shape(params.shape(), anchor.shape())?;
    nn::check_same_shape(params.shape(), fisher.shape())?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument(format!("anchor strength must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// One anchored descent step, solved in closed form.
///
/// Minimizes the local model `g.(theta' - theta) + |theta' - theta|^2/(2 lr)
/// + (lambda/2) F (theta' - a)^2` elementwise:
///
/// `theta' = (theta - lr g + lr lambda F a) / (1 + lr lambda F)`
///
/// Unlike an explicit gradient step this cannot overshoot the anchor no
/// matter how large `lambda * F` gets; as they grow, `theta'` approaches `a`.
/// With `lambda = 0` it reduces bit-exactly to a plain gradient step.
pub fn anchored_step(
    params: &ParamSet,
    task_grad: &GradSet,
    anchor: &ParamSet,
    fisher: &GradSet,
    lambda: f64,
    lr: f64,
) -> Result<ParamSet> {
    check_ewc_args(params, anchor, fisher, lambda)?;
    if lambda == 0.0 {
        return nn::optimizer_step(params, task_grad, lr);
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Argument(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    nn::check_same_shape(params.shape(), task_grad.shape())?;
    let data = params
        .data()
        .iter()
        .zip(task_grad.data())
        .zip(anchor.data().iter().zip(fisher.data()))
        .map(|((t, g), (a, f))| {
            let w = lr * lambda * f;
            (t - lr * g + w * a) / (1.0 + w)
        })
        .collect();
    ParamSet::from_flat(params.shape().clone(), data)
}

/// Uniform average of probability vectors.
pub fn average_distributions(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    if dists.is_empty() {
        return Err(Error::Argument("cannot average zero distributions".into()));
    }
    let k = dists[0].len();
    if dists.iter().any(|d| d.len() != k) {
        return Err(Error::Shape("distributions must share a length".into()));
    }
    let n = dists.len() as f64;
    let mut out = vec![0.0; k];
    for d in dists {
        for (o, p) in out.iter_mut().zip(d) {
            *o += p;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Mixture prediction: the average of the modes' masked softmax outputs.
pub fn joint_inference(modes: &[ParamSet], x: &[f64], mask: Option<&LabelMask>) -> Result<Vec<f64>> {
    if modes.is_empty() {
        return Err(Error::Argument("joint inference needs at least one mode".into()));
    }
    let dists = modes.iter().map(|m| m.forward_masked(x, mask)).collect::<Result<Vec<_>>>()?;
    average_distributions(&dists)
}

/// Diagonal empirical Fisher: the mean squared per-sample gradient of the
/// label log-probability, over the first `min(cap, n)` samples in dataset
/// order.
pub fn estimate_fisher(
    params: &ParamSet,
    samples: &[stream::Sample],
    mask: Option<&LabelMask>,
    cap: usize,
) -> Result<GradSet> {
    if samples.is_empty() || cap == 0 {
        return Err(Error::Argument("Fisher estimation needs at least one sample".into()));
    }
    let used = cap.min(samples.len());
    let per_sample = exec::run_indexed(used, |s| -> Result<GradSet> {
        let item = match mask {
            Some(m) => TrainItem::masked(&samples[s].x, samples[s].y, m),
            None => TrainItem::plain(&samples[s].x, samples[s].y),
        };
        let (_, g) = nn::backward(params, &[item])?;
        Ok(g)
    });
    let mut acc = params.zeros_like();
    for g in per_sample {
        let g = g?;
        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v * v;
        }
    }
    let inv = 1.0 / used as f64;
    for a in acc.data_mut() {
        *a *= inv;
    }
    Ok(acc)
}

pub(crate) fn batch_items<'a>(
    samples: &'a [stream::Sample],
    batch: &[usize],
    mask: Option<&'a LabelMask>,
    overrides: Option<&'a [Vec<f64>]>,
) -> Vec<TrainItem<'a>> {
    batch
        .iter()
        .enumerate()
        .map(|(k, &s)| TrainItem {
            x: &samples[s].x,
            y: samples[s].y,
            mask,
            prob_override: overrides.map(|o| o[k].as_slice()),
        })
        .collect()
}

/// Trains all modes jointly on the first task.
///
/// Every mode starts from the same `init`. Each batch draws fresh simplex
/// weights, evaluates the loss at the interpolated parameters, and updates
/// all modes simultaneously: mode `i` receives the interpolation gradient
/// scaled by its weight plus `beta_max` times the cosine-spread gradient.
/// With a single mode this degenerates bit-exactly to plain training.
///
/// The returned set carries Fisher estimates from this task's data and uses
/// the final parameters as anchors.
pub fn initialize_task1(
    init: &ParamSet,
    num_modes: usize,
    beta_max: f64,
    beta_min: f64,
    train: &TaskDataset,
    mask: Option<&LabelMask>,
    cfg: &ModeTrainConfig,
    ctx: &SeedCtx,
) -> Result<ModeSet> {
    if num_modes == 0 {
        return Err(Error::Argument("need at least one mode".into()));
    }
    if train.samples.is_empty() {
        return Err(Error::Argument("task 1 training data is empty".into()));
    }
    let mut modes: Vec<ParamSet> = vec![init.clone(); num_modes];
    let mut trails: Vec<Vec<(usize, ParamSet)>> =
        (0..num_modes).map(|_| vec![(0, init.clone())]).collect();
    let n = train.samples.len();
    'outer: for epoch in 0..cfg.epochs {
        let batches = stream::batch_indices(n, cfg.batch_size, ctx.batch_seed(1, epoch as u64, 0))?;
        let mut alpha_rng = ctx.alpha_rng(epoch as u64);
        for batch in &batches {
            let alpha = sample_simplex_weights(&mut alpha_rng, num_modes)?;
            match init_batch_step(&modes, &alpha, train, batch, mask, beta_max, cfg.lr) {
                Ok(Some(next)) => modes = next,
                Ok(None) => {
                    log::warn!("mode initialization diverged in epoch {epoch}; keeping last finite parameters");
                    break 'outer;
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!(
                        "mode initialization hit a numeric failure in epoch {epoch} ({msg}); \
                         keeping last finite parameters"
                    );
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        for (trail, params) in trails.iter_mut().zip(&modes) {
            trail.push((epoch + 1, params.clone()));
        }
    }
    let fishers = modes
        .iter()
        .map(|p| estimate_fisher(p, &train.samples, None, cfg.fisher_samples))
        .collect::<Result<Vec<_>>>()?;
    let modes = modes
        .into_iter()
        .zip(fishers)
        .zip(trails)
        .enumerate()
        .map(|(i, ((params, fisher), checkpoints))| ModeState {
            mode_index: i,
            anchor: params.clone(),
            params,
            fisher,
            checkpoints,
        })
        .collect();
    Ok(ModeSet { modes, beta_max, beta_min })
}

/// Adapts the mode set to task `task_index` (>= 2).
///
/// Anchors are the parameters at entry. Per epoch, each mode in turn makes a
/// full pass over the training data: the other modes' predictions are cached
/// once for the pass, each batch forms the mixture prediction, and the mode
/// takes anchored steps on the mixture loss (gradient scaled by `1/N`).
/// Every epoch checkpoints every mode; backtracking then picks the
/// combination to keep, and the Fisher estimates are refreshed at the chosen
/// parameters.
pub fn update_parameters(
    set: &mut ModeSet,
    task_index: usize,
    train: &TaskDataset,
    val: &TaskDataset,
    mask: Option<&LabelMask>,
    cfg: &ModeTrainConfig,
    bt: &BacktrackConfig,
    ctx: &SeedCtx,
) -> Result<TaskAdaptReport> {
    let stopped_early = adapt_epochs(set, task_index, train, mask, cfg, ctx)?;
    let selection = backtrack_select(&set.modes, val, mask, bt)?;
    for (m, &e) in set.modes.iter_mut().zip(&selection.epochs) {
        let chosen = m
            .checkpoints
            .iter()
            .find(|(ep, _)| *ep == e)
            .ok_or_else(|| Error::State(format!("selected epoch {e} has no checkpoint")))?
            .1
            .clone();
        m.params = chosen;
    }
    let objective_recomputed = backtrack_objective(&set.modes, val, mask, bt.drift_weight, &selection.epochs)?;
    let agree = objective_recomputed == selection.objective
        || (objective_recomputed - selection.objective).abs() <= 1e-9;
    if !agree {
        return Err(Error::Invariant(format!(
            "selection objective {} does not reproduce ({objective_recomputed})",
            selection.objective
        )));
    }
    for m in &mut set.modes {
        m.fisher = estimate_fisher(&m.params, &train.samples, None, cfg.fisher_samples)?;
    }
    Ok(TaskAdaptReport { selection, objective_recomputed, stopped_early })
}

/// The epoch loop of task adaptation: resets anchors, trains each mode in
/// turn against the cached mixture, and checkpoints every mode per epoch.
/// Returns true when the divergence guard stopped training early (the
/// partial epoch is reverted; completed checkpoints stay).
pub fn adapt_epochs(
    set: &mut ModeSet,
    task_index: usize,
    train: &TaskDataset,
    mask: Option<&LabelMask>,
    cfg: &ModeTrainConfig,
    ctx: &SeedCtx,
) -> Result<bool> {
    if task_index < 2 {
        return Err(Error::Argument(format!(
            "adaptation starts at task 2; task 1 uses mode initialization (got {task_index})"
        )));
    }
    if train.samples.is_empty() {
        return Err(Error::Argument("adaptation needs non-empty training data".into()));
    }
    let n_modes = set.modes.len();
    for m in &mut set.modes {
        m.anchor = m.params.clone();
        m.checkpoints = vec![(0, m.params.clone())];
    }
    let mut stopped_early = false;
    'epochs: for epoch in 1..=cfg.epochs {
        for i in 0..n_modes {
            let epoch_start = set.modes[i].params.clone();
            match mode_pass(set, i, task_index, epoch, train, mask, cfg, ctx) {
                Ok(true) => {}
                Ok(false) => {
                    log::warn!("mode {i} diverged on task {task_index} epoch {epoch}; reverting the partial epoch");
                    set.modes[i].params = epoch_start;
                    stopped_early = true;
                    break 'epochs;
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!(
                        "mode {i} hit a numeric failure on task {task_index} epoch {epoch} ({msg}); \
                         reverting the partial epoch"
                    );
                    set.modes[i].params = epoch_start;
                    stopped_early = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        for m in &mut set.modes {
            let snap = m.params.clone();
            m.checkpoints.push((epoch, snap));
        }
    }
    Ok(stopped_early)
}

/// One simultaneous update of all modes during initialization. Returns None
/// when the step produced non-finite parameters.
fn init_batch_step(
    modes: &[ParamSet],
    alpha: &[f64],
    train: &TaskDataset,
    batch: &[usize],
    mask: Option<&LabelMask>,
    beta_max: f64,
    lr: f64,
) -> Result<Option<Vec<ParamSet>>> {
    let theta_hat = interpolate_modes(modes, alpha)?;
    let items = batch_items(&train.samples, batch, mask, None);
    let (_, g_task) = nn::backward(&theta_hat, &items)?;
    let cos_grads = if modes.len() >= 2 && beta_max != 0.0 {
        pairwise_cosine_grad(modes)?.1
    } else {
        Vec::new()
    };
    let mut next = Vec::with_capacity(modes.len());
    for (i, mode) in modes.iter().enumerate() {
        let mut g = g_task.scaled(alpha[i]);
        if let Some(cg) = cos_grads.get(i) {
            g.add_scaled(beta_max, cg)?;
        }
        next.push(nn::optimizer_step(mode, &g, lr)?);
    }
    if next.iter().any(|p| !p.is_finite()) {
        return Ok(None);
    }
    Ok(Some(next))
}

/// One mode's full pass over the training data. Returns false when a step
/// produced non-finite parameters (the caller reverts).
fn mode_pass(
    set: &mut ModeSet,
    i: usize,
    task_index: usize,
    epoch: usize,
    train: &TaskDataset,
    mask: Option<&LabelMask>,
    cfg: &ModeTrainConfig,
    ctx: &SeedCtx,
) -> Result<bool> {
    let n = train.samples.len();
    let inv_n_modes = 1.0 / set.modes.len() as f64;
    let other_sums = cache_other_probs(set, i, &train.samples, mask)?;
    let batches = stream::batch_indices(n, cfg.batch_size, ctx.batch_seed(task_index as u64, epoch as u64, i as u64))?;
    for batch in &batches {
        let params = &set.modes[i].params;
        let rhos = batch
            .iter()
            .map(|&s| -> Result<Vec<f64>> {
                let own = params.forward_masked(&train.samples[s].x, mask)?;
                Ok(own.iter().zip(&other_sums[s]).map(|(p, o)| (p + o) * inv_n_modes).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let items = batch_items(&train.samples, batch, mask, Some(&rhos));
        let (_, g) = nn::backward(params, &items)?;
        let g = g.scaled(inv_n_modes);
        let next = anchored_step(params, &g, &set.modes[i].anchor, &set.modes[i].fisher, set.beta_min, cfg.lr)?;
        if !next.is_finite() {
            return Ok(false);
        }
        set.modes[i].params = next;
    }
    Ok(true)
}

/// Per-sample sums of the other modes' predicted distributions, fixed for
/// one mode's pass over the data.
fn cache_other_probs(
    set: &ModeSet,
    mode: usize,
    samples: &[stream::Sample],
    mask: Option<&LabelMask>,
) -> Result<Vec<Vec<f64>>> {
    let k = set.modes[0].params.shape().output_dim();
    let others: Vec<&ParamSet> = set
        .modes
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != mode)
        .map(|(_, m)| &m.params)
        .collect();
    exec::run_indexed(samples.len(), |s| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; k];
        for p in &others {
            let probs = p.forward_masked(&samples[s].x, mask)?;
            for (a, v) in acc.iter_mut().zip(&probs) {
                *a += v;
            }
        }
        Ok(acc)
    })
    .into_iter()
    .collect()
}

/// Selection objective for one checkpoint combination, recomputed from the
/// parameters themselves. `epochs[i]` names the checkpoint epoch of mode `i`.
///
/// Objective: mean validation cross-entropy of the mixture prediction, plus
/// `drift_weight` times the summed unit-strength anchor penalties.
pub fn backtrack_objective(
    modes: &[ModeState],
    val: &TaskDataset,
    mask: Option<&LabelMask>,
    drift_weight: f64,
    epochs: &[usize],
) -> Result<f64> {
    if epochs.len() != modes.len() {
        return Err(Error::Argument("one checkpoint epoch per mode required".into()));
    }
    let mut chosen = Vec::with_capacity(modes.len());
    for (m, &e) in modes.iter().zip(epochs) {
        let params = m
            .checkpoints
            .iter()
            .find(|(ep, _)| *ep == e)
            .ok_or_else(|| Error::Index(format!("mode {} has no checkpoint for epoch {e}", m.mode_index)))?;
        chosen.push(&params.1);
    }
    let inv = 1.0 / modes.len() as f64;
    let mut ce_sum = 0.0;
    for s in &val.samples {
        let mut rho = vec![0.0; chosen[0].shape().output_dim()];
        for params in &chosen {
            let p = match params.forward_masked(&s.x, mask) {
                Ok(p) => p,
                Err(Error::Numeric(_)) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            };
            for (r, v) in rho.iter_mut().zip(&p) {
                *r += v;
            }
        }
        for r in &mut rho {
            *r *= inv;
        }
        ce_sum += nn::cross_entropy(&rho, s.y)?;
    }
    let mut j = ce_sum / val.samples.len() as f64;
    for (m, c) in modes.iter().zip(&chosen) {
        j += drift_weight * ewc_penalty(c, &m.anchor, &m.fisher, 1.0)?;
    }
    Ok(if j.is_finite() { j } else { f64::INFINITY })
}

/// Picks the per-mode checkpoint combination minimizing validation mixture
/// loss plus drift.
///
/// All combinations are scanned when their count fits `combo_cap`
/// (lexicographic order, strict improvement, so ties resolve to the earliest
/// epochs). Larger grids fall back to a greedy per-mode scan with the other
/// modes pinned at their latest checkpoints.
pub fn backtrack_select(
    modes: &[ModeState],
    val: &TaskDataset,
    mask: Option<&LabelMask>,
    bt: &BacktrackConfig,
) -> Result<CheckpointSelection> {
    if modes.is_empty() {
        return Err(Error::Argument("backtracking needs at least one mode".into()));
    }
    if val.samples.is_empty() {
        return Err(Error::Argument("backtracking needs validation samples".into()));
    }
    let counts: Vec<usize> = modes.iter().map(|m| m.checkpoints.len()).collect();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::State("every mode needs at least one checkpoint".into()));
    }
    let n_modes = modes.len();
    let s_count = val.samples.len();
    let k = modes[0].params.shape().output_dim();

    // Prob tables: [mode][checkpoint][sample] -> masked distribution.
    // A checkpoint whose forward pass fails numerically is poisoned (None)
    // and scores +inf in every combination that uses it.
    let tables: Vec<Vec<Option<Vec<Vec<f64>>>>> = modes
        .iter()
        .map(|m| {
            m.checkpoints
                .iter()
                .map(|(_, params)| {
                    let rows = exec::run_indexed(s_count, |s| params.forward_masked(&val.samples[s].x, mask))
                        .into_iter()
                        .collect::<Result<Vec<_>>>();
                    match rows {
                        Ok(rows) => Ok(Some(rows)),
                        Err(Error::Numeric(_)) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let drift: Vec<Vec<f64>> = modes
        .iter()
        .map(|m| {
            m.checkpoints
                .iter()
                .map(|(_, p)| ewc_penalty(p, &m.anchor, &m.fisher, 1.0))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / n_modes as f64;
    let eval = |idx: &[usize]| -> Result<f64> {
        if idx.iter().enumerate().any(|(i, &c)| tables[i][c].is_none()) {
            return Ok(f64::INFINITY);
        }
        let mut ce_sum = 0.0;
        for s in 0..s_count {
            let mut rho = vec![0.0; k];
            for (i, &c) in idx.iter().enumerate() {
                let rows = tables[i][c].as_ref().expect("poisoned checkpoints already filtered");
                for (r, v) in rho.iter_mut().zip(&rows[s]) {
                    *r += v;
                }
            }
            for r in &mut rho {
                *r *= inv;
            }
            ce_sum += nn::cross_entropy(&rho, val.samples[s].y)?;
        }
        let mut j = ce_sum / s_count as f64;
        for (i, &c) in idx.iter().enumerate() {
            j += bt.drift_weight * drift[i][c];
        }
        Ok(if j.is_finite() { j } else { f64::INFINITY })
    };

    let total = counts.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c));
    let exhaustive = matches!(total, Some(t) if t <= bt.combo_cap);

    let mut best_idx = vec![0usize; n_modes];
    let mut best = f64::INFINITY;
    if exhaustive {
        let mut idx = vec![0usize; n_modes];
        loop {
            let j = eval(&idx)?;
            if j < best {
                best = j;
                best_idx.copy_from_slice(&idx);
            }
            // Odometer increment, last mode fastest: lexicographic order.
            let mut pos = n_modes;
            while pos > 0 {
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < counts[pos] {
                    break;
                }
                idx[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if pos == usize::MAX {
                break;
            }
        }
        if best.is_infinite() {
            best = eval(&best_idx)?;
        }
    } else {
        log::warn!(
            "checkpoint grid {:?} exceeds the exhaustive cap {}; using a greedy per-mode scan",
            counts,
            bt.combo_cap
        );
        let mut idx: Vec<usize> = counts.iter().map(|&c| c - 1).collect();
        for i in 0..n_modes {
            let mut best_c = idx[i];
            let mut best_j = f64::INFINITY;
            for c in 0..counts[i] {
                idx[i] = c;
                let j = eval(&idx)?;
                if j < best_j {
                    best_j = j;
                    best_c = c;
                }
            }
            idx[i] = best_c;
        }
        best_idx = idx;
        best = eval(&best_idx)?;
    }

    let epochs: Vec<usize> = best_idx.iter().enumerate().map(|(i, &c)| modes[i].checkpoints[c].0).collect();
    Ok(CheckpointSelection { epochs, objective: best, exhaustive })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkSpec};
    use crate::seeding::SeedCtx;
    use crate::stream::{Sample, SplitTag};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_param_net(values: &[f64]) -> ParamSet {
        let spec = NetworkSpec::new(1, vec![], 1, Activation::Relu);
        let shape = crate::nn::NetShape::from_spec(&spec);
        ParamSet::from_flat(shape, values.to_vec()).unwrap()
    }

    fn toy_dataset(seed: u64, n: usize, d: usize, k: usize) -> TaskDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                x: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                y: i % k,
            })
            .collect();
        TaskDataset {
            task_index: 1,
            split: SplitTag::Train,
            label_set: (0..k).collect(),
            samples,
        }
    }

    #[test]
    fn simplex_weights_are_positive_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1usize, 2, 3, 7] {
            let w = sample_simplex_weights(&mut rng, n).unwrap();
            assert_eq!(w.len(), n);
            assert!(w.iter().all(|&v| v > 0.0));
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(sample_simplex_weights(&mut rng, 0).is_err());
    }

    #[test]
    fn single_mode_simplex_weight_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            assert_eq!(sample_simplex_weights(&mut rng, 1).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn interpolation_matches_hand_computation() {
        let a = two_param_net(&[1.0, 2.0]);
        let b = two_param_net(&[3.0, 4.0]);
        let mix = interpolate_modes(&[a.clone(), b], &[0.3, 0.7]).unwrap();
        assert!((mix.data()[0] - 2.4).abs() < 1e-12);
        assert!((mix.data()[1] - 3.4).abs() < 1e-12);
        let solo = interpolate_modes(&[a.clone()], &[1.0]).unwrap();
        assert_eq!(solo.data(), a.data());
    }

    #[test]
    fn cosine_three_mode_example() {
        let m1 = two_param_net(&[1.0, 0.0]);
        let m2 = two_param_net(&[0.0, 1.0]);
        let m3 = two_param_net(&[1.0, 1.0]);
        let v = pairwise_cosine(&[m1, m2, m3]).unwrap();
        let expect = 2f64.sqrt() / 3.0;
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        assert!((v - 0.4714).abs() < 1e-4);
    }

    #[test]
    fn cosine_of_identical_modes_is_exactly_one() {
        let spec = NetworkSpec::new(4, vec![5], 3, Activation::Relu);
        let p = ParamSet::xavier_init(&spec, 17);
        let v = pairwise_cosine(&[p.clone(), p.clone(), p]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn cosine_of_orthogonal_modes_is_exactly_zero() {
        let a = two_param_net(&[1.0, 0.0]);
        let b = two_param_net(&[0.0, 1.0]);
        assert_eq!(pairwise_cosine(&[a, b]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let spec = NetworkSpec::new(3, vec![4], 2, Activation::Tanh);
        let modes: Vec<ParamSet> = (0..3).map(|i| ParamSet::xavier_init(&spec, 100 + i)).collect();
        let (_, grads) = pairwise_cosine_grad(&modes).unwrap();
        let eps = 1e-6;
        for i in 0..modes.len() {
            for d in (0..modes[i].data().len()).step_by(7) {
                let mut plus = modes.clone();
                plus[i].data_mut()[d] += eps;
                let mut minus = modes.clone();
                minus[i].data_mut()[d] -= eps;
                let num = (pairwise_cosine(&plus).unwrap() - pairwise_cosine(&minus).unwrap()) / (2.0 * eps);
                let ana = grads[i].data()[d];
                let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
                assert!(rel < 1e-6, "mode {i} coord {d}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn anchor_penalty_example_is_exact() {
        let theta = two_param_net(&[1.1, 0.0]);
        let anchor = two_param_net(&[1.0, 0.0]);
        let fisher = GradSet::from_parts(theta.shape().clone(), vec![2.0, 0.0]);
        let pen = ewc_penalty(&theta, &anchor, &fisher, 1000.0).unwrap();
        assert!((pen - 10.0).abs() < 1e-12);
        let grad = ewc_penalty_grad(&theta, &anchor, &fisher, 1000.0).unwrap();
        assert!((grad.data()[0] - 200.0).abs() < 1e-12);
        assert_eq!(grad.data()[1], 0.0);
    }

    #[test]
    fn anchor_penalty_gradient_matches_finite_differences() {
        let spec = NetworkSpec::new(3, vec![4], 2, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        use rand::Rng;
        for case in 0..20 {
            let theta = ParamSet::xavier_init(&spec, 200 + case);
            let anchor = ParamSet::xavier_init(&spec, 300 + case);
            let fisher = GradSet::from_parts(
                theta.shape().clone(),
                (0..theta.data().len()).map(|_| rng.gen_range(0.0..3.0)).collect(),
            );
            let lambda = rng.gen_range(0.1..2000.0);
            let grad = ewc_penalty_grad(&theta, &anchor, &fisher, lambda).unwrap();
            let eps = 1e-6;
            for d in (0..theta.data().len()).step_by(11) {
                let mut plus = theta.clone();
                plus.data_mut()[d] += eps;
                let mut minus = theta.clone();
                minus.data_mut()[d] -= eps;
                let num = (ewc_penalty(&plus, &anchor, &fisher, lambda).unwrap()
                    - ewc_penalty(&minus, &anchor, &fisher, lambda).unwrap())
                    / (2.0 * eps);
                let ana = grad.data()[d];
                let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
                assert!(rel < 1e-6, "case {case} coord {d}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn anchored_step_with_zero_lambda_is_a_plain_step() {
        let spec = NetworkSpec::new(4, vec![6], 3, Activation::Relu);
        let theta = ParamSet::xavier_init(&spec, 5);
        let anchor = ParamSet::xavier_init(&spec, 6);
        let fisher = GradSet::from_parts(theta.shape().clone(), vec![1.5; theta.data().len()]);
        let grad = GradSet::from_parts(theta.shape().clone(), (0..theta.data().len()).map(|i| (i as f64).sin()).collect());
        let a = anchored_step(&theta, &grad, &anchor, &fisher, 0.0, 0.05).unwrap();
        let b = nn::optimizer_step(&theta, &grad, 0.05).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn anchored_step_approaches_anchor_for_huge_lambda() {
        let theta = two_param_net(&[5.0, -3.0]);
        let anchor = two_param_net(&[1.0, 1.0]);
        let fisher = GradSet::from_parts(theta.shape().clone(), vec![1.0, 1.0]);
        let grad = GradSet::from_parts(theta.shape().clone(), vec![10.0, -10.0]);
        let stepped = anchored_step(&theta, &grad, &anchor, &fisher, 1e12, 0.1).unwrap();
        assert!((stepped.data()[0] - 1.0).abs() < 1e-9);
        assert!((stepped.data()[1] - 1.0).abs() < 1e-9);
        assert!(stepped.is_finite());
    }

    #[test]
    fn anchored_step_matches_hand_computation() {
        let theta = two_param_net(&[1.0, 2.0]);
        let anchor = two_param_net(&[0.5, 2.0]);
        let fisher = GradSet::from_parts(theta.shape().clone(), vec![2.0, 0.0]);
        let grad = GradSet::from_parts(theta.shape().clone(), vec![1.0, -1.0]);
        let lr = 0.1;
        let lambda = 10.0;
        let got = anchored_step(&theta, &grad, &anchor, &fisher, lambda, lr).unwrap();
        let w = lr * lambda * 2.0;
        let expect0 = (1.0 - 0.1 + w * 0.5) / (1.0 + w);
        assert!((got.data()[0] - expect0).abs() < 1e-12);
        assert!((got.data()[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn mixture_prediction_averages_distributions() {
        let avg = average_distributions(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
        assert!((avg[0] - 0.75).abs() < 1e-12);
        assert!((avg[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn joint_inference_is_masked_and_normalized() {
        let spec = NetworkSpec::new(3, vec![4], 4, Activation::Relu);
        let modes: Vec<ParamSet> = (0..2).map(|i| ParamSet::xavier_init(&spec, 40 + i)).collect();
        let mask = LabelMask::from_labels(&[1, 2], 4).unwrap();
        let rho = joint_inference(&modes, &[0.3, -0.2, 0.9], Some(&mask)).unwrap();
        assert_eq!(rho[0], 0.0);
        assert_eq!(rho[3], 0.0);
        let sum: f64 = rho.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fisher_is_nonnegative_and_capped() {
        let spec = NetworkSpec::new(2, vec![3], 2, Activation::Relu);
        let p = ParamSet::xavier_init(&spec, 8);
        let data = toy_dataset(3, 50, 2, 2);
        let f_all = estimate_fisher(&p, &data.samples, None, 1000).unwrap();
        assert!(f_all.data().iter().all(|&v| v >= 0.0));
        let f_cap = estimate_fisher(&p, &data.samples, None, 10).unwrap();
        let f_cap2 = estimate_fisher(&p, &data.samples[..10], None, 10).unwrap();
        assert_eq!(f_cap.data(), f_cap2.data());
    }

    fn train_cfg(epochs: usize) -> ModeTrainConfig {
        ModeTrainConfig { epochs, lr: 0.05, batch_size: 16, fisher_samples: 64 }
    }

    #[test]
    fn single_mode_initialization_equals_plain_training() {
        let spec = NetworkSpec::new(4, vec![6], 3, Activation::Relu);
        let init = ParamSet::xavier_init(&spec, 42);
        let data = toy_dataset(10, 60, 4, 3);
        let ctx = SeedCtx::new(3407, 0);
        let cfg = train_cfg(3);
        let set = initialize_task1(&init, 1, 100.0, 1000.0, &data, None, &cfg, &ctx).unwrap();

        // Plain loop over the identical batch schedule.
        let mut theta = init.clone();
        for epoch in 0..cfg.epochs {
            let batches =
                stream::batch_indices(data.samples.len(), cfg.batch_size, ctx.batch_seed(1, epoch as u64, 0)).unwrap();
            for batch in &batches {
                let items = batch_items(&data.samples, batch, None, None);
                let (_, g) = nn::backward(&theta, &items).unwrap();
                theta = nn::optimizer_step(&theta, &g, cfg.lr).unwrap();
            }
        }
        assert_eq!(set.modes[0].params.data(), theta.data());
    }

    #[test]
    fn spread_penalty_reduces_mode_cosine() {
        let spec = NetworkSpec::new(4, vec![6], 3, Activation::Relu);
        let data = toy_dataset(21, 80, 4, 3);
        let cfg = train_cfg(5);
        let mut wins = 0;
        for seed_index in 0..3 {
            let ctx = SeedCtx::new(3407, seed_index);
            let init = ParamSet::xavier_init(&spec, 1000 + seed_index as u64);
            let with = initialize_task1(&init, 2, 100.0, 1000.0, &data, None, &cfg, &ctx).unwrap();
            let without = initialize_task1(&init, 2, 0.0, 1000.0, &data, None, &cfg, &ctx).unwrap();
            let c_with = pairwise_cosine(&with.mode_params()).unwrap();
            let c_without = pairwise_cosine(&without.mode_params()).unwrap();
            if c_with < c_without {
                wins += 1;
            }
        }
        assert!(wins >= 2, "penalty failed to spread modes in {}/3 runs", 3 - wins);
    }

    fn adapted_set(seed_index: u64, epochs: usize) -> (ModeSet, TaskAdaptReport, TaskDataset, TaskDataset) {
        let spec = NetworkSpec::new(4, vec![6], 3, Activation::Relu);
        let ctx = SeedCtx::new(3407, seed_index);
        let init = ParamSet::xavier_init(&spec, 7 + seed_index);
        let t1 = toy_dataset(31, 60, 4, 3);
        let cfg = train_cfg(epochs);
        let mut set = initialize_task1(&init, 2, 100.0, 1000.0, &t1, None, &cfg, &ctx).unwrap();
        let t2_train = toy_dataset(32 + seed_index, 60, 4, 3);
        let mut t2_val = toy_dataset(90 + seed_index, 20, 4, 3);
        t2_val.split = SplitTag::Val;
        let bt = BacktrackConfig { drift_weight: 0.1, combo_cap: 4096 };
        let report = update_parameters(&mut set, 2, &t2_train, &t2_val, None, &cfg, &bt, &ctx).unwrap();
        (set, report, t2_train, t2_val)
    }

    #[test]
    fn adaptation_records_checkpoints_and_selects_consistently() {
        let (set, report, _train, val) = adapted_set(0, 4);
        for m in &set.modes {
            assert_eq!(m.checkpoints.len(), 5);
            assert_eq!(m.checkpoints[0].0, 0);
            assert_eq!(m.checkpoints[0].1.data(), m.anchor.data());
            assert!(m.params.is_finite());
            assert!(m.fisher.data().iter().all(|&v| v >= 0.0));
        }
        assert!(report.selection.exhaustive);
        assert!(!report.stopped_early);
        let _ = val;
        assert!(
            (report.objective_recomputed - report.selection.objective).abs() <= 1e-9,
            "{} vs {}",
            report.objective_recomputed,
            report.selection.objective
        );
    }

    #[test]
    fn selected_checkpoints_beat_or_match_every_combination() {
        for seed_index in 0..10 {
            let spec = NetworkSpec::new(4, vec![6], 3, Activation::Relu);
            let ctx = SeedCtx::new(3407, seed_index);
            let init = ParamSet::xavier_init(&spec, 7 + seed_index);
            let t1 = toy_dataset(31, 60, 4, 3);
            let cfg = train_cfg(3);
            let mut set = initialize_task1(&init, 2, 100.0, 1000.0, &t1, None, &cfg, &ctx).unwrap();
            let t2_train = toy_dataset(32 + seed_index, 60, 4, 3);
            let mut t2_val = toy_dataset(90 + seed_index, 20, 4, 3);
            t2_val.split = SplitTag::Val;
            adapt_epochs(&mut set, 2, &t2_train, None, &cfg, &ctx).unwrap();
            let counts: Vec<usize> = set.modes.iter().map(|m| m.checkpoints.len()).collect();
            assert_eq!(counts, vec![4, 4]);
            let bt = BacktrackConfig { drift_weight: 0.1, combo_cap: 4096 };
            let sel = backtrack_select(&set.modes, &t2_val, None, &bt).unwrap();
            assert!(sel.exhaustive);

            // Independent scan of all 16 combinations, recomputed from the
            // checkpoints themselves.
            let mut best = f64::INFINITY;
            let mut best_epochs = vec![0, 0];
            for a in 0..4 {
                for b in 0..4 {
                    let epochs = vec![set.modes[0].checkpoints[a].0, set.modes[1].checkpoints[b].0];
                    let j = backtrack_objective(&set.modes, &t2_val, None, 0.1, &epochs).unwrap();
                    if j < best {
                        best = j;
                        best_epochs = epochs;
                    }
                }
            }
            assert_eq!(sel.epochs, best_epochs, "seed {seed_index}");
            assert!((sel.objective - best).abs() <= 1e-9, "seed {seed_index}");
        }
    }

    #[test]
    fn tied_objectives_pick_the_earliest_epochs() {
        let spec = NetworkSpec::new(2, vec![], 2, Activation::Relu);
        let p = ParamSet::xavier_init(&spec, 3);
        let mk_mode = |i: usize| ModeState {
            mode_index: i,
            params: p.clone(),
            anchor: p.clone(),
            fisher: p.zeros_like(),
            checkpoints: vec![(0, p.clone()), (1, p.clone()), (2, p.clone())],
        };
        let modes = vec![mk_mode(0), mk_mode(1)];
        let mut val = toy_dataset(4, 12, 2, 2);
        val.split = SplitTag::Val;
        let bt = BacktrackConfig { drift_weight: 0.1, combo_cap: 4096 };
        let sel = backtrack_select(&modes, &val, None, &bt).unwrap();
        assert_eq!(sel.epochs, vec![0, 0]);
        assert!(sel.exhaustive);
    }

    #[test]
    fn greedy_fallback_engages_above_the_cap() {
        let spec = NetworkSpec::new(2, vec![], 2, Activation::Relu);
        let mk_mode = |i: usize, seed: u64, n_ckpt: usize| {
            let anchor = ParamSet::xavier_init(&spec, seed);
            ModeState {
                mode_index: i,
                params: anchor.clone(),
                anchor: anchor.clone(),
                fisher: anchor.zeros_like(),
                checkpoints: (0..n_ckpt).map(|e| (e, ParamSet::xavier_init(&spec, seed + e as u64))).collect(),
            }
        };
        let modes = vec![mk_mode(0, 10, 5), mk_mode(1, 50, 5)];
        let mut val = toy_dataset(4, 12, 2, 2);
        val.split = SplitTag::Val;
        let bt = BacktrackConfig { drift_weight: 0.1, combo_cap: 8 };
        let sel = backtrack_select(&modes, &val, None, &bt).unwrap();
        assert!(!sel.exhaustive);
        let recomputed = backtrack_objective(&modes, &val, None, 0.1, &sel.epochs).unwrap();
        assert!((recomputed - sel.objective).abs() <= 1e-9);
    }

    #[test]
    fn divergent_learning_rate_trips_the_guard() {
        let spec = NetworkSpec::new(4, vec![6], 3, Activation::Relu);
        let ctx = SeedCtx::new(3407, 0);
        let init = ParamSet::xavier_init(&spec, 7);
        let t1 = toy_dataset(31, 60, 4, 3);
        let cfg = train_cfg(2);
        // Zero anchor strength: adaptation steps are plain gradient steps,
        // so an absurd learning rate must blow up.
        let mut set = initialize_task1(&init, 2, 100.0, 0.0, &t1, None, &cfg, &ctx).unwrap();
        let t2_train = toy_dataset(32, 60, 4, 3);
        let mut t2_val = toy_dataset(90, 20, 4, 3);
        t2_val.split = SplitTag::Val;
        let wild = ModeTrainConfig { epochs: 6, lr: 1e300, batch_size: 16, fisher_samples: 64 };
        let bt = BacktrackConfig { drift_weight: 0.1, combo_cap: 4096 };
        let report = update_parameters(&mut set, 2, &t2_train, &t2_val, None, &wild, &bt, &ctx);
        match report {
            Ok(r) => {
                assert!(set.modes.iter().all(|m| m.params.is_finite()));
                assert!(r.stopped_early, "expected the divergence guard to stop training");
            }
            Err(e) => panic!("divergence guard should not error: {e}"),
        }
    }

    #[test]
    fn update_rejects_task_one() {
        let spec = NetworkSpec::new(2, vec![], 2, Activation::Relu);
        let p = ParamSet::xavier_init(&spec, 3);
        let mut set = ModeSet {
            modes: vec![ModeState {
                mode_index: 0,
                params: p.clone(),
                anchor: p.clone(),
                fisher: p.zeros_like(),
                checkpoints: vec![],
            }],
            beta_max: 100.0,
            beta_min: 1000.0,
        };
        let data = toy_dataset(1, 20, 2, 2);
        let ctx = SeedCtx::new(1, 0);
        let cfg = train_cfg(1);
        let bt = BacktrackConfig { drift_weight: 0.1, combo_cap: 16 };
        assert!(update_parameters(&mut set, 1, &data, &data, None, &cfg, &bt, &ctx).is_err());
    }
}
