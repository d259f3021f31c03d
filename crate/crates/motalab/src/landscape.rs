//! Loss-landscape export pipeline: capture parameter trajectories, find
//! their top-2 principal directions, evaluate per-task loss grids around a
//! trained point, and write everything as plotting-tool-friendly CSV.
//!
//! The grid axes come from PCA over the training trajectory (power iteration
//! with deflation), the grid is sampled on `linspace(-r, r)^2` with the
//! trained parameters at the exact center, and all grids of one export are
//! normalized jointly to `[0, 1]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::baselines::{EpochSnapshot, Strategy, StrategyRun};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::Predictor;
use crate::nn::{cross_entropy, LabelMask, ParamSet, TensorLike};
use crate::seeding::SeedCtx;
use crate::stream::{TaskDataset, TaskStream};

/// Power-iteration convergence tolerance on `1 - |cos|` between successive
/// iterates.
pub const PCA_TOL: f64 = 1e-10;
/// Relative eigenvalue threshold below which a component counts as rank
/// deficiency rather than signal.
const RANK_EPS: f64 = 1e-12;
const MAX_POWER_ITERS: usize = 100_000;

// ───────────────────────── trajectory store ─────────────────────────

/// An ordered trail of flat parameter snapshots from one training run, plus
/// the final trained point the grids are centered on.
#[derive(Debug, Clone)]
pub struct TrajectorySnapshotStore {
    pub strategy: Strategy,
    pub snapshots: Vec<EpochSnapshot>,
    pub final_params: ParamSet,
}

impl TrajectorySnapshotStore {
    /// Validates shapes and capture order: every snapshot matches the final
    /// parameters' architecture, and each mode's `(task, epoch)` tags
    /// strictly increase.
    pub fn new(
        strategy: Strategy,
        snapshots: Vec<EpochSnapshot>,
        final_params: ParamSet,
    ) -> Result<TrajectorySnapshotStore> {
        if snapshots.is_empty() {
            return Err(Error::Argument("trajectory store needs at least one snapshot".into()));
        }
        for s in &snapshots {
            crate::nn::check_same_shape(s.params.shape(), final_params.shape())?;
        }
        let mut last_seen: Vec<(usize, (usize, usize))> = Vec::new();
        for s in &snapshots {
            let tag = (s.task, s.epoch);
            match last_seen.iter_mut().find(|(m, _)| *m == s.mode_index) {
                Some((_, prev)) => {
                    if tag <= *prev {
                        return Err(Error::Argument(format!(
                            "snapshots out of capture order: mode {} saw {:?} after {:?}",
                            s.mode_index, tag, prev
                        )));
                    }
                    *prev = tag;
                }
                None => last_seen.push((s.mode_index, tag)),
            }
        }
        Ok(TrajectorySnapshotStore { strategy, snapshots, final_params })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

// ───────────────────────── PCA directions ─────────────────────────

/// An orthonormal pair of parameter-space directions with their explained
/// variance shares.
#[derive(Debug, Clone)]
pub struct Basis {
    pub delta: ParamSet,
    pub eta: ParamSet,
    /// Fraction of total trajectory variance along each direction.
    pub explained: [f64; 2],
}

/// Applies `C v` for the mean-centered covariance `C = X^T X / n` without
/// forming it, minus the already-extracted components.
fn apply_cov(rows: &[Vec<f64>], prev: &[(Vec<f64>, f64)], v: &[f64]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; v.len()];
    for row in rows {
        let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        for (o, r) in out.iter_mut().zip(row) {
            *o += dot * r;
        }
    }
    for o in out.iter_mut() {
        *o /= n;
    }
    for (u, lambda) in prev {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        for (o, ue) in out.iter_mut().zip(u) {
            *o -= lambda * dot * ue;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonalize(v: &mut [f64], basis: &[(Vec<f64>, f64)]) {
    for (u, _) in basis {
        let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        for (ve, ue) in v.iter_mut().zip(u) {
            *ve -= dot * ue;
        }
    }
}

/// Flips the vector so its largest-magnitude entry is positive; ties keep
/// the earliest index.
fn fix_sign(v: &mut [f64]) {
    let mut am = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[am].abs() {
            am = i;
        }
    }
    if v[am] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// One deflated power iteration. Returns the unit eigenvector and its
/// eigenvalue, or `None` when the remaining spectrum is numerically zero.
fn power_component(
    rows: &[Vec<f64>],
    prev: &[(Vec<f64>, f64)],
    total_variance: f64,
    seed: u64,
) -> Result<Option<(Vec<f64>, f64)>> {
    let dim = rows[0].len();
    let mut v = vec![0.0; dim];
    let mut rng_seed = seed;
    for attempt in 0..8 {
        let mut rng = crate::seeding::rng_from(&[rng_seed, attempt]);
        use rand::Rng;
        for x in v.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        orthogonalize(&mut v, prev);
        let n = norm(&v);
        if n > 1e-12 {
            for x in v.iter_mut() {
                *x /= n;
            }
            break;
        }
        rng_seed = rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    }
    if (norm(&v) - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric("could not seed a power-iteration start vector".into()));
    }

    for _ in 0..MAX_POWER_ITERS {
        let mut w = apply_cov(rows, prev, &v);
        orthogonalize(&mut w, prev);
        let wn = norm(&w);
        if wn <= total_variance * RANK_EPS {
            return Ok(None);
        }
        for x in w.iter_mut() {
            *x /= wn;
        }
        let cos: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let done = 1.0 - cos.abs() <= PCA_TOL;
        v = w;
        if done {
            let cv = apply_cov(rows, prev, &v);
            let lambda: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
            if lambda <= total_variance * RANK_EPS {
                return Ok(None);
            }
            fix_sign(&mut v);
            return Ok(Some((v, lambda)));
        }
    }
    Err(Error::Numeric("power iteration did not converge".into()))
}

/// Top principal directions of the mean-centered snapshot cloud, at most
/// `k`, with explained-variance shares. Stops early when the remaining
/// variance is numerically zero, so a perfectly linear trajectory yields a
/// single component with share 1.
pub fn principal_directions(store: &TrajectorySnapshotStore, k: usize) -> Result<Vec<(ParamSet, f64)>> {
    if store.snapshots.len() < 3 {
        return Err(Error::Argument(format!(
            "PCA needs at least 3 snapshots, got {}",
            store.snapshots.len()
        )));
    }
    let dim = store.final_params.data().len();
    let n = store.snapshots.len();
    let mut mean = vec![0.0; dim];
    for s in &store.snapshots {
        for (m, x) in mean.iter_mut().zip(s.params.data()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let rows: Vec<Vec<f64>> = store
        .snapshots
        .iter()
        .map(|s| s.params.data().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let total_variance: f64 = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n as f64;
    if total_variance <= 0.0 {
        return Err(Error::DegenerateTrajectory("all trajectory snapshots are identical".into()));
    }

    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    for which in 0..k {
        match power_component(&rows, &found, total_variance, which as u64)? {
            Some(c) => found.push(c),
            None => break,
        }
    }
    let shape = store.final_params.shape().clone();
    found
        .into_iter()
        .map(|(v, lambda)| Ok((ParamSet::from_flat(shape.clone(), v)?, lambda / total_variance)))
        .collect()
}

/// The top-2 PCA directions of a trajectory, orthonormal with deterministic
/// signs. A trajectory spanning fewer than two directions is degenerate.
pub fn pca_top2(store: &TrajectorySnapshotStore) -> Result<Basis> {
    let mut dirs = principal_directions(store, 2)?;
    if dirs.len() < 2 {
        return Err(Error::DegenerateTrajectory(format!(
            "trajectory spans only {} principal direction(s); need 2",
            dirs.len()
        )));
    }
    let (eta, share2) = dirs.pop().expect("two components");
    let (delta, share1) = dirs.pop().expect("two components");
    let dot: f64 = delta.data().iter().zip(eta.data()).map(|(a, b)| a * b).sum();
    if dot.abs() > 1e-8 {
        return Err(Error::Numeric(format!("PCA directions are not orthogonal: |cos| = {}", dot.abs())));
    }
    Ok(Basis { delta, eta, explained: [share1, share2] })
}

// ───────────────────────── loss grids ─────────────────────────

/// Loss samples on `linspace(-half_range, half_range)^2` in the plane
/// spanned by the basis, centered on a trained point. `values[i][j]` pairs
/// coefficient `i` along delta with `j` along eta.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrid {
    pub half_range: f64,
    pub steps: usize,
    pub values: Vec<Vec<f64>>,
    /// `(min, max)` used by joint normalization; set once normalized.
    pub norm_bounds: Option<(f64, f64)>,
}

/// Grid coefficients: `steps` points from `-half_range` to `half_range`
/// with an exact 0.0 at the center.
pub fn grid_coeffs(half_range: f64, steps: usize) -> Result<Vec<f64>> {
    if steps < 3 || steps % 2 == 0 {
        return Err(Error::Argument(format!("steps must be odd and >= 3, got {steps}")));
    }
    if !(half_range.is_finite() && half_range > 0.0) {
        return Err(Error::Argument(format!("half_range must be positive, got {half_range}")));
    }
    let h = (steps / 2) as f64;
    Ok((0..steps).map(|i| (i as f64 - h) / h * half_range).collect())
}

/// Mean cross-entropy of one dataset at fixed parameters, in dataset order.
pub fn dataset_loss(params: &ParamSet, data: &TaskDataset, mask: Option<&LabelMask>) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(Error::Argument("loss over an empty dataset is undefined".into()));
    }
    let mut sum = 0.0;
    for s in &data.samples {
        let probs = params.forward_masked(&s.x, mask)?;
        sum += cross_entropy(&probs, s.y)?;
    }
    Ok(sum / data.samples.len() as f64)
}

/// Evaluates the loss surface around `center` in the `(delta, eta)` plane.
/// Grid points are independent and evaluated in parallel; points whose loss
/// is non-finite (or whose forward pass fails numerically) are recorded as
/// `+inf` sentinels.
pub fn loss_grid(
    center: &ParamSet,
    delta: &ParamSet,
    eta: &ParamSet,
    data: &TaskDataset,
    mask: Option<&LabelMask>,
    half_range: f64,
    steps: usize,
) -> Result<LossGrid> {
    crate::nn::check_same_shape(center.shape(), delta.shape())?;
    crate::nn::check_same_shape(center.shape(), eta.shape())?;
    let coeffs = grid_coeffs(half_range, steps)?;
    let cells = exec::run_indexed(steps * steps, |idx| {
        let (i, j) = (idx / steps, idx % steps);
        let point = center.offset_by(coeffs[i], delta.data(), coeffs[j], eta.data())?;
        dataset_loss(&point, data, mask)
    });
    let mut values = vec![vec![0.0; steps]; steps];
    for (idx, cell) in cells.into_iter().enumerate() {
        let v = match cell {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Numeric(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        values[idx / steps][idx % steps] = v;
    }
    Ok(LossGrid { half_range, steps, values, norm_bounds: None })
}

/// Row-major argmin; ties keep the first scan position.
pub fn grid_argmin(grid: &LossGrid) -> (usize, usize) {
    let mut best = (0, 0);
    for (i, row) in grid.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v < grid.values[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    best
}

/// Rescales every grid jointly onto `[0, 1]` with one affine map over the
/// union of all finite values; `+inf` sentinels map to 1. All-equal inputs
/// collapse to zero grids with a warning.
pub fn normalize_grids(grids: &mut [LossGrid]) -> Result<()> {
    if grids.is_empty() {
        return Err(Error::Argument("nothing to normalize".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for g in grids.iter() {
        for row in &g.values {
            for &v in row {
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() || lo == hi {
        log::warn!("loss grids carry no spread (min = {lo}, max = {hi}); normalizing to zeros");
        for g in grids.iter_mut() {
            for row in g.values.iter_mut() {
                for v in row.iter_mut() {
                    *v = if v.is_finite() { 0.0 } else { 1.0 };
                }
            }
            g.norm_bounds = Some((lo, hi));
        }
        return Ok(());
    }
    let span = hi - lo;
    for g in grids.iter_mut() {
        for row in g.values.iter_mut() {
            for v in row.iter_mut() {
                *v = if v.is_finite() { (*v - lo) / span } else { 1.0 };
            }
        }
        g.norm_bounds = Some((lo, hi));
    }
    Ok(())
}

// ───────────────────────── trajectory projection ─────────────────────────

/// One snapshot projected into the grid plane, relative to the grid center.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub task: usize,
    pub epoch: usize,
    pub mode_index: usize,
    pub proj_delta: f64,
    pub proj_eta: f64,
}

/// Projects snapshots onto the basis with `center` as the origin, so the
/// final trained point lands exactly on the grid center.
pub fn project_trajectory(
    snapshots: &[EpochSnapshot],
    center: &ParamSet,
    basis: &Basis,
) -> Result<Vec<ProjectedPoint>> {
    snapshots
        .iter()
        .map(|s| {
            crate::nn::check_same_shape(s.params.shape(), center.shape())?;
            let mut pd = 0.0;
            let mut pe = 0.0;
            for ((x, c), (d, e)) in s
                .params
                .data()
                .iter()
                .zip(center.data())
                .zip(basis.delta.data().iter().zip(basis.eta.data()))
            {
                let diff = x - c;
                pd += diff * d;
                pe += diff * e;
            }
            Ok(ProjectedPoint {
                task: s.task,
                epoch: s.epoch,
                mode_index: s.mode_index,
                proj_delta: pd,
                proj_eta: pe,
            })
        })
        .collect()
}

/// Default grid half-range: 1.5 times the largest absolute projected
/// coordinate, so the whole trajectory fits inside the grid.
pub fn default_half_range(points: &[ProjectedPoint], factor: f64) -> f64 {
    let max_abs = points
        .iter()
        .flat_map(|p| [p.proj_delta.abs(), p.proj_eta.abs()])
        .fold(0.0f64, f64::max);
    if max_abs > 0.0 && max_abs.is_finite() {
        factor * max_abs
    } else {
        1.0
    }
}

// ───────────────────────── export pipeline ─────────────────────────

/// Export knobs; the defaults match the shipped configuration.
#[derive(Debug, Clone, Copy)]
pub struct LandscapeParams {
    pub steps: usize,
    /// Multiplier on the largest projected coordinate when choosing the
    /// grid half-range.
    pub range_factor: f64,
}

impl Default for LandscapeParams {
    fn default() -> Self {
        LandscapeParams { steps: 41, range_factor: 1.5 }
    }
}

fn write_grid_csv(path: &Path, grid: &LossGrid) -> Result<()> {
    let coeffs = grid_coeffs(grid.half_range, grid.steps)?;
    let mut out = String::from("alpha_delta,alpha_eta,loss_norm\n");
    for (i, row) in grid.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", coeffs[i], coeffs[j], v));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_trajectory_csv(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    let mut out = String::from("task,epoch,proj_delta,proj_eta\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.task, p.epoch, p.proj_delta, p.proj_eta));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_directions(path: &Path, basis: &Basis) -> Result<()> {
    let mut f = fs::File::create(path)?;
    basis.delta.write_record(&mut f)?;
    basis.eta.write_record(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Per-task grids around one center, on that task's training split with its
/// evaluation mask.
fn grids_for_center(
    center: &ParamSet,
    basis: &Basis,
    stream: &TaskStream,
    half_range: f64,
    steps: usize,
) -> Result<Vec<(usize, LossGrid)>> {
    let mut grids = Vec::with_capacity(stream.num_tasks());
    for t in 1..=stream.num_tasks() {
        let mask = crate::baselines::task_mask(stream, t)?;
        let grid = loss_grid(center, &basis.delta, &basis.eta, &stream.task(t)?.train, mask.as_ref(), half_range, steps)?;
        grids.push((t, grid));
    }
    Ok(grids)
}

struct ModeExport {
    dir_name: String,
    basis: Basis,
    points: Vec<ProjectedPoint>,
    grids: Vec<(usize, LossGrid)>,
}

fn build_mode_export(
    dir_name: String,
    snapshots: Vec<EpochSnapshot>,
    center: &ParamSet,
    basis: Basis,
    stream: &TaskStream,
    params: &LandscapeParams,
) -> Result<ModeExport> {
    let points = project_trajectory(&snapshots, center, &basis)?;
    let half_range = default_half_range(&points, params.range_factor);
    let grids = grids_for_center(center, &basis, stream, half_range, params.steps)?;
    Ok(ModeExport { dir_name, basis, points, grids })
}

/// Runs the full pipeline for one strategy run and writes
/// `landscape/<strategy>/...` under `out_root`.
///
/// Single-network strategies get `directions.bin`, `trajectory.csv`, and
/// `task_<t>.csv` directly in their directory. Multi-mode strategies get a
/// `mode_<i>/` tree per mode (that mode's own PCA basis and grids) plus a
/// `shared/` tree whose basis is computed over all modes' snapshots jointly.
/// All grids of the export are normalized together.
pub fn export_strategy_landscape(
    out_root: &Path,
    run: &StrategyRun,
    stream: &TaskStream,
    params: &LandscapeParams,
    _ctx: &SeedCtx,
) -> Result<()> {
    if run.epoch_trail.is_empty() {
        return Err(Error::Argument(format!(
            "strategy {} captured no epoch snapshots; rerun with capture enabled",
            run.strategy
        )));
    }
    let finals: Vec<ParamSet> = match run.snapshots.last() {
        Some(Predictor::Single(p)) => vec![p.clone()],
        Some(Predictor::Modes(m)) => m.clone(),
        None => return Err(Error::State("run holds no snapshots".into())),
    };

    let mut exports: Vec<ModeExport> = Vec::new();
    if finals.len() == 1 {
        let store = TrajectorySnapshotStore::new(run.strategy, run.epoch_trail.clone(), finals[0].clone())?;
        let basis = pca_top2(&store)?;
        exports.push(build_mode_export(String::new(), store.snapshots, &finals[0], basis, stream, params)?);
    } else {
        for (i, center) in finals.iter().enumerate() {
            let snaps: Vec<EpochSnapshot> =
                run.epoch_trail.iter().filter(|s| s.mode_index == i).cloned().collect();
            let store = TrajectorySnapshotStore::new(run.strategy, snaps, center.clone())?;
            let basis = pca_top2(&store)?;
            exports.push(build_mode_export(format!("mode_{i}"), store.snapshots, center, basis, stream, params)?);
        }
        let shared_store = TrajectorySnapshotStore::new(
            run.strategy,
            run.epoch_trail.clone(),
            finals.last().expect("nonempty").clone(),
        )?;
        let shared_basis = pca_top2(&shared_store)?;
        for (i, center) in finals.iter().enumerate() {
            let snaps: Vec<EpochSnapshot> =
                run.epoch_trail.iter().filter(|s| s.mode_index == i).cloned().collect();
            exports.push(build_mode_export(
                format!("shared/mode_{i}"),
                snaps,
                center,
                shared_basis.clone(),
                stream,
                params,
            )?);
        }
    }

    let mut all_grids: Vec<&mut LossGrid> = Vec::new();
    for e in exports.iter_mut() {
        for (_, g) in e.grids.iter_mut() {
            all_grids.push(g);
        }
    }
    {
        let mut flat: Vec<LossGrid> = all_grids.iter().map(|g| (**g).clone()).collect();
        normalize_grids(&mut flat)?;
        for (slot, normed) in all_grids.into_iter().zip(flat) {
            *slot = normed;
        }
    }

    let strategy_dir = out_root.join("landscape").join(run.strategy.name());
    for e in &exports {
        let dir = if e.dir_name.is_empty() { strategy_dir.clone() } else { strategy_dir.join(&e.dir_name) };
        fs::create_dir_all(&dir)?;
        write_directions(&dir.join("directions.bin"), &e.basis)?;
        write_trajectory_csv(&dir.join("trajectory.csv"), &e.points)?;
        for (t, grid) in &e.grids {
            write_grid_csv(&dir.join(format!("task_{t}.csv")), grid)?;
        }
    }
    Ok(())
}
