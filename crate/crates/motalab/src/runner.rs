//! Experiment orchestration: turns a parsed config into (strategy, seed)
//! cells, executes them, and persists reports, metric tables, checkpoint
//! files, and landscape exports under the output root.
//!
//! Layout, per run: `<out>/<hash>-s<seed>/` holds the config snapshot, one
//! `<strategy>/report.json` per strategy, `metrics.csv`, the multi-mode
//! checkpoint tree `task_<t>/`, and `landscape/` exports when enabled. The
//! aggregate `<out>/<hash>/` directory holds the cross-seed report and the
//! merged `metrics.csv`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{run_strategy, train_joint_reference, Strategy, StrategyRun};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::landscape::{export_strategy_landscape, LandscapeParams};
use crate::metrics::{self, ModeTrajectory, Predictor, TradeoffReport};
use crate::mota::CheckpointSelection;
use crate::nn::ParamSet;
use crate::seeding::SeedCtx;
use crate::stream::{make_stream, TaskStream};

pub const METRICS_HEADER: &str =
    "strategy,seed,avg_acc,bwt,fwt,remembering,forgetting,drift_raw,drift_norm,capacity_params";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_override: Option<PathBuf>,
    pub master_seed_override: Option<u64>,
    pub force: bool,
}

/// Everything measurable about one finished cell. Transition metrics are
/// absent on single-task streams; the multi-task row uses the fixed
/// (0, 0, 1, 0) convention for (BWT, FWT, Remembering, Forgetting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub avg_acc: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub remembering: Option<f64>,
    pub forgetting: Option<f64>,
    pub drift_raw: Option<f64>,
    /// Drift divided by the same seed's naive-sequential drift; absent when
    /// that reference is not part of the run.
    pub drift_norm: Option<f64>,
    pub capacity_params: usize,
    pub accuracy: Vec<Vec<f64>>,
    pub init_row: Vec<f64>,
    pub next_task_row: Vec<f64>,
    pub selections: Vec<CheckpointSelection>,
    pub stopped_early: bool,
    pub tradeoff: Option<TradeoffReport>,
}

/// One (strategy, seed) result, serialized to `<strategy>/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub error_code: Option<i32>,
    #[serde(default)]
    pub metrics: Option<MetricBundle>,
    pub wall_ms: u64,
}

/// Per-strategy summary over seeds: means plus a best-accuracy seed vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub completed: usize,
    pub failed: usize,
    pub mean_avg_acc: Option<f64>,
    pub mean_forgetting: Option<f64>,
    pub mean_drift_norm: Option<f64>,
    /// Seeds on which this strategy reached the best average accuracy.
    pub best_acc_votes: usize,
    pub capacity_params: Option<usize>,
}

/// The full cross-seed record written to the aggregate directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    /// Where the shipped defaults deviate from the constants they stand in
    /// for; printed as the run header.
    pub deviations: Vec<String>,
    /// Strategy-major: all seeds of the first strategy, then the next.
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<AggregateRow>,
    pub total_wall_ms: u64,
}

impl ExperimentReport {
    /// 0 when every cell succeeded, otherwise the most severe cell failure
    /// class.
    pub fn exit_code(&self) -> i32 {
        self.cells
            .iter()
            .filter(|c| !c.ok)
            .map(|c| c.error_code.unwrap_or(2))
            .max()
            .unwrap_or(0)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(cell: &CellReport) -> String {
    let m = cell.metrics.as_ref();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        cell.strategy,
        cell.seed,
        fmt_opt(m.map(|b| b.avg_acc)),
        fmt_opt(m.and_then(|b| b.bwt)),
        fmt_opt(m.and_then(|b| b.fwt)),
        fmt_opt(m.and_then(|b| b.remembering)),
        fmt_opt(m.and_then(|b| b.forgetting)),
        fmt_opt(m.and_then(|b| b.drift_raw)),
        fmt_opt(m.and_then(|b| b.drift_norm)),
        m.map(|b| b.capacity_params.to_string()).unwrap_or_default(),
    )
}

fn write_metrics_csv(path: &Path, cells: &[&CellReport]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for cell in cells {
        text.push_str(&csv_row(cell));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_cell_report(run_dir: &Path, cell: &CellReport) -> Result<()> {
    let dir = run_dir.join(&cell.strategy);
    fs::create_dir_all(&dir)?;
    let text = serde_json::to_string_pretty(cell).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(dir.join("report.json"), text)?;
    Ok(())
}

fn failed_cell(strategy: Strategy, seed: u64, hash: &str, err: &Error, wall_ms: u64) -> CellReport {
    CellReport {
        strategy: strategy.name().to_string(),
        seed,
        config_hash: hash.to_string(),
        ok: false,
        error: Some(err.to_string()),
        error_code: Some(err.exit_code()),
        metrics: None,
        wall_ms,
    }
}

fn predictor_param_list(p: &Predictor) -> Vec<&ParamSet> {
    match p {
        Predictor::Single(s) => vec![s],
        Predictor::Modes(m) => m.iter().collect(),
    }
}

fn write_params_file(path: &Path, params: &ParamSet) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    params.write_record(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    epochs: &'a [usize],
    objective: f64,
    drift_weight: f64,
    exhaustive: bool,
}

/// Writes the multi-mode checkpoint tree: every recorded per-epoch parameter
/// file plus each adapted task's selection record.
fn persist_mota_checkpoints(run_dir: &Path, run: &StrategyRun, drift_weight: f64) -> Result<()> {
    let t_count = run.snapshots.len();
    for t in 1..=t_count {
        let dir = run_dir.join(format!("task_{t}"));
        fs::create_dir_all(&dir)?;
        let anchor = if t == 1 { &run.init } else { &run.snapshots[t - 2] };
        for (i, params) in predictor_param_list(anchor).into_iter().enumerate() {
            write_params_file(&dir.join(format!("mode_{i}_epoch_0.params")), params)?;
        }
    }
    for snap in &run.epoch_trail {
        let path = run_dir
            .join(format!("task_{}", snap.task))
            .join(format!("mode_{}_epoch_{}.params", snap.mode_index, snap.epoch));
        write_params_file(&path, &snap.params)?;
    }
    for (idx, sel) in run.selections.iter().enumerate() {
        let record = SelectionRecord {
            epochs: &sel.epochs,
            objective: sel.objective,
            drift_weight,
            exhaustive: sel.exhaustive,
        };
        let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(run_dir.join(format!("task_{}", idx + 2)).join("selection.json"), text)?;
    }
    Ok(())
}

type NamedRun = (Strategy, std::result::Result<StrategyRun, Error>, u64);

fn find_ok<'a>(runs: &'a [NamedRun], target: Strategy) -> Option<&'a StrategyRun> {
    runs.iter().find(|(s, _, _)| *s == target).and_then(|(_, r, _)| r.as_ref().ok())
}

/// Builds the movement trade-off comparison for a seed, when the run holds
/// all three required strategies: the multi-mode run supplies the mode
/// trajectories, naive-sequential the single trajectory, and multi-task the
/// single-architecture reference. The mode-architecture reference is trained
/// here on the same union.
fn compute_tradeoff(
    cfg: &ExperimentConfig,
    ctx: &SeedCtx,
    stream: &TaskStream,
    runs: &[NamedRun],
) -> Option<TradeoffReport> {
    let mota = find_ok(runs, Strategy::Mota)?;
    let naive = find_ok(runs, Strategy::NaiveSequential)?;
    let multi = find_ok(runs, Strategy::MultiTask)?;
    match tradeoff_from_runs(cfg, ctx, stream, mota, naive, multi) {
        Ok(report) => Some(report),
        Err(e) => {
            log::warn!("trade-off report skipped: {e}");
            None
        }
    }
}

fn tradeoff_from_runs(
    cfg: &ExperimentConfig,
    ctx: &SeedCtx,
    stream: &TaskStream,
    mota: &StrategyRun,
    naive: &StrategyRun,
    multi: &StrategyRun,
) -> Result<TradeoffReport> {
    let t_count = stream.num_tasks();
    let num_modes = predictor_param_list(&mota.snapshots[0]).len();
    let mut modes = Vec::with_capacity(num_modes);
    for i in 0..num_modes {
        let mut snapshots = Vec::with_capacity(t_count);
        for pred in &mota.snapshots {
            snapshots.push(predictor_param_list(pred)[i].clone());
        }
        let selected_epochs = mota.selections.iter().map(|sel| sel.epochs[i]).collect();
        modes.push(ModeTrajectory { snapshots, selected_epochs });
    }
    let single: Vec<ParamSet> =
        naive.snapshots.iter().map(|p| predictor_param_list(p)[0].clone()).collect();
    let single_reference = predictor_param_list(
        multi.snapshots.last().ok_or_else(|| Error::State("multi-task run has no snapshots".into()))?,
    )[0]
    .clone();
    let train = cfg.run_settings(false)?.train;
    let mode_reference = train_joint_reference(&cfg.mode_spec()?, stream, &train, ctx)?;
    metrics::tradeoff_report(&modes, &mode_reference, &single, &single_reference)
}

fn bundle_from_run(
    run: &StrategyRun,
    naive_raw: Option<f64>,
    tradeoff: Option<TradeoffReport>,
) -> Result<MetricBundle> {
    let m = &run.matrix;
    let t_count = m.num_tasks();
    let avg_acc = metrics::average_accuracy(m, t_count)?;
    let (bwt, fwt, remembering, forgetting) = if t_count < 2 {
        (None, None, None, None)
    } else if run.strategy == Strategy::MultiTask {
        (Some(0.0), Some(0.0), Some(1.0), Some(0.0))
    } else {
        (
            Some(metrics::backward_transfer(m, t_count)?),
            Some(metrics::forward_transfer(m, t_count)?),
            Some(metrics::remembering(m, t_count)?),
            Some(metrics::forgetting(m, t_count)?),
        )
    };
    let drift_norm = match (run.drift_raw, naive_raw) {
        (Some(raw), Some(reference)) => match metrics::normalize_drift(raw, reference) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{}: drift normalization skipped: {e}", run.strategy.name());
                None
            }
        },
        _ => None,
    };
    Ok(MetricBundle {
        avg_acc,
        bwt,
        fwt,
        remembering,
        forgetting,
        drift_raw: run.drift_raw,
        drift_norm,
        capacity_params: run.capacity_params,
        accuracy: m.rows.clone(),
        init_row: m.init_row.clone(),
        next_task_row: m.next_task.clone(),
        selections: run.selections.clone(),
        stopped_early: run.stopped_early,
        tradeoff,
    })
}

fn load_cached_column(
    run_dir: &Path,
    strategies: &[Strategy],
    seed: u64,
    hash: &str,
) -> Option<Vec<CellReport>> {
    let mut cells = Vec::with_capacity(strategies.len());
    for s in strategies {
        let text = fs::read_to_string(run_dir.join(s.name()).join("report.json")).ok()?;
        let cell: CellReport = serde_json::from_str(&text).ok()?;
        if !cell.ok || cell.config_hash != hash || cell.seed != seed || cell.strategy != s.name() {
            return None;
        }
        cells.push(cell);
    }
    Some(cells)
}

fn run_seed_column(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    seed: u64,
    hash: &str,
    out_root: &Path,
    force: bool,
) -> Result<Vec<CellReport>> {
    let run_dir = out_root.join(format!("{hash}-s{seed}"));
    if !force {
        if let Some(cells) = load_cached_column(&run_dir, strategies, seed, hash) {
            log::info!("seed {seed}: {} cached cells, skipping", cells.len());
            return Ok(cells);
        }
    }
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;

    let ctx = SeedCtx::new(cfg.run.master_seed, seed);
    let landscape_on = cfg.landscape.enabled;
    let land_params =
        LandscapeParams { steps: cfg.landscape.steps, range_factor: cfg.landscape.range_factor };

    let mut runs: Vec<NamedRun> = Vec::with_capacity(strategies.len());
    match make_stream(&cfg.stream, ctx.stream_seed()) {
        Ok(stream) => {
            for &strategy in strategies {
                let begun = Instant::now();
                let mut settings = cfg.run_settings(landscape_on)?;
                if strategy == Strategy::Mota {
                    settings.capture_epochs = true;
                }
                let res = run_strategy(strategy, &stream, &settings, &ctx);
                let wall = begun.elapsed().as_millis() as u64;
                match &res {
                    Ok(_) => log::info!("seed {seed}: {strategy} done in {wall} ms"),
                    Err(e) => log::warn!("seed {seed}: {strategy} failed: {e}"),
                }
                runs.push((strategy, res, wall));
            }

            let naive_raw =
                find_ok(&runs, Strategy::NaiveSequential).and_then(|r| r.drift_raw);
            let tradeoff = if stream.num_tasks() >= 2 {
                compute_tradeoff(cfg, &ctx, &stream, &runs)
            } else {
                None
            };

            let mut cells = Vec::with_capacity(strategies.len());
            for (strategy, res, wall) in &runs {
                let cell = match res {
                    Ok(run) => {
                        let extras = finish_cell(cfg, &run_dir, &stream, run, landscape_on, &land_params, &ctx)
                            .and_then(|()| {
                                let cell_tradeoff = if *strategy == Strategy::Mota {
                                    tradeoff.clone()
                                } else {
                                    None
                                };
                                if let Some(t) = &cell_tradeoff {
                                    let text = serde_json::to_string_pretty(t)
                                        .map_err(|e| Error::Serde(e.to_string()))?;
                                    fs::write(run_dir.join(strategy.name()).join("tradeoff.json"), text)?;
                                }
                                bundle_from_run(run, naive_raw, cell_tradeoff)
                            });
                        match extras {
                            Ok(bundle) => CellReport {
                                strategy: strategy.name().to_string(),
                                seed,
                                config_hash: hash.to_string(),
                                ok: true,
                                error: None,
                                error_code: None,
                                metrics: Some(bundle),
                                wall_ms: *wall,
                            },
                            Err(e) => failed_cell(*strategy, seed, hash, &e, *wall),
                        }
                    }
                    Err(e) => failed_cell(*strategy, seed, hash, e, *wall),
                };
                write_cell_report(&run_dir, &cell)?;
                cells.push(cell);
            }
            let refs: Vec<&CellReport> = cells.iter().collect();
            write_metrics_csv(&run_dir.join("metrics.csv"), &refs)?;
            Ok(cells)
        }
        Err(e) => {
            let cells: Vec<CellReport> =
                strategies.iter().map(|&s| failed_cell(s, seed, hash, &e, 0)).collect();
            for cell in &cells {
                write_cell_report(&run_dir, cell)?;
            }
            let refs: Vec<&CellReport> = cells.iter().collect();
            write_metrics_csv(&run_dir.join("metrics.csv"), &refs)?;
            Ok(cells)
        }
    }
}

/// Cell persistence beyond the report: the multi-mode checkpoint tree, and
/// the landscape export when enabled. The `<strategy>/report.json` and
/// tradeoff files are written by the caller.
fn finish_cell(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    stream: &TaskStream,
    run: &StrategyRun,
    landscape_on: bool,
    land_params: &LandscapeParams,
    ctx: &SeedCtx,
) -> Result<()> {
    if run.strategy == Strategy::Mota {
        let dir = run_dir.join(run.strategy.name()).join("checkpoints");
        fs::create_dir_all(&dir)?;
        persist_mota_checkpoints(&dir, run, cfg.mota.drift_weight)?;
    }
    if landscape_on {
        export_strategy_landscape(run_dir, run, stream, land_params, ctx)?;
    }
    Ok(())
}

fn aggregate_rows(
    strategies: &[Strategy],
    n_seeds: usize,
    cells: &[CellReport],
) -> Vec<AggregateRow> {
    let cell = |s: usize, k: usize| &cells[s * n_seeds + k];
    let mut votes = vec![0usize; strategies.len()];
    for k in 0..n_seeds {
        let mut best: Option<f64> = None;
        for s in 0..strategies.len() {
            if let Some(b) = &cell(s, k).metrics {
                best = Some(best.map_or(b.avg_acc, |v: f64| v.max(b.avg_acc)));
            }
        }
        if let Some(top) = best {
            for (s, vote) in votes.iter_mut().enumerate() {
                if cell(s, k).metrics.as_ref().is_some_and(|b| b.avg_acc == top) {
                    *vote += 1;
                }
            }
        }
    }
    let mean = |values: Vec<f64>| {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    strategies
        .iter()
        .enumerate()
        .map(|(s, strategy)| {
            let column: Vec<&CellReport> = (0..n_seeds).map(|k| cell(s, k)).collect();
            let bundles: Vec<&MetricBundle> =
                column.iter().filter_map(|c| c.metrics.as_ref()).collect();
            AggregateRow {
                strategy: strategy.name().to_string(),
                completed: column.iter().filter(|c| c.ok).count(),
                failed: column.iter().filter(|c| !c.ok).count(),
                mean_avg_acc: mean(bundles.iter().map(|b| b.avg_acc).collect()),
                mean_forgetting: mean(bundles.iter().filter_map(|b| b.forgetting).collect()),
                mean_drift_norm: mean(bundles.iter().filter_map(|b| b.drift_norm).collect()),
                best_acc_votes: votes[s],
                capacity_params: bundles.first().map(|b| b.capacity_params),
            }
        })
        .collect()
}

/// Executes every (strategy, seed) cell of the config, reusing completed
/// cells from previous runs of the same config hash unless forced. Returns
/// the cross-seed report and the aggregate directory it was written to.
pub fn run_experiment(
    cfg_in: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<(ExperimentReport, PathBuf)> {
    let begun = Instant::now();
    let mut cfg = cfg_in.clone();
    if let Some(seed) = opts.master_seed_override {
        cfg.run.master_seed = seed;
    }
    cfg.validate()?;
    let hash = cfg.hash()?;
    let out_root =
        opts.out_override.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir));
    let strategies = cfg.strategies()?;
    let seeds = cfg.run.seeds.clone();
    log::info!(
        "config {hash}: {} strategies x {} seeds -> {}",
        strategies.len(),
        seeds.len(),
        out_root.display()
    );

    let columns: Vec<Result<Vec<CellReport>>> = exec::run_indexed(seeds.len(), |k| {
        run_seed_column(&cfg, &strategies, seeds[k], &hash, &out_root, opts.force)
    });
    let mut by_seed = Vec::with_capacity(seeds.len());
    for column in columns {
        by_seed.push(column?);
    }

    let mut cells = Vec::with_capacity(strategies.len() * seeds.len());
    for s in 0..strategies.len() {
        for column in &by_seed {
            cells.push(column[s].clone());
        }
    }
    let aggregates = aggregate_rows(&strategies, seeds.len(), &cells);
    let report = ExperimentReport {
        config_hash: hash.clone(),
        master_seed: cfg.run.master_seed,
        seeds,
        strategies: strategies.iter().map(|s| s.name().to_string()).collect(),
        deviations: cfg.deviation_notes(),
        cells,
        aggregates,
        total_wall_ms: begun.elapsed().as_millis() as u64,
    };

    let agg_dir = out_root.join(&hash);
    fs::create_dir_all(&agg_dir)?;
    fs::write(agg_dir.join("config.toml"), cfg.to_toml()?)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(agg_dir.join("report.json"), text)?;
    let refs: Vec<&CellReport> = report.cells.iter().collect();
    write_metrics_csv(&agg_dir.join("metrics.csv"), &refs)?;
    Ok((report, agg_dir))
}

/// Merges the metric tables of finished runs into one CSV, followed by a
/// capacity table. Run ids name directories under the output root.
pub fn compare_runs(out_root: &Path, run_ids: &[String]) -> Result<String> {
    if run_ids.is_empty() {
        return Err(Error::Config("compare needs at least one run id".into()));
    }
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let mut capacities: Vec<(String, String)> = Vec::new();
    for id in run_ids {
        let path = out_root.join(id).join("metrics.csv");
        let text = fs::read_to_string(&path).map_err(|_| {
            Error::Config(format!("run id `{id}` has no metrics.csv under {}", out_root.display()))
        })?;
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            out.push_str(line);
            out.push('\n');
            let strategy = line.split(',').next().unwrap_or_default().to_string();
            let capacity = line.rsplit(',').next().unwrap_or_default().to_string();
            if !capacity.is_empty() && !capacities.iter().any(|(s, _)| *s == strategy) {
                capacities.push((strategy, capacity));
            }
        }
    }
    out.push('\n');
    out.push_str("strategy,capacity_params\n");
    for (strategy, capacity) in capacities {
        out.push_str(&strategy);
        out.push(',');
        out.push_str(&capacity);
        out.push('\n');
    }
    Ok(out)
}

/// Re-derives one strategy of a finished run and writes its landscape
/// export into the run directory. The run id's `-s<seed>` suffix picks the
/// replicate; an aggregate id falls back to the first configured seed.
pub fn export_landscape_for(out_root: &Path, run_id: &str, strategy: Strategy) -> Result<PathBuf> {
    let run_dir = out_root.join(run_id);
    let cfg_path = run_dir.join("config.toml");
    if !cfg_path.exists() {
        return Err(Error::Config(format!(
            "run id `{run_id}` has no config snapshot under {}",
            out_root.display()
        )));
    }
    let cfg = ExperimentConfig::from_file(&cfg_path)?;
    let seed = match run_id.rsplit_once("-s").and_then(|(_, s)| s.parse::<u64>().ok()) {
        Some(seed) => seed,
        None => cfg.run.seeds[0],
    };
    let ctx = SeedCtx::new(cfg.run.master_seed, seed);
    let stream = make_stream(&cfg.stream, ctx.stream_seed())?;
    let mut settings = cfg.run_settings(true)?;
    settings.capture_epochs = true;
    let run = run_strategy(strategy, &stream, &settings, &ctx)?;
    let land_params =
        LandscapeParams { steps: cfg.landscape.steps, range_factor: cfg.landscape.range_factor };
    export_strategy_landscape(&run_dir, &run, &stream, &land_params, &ctx)?;
    Ok(run_dir.join("landscape").join(strategy.name()))
}
