//! Synthetic task streams with three shift regimes, stratified splits, and
//! seeded batch orders.
//!
//! * `task_il` — each task introduces fresh Gaussian clusters under new,
//!   disjoint labels (task-incremental).
//! * `instance_il` — a fixed label set; each task draws a new mixture
//!   component per class (sub-population shift).
//! * `domain_il` — fixed classes and clusters; task `t` applies a fixed
//!   affine transform (rotation by `t*pi/7` in a random 2-plane, scale
//!   `1 + 0.1t`) to the inputs.
//!
//! Generation is a pure function of the generator arguments and the seed.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Train/val/test fractions used everywhere.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    TaskIl,
    InstanceIl,
    DomainIl,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShiftKind::TaskIl => "task_il",
            ShiftKind::InstanceIl => "instance_il",
            ShiftKind::DomainIl => "domain_il",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_il" => Ok(ShiftKind::TaskIl),
            "instance_il" => Ok(ShiftKind::InstanceIl),
            "domain_il" => Ok(ShiftKind::DomainIl),
            other => Err(Error::Config(format!("unknown stream kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// One split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// 1-based task index.
    pub task_index: usize,
    pub split: SplitTag,
    /// Sorted global labels this task uses.
    pub label_set: Vec<usize>,
    pub samples: Vec<Sample>,
}

/// All three splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_index: usize,
    pub label_set: Vec<usize>,
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub kind: ShiftKind,
    pub input_dim: usize,
    /// Total number of global classes across the stream.
    pub num_classes: usize,
    pub tasks: Vec<TaskData>,
    pub seed: u64,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// 1-based task accessor.
    pub fn task(&self, t: usize) -> Result<&TaskData> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::Index(format!("task {t} out of range 1..={}", self.tasks.len())));
        }
        Ok(&self.tasks[t - 1])
    }
}

/// Generator arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub kind: ShiftKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Isotropic cluster standard deviation.
    pub cluster_sigma: f64,
    /// Cluster means are drawn uniformly from `[-range, range]^d`.
    pub cluster_range: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: ShiftKind::TaskIl,
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 200,
            input_dim: 16,
            cluster_sigma: 0.5,
            cluster_range: 3.0,
        }
    }
}

impl StreamSpec {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            ShiftKind::TaskIl => self.tasks * self.classes_per_task,
            ShiftKind::InstanceIl | ShiftKind::DomainIl => self.classes_per_task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 {
            return Err(Error::Config(format!("stream.tasks = {} (need >= 1)", self.tasks)));
        }
        if self.classes_per_task < 2 {
            return Err(Error::Config(format!(
                "stream.classes_per_task = {} (need >= 2)",
                self.classes_per_task
            )));
        }
        if self.samples_per_class < 30 {
            return Err(Error::Config(format!(
                "stream.samples_per_class = {} (need >= 30)",
                self.samples_per_class
            )));
        }
        if self.input_dim < 2 {
            return Err(Error::Config(format!("stream.input_dim = {} (need >= 2)", self.input_dim)));
        }
        if !(self.cluster_sigma.is_finite() && self.cluster_sigma > 0.0) {
            return Err(Error::Config("stream.cluster_sigma must be positive".into()));
        }
        if !(self.cluster_range.is_finite() && self.cluster_range > 0.0) {
            return Err(Error::Config("stream.cluster_range must be positive".into()));
        }
        Ok(())
    }
}

const SPLIT_TAG: u64 = 0x51;

/// Generates a task stream; a pure function of `(spec, seed)`.
pub fn make_stream(spec: &StreamSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_dim;
    let t_count = spec.tasks;
    let cpt = spec.classes_per_task;
    let spc = spec.samples_per_class;

    // Raw per-task samples before splitting.
    let mut raw: Vec<(Vec<usize>, Vec<Sample>)> = Vec::with_capacity(t_count);
    match spec.kind {
        ShiftKind::TaskIl => {
            for t in 1..=t_count {
                let labels: Vec<usize> = ((t - 1) * cpt..t * cpt).collect();
                let mut samples = Vec::with_capacity(cpt * spc);
                for &label in &labels {
                    let mean = draw_mean(&mut rng, d, spec.cluster_range);
                    for _ in 0..spc {
                        samples.push(Sample { x: draw_point(&mut rng, &mean, spec.cluster_sigma), y: label });
                    }
                }
                raw.push((labels, samples));
            }
        }
        ShiftKind::InstanceIl => {
            let labels: Vec<usize> = (0..cpt).collect();
            for _t in 1..=t_count {
                let mut samples = Vec::with_capacity(cpt * spc);
                for &label in &labels {
                    let mean = draw_mean(&mut rng, d, spec.cluster_range);
                    for _ in 0..spc {
                        samples.push(Sample { x: draw_point(&mut rng, &mean, spec.cluster_sigma), y: label });
                    }
                }
                raw.push((labels.clone(), samples));
            }
        }
        ShiftKind::DomainIl => {
            let labels: Vec<usize> = (0..cpt).collect();
            let means: Vec<Vec<f64>> = (0..cpt).map(|_| draw_mean(&mut rng, d, spec.cluster_range)).collect();
            let (u, v) = random_plane(&mut rng, d)?;
            for t in 1..=t_count {
                let angle = t as f64 * std::f64::consts::PI / 7.0;
                let scale = 1.0 + 0.1 * t as f64;
                let mut samples = Vec::with_capacity(cpt * spc);
                for (label, mean) in labels.iter().zip(&means) {
                    for _ in 0..spc {
                        let x0 = draw_point(&mut rng, mean, spec.cluster_sigma);
                        samples.push(Sample { x: rotate_scale(&x0, &u, &v, angle, scale), y: *label });
                    }
                }
                raw.push((labels.clone(), samples));
            }
        }
    }

    let mut tasks = Vec::with_capacity(t_count);
    for (i, (label_set, samples)) in raw.into_iter().enumerate() {
        let t = i + 1;
        let split_seed = seeding::derive(&[seed, SPLIT_TAG, t as u64]);
        let (train, val, test) = split(&samples, SPLIT_FRACTIONS, split_seed)?;
        tasks.push(TaskData {
            task_index: t,
            label_set: label_set.clone(),
            train: TaskDataset { task_index: t, split: SplitTag::Train, label_set: label_set.clone(), samples: train },
            val: TaskDataset { task_index: t, split: SplitTag::Val, label_set: label_set.clone(), samples: val },
            test: TaskDataset { task_index: t, split: SplitTag::Test, label_set, samples: test },
        });
    }
    Ok(TaskStream { kind: spec.kind, input_dim: d, num_classes: spec.num_classes(), tasks, seed })
}

fn draw_mean(rng: &mut ChaCha8Rng, d: usize, range: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-range..range)).collect()
}

fn draw_point(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthonormal 2-plane via Gram-Schmidt on two Gaussian vectors.
fn random_plane(rng: &mut ChaCha8Rng, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    for _attempt in 0..16 {
        let a: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let na = norm(&a);
        if na < 1e-9 {
            continue;
        }
        let u: Vec<f64> = a.iter().map(|v| v / na).collect();
        let proj = dot(&b, &u);
        let mut w: Vec<f64> = b.iter().zip(&u).map(|(bv, uv)| bv - proj * uv).collect();
        let nw = norm(&w);
        if nw < 1e-9 {
            continue;
        }
        for wv in &mut w {
            *wv /= nw;
        }
        return Ok((u, w));
    }
    Err(Error::Numeric("could not draw an orthonormal 2-plane".into()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rotation by `angle` in the `(u, v)` plane followed by uniform scaling.
fn rotate_scale(x: &[f64], u: &[f64], v: &[f64], angle: f64, scale: f64) -> Vec<f64> {
    let xu = dot(x, u);
    let xv = dot(x, v);
    let (sin, cos) = angle.sin_cos();
    x.iter()
        .enumerate()
        .map(|(i, &xi)| scale * (xi + (cos - 1.0) * (xu * u[i] + xv * v[i]) + sin * (xu * v[i] - xv * u[i])))
        .collect()
}

/// Stratified split with largest-remainder rounding per class.
///
/// Per class, split sizes are within one sample of the exact fractions;
/// remainders go to the splits with the largest fractional parts (ties broken
/// toward the earlier split).
pub fn split(samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let fsum: f64 = fractions.iter().sum();
    if (fsum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    if samples.len() < 10 {
        return Err(Error::Config(format!("split needs >= 10 samples, got {}", samples.len())));
    }
    let classes: BTreeSet<usize> = samples.iter().map(|s| s.y).collect();
    let mut out: [Vec<Sample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].y == class).collect();
        if idx.len() < 3 {
            return Err(Error::Config(format!("class {class} has {} samples (need >= 3)", idx.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(&[seed, class as u64]));
        idx.shuffle(&mut rng);

        let n = idx.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for k in 0..(n - assigned) {
            sizes[order[k % 3]] += 1;
        }

        let mut cursor = 0;
        for (slot, &size) in sizes.iter().enumerate() {
            for &i in &idx[cursor..cursor + size] {
                out[slot].push(samples[i].clone());
            }
            cursor += size;
        }
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}

/// Seeded permutation of `0..n` chunked into batches; every index appears
/// exactly once, the final batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if n == 0 {
        return Err(Error::Argument("cannot batch an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

// ───────────────────────── CSV import/export ─────────────────────────

/// Stream manifest written next to the CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StreamManifest {
    kind: ShiftKind,
    tasks: usize,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
}

fn csv_header(d: usize) -> String {
    let mut cols: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    cols.push("y".into());
    cols.push("task_index".into());
    cols.join(",")
}

fn write_split_csv(path: &Path, ds: &TaskDataset, d: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", csv_header(d))?;
    for s in &ds.samples {
        let mut row = String::with_capacity(d * 20);
        for v in &s.x {
            row.push_str(&format!("{v}"));
            row.push(',');
        }
        row.push_str(&format!("{},{}", s.y, ds.task_index));
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

/// Writes `task_<t>_<split>.csv` per task plus a `manifest.toml`.
pub fn export_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for task in &stream.tasks {
        let t = task.task_index;
        write_split_csv(&dir.join(format!("task_{t}_train.csv")), &task.train, stream.input_dim)?;
        write_split_csv(&dir.join(format!("task_{t}_val.csv")), &task.val, stream.input_dim)?;
        write_split_csv(&dir.join(format!("task_{t}_test.csv")), &task.test, stream.input_dim)?;
    }
    let manifest = StreamManifest {
        kind: stream.kind,
        tasks: stream.tasks.len(),
        input_dim: stream.input_dim,
        num_classes: stream.num_classes,
        seed: stream.seed,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn read_split_csv(path: &Path, d: usize, expect_task: usize, split: SplitTag) -> Result<TaskDataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Serde(format!("{}: empty file", path.display())))?
        .map_err(Error::Io)?;
    if header != csv_header(d) {
        return Err(Error::Serde(format!("{}: unexpected header", path.display())));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Serde(format!("{}:{}: expected {} fields", path.display(), lineno + 2, d + 2)));
        }
        let mut x = Vec::with_capacity(d);
        for fstr in &fields[..d] {
            x.push(fstr.parse::<f64>().map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?);
        }
        let y: usize = fields[d].parse().map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        let t: usize = fields[d + 1].parse().map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if t != expect_task {
            return Err(Error::Serde(format!("{}: row tagged task {t}, expected {expect_task}", path.display())));
        }
        samples.push(Sample { x, y });
    }
    Ok(TaskDataset { task_index: expect_task, split, label_set: Vec::new(), samples })
}

/// Loads a stream previously written by `export_stream`.
pub fn import_stream(dir: &Path) -> Result<TaskStream> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: StreamManifest = toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    let d = manifest.input_dim;
    let mut tasks = Vec::with_capacity(manifest.tasks);
    for t in 1..=manifest.tasks {
        let mut train = read_split_csv(&dir.join(format!("task_{t}_train.csv")), d, t, SplitTag::Train)?;
        let mut val = read_split_csv(&dir.join(format!("task_{t}_val.csv")), d, t, SplitTag::Val)?;
        let mut test = read_split_csv(&dir.join(format!("task_{t}_test.csv")), d, t, SplitTag::Test)?;
        let labels: BTreeSet<usize> = train
            .samples
            .iter()
            .chain(&val.samples)
            .chain(&test.samples)
            .map(|s| s.y)
            .collect();
        let label_set: Vec<usize> = labels.into_iter().collect();
        train.label_set = label_set.clone();
        val.label_set = label_set.clone();
        test.label_set = label_set.clone();
        tasks.push(TaskData { task_index: t, label_set, train, val, test });
    }
    Ok(TaskStream {
        kind: manifest.kind,
        input_dim: d,
        num_classes: manifest.num_classes,
        tasks,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_il_labels_are_disjoint_and_fresh() {
        let spec = StreamSpec { tasks: 3, classes_per_task: 2, samples_per_class: 40, ..Default::default() };
        let s = make_stream(&spec, 7).unwrap();
        assert_eq!(s.num_classes, 6);
        assert_eq!(s.tasks[0].label_set, vec![0, 1]);
        assert_eq!(s.tasks[1].label_set, vec![2, 3]);
        assert_eq!(s.tasks[2].label_set, vec![4, 5]);
        for task in &s.tasks {
            for split in [&task.train, &task.val, &task.test] {
                assert!(split.samples.iter().all(|smp| task.label_set.contains(&smp.y)));
            }
        }
    }

    #[test]
    fn domain_il_shares_labels_but_shifts_inputs() {
        let spec = StreamSpec {
            kind: ShiftKind::DomainIl,
            tasks: 3,
            classes_per_task: 2,
            samples_per_class: 40,
            ..Default::default()
        };
        let s = make_stream(&spec, 13).unwrap();
        assert_eq!(s.num_classes, 2);
        assert_eq!(s.tasks[0].label_set, s.tasks[1].label_set);
        assert_eq!(s.tasks[1].label_set, s.tasks[2].label_set);
        assert_ne!(s.tasks[0].train.samples[0].x, s.tasks[1].train.samples[0].x);
    }

    #[test]
    fn instance_il_keeps_label_set_fixed() {
        let spec = StreamSpec {
            kind: ShiftKind::InstanceIl,
            tasks: 4,
            classes_per_task: 3,
            samples_per_class: 33,
            ..Default::default()
        };
        let s = make_stream(&spec, 5).unwrap();
        assert_eq!(s.num_classes, 3);
        for task in &s.tasks {
            assert_eq!(task.label_set, vec![0, 1, 2]);
        }
    }

    #[test]
    fn generation_is_bit_identical_for_same_seed() {
        let spec = StreamSpec::default();
        let a = make_stream(&spec, 3407).unwrap();
        let b = make_stream(&spec, 3407).unwrap();
        assert_eq!(a, b);
        let c = make_stream(&spec, 3408).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let mk = |n: usize| -> Vec<Sample> {
            (0..n).map(|i| Sample { x: vec![i as f64], y: 0 }).collect()
        };
        let (tr, va, te) = split(&mk(100), SPLIT_FRACTIONS, 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 10, 20));
        let (tr, va, te) = split(&mk(10), SPLIT_FRACTIONS, 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn split_is_a_partition_and_stratified() {
        let samples: Vec<Sample> = (0..137)
            .map(|i| Sample { x: vec![i as f64, -(i as f64)], y: i % 3 })
            .collect();
        let (tr, va, te) = split(&samples, SPLIT_FRACTIONS, 99).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), samples.len());

        // Union equals the original multiset of inputs.
        let mut seen: Vec<f64> = tr.iter().chain(&va).chain(&te).map(|s| s.x[0]).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<f64> = (0..137).map(|i| i as f64).collect();
        assert_eq!(seen, expect);

        // Per class, each split size is within 1 of the exact fraction.
        for class in 0..3usize {
            let n = samples.iter().filter(|s| s.y == class).count() as f64;
            for (part, f) in [(&tr, 0.7), (&va, 0.1), (&te, 0.2)] {
                let got = part.iter().filter(|s| s.y == class).count() as f64;
                assert!((got - f * n).abs() < 1.0 + 1e-9, "class {class}: {got} vs {}", f * n);
            }
        }
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        let few: Vec<Sample> = (0..9).map(|i| Sample { x: vec![0.0], y: i % 2 }).collect();
        assert!(matches!(split(&few, SPLIT_FRACTIONS, 1), Err(Error::Config(_))));
        let mut lopsided: Vec<Sample> = (0..20).map(|_| Sample { x: vec![0.0], y: 0 }).collect();
        lopsided.push(Sample { x: vec![0.0], y: 1 });
        assert!(matches!(split(&lopsided, SPLIT_FRACTIONS, 1), Err(Error::Config(_))));
    }

    #[test]
    fn batches_cover_everything_once() {
        let batches = batch_indices(130, 64, 5).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_seed_deterministic() {
        assert_eq!(batch_indices(50, 8, 3).unwrap(), batch_indices(50, 8, 3).unwrap());
        assert_ne!(batch_indices(50, 8, 3).unwrap(), batch_indices(50, 8, 4).unwrap());
    }

    #[test]
    fn csv_roundtrip_is_bit_identical() {
        let spec = StreamSpec { tasks: 2, samples_per_class: 30, ..Default::default() };
        let s = make_stream(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_stream(&s, dir.path()).unwrap();
        let r = import_stream(dir.path()).unwrap();
        assert_eq!(s, r);
    }

    #[test]
    fn export_is_byte_stable() {
        let spec = StreamSpec { tasks: 2, samples_per_class: 30, ..Default::default() };
        let s = make_stream(&spec, 11).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        export_stream(&s, d1.path()).unwrap();
        export_stream(&s, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("task_1_train.csv")).unwrap();
        let b = std::fs::read(d2.path().join("task_1_train.csv")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }
}
