//! Continual-learning metrics: the accuracy-matrix family (average accuracy,
//! backward/forward transfer, remembering, forgetting), parameter drift
//! accounting, and the empirical mode/allocation trade-off report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mota;
use crate::nn::{LabelMask, ParamSet, TensorLike};
use crate::stream::TaskDataset;

/// Lower-triangular accuracy table for a `T`-task run.
///
/// `rows[t-1][v-1]` holds `Acc(theta_t, x_v)` for `v <= t`. `init_row[v-1]`
/// holds `Acc(theta_init, x_v)`; `next_task[v-2]` holds `Acc(theta_{v-1},
/// x_v)` for `v >= 2`, the input to forward transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub init_row: Vec<f64>,
    pub next_task: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>, init_row: Vec<f64>, next_task: Vec<f64>) -> Result<AccuracyMatrix> {
        let m = AccuracyMatrix { rows, init_row, next_task };
        m.validate()?;
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t_count = self.rows.len();
        if t_count == 0 {
            return Err(Error::IncompleteMatrix("no accuracy rows".into()));
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::IncompleteMatrix(format!(
                    "row {} has {} entries, expected {}",
                    t + 1,
                    row.len(),
                    t + 1
                )));
            }
        }
        if self.init_row.len() != t_count {
            return Err(Error::IncompleteMatrix(format!(
                "init row has {} entries, expected {t_count}",
                self.init_row.len()
            )));
        }
        if self.next_task.len() + 1 != t_count {
            return Err(Error::IncompleteMatrix(format!(
                "next-task row has {} entries, expected {}",
                self.next_task.len(),
                t_count - 1
            )));
        }
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if self.rows.iter().flatten().any(|&v| !in_range(v))
            || self.init_row.iter().any(|&v| !in_range(v))
            || self.next_task.iter().any(|&v| !in_range(v))
        {
            return Err(Error::Argument("accuracies must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `Acc(theta_t, x_v)`, 1-based.
    pub fn acc(&self, t: usize, v: usize) -> Result<f64> {
        if t == 0 || v == 0 || t > self.rows.len() || v > t {
            return Err(Error::Index(format!("accuracy entry ({t}, {v}) out of range")));
        }
        Ok(self.rows[t - 1][v - 1])
    }

    fn require(&self, t: usize, what: &str, min: usize) -> Result<()> {
        self.validate()?;
        if t < min || t > self.rows.len() {
            return Err(Error::Argument(format!("{what} needs {min} <= t <= {}, got {t}", self.rows.len())));
        }
        Ok(())
    }
}

/// `(1/t) sum_v Acc(theta_t, x_v)`.
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    m.require(t, "average accuracy", 1)?;
    Ok(m.rows[t - 1].iter().sum::<f64>() / t as f64)
}

/// `(1/(t-1)) sum_{v<t} (Acc(theta_t, x_v) - Acc(theta_v, x_v))`.
pub fn backward_transfer(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    m.require(t, "backward transfer", 2)?;
    let sum: f64 = (1..t).map(|v| m.rows[t - 1][v - 1] - m.rows[v - 1][v - 1]).sum();
    Ok(sum / (t - 1) as f64)
}

/// `(1/(t-1)) sum_{v=2..t} (Acc(theta_{v-1}, x_v) - Acc(theta_init, x_v))`.
pub fn forward_transfer(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    m.require(t, "forward transfer", 2)?;
    let sum: f64 = (2..=t).map(|v| m.next_task[v - 2] - m.init_row[v - 1]).sum();
    Ok(sum / (t - 1) as f64)
}

/// `1 - |min(0, BWT(t))|`.
pub fn remembering(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let bwt = backward_transfer(m, t)?;
    Ok(1.0 - bwt.min(0.0).abs())
}

/// `(1/(T-1)) sum_{v<T} (max_{t in v..T-1} Acc(theta_t, x_v) - Acc(theta_T, x_v))`:
/// peak accuracy before the final task minus ending accuracy.
pub fn forgetting(m: &AccuracyMatrix, t_final: usize) -> Result<f64> {
    m.require(t_final, "forgetting", 2)?;
    let sum: f64 = (1..t_final)
        .map(|v| {
            let peak = (v..t_final).map(|t| m.rows[t - 1][v - 1]).fold(f64::NEG_INFINITY, f64::max);
            peak - m.rows[t_final - 1][v - 1]
        })
        .sum();
    Ok(sum / (t_final - 1) as f64)
}

// ───────────────────────── prediction + accuracy ─────────────────────────

/// A trained predictor: one network, or a mode set evaluated through the
/// mixture prediction.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(ParamSet),
    Modes(Vec<ParamSet>),
}

impl Predictor {
    pub fn predict(&self, x: &[f64], mask: Option<&LabelMask>) -> Result<Vec<f64>> {
        match self {
            Predictor::Single(p) => p.forward_masked(x, mask),
            Predictor::Modes(modes) => mota::joint_inference(modes, x, mask),
        }
    }

    /// Total trainable parameters (summed over modes).
    pub fn param_count(&self) -> usize {
        match self {
            Predictor::Single(p) => p.shape().param_count(),
            Predictor::Modes(modes) => modes.iter().map(|m| m.shape().param_count()).sum(),
        }
    }
}

/// Fraction of samples whose masked argmax matches the label. Ties resolve
/// to the lowest class index.
pub fn evaluate_accuracy(pred: &Predictor, data: &TaskDataset, mask: Option<&LabelMask>) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(Error::Argument("accuracy over an empty dataset is undefined".into()));
    }
    let mut hits = 0usize;
    for s in &data.samples {
        let probs = pred.predict(&s.x, mask)?;
        let mut best = 0usize;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        if best == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.samples.len() as f64)
}

// ───────────────────────── drift accounting ─────────────────────────

/// Per-transition, per-mode parameter movement for one strategy run.
///
/// `distances[t-2][i]` is `dist(theta_{i,t}, theta_{i,t-1})` for transition
/// into task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTrace {
    pub distances: Vec<Vec<f64>>,
}

/// Dimension-normalized squared Euclidean distance `(1/|theta|) sum_d
/// (a_d - b_d)^2`.
pub fn drift_distance(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    crate::nn::check_same_shape(a.shape(), b.shape())?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Cumulative-over-modes distance per transition, averaged over the `T-1`
/// transitions.
pub fn average_task_drift(trace: &DriftTrace) -> Result<f64> {
    if trace.distances.is_empty() {
        return Err(Error::Argument("drift needs at least one task transition".into()));
    }
    let mut total = 0.0;
    for (t, row) in trace.distances.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::Argument(format!("transition {} has no mode distances", t + 2)));
        }
        if row.iter().any(|&d| d < 0.0) {
            return Err(Error::Argument("drift distances must be non-negative".into()));
        }
        total += row.iter().sum::<f64>();
    }
    Ok(total / trace.distances.len() as f64)
}

/// Drift rescaled so the reference strategy sits at exactly 1.0.
pub fn normalize_drift(raw: f64, reference: f64) -> Result<f64> {
    if !(reference.is_finite() && reference > 0.0) {
        return Err(Error::Numeric(format!("drift normalization reference must be positive, got {reference}")));
    }
    Ok(raw / reference)
}

// ───────────────────────── trade-off report ─────────────────────────

/// One mode's end-of-task parameter trail through a run.
#[derive(Debug, Clone)]
pub struct ModeTrajectory {
    /// `snapshots[t-1]` = parameters after task `t`, for `t = 1..=T`.
    pub snapshots: Vec<ParamSet>,
    /// Selected checkpoint epoch per adapted task (`selected_epochs[t-2]`
    /// for task `t`); 0 means the mode kept its anchor.
    pub selected_epochs: Vec<usize>,
}

/// Empirical comparison of total adaptation movement: multi-mode modes
/// against their architecture's joint reference, versus a single network
/// against its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    /// `multi_total - single_total`; the multi-mode layout is supported when
    /// this is negative.
    pub pi: f64,
    pub multi_total: f64,
    pub single_total: f64,
    /// Tasks allocated to each mode. Task 1 is always allocated (every mode
    /// trains on it); later tasks count as allocated when the selected
    /// checkpoint moved off epoch 0.
    pub allocation: Vec<Vec<usize>>,
    pub supported: bool,
    pub multi_capacity: usize,
    pub single_capacity: usize,
}

/// Relative capacity gap above which the comparison is refused.
pub const CAPACITY_TOLERANCE: f64 = 0.10;

/// Builds the trade-off report.
///
/// Both sums run over the adapted tasks `t = 2..=T`: the multi-mode side
/// adds the dimension-normalized squared distance from each mode's post-task
/// parameters to the mode-architecture joint reference, but only for tasks
/// the mode was allocated (selected epoch > 0); the single-network side adds
/// the same distance to its own joint reference for every task. Task 1 (the
/// shared initialization task) appears in the allocation sets but not in the
/// sums.
pub fn tradeoff_report(
    modes: &[ModeTrajectory],
    mode_reference: &ParamSet,
    single: &[ParamSet],
    single_reference: &ParamSet,
) -> Result<TradeoffReport> {
    if modes.is_empty() {
        return Err(Error::Argument("trade-off needs at least one mode trajectory".into()));
    }
    let t_count = single.len();
    if t_count < 2 {
        return Err(Error::Argument("trade-off needs at least two tasks".into()));
    }
    for m in modes {
        if m.snapshots.len() != t_count {
            return Err(Error::Argument(format!(
                "mode trajectory has {} snapshots, single run has {t_count}",
                m.snapshots.len()
            )));
        }
        if m.selected_epochs.len() != t_count - 1 {
            return Err(Error::Argument(format!(
                "expected {} selected epochs, got {}",
                t_count - 1,
                m.selected_epochs.len()
            )));
        }
    }
    let mode_params = mode_reference.shape().param_count();
    let single_params = single_reference.shape().param_count();
    let multi_capacity = mode_params * modes.len();
    let gap = (multi_capacity as f64 - single_params as f64).abs() / single_params as f64;
    if gap > CAPACITY_TOLERANCE {
        return Err(Error::Refused(format!(
            "capacity mismatch {:.1}% exceeds {:.0}%: {} mode parameters ({} x {}) vs {}",
            gap * 100.0,
            CAPACITY_TOLERANCE * 100.0,
            multi_capacity,
            modes.len(),
            mode_params,
            single_params
        )));
    }

    let mut multi_total = 0.0;
    let mut allocation = Vec::with_capacity(modes.len());
    for m in modes {
        let mut allocated = vec![1usize];
        for t in 2..=t_count {
            if m.selected_epochs[t - 2] > 0 {
                allocated.push(t);
                multi_total += drift_distance(&m.snapshots[t - 1], mode_reference)?;
            }
        }
        allocation.push(allocated);
    }
    let mut single_total = 0.0;
    for t in 2..=t_count {
        single_total += drift_distance(&single[t - 1], single_reference)?;
    }
    let pi = multi_total - single_total;
    Ok(TradeoffReport {
        pi,
        multi_total,
        single_total,
        allocation,
        supported: pi < 0.0,
        multi_capacity,
        single_capacity: single_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetShape, NetworkSpec};
    use crate::stream::{Sample, SplitTag};

    fn fixture() -> AccuracyMatrix {
        AccuracyMatrix::new(
            vec![vec![0.9], vec![0.8, 0.9], vec![0.7, 0.85, 0.9]],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.5, 0.55],
        )
        .unwrap()
    }

    #[test]
    fn metric_fixture_reproduces_hand_values() {
        let m = fixture();
        let avg = average_accuracy(&m, 3).unwrap();
        assert!((avg - (0.7 + 0.85 + 0.9) / 3.0).abs() < 1e-12);
        assert!((avg - 0.81667).abs() < 1e-5);

        let bwt = backward_transfer(&m, 3).unwrap();
        assert!((bwt - (-0.125)).abs() < 1e-12);

        let rem = remembering(&m, 3).unwrap();
        assert!((rem - 0.875).abs() < 1e-12);

        let forg = forgetting(&m, 3).unwrap();
        assert!((forg - 0.125).abs() < 1e-12);

        let fwt = forward_transfer(&m, 3).unwrap();
        let expect = ((0.5 - 1.0 / 3.0) + (0.55 - 1.0 / 3.0)) / 2.0;
        assert!((fwt - expect).abs() < 1e-12);
        assert!((fwt - 0.19167).abs() < 1e-5);
    }

    #[test]
    fn constant_matrix_has_no_transfer_and_no_forgetting() {
        let c = 0.6;
        let m = AccuracyMatrix::new(
            vec![vec![c], vec![c, c], vec![c, c, c]],
            vec![c, c, c],
            vec![c, c],
        )
        .unwrap();
        assert_eq!(backward_transfer(&m, 3).unwrap(), 0.0);
        assert_eq!(remembering(&m, 3).unwrap(), 1.0);
        assert_eq!(forgetting(&m, 3).unwrap(), 0.0);
    }

    #[test]
    fn nonnegative_bwt_keeps_remembering_at_one() {
        let m = AccuracyMatrix::new(
            vec![vec![0.5], vec![0.7, 0.6]],
            vec![0.3, 0.3],
            vec![0.4],
        )
        .unwrap();
        let bwt = backward_transfer(&m, 2).unwrap();
        assert!(bwt > 0.0);
        assert_eq!(remembering(&m, 2).unwrap(), 1.0);
    }

    #[test]
    fn negative_bwt_ties_remembering_to_one_plus_bwt() {
        let m = fixture();
        let bwt = backward_transfer(&m, 3).unwrap();
        assert!(bwt < 0.0);
        let rem = remembering(&m, 3).unwrap();
        assert!((rem - (1.0 + bwt)).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&rem));
    }

    #[test]
    fn malformed_matrices_are_rejected() {
        assert!(AccuracyMatrix::new(vec![vec![0.9, 0.8]], vec![0.3], vec![]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![0.9], vec![0.8, 0.9]], vec![0.3], vec![0.4]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.2]], vec![0.3], vec![]).is_err());
        let m = fixture();
        assert!(backward_transfer(&m, 1).is_err());
        assert!(average_accuracy(&m, 4).is_err());
    }

    fn flat_params(values: &[f64]) -> ParamSet {
        let spec = NetworkSpec::new(1, vec![], values.len() / 2, Activation::Relu);
        let shape = NetShape::from_spec(&spec);
        ParamSet::from_flat(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn drift_distance_hand_case() {
        let a = flat_params(&[0.0, 0.0]);
        let b = flat_params(&[1.0, 1.0]);
        assert!((drift_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(drift_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn average_drift_sums_modes_and_averages_transitions() {
        let trace = DriftTrace { distances: vec![vec![1.0, 0.5], vec![0.25, 0.25]] };
        let avg = average_task_drift(&trace).unwrap();
        assert!((avg - (1.5 + 0.5) / 2.0).abs() < 1e-15);
        assert!(average_task_drift(&DriftTrace { distances: vec![] }).is_err());
    }

    #[test]
    fn drift_is_mode_order_invariant() {
        let trace = DriftTrace { distances: vec![vec![0.125, 0.75], vec![0.3, 0.05]] };
        let swapped = DriftTrace { distances: vec![vec![0.75, 0.125], vec![0.05, 0.3]] };
        let a = average_task_drift(&trace).unwrap();
        let b = average_task_drift(&swapped).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn normalization_anchors_reference_at_one() {
        assert_eq!(normalize_drift(0.37, 0.37).unwrap(), 1.0);
        assert!((normalize_drift(0.1, 0.4).unwrap() - 0.25).abs() < 1e-15);
        assert!(normalize_drift(1.0, 0.0).is_err());
    }

    fn const_dataset(y: usize, n: usize) -> TaskDataset {
        TaskDataset {
            task_index: 1,
            split: SplitTag::Test,
            label_set: vec![0, 1],
            samples: (0..n).map(|i| Sample { x: vec![i as f64 / n as f64], y }).collect(),
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits_with_low_index_ties() {
        // One input, two outputs; weights zero, biases equal: a tie, which
        // must resolve to class 0.
        let p = flat_params(&[0.0, 0.0, 0.5, 0.5]);
        let pred = Predictor::Single(p);
        let zeros = const_dataset(0, 8);
        let ones = const_dataset(1, 8);
        assert_eq!(evaluate_accuracy(&pred, &zeros, None).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&pred, &ones, None).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_respects_the_mask() {
        // Bias favors class 1, but a mask restricted to class 0 forces it.
        let p = flat_params(&[0.0, 0.0, 0.1, 3.0]);
        let pred = Predictor::Single(p);
        let mask = LabelMask::from_labels(&[0], 2).unwrap();
        let zeros = const_dataset(0, 5);
        assert_eq!(evaluate_accuracy(&pred, &zeros, Some(&mask)).unwrap(), 1.0);
        assert!(evaluate_accuracy(&pred, &const_dataset(0, 0), None).is_err());
    }

    #[test]
    fn chance_level_accuracy_for_uniform_predictions() {
        // Zero network: uniform distribution; argmax tie resolves to class
        // 0, so labels drawn uniformly score about 1/k by label frequency.
        let spec = NetworkSpec::new(2, vec![], 4, Activation::Relu);
        let p = ParamSet::from_flat(NetShape::from_spec(&spec), vec![0.0; 12]).unwrap();
        let pred = Predictor::Single(p);
        let n = 5000;
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample { x: vec![i as f64, -(i as f64)], y: i % 4 })
            .collect();
        let ds = TaskDataset { task_index: 1, split: SplitTag::Test, label_set: vec![0, 1, 2, 3], samples };
        let acc = evaluate_accuracy(&pred, &ds, None).unwrap();
        assert!((acc - 0.25).abs() <= 0.02, "{acc}");
    }

    fn traj(points: &[&[f64]], epochs: &[usize]) -> ModeTrajectory {
        ModeTrajectory {
            snapshots: points.iter().map(|p| flat_params(p)).collect(),
            selected_epochs: epochs.to_vec(),
        }
    }

    #[test]
    fn identical_single_mode_trajectories_give_exactly_zero() {
        let points: Vec<&[f64]> = vec![&[0.0, 0.0], &[1.0, 0.5], &[1.5, 0.25]];
        let reference = flat_params(&[2.0, 1.0]);
        let modes = vec![traj(&points, &[3, 2])];
        let single: Vec<ParamSet> = points.iter().map(|p| flat_params(p)).collect();
        let report = tradeoff_report(&modes, &reference, &single, &reference).unwrap();
        assert_eq!(report.pi, 0.0);
        assert!(!report.supported);
        assert_eq!(report.allocation, vec![vec![1, 2, 3]]);
    }

    #[test]
    fn anchored_modes_shrink_the_multi_total() {
        // Two 2-parameter modes that kept their anchors on one task each,
        // both close to the reference, against a capacity-matched
        // 4-parameter single run that wandered.
        let mode_reference = flat_params(&[0.0, 0.0]);
        let modes = vec![
            traj(&[&[0.1, 0.0], &[0.1, 0.1], &[0.1, 0.1]], &[1, 0]),
            traj(&[&[0.0, 0.1], &[0.0, 0.1], &[0.2, 0.1]], &[0, 2]),
        ];
        let single_reference = flat_params(&[0.0, 0.0, 0.0, 0.0]);
        let single = vec![
            flat_params(&[0.5, 0.5, 0.5, 0.5]),
            flat_params(&[1.0, 1.0, 1.0, 1.0]),
            flat_params(&[2.0, 2.0, 2.0, 2.0]),
        ];
        let report = tradeoff_report(&modes, &mode_reference, &single, &single_reference).unwrap();
        assert!(report.pi < 0.0);
        assert!(report.supported);
        assert_eq!(report.allocation, vec![vec![1, 2], vec![1, 3]]);
        assert!(report.allocation.iter().all(|a| !a.is_empty()));
    }

    #[test]
    fn capacity_mismatch_is_refused() {
        let reference_small = flat_params(&[0.0, 0.0]);
        let big_spec = NetworkSpec::new(1, vec![], 3, Activation::Relu);
        let big = ParamSet::from_flat(NetShape::from_spec(&big_spec), vec![0.0; 6]).unwrap();
        let modes = vec![traj(&[&[0.0, 0.0], &[0.1, 0.1]], &[1])];
        let single = vec![big.clone(), big.clone()];
        let err = tradeoff_report(&modes, &reference_small, &single, &big).unwrap_err();
        assert!(matches!(err, Error::Refused(_)), "{err}");
    }
}
