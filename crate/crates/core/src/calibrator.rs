//! Operational confidence calibration.
//!
//! Records are clustered in representation space, each medoid is labeled,
//! and one GP per cluster regresses the correction `I − c_M`. Further labels
//! are spent one at a time on the unlabeled record minimizing
//! `|μ_tn − λ| / σ_tn` across all clusters, after which only that record's
//! cluster is refit. The calibrated confidence is the truncated-normal mean;
//! the model's predicted class is never touched.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::clustering::{k_medoids, squared_distance};
use crate::dataset::{derive_outputs, Dataset, ModelOutputs, OperationRecord};
use crate::error::{Error, Result};
use crate::gp::{
    median_heuristic_ell, truncated_moments, ConfidencePosterior, GpModel, RbfKernel,
    DEFAULT_JITTER, SIGMA_FLOOR,
};
use crate::metrics::CostModel;
use crate::rng::substream;

/// Selection threshold used when no cost model is supplied.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Supplies true class labels on demand.
pub trait LabelOracle {
    fn label(&mut self, id: u64) -> Result<usize>;
}

/// Reads labels already present in a dataset (the file's label column).
#[derive(Debug)]
pub struct DatasetOracle<'a> {
    dataset: &'a Dataset,
    calls: usize,
}

impl<'a> DatasetOracle<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self { dataset, calls: 0 }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl LabelOracle for DatasetOracle<'_> {
    fn label(&mut self, id: u64) -> Result<usize> {
        self.calls += 1;
        let pos = self.dataset.position_of(id).ok_or(Error::UnknownId(id))?;
        self.dataset.record(pos).label.ok_or_else(|| Error::Oracle {
            id,
            reason: "label column is -1".into(),
        })
    }
}

/// Labels held outside the dataset, e.g. by a synthetic generator.
#[derive(Debug, Clone, Default)]
pub struct HiddenLabels {
    labels: HashMap<u64, usize>,
    requested: Vec<u64>,
}

impl HiddenLabels {
    pub fn new(labels: HashMap<u64, usize>) -> Self {
        Self {
            labels,
            requested: Vec::new(),
        }
    }

    /// Ids asked for so far, in order.
    pub fn requested(&self) -> &[u64] {
        &self.requested
    }

    pub fn peek(&self, id: u64) -> Option<usize> {
        self.labels.get(&id).copied()
    }
}

impl LabelOracle for HiddenLabels {
    fn label(&mut self, id: u64) -> Result<usize> {
        self.requested.push(id);
        self.labels.get(&id).copied().ok_or_else(|| Error::Oracle {
            id,
            reason: "no hidden label".into(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibratorConfig {
    pub clusters: usize,
    pub budget: usize,
    pub cost: Option<CostModel>,
    pub seed: u64,
    pub jitter: f64,
}

impl CalibratorConfig {
    pub fn new(clusters: usize, budget: usize) -> Self {
        Self {
            clusters,
            budget,
            cost: None,
            seed: 0,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub index: usize,
    /// Dataset positions of the members.
    pub members: Vec<usize>,
    pub medoid: usize,
    pub medoid_representation: Vec<f64>,
    pub kernel: RbfKernel,
    /// Length scale fell back to 1.0 (fewer than two distinct members).
    pub length_scale_fallback: bool,
    pub gp: GpModel,
    /// Labeled member positions, in labeling order; aligned with the GP's training set.
    pub labeled: Vec<usize>,
}

/// One labeling event.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub record_id: u64,
    pub cluster: usize,
    pub mu_tn_before: f64,
    pub sigma_tn_before: f64,
    pub assigned_label: usize,
}

pub const TRACE_HEADER: &str = "step,record_id,cluster,mu_tn_before,sigma_tn_before,assigned_label";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.record_id, r.cluster, r.mu_tn_before, r.sigma_tn_before, r.assigned_label
        )
        .unwrap();
    }
    s
}

/// Selection score `|μ_tn − λ| / σ_tn`, with zero-variance records excluded
/// unless they sit exactly on λ.
pub fn selection_score(posterior: &ConfidencePosterior, lambda: f64) -> f64 {
    let gap = (posterior.mu_tn - lambda).abs();
    if posterior.sigma_tn <= SIGMA_FLOOR {
        if gap <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        gap / posterior.sigma_tn
    }
}

/// Index of the `(id, posterior)` candidate with the lowest selection score,
/// lowest id on ties. `None` for an empty slice.
pub fn select_among(candidates: &[(u64, ConfidencePosterior)], lambda: f64) -> Option<usize> {
    let mut best: Option<(f64, u64, usize)> = None;
    for (i, (id, post)) in candidates.iter().enumerate() {
        let score = selection_score(post, lambda);
        let better = match best {
            None => true,
            Some((s, bid, _)) => score < s || (score == s && *id < bid),
        };
        if better {
            best = Some((score, *id, i));
        }
    }
    best.map(|(_, _, i)| i)
}

#[derive(Debug, Clone)]
pub struct CalibratorState {
    clusters: Vec<ClusterModel>,
    assignments: Vec<usize>,
    labels: Vec<Option<usize>>,
    budget: usize,
    labels_used: usize,
    lambda: f64,
    cost: Option<CostModel>,
    seed: u64,
    trace: Vec<TraceRow>,
}

fn fit_cluster_gp(
    dataset: &Dataset,
    kernel: RbfKernel,
    labeled: &[usize],
    labels: &[Option<usize>],
    jitter: f64,
) -> Result<GpModel> {
    let points = labeled
        .iter()
        .map(|&p| dataset.record(p).representation.clone())
        .collect();
    let targets = labeled
        .iter()
        .map(|&p| {
            let out = dataset.output(p);
            let hit = labels[p].expect("labeled") == out.predicted_class;
            f64::from(u8::from(hit)) - out.original_confidence
        })
        .collect();
    GpModel::fit(points, targets, kernel, jitter)
}

impl CalibratorState {
    /// Clusters the dataset, labels every medoid, and fits one single-point GP per cluster.
    pub fn initialize(
        dataset: &Dataset,
        config: &CalibratorConfig,
        oracle: &mut dyn LabelOracle,
    ) -> Result<Self> {
        let n = dataset.len();
        let l = config.clusters;
        if l < 1 || l > n {
            return Err(Error::InvalidParameter(format!(
                "cluster count {l} must lie in [1, {n}]"
            )));
        }
        if config.budget < l {
            return Err(Error::InvalidParameter(format!(
                "budget {} cannot cover one label per medoid ({l} clusters)",
                config.budget
            )));
        }
        let lambda = config.cost.map_or(DEFAULT_LAMBDA, |c| c.lambda());

        let points: Vec<Vec<f64>> = dataset
            .records()
            .iter()
            .map(|r| r.representation.clone())
            .collect();
        let mut rng = substream(config.seed, "kmedoids");
        let clustering = k_medoids(&points, l, &mut rng)?;

        let mut labels = vec![None; n];
        let mut trace = Vec::with_capacity(config.budget.min(n));
        let mut clusters = Vec::with_capacity(l);
        for (c, &medoid) in clustering.medoids.iter().enumerate() {
            let members = clustering.members(c);
            let member_points: Vec<&[f64]> =
                members.iter().map(|&p| points[p].as_slice()).collect();
            let ell = median_heuristic_ell(&member_points);
            let kernel = RbfKernel::new(ell.value)?;

            let prior = truncated_moments(dataset.output(medoid).original_confidence, 0.0, 1.0)?;
            let id = dataset.record(medoid).id;
            let label = check_label(dataset, id, oracle.label(id)?)?;
            labels[medoid] = Some(label);
            trace.push(TraceRow {
                step: trace.len(),
                record_id: id,
                cluster: c,
                mu_tn_before: prior.mu_tn,
                sigma_tn_before: prior.sigma_tn,
                assigned_label: label,
            });

            let labeled = vec![medoid];
            let gp = fit_cluster_gp(dataset, kernel, &labeled, &labels, config.jitter)?;
            clusters.push(ClusterModel {
                index: c,
                members,
                medoid,
                medoid_representation: points[medoid].clone(),
                kernel,
                length_scale_fallback: ell.fallback,
                gp,
                labeled,
            });
        }

        Ok(Self {
            clusters,
            assignments: clustering.assignments,
            labels,
            budget: config.budget,
            labels_used: l,
            lambda,
            cost: config.cost,
            seed: config.seed,
            trace,
        })
    }

    pub fn clusters(&self) -> &[ClusterModel] {
        &self.clusters
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn labels_used(&self) -> usize {
        self.labels_used
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn cost(&self) -> Option<CostModel> {
        self.cost
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Label obtained for the record at `position`, if any.
    pub fn label_at(&self, position: usize) -> Option<usize> {
        self.labels[position]
    }

    /// Dataset positions that have been labeled, in labeling order.
    pub fn labeled_positions(&self, dataset: &Dataset) -> Vec<usize> {
        self.trace
            .iter()
            .map(|r| dataset.position_of(r.record_id).expect("traced id"))
            .collect()
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.len() != self.assignments.len() {
            return Err(Error::LengthMismatch {
                left: self.assignments.len(),
                right: dataset.len(),
            });
        }
        Ok(())
    }

    /// Truncated posterior of the record at `position` under its cluster's GP.
    pub fn posterior_at(&self, dataset: &Dataset, position: usize) -> Result<ConfidencePosterior> {
        let cluster = &self.clusters[self.assignments[position]];
        let pred = cluster.gp.posterior(&dataset.record(position).representation)?;
        truncated_moments(dataset.output(position).original_confidence, pred.mean, pred.std)
    }

    /// Unlabeled record with the lowest selection score; ties go to the lowest id.
    pub fn select_next(&self, dataset: &Dataset) -> Result<u64> {
        self.select_candidate(dataset).map(|(pos, _)| dataset.record(pos).id)
    }

    fn select_candidate(&self, dataset: &Dataset) -> Result<(usize, ConfidencePosterior)> {
        self.check_dataset(dataset)?;
        let mut positions = Vec::new();
        let mut candidates = Vec::new();
        for pos in 0..dataset.len() {
            if self.labels[pos].is_none() {
                positions.push(pos);
                candidates.push((dataset.record(pos).id, self.posterior_at(dataset, pos)?));
            }
        }
        let best = select_among(&candidates, self.lambda).ok_or(Error::NoCandidates)?;
        Ok((positions[best], candidates[best].1))
    }

    /// One select-label-update iteration. `Ok(None)` once the budget is spent
    /// or every record is labeled. On error the state is unchanged.
    pub fn step(
        &mut self,
        dataset: &Dataset,
        oracle: &mut dyn LabelOracle,
    ) -> Result<Option<TraceRow>> {
        if self.labels_used >= self.budget {
            return Ok(None);
        }
        let (pos, before) = match self.select_candidate(dataset) {
            Ok(found) => found,
            Err(Error::NoCandidates) => return Ok(None),
            Err(e) => return Err(e),
        };
        let id = dataset.record(pos).id;
        let label = check_label(dataset, id, oracle.label(id)?)?;

        let c = self.assignments[pos];
        let cluster = &self.clusters[c];
        let mut labeled = cluster.labeled.clone();
        labeled.push(pos);
        let mut labels = self.labels.clone();
        labels[pos] = Some(label);
        let hit = label == dataset.output(pos).predicted_class;
        let target = f64::from(u8::from(hit)) - dataset.output(pos).original_confidence;
        let gp = cluster
            .gp
            .with_observation(dataset.record(pos).representation.clone(), target)?;

        self.labels = labels;
        let cluster = &mut self.clusters[c];
        cluster.labeled = labeled;
        cluster.gp = gp;
        self.labels_used += 1;
        let row = TraceRow {
            step: self.trace.len(),
            record_id: id,
            cluster: c,
            mu_tn_before: before.mu_tn,
            sigma_tn_before: before.sigma_tn,
            assigned_label: label,
        };
        self.trace.push(row.clone());
        Ok(Some(row))
    }

    /// Runs the loop until `labels_used` reaches `target` (capped by the budget).
    pub fn run_until(
        &mut self,
        dataset: &Dataset,
        oracle: &mut dyn LabelOracle,
        target: usize,
    ) -> Result<()> {
        while self.labels_used < target.min(self.budget) {
            if self.step(dataset, oracle)?.is_none() {
                break;
            }
        }
        Ok(())
    }

    /// Spends the remaining budget.
    pub fn run(&mut self, dataset: &Dataset, oracle: &mut dyn LabelOracle) -> Result<()> {
        self.run_until(dataset, oracle, self.budget)
    }

    /// Calibrated confidence of a dataset member, using its cluster assignment.
    pub fn calibrated_confidence(&self, dataset: &Dataset, position: usize) -> Result<f64> {
        self.check_dataset(dataset)?;
        Ok(self.posterior_at(dataset, position)?.mu_tn)
    }

    /// Cluster for a record outside the clustered dataset: nearest medoid.
    pub fn cluster_for(&self, representation: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, cluster) in self.clusters.iter().enumerate() {
            let d = squared_distance(&cluster.medoid_representation, representation);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    }

    /// Posterior for an arbitrary record routed to its nearest medoid's cluster.
    pub fn posterior_for(
        &self,
        record: &OperationRecord,
        outputs: &ModelOutputs,
    ) -> Result<ConfidencePosterior> {
        let cluster = &self.clusters[self.cluster_for(&record.representation)];
        let pred = cluster.gp.posterior(&record.representation)?;
        truncated_moments(outputs.original_confidence, pred.mean, pred.std)
    }

    /// Calibrated confidence for a record that was not part of the clustered dataset.
    pub fn calibrate_record(&self, record: &OperationRecord) -> Result<f64> {
        let outputs = derive_outputs(record)?;
        Ok(self.posterior_for(record, &outputs)?.mu_tn)
    }

    /// Flat key=value description of the state.
    pub fn to_kv(&self, dataset: &Dataset) -> String {
        let id = |p: usize| dataset.record(p).id;
        let mut s = String::new();
        writeln!(s, "lambda = {}", self.lambda).unwrap();
        if let Some(cost) = self.cost {
            writeln!(s, "loss_u = {}", cost.loss_u()).unwrap();
        }
        writeln!(s, "budget = {}", self.budget).unwrap();
        writeln!(s, "labels_used = {}", self.labels_used).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "clusters = {}", self.clusters.len()).unwrap();
        for c in &self.clusters {
            let members: Vec<String> = c.members.iter().map(|&p| id(p).to_string()).collect();
            let labeled: Vec<String> = c
                .labeled
                .iter()
                .map(|&p| format!("{}:{}", id(p), self.labels[p].expect("labeled")))
                .collect();
            writeln!(s, "cluster.{}.medoid = {}", c.index, id(c.medoid)).unwrap();
            writeln!(s, "cluster.{}.length_scale = {}", c.index, c.kernel.length_scale()).unwrap();
            writeln!(s, "cluster.{}.jitter = {}", c.index, c.gp.jitter()).unwrap();
            writeln!(s, "cluster.{}.members = {}", c.index, members.join(";")).unwrap();
            writeln!(s, "cluster.{}.labeled = {}", c.index, labeled.join(";")).unwrap();
        }
        s
    }
}

fn check_label(dataset: &Dataset, id: u64, label: usize) -> Result<usize> {
    if label >= dataset.num_classes() {
        return Err(Error::Oracle {
            id,
            reason: format!("label {label} outside [0, {})", dataset.num_classes()),
        });
    }
    Ok(label)
}

/// Convenience wrapper: initialize, then spend the whole budget.
pub fn calibrate(
    dataset: &Dataset,
    config: &CalibratorConfig,
    oracle: &mut dyn LabelOracle,
) -> Result<CalibratorState> {
    let mut state = CalibratorState::initialize(dataset, config, oracle)?;
    state.run(dataset, oracle)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, z: &[f64], logits: &[f64], label: usize) -> OperationRecord {
        OperationRecord::new(id, z.to_vec(), logits.to_vec()).with_label(label)
    }

    fn four_points() -> Dataset {
        Dataset::new(vec![
            rec(0, &[0.0, 0.0], &[2.0, 0.0], 0),
            rec(1, &[0.1, 0.0], &[1.0, 0.0], 1),
            rec(2, &[5.0, 5.0], &[0.0, 3.0], 1),
            rec(3, &[5.1, 5.0], &[0.0, 1.0], 0),
        ])
        .unwrap()
    }

    #[test]
    fn budget_equal_to_clusters_exhausts_at_init() {
        let ds = four_points();
        let mut oracle = DatasetOracle::new(&ds);
        let cfg = CalibratorConfig::new(2, 2);
        let mut state = CalibratorState::initialize(&ds, &cfg, &mut oracle).unwrap();
        assert_eq!(state.labels_used(), 2);
        assert_eq!(oracle.calls(), 2);
        let before = state.trace().to_vec();
        state.run(&ds, &mut oracle).unwrap();
        assert_eq!(state.trace(), &before[..]);
        assert_eq!(oracle.calls(), 2);
        for c in state.clusters() {
            assert_eq!(c.labeled, vec![c.medoid]);
            assert_eq!(c.gp.len(), 1);
        }
    }

    #[test]
    fn budget_below_cluster_count_is_rejected() {
        let ds = four_points();
        let mut oracle = DatasetOracle::new(&ds);
        let cfg = CalibratorConfig::new(3, 2);
        assert!(CalibratorState::initialize(&ds, &cfg, &mut oracle).is_err());
        assert_eq!(oracle.calls(), 0);
    }

    #[test]
    fn oracle_failure_preserves_state() {
        let mut ds = four_points().without_labels();
        ds.attach_label(0, 0).unwrap();
        ds.attach_label(1, 1).unwrap();
        ds.attach_label(2, 1).unwrap();
        ds.attach_label(3, 0).unwrap();
        let mut labels = HashMap::new();
        for r in ds.records() {
            labels.insert(r.id, r.label.unwrap());
        }
        let cfg = CalibratorConfig::new(2, 4);
        let mut full = HiddenLabels::new(labels.clone());
        let state = CalibratorState::initialize(&ds, &cfg, &mut full).unwrap();

        // Remove the label of the first record the loop would ask for.
        let next = state.select_next(&ds).unwrap();
        labels.remove(&next);
        let mut partial = HiddenLabels::new(labels);
        let mut s2 = state.clone();
        assert!(matches!(
            s2.run(&ds, &mut partial),
            Err(Error::Oracle { id, .. }) if id == next
        ));
        assert_eq!(s2.labels_used(), state.labels_used());
        assert_eq!(s2.trace(), state.trace());
    }

    #[test]
    fn selection_score_rules() {
        let mk = |mu_tn, sigma_tn| ConfidencePosterior {
            mu_tn,
            sigma_tn,
            alpha: 0.0,
            beta: 0.0,
            raw_mu: 0.0,
            raw_sigma: 1.0,
            c_m: 0.5,
            degenerate: false,
        };
        assert_eq!(selection_score(&mk(0.8, 0.1), 0.8), 0.0);
        assert!((selection_score(&mk(0.6, 0.1), 0.8) - 2.0).abs() < 1e-12);
        assert!((selection_score(&mk(0.9, 0.5), 0.8) - 0.2).abs() < 1e-12);
        assert!((selection_score(&mk(0.85, 0.1), 0.8) - 0.5).abs() < 1e-12);
        assert_eq!(selection_score(&mk(0.7, 0.0), 0.8), f64::INFINITY);
        assert_eq!(selection_score(&mk(0.8, 0.0), 0.8), 0.0);
    }

    #[test]
    fn trace_csv_shape() {
        let ds = four_points();
        let mut oracle = DatasetOracle::new(&ds);
        let state = calibrate(&ds, &CalibratorConfig::new(2, 3), &mut oracle).unwrap();
        let csv = trace_csv(state.trace());
        assert!(csv.starts_with(TRACE_HEADER));
        assert_eq!(csv.lines().count(), 4);
        let kv = state.to_kv(&ds);
        assert!(kv.contains("labels_used = 3"));
        assert!(kv.contains("cluster.1.medoid = "));
    }
}
