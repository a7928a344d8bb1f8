//! Synthetic domain-shift scenarios and labeling-budget sweeps.
//!
//! A linear softmax classifier is fitted on origin-domain samples drawn from
//! per-class Gaussians. Operation records come from the same classes after
//! each class center has moved by a fixed-norm shift. The representation of
//! a record is its raw feature vector.
//!
//! Origin class centers are the vertices of a regular simplex in the first
//! K−1 coordinates. Noise has scale `noise_scale` in the first `latent_dim`
//! coordinates and `ambient_noise` in the rest. A class's shift mixes a move
//! toward the next class's center (weight `shift_alignment`) with a random
//! move in the latent coordinates outside the simplex plane, which the
//! classifier never learned to look at. Only `shifted_fraction` of each
//! class's operation records is drawn around the shifted center.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::baselines::{BaselineKind, BaselineModel};
use crate::calibrator::{CalibratorConfig, CalibratorState, HiddenLabels, LabelOracle};
use crate::clustering::default_cluster_count;
use crate::dataset::{argmax, softmax, Dataset, OperationRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    brier_decomposition, brier_score, high_confidence_counts, lce, CostModel, DEFAULT_BINS,
};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n_operation: usize,
    pub noise_scale: f64,
    /// Distance of each origin class center from the origin.
    pub class_separation: f64,
    /// Norm of every class's shift vector.
    pub shift_magnitude: f64,
    /// Weight in [0, 1] of the direction toward the next class center.
    pub shift_alignment: f64,
    /// Share of each class's operation records drawn around the shifted
    /// center; the rest stay around the origin center.
    pub shifted_fraction: f64,
    /// Coordinates carrying the class structure; at most `feature_dim`.
    pub latent_dim: usize,
    /// Noise scale of the coordinates beyond `latent_dim`.
    pub ambient_noise: f64,
    pub calibration_fraction: f64,
    pub test_fraction: f64,
    pub origin_samples: usize,
    pub fit_iterations: usize,
    pub fit_step: f64,
}

impl ScenarioConfig {
    /// K=3, D=8, N=2000, half calibration and half test. The classifier is
    /// about 99% accurate on the origin domain and about 62% on this one.
    pub fn reference() -> Self {
        Self {
            seed: 20_240_611,
            num_classes: 3,
            feature_dim: 8,
            n_operation: 2000,
            noise_scale: 1.0,
            class_separation: 3.0,
            shift_magnitude: 6.0,
            shift_alignment: 0.5,
            shifted_fraction: 0.4,
            latent_dim: 3,
            ambient_noise: 0.1,
            calibration_fraction: 0.5,
            test_fraction: 0.5,
            origin_samples: 1500,
            fit_iterations: 300,
            fit_step: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.num_classes < 2 {
            return Err(Error::TooFewClasses(self.num_classes));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if self.n_operation < 2 {
            return bad("n_operation must be at least 2");
        }
        if self.latent_dim + 1 < self.num_classes || self.latent_dim > self.feature_dim {
            return bad("latent_dim must lie in [num_classes - 1, feature_dim]");
        }
        if !(0.0..=1.0).contains(&self.shift_alignment) {
            return bad("shift_alignment must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.shifted_fraction) {
            return bad("shifted_fraction must lie in [0, 1]");
        }
        if self.origin_samples == 0 {
            return bad("origin_samples must be positive");
        }
        for v in [
            self.noise_scale,
            self.class_separation,
            self.shift_magnitude,
            self.ambient_noise,
            self.fit_step,
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad("scales must be finite and non-negative");
            }
        }
        if self.noise_scale == 0.0 {
            return bad("noise_scale must be positive");
        }
        let (c, t) = (self.calibration_fraction, self.test_fraction);
        if !(c > 0.0 && c < 1.0 && t > 0.0 && t < 1.0) || (c + t - 1.0).abs() > 1e-9 {
            return bad("calibration and test fractions must lie in (0, 1) and sum to 1");
        }
        let n_cal = self.calibration_size();
        if n_cal == 0 || n_cal == self.n_operation {
            return bad("split leaves one side empty");
        }
        Ok(())
    }

    pub fn calibration_size(&self) -> usize {
        (self.calibration_fraction * self.n_operation as f64).round() as usize
    }
}

/// Multinomial logistic regression `logits = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// One row of length D per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Full-batch gradient descent on mean cross-entropy from zero weights.
    pub fn fit(samples: &[(Vec<f64>, usize)], num_classes: usize, iterations: usize, step: f64) -> Result<Self> {
        let d = samples.first().map(|s| s.0.len()).ok_or(Error::EmptyInput)?;
        let n = samples.len() as f64;
        let mut model = Self {
            weights: vec![vec![0.0; d]; num_classes],
            bias: vec![0.0; num_classes],
        };
        let mut gw = vec![vec![0.0; d]; num_classes];
        let mut gb = vec![0.0; num_classes];
        for _ in 0..iterations {
            gw.iter_mut().for_each(|row| row.fill(0.0));
            gb.fill(0.0);
            for (x, y) in samples {
                let p = softmax(&model.logits(x))?;
                for k in 0..num_classes {
                    let r = p[k] - f64::from(u8::from(k == *y));
                    gb[k] += r;
                    for (g, v) in gw[k].iter_mut().zip(x) {
                        *g += r * v;
                    }
                }
            }
            for k in 0..num_classes {
                model.bias[k] -= step * gb[k] / n;
                for (w, g) in model.weights[k].iter_mut().zip(&gw[k]) {
                    *w -= step * g / n;
                }
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScenario {
    pub config: ScenarioConfig,
    pub origin_means: Vec<Vec<f64>>,
    pub operation_means: Vec<Vec<f64>>,
    pub classifier: LinearClassifier,
    /// Classifier accuracy on a fresh origin-domain sample of size `n_operation`.
    pub origin_accuracy: f64,
    /// Operation records without labels.
    pub dataset: Dataset,
    labels: Vec<usize>,
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn scaled(v: Vec<f64>, norm: f64) -> Option<Vec<f64>> {
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (len > 1e-12).then(|| v.into_iter().map(|x| x * norm / len).collect())
}

fn direction<R: Rng>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    loop {
        if let Some(v) = scaled(gaussian_vector(rng, dim), norm) {
            return v;
        }
    }
}

/// Vertices of a regular simplex in `k - 1` dimensions, each at distance
/// `radius` from the origin (Helmert coordinates of the centered basis).
fn simplex(k: usize, radius: f64) -> Vec<Vec<f64>> {
    let scale = radius / (1.0 - 1.0 / k as f64).sqrt();
    (0..k)
        .map(|i| {
            (1..k)
                .map(|j| {
                    let norm = ((j * (j + 1)) as f64).sqrt();
                    let h = match i.cmp(&j) {
                        std::cmp::Ordering::Less => 1.0,
                        std::cmp::Ordering::Equal => -(j as f64),
                        std::cmp::Ordering::Greater => 0.0,
                    };
                    scale * h / norm
                })
                .collect()
        })
        .collect()
}

/// Zero-padded to `feature_dim` coordinates.
fn embed(latent: Vec<f64>, feature_dim: usize) -> Vec<f64> {
    let mut v = latent;
    v.resize(feature_dim, 0.0);
    v
}

fn sample_around<R: Rng>(rng: &mut R, mean: &[f64], config: &ScenarioConfig) -> Vec<f64> {
    mean.iter()
        .enumerate()
        .map(|(i, m)| {
            let scale = if i < config.latent_dim {
                config.noise_scale
            } else {
                config.ambient_noise
            };
            m + scale * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<SyntheticScenario> {
    config.validate()?;
    let (k, d, q) = (config.num_classes, config.feature_dim, config.latent_dim);
    let plane = k - 1;

    let origin_means: Vec<Vec<f64>> = simplex(k, config.class_separation)
        .into_iter()
        .map(|m| embed(m, d))
        .collect();
    let mut geometry = substream(config.seed, "scenario.geometry");
    let mut operation_means = Vec::with_capacity(k);
    for (c, m) in origin_means.iter().enumerate() {
        let toward = scaled(
            origin_means[(c + 1) % k].iter().zip(m).map(|(a, b)| a - b).collect(),
            1.0,
        )
        .expect("distinct simplex vertices");
        let off_plane = if q > plane {
            let mut v = vec![0.0; plane];
            v.extend(direction(&mut geometry, q - plane, 1.0));
            embed(v, d)
        } else {
            vec![0.0; d]
        };
        let a = config.shift_alignment;
        let blend = toward
            .iter()
            .zip(&off_plane)
            .map(|(t, o)| a * t + (1.0 - a) * o)
            .collect();
        let shift = scaled(blend, config.shift_magnitude).unwrap_or_else(|| vec![0.0; d]);
        operation_means.push(m.iter().zip(shift).map(|(a, s)| a + s).collect());
    }

    let mut origin_rng = substream(config.seed, "scenario.origin");
    let train: Vec<(Vec<f64>, usize)> = (0..config.origin_samples)
        .map(|i| {
            let y = i % k;
            (sample_around(&mut origin_rng, &origin_means[y], config), y)
        })
        .collect();
    let classifier = LinearClassifier::fit(&train, k, config.fit_iterations, config.fit_step)?;

    let mut holdout_rng = substream(config.seed, "scenario.origin_holdout");
    let hits = (0..config.n_operation)
        .filter(|_| {
            let y = holdout_rng.random_range(0..k);
            let x = sample_around(&mut holdout_rng, &origin_means[y], config);
            classifier.predict(&x) == y
        })
        .count();
    let origin_accuracy = hits as f64 / config.n_operation as f64;

    let mut op_rng = substream(config.seed, "scenario.operation");
    let mut labels = Vec::with_capacity(config.n_operation);
    let records = (0..config.n_operation)
        .map(|i| {
            let y = op_rng.random_range(0..k);
            labels.push(y);
            let shifted = op_rng.random::<f64>() < config.shifted_fraction;
            let center = if shifted { &operation_means[y] } else { &origin_means[y] };
            let x = sample_around(&mut op_rng, center, config);
            let logits = classifier.logits(&x);
            OperationRecord::new(i as u64, x, logits)
        })
        .collect();

    Ok(SyntheticScenario {
        config: config.clone(),
        origin_means,
        operation_means,
        classifier,
        origin_accuracy,
        dataset: Dataset::new(records)?,
        labels,
    })
}

/// The two halves of a scenario: calibration records are unlabeled and
/// reachable only through `oracle`; test records carry their labels.
#[derive(Debug, Clone)]
pub struct ScenarioSplit {
    pub calibration: Dataset,
    pub oracle: HiddenLabels,
    pub test: Dataset,
}

impl SyntheticScenario {
    /// True label of the record at `position`.
    pub fn true_label(&self, position: usize) -> usize {
        self.labels[position]
    }

    /// The whole operation set with labels attached.
    pub fn labeled_dataset(&self) -> Dataset {
        let records = self
            .dataset
            .records()
            .iter()
            .zip(&self.labels)
            .map(|(r, &y)| r.clone().with_label(y))
            .collect();
        Dataset::new(records).expect("scenario records are valid")
    }

    /// Classifier accuracy on the operation records.
    pub fn operation_accuracy(&self) -> f64 {
        let hits = self
            .dataset
            .predicted_classes()
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / self.labels.len() as f64
    }

    /// Splits by position: the first `calibration_size()` records calibrate.
    pub fn split(&self) -> Result<ScenarioSplit> {
        split_labeled(&self.labeled_dataset(), self.config.calibration_size())
    }
}

/// Splits a fully labeled dataset by position and hides the calibration labels.
pub fn split_labeled(dataset: &Dataset, calibration_size: usize) -> Result<ScenarioSplit> {
    let n = dataset.len();
    if calibration_size == 0 || calibration_size >= n {
        return Err(Error::InvalidParameter(format!(
            "calibration size {calibration_size} must lie in [1, {})",
            n
        )));
    }
    if let Some(pos) = dataset.records().iter().position(|r| r.label.is_none()) {
        return Err(Error::Unlabeled(pos + 1));
    }
    let cal_positions: Vec<usize> = (0..calibration_size).collect();
    let test_positions: Vec<usize> = (calibration_size..n).collect();
    let cal = dataset.subset(&cal_positions)?;
    let hidden = cal
        .records()
        .iter()
        .map(|r| (r.id, r.label.expect("checked")))
        .collect();
    Ok(ScenarioSplit {
        calibration: cal.without_labels(),
        oracle: HiddenLabels::new(hidden),
        test: dataset.subset(&test_positions)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Gpr,
    Baseline(BaselineKind),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gpr,
        Method::Baseline(BaselineKind::Temperature),
        Method::Baseline(BaselineKind::PlattConf),
        Method::Baseline(BaselineKind::PlattLogit),
        Method::Baseline(BaselineKind::Isotonic),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gpr => "gpr",
            Method::Baseline(k) => k.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
    pub methods: Vec<Method>,
    pub cost: CostModel,
    /// Cluster count for GPR; `None` uses the default for the calibration size.
    pub clusters: Option<usize>,
    pub seed: u64,
    pub bins: usize,
}

impl SweepConfig {
    /// Budgets 0, 25, 50, 100, 200 with every method.
    pub fn reference(seed: u64) -> Self {
        Self {
            budgets: vec![0, 25, 50, 100, 200],
            methods: Method::ALL.to_vec(),
            cost: CostModel::from_lambda(crate::calibrator::DEFAULT_LAMBDA).expect("valid lambda"),
            clusters: None,
            seed,
            bins: DEFAULT_BINS,
        }
    }
}

/// One (budget, method) cell evaluated on the test split. Counts are stored
/// as reals so repeated sweeps can be averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub budget: usize,
    pub calibrator: String,
    pub brier: f64,
    pub reliability: f64,
    pub resolution: f64,
    pub lce: f64,
    pub hc_correct_08: f64,
    pub hc_false_08: f64,
    pub hc_correct_09: f64,
    pub hc_false_09: f64,
}

pub const SWEEP_HEADER: &str =
    "budget,calibrator,brier,reliability,resolution,lce,hc_correct_08,hc_false_08,hc_correct_09,hc_false_09";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Record ids labeled by the GPR loop, in order.
    pub labeled_ids: Vec<u64>,
    /// Predicted classes changed on the test split, per (budget, method).
    pub changed_predictions: Vec<(usize, String, usize)>,
}

impl SweepResult {
    pub fn row(&self, budget: usize, method: Method) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.budget == budget && r.calibrator == method.name())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.budget,
                r.calibrator,
                r.brier,
                r.reliability,
                r.resolution,
                r.lce,
                r.hc_correct_08,
                r.hc_false_08,
                r.hc_correct_09,
                r.hc_false_09
            )
            .unwrap();
        }
        s
    }

    /// Element-wise mean of sweeps with identical row layouts.
    pub fn average(results: &[SweepResult]) -> Result<SweepResult> {
        let first = results.first().ok_or(Error::EmptyInput)?;
        let n = results.len() as f64;
        let mut rows = first.rows.clone();
        for other in &results[1..] {
            if other.rows.len() != rows.len() {
                return Err(Error::LengthMismatch {
                    left: rows.len(),
                    right: other.rows.len(),
                });
            }
            for (acc, r) in rows.iter_mut().zip(&other.rows) {
                acc.brier += r.brier;
                acc.reliability += r.reliability;
                acc.resolution += r.resolution;
                acc.lce += r.lce;
                acc.hc_correct_08 += r.hc_correct_08;
                acc.hc_false_08 += r.hc_false_08;
                acc.hc_correct_09 += r.hc_correct_09;
                acc.hc_false_09 += r.hc_false_09;
            }
        }
        for r in &mut rows {
            r.brier /= n;
            r.reliability /= n;
            r.resolution /= n;
            r.lce /= n;
            r.hc_correct_08 /= n;
            r.hc_false_08 /= n;
            r.hc_correct_09 /= n;
            r.hc_false_09 /= n;
        }
        Ok(SweepResult {
            rows,
            labeled_ids: Vec::new(),
            changed_predictions: Vec::new(),
        })
    }
}

/// Refuses any id outside the calibration split.
struct GuardedOracle<'a> {
    allowed: &'a Dataset,
    inner: &'a mut dyn LabelOracle,
}

impl LabelOracle for GuardedOracle<'_> {
    fn label(&mut self, id: u64) -> Result<usize> {
        if self.allowed.position_of(id).is_none() {
            return Err(Error::Oracle {
                id,
                reason: "record is outside the calibration split".into(),
            });
        }
        self.inner.label(id)
    }
}

fn row_for(
    budget: usize,
    method: Method,
    confidences: &[f64],
    correct: &[bool],
    config: &SweepConfig,
) -> Result<SweepRow> {
    let parts = brier_decomposition(confidences, correct, config.bins)?;
    let (c8, f8) = high_confidence_counts(confidences, correct, 0.8)?;
    let (c9, f9) = high_confidence_counts(confidences, correct, 0.9)?;
    Ok(SweepRow {
        budget,
        calibrator: method.name().to_string(),
        brier: brier_score(confidences, correct)?,
        reliability: parts.reliability,
        resolution: parts.resolution,
        lce: lce(confidences, correct, &config.cost)?,
        hc_correct_08: c8 as f64,
        hc_false_08: f8 as f64,
        hc_correct_09: c9 as f64,
        hc_false_09: f9 as f64,
    })
}

/// Calibrates on `calibration` at every budget and evaluates on `test`.
///
/// GPR spends labels through its own selection loop; every baseline at budget
/// `b` is fitted on the first `b` records of that same label trace. Budget 0
/// reports the uncalibrated model for every method.
pub fn run_sweep(
    calibration: &Dataset,
    oracle: &mut dyn LabelOracle,
    test: &Dataset,
    config: &SweepConfig,
) -> Result<SweepResult> {
    if config.methods.is_empty() {
        return Err(Error::InvalidParameter("no calibrators requested".into()));
    }
    if config.budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "budgets must be strictly increasing".into(),
        ));
    }
    let max_budget = config.budgets.last().copied().unwrap_or(0);
    if max_budget > calibration.len() {
        return Err(Error::InvalidParameter(format!(
            "budget {max_budget} exceeds calibration split size {}",
            calibration.len()
        )));
    }
    let cal_ids: HashSet<u64> = calibration.records().iter().map(|r| r.id).collect();
    if let Some(r) = test.records().iter().find(|r| cal_ids.contains(&r.id)) {
        return Err(Error::InvalidParameter(format!(
            "record {} appears in both calibration and test splits",
            r.id
        )));
    }
    let correct = test.correctness()?;
    let original = test.original_confidences();

    let clusters = config
        .clusters
        .unwrap_or_else(|| default_cluster_count(calibration.len()));
    if let Some(&b) = config.budgets.iter().find(|&&b| b > 0 && b < clusters) {
        return Err(Error::InvalidParameter(format!(
            "budget {b} is below the cluster count {clusters}"
        )));
    }

    let mut guarded = GuardedOracle {
        allowed: calibration,
        inner: oracle,
    };
    let mut state = if max_budget > 0 {
        let cal_config = CalibratorConfig::new(clusters, max_budget)
            .with_cost(config.cost)
            .with_seed(config.seed);
        Some(CalibratorState::initialize(calibration, &cal_config, &mut guarded)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut changed_predictions = Vec::new();
    for &budget in &config.budgets {
        if budget == 0 {
            for &m in &config.methods {
                rows.push(row_for(0, m, &original, &correct, config)?);
                changed_predictions.push((0, m.name().to_string(), 0));
            }
            continue;
        }
        let state = state.as_mut().expect("initialized for positive budgets");
        state.run_until(calibration, &mut guarded, budget)?;

        let trace_positions: Vec<usize> = state
            .trace()
            .iter()
            .take(budget)
            .map(|t| calibration.position_of(t.record_id).expect("trace ids are calibration ids"))
            .collect();
        let labels: HashMap<usize, usize> = state
            .trace()
            .iter()
            .take(budget)
            .zip(&trace_positions)
            .map(|(t, &p)| (p, t.assigned_label))
            .collect();
        let train = {
            let records = trace_positions
                .iter()
                .map(|p| calibration.record(*p).clone().with_label(labels[p]))
                .collect();
            Dataset::new(records)?
        };

        for &m in &config.methods {
            let (confidences, hits, changed) = match m {
                Method::Gpr => {
                    let conf = test
                        .records()
                        .iter()
                        .map(|r| state.calibrate_record(r))
                        .collect::<Result<Vec<_>>>()?;
                    (conf, correct.clone(), 0)
                }
                Method::Baseline(kind) => {
                    let model = BaselineModel::fit(kind, &train)?;
                    let (preds, changed) = model.apply_dataset(test)?;
                    let hits = preds
                        .iter()
                        .zip(test.records())
                        .map(|(p, r)| Some(p.predicted_class) == r.label)
                        .collect();
                    (preds.iter().map(|p| p.confidence).collect(), hits, changed)
                }
            };
            rows.push(row_for(budget, m, &confidences, &hits, config)?);
            changed_predictions.push((budget, m.name().to_string(), changed));
        }
    }

    let labeled_ids = state
        .map(|s| s.trace().iter().map(|t| t.record_id).collect())
        .unwrap_or_default();
    Ok(SweepResult {
        rows,
        labeled_ids,
        changed_predictions,
    })
}

/// Generates the scenario, splits it, and sweeps.
pub fn simulate(scenario: &ScenarioConfig, sweep: &SweepConfig) -> Result<SweepResult> {
    let generated = generate_scenario(scenario)?;
    let mut split = generated.split()?;
    run_sweep(&split.calibration, &mut split.oracle, &split.test, sweep)
}
