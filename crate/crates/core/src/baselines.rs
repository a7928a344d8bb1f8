//! Conventional calibrators used for comparison.
//!
//! Temperature scaling and Platt-on-logits learn from class labels; Platt on
//! confidence and isotonic regression learn from the correctness indicator.
//! All fits are deterministic. Models serialize to a small TOML key=value
//! block so the CLI can reuse them.

use serde::{Deserialize, Serialize};

use crate::dataset::{argmax, softmax, Dataset, ModelOutputs, OperationRecord};
use crate::error::{Error, Result};

pub const TEMPERATURE_BOUNDS: (f64, f64) = (0.05, 20.0);
pub const TEMPERATURE_TOLERANCE: f64 = 1e-5;
pub const GD_STEP: f64 = 0.1;
pub const GD_MAX_ITERATIONS: usize = 10_000;
pub const GD_GRADIENT_TOLERANCE: f64 = 1e-8;
/// Output range of the constant model returned for single-outcome label sets.
pub const DEGENERATE_CLAMP: f64 = 1e-3;

/// Calibrated view of one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedPrediction {
    pub predicted_class: usize,
    pub confidence: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `(logits, class label, original confidence, correct)` for every labeled record.
struct Labeled<'a> {
    logits: &'a [f64],
    label: usize,
    confidence: f64,
    correct: bool,
}

fn labeled(dataset: &Dataset) -> Vec<Labeled<'_>> {
    dataset
        .records()
        .iter()
        .zip(dataset.outputs())
        .filter_map(|(r, o)| {
            r.label.map(|label| Labeled {
                logits: &r.logits,
                label,
                confidence: o.original_confidence,
                correct: label == o.predicted_class,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
}

impl TemperatureModel {
    pub fn apply(&self, logits: &[f64]) -> Result<CalibratedPrediction> {
        let scaled: Vec<f64> = logits.iter().map(|h| h / self.temperature).collect();
        let p = softmax(&scaled)?;
        let predicted_class = argmax(logits);
        Ok(CalibratedPrediction {
            predicted_class,
            confidence: p[predicted_class],
        })
    }
}

/// Mean negative log-likelihood of the class labels under `softmax(h / T)`.
pub fn temperature_nll(dataset: &Dataset, temperature: f64) -> f64 {
    let data = labeled(dataset);
    nll_at(&data, temperature)
}

fn nll_at(data: &[Labeled<'_>], temperature: f64) -> f64 {
    let mut scaled = Vec::new();
    let total: f64 = data
        .iter()
        .map(|s| {
            scaled.clear();
            scaled.extend(s.logits.iter().map(|h| h / temperature));
            log_sum_exp(&scaled) - scaled[s.label]
        })
        .sum();
    total / data.len() as f64
}

/// Golden-section search for the NLL-minimizing temperature on [0.05, 20].
pub fn fit_temperature(dataset: &Dataset) -> Result<TemperatureModel> {
    let data = labeled(dataset);
    if data.is_empty() {
        return Err(Error::InvalidParameter(
            "temperature scaling needs at least one labeled record".into(),
        ));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = TEMPERATURE_BOUNDS;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = nll_at(&data, x1);
    let mut f2 = nll_at(&data, x2);
    while hi - lo > TEMPERATURE_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = nll_at(&data, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = nll_at(&data, x2);
        }
    }
    Ok(TemperatureModel {
        temperature: 0.5 * (lo + hi),
    })
}

/// `ĉ = 1 / (1 + exp(−a·c_M + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattConfModel {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl PlattConfModel {
    pub fn apply(&self, confidence: f64) -> f64 {
        sigmoid(self.a * confidence - self.b)
    }
}

fn binary_cross_entropy(model: &PlattConfModel, data: &[(f64, f64)]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|&(c, y)| {
            let z = model.a * c - model.b;
            // −[y log σ(z) + (1−y) log(1−σ(z))] = softplus(z) − y z
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            softplus - y * z
        })
        .sum();
    total / data.len() as f64
}

pub fn fit_platt_conf(dataset: &Dataset) -> Result<PlattConfModel> {
    let data: Vec<(f64, f64)> = labeled(dataset)
        .iter()
        .map(|s| (s.confidence, if s.correct { 1.0 } else { 0.0 }))
        .collect();
    fit_platt_pairs(&data)
}

/// Full-batch gradient descent on `(confidence, indicator)` pairs.
pub fn fit_platt_pairs(data: &[(f64, f64)]) -> Result<PlattConfModel> {
    if data.is_empty() {
        return Err(Error::InvalidParameter(
            "Platt scaling needs labeled records".into(),
        ));
    }
    let hits = data.iter().filter(|(_, y)| *y > 0.5).count();
    if hits == 0 || hits == data.len() {
        let rate = (hits as f64 / data.len() as f64).clamp(DEGENERATE_CLAMP, 1.0 - DEGENERATE_CLAMP);
        return Ok(PlattConfModel {
            a: 0.0,
            b: -(rate / (1.0 - rate)).ln(),
            degenerate: true,
        });
    }

    let n = data.len() as f64;
    let mut model = PlattConfModel {
        a: 1.0,
        b: 0.0,
        degenerate: false,
    };
    for _ in 0..GD_MAX_ITERATIONS {
        let (mut ga, mut gb) = (0.0, 0.0);
        for &(c, y) in data {
            let r = sigmoid(model.a * c - model.b) - y;
            ga += r * c;
            gb -= r;
        }
        ga /= n;
        gb /= n;
        if (ga * ga + gb * gb).sqrt() < GD_GRADIENT_TOLERANCE {
            break;
        }
        model.a -= GD_STEP * ga;
        model.b -= GD_STEP * gb;
    }
    Ok(model)
}

/// Training loss of a Platt-on-confidence model on a dataset's labeled records.
pub fn platt_conf_loss(model: &PlattConfModel, dataset: &Dataset) -> f64 {
    let data: Vec<(f64, f64)> = labeled(dataset)
        .iter()
        .map(|s| (s.confidence, if s.correct { 1.0 } else { 0.0 }))
        .collect();
    binary_cross_entropy(model, &data)
}

/// `R(h) = Wᵀh + b` followed by softmax; may change the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlattLogitModel {
    /// `weights[i][j]` multiplies logit `i` into output `j`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    #[serde(default)]
    pub degenerate: bool,
}

impl PlattLogitModel {
    pub fn identity(num_classes: usize) -> Self {
        let weights = (0..num_classes)
            .map(|i| (0..num_classes).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        Self {
            weights,
            bias: vec![0.0; num_classes],
            degenerate: false,
        }
    }

    pub fn transform(&self, logits: &[f64]) -> Vec<f64> {
        let k = self.bias.len();
        (0..k)
            .map(|j| {
                self.bias[j]
                    + logits
                        .iter()
                        .zip(&self.weights)
                        .map(|(h, row)| h * row[j])
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn apply(&self, logits: &[f64]) -> Result<CalibratedPrediction> {
        if logits.len() != self.bias.len() {
            return Err(Error::LengthMismatch {
                left: self.bias.len(),
                right: logits.len(),
            });
        }
        let z = self.transform(logits);
        let p = softmax(&z)?;
        let predicted_class = argmax(&z);
        Ok(CalibratedPrediction {
            predicted_class,
            confidence: p[predicted_class],
        })
    }

    /// Mean multiclass cross-entropy on a dataset's labeled records.
    pub fn loss(&self, dataset: &Dataset) -> f64 {
        let data = labeled(dataset);
        let total: f64 = data
            .iter()
            .map(|s| {
                let z = self.transform(s.logits);
                log_sum_exp(&z) - z[s.label]
            })
            .sum();
        total / data.len() as f64
    }
}

pub fn fit_platt_logit(dataset: &Dataset) -> Result<PlattLogitModel> {
    let data = labeled(dataset);
    if data.is_empty() {
        return Err(Error::InvalidParameter(
            "Platt scaling needs labeled records".into(),
        ));
    }
    let k = dataset.num_classes();
    let n = data.len() as f64;
    let mut model = PlattLogitModel::identity(k);
    model.degenerate = data.iter().all(|s| s.label == data[0].label);

    let mut gw = vec![vec![0.0; k]; k];
    let mut gb = vec![0.0; k];
    for _ in 0..GD_MAX_ITERATIONS {
        gw.iter_mut().for_each(|row| row.fill(0.0));
        gb.fill(0.0);
        for s in &data {
            let z = model.transform(s.logits);
            let p = softmax(&z)?;
            for j in 0..k {
                let r = p[j] - f64::from(u8::from(j == s.label));
                gb[j] += r;
                for (i, h) in s.logits.iter().enumerate() {
                    gw[i][j] += h * r;
                }
            }
        }
        let mut norm = 0.0;
        for j in 0..k {
            gb[j] /= n;
            norm += gb[j] * gb[j];
            for row in gw.iter_mut() {
                row[j] /= n;
                norm += row[j] * row[j];
            }
        }
        if norm.sqrt() < GD_GRADIENT_TOLERANCE {
            break;
        }
        for j in 0..k {
            model.bias[j] -= GD_STEP * gb[j];
            for i in 0..k {
                model.weights[i][j] -= GD_STEP * gw[i][j];
            }
        }
    }
    Ok(model)
}

/// Piecewise-constant non-decreasing map from original confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicModel {
    /// Strictly increasing confidence values.
    pub breakpoints: Vec<f64>,
    /// Fitted value at each breakpoint.
    pub values: Vec<f64>,
}

impl IsotonicModel {
    /// Value of the step function at `confidence`, constant beyond either end.
    pub fn apply(&self, confidence: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= confidence);
        self.values[idx.saturating_sub(1)]
    }
}

/// Least-squares non-decreasing fit by pool-adjacent-violators. Equal `x`
/// values are pooled before the pass.
pub fn pava(pairs: &[(f64, f64)]) -> Result<IsotonicModel> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite isotonic input".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (x, weight, mean) per distinct x
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for (x, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == x => {
                g.2 = (g.2 * g.1 + y) / (g.1 + 1.0);
                g.1 += 1.0;
            }
            _ => groups.push((x, 1.0, y)),
        }
    }

    // Blocks of (weight, mean, number of groups covered).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(groups.len());
    for &(_, w, m) in &groups {
        blocks.push((w, m, 1));
        while blocks.len() > 1 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.1 <= last.1 {
                break;
            }
            let w = prev.0 + last.0;
            let merged = ((prev.0 * prev.1 + last.0 * last.1) / w, prev.2 + last.2);
            blocks.pop();
            *blocks.last_mut().unwrap() = (w, merged.0, merged.1);
        }
    }

    let mut values = Vec::with_capacity(groups.len());
    for (_, mean, span) in blocks {
        values.extend(std::iter::repeat_n(mean, span));
    }
    Ok(IsotonicModel {
        breakpoints: groups.iter().map(|g| g.0).collect(),
        values,
    })
}

pub fn fit_isotonic(dataset: &Dataset) -> Result<IsotonicModel> {
    let pairs: Vec<(f64, f64)> = labeled(dataset)
        .iter()
        .map(|s| (s.confidence, if s.correct { 1.0 } else { 0.0 }))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidParameter(
            "isotonic regression needs at least one labeled record".into(),
        ));
    }
    pava(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    Temperature,
    PlattConf,
    PlattLogit,
    Isotonic,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Temperature,
        BaselineKind::PlattConf,
        BaselineKind::PlattLogit,
        BaselineKind::Isotonic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Temperature => "temperature",
            BaselineKind::PlattConf => "platt_conf",
            BaselineKind::PlattLogit => "platt_logit",
            BaselineKind::Isotonic => "isotonic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether the calibrator is guaranteed to leave predicted classes alone.
    pub fn is_conservative(self) -> bool {
        !matches!(self, BaselineKind::PlattLogit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum BaselineModel {
    Temperature(TemperatureModel),
    PlattConf(PlattConfModel),
    PlattLogit(PlattLogitModel),
    Isotonic(IsotonicModel),
}

impl BaselineModel {
    pub fn fit(kind: BaselineKind, dataset: &Dataset) -> Result<Self> {
        Ok(match kind {
            BaselineKind::Temperature => BaselineModel::Temperature(fit_temperature(dataset)?),
            BaselineKind::PlattConf => BaselineModel::PlattConf(fit_platt_conf(dataset)?),
            BaselineKind::PlattLogit => BaselineModel::PlattLogit(fit_platt_logit(dataset)?),
            BaselineKind::Isotonic => BaselineModel::Isotonic(fit_isotonic(dataset)?),
        })
    }

    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineModel::Temperature(_) => BaselineKind::Temperature,
            BaselineModel::PlattConf(_) => BaselineKind::PlattConf,
            BaselineModel::PlattLogit(_) => BaselineKind::PlattLogit,
            BaselineModel::Isotonic(_) => BaselineKind::Isotonic,
        }
    }

    pub fn apply(
        &self,
        record: &OperationRecord,
        outputs: &ModelOutputs,
    ) -> Result<CalibratedPrediction> {
        let keep = |confidence| CalibratedPrediction {
            predicted_class: outputs.predicted_class,
            confidence,
        };
        match self {
            BaselineModel::Temperature(m) => m.apply(&record.logits),
            BaselineModel::PlattConf(m) => Ok(keep(m.apply(outputs.original_confidence))),
            BaselineModel::PlattLogit(m) => m.apply(&record.logits),
            BaselineModel::Isotonic(m) => Ok(keep(m.apply(outputs.original_confidence))),
        }
    }

    /// Calibrated predictions for every record, plus how many predicted classes changed.
    pub fn apply_dataset(&self, dataset: &Dataset) -> Result<(Vec<CalibratedPrediction>, usize)> {
        let mut changed = 0;
        let preds = dataset
            .records()
            .iter()
            .zip(dataset.outputs())
            .map(|(r, o)| {
                let p = self.apply(r, o)?;
                if p.predicted_class != o.predicted_class {
                    changed += 1;
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, changed))
    }

    pub fn to_kv(&self) -> String {
        toml::to_string(self).expect("baseline models serialize")
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("model block: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled_dataset(rows: &[(&[f64], usize)]) -> Dataset {
        Dataset::new(
            rows.iter()
                .enumerate()
                .map(|(i, (logits, label))| {
                    OperationRecord::new(i as u64, vec![0.0], logits.to_vec()).with_label(*label)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn unit_temperature_is_identity() {
        let m = TemperatureModel { temperature: 1.0 };
        let logits = [1.5, -0.5, 0.2];
        let p = softmax(&logits).unwrap();
        let out = m.apply(&logits).unwrap();
        assert_eq!(out.predicted_class, 0);
        assert_eq!(out.confidence, p[0]);
    }

    #[test]
    fn temperature_limits() {
        let logits = [2.0, 1.0, 0.0];
        let hot = TemperatureModel { temperature: 20.0 }.apply(&logits).unwrap();
        assert!((hot.confidence - 1.0 / 3.0).abs() < 0.04);
        let cold = TemperatureModel { temperature: 0.05 }.apply(&logits).unwrap();
        assert!(cold.confidence > 1.0 - 1e-8);
    }

    #[test]
    fn temperature_needs_labels() {
        let ds = Dataset::new(vec![OperationRecord::new(0, vec![0.0], vec![1.0, 0.0])]).unwrap();
        assert!(fit_temperature(&ds).is_err());
    }

    #[test]
    fn platt_definition() {
        let m = PlattConfModel {
            a: 1.0,
            b: 0.0,
            degenerate: false,
        };
        for c in [0.3, 0.5, 0.99] {
            assert!((m.apply(c) - 1.0 / (1.0 + (-c).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn platt_separable() {
        let mut pairs = Vec::new();
        for i in 0..20 {
            pairs.push((0.35 + 0.005 * i as f64, 0.0));
            pairs.push((0.9 + 0.005 * i as f64, 1.0));
        }
        let m = fit_platt_pairs(&pairs).unwrap();
        assert!(m.a > 1.0);
        let loss = binary_cross_entropy(&m, &pairs);
        assert!(loss < 0.1, "loss {loss}");
    }

    #[test]
    fn platt_uninformative_goes_to_half() {
        let mut pairs = Vec::new();
        for i in 0..50 {
            let c = 0.4 + 0.01 * i as f64;
            pairs.push((c, 1.0));
            pairs.push((c, 0.0));
        }
        let m = fit_platt_pairs(&pairs).unwrap();
        for c in [0.4, 0.6, 0.89] {
            assert!((m.apply(c) - 0.5).abs() < 0.05, "{}", m.apply(c));
        }
    }

    #[test]
    fn platt_degenerate_constant() {
        let m = fit_platt_pairs(&[(0.7, 1.0), (0.9, 1.0)]).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.a, 0.0);
        assert!((m.apply(0.2) - (1.0 - DEGENERATE_CLAMP)).abs() < 1e-12);
        let m = fit_platt_pairs(&[(0.7, 0.0)]).unwrap();
        assert!((m.apply(0.9) - DEGENERATE_CLAMP).abs() < 1e-12);
    }

    #[test]
    fn platt_logit_identity_matches_softmax() {
        let m = PlattLogitModel::identity(3);
        let logits = [0.3, 1.2, -0.7];
        let out = m.apply(&logits).unwrap();
        let p = softmax(&logits).unwrap();
        assert_eq!(out.predicted_class, 1);
        assert!((out.confidence - p[1]).abs() < 1e-15);
    }

    #[test]
    fn platt_logit_learns_label_swap() {
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
        for i in 0..40 {
            let s = 0.5 + 0.05 * i as f64;
            rows.push((vec![s, -s], 1));
            rows.push((vec![-s, s], 0));
        }
        let refs: Vec<(&[f64], usize)> = rows.iter().map(|(l, y)| (l.as_slice(), *y)).collect();
        let ds = labeled_dataset(&refs);
        let m = fit_platt_logit(&ds).unwrap();
        let (preds, changed) = BaselineModel::PlattLogit(m.clone()).apply_dataset(&ds).unwrap();
        let acc = preds
            .iter()
            .zip(ds.records())
            .filter(|(p, r)| Some(p.predicted_class) == r.label)
            .count() as f64
            / ds.len() as f64;
        assert!(acc > 0.9, "accuracy {acc}");
        assert_eq!(changed, ds.len());
        assert!(m.weights[0][1] > m.weights[0][0]);
    }

    #[test]
    fn isotonic_examples() {
        let m = pava(&[(0.2, 0.0), (0.6, 1.0), (0.9, 1.0)]).unwrap();
        assert_eq!(m.values, vec![0.0, 1.0, 1.0]);

        let m = pava(&[(0.4, 1.0), (0.7, 0.0)]).unwrap();
        assert_eq!(m.values, vec![0.5, 0.5]);

        let m = pava(&[(0.5, 1.0), (0.5, 0.0), (0.8, 1.0)]).unwrap();
        assert_eq!(m.breakpoints, vec![0.5, 0.8]);
        assert_eq!(m.values, vec![0.5, 1.0]);
        assert_eq!(m.apply(0.1), 0.5);
        assert_eq!(m.apply(0.5), 0.5);
        assert_eq!(m.apply(0.79), 0.5);
        assert_eq!(m.apply(0.95), 1.0);
        assert!(pava(&[]).is_err());
    }

    #[test]
    fn model_block_round_trip() {
        let models = vec![
            BaselineModel::Temperature(TemperatureModel { temperature: 1.75 }),
            BaselineModel::PlattConf(PlattConfModel {
                a: 2.5,
                b: -0.125,
                degenerate: false,
            }),
            BaselineModel::PlattLogit(PlattLogitModel::identity(3)),
            BaselineModel::Isotonic(pava(&[(0.4, 1.0), (0.7, 0.0), (0.9, 1.0)]).unwrap()),
        ];
        for m in models {
            let text = m.to_kv();
            assert!(text.starts_with("model = "), "{text}");
            assert_eq!(BaselineModel::from_kv(&text).unwrap(), m);
        }
        assert!(BaselineModel::from_kv("model = \"nope\"").is_err());
    }

    #[test]
    fn kind_names() {
        for k in BaselineKind::ALL {
            assert_eq!(BaselineKind::from_name(k.name()), Some(k));
        }
        assert_eq!(BaselineKind::from_name("histogram"), None);
        assert!(!BaselineKind::PlattLogit.is_conservative());
    }
}
