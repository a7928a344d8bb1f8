//! Brier score, its reliability/resolution/uncertainty decomposition, loss due
//! to confidence error (LCE) under a gain-1 / loss-u cost model, and
//! high-confidence prediction counts.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default number of equal-width confidence bins for the decomposition.
pub const DEFAULT_BINS: usize = 10;

/// Gain 1 for acting on a correct prediction, loss `u` for acting on a wrong one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    loss_u: f64,
    threshold_lambda: f64,
}

impl CostModel {
    pub fn from_loss(loss_u: f64) -> Result<Self> {
        if !(loss_u.is_finite() && loss_u > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss u must be positive and finite, got {loss_u}"
            )));
        }
        Ok(Self {
            loss_u,
            threshold_lambda: loss_u / (1.0 + loss_u),
        })
    }

    pub fn from_lambda(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            loss_u: lambda / (1.0 - lambda),
            threshold_lambda: lambda,
        })
    }

    pub fn loss_u(&self) -> f64 {
        self.loss_u
    }

    /// Break-even confidence: acting pays off in expectation iff confidence ≥ λ.
    pub fn lambda(&self) -> f64 {
        self.threshold_lambda
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )))
    }
}

fn check_pair(confidences: &[f64], correctness: &[bool]) -> Result<()> {
    if confidences.len() != correctness.len() {
        return Err(Error::LengthMismatch {
            left: confidences.len(),
            right: correctness.len(),
        });
    }
    if confidences.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = confidences
        .iter()
        .position(|c| !(c.is_finite() && (0.0..=1.0).contains(c)))
    {
        return Err(Error::InvalidParameter(format!(
            "confidence at index {index} is {} (outside [0, 1])",
            confidences[index]
        )));
    }
    Ok(())
}

fn indicator(correct: bool) -> f64 {
    if correct {
        1.0
    } else {
        0.0
    }
}

pub fn brier_score(confidences: &[f64], correctness: &[bool]) -> Result<f64> {
    check_pair(confidences, correctness)?;
    let sum: f64 = confidences
        .iter()
        .zip(correctness)
        .map(|(&c, &ok)| (indicator(ok) - c).powi(2))
        .sum();
    Ok(sum / confidences.len() as f64)
}

/// Bin index in `0..bins` for the interval `((m-1)/M, m/M]`; zero goes to the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = (confidence * m).ceil() as usize;
    // (c * M).ceil() can land one bin high when the product rounds up past an edge.
    while idx > 1 && confidence <= (idx - 1) as f64 / m {
        idx -= 1;
    }
    while idx < bins && confidence > idx as f64 / m {
        idx += 1;
    }
    idx.clamp(1, bins) - 1
}

/// Murphy's three-part decomposition computed on equal-width bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrierDecomposition {
    pub reliability: f64,
    pub resolution: f64,
    pub uncertainty: f64,
    /// Brier score after replacing each confidence by its bin's mean confidence.
    pub binned_brier: f64,
    pub num_bins: usize,
}

impl BrierDecomposition {
    /// `|binned_brier − (reliability − resolution + uncertainty)|`.
    pub fn identity_gap(&self) -> f64 {
        (self.binned_brier - (self.reliability - self.resolution + self.uncertainty)).abs()
    }
}

pub fn brier_decomposition(
    confidences: &[f64],
    correctness: &[bool],
    bins: usize,
) -> Result<BrierDecomposition> {
    if bins == 0 {
        return Err(Error::InvalidParameter("bin count must be ≥ 1".into()));
    }
    check_pair(confidences, correctness)?;
    let n = confidences.len() as f64;

    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correctness) {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += indicator(ok);
    }
    let acc = hit_sum.iter().sum::<f64>() / n;

    let mut reliability = 0.0;
    let mut resolution = 0.0;
    let mut bin_conf = vec![0.0; bins];
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let size = count[b] as f64;
        let conf_m = conf_sum[b] / size;
        let acc_m = hit_sum[b] / size;
        bin_conf[b] = conf_m;
        reliability += size / n * (conf_m - acc_m).powi(2);
        resolution += size / n * (acc_m - acc).powi(2);
    }

    let binned_brier = confidences
        .iter()
        .zip(correctness)
        .map(|(&c, &ok)| (bin_conf[bin_index(c, bins)] - indicator(ok)).powi(2))
        .sum::<f64>()
        / n;

    let out = BrierDecomposition {
        reliability,
        resolution,
        uncertainty: acc * (1.0 - acc),
        binned_brier,
        num_bins: bins,
    };
    debug_assert!(out.identity_gap() <= 1e-9, "gap {}", out.identity_gap());
    Ok(out)
}

/// Average loss due to confidence error: `(G_D − Σ g(x_i)) / N`.
pub fn lce(confidences: &[f64], correctness: &[bool], cost: &CostModel) -> Result<f64> {
    check_pair(confidences, correctness)?;
    check_lambda(cost.lambda())?;
    let lambda = cost.lambda();
    let mut perfect_gain = 0.0;
    let mut gain = 0.0;
    for (&c, &ok) in confidences.iter().zip(correctness) {
        perfect_gain += indicator(ok);
        if c >= lambda {
            gain += if ok { 1.0 } else { -cost.loss_u() };
        }
    }
    Ok((perfect_gain - gain) / confidences.len() as f64)
}

/// Counts of records with confidence ≥ λ, split into (correct, false).
pub fn high_confidence_counts(
    confidences: &[f64],
    correctness: &[bool],
    lambda: f64,
) -> Result<(usize, usize)> {
    check_pair(confidences, correctness)?;
    let mut correct = 0;
    let mut wrong = 0;
    for (&c, &ok) in confidences.iter().zip(correctness) {
        if c >= lambda {
            if ok {
                correct += 1;
            } else {
                wrong += 1;
            }
        }
    }
    Ok((correct, wrong))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationReport {
    pub brier: f64,
    pub reliability: f64,
    pub resolution: f64,
    pub uncertainty: f64,
    pub lce: f64,
    pub lambda: f64,
    pub high_conf_correct: usize,
    pub high_conf_false: usize,
    pub num_bins: usize,
}

impl CalibrationReport {
    pub fn evaluate(
        confidences: &[f64],
        correctness: &[bool],
        cost: &CostModel,
        bins: usize,
    ) -> Result<Self> {
        let brier = brier_score(confidences, correctness)?;
        let parts = brier_decomposition(confidences, correctness, bins)?;
        let (high_conf_correct, high_conf_false) =
            high_confidence_counts(confidences, correctness, cost.lambda())?;
        Ok(Self {
            brier,
            reliability: parts.reliability,
            resolution: parts.resolution,
            uncertainty: parts.uncertainty,
            lce: lce(confidences, correctness, cost)?,
            lambda: cost.lambda(),
            high_conf_correct,
            high_conf_false,
            num_bins: bins,
        })
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "brier = {}", self.brier).unwrap();
        writeln!(s, "reliability = {}", self.reliability).unwrap();
        writeln!(s, "resolution = {}", self.resolution).unwrap();
        writeln!(s, "uncertainty = {}", self.uncertainty).unwrap();
        writeln!(s, "lce = {}", self.lce).unwrap();
        writeln!(s, "lambda = {}", self.lambda).unwrap();
        writeln!(s, "high_conf_correct = {}", self.high_conf_correct).unwrap();
        writeln!(s, "high_conf_false = {}", self.high_conf_false).unwrap();
        writeln!(s, "num_bins = {}", self.num_bins).unwrap();
        s
    }

    pub const CSV_HEADER: &'static str =
        "brier,reliability,resolution,uncertainty,lce,lambda,high_conf_correct,high_conf_false,num_bins";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.brier,
            self.reliability,
            self.resolution,
            self.uncertainty,
            self.lce,
            self.lambda,
            self.high_conf_correct,
            self.high_conf_false,
            self.num_bins
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_threshold() {
        let cost = CostModel::from_loss(4.0).unwrap();
        assert!((cost.lambda() - 0.8).abs() < 1e-12);
        let back = CostModel::from_lambda(0.8).unwrap();
        assert!((back.loss_u() - 4.0).abs() < 1e-12);
        assert!(CostModel::from_lambda(1.0).is_err());
        assert!(CostModel::from_lambda(0.0).is_err());
        assert!(CostModel::from_loss(-1.0).is_err());
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier_score(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert_eq!(brier_score(&[0.5, 0.5], &[true, false]).unwrap(), 0.25);
        let bs = brier_score(&[0.9, 0.2, 0.7], &[true, false, false]).unwrap();
        assert!((bs - 0.18).abs() < 1e-15);
        assert!(matches!(
            brier_score(&[0.5], &[true, false]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(brier_score(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1000001, 10), 1);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.7, 10), 6);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.5, 1), 0);
    }

    #[test]
    fn decomposition_examples() {
        let d = brier_decomposition(&[0.75; 4], &[true, true, true, false], 1).unwrap();
        assert!(d.reliability.abs() < 1e-15);
        assert!(d.resolution.abs() < 1e-15);
        assert!((d.uncertainty - 0.1875).abs() < 1e-15);

        let d = brier_decomposition(&[0.95, 0.95, 0.05, 0.05], &[true, true, false, false], 10)
            .unwrap();
        assert!((d.reliability - 0.0025).abs() < 1e-12);
        assert!((d.resolution - 0.25).abs() < 1e-12);
        assert!((d.uncertainty - 0.25).abs() < 1e-12);
        assert!(d.identity_gap() < 1e-12);
    }

    #[test]
    fn lce_examples() {
        let cost = CostModel::from_loss(4.0).unwrap();
        assert_eq!(lce(&[1.0, 0.0], &[true, false], &cost).unwrap(), 0.0);
        assert_eq!(lce(&[1.0], &[false], &cost).unwrap(), 4.0);
        let v = lce(&[0.9, 0.9, 0.3], &[true, false, true], &cost).unwrap();
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn high_confidence_examples() {
        let c = [0.95, 0.85, 0.5];
        let ok = [true, false, false];
        assert_eq!(high_confidence_counts(&c, &ok, 0.9).unwrap(), (1, 0));
        assert_eq!(high_confidence_counts(&c, &ok, 0.8).unwrap(), (1, 1));
        assert!(high_confidence_counts(&[], &[], 0.8).is_err());
    }

    #[test]
    fn report_round_numbers() {
        let cost = CostModel::from_lambda(0.5).unwrap();
        let r = CalibrationReport::evaluate(&[1.0, 0.0], &[true, false], &cost, 10).unwrap();
        assert_eq!(r.brier, 0.0);
        assert_eq!(r.lce, 0.0);
        assert_eq!((r.high_conf_correct, r.high_conf_false), (1, 0));
        assert!(r.to_kv().contains("brier = 0\n"));
        assert_eq!(
            r.csv_row().split(',').count(),
            CalibrationReport::CSV_HEADER.split(',').count()
        );
    }
}
