//! Gaussian process regression of the confidence correction `h = I − c_M`
//! over representation space, and the truncated-normal posterior that turns
//! a GP prediction into a calibrated confidence in `[0, 1]`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::clustering::squared_distance;
use crate::error::{Error, Result};

/// First diagonal jitter tried when factoring a kernel matrix.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Largest jitter the escalation will try before giving up.
pub const MAX_JITTER: f64 = 1e-2;
/// At most this many points enter the median pairwise-distance heuristic.
pub const MEDIAN_SUBSAMPLE: usize = 500;
/// Posterior std at or below this is treated as exactly zero.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// Truncated mass below this is treated as vanished.
pub const MASS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    length_scale: f64,
}

impl RbfKernel {
    pub fn new(length_scale: f64) -> Result<Self> {
        if !(length_scale.is_finite() && length_scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Self { length_scale })
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// `exp(−‖a − b‖² / 2ℓ²)`; caller guarantees equal lengths.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        (-squared_distance(a, b) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

pub fn rbf(z1: &[f64], z2: &[f64], length_scale: f64) -> Result<f64> {
    let kernel = RbfKernel::new(length_scale)?;
    if z1.len() != z2.len() {
        return Err(Error::LengthMismatch {
            left: z1.len(),
            right: z2.len(),
        });
    }
    Ok(kernel.eval(z1, z2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthScale {
    pub value: f64,
    /// Set when the heuristic could not run and `1.0` was substituted.
    pub fallback: bool,
}

/// Median of pairwise Euclidean distances, over a stride subsample of at
/// most [`MEDIAN_SUBSAMPLE`] points. Falls back to `1.0` for fewer than two
/// points or a zero median.
pub fn median_heuristic_ell(points: &[&[f64]]) -> LengthScale {
    const FALLBACK: LengthScale = LengthScale {
        value: 1.0,
        fallback: true,
    };
    if points.len() < 2 {
        return FALLBACK;
    }
    let stride = points.len().div_ceil(MEDIAN_SUBSAMPLE);
    let sample: Vec<&[f64]> = points.iter().step_by(stride).copied().collect();

    let mut dists = Vec::with_capacity(sample.len() * (sample.len() - 1) / 2);
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            dists.push(squared_distance(sample[i], sample[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return FALLBACK;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median > 0.0 && median.is_finite() {
        LengthScale {
            value: median,
            fallback: false,
        }
    } else {
        FALLBACK
    }
}

/// Posterior of `h` at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPrediction {
    pub mean: f64,
    pub std: f64,
}

/// Noise-free GP regression with a zero-mean prior and an RBF kernel.
#[derive(Debug, Clone)]
pub struct GpModel {
    points: Vec<Vec<f64>>,
    targets: Vec<f64>,
    kernel: RbfKernel,
    jitter: f64,
    initial_jitter: f64,
    cholesky: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl GpModel {
    /// Factors `K_XX + jitter·I`, multiplying the jitter by 10 on failure up
    /// to [`MAX_JITTER`].
    pub fn fit(
        points: Vec<Vec<f64>>,
        targets: Vec<f64>,
        kernel: RbfKernel,
        jitter: f64,
    ) -> Result<Self> {
        if points.len() != targets.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: targets.len(),
            });
        }
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !(jitter.is_finite() && jitter > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jitter must be positive, got {jitter}"
            )));
        }
        let dim = points[0].len();
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::LengthMismatch {
                left: dim,
                right: bad.len(),
            });
        }
        if let Some(i) = targets
            .iter()
            .position(|t| !(t.is_finite() && (-1.0..=1.0).contains(t)))
        {
            return Err(Error::InvalidParameter(format!(
                "target {i} is {} (outside [-1, 1])",
                targets[i]
            )));
        }

        let n = points.len();
        let gram = DMatrix::from_fn(n, n, |i, j| kernel.eval(&points[i], &points[j]));
        let mut current = jitter;
        loop {
            let mut k = gram.clone();
            for i in 0..n {
                k[(i, i)] += current;
            }
            if let Some(cholesky) = Cholesky::new(k) {
                let weights = cholesky.solve(&DVector::from_column_slice(&targets));
                return Ok(Self {
                    points,
                    targets,
                    kernel,
                    jitter: current,
                    initial_jitter: jitter,
                    cholesky,
                    weights,
                });
            }
            current *= 10.0;
            if current > MAX_JITTER * (1.0 + 1e-9) {
                return Err(Error::Numerical(format!(
                    "kernel matrix of {n} points not positive definite even with jitter {MAX_JITTER}"
                )));
            }
        }
    }

    /// Refits from scratch with one more observation.
    pub fn with_observation(&self, point: Vec<f64>, target: f64) -> Result<Self> {
        let mut points = self.points.clone();
        let mut targets = self.targets.clone();
        points.push(point);
        targets.push(target);
        Self::fit(points, targets, self.kernel, self.initial_jitter)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn kernel(&self) -> RbfKernel {
        self.kernel
    }

    /// Jitter that was actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K_XX + jitter·I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.cholesky.l()
    }

    pub fn posterior(&self, query: &[f64]) -> Result<GpPrediction> {
        if query.len() != self.points[0].len() {
            return Err(Error::LengthMismatch {
                left: self.points[0].len(),
                right: query.len(),
            });
        }
        let cross = DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| self.kernel.eval(p, query)),
        );
        let mean = cross.dot(&self.weights);
        let v = self
            .cholesky
            .l_dirty()
            .solve_lower_triangular(&cross)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        // Prior variance k(z, z) is 1 for the RBF kernel.
        let var = (1.0 - v.norm_squared()).max(0.0);
        Ok(GpPrediction {
            mean,
            std: var.sqrt(),
        })
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Moments of `N(c_M + μ, σ²)` truncated to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidencePosterior {
    pub mu_tn: f64,
    pub sigma_tn: f64,
    /// Standardized lower bound `(0 − c_M − μ) / σ`.
    pub alpha: f64,
    /// Standardized upper bound `(1 − c_M − μ) / σ`.
    pub beta: f64,
    pub raw_mu: f64,
    pub raw_sigma: f64,
    pub c_m: f64,
    /// The untruncated mass inside `[0, 1]` vanished; `mu_tn` is the nearer bound.
    pub degenerate: bool,
}

pub fn truncated_moments(c_m: f64, mu: f64, sigma: f64) -> Result<ConfidencePosterior> {
    if !(c_m.is_finite() && (0.0..=1.0).contains(&c_m)) {
        return Err(Error::InvalidParameter(format!(
            "original confidence {c_m} outside [0, 1]"
        )));
    }
    if !mu.is_finite() || !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need finite mean and non-negative std, got ({mu}, {sigma})"
        )));
    }
    let center = c_m + mu;
    let alpha = (0.0 - center) / sigma;
    let beta = (1.0 - center) / sigma;
    let mut out = ConfidencePosterior {
        mu_tn: center.clamp(0.0, 1.0),
        sigma_tn: 0.0,
        alpha,
        beta,
        raw_mu: mu,
        raw_sigma: sigma,
        c_m,
        degenerate: false,
    };
    if sigma <= SIGMA_FLOOR {
        return Ok(out);
    }

    // Difference of tail probabilities taken on the side where both are small.
    let mass = if alpha >= 0.0 {
        normal_sf(alpha) - normal_sf(beta)
    } else {
        normal_cdf(beta) - normal_cdf(alpha)
    };
    if !(mass >= MASS_FLOOR) {
        out.degenerate = true;
        out.mu_tn = center.clamp(0.0, 1.0);
        return Ok(out);
    }

    let (pdf_a, pdf_b) = (normal_pdf(alpha), normal_pdf(beta));
    let shift = (pdf_a - pdf_b) / mass;
    out.mu_tn = (center + sigma * shift).clamp(0.0, 1.0);
    let factor = 1.0 + (alpha * pdf_a - beta * pdf_b) / mass - shift * shift;
    out.sigma_tn = (sigma * sigma * factor).max(0.0).sqrt().min(sigma);
    Ok(out)
}
