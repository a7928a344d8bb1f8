//! k-medoids clustering in representation space.
//!
//! Greedy BUILD initialization followed by alternating assignment and
//! per-cluster medoid updates. Medoids are always actual records so they can
//! be sent to a labeler.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Iteration cap for the alternating phase.
pub const MAX_ITERATIONS: usize = 100;

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(squared_distance(a, b).sqrt())
}

/// Caller guarantees equal lengths.
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// `min(20, max(1, N / 25))`.
pub fn default_cluster_count(n: usize) -> usize {
    (n / 25).clamp(1, 20)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster index for every point.
    pub assignments: Vec<usize>,
    /// Point index of each cluster's medoid.
    pub medoids: Vec<usize>,
    /// Total cost after BUILD and after each alternating iteration.
    pub cost_history: Vec<f64>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.medoids.len()
    }

    pub fn cost(&self) -> f64 {
        *self.cost_history.last().unwrap_or(&0.0)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }

    /// `record_id,cluster_index` rows; `ids[i]` names point `i`.
    pub fn assignments_csv(&self, ids: &[u64]) -> String {
        let mut s = String::from("record_id,cluster_index\n");
        for (i, &c) in self.assignments.iter().enumerate() {
            writeln!(s, "{},{c}", ids[i]).unwrap();
        }
        s
    }

    /// One line `medoids=<id>;<id>;...` for the sidecar.
    pub fn medoids_line(&self, ids: &[u64]) -> String {
        let list: Vec<String> = self.medoids.iter().map(|&m| ids[m].to_string()).collect();
        format!("medoids={}\n", list.join(";"))
    }
}

/// Index of the medoid nearest to `point`, lowest index on ties.
pub fn nearest_medoid(points: &[Vec<f64>], medoids: &[usize], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, &m) in medoids.iter().enumerate() {
        let d = squared_distance(&points[m], point);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn total_cost(points: &[Vec<f64>], medoids: &[usize], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| dist(p, &points[medoids[c]]))
        .sum()
}

/// Picks uniformly among the tied best candidates; the RNG is consulted only on ties.
fn pick_tied<R: Rng>(tied: &[usize], rng: &mut R) -> usize {
    if tied.len() == 1 {
        tied[0]
    } else {
        *tied.choose(rng).expect("non-empty")
    }
}

fn build<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let mut is_medoid = vec![false; n];
    let mut medoids = Vec::with_capacity(k);

    // First medoid minimizes the total distance to all points.
    let totals: Vec<f64> = (0..n)
        .map(|c| points.iter().map(|p| dist(p, &points[c])).sum())
        .collect();
    let best = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    let tied: Vec<usize> = (0..n).filter(|&i| totals[i] == best).collect();
    let first = pick_tied(&tied, rng);
    medoids.push(first);
    is_medoid[first] = true;
    let mut nearest: Vec<f64> = points.iter().map(|p| dist(p, &points[first])).collect();

    while medoids.len() < k {
        let gains: Vec<f64> = (0..n)
            .map(|c| {
                if is_medoid[c] {
                    f64::NEG_INFINITY
                } else {
                    points
                        .iter()
                        .zip(&nearest)
                        .map(|(p, &d)| (d - dist(p, &points[c])).max(0.0))
                        .sum()
                }
            })
            .collect();
        let best = gains.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..n)
            .filter(|&i| !is_medoid[i] && gains[i] == best)
            .collect();
        let next = pick_tied(&tied, rng);
        medoids.push(next);
        is_medoid[next] = true;
        for (j, p) in points.iter().enumerate() {
            nearest[j] = nearest[j].min(dist(p, &points[next]));
        }
    }
    medoids
}

fn assign(points: &[Vec<f64>], medoids: &[usize]) -> Vec<usize> {
    let mut assignments: Vec<usize> = points
        .iter()
        .map(|p| nearest_medoid(points, medoids, p))
        .collect();
    // Duplicate points can tie a medoid to a lower-indexed cluster; keep
    // every medoid in its own cluster so no cluster is ever empty.
    for (c, &m) in medoids.iter().enumerate() {
        assignments[m] = c;
    }
    assignments
}

/// PAM-style k-medoids over `points`.
///
/// The seed only breaks exact ties during BUILD; the alternating phase is
/// fully deterministic (an incumbent medoid is kept unless a member is
/// strictly better).
pub fn k_medoids<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Clustering> {
    let n = points.len();
    if k < 1 {
        return Err(Error::InvalidParameter("cluster count must be ≥ 1".into()));
    }
    if k > n {
        return Err(Error::InvalidParameter(format!(
            "cluster count {k} exceeds number of points {n}"
        )));
    }
    if let Some(dim) = points.first().map(Vec::len) {
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::LengthMismatch {
                left: dim,
                right: bad.len(),
            });
        }
    }

    let mut medoids = build(points, k, rng);
    let mut assignments = assign(points, &medoids);
    let mut cost_history = vec![total_cost(points, &medoids, &assignments)];

    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            let within = |cand: usize| -> f64 {
                members
                    .iter()
                    .map(|&j| dist(&points[j], &points[cand]))
                    .sum()
            };
            let mut best = *medoid;
            let mut best_cost = within(best);
            for &cand in &members {
                let cost = within(cand);
                if cost < best_cost {
                    best = cand;
                    best_cost = cost;
                }
            }
            if best != *medoid {
                *medoid = best;
                changed = true;
            }
        }
        let next = assign(points, &medoids);
        let stable = next == assignments;
        assignments = next;
        cost_history.push(total_cost(points, &medoids, &assignments));
        if stable && !changed {
            break;
        }
    }

    Ok(Clustering {
        assignments,
        medoids,
        cost_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0], &[0.0, 1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut sum = 0.0;
        for i in 0..10 {
            sum += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((euclidean_distance(&a, &b).unwrap() - sum.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn default_counts() {
        assert_eq!(default_cluster_count(5000), 20);
        assert_eq!(default_cluster_count(100), 4);
        assert_eq!(default_cluster_count(10), 1);
        assert_eq!(default_cluster_count(1), 1);
    }

    #[test]
    fn single_cluster_picks_an_optimal_medoid() {
        // Exhaustive: totals are 13, 11, 11, 27, so points 1 and 2 tie.
        let points = pts(&[0.0, 1.0, 2.0, 10.0]);
        let totals: Vec<f64> = (0..4)
            .map(|c| points.iter().map(|p| (p[0] - points[c][0]).abs()).sum())
            .collect();
        assert_eq!(totals, vec![13.0, 11.0, 11.0, 27.0]);
        for seed in 0..16 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = k_medoids(&points, 1, &mut rng).unwrap();
            assert!(c.medoids[0] == 1 || c.medoids[0] == 2);
            assert_eq!(c.cost(), 11.0);
        }
    }

    #[test]
    fn every_point_its_own_medoid() {
        let points = pts(&[0.0, 1.0, 4.0, 9.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = k_medoids(&points, 4, &mut rng).unwrap();
        assert_eq!(c.cost(), 0.0);
        let mut m = c.medoids.clone();
        m.sort();
        assert_eq!(m, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let points = pts(&[0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(k_medoids(&points, 0, &mut rng).is_err());
        assert!(k_medoids(&points, 3, &mut rng).is_err());
    }

    #[test]
    fn duplicate_points_keep_clusters_non_empty() {
        let points = pts(&[1.0, 1.0, 1.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = k_medoids(&points, 3, &mut rng).unwrap();
        for cluster in 0..3 {
            assert!(!c.members(cluster).is_empty());
            assert_eq!(c.assignments[c.medoids[cluster]], cluster);
        }
    }

    #[test]
    fn csv_outputs() {
        let points = pts(&[0.0, 10.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = k_medoids(&points, 2, &mut rng).unwrap();
        let csv = c.assignments_csv(&[40, 41]);
        assert!(csv.starts_with("record_id,cluster_index\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(c.medoids_line(&[40, 41]).starts_with("medoids="));
    }
}
