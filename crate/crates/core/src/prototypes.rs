//! Spherical k-means prototypes over unit embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::mathcore::{gemm, Tensor2, EPS_NORM};

pub const MAX_ITERATIONS: usize = 100;

/// Refresh period that never triggers.
pub const NEVER: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    vectors: Tensor2,
    pub last_refresh_epoch: usize,
    /// Mean cosine of each point to its assigned prototype, recorded after
    /// every assignment step of the most recent fit.
    pub objective_trace: Vec<f64>,
}

impl PrototypeSet {
    /// Wraps given unit rows (e.g. loaded from a checkpoint).
    pub fn from_vectors(vectors: Tensor2, last_refresh_epoch: usize) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(ElsaError::invalid("prototype set needs k >= 1"));
        }
        for (i, row) in vectors.iter_rows().enumerate() {
            let n = crate::mathcore::norm(row);
            if (n - 1.0).abs() > 1e-6 {
                return Err(ElsaError::invalid(format!("prototype {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            vectors,
            last_refresh_epoch,
            objective_trace: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vectors(&self) -> &Tensor2 {
        &self.vectors
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }
}

fn similarities(points: &Tensor2, centers: &Tensor2) -> Tensor2 {
    let mut s = Tensor2::zeros(points.rows(), centers.rows());
    gemm(
        false,
        true,
        points.rows(),
        centers.rows(),
        points.cols(),
        1.0,
        points.data(),
        centers.data(),
        0.0,
        s.data_mut(),
    );
    s
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (j, v)| if v > a.1 { (j, v) } else { a })
}

/// Index of the most similar prototype for every row.
pub fn assign(points: &Tensor2, prototypes: &Tensor2) -> Vec<usize> {
    similarities(points, prototypes)
        .iter_rows()
        .map(|r| argmax(r).0)
        .collect()
}

fn check_input(points: &Tensor2, k: usize) -> Result<()> {
    if k == 0 {
        return Err(ElsaError::invalid("k must be >= 1"));
    }
    if points.rows() < k {
        return Err(ElsaError::invalid(format!(
            "spherical k-means needs n >= k, got n = {} and k = {k}",
            points.rows()
        )));
    }
    points.ensure_finite("k-means input")
}

/// k-means++ seeding with cosine distance `1 − u·c`.
fn seed_centers(points: &Tensor2, k: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = points.row(*chosen.last().unwrap());
        for (i, d) in dist.iter_mut().enumerate() {
            let c = 1.0 - crate::mathcore::dot(points.row(i), last);
            *d = d.min(c.max(0.0));
        }
        let weights: Vec<f64> = dist.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            // Rounding can walk past the end onto a zero-weight point.
            if weights[pick] == 0.0 {
                pick = weights.iter().rposition(|&w| w > 0.0).unwrap();
            }
            pick
        } else {
            // Every point coincides with a center: take any unused index.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| points.row(i)).collect();
    Tensor2::from_rows(&rows).expect("rows share dim")
}

/// Lloyd iterations from the given unit centers. Returns the final centers,
/// assignment and objective trace.
pub fn lloyd(points: &Tensor2, init: Tensor2) -> Result<(Tensor2, Vec<usize>, Vec<f64>)> {
    check_input(points, init.rows())?;
    if init.cols() != points.cols() {
        return Err(ElsaError::DimensionMismatch {
            expected: points.cols(),
            got: init.cols(),
        });
    }
    let n = points.rows();
    let k = init.rows();
    let z = points.cols();
    let mut centers = init;
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let sims = similarities(points, &centers);
        let mut next = Vec::with_capacity(n);
        let mut own = Vec::with_capacity(n);
        for row in sims.iter_rows() {
            let (j, s) = argmax(row);
            next.push(j);
            own.push(s);
        }
        trace.push(own.iter().sum::<f64>() / n as f64);
        if next == assignment {
            break;
        }
        assignment = next;

        let mut sums = vec![0.0; k * z];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * z..(c + 1) * z].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed to the worst-served point not already used.
                let worst = (0..n)
                    .filter(|&i| !taken[i])
                    .min_by(|&a, &b| own[a].total_cmp(&own[b]))
                    .expect("n >= k");
                taken[worst] = true;
                centers.row_mut(c).copy_from_slice(points.row(worst));
                continue;
            }
            let sum = &sums[c * z..(c + 1) * z];
            let norm = crate::mathcore::norm(sum);
            if norm > EPS_NORM {
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sum) {
                    *dst = s / norm;
                }
            }
        }
    }
    if assignment.is_empty() {
        assignment = assign(points, &centers);
    }
    Ok((centers, assignment, trace))
}

/// Spherical k-means with k-means++ seeding; deterministic under `seed`.
pub fn fit(points: &Tensor2, k: usize, seed: u64) -> Result<PrototypeSet> {
    check_input(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = seed_centers(points, k, &mut rng);
    let (vectors, _, objective_trace) = lloyd(points, init)?;
    Ok(PrototypeSet {
        vectors,
        last_refresh_epoch: 0,
        objective_trace,
    })
}

/// Re-fits when at least `period` epochs have passed since the last refresh;
/// otherwise returns the input unchanged. Warm start reuses the current
/// prototypes as initial centers; cold start reseeds with `seed`.
pub fn refresh(
    state: &PrototypeSet,
    points: &Tensor2,
    epoch: usize,
    period: usize,
    warm_start: bool,
    seed: u64,
) -> Result<(PrototypeSet, bool)> {
    if period == 0 {
        return Err(ElsaError::invalid("refresh period must be >= 1"));
    }
    if period == NEVER || epoch.saturating_sub(state.last_refresh_epoch) < period {
        return Ok((state.clone(), false));
    }
    let mut next = if warm_start {
        let (vectors, _, objective_trace) = lloyd(points, state.vectors.clone())?;
        PrototypeSet {
            vectors,
            last_refresh_epoch: 0,
            objective_trace,
        }
    } else {
        fit(points, state.k(), seed)?
    };
    next.last_refresh_epoch = epoch;
    Ok((next, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::{dot, l2_normalize, norm};
    use rand_distr::StandardNormal;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor2 {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r).unwrap()).collect();
        Tensor2::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_center_is_normalized_mean() {
        let p = fit(&unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 1, 0).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((p.vectors().get(0, 0) - h).abs() < 1e-12 && (p.vectors().get(0, 1) - h).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_gives_objective_one() {
        let pts = unit_rows(&[
            vec![1.0, 0.2, 0.0],
            vec![0.0, 1.0, 0.3],
            vec![-1.0, 0.0, 0.5],
            vec![0.1, -1.0, 0.0],
        ]);
        let p = fit(&pts, 4, 3).unwrap();
        assert!((p.final_objective().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let pts = unit_rows(&[vec![1.0, 0.0]]);
        assert!(fit(&pts, 2, 0).is_err());
        assert!(fit(&pts, 0, 0).is_err());
    }

    #[test]
    fn antipodal_clusters_recovered() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let dir = l2_normalize(&[0.3, -0.5, 0.8]).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                dir.iter()
                    .map(|d| s * d + 0.05 * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let p = fit(&unit_rows(&rows), 2, 9).unwrap();
        let sims: Vec<f64> = p.vectors().iter_rows().map(|v| dot(v, &dir)).collect();
        assert!(
            sims.iter().any(|&s| s > 0.99) && sims.iter().any(|&s| s < -0.99),
            "{sims:?}"
        );
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..5).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let pts = unit_rows(&rows);
        let a = fit(&pts, 6, 11).unwrap();
        assert_eq!(a, fit(&pts, 6, 11).unwrap());
        for v in a.vectors().iter_rows() {
            assert!((norm(v) - 1.0).abs() < 1e-9);
        }
        for w in a.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn duplicate_points_still_fit() {
        let pts = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = fit(&pts, 3, 0).unwrap();
        assert_eq!(p.k(), 3);
        assert!(p.final_objective().unwrap() > 0.999);
    }

    #[test]
    fn refresh_periods() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let pts = unit_rows(&rows);
        let p0 = fit(&pts, 3, 1).unwrap();
        assert!(refresh(&p0, &pts, 1, 0, true, 0).is_err());
        for epoch in 1..10 {
            let (_, fired) = refresh(&p0, &pts, epoch, NEVER, true, 0).unwrap();
            assert!(!fired);
        }
        let mut s = p0.clone();
        let mut fired_at = Vec::new();
        for epoch in 1..=9 {
            let (next, fired) = refresh(&s, &pts, epoch, 3, true, 0).unwrap();
            if fired {
                fired_at.push(epoch);
            }
            s = next;
        }
        assert_eq!(fired_at, vec![3, 6, 9]);
        let mut s = p0;
        let mut count = 0;
        for epoch in 1..=5 {
            let (next, fired) = refresh(&s, &pts, epoch, 1, false, epoch as u64).unwrap();
            count += fired as usize;
            assert_eq!(next.last_refresh_epoch, epoch);
            s = next;
        }
        assert_eq!(count, 5);
    }
}
