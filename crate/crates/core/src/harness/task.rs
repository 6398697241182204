//! Clustered linear regression data.
//!
//! Tokens belong to one of `n_clusters` clusters. A cluster contributes a
//! mean vector (so inputs carry a routable signal) and its own target map:
//! `x = mean_c + spread * eps`, `y = x * M_c + noise`. A single shared
//! linear correction cannot fit every cluster at once, which is exactly
//! the regime where routed experts should pay off.

use serde::{Deserialize, Serialize};

use crate::harness::HarnessError;
use crate::numerics::{SeededRng, Tensor2D};
use crate::scalar::{cast, Scalar};

/// Cluster target maps must stay at least this far apart (Frobenius).
pub const MIN_MAP_DISTANCE: f64 = 0.1;

/// Shape of the synthetic task, minus the feature dimension (owned by the
/// model config).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_clusters: usize,
    /// Std of cluster mean entries; separates clusters in input space.
    pub mean_scale: f64,
    /// Std of the within-cluster input noise.
    pub cluster_spread: f64,
    /// Std of the additive output noise.
    pub noise_std: f64,
    /// Rank of each cluster's target map; 0 draws a dense map. Low-rank
    /// maps are the regime where a rank-r expert can match a cluster
    /// exactly while any single shared map cannot.
    pub map_rank: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_clusters: 4,
            mean_scale: 1.0,
            cluster_spread: 0.3,
            noise_std: 0.01,
            map_rank: 0,
        }
    }
}

/// One sampled batch. `cluster_ids[t]` is the ground-truth cluster of row
/// `t`, used as the token-type tag for routing analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub x: Tensor2D<F>,
    pub y: Tensor2D<F>,
    pub cluster_ids: Vec<usize>,
}

impl<F> Batch<F> {
    /// Token-type tag for row `t`.
    pub fn label(&self, t: usize) -> String {
        format!("c{}", self.cluster_ids[t])
    }
}

/// A fixed draw of cluster means and target maps.
#[derive(Clone, Debug)]
pub struct SyntheticTask<F> {
    means: Tensor2D<F>,
    maps: Vec<Tensor2D<F>>,
    cluster_spread: F,
    noise_std: F,
}

impl<F: Scalar> SyntheticTask<F> {
    /// Draws means and maps from `rng`. Map entries have variance `1/d`
    /// (dense or low-rank, per `map_rank`) so outputs share the input
    /// scale; maps are redrawn in the (practically unobserved) event that
    /// two land within [`MIN_MAP_DISTANCE`] of each other.
    pub fn generate(d: usize, cfg: &TaskConfig, rng: &mut SeededRng) -> Result<Self, HarnessError> {
        if d == 0 || cfg.n_clusters == 0 {
            return Err(HarnessError::Config {
                message: format!(
                    "task needs d >= 1 and n_clusters >= 1, got d={d}, n_clusters={}",
                    cfg.n_clusters
                ),
            });
        }
        for (name, v) in [
            ("mean_scale", cfg.mean_scale),
            ("cluster_spread", cfg.cluster_spread),
            ("noise_std", cfg.noise_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(HarnessError::Config {
                    message: format!("task {name} must be finite and >= 0, got {v}"),
                });
            }
        }

        if cfg.map_rank > d {
            return Err(HarnessError::Config {
                message: format!("task map_rank {} exceeds d={d}", cfg.map_rank),
            });
        }

        let means = rng.normal_tensor(cfg.n_clusters, d, cfg.mean_scale);
        let mut chosen = None;
        for _ in 0..16 {
            let maps: Vec<Tensor2D<F>> = (0..cfg.n_clusters)
                .map(|_| draw_map(d, cfg.map_rank, rng))
                .collect();
            if min_pairwise_distance(&maps).is_none_or(|min| min > MIN_MAP_DISTANCE) {
                chosen = Some(maps);
                break;
            }
        }
        let maps = chosen.ok_or_else(|| HarnessError::Config {
            message: "could not draw distinct cluster maps".to_string(),
        })?;
        SyntheticTask::from_parts(means, maps, cfg.cluster_spread, cfg.noise_std)
    }

    /// Builds a task from explicit means (`n_clusters x d`) and maps
    /// (`d x d` each).
    pub fn from_parts(
        means: Tensor2D<F>,
        maps: Vec<Tensor2D<F>>,
        cluster_spread: f64,
        noise_std: f64,
    ) -> Result<Self, HarnessError> {
        let d = means.cols();
        if means.rows() == 0 || means.rows() != maps.len() {
            return Err(HarnessError::Config {
                message: format!("{} cluster means for {} maps", means.rows(), maps.len()),
            });
        }
        if let Some(bad) = maps.iter().find(|m| m.shape() != (d, d)) {
            return Err(HarnessError::Config {
                message: format!("cluster map shape {:?} does not match d={d}", bad.shape()),
            });
        }
        Ok(SyntheticTask {
            means,
            maps,
            cluster_spread: cast(cluster_spread),
            noise_std: cast(noise_std),
        })
    }

    pub fn d(&self) -> usize {
        self.means.cols()
    }

    pub fn n_clusters(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[Tensor2D<F>] {
        &self.maps
    }

    /// Smallest pairwise Frobenius distance between maps; `None` with a
    /// single cluster.
    pub fn min_map_distance(&self) -> Option<f64> {
        min_pairwise_distance(&self.maps)
    }

    /// Samples `t` tokens: cluster uniform, `x = mean + spread * eps`,
    /// `y = x * M_cluster
    /// (+ noise when noise_std > 0)`.
    pub fn generate_batch(&self, t: usize, rng: &mut SeededRng) -> Batch<F> {
        let d = self.d();
        let mut x = Tensor2D::zeros(t, d);
        let mut y = Tensor2D::zeros(t, d);
        let mut cluster_ids = Vec::with_capacity(t);
        for row in 0..t {
            let c = rng.index(self.n_clusters());
            cluster_ids.push(c);
            for j in 0..d {
                let v = self.means.get(c, j) + self.cluster_spread * rng.normal(1.0);
                x.set(row, j, v);
            }
            let map = &self.maps[c];
            for j in 0..d {
                let mut acc = F::zero();
                for k in 0..d {
                    acc += x.get(row, k) * map.get(k, j);
                }
                y.set(row, j, acc);
            }
            if self.noise_std > F::zero() {
                for j in 0..d {
                    let v = y.get(row, j) + self.noise_std * rng.normal(1.0);
                    y.set(row, j, v);
                }
            }
        }
        Batch { x, y, cluster_ids }
    }
}

/// Draws one `d x d` target map. `rank == 0` gives a dense draw with
/// entry std `1/sqrt(d)`; otherwise the map is `U * V` with `U` (`d x rank`,
/// std `1/sqrt(d)`) and `V` (`rank x d`, std `1/sqrt(rank)`), which keeps
/// the per-entry variance at `1/d` in both cases.
fn draw_map<F: Scalar>(d: usize, rank: usize, rng: &mut SeededRng) -> Tensor2D<F> {
    let base_std = 1.0 / (d as f64).sqrt();
    if rank == 0 {
        return rng.normal_tensor(d, d, base_std);
    }
    let u: Tensor2D<F> = rng.normal_tensor(d, rank, base_std);
    let v: Tensor2D<F> = rng.normal_tensor(rank, d, 1.0 / (rank as f64).sqrt());
    let mut m = Tensor2D::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = F::zero();
            for l in 0..rank {
                acc += u.get(i, l) * v.get(l, j);
            }
            m.set(i, j, acc);
        }
    }
    m
}

fn min_pairwise_distance<F: Scalar>(maps: &[Tensor2D<F>]) -> Option<f64> {
    let mut min: Option<f64> = None;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let dist = maps[i]
                .frobenius_distance(&maps[j])
                .expect("cluster maps share one shape")
                .to_f64()
                .expect("scalar converts to f64");
            min = Some(min.map_or(dist, |m: f64| m.min(dist)));
        }
    }
    min
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_without_noise_returns_inputs() {
        let task: SyntheticTask<f64> =
            SyntheticTask::from_parts(Tensor2D::zeros(1, 4), vec![Tensor2D::identity(4)], 1.0, 0.0)
                .unwrap();
        let mut rng = SeededRng::new(1);
        let batch = task.generate_batch(6, &mut rng);
        assert_eq!(batch.y, batch.x, "y = x * I must be x exactly");
        assert!(batch.cluster_ids.iter().all(|&c| c == 0));
    }

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let mut rng = SeededRng::new(9);
        let task: SyntheticTask<f64> =
            SyntheticTask::generate(8, &TaskConfig::default(), &mut rng).unwrap();
        let a = task.generate_batch(16, &mut SeededRng::new(77));
        let b = task.generate_batch(16, &mut SeededRng::new(77));
        assert_eq!(a, b);
    }

    #[test]
    fn generated_maps_are_pairwise_distinct() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let task: SyntheticTask<f64> =
                SyntheticTask::generate(16, &TaskConfig::default(), &mut rng).unwrap();
            let min = task.min_map_distance().expect("4 clusters have pairs");
            assert!(min > MIN_MAP_DISTANCE, "seed {seed}: min distance {min}");
        }
    }

    #[test]
    fn noiseless_batches_have_zero_regression_residual_per_cluster() {
        // Least-squares fit of y on x within one cluster must be exact
        // when noise_std = 0: y rows lie in the row space of x * M_c.
        let d = 4;
        let cfg = TaskConfig {
            n_clusters: 2,
            mean_scale: 1.0,
            cluster_spread: 0.5,
            noise_std: 0.0,
            map_rank: 0,
        };
        let mut rng = SeededRng::new(42);
        let task: SyntheticTask<f64> = SyntheticTask::generate(d, &cfg, &mut rng).unwrap();
        let batch = task.generate_batch(64, &mut SeededRng::new(5));

        for cluster in 0..2 {
            let rows: Vec<usize> = (0..64)
                .filter(|&t| batch.cluster_ids[t] == cluster)
                .collect();
            assert!(rows.len() >= d, "enough rows to determine the map");
            // Solve the normal equations (x^T x) m = x^T y column by column.
            let mut xtx = vec![vec![0.0; d]; d];
            let mut xty = vec![vec![0.0; d]; d];
            for &t in &rows {
                for i in 0..d {
                    for j in 0..d {
                        xtx[i][j] += batch.x.get(t, i) * batch.x.get(t, j);
                        xty[i][j] += batch.x.get(t, i) * batch.y.get(t, j);
                    }
                }
            }
            let m = solve_columns(&mut xtx, &mut xty);
            // Residual of the fit must vanish.
            let mut residual = 0.0f64;
            for &t in &rows {
                for j in 0..d {
                    let pred: f64 = m
                        .iter()
                        .enumerate()
                        .map(|(k, row)| batch.x.get(t, k) * row[j])
                        .sum();
                    residual += (pred - batch.y.get(t, j)).powi(2);
                }
            }
            assert!(
                residual < 1e-18,
                "cluster {cluster}: noiseless residual {residual} should vanish"
            );
        }
    }

    /// Gaussian elimination with partial pivoting on an augmented system,
    /// solving A m = B for all columns of B at once.
    fn solve_columns(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let diag = a[col][col];
            assert!(diag.abs() > 1e-12, "singular normal equations");
            for row in 0..n {
                if row == col {
                    continue;
                }
                let factor = a[row][col] / diag;
                for k in 0..n {
                    a[row][k] -= factor * a[col][k];
                    b[row][k] -= factor * b[col][k];
                }
            }
        }
        (0..n)
            .map(|i| (0..n).map(|j| b[i][j] / a[i][i]).collect())
            .collect()
    }

    #[test]
    fn low_rank_maps_have_the_requested_rank() {
        let cfg = TaskConfig {
            map_rank: 2,
            ..TaskConfig::default()
        };
        let mut rng = SeededRng::new(3);
        let task: SyntheticTask<f64> = SyntheticTask::generate(8, &cfg, &mut rng).unwrap();
        for (c, map) in task.maps().iter().enumerate() {
            let rank = numerical_rank(map);
            assert_eq!(rank, 2, "cluster {c}: map rank {rank}, wanted 2");
        }
        let min = task.min_map_distance().unwrap();
        assert!(min > MIN_MAP_DISTANCE, "low-rank maps stay distinct: {min}");
    }

    /// Rank via row elimination with partial pivoting.
    fn numerical_rank(m: &Tensor2D<f64>) -> usize {
        let (rows, cols) = m.shape();
        let mut a: Vec<Vec<f64>> = (0..rows)
            .map(|i| (0..cols).map(|j| m.get(i, j)).collect())
            .collect();
        let mut rank = 0;
        for col in 0..cols {
            let Some(pivot) =
                (rank..rows).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            else {
                break;
            };
            if a[pivot][col].abs() < 1e-9 {
                continue;
            }
            a.swap(rank, pivot);
            for row in rank + 1..rows {
                let factor = a[row][col] / a[rank][col];
                let (head, tail) = a.split_at_mut(row);
                for (x, p) in tail[0].iter_mut().zip(&head[rank]).skip(col) {
                    *x -= factor * p;
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut rng = SeededRng::new(0);
        let zero_clusters = TaskConfig {
            n_clusters: 0,
            ..TaskConfig::default()
        };
        assert!(matches!(
            SyntheticTask::<f64>::generate(4, &zero_clusters, &mut rng),
            Err(HarnessError::Config { .. })
        ));
        let negative_noise = TaskConfig {
            noise_std: -1.0,
            ..TaskConfig::default()
        };
        assert!(matches!(
            SyntheticTask::<f64>::generate(4, &negative_noise, &mut rng),
            Err(HarnessError::Config { .. })
        ));
        let oversized_rank = TaskConfig {
            map_rank: 5,
            ..TaskConfig::default()
        };
        assert!(matches!(
            SyntheticTask::<f64>::generate(4, &oversized_rank, &mut rng),
            Err(HarnessError::Config { .. })
        ));
    }
}
