//! Item clustering: seven per-item summary features on the
//! store-averaged series, partitioned by k-means (Lloyd with k-means++
//! seeding, multiple restarts, z-scored features).

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{rolling_mean, SalesPanel, LAST_YEAR_LAG, ROLLING_WINDOWS};

pub const N_FEATURES: usize = 7;
const MAX_LLOYD_ITERS: usize = 300;
const RESTARTS: usize = 10;

/// Seven summary features of one item (store-averaged series).
/// Non-finite entries mark degenerate series; they are replaced by
/// sentinels before clustering.
#[derive(Debug, Clone, Copy)]
pub struct ItemFeatureVector {
    /// days from the first nonzero sale to the end of the window
    pub sample_size: f64,
    pub log_mean: f64,
    pub log_sd: f64,
    pub acf1: f64,
    pub pacf7: f64,
    /// correlation with the 364-day-lagged 7-day rolling mean
    pub corr_lagged_rm: f64,
    pub zero_prop: f64,
}

impl ItemFeatureVector {
    pub fn to_array(self) -> [f64; N_FEATURES] {
        [
            self.sample_size,
            self.log_mean,
            self.log_sd,
            self.acf1,
            self.pacf7,
            self.corr_lagged_rm,
            self.zero_prop,
        ]
    }

    pub const NAMES: [&'static str; N_FEATURES] =
        ["sample_size", "log_mean", "log_sd", "acf1", "pacf7", "corr_lagged_rm", "zero_prop"];
}

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub g: usize,
    pub seed: u64,
}

impl ClusterAssignment {
    /// Item indices per cluster, in ascending item order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.g];
        for (item, &label) in self.labels.iter().enumerate() {
            out[label].push(item);
        }
        out
    }
}

/// Sample autocorrelation, biased estimator (sums divided by n and the
/// overall variance).
pub fn acf(series: &[f64], lag: usize) -> Result<f64> {
    let n = series.len();
    if n <= lag {
        return Err(Error::Range(format!("series of length {n} has no lag {lag}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::DegenerateSeries("constant series has undefined ACF".into()));
    }
    let cov = (lag..n).map(|t| (series[t] - mean) * (series[t - lag] - mean)).sum::<f64>() / n as f64;
    Ok(cov / var)
}

/// Partial autocorrelation via the Durbin-Levinson recursion.
pub fn pacf(series: &[f64], lag: usize) -> Result<f64> {
    if lag == 0 {
        return Ok(1.0);
    }
    let rho: Vec<f64> = (1..=lag).map(|k| acf(series, k)).collect::<Result<_>>()?;
    let mut phi = vec![rho[0]];
    let mut prev_err = 1.0 - rho[0] * rho[0];
    for k in 2..=lag {
        if prev_err <= 1e-14 {
            return Err(Error::DegenerateSeries(format!(
                "Durbin-Levinson recursion singular at order {k}"
            )));
        }
        let num = rho[k - 1] - (0..k - 1).map(|j| phi[j] * rho[k - 2 - j]).sum::<f64>();
        let phi_kk = num / prev_err;
        let mut next = Vec::with_capacity(k);
        for j in 0..k - 1 {
            next.push(phi[j] - phi_kk * phi[k - 2 - j]);
        }
        next.push(phi_kk);
        prev_err *= 1.0 - phi_kk * phi_kk;
        phi = next;
    }
    Ok(phi[lag - 1])
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sa, mut sb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        sa += (x - ma) * (x - ma);
        sb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    if sa <= 0.0 || sb <= 0.0 {
        None
    } else {
        Some(sab / (sa * sb).sqrt())
    }
}

/// Features of one item on its store-averaged series. Degenerate
/// quantities come back as NaN (log features) or 0 (correlations) and
/// are finalized by the sentinel pass in `feature_matrix`.
pub fn compute_item_features(panel: &SalesPanel, item: usize) -> ItemFeatureVector {
    let series = panel.store_averaged_series(item);
    let n = series.len();
    let first_active = series.iter().position(|&v| v > 0.0);
    let sample_size = first_active.map_or(0.0, |t| (n - t) as f64);
    let mean = series.iter().sum::<f64>() / n as f64;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let log_mean = if mean > 0.0 { mean.ln() } else { f64::NAN };
    let log_sd = if sd > 0.0 { sd.ln() } else { f64::NAN };
    let acf1 = acf(&series, 1).unwrap_or(0.0);
    let pacf7 = pacf(&series, 7).unwrap_or(0.0);

    // correlation with the year-lagged 7-day rolling mean, over the days
    // where that lag exists
    let lag = LAST_YEAR_LAG + ROLLING_WINDOWS[0];
    let corr_lagged_rm = if n > lag + 1 {
        let a: Vec<f64> = (lag..n).map(|t| series[t]).collect();
        let b: Vec<f64> = (lag..n)
            .map(|t| rolling_mean(&series, 0, ROLLING_WINDOWS[0], t - LAST_YEAR_LAG).unwrap())
            .collect();
        pearson(&a, &b).unwrap_or(0.0)
    } else {
        0.0
    };
    let zero_prop = series.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    ItemFeatureVector { sample_size, log_mean, log_sd, acf1, pacf7, corr_lagged_rm, zero_prop }
}

/// Stack all items' features and replace NaN log features by the column
/// minimum over valid entries minus one, so every item stays clusterable.
pub fn feature_matrix(panel: &SalesPanel) -> Array2<f64> {
    let n = panel.n_items();
    let mut m = Array2::<f64>::zeros((n, N_FEATURES));
    for item in 0..n {
        let f = compute_item_features(panel, item).to_array();
        for (c, v) in f.into_iter().enumerate() {
            m[[item, c]] = v;
        }
    }
    for c in 0..N_FEATURES {
        let valid_min = m
            .column(c)
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        let sentinel = if valid_min.is_finite() { valid_min - 1.0 } else { 0.0 };
        for v in m.column_mut(c) {
            if !v.is_finite() {
                *v = sentinel;
            }
        }
    }
    m
}

/// Lloyd's algorithm with k-means++ initialization on z-scored features.
/// Deterministic for a fixed seed; best of `RESTARTS` restarts by
/// within-cluster sum of squares.
pub fn kmeans(features: &Array2<f64>, g: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = features.nrows();
    if g == 0 || g > n {
        return Err(Error::Range(format!("cluster count {g} invalid for {n} items")));
    }
    let z = zscore(features);

    let mut best: Option<(f64, Vec<usize>, Array2<f64>)> = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let (labels, centroids, wcss) = lloyd(&z, g, &mut rng)?;
        if best.as_ref().map_or(true, |(b, _, _)| wcss < *b) {
            best = Some((wcss, labels, centroids));
        }
    }
    let (_, labels, centroids) = best.unwrap();
    Ok(ClusterAssignment { labels, centroids, g, seed })
}

fn zscore(features: &Array2<f64>) -> Array2<f64> {
    let mut z = features.clone();
    for mut col in z.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / scale);
    }
    z
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lloyd(
    z: &Array2<f64>,
    g: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Array2<f64>, f64)> {
    let n = z.nrows();
    let d = z.ncols();

    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((g, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&z.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), centroids.row(0))).collect();
    for c in 1..g {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&z.row(pick));
        for i in 0..n {
            min_d2[i] = min_d2[i].min(sq_dist(z.row(i), centroids.row(c)));
        }
    }

    let mut labels = vec![0usize; n];
    let mut prev_wcss = f64::INFINITY;
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut wcss = 0.0;
        for i in 0..n {
            let (mut best_c, mut best_d) = (labels[i], f64::INFINITY);
            for c in 0..g {
                let dist = sq_dist(z.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if best_c != labels[i] {
                labels[i] = best_c;
                changed = true;
            }
            wcss += best_d;
        }
        // the objective never increases across Lloyd iterations
        debug_assert!(wcss <= prev_wcss + 1e-9 * prev_wcss.abs().max(1.0));
        prev_wcss = wcss;

        // recompute centroids; re-seed empty clusters from the farthest point
        let mut counts = vec![0usize; g];
        centroids.fill(0.0);
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = centroids.row_mut(labels[i]);
            row += &z.row(i);
        }
        for c in 0..g {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row /= counts[c] as f64;
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(z.row(a), centroids.row(labels[a]));
                        let db = sq_dist(z.row(b), centroids.row(labels[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&z.row(far));
                labels[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let wcss = (0..n).map(|i| sq_dist(z.row(i), centroids.row(labels[i]))).sum();
    Ok((labels, centroids, wcss))
}

/// Convenience wrapper: features then k-means.
pub fn cluster_items(panel: &SalesPanel, g: usize, seed: u64) -> Result<(Array2<f64>, ClusterAssignment)> {
    let features = feature_matrix(panel);
    let assignment = kmeans(&features, g, seed)?;
    Ok((features, assignment))
}
