//! Quantile forecasting and pinball-loss evaluation.
//!
//! Forecasts come from a single predicted distribution per row, so the
//! quantiles never cross. The benchmark column uses empirical per-weekday
//! order-statistic quantiles; losses aggregate into the report layout of
//! the evaluation tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::{Family, ParamVector, PARAM_MAX, PARAM_MIN, PROB_EPS};
use crate::error::{Error, Result};
use crate::features::{DesignMatrix, RowKey, SalesPanel};
use crate::iwls::FitResult;

/// M5 uncertainty probability levels.
pub const M5_PROBS: [f64; 9] = [0.005, 0.025, 0.165, 0.25, 0.5, 0.75, 0.835, 0.975, 0.995];

/// trailing same-weekday observations used by the benchmark
pub const BENCHMARK_HISTORY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    pub probs: Vec<f64>,
}

impl QuantileGrid {
    pub fn m5() -> QuantileGrid {
        QuantileGrid { probs: M5_PROBS.to_vec() }
    }

    pub fn new(probs: Vec<f64>) -> Result<QuantileGrid> {
        if probs.is_empty() {
            return Err(Error::Range("quantile grid must be nonempty".into()));
        }
        for pair in probs.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Range("quantile grid must be strictly increasing".into()));
            }
        }
        if probs[0] <= 0.0 || *probs.last().unwrap() >= 1.0 {
            return Err(Error::Range("quantile probabilities must lie in (0,1)".into()));
        }
        Ok(QuantileGrid { probs })
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        QuantileGrid::m5()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub key: RowKey,
    /// integer quantiles aligned with the grid probabilities
    pub q: Vec<u64>,
    /// family name, "hqc_sel", or "benchmark"
    pub source: String,
    /// set when a linked parameter hit its clamp bound during inversion
    pub clamped: bool,
}

/// Standard pinball (quantile) loss.
pub fn pinball(y: f64, q: f64, p: f64) -> f64 {
    if y >= q {
        p * (y - q)
    } else {
        (1.0 - p) * (q - y)
    }
}

fn invert_flagged(link: crate::dist::Link, eta: f64) -> (f64, bool) {
    let v = link.invert(eta);
    let clamped = match link {
        crate::dist::Link::Logit => v <= PROB_EPS || v >= 1.0 - PROB_EPS,
        _ => v <= PARAM_MIN || v >= PARAM_MAX,
    };
    (v, clamped)
}

/// Predicted distribution for one design row, with coefficient/column
/// alignment by name.
pub fn predict_params(fit: &FitResult, design: &DesignMatrix, row: usize) -> Result<(ParamVector, bool)> {
    let links = fit.family.links();
    let mut etas = [0.0f64; 2];
    let mut missing: Vec<String> = Vec::new();
    for (m, coefs) in fit.coefficients.iter().enumerate() {
        for (name, &b) in fit.column_names.iter().zip(coefs) {
            if b == 0.0 {
                continue;
            }
            match design.col_index(name) {
                Some(j) => etas[m] += b * design.x[[row, j]],
                None => missing.push(name.clone()),
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingKeys(missing));
    }
    let mut clamped = false;
    let mut theta = Vec::with_capacity(fit.family.n_params());
    for m in 0..fit.family.n_params() {
        let (v, c) = invert_flagged(links[m], etas[m]);
        theta.push(v);
        clamped |= c;
    }
    Ok((ParamVector::new(fit.family, &theta)?, clamped))
}

/// Quantiles of the single predicted distribution — monotone across the
/// grid by construction.
pub fn forecast_quantiles(
    fit: &FitResult,
    design: &DesignMatrix,
    row: usize,
    grid: &QuantileGrid,
) -> Result<QuantileForecast> {
    let (theta, clamped) = predict_params(fit, design, row)?;
    let q = grid.probs.iter().map(|&p| theta.quantile(p)).collect();
    Ok(QuantileForecast {
        key: design.rows[row].clone(),
        q,
        source: fit.family.name().to_string(),
        clamped,
    })
}

/// Type-1 empirical quantile: smallest order statistic v_(k) with
/// k/n >= p.
fn empirical_quantile(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let k = (p * n as f64).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

/// Empirical per-weekday benchmark: order-statistic quantiles over the
/// trailing same-weekday observations, falling back to all history when
/// fewer than eight are available.
pub fn benchmark_forecast(
    panel: &SalesPanel,
    grid: &QuantileGrid,
    t: usize,
    item: usize,
    store: usize,
) -> Result<QuantileForecast> {
    if t >= panel.n_days() || item >= panel.n_items() || store >= panel.n_stores() {
        return Err(Error::MissingKeys(vec![format!("t={t},item={item},store={store}")]));
    }
    let wd = panel.weekday(t);
    let mut hist: Vec<u64> = (0..t)
        .rev()
        .filter(|&s| panel.weekday(s) == wd)
        .take(BENCHMARK_HISTORY)
        .map(|s| panel.count(s, item, store) as u64)
        .collect();
    if hist.len() < BENCHMARK_HISTORY {
        hist = (0..t).map(|s| panel.count(s, item, store) as u64).collect();
    }
    if hist.is_empty() {
        return Err(Error::Degenerate(format!("no history before day {t}")));
    }
    hist.sort_unstable();
    let q = grid.probs.iter().map(|&p| empirical_quantile(&hist, p)).collect();
    Ok(QuantileForecast {
        key: RowKey { target_day: t, item, store },
        q,
        source: "benchmark".to_string(),
        clamped: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub probs: Vec<f64>,
    /// source -> mean pinball loss per grid probability
    pub per_quantile_loss: BTreeMap<String, Vec<f64>>,
    /// source -> unweighted mean over the grid
    pub avg_loss: BTreeMap<String, f64>,
    /// source -> 100 * (1 - avg/avg_benchmark); present when a benchmark
    /// source exists
    pub improvement_pct: BTreeMap<String, f64>,
}

/// Mean pinball loss per (source, probability) over all forecast keys.
pub fn evaluate_report(
    forecasts: &[QuantileForecast],
    actuals: &SalesPanel,
    grid: &QuantileGrid,
) -> Result<EvaluationReport> {
    let np = grid.probs.len();
    let missing: Vec<String> = forecasts
        .iter()
        .filter(|f| {
            f.key.target_day >= actuals.n_days()
                || f.key.item >= actuals.n_items()
                || f.key.store >= actuals.n_stores()
        })
        .map(|f| format!("t={},item={},store={}", f.key.target_day, f.key.item, f.key.store))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for f in forecasts {
        if f.q.len() != np {
            return Err(Error::Range(format!(
                "forecast from '{}' has {} quantiles for a {np}-point grid",
                f.source,
                f.q.len()
            )));
        }
        let y = actuals.count(f.key.target_day, f.key.item, f.key.store) as f64;
        let entry = sums.entry(f.source.clone()).or_insert_with(|| (vec![0.0; np], 0));
        for (k, (&p, &q)) in grid.probs.iter().zip(&f.q).enumerate() {
            entry.0[k] += pinball(y, q as f64, p);
        }
        entry.1 += 1;
    }
    let per_quantile_loss: BTreeMap<String, Vec<f64>> = sums
        .into_iter()
        .map(|(s, (tot, n))| (s, tot.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let avg_loss: BTreeMap<String, f64> = per_quantile_loss
        .iter()
        .map(|(s, l)| (s.clone(), l.iter().sum::<f64>() / np as f64))
        .collect();
    let improvement_pct = match avg_loss.get("benchmark") {
        Some(&bench) if bench > 0.0 => avg_loss
            .iter()
            .map(|(s, &a)| (s.clone(), 100.0 * (1.0 - a / bench)))
            .collect(),
        _ => BTreeMap::new(),
    };
    Ok(EvaluationReport { probs: grid.probs.clone(), per_quantile_loss, avg_loss, improvement_pct })
}

/// Model-selection summary across clusters: mean HQC per family plus the
/// share of clusters (unweighted and cluster-size-weighted) where each
/// family attains the minimal HQC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HqcSummary {
    pub mean_hqc: BTreeMap<String, f64>,
    pub best_share_pct: BTreeMap<String, f64>,
    pub weighted_best_share_pct: BTreeMap<String, f64>,
}

pub fn hqc_summary(cluster_fits: &[(usize, Vec<FitResult>)]) -> Result<HqcSummary> {
    if cluster_fits.is_empty() {
        return Err(Error::Range("hqc summary needs at least one cluster".into()));
    }
    let mut hqc_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut best_counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut weighted_counts: BTreeMap<String, f64> = BTreeMap::new();
    let total_items: usize = cluster_fits.iter().map(|(sz, _)| sz).sum();
    for (size, fits) in cluster_fits {
        if fits.is_empty() {
            return Err(Error::Range("cluster without fits in hqc summary".into()));
        }
        let mut best = &fits[0];
        for f in fits {
            let e = hqc_sums.entry(f.family.name().to_string()).or_insert((0.0, 0));
            e.0 += f.ic.hqc;
            e.1 += 1;
            let better = f.ic.hqc < best.ic.hqc
                || (f.ic.hqc == best.ic.hqc
                    && Family::ALL.iter().position(|&g| g == f.family)
                        < Family::ALL.iter().position(|&g| g == best.family));
            if better {
                best = f;
            }
        }
        *best_counts.entry(best.family.name().to_string()).or_default() += 1.0;
        *weighted_counts.entry(best.family.name().to_string()).or_default() += *size as f64;
    }
    let n_clusters = cluster_fits.len() as f64;
    let names: Vec<String> = hqc_sums.keys().cloned().collect();
    Ok(HqcSummary {
        mean_hqc: hqc_sums.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect(),
        best_share_pct: names
            .iter()
            .map(|s| (s.clone(), 100.0 * best_counts.get(s).copied().unwrap_or(0.0) / n_clusters))
            .collect(),
        weighted_best_share_pct: names
            .iter()
            .map(|s| {
                (
                    s.clone(),
                    100.0 * weighted_counts.get(s).copied().unwrap_or(0.0) / total_items as f64,
                )
            })
            .collect(),
    })
}

/// Table layout: one row per source, the 9 probabilities, the average,
/// the improvement over the benchmark, and the HQC columns when present.
pub fn write_report_csv(
    path: &Path,
    report: &EvaluationReport,
    hqc: Option<&HqcSummary>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["source".to_string()];
    header.extend(report.probs.iter().map(|p| format!("q{p}")));
    header.extend(["avg", "improvement_pct", "mean_hqc", "best_hqc_pct", "weighted_best_hqc_pct"]
        .map(String::from));
    w.write_record(&header)?;
    for (source, losses) in &report.per_quantile_loss {
        let mut rec = vec![source.clone()];
        rec.extend(losses.iter().map(|v| format!("{v:.6}")));
        rec.push(format!("{:.6}", report.avg_loss[source]));
        rec.push(
            report.improvement_pct.get(source).map_or(String::new(), |v| format!("{v:.4}")),
        );
        for map in [
            hqc.map(|h| &h.mean_hqc),
            hqc.map(|h| &h.best_share_pct),
            hqc.map(|h| &h.weighted_best_share_pct),
        ] {
            rec.push(
                map.and_then(|m| m.get(source)).map_or(String::new(), |v| format!("{v:.6}")),
            );
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Format(format!("flush {}: {e}", path.display())))?;
    Ok(())
}

/// Long-format curve data: one row per (source, probability).
pub fn write_per_quantile_csv(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "prob", "pinball"])?;
    for (source, losses) in &report.per_quantile_loss {
        for (&p, &l) in report.probs.iter().zip(losses) {
            w.write_record([source.as_str(), &p.to_string(), &format!("{l:.6}")])?;
        }
    }
    w.flush().map_err(|e| Error::Format(format!("flush {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iwls::IcValues;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use ndarray::{Array2, Array3};

    #[test]
    fn pinball_examples() {
        assert_abs_diff_eq!(pinball(5.0, 3.0, 0.975), 1.95, epsilon = 1e-12);
        assert_abs_diff_eq!(pinball(3.0, 5.0, 0.975), 0.05, epsilon = 1e-12);
        for p in M5_PROBS {
            assert_eq!(pinball(4.0, 4.0, p), 0.0);
            assert!(pinball(1.0, 6.0, p) > 0.0);
        }
    }

    #[test]
    fn grid_validation() {
        let g = QuantileGrid::m5();
        assert_eq!(g.probs.len(), 9);
        assert_abs_diff_eq!(g.probs[4], 0.5);
        assert!(QuantileGrid::new(vec![0.2, 0.2]).is_err());
        assert!(QuantileGrid::new(vec![0.0, 0.5]).is_err());
        assert!(QuantileGrid::new(vec![0.5, 1.0]).is_err());
        assert!(QuantileGrid::new(vec![]).is_err());
    }

    fn one_col_design(n: usize) -> DesignMatrix {
        DesignMatrix {
            x: Array2::ones((n, 1)),
            target: vec![0; n],
            rows: (0..n).map(|t| RowKey { target_day: t, item: 0, store: 0 }).collect(),
            column_names: vec!["intercept".into()],
            column_groups: BTreeMap::new(),
            penalized: vec![false],
        }
    }

    fn fit_with(family: Family, coefficients: Vec<Vec<f64>>, hqc: f64) -> FitResult {
        let n_params = coefficients.len();
        FitResult {
            family,
            coefficients,
            lambda_chosen: vec![0.0; n_params],
            log_lik: -1.0,
            df: 1,
            n_obs: 100,
            ic: IcValues { aic: hqc, bic: hqc, hqc },
            converged: true,
            cycles_used: 1,
            column_names: vec!["intercept".into()],
            deviance_path: vec![],
        }
    }

    #[test]
    fn forecast_quantiles_poisson_unit_mean() {
        let design = one_col_design(3);
        let fit = fit_with(Family::Poisson, vec![vec![0.0]], 1.0);
        // log link: intercept 0 -> mu = 1
        let f = forecast_quantiles(&fit, &design, 0, &QuantileGrid::m5()).unwrap();
        assert_eq!(f.q[4], 1); // median of Poisson(1)
        assert!(!f.clamped);
        for pair in f.q.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        assert_eq!(f.source, "poisson");
    }

    #[test]
    fn forecast_quantiles_zip_mostly_zero() {
        let design = one_col_design(1);
        // logit(sigma) = 4 -> sigma ~ 0.982: everything through p=0.975 is 0
        let fit = fit_with(Family::ZeroInfPoisson, vec![vec![1.0], vec![4.0]], 1.0);
        let f = forecast_quantiles(&fit, &design, 0, &QuantileGrid::m5()).unwrap();
        for k in 0..8 {
            assert_eq!(f.q[k], 0, "p={}", M5_PROBS[k]);
        }
    }

    #[test]
    fn forecast_clamp_flag_and_missing_columns() {
        let design = one_col_design(1);
        let fit = fit_with(Family::Poisson, vec![vec![40.0]], 1.0);
        let f = forecast_quantiles(&fit, &design, 0, &QuantileGrid::m5()).unwrap();
        assert!(f.clamped); // exp(40) is beyond the parameter cap
        let mut bad = fit_with(Family::Poisson, vec![vec![1.0]], 1.0);
        bad.column_names = vec!["no_such_column".into()];
        match forecast_quantiles(&bad, &design, 0, &QuantileGrid::m5()) {
            Err(Error::MissingKeys(keys)) => assert_eq!(keys, vec!["no_such_column"]),
            other => panic!("expected MissingKeys, got {other:?}"),
        }
    }

    fn tiny_panel(counts_fn: impl Fn(usize) -> u32, n_days: usize) -> SalesPanel {
        let mut counts = Array3::zeros((n_days, 1, 1));
        for t in 0..n_days {
            counts[[t, 0, 0]] = counts_fn(t);
        }
        let start = NaiveDate::from_ymd_opt(2015, 6, 1).unwrap();
        let dates = (0..n_days).map(|t| start + chrono::Days::new(t as u64)).collect();
        SalesPanel::new(counts, dates, vec!["item".into()], vec!["store".into()]).unwrap()
    }

    #[test]
    fn benchmark_constant_history() {
        let panel = tiny_panel(|_| 4, 60);
        let f = benchmark_forecast(&panel, &QuantileGrid::m5(), 59, 0, 0).unwrap();
        assert!(f.q.iter().all(|&q| q == 4));
        assert_eq!(f.source, "benchmark");
    }

    #[test]
    fn benchmark_empirical_quantile_examples() {
        // same weekday every 7 days: day 56 sees days {0,7,...,49}; put an
        // 8 on day 49 and zeros elsewhere -> history {0x7, 8}
        let panel = tiny_panel(|t| if t == 49 { 8 } else { 0 }, 57);
        let grid = QuantileGrid::m5();
        let f = benchmark_forecast(&panel, &grid, 56, 0, 0).unwrap();
        assert_eq!(f.q[4], 0); // F(0) = 7/8 >= 0.5
        assert_eq!(f.q[8], 8); // F(0) = 0.875 < 0.995
        // insufficient same-weekday history falls back to all days
        let f2 = benchmark_forecast(&panel, &grid, 20, 0, 0).unwrap();
        assert_eq!(f2.q[4], 0);
        assert!(benchmark_forecast(&panel, &grid, 0, 0, 0).is_err());
        assert!(benchmark_forecast(&panel, &grid, 100, 0, 0).is_err());
    }

    #[test]
    fn report_perfect_forecast_and_self_benchmark() {
        let panel = tiny_panel(|t| (t % 3) as u32, 30);
        let grid = QuantileGrid::m5();
        let mut forecasts = Vec::new();
        for t in 25..30 {
            let y = panel.count(t, 0, 0) as u64;
            forecasts.push(QuantileForecast {
                key: RowKey { target_day: t, item: 0, store: 0 },
                q: vec![y; 9],
                source: "poisson".into(),
                clamped: false,
            });
            forecasts.push(QuantileForecast {
                key: RowKey { target_day: t, item: 0, store: 0 },
                q: vec![y + 1; 9],
                source: "benchmark".into(),
                clamped: false,
            });
        }
        let report = evaluate_report(&forecasts, &panel, &grid).unwrap();
        assert!(report.per_quantile_loss["poisson"].iter().all(|&l| l == 0.0));
        assert_abs_diff_eq!(report.avg_loss["poisson"], 0.0);
        assert_abs_diff_eq!(report.improvement_pct["poisson"], 100.0);
        assert_abs_diff_eq!(report.improvement_pct["benchmark"], 0.0);
        // permutation invariance
        let mut rev = forecasts.clone();
        rev.reverse();
        let report2 = evaluate_report(&rev, &panel, &grid).unwrap();
        assert_eq!(report.avg_loss, report2.avg_loss);
        // key outside the panel
        let mut bad = forecasts;
        bad[0].key.target_day = 99;
        assert!(matches!(evaluate_report(&bad, &panel, &grid), Err(Error::MissingKeys(_))));
    }

    #[test]
    fn true_quantile_minimizes_expected_pinball() {
        // against +-1 perturbations of the true quantile on a big sample
        let theta = ParamVector::new(Family::NegBinomial, &[2.0, 1.0]).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..100_000).map(|_| theta.sample(&mut rng) as f64).collect();
        for p in [0.25, 0.5, 0.75, 0.975] {
            let q = theta.quantile(p) as f64;
            let mean_loss = |qq: f64| {
                draws.iter().map(|&y| pinball(y, qq, p)).sum::<f64>() / draws.len() as f64
            };
            let at_true = mean_loss(q);
            assert!(at_true <= mean_loss(q + 1.0) + 1e-9, "p={p} up");
            if q >= 1.0 {
                assert!(at_true <= mean_loss(q - 1.0) + 1e-9, "p={p} down");
            }
        }
    }

    #[test]
    fn hqc_summary_shares() {
        let mk = |family, hqc| fit_with(family, vec![vec![0.0]], hqc);
        let clusters = vec![
            (10, vec![mk(Family::Poisson, 2.0), mk(Family::NegBinomial, 1.5)]),
            (30, vec![mk(Family::Poisson, 1.0), mk(Family::NegBinomial, 1.4)]),
            (60, vec![mk(Family::Poisson, 2.2), mk(Family::NegBinomial, 1.1)]),
        ];
        let s = hqc_summary(&clusters).unwrap();
        assert_abs_diff_eq!(s.mean_hqc["poisson"], (2.0 + 1.0 + 2.2) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.best_share_pct["neg_binomial"], 200.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.best_share_pct["poisson"], 100.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weighted_best_share_pct["neg_binomial"], 70.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weighted_best_share_pct["poisson"], 30.0, epsilon = 1e-9);
        assert!(hqc_summary(&[]).is_err());
    }

    #[test]
    fn report_csv_round_trip_layout() {
        let panel = tiny_panel(|_| 2, 20);
        let grid = QuantileGrid::m5();
        let forecasts: Vec<QuantileForecast> = (15..20)
            .flat_map(|t| {
                ["poisson", "benchmark"].map(|s| QuantileForecast {
                    key: RowKey { target_day: t, item: 0, store: 0 },
                    q: vec![2; 9],
                    source: s.into(),
                    clamped: false,
                })
            })
            .collect();
        let report = evaluate_report(&forecasts, &panel, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rp = dir.path().join("report.csv");
        let qp = dir.path().join("per_quantile.csv");
        write_report_csv(&rp, &report, None).unwrap();
        write_per_quantile_csv(&qp, &report).unwrap();
        let txt = std::fs::read_to_string(&rp).unwrap();
        assert!(txt.starts_with("source,q0.005,"));
        assert_eq!(txt.lines().count(), 3);
        let qtxt = std::fs::read_to_string(&qp).unwrap();
        assert_eq!(qtxt.lines().count(), 1 + 2 * 9);
    }
}
