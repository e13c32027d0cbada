//! Sales panel ingestion and design matrix construction.
//!
//! The design matrix carries, per training row (t, item, store): lagged
//! demand of the item-store series and its three cluster aggregates,
//! rolling means, the last-year demand level, weekday dummies for
//! Monday/Friday/Saturday/Sunday, and one-hot item and store dummies.
//! With 10 stores that is K+51 columns including the intercept, for a
//! cluster of K items.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

/// Lag sets of the linear predictor.
pub const DEMAND_LAGS: [usize; 4] = [0, 1, 6, 7 * 52 - 1];
pub const ROLLING_WINDOWS: [usize; 4] = [6, 13, 27, 55];
pub const LAST_YEAR_LAG: usize = 7 * 52;
/// Weekdays with their own dummy.
pub const DUMMY_WEEKDAYS: [(Weekday, &str); 4] = [
    (Weekday::Mon, "Mon"),
    (Weekday::Fri, "Fri"),
    (Weekday::Sat, "Sat"),
    (Weekday::Sun, "Sun"),
];

/// Days of history a feature time t needs: the last-year rolling mean
/// spans t-364 .. t-370.
pub const FEATURE_HISTORY: usize = LAST_YEAR_LAG + ROLLING_WINDOWS[0];

const SERIES_NAMES: [&str; 4] = ["is", "store", "item", "overall"];

/// Raw count tensor (day, item, store) plus calendar metadata.
#[derive(Debug, Clone)]
pub struct SalesPanel {
    pub counts: Array3<u32>,
    pub dates: Vec<NaiveDate>,
    pub item_ids: Vec<String>,
    pub store_ids: Vec<String>,
}

impl SalesPanel {
    pub fn new(
        counts: Array3<u32>,
        dates: Vec<NaiveDate>,
        item_ids: Vec<String>,
        store_ids: Vec<String>,
    ) -> Result<SalesPanel> {
        let (t, i, j) = counts.dim();
        if dates.len() != t || item_ids.len() != i || store_ids.len() != j {
            return Err(Error::Format("panel dimensions do not match metadata".into()));
        }
        for w in dates.windows(2) {
            if w[1] != w[0].succ_opt().unwrap() {
                return Err(Error::Format(format!(
                    "dates must be daily without gaps; found {} after {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(SalesPanel { counts, dates, item_ids, store_ids })
    }

    pub fn n_days(&self) -> usize {
        self.counts.dim().0
    }

    pub fn n_items(&self) -> usize {
        self.counts.dim().1
    }

    pub fn n_stores(&self) -> usize {
        self.counts.dim().2
    }

    pub fn count(&self, t: usize, item: usize, store: usize) -> u32 {
        self.counts[[t, item, store]]
    }

    /// One item-store series as reals.
    pub fn series(&self, item: usize, store: usize) -> Vec<f64> {
        (0..self.n_days()).map(|t| self.counts[[t, item, store]] as f64).collect()
    }

    /// Item series averaged over all stores.
    pub fn store_averaged_series(&self, item: usize) -> Vec<f64> {
        let j = self.n_stores() as f64;
        (0..self.n_days())
            .map(|t| (0..self.n_stores()).map(|s| self.counts[[t, item, s]] as f64).sum::<f64>() / j)
            .collect()
    }

    pub fn weekday(&self, t: usize) -> Weekday {
        self.dates[t].weekday()
    }
}

/// Parse M5-format wide sales and calendar CSVs.
pub fn load_panel(sales_csv: &Path, calendar_csv: &Path) -> Result<SalesPanel> {
    let mut cal = csv::Reader::from_path(calendar_csv)
        .map_err(|e| Error::Format(format!("{}: {e}", calendar_csv.display())))?;
    let headers = cal.headers()?.clone();
    let d_idx = header_index(&headers, "d", calendar_csv)?;
    let date_idx = header_index(&headers, "date", calendar_csv)?;
    header_index(&headers, "weekday", calendar_csv)?;
    let mut day_labels: Vec<String> = Vec::new();
    let mut dates: Vec<NaiveDate> = Vec::new();
    for rec in cal.records() {
        let rec = rec?;
        day_labels.push(rec[d_idx].to_string());
        let date = NaiveDate::parse_from_str(&rec[date_idx], "%Y-%m-%d")
            .map_err(|e| Error::Format(format!("bad date '{}': {e}", &rec[date_idx])))?;
        dates.push(date);
    }

    let mut sales = csv::Reader::from_path(sales_csv)
        .map_err(|e| Error::Format(format!("{}: {e}", sales_csv.display())))?;
    let headers = sales.headers()?.clone();
    let item_idx = header_index(&headers, "item_id", sales_csv)?;
    let store_idx = header_index(&headers, "store_id", sales_csv)?;
    let day_cols: Vec<(usize, usize)> = day_labels
        .iter()
        .enumerate()
        .filter_map(|(day, label)| {
            headers.iter().position(|h| h == label).map(|col| (day, col))
        })
        .collect();
    if day_cols.is_empty() {
        return Err(Error::Format(format!(
            "{}: no day columns matching the calendar",
            sales_csv.display()
        )));
    }
    // day columns must be a contiguous prefix of the calendar
    for (pos, (day, _)) in day_cols.iter().enumerate() {
        if *day != pos {
            return Err(Error::Format("sales day columns do not start at the first calendar day".into()));
        }
    }
    let n_days = day_cols.len();

    let mut item_ids: Vec<String> = Vec::new();
    let mut store_ids: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, Vec<u32>)> = Vec::new();
    for (row_no, rec) in sales.records().enumerate() {
        let rec = rec?;
        let item = intern(&mut item_ids, &rec[item_idx]);
        let store = intern(&mut store_ids, &rec[store_idx]);
        let mut row = Vec::with_capacity(n_days);
        for &(day, col) in &day_cols {
            let cell = &rec[col];
            let v: u32 = cell.parse().map_err(|_| {
                Error::Format(format!(
                    "{}: row {} column {}: '{}' is not a nonnegative integer",
                    sales_csv.display(),
                    row_no + 2,
                    day_labels[day],
                    cell
                ))
            })?;
            row.push(v);
        }
        cells.push((item, store, row));
    }
    let mut counts = Array3::<u32>::zeros((n_days, item_ids.len(), store_ids.len()));
    for (item, store, row) in cells {
        for (t, v) in row.into_iter().enumerate() {
            counts[[t, item, store]] = v;
        }
    }
    dates.truncate(n_days);
    SalesPanel::new(counts, dates, item_ids, store_ids)
}

/// Write a panel back out in the same M5 wide layout (used for round
/// trips and synthetic fixtures).
pub fn write_m5_csvs(panel: &SalesPanel, sales_csv: &Path, calendar_csv: &Path) -> Result<()> {
    let mut cal = csv::Writer::from_path(calendar_csv)?;
    cal.write_record(["d", "date", "weekday"])?;
    for (t, date) in panel.dates.iter().enumerate() {
        cal.write_record([format!("d_{}", t + 1), date.format("%Y-%m-%d").to_string(), format!("{:?}", date.weekday())])?;
    }
    cal.flush()?;

    let mut w = csv::Writer::from_path(sales_csv)?;
    let mut header: Vec<String> =
        ["id", "item_id", "dept_id", "cat_id", "store_id", "state_id"].map(String::from).to_vec();
    header.extend((0..panel.n_days()).map(|t| format!("d_{}", t + 1)));
    w.write_record(&header)?;
    for (i, item) in panel.item_ids.iter().enumerate() {
        for (j, store) in panel.store_ids.iter().enumerate() {
            let mut rec = vec![
                format!("{item}_{store}_validation"),
                item.clone(),
                "DEPT".to_string(),
                "CAT".to_string(),
                store.clone(),
                "ST".to_string(),
            ];
            rec.extend((0..panel.n_days()).map(|t| panel.counts[[t, i, j]].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Truncate to the trailing `days` target days plus the extra history the
/// longest lag requires (and one day for the default horizon).
pub fn restrict_window(panel: &SalesPanel, days: usize) -> Result<SalesPanel> {
    if days > panel.n_days() {
        return Err(Error::Range(format!(
            "window of {days} days exceeds the {} days available",
            panel.n_days()
        )));
    }
    let keep = (days + FEATURE_HISTORY + 1).min(panel.n_days());
    let start = panel.n_days() - keep;
    Ok(SalesPanel {
        counts: panel.counts.slice(ndarray::s![start.., .., ..]).to_owned(),
        dates: panel.dates[start..].to_vec(),
        item_ids: panel.item_ids.clone(),
        store_ids: panel.store_ids.clone(),
    })
}

/// Mean of series[t-k2 ..= t-k1].
pub fn rolling_mean(series: &[f64], k1: usize, k2: usize, t: usize) -> Result<f64> {
    if k2 < k1 || t < k2 || t >= series.len() {
        return Err(Error::Range(format!(
            "rolling mean window [{k1},{k2}] invalid at t={t} (len {})",
            series.len()
        )));
    }
    let sum: f64 = (k1..=k2).map(|k| series[t - k]).sum();
    Ok(sum / (k2 - k1 + 1) as f64)
}

/// Per-cluster demand aggregates: the item-store series plus averages
/// over the cluster's items, over stores, and over both.
#[derive(Debug, Clone)]
pub struct AggregateSeries {
    pub items: Vec<usize>,
    /// (t, position-in-cluster, store) as reals
    pub item_store: Array3<f64>,
    /// (t, store): average over cluster items
    pub store_avg: Array2<f64>,
    /// (t, position-in-cluster): average over stores
    pub item_avg: Array2<f64>,
    /// (t,): average over cluster items and stores
    pub overall_avg: Array1<f64>,
}

pub fn aggregate_series(panel: &SalesPanel, cluster_items: &[usize]) -> Result<AggregateSeries> {
    if cluster_items.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let (t_n, _, s_n) = panel.counts.dim();
    let k = cluster_items.len();
    let mut item_store = Array3::<f64>::zeros((t_n, k, s_n));
    for (pos, &item) in cluster_items.iter().enumerate() {
        for t in 0..t_n {
            for s in 0..s_n {
                item_store[[t, pos, s]] = panel.counts[[t, item, s]] as f64;
            }
        }
    }
    let store_avg = item_store.mean_axis(ndarray::Axis(1)).unwrap();
    let item_avg = item_store.mean_axis(ndarray::Axis(2)).unwrap();
    let overall_avg = store_avg.mean_axis(ndarray::Axis(1)).unwrap();
    Ok(AggregateSeries { items: cluster_items.to_vec(), item_store, store_avg, item_avg, overall_avg })
}

/// Identifies one training row: the day being predicted and which series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RowKey {
    pub target_day: usize,
    pub item: usize,
    pub store: usize,
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: Array2<f64>,
    pub target: Vec<u32>,
    pub rows: Vec<RowKey>,
    pub column_names: Vec<String>,
    pub column_groups: BTreeMap<String, Range<usize>>,
    /// Per-column lasso penalty flag; the intercept is unpenalized.
    pub penalized: Vec<bool>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|n| n == name)
    }

    /// The 7-day trailing mean of the item-store series, used to seed the
    /// location predictor of iterative fits.
    pub fn location_hint(&self) -> Option<Vec<f64>> {
        self.col_index("rm_is_6").map(|c| self.x.column(c).to_vec())
    }

    /// Debug dump with canonical column names, target and row keys.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["target_day".to_string(), "item".to_string(), "store".to_string(), "target".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for (r, key) in self.rows.iter().enumerate() {
            let mut rec = vec![
                key.target_day.to_string(),
                key.item.to_string(),
                key.store.to_string(),
                self.target[r].to_string(),
            ];
            rec.extend(self.x.row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// All target days with full feature history, for one-step-ahead training.
pub fn build_training_set(
    panel: &SalesPanel,
    cluster_items: &[usize],
    h: usize,
) -> Result<DesignMatrix> {
    let first = FEATURE_HISTORY + h;
    if first >= panel.n_days() {
        return Err(Error::Range(format!(
            "panel of {} days has no target day with {} days of history",
            panel.n_days(),
            FEATURE_HISTORY
        )));
    }
    build_design(panel, cluster_items, h, first..panel.n_days())
}

/// Design rows for the given target days (each needs FEATURE_HISTORY + h
/// days of history). Rows are ordered (target_day, item, store).
pub fn build_design(
    panel: &SalesPanel,
    cluster_items: &[usize],
    h: usize,
    target_days: Range<usize>,
) -> Result<DesignMatrix> {
    if h == 0 {
        return Err(Error::Range("forecast horizon must be >= 1".into()));
    }
    let agg = aggregate_series(panel, cluster_items)?;
    let k = cluster_items.len();
    let n_stores = panel.n_stores();
    if target_days.start < FEATURE_HISTORY + h || target_days.end > panel.n_days() {
        return Err(Error::Range(format!(
            "target days {target_days:?} outside the feasible range {}..{}",
            FEATURE_HISTORY + h,
            panel.n_days()
        )));
    }

    let (column_names, column_groups) = layout_columns(panel, cluster_items);
    let n_cols = column_names.len();
    let n_rows = target_days.len() * k * n_stores;
    let mut x = Array2::<f64>::zeros((n_rows, n_cols));
    let mut target = Vec::with_capacity(n_rows);
    let mut rows = Vec::with_capacity(n_rows);

    // prefix[t+1] = sum of the first t+1 values; rolling means in O(1)
    let t_n = panel.n_days();
    let prefix = |series: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut p = vec![0.0; t_n + 1];
        for t in 0..t_n {
            p[t + 1] = p[t] + series(t);
        }
        p
    };
    let window_mean = |p: &[f64], t: usize, k1: usize, k2: usize| -> f64 {
        (p[t - k1 + 1] - p[t - k2]) / (k2 - k1 + 1) as f64
    };

    let overall_prefix = prefix(&|t| agg.overall_avg[t]);
    let store_prefix: Vec<Vec<f64>> =
        (0..n_stores).map(|s| prefix(&|t| agg.store_avg[[t, s]])).collect();
    let item_prefix: Vec<Vec<f64>> =
        (0..k).map(|pos| prefix(&|t| agg.item_avg[[t, pos]])).collect();
    let is_prefix: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|pos| (0..n_stores).map(|s| prefix(&|t| agg.item_store[[t, pos, s]])).collect())
        .collect();

    let mut r = 0;
    for tau in target_days.clone() {
        let t = tau - h;
        for (pos, &item) in cluster_items.iter().enumerate() {
            for s in 0..n_stores {
                let prefixes: [&[f64]; 4] =
                    [&is_prefix[pos][s], &store_prefix[s], &item_prefix[pos], &overall_prefix];
                let mut c = 0;
                x[[r, c]] = 1.0; // intercept
                c += 1;
                for &lag in &DEMAND_LAGS {
                    for p in prefixes {
                        x[[r, c]] = window_mean(p, t, lag, lag);
                        c += 1;
                    }
                }
                for &win in &ROLLING_WINDOWS {
                    for p in prefixes {
                        x[[r, c]] = window_mean(p, t, 0, win);
                        c += 1;
                    }
                }
                for p in prefixes {
                    x[[r, c]] = window_mean(p, t - LAST_YEAR_LAG, 0, ROLLING_WINDOWS[0]);
                    c += 1;
                }
                let wd = panel.weekday(t);
                for (day, _) in DUMMY_WEEKDAYS {
                    x[[r, c]] = if wd == day { 1.0 } else { 0.0 };
                    c += 1;
                }
                for p2 in 0..k {
                    x[[r, c]] = if p2 == pos { 1.0 } else { 0.0 };
                    c += 1;
                }
                for s2 in 0..n_stores {
                    x[[r, c]] = if s2 == s { 1.0 } else { 0.0 };
                    c += 1;
                }
                debug_assert_eq!(c, n_cols);
                target.push(panel.counts[[tau, item, s]]);
                rows.push(RowKey { target_day: tau, item, store: s });
                r += 1;
            }
        }
    }

    let mut penalized = vec![true; n_cols];
    penalized[0] = false;
    Ok(DesignMatrix { x, target, rows, column_names, column_groups, penalized })
}

fn layout_columns(
    panel: &SalesPanel,
    cluster_items: &[usize],
) -> (Vec<String>, BTreeMap<String, Range<usize>>) {
    let mut names = vec!["intercept".to_string()];
    let mut groups = BTreeMap::new();
    let mark = |names: &mut Vec<String>, groups: &mut BTreeMap<String, Range<usize>>, group: &str, add: Vec<String>| {
        let start = names.len();
        names.extend(add);
        groups.insert(group.to_string(), start..names.len());
    };
    mark(
        &mut names,
        &mut groups,
        "lagged_demand",
        DEMAND_LAGS
            .iter()
            .flat_map(|k| SERIES_NAMES.iter().map(move |s| format!("lag_{s}_{k}")))
            .collect(),
    );
    mark(
        &mut names,
        &mut groups,
        "rolling_mean",
        ROLLING_WINDOWS
            .iter()
            .flat_map(|k| SERIES_NAMES.iter().map(move |s| format!("rm_{s}_{k}")))
            .collect(),
    );
    mark(
        &mut names,
        &mut groups,
        "last_year_level",
        SERIES_NAMES.iter().map(|s| format!("ly_{s}")).collect(),
    );
    mark(
        &mut names,
        &mut groups,
        "weekday",
        DUMMY_WEEKDAYS.iter().map(|(_, n)| format!("dow_{n}")).collect(),
    );
    mark(
        &mut names,
        &mut groups,
        "item",
        cluster_items.iter().map(|&i| format!("item_{}", panel.item_ids[i])).collect(),
    );
    mark(
        &mut names,
        &mut groups,
        "store",
        panel.store_ids.iter().map(|s| format!("store_{s}")).collect(),
    );
    (names, groups)
}

fn header_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("{}: missing required column '{name}'", path.display())))
}

fn intern(pool: &mut Vec<String>, value: &str) -> usize {
    if let Some(i) = pool.iter().position(|v| v == value) {
        i
    } else {
        pool.push(value.to_string());
        pool.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synth_panel(
        n_days: usize,
        n_items: usize,
        n_stores: usize,
        f: impl Fn(usize, usize, usize) -> u32,
    ) -> SalesPanel {
        let mut counts = Array3::<u32>::zeros((n_days, n_items, n_stores));
        for t in 0..n_days {
            for i in 0..n_items {
                for j in 0..n_stores {
                    counts[[t, i, j]] = f(t, i, j);
                }
            }
        }
        let start = NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(); // a Monday
        let dates = (0..n_days).map(|t| start + chrono::Days::new(t as u64)).collect();
        let item_ids = (0..n_items).map(|i| format!("ITEM_{i:03}")).collect();
        let store_ids = (0..n_stores).map(|j| format!("ST_{j}")).collect();
        SalesPanel::new(counts, dates, item_ids, store_ids).unwrap()
    }

    #[test]
    fn rolling_mean_examples() {
        assert_eq!(rolling_mean(&[1.0, 2.0, 3.0, 4.0], 0, 1, 3).unwrap(), 3.5);
        assert_eq!(rolling_mean(&[5.0; 10], 2, 6, 8).unwrap(), 5.0);
        assert_relative_eq!(rolling_mean(&[0.0, 0.0, 7.0], 0, 2, 2).unwrap(), 7.0 / 3.0);
        assert!(rolling_mean(&[1.0, 2.0], 0, 3, 1).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let sales = dir.path().join("sales.csv");
        let calendar = dir.path().join("calendar.csv");
        let panel = synth_panel(5, 2, 1, |t, i, _| (t + i) as u32);
        write_m5_csvs(&panel, &sales, &calendar).unwrap();
        let loaded = load_panel(&sales, &calendar).unwrap();
        assert_eq!(loaded.n_days(), 5);
        assert_eq!(loaded.n_items(), 2);
        assert_eq!(loaded.n_stores(), 1);
        assert_eq!(loaded.counts, panel.counts);

        // a negative sales cell is a format error
        let text = std::fs::read_to_string(&sales).unwrap().replace(",3,", ",-1,");
        std::fs::write(&sales, text).unwrap();
        match load_panel(&sales, &calendar) {
            Err(Error::Format(msg)) => assert!(msg.contains("-1"), "{msg}"),
            other => panic!("expected FormatError, got {other:?}"),
        }

        // calendar without a weekday column is rejected
        let cal_text = std::fs::read_to_string(&calendar).unwrap().replace("weekday", "wd");
        std::fs::write(&calendar, cal_text).unwrap();
        assert!(matches!(load_panel(&sales, &calendar), Err(Error::Format(_))));
    }

    #[test]
    fn restrict_window_behaviour() {
        let panel = synth_panel(1913, 1, 1, |t, _, _| (t % 3) as u32);
        let restricted = restrict_window(&panel, 730).unwrap();
        assert_eq!(restricted.n_days(), 730 + FEATURE_HISTORY + 1);
        assert_eq!(restricted.n_days() - FEATURE_HISTORY - 1, 730); // usable h=1 targets
        assert_eq!(restricted.dates.last(), panel.dates.last());

        let short = synth_panel(100, 1, 1, |_, _, _| 1);
        assert_eq!(restrict_window(&short, 100).unwrap().n_days(), 100);
        assert!(matches!(restrict_window(&short, 200), Err(Error::Range(_))));
    }

    #[test]
    fn design_column_accounting() {
        let panel = synth_panel(FEATURE_HISTORY + 10, 28, 10, |t, i, j| ((t + i + j) % 4) as u32);
        let items: Vec<usize> = (0..28).collect();
        let design = build_training_set(&panel, &items, 1).unwrap();
        assert_eq!(design.n_cols(), 28 + 51);
        assert!(!design.penalized[0]);
        assert!(design.penalized[1..].iter().all(|&p| p));

        let small: Vec<usize> = vec![0, 5, 9];
        let design = build_training_set(&panel, &small, 1).unwrap();
        assert_eq!(design.n_cols(), 3 + 51);

        assert!(matches!(build_training_set(&panel, &[], 1), Err(Error::EmptyCluster)));
    }

    #[test]
    fn design_row_count_and_keys() {
        let n_days = FEATURE_HISTORY + 8;
        let panel = synth_panel(n_days, 4, 3, |t, i, j| ((t * 7 + i * 3 + j) % 5) as u32);
        let items: Vec<usize> = (0..4).collect();
        let design = build_training_set(&panel, &items, 1).unwrap();
        let usable = n_days - FEATURE_HISTORY - 1;
        assert_eq!(design.n_rows(), usable * 4 * 3);
        assert_eq!(design.rows[0].target_day, FEATURE_HISTORY + 1);
        for (r, key) in design.rows.iter().enumerate() {
            assert_eq!(design.target[r], panel.counts[[key.target_day, key.item, key.store]]);
        }
    }

    #[test]
    fn weekday_dummies_one_hot() {
        let panel = synth_panel(FEATURE_HISTORY + 15, 2, 2, |t, _, _| (t % 2) as u32);
        let items = vec![0, 1];
        let design = build_training_set(&panel, &items, 1).unwrap();
        let group = design.column_groups["weekday"].clone();
        for (r, key) in design.rows.iter().enumerate() {
            let feature_day = key.target_day - 1;
            let wd = panel.weekday(feature_day);
            let dummies: Vec<f64> = group.clone().map(|c| design.x[[r, c]]).collect();
            let expect_hot = DUMMY_WEEKDAYS.iter().any(|(d, _)| *d == wd);
            let ones = dummies.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, usize::from(expect_hot));
            if wd == Weekday::Mon {
                let mon = design.col_index("dow_Mon").unwrap();
                assert_eq!(design.x[[r, mon]], 1.0);
            }
        }
    }

    #[test]
    fn features_match_direct_summation() {
        let panel = synth_panel(FEATURE_HISTORY + 6, 3, 2, |t, i, j| ((t * 13 + i * 5 + j * 2) % 6) as u32);
        let items = vec![0, 1, 2];
        let design = build_training_set(&panel, &items, 1).unwrap();
        let agg = aggregate_series(&panel, &items).unwrap();
        for (r, key) in design.rows.iter().enumerate() {
            let t = key.target_day - 1;
            let pos = items.iter().position(|&i| i == key.item).unwrap();
            let is: Vec<f64> = (0..panel.n_days()).map(|d| agg.item_store[[d, pos, key.store]]).collect();
            let overall: Vec<f64> = agg.overall_avg.to_vec();
            assert_relative_eq!(
                design.x[[r, design.col_index("lag_is_1").unwrap()]],
                is[t - 1],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                design.x[[r, design.col_index("lag_is_363").unwrap()]],
                is[t - 363],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                design.x[[r, design.col_index("rm_overall_13").unwrap()]],
                rolling_mean(&overall, 0, 13, t).unwrap(),
                epsilon = 1e-12
            );
            assert_relative_eq!(
                design.x[[r, design.col_index("ly_is").unwrap()]],
                rolling_mean(&is, 0, 6, t - LAST_YEAR_LAG).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn appending_a_day_leaves_existing_rows_unchanged() {
        let base = synth_panel(FEATURE_HISTORY + 7, 2, 2, |t, i, j| ((t * 11 + i + j) % 4) as u32);
        let extended = synth_panel(FEATURE_HISTORY + 8, 2, 2, |t, i, j| {
            if t < FEATURE_HISTORY + 7 { ((t * 11 + i + j) % 4) as u32 } else { 99 }
        });
        let items = vec![0, 1];
        let d1 = build_training_set(&base, &items, 1).unwrap();
        let d2 = build_training_set(&extended, &items, 1).unwrap();
        for (r1, key) in d1.rows.iter().enumerate() {
            let r2 = d2.rows.iter().position(|k| k == key).unwrap();
            for c in 0..d1.n_cols() {
                assert_eq!(d1.x[[r1, c]], d2.x[[r2, c]], "col {}", d1.column_names[c]);
            }
        }
    }

    #[test]
    fn aggregate_series_consistency() {
        let panel = synth_panel(20, 5, 3, |t, i, j| ((t + 2 * i + 3 * j) % 7) as u32);
        let items = vec![1, 3, 4];
        let agg = aggregate_series(&panel, &items).unwrap();
        for t in 0..20 {
            let from_stores = (0..3).map(|s| agg.store_avg[[t, s]]).sum::<f64>() / 3.0;
            let from_items = (0..3).map(|p| agg.item_avg[[t, p]]).sum::<f64>() / 3.0;
            assert_relative_eq!(agg.overall_avg[t], from_stores, epsilon = 1e-10);
            assert_relative_eq!(agg.overall_avg[t], from_items, epsilon = 1e-10);
        }
    }
}
