//! Pipeline orchestration: one flat config file, a content-addressed
//! workdir, and the diagnose → cluster → fit → forecast → evaluate
//! stages. Artifact filenames carry a hash of the effective configuration
//! so runs with different settings cannot silently mix outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::cluster_items;
use crate::diagnostics::{iod_table, zero_fit_table};
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::evaluate::{
    benchmark_forecast, evaluate_report, forecast_quantiles, hqc_summary, write_per_quantile_csv,
    write_report_csv, EvaluationReport, HqcSummary, QuantileForecast, QuantileGrid,
};
use crate::features::{
    build_design, load_panel, restrict_window, SalesPanel, FEATURE_HISTORY,
};
use crate::iwls::{rs_backfit, select_best, FitConfig, FitResult, InfoCriterion};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sales_csv: PathBuf,
    pub calendar_csv: PathBuf,
    pub workdir: PathBuf,
    pub window_days: usize,
    pub n_clusters: usize,
    pub families: Vec<Family>,
    pub horizon: usize,
    pub probs: Vec<f64>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub outer_max_cycles: usize,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub weight_floor: f64,
    pub ic: InfoCriterion,
    pub seed: u64,
    /// 0 means all available cores
    pub workers: usize,
    pub holdout_days: usize,
    /// run diagnostics on the full history instead of the training window
    pub diagnose_full_history: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let fc = FitConfig::new(Family::Poisson);
        PipelineConfig {
            sales_csv: PathBuf::from("sales.csv"),
            calendar_csv: PathBuf::from("calendar.csv"),
            workdir: PathBuf::from("workdir"),
            window_days: 730,
            n_clusters: 100,
            families: Family::ALL.to_vec(),
            horizon: 1,
            probs: QuantileGrid::m5().probs,
            n_lambda: fc.n_lambda,
            lambda_min_ratio: fc.lambda_min_ratio,
            outer_max_cycles: fc.outer_max_cycles,
            outer_tol: fc.outer_tol,
            inner_tol: fc.inner_tol,
            weight_floor: fc.weight_floor,
            ic: fc.ic,
            seed: 0,
            workers: 0,
            holdout_days: 28,
            diagnose_full_history: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format(format!("config key '{key}': cannot parse '{v}'")))
}

impl PipelineConfig {
    /// Flat `key = value` file; `#` starts a comment; unknown keys are
    /// rejected.
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sales_csv" => self.sales_csv = PathBuf::from(value),
            "calendar_csv" => self.calendar_csv = PathBuf::from(value),
            "workdir" => self.workdir = PathBuf::from(value),
            "window_days" => self.window_days = parse_num(key, value)?,
            "n_clusters" => self.n_clusters = parse_num(key, value)?,
            "families" => {
                self.families = value
                    .split(',')
                    .map(|f| Family::parse(f.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if self.families.is_empty() {
                    return Err(Error::Format("config key 'families': empty list".into()));
                }
            }
            "horizon" => self.horizon = parse_num(key, value)?,
            "probs" => {
                let probs = value
                    .split(',')
                    .map(|p| parse_num::<f64>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.probs = QuantileGrid::new(probs)?.probs;
            }
            "n_lambda" => self.n_lambda = parse_num(key, value)?,
            "lambda_min_ratio" => self.lambda_min_ratio = parse_num(key, value)?,
            "outer_max_cycles" => self.outer_max_cycles = parse_num(key, value)?,
            "outer_tol" => self.outer_tol = parse_num(key, value)?,
            "inner_tol" => self.inner_tol = parse_num(key, value)?,
            "weight_floor" => self.weight_floor = parse_num(key, value)?,
            "ic" => self.ic = InfoCriterion::parse(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "holdout_days" => self.holdout_days = parse_num(key, value)?,
            "diagnose_full_history" => {
                self.diagnose_full_history = parse_num(key, value)?;
            }
            other => return Err(Error::Format(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn fit_config(&self, family: Family) -> FitConfig {
        FitConfig {
            family,
            n_lambda: self.n_lambda,
            lambda_min_ratio: self.lambda_min_ratio,
            outer_max_cycles: self.outer_max_cycles,
            outer_tol: self.outer_tol,
            inner_tol: self.inner_tol,
            weight_floor: self.weight_floor,
            ic: self.ic,
        }
    }

    pub fn grid(&self) -> QuantileGrid {
        QuantileGrid { probs: self.probs.clone() }
    }

    fn data_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sales_csv={}", self.sales_csv.display());
        let _ = writeln!(s, "calendar_csv={}", self.calendar_csv.display());
        let _ = writeln!(s, "window_days={}", self.window_days);
        s
    }

    fn cluster_lines(&self) -> String {
        let mut s = self.data_lines();
        let _ = writeln!(s, "n_clusters={}", self.n_clusters);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    fn fit_lines(&self) -> String {
        let mut s = self.cluster_lines();
        let _ = writeln!(s, "horizon={}", self.horizon);
        let _ = writeln!(s, "holdout_days={}", self.holdout_days);
        let _ = writeln!(s, "n_lambda={}", self.n_lambda);
        let _ = writeln!(s, "lambda_min_ratio={}", self.lambda_min_ratio);
        let _ = writeln!(s, "outer_max_cycles={}", self.outer_max_cycles);
        let _ = writeln!(s, "outer_tol={}", self.outer_tol);
        let _ = writeln!(s, "inner_tol={}", self.inner_tol);
        let _ = writeln!(s, "weight_floor={}", self.weight_floor);
        let _ = writeln!(s, "ic={}", self.ic.name());
        s
    }

    fn report_lines(&self) -> String {
        let mut s = self.fit_lines();
        let fams: Vec<&str> = self.families.iter().map(|f| f.name()).collect();
        let _ = writeln!(s, "families={}", fams.join(","));
        let probs: Vec<String> = self.probs.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(s, "probs={}", probs.join(","));
        s
    }

    fn short_hash(lines: &str) -> String {
        let digest = Sha256::digest(lines.as_bytes());
        let mut out = String::with_capacity(12);
        for b in &digest[..6] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Hash over every setting that affects report artifacts. Worker
    /// count and workdir are deliberately excluded: parallelism must not
    /// change any output. Upstream stages use hashes over only the
    /// settings they consume, so e.g. a family-list override reuses the
    /// existing cluster assignment.
    pub fn hash(&self) -> String {
        Self::short_hash(&self.report_lines())
    }

    fn diag_hash(&self) -> String {
        let mut s = self.data_lines();
        let _ = writeln!(s, "diagnose_full_history={}", self.diagnose_full_history);
        Self::short_hash(&s)
    }

    fn cluster_hash(&self) -> String {
        Self::short_hash(&self.cluster_lines())
    }

    fn fit_hash(&self) -> String {
        Self::short_hash(&self.fit_lines())
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.workdir.join(name);
        fs::create_dir_all(&dir)
            .map_err(|e| Error::Format(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn iod_path(&self) -> PathBuf {
        self.workdir.join("diagnostics").join(format!("{}_iod.csv", self.diag_hash()))
    }

    pub fn zerofit_path(&self) -> PathBuf {
        self.workdir.join("diagnostics").join(format!("{}_zerofit.csv", self.diag_hash()))
    }

    pub fn clusters_path(&self) -> PathBuf {
        self.workdir.join("clusters").join(format!("{}_clusters.csv", self.cluster_hash()))
    }

    pub fn fit_path(&self, cluster: usize, family: Family) -> PathBuf {
        self.workdir
            .join("fits")
            .join(format!("{}_c{:04}_{}.json", self.fit_hash(), cluster, family.name()))
    }

    pub fn fit_log_path(&self) -> PathBuf {
        self.workdir.join("fits").join(format!("{}_fit_log.jsonl", self.fit_hash()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.workdir.join("reports").join(format!("{}_report.csv", self.hash()))
    }

    pub fn per_quantile_path(&self) -> PathBuf {
        self.workdir.join("reports").join(format!("{}_per_quantile.csv", self.hash()))
    }

    pub fn forecast_path(&self) -> PathBuf {
        self.workdir.join("reports").join(format!("{}_forecasts.csv", self.hash()))
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder.build().map_err(|e| Error::Numerical(format!("thread pool: {e}")))
}

fn load_window(cfg: &PipelineConfig) -> Result<SalesPanel> {
    let panel = load_panel(&cfg.sales_csv, &cfg.calendar_csv)?;
    restrict_window(&panel, cfg.window_days.min(
        panel.n_days().saturating_sub(FEATURE_HISTORY + 1),
    ))
}

/// Leading `n_days` of a panel (training split before the holdout).
fn truncate_panel(panel: &SalesPanel, n_days: usize) -> Result<SalesPanel> {
    if n_days == 0 || n_days > panel.n_days() {
        return Err(Error::Range(format!(
            "cannot truncate a {}-day panel to {n_days} days",
            panel.n_days()
        )));
    }
    SalesPanel::new(
        panel.counts.slice(s![..n_days, .., ..]).to_owned(),
        panel.dates[..n_days].to_vec(),
        panel.item_ids.clone(),
        panel.store_ids.clone(),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseSummary {
    pub iod_csv: PathBuf,
    pub zerofit_csv: PathBuf,
    pub n_series: usize,
    /// share of series with a defined IOD strictly above 1
    pub share_overdispersed: f64,
}

pub fn run_diagnose(cfg: &PipelineConfig) -> Result<DiagnoseSummary> {
    let panel = if cfg.diagnose_full_history {
        load_panel(&cfg.sales_csv, &cfg.calendar_csv)?
    } else {
        load_window(cfg)?
    };
    cfg.subdir("diagnostics")?;
    let pool = thread_pool(cfg.workers)?;
    let (iod, zerofit) =
        pool.install(|| -> Result<_> { Ok((iod_table(&panel)?, zero_fit_table(&panel)?)) })?;

    let mut w = csv::Writer::from_path(cfg.iod_path())?;
    w.write_record(["item", "store", "mean", "variance", "iod", "zero_prop", "n"])?;
    for r in &iod {
        w.write_record([
            r.item_id.as_str(),
            r.store_id.as_str(),
            &format!("{:.6}", r.mean),
            &format!("{:.6}", r.variance),
            &r.iod.map_or(String::from("NA"), |v| format!("{v:.6}")),
            &format!("{:.6}", r.zero_prop),
            &r.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Format(format!("flush iod.csv: {e}")))?;

    let mut w = csv::Writer::from_path(cfg.zerofit_path())?;
    w.write_record(["item", "store", "f0_observed", "f0_poisson", "f0_negbin", "mu", "sigma"])?;
    for r in &zerofit {
        w.write_record([
            r.item_id.as_str(),
            r.store_id.as_str(),
            &format!("{:.6}", r.f0_observed),
            &format!("{:.6}", r.f0_poisson),
            &format!("{:.6}", r.f0_negbin),
            &format!("{:.6}", r.mle_mu),
            &format!("{:.6}", r.mle_sigma),
        ])?;
    }
    w.flush().map_err(|e| Error::Format(format!("flush zerofit.csv: {e}")))?;

    let over = iod.iter().filter(|r| r.iod.is_some_and(|v| v > 1.0)).count();
    Ok(DiagnoseSummary {
        iod_csv: cfg.iod_path(),
        zerofit_csv: cfg.zerofit_path(),
        n_series: iod.len(),
        share_overdispersed: over as f64 / iod.len() as f64,
    })
}

pub fn run_cluster(cfg: &PipelineConfig) -> Result<PathBuf> {
    let panel = load_window(cfg)?;
    let (features, assignment) = cluster_items(&panel, cfg.n_clusters, cfg.seed)?;
    cfg.subdir("clusters")?;
    let mut w = csv::Writer::from_path(cfg.clusters_path())?;
    let mut header = vec!["item".to_string(), "cluster".to_string()];
    header.extend(crate::clustering::ItemFeatureVector::NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (i, &label) in assignment.labels.iter().enumerate() {
        let mut rec = vec![panel.item_ids[i].clone(), label.to_string()];
        rec.extend((0..features.ncols()).map(|c| format!("{:.6}", features[[i, c]])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Format(format!("flush clusters.csv: {e}")))?;
    Ok(cfg.clusters_path())
}

/// item index (panel order) -> cluster label, read back from clusters.csv.
pub fn read_clusters(cfg: &PipelineConfig, panel: &SalesPanel) -> Result<Vec<Vec<usize>>> {
    let path = cfg.clusters_path();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut max_label = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let label: usize = rec[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad cluster label '{}' in clusters.csv", &rec[1])))?;
        max_label = max_label.max(label);
        by_id.insert(rec[0].to_string(), label);
    }
    let mut members = vec![Vec::new(); max_label + 1];
    for (i, id) in panel.item_ids.iter().enumerate() {
        let label = *by_id
            .get(id)
            .ok_or_else(|| Error::MissingArtifact(format!("item '{id}' missing from clusters.csv")))?;
        members[label].push(i);
    }
    Ok(members)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitLogRecord {
    pub cluster: usize,
    pub family: String,
    pub ok: bool,
    pub cycles: usize,
    pub lambda: Vec<f64>,
    pub hqc: f64,
    pub df: usize,
    pub seconds: f64,
    pub error: Option<String>,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub n_ok: usize,
    pub n_failed: usize,
    pub n_skipped: usize,
    pub log: Vec<FitLogRecord>,
}

pub fn run_fit(cfg: &PipelineConfig, resume: bool) -> Result<FitSummary> {
    let panel = load_window(cfg)?;
    let members = read_clusters(cfg, &panel)?;
    let train = truncate_panel(&panel, panel.n_days() - cfg.holdout_days)?;
    cfg.subdir("fits")?;

    let jobs: Vec<(usize, Family)> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .flat_map(|(g, _)| cfg.families.iter().map(move |&f| (g, f)))
        .collect();

    let pool = thread_pool(cfg.workers)?;
    let records: Vec<FitLogRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, family)| {
                let path = cfg.fit_path(g, family);
                if resume && path.exists() {
                    return FitLogRecord {
                        cluster: g,
                        family: family.name().into(),
                        ok: true,
                        cycles: 0,
                        lambda: vec![],
                        hqc: f64::NAN,
                        df: 0,
                        seconds: 0.0,
                        error: None,
                        skipped: true,
                    };
                }
                let started = Instant::now();
                let result = build_design(&train, &members[g], cfg.horizon, FEATURE_HISTORY + cfg.horizon..train.n_days())
                    .and_then(|design| rs_backfit(&design, &cfg.fit_config(family)))
                    .and_then(|fit| {
                        fs::write(&path, fit.to_json()?).map_err(|e| {
                            Error::Format(format!("write {}: {e}", path.display()))
                        })?;
                        Ok(fit)
                    });
                let seconds = started.elapsed().as_secs_f64();
                match result {
                    Ok(fit) => FitLogRecord {
                        cluster: g,
                        family: family.name().into(),
                        ok: true,
                        cycles: fit.cycles_used,
                        lambda: fit.lambda_chosen.clone(),
                        hqc: fit.ic.hqc,
                        df: fit.df,
                        seconds,
                        error: None,
                        skipped: false,
                    },
                    Err(e) => FitLogRecord {
                        cluster: g,
                        family: family.name().into(),
                        ok: false,
                        cycles: 0,
                        lambda: vec![],
                        hqc: f64::NAN,
                        df: 0,
                        seconds,
                        error: Some(e.to_string()),
                        skipped: false,
                    },
                }
            })
            .collect()
    });

    // log in deterministic job order, independent of scheduling
    let mut log_file = fs::File::create(cfg.fit_log_path())
        .map_err(|e| Error::Format(format!("create fit log: {e}")))?;
    for rec in &records {
        let line = serde_json::to_string(rec)?;
        writeln!(log_file, "{line}").map_err(|e| Error::Format(format!("write fit log: {e}")))?;
        if rec.skipped {
            eprintln!("fit cluster={} family={} skipped (resume)", rec.cluster, rec.family);
        } else if rec.ok {
            eprintln!(
                "fit cluster={} family={} cycles={} lambda={:?} hqc={:.6} {:.2}s",
                rec.cluster, rec.family, rec.cycles, rec.lambda, rec.hqc, rec.seconds
            );
        } else {
            eprintln!(
                "fit cluster={} family={} FAILED after {:.2}s: {}",
                rec.cluster,
                rec.family,
                rec.seconds,
                rec.error.as_deref().unwrap_or("unknown")
            );
        }
    }
    Ok(FitSummary {
        n_ok: records.iter().filter(|r| r.ok && !r.skipped).count(),
        n_failed: records.iter().filter(|r| !r.ok).count(),
        n_skipped: records.iter().filter(|r| r.skipped).count(),
        log: records,
    })
}

fn load_fit(cfg: &PipelineConfig, cluster: usize, family: Family) -> Result<FitResult> {
    let path = cfg.fit_path(cluster, family);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    FitResult::from_json(&text)
}

/// Forecasts for every holdout target day from each family's fit, the
/// HQC-selected composite, and the empirical benchmark, plus the fit
/// metadata the report needs.
fn holdout_forecasts(
    cfg: &PipelineConfig,
    panel: &SalesPanel,
    members: &[Vec<usize>],
) -> Result<(Vec<QuantileForecast>, Vec<(usize, Vec<FitResult>)>)> {
    let grid = cfg.grid();
    let first_target = panel.n_days() - cfg.holdout_days;
    if first_target < FEATURE_HISTORY + cfg.horizon {
        return Err(Error::Range(format!(
            "holdout of {} days leaves no feasible target day",
            cfg.holdout_days
        )));
    }
    let pool = thread_pool(cfg.workers)?;
    let per_cluster: Vec<(Vec<QuantileForecast>, (usize, Vec<FitResult>))> = pool.install(|| {
        members
            .par_iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(g, items)| -> Result<_> {
                let fits: Vec<FitResult> = cfg
                    .families
                    .iter()
                    .map(|&f| load_fit(cfg, g, f))
                    .collect::<Result<_>>()?;
                let design =
                    build_design(panel, items, cfg.horizon, first_target..panel.n_days())?;
                let best = select_best(fits.clone())?;
                let mut out = Vec::new();
                for row in 0..design.n_rows() {
                    for fit in &fits {
                        out.push(forecast_quantiles(fit, &design, row, &grid)?);
                    }
                    let mut sel = forecast_quantiles(&best, &design, row, &grid)?;
                    sel.source = "hqc_sel".into();
                    out.push(sel);
                    let key = &design.rows[row];
                    out.push(benchmark_forecast(panel, &grid, key.target_day, key.item, key.store)?);
                }
                Ok((out, (items.len(), fits)))
            })
            .collect::<Result<_>>()
    })?;
    let mut forecasts = Vec::new();
    let mut cluster_fits = Vec::new();
    for (f, cf) in per_cluster {
        forecasts.extend(f);
        cluster_fits.push(cf);
    }
    Ok((forecasts, cluster_fits))
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvaluationReport,
    pub hqc: HqcSummary,
    pub report_csv: PathBuf,
    pub per_quantile_csv: PathBuf,
}

pub fn run_evaluate(cfg: &PipelineConfig) -> Result<EvalOutput> {
    let panel = load_window(cfg)?;
    let members = read_clusters(cfg, &panel)?;
    let (forecasts, cluster_fits) = holdout_forecasts(cfg, &panel, &members)?;
    let report = evaluate_report(&forecasts, &panel, &cfg.grid())?;
    let hqc = hqc_summary(&cluster_fits)?;
    cfg.subdir("reports")?;
    write_report_csv(&cfg.report_path(), &report, Some(&hqc))?;
    write_per_quantile_csv(&cfg.per_quantile_path(), &report)?;
    Ok(EvalOutput {
        report,
        hqc,
        report_csv: cfg.report_path(),
        per_quantile_csv: cfg.per_quantile_path(),
    })
}

/// Quantile CSV for the HQC-selected model over a range of target days
/// (indices into the restricted window).
pub fn run_forecast(cfg: &PipelineConfig, from_day: usize, to_day: usize) -> Result<PathBuf> {
    let panel = load_window(cfg)?;
    let members = read_clusters(cfg, &panel)?;
    let grid = cfg.grid();
    if from_day < FEATURE_HISTORY + cfg.horizon || to_day > panel.n_days() || from_day >= to_day {
        return Err(Error::Range(format!(
            "target day range {from_day}..{to_day} outside feasible {}..{}",
            FEATURE_HISTORY + cfg.horizon,
            panel.n_days()
        )));
    }
    let pool = thread_pool(cfg.workers)?;
    let per_cluster: Vec<Vec<QuantileForecast>> = pool.install(|| {
        members
            .par_iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(g, items)| -> Result<_> {
                let fits: Vec<FitResult> = cfg
                    .families
                    .iter()
                    .map(|&f| load_fit(cfg, g, f))
                    .collect::<Result<_>>()?;
                let best = select_best(fits)?;
                let design = build_design(&panel, items, cfg.horizon, from_day..to_day)?;
                (0..design.n_rows())
                    .map(|row| {
                        let mut f = forecast_quantiles(&best, &design, row, &grid)?;
                        f.source = format!("hqc_sel:{}", best.family.name());
                        Ok(f)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()
    })?;

    let mut all: Vec<QuantileForecast> = per_cluster.into_iter().flatten().collect();
    all.sort_by_key(|f| (f.key.target_day, f.key.item, f.key.store));
    cfg.subdir("reports")?;
    let mut w = csv::Writer::from_path(cfg.forecast_path())?;
    let mut header = vec!["date".to_string(), "item".to_string(), "store".to_string(), "source".to_string()];
    header.extend(grid.probs.iter().map(|p| format!("q{p}")));
    w.write_record(&header)?;
    for f in &all {
        let mut rec = vec![
            panel.dates[f.key.target_day].to_string(),
            panel.item_ids[f.key.item].clone(),
            panel.store_ids[f.key.store].clone(),
            f.source.clone(),
        ];
        rec.extend(f.q.iter().map(|q| q.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Format(format!("flush forecasts.csv: {e}")))?;
    Ok(cfg.forecast_path())
}
