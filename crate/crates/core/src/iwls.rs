//! The fitting engine: cyclic backfitting over distribution parameters.
//!
//! Each distribution parameter gets its own linked linear predictor.
//! One cycle updates the parameters in order (location first): form the
//! IWLS working response z = η + u/w from the score and curvature of the
//! log-likelihood, solve a lasso-penalized weighted least-squares problem
//! by coordinate descent along a geometric λ-path with warm starts, and
//! pick λ by information criterion on the full model likelihood. Cycles
//! repeat until the relative deviance change falls under tolerance; an
//! update that would increase the deviance is step-halved and, as a last
//! resort, reverted, so the deviance path is non-increasing.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dist::{score_and_weight, Family, ParamVector};
use crate::error::{Error, Result};
use crate::features::DesignMatrix;

const MAX_CD_SWEEPS: usize = 10_000;
const MAX_STEP_HALVINGS: usize = 5;
const DEVIANCE_SLACK: f64 = 1e-8;
/// Cap on |u/w| when forming the working response; a step of 30 on a
/// log/logit scale already spans the whole useful parameter range.
const MAX_WORKING_STEP: f64 = 30.0;
/// Floor on the initializing mean so a zero-heavy target cannot send the
/// log link to -inf.
const INIT_MEAN_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfoCriterion {
    Aic,
    Bic,
    Hqc,
}

impl InfoCriterion {
    pub fn name(self) -> &'static str {
        match self {
            InfoCriterion::Aic => "aic",
            InfoCriterion::Bic => "bic",
            InfoCriterion::Hqc => "hqc",
        }
    }

    pub fn parse(s: &str) -> Result<InfoCriterion> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(InfoCriterion::Aic),
            "bic" => Ok(InfoCriterion::Bic),
            "hqc" => Ok(InfoCriterion::Hqc),
            _ => Err(Error::Format(format!("unknown information criterion '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub family: Family,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub outer_max_cycles: usize,
    /// relative deviance change below which the outer loop stops
    pub outer_tol: f64,
    /// coefficient max-change tolerance of the coordinate descent
    pub inner_tol: f64,
    pub weight_floor: f64,
    pub ic: InfoCriterion,
}

impl FitConfig {
    pub fn new(family: Family) -> FitConfig {
        FitConfig {
            family,
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            outer_max_cycles: 30,
            outer_tol: 1e-4,
            inner_tol: 1e-7,
            weight_floor: 1e-10,
            ic: InfoCriterion::Hqc,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_lambda < 2 {
            return Err(Error::Range("n_lambda must be at least 2".into()));
        }
        for (name, v) in [
            ("lambda_min_ratio", self.lambda_min_ratio),
            ("outer_tol", self.outer_tol),
            ("inner_tol", self.inner_tol),
            ("weight_floor", self.weight_floor),
        ] {
            if !(v > 0.0) {
                return Err(Error::Range(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcValues {
    pub aic: f64,
    pub bic: f64,
    pub hqc: f64,
}

impl IcValues {
    pub fn get(&self, c: InfoCriterion) -> f64 {
        match c {
            InfoCriterion::Aic => self.aic,
            InfoCriterion::Bic => self.bic,
            InfoCriterion::Hqc => self.hqc,
        }
    }
}

/// Per-observation normalized criteria: (-2ℓ + penalty·df) / n.
pub fn information_criteria(log_lik: f64, df: usize, n: usize) -> Result<IcValues> {
    if n < 8 {
        return Err(Error::Range(format!(
            "information criteria need n >= 8 so that ln(ln n) > 0, got {n}"
        )));
    }
    let nf = n as f64;
    let dff = df as f64;
    let dev = -2.0 * log_lik;
    Ok(IcValues {
        aic: (dev + 2.0 * dff) / nf,
        bic: (dev + dff * nf.ln()) / nf,
        hqc: (dev + 2.0 * dff * nf.ln().ln()) / nf,
    })
}

/// Fitted model for one (cluster, family) pair.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: Family,
    /// one coefficient vector per distribution parameter, aligned with
    /// `column_names`
    pub coefficients: Vec<Vec<f64>>,
    pub lambda_chosen: Vec<f64>,
    pub log_lik: f64,
    /// nonzero coefficients across all parameters, intercepts included
    pub df: usize,
    pub n_obs: usize,
    pub ic: IcValues,
    pub converged: bool,
    pub cycles_used: usize,
    pub column_names: Vec<String>,
    /// deviance after each completed cycle (non-increasing)
    pub deviance_path: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    lambda: f64,
    coefficients: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct FitRecord {
    family: String,
    parameters: Vec<ParamRecord>,
    log_lik: f64,
    df: usize,
    n_obs: usize,
    aic: f64,
    bic: f64,
    hqc: f64,
    converged: bool,
    cycles_used: usize,
}

impl FitResult {
    /// Nonzero coefficients of parameter `m`, keyed by column name.
    pub fn coefficient_map(&self, m: usize) -> BTreeMap<String, f64> {
        self.column_names
            .iter()
            .zip(&self.coefficients[m])
            .filter(|(_, &v)| v != 0.0)
            .map(|(n, &v)| (n.clone(), v))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = FitRecord {
            family: self.family.name().to_string(),
            parameters: (0..self.coefficients.len())
                .map(|m| ParamRecord {
                    lambda: self.lambda_chosen[m],
                    coefficients: self.coefficient_map(m),
                })
                .collect(),
            log_lik: self.log_lik,
            df: self.df,
            n_obs: self.n_obs,
            aic: self.ic.aic,
            bic: self.ic.bic,
            hqc: self.ic.hqc,
            converged: self.converged,
            cycles_used: self.cycles_used,
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<FitResult> {
        let rec: FitRecord = serde_json::from_str(s)?;
        let family = Family::parse(&rec.family)?;
        let mut names: Vec<String> = rec
            .parameters
            .iter()
            .flat_map(|p| p.coefficients.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        let coefficients = rec
            .parameters
            .iter()
            .map(|p| names.iter().map(|n| p.coefficients.get(n).copied().unwrap_or(0.0)).collect())
            .collect();
        Ok(FitResult {
            family,
            coefficients,
            lambda_chosen: rec.parameters.iter().map(|p| p.lambda).collect(),
            log_lik: rec.log_lik,
            df: rec.df,
            n_obs: rec.n_obs,
            ic: IcValues { aic: rec.aic, bic: rec.bic, hqc: rec.hqc },
            converged: rec.converged,
            cycles_used: rec.cycles_used,
            column_names: names,
            deviance_path: Vec::new(),
        })
    }
}

/// Pick the fit with minimal HQC; ties go to the earlier family in
/// canonical order.
pub fn select_best(fits: Vec<FitResult>) -> Result<FitResult> {
    fits.into_iter()
        .min_by(|a, b| {
            let fam_pos = |f: Family| Family::ALL.iter().position(|&g| g == f).unwrap();
            a.ic.hqc
                .partial_cmp(&b.ic.hqc)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| fam_pos(a.family).cmp(&fam_pos(b.family)))
        })
        .ok_or_else(|| Error::Range("select_best needs at least one fit".into()))
}

fn soft_threshold(a: f64, lambda: f64) -> f64 {
    if a > lambda {
        a - lambda
    } else if a < -lambda {
        a + lambda
    } else {
        0.0
    }
}

/// Weighted design standardized to weighted mean 0 / variance 1 per
/// column. Zero-variance columns are dropped from the descent; an
/// unpenalized constant column, when present, becomes the intercept that
/// absorbs the weighted mean of the response.
struct WlsSolver {
    /// standardized columns (None for zero weighted variance)
    cols: Vec<Option<Box<[f64]>>>,
    /// wn_t * xs_tj, for fast weighted dot products
    wcols: Vec<Option<Box<[f64]>>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    wn: Vec<f64>,
    intercept: Option<(usize, f64)>,
    n: usize,
}

impl WlsSolver {
    fn new(x: &Array2<f64>, w: &[f64], penalized: &[bool]) -> WlsSolver {
        let n = x.nrows();
        let p = x.ncols();
        let w_sum: f64 = w.iter().sum();
        let wn: Vec<f64> = w.iter().map(|v| v / w_sum).collect();
        let mut cols = Vec::with_capacity(p);
        let mut wcols = Vec::with_capacity(p);
        let mut mean = vec![0.0; p];
        let mut sd = vec![0.0; p];
        let mut intercept = None;
        for j in 0..p {
            let col = x.column(j);
            let mu: f64 = col.iter().zip(&wn).map(|(x, w)| x * w).sum();
            let var: f64 = col.iter().zip(&wn).map(|(x, w)| w * (x - mu) * (x - mu)).sum();
            mean[j] = mu;
            sd[j] = var.max(0.0).sqrt();
            // a column that is constant up to floating-point noise would
            // standardize into pure cancellation error, so the cutoff is
            // relative to the column's magnitude
            let scale = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if sd[j] > 1e-8 * scale.max(1.0) {
                let s: Box<[f64]> = col.iter().map(|x| (x - mu) / sd[j]).collect();
                let ws: Box<[f64]> = s.iter().zip(&wn).map(|(x, w)| x * w).collect();
                cols.push(Some(s));
                wcols.push(Some(ws));
            } else {
                cols.push(None);
                wcols.push(None);
                if intercept.is_none() && !penalized[j] && mu.abs() > 1e-12 {
                    intercept = Some((j, mu));
                }
            }
        }
        WlsSolver { cols, wcols, mean, sd, wn, intercept, n }
    }

    fn weighted_mean(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.wn).map(|(z, w)| z * w).sum()
    }

    /// Smallest λ at which every penalized coefficient is zero.
    fn lambda_max(&self, z: &[f64], penalized: &[bool]) -> Option<f64> {
        let zbar = self.weighted_mean(z);
        let mut best: Option<f64> = None;
        for j in 0..self.cols.len() {
            if !penalized[j] {
                continue;
            }
            if let Some(wcol) = &self.wcols[j] {
                let g: f64 = wcol.iter().zip(z).map(|(wx, z)| wx * (z - zbar)).sum();
                best = Some(best.map_or(g.abs(), |b: f64| b.max(g.abs())));
            }
        }
        best
    }

    /// Cyclic coordinate descent with an active-set inner loop.
    /// `beta_scaled` is the warm start on the standardized scale and holds
    /// the solution on return. Returns coefficients on the original scale.
    fn solve(
        &self,
        z: &[f64],
        lambda: f64,
        penalized: &[bool],
        beta_scaled: &mut [f64],
        tol: f64,
    ) -> Result<Vec<f64>> {
        let p = self.cols.len();
        let zbar = if self.intercept.is_some() { self.weighted_mean(z) } else { 0.0 };
        let mut resid: Vec<f64> = z.iter().map(|v| v - zbar).collect();
        for j in 0..p {
            if let Some(col) = &self.cols[j] {
                let b = beta_scaled[j];
                if b != 0.0 {
                    for (r, x) in resid.iter_mut().zip(col.iter()) {
                        *r -= b * x;
                    }
                }
            } else {
                beta_scaled[j] = 0.0;
            }
        }

        let update = |j: usize, beta: &mut [f64], resid: &mut [f64]| -> f64 {
            let (Some(col), Some(wcol)) = (&self.cols[j], &self.wcols[j]) else {
                return 0.0;
            };
            let dot: f64 = wcol.iter().zip(resid.iter()).map(|(wx, r)| wx * r).sum();
            let a = beta[j] + dot;
            let new = if penalized[j] { soft_threshold(a, lambda) } else { a };
            let delta = new - beta[j];
            if delta != 0.0 {
                beta[j] = new;
                for (r, x) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * x;
                }
            }
            delta.abs()
        };

        let mut sweeps = 0;
        loop {
            // full sweep
            sweeps += 1;
            let mut max_delta = 0.0f64;
            for j in 0..p {
                max_delta = max_delta.max(update(j, beta_scaled, &mut resid));
            }
            if max_delta < tol {
                break;
            }
            // iterate the active set until stable
            let active: Vec<usize> = (0..p).filter(|&j| beta_scaled[j] != 0.0).collect();
            loop {
                sweeps += 1;
                if sweeps > MAX_CD_SWEEPS {
                    return Err(Error::LassoNoConvergence {
                        sweeps,
                        best: self.rescale(beta_scaled, zbar),
                    });
                }
                let mut d = 0.0f64;
                for &j in &active {
                    d = d.max(update(j, beta_scaled, &mut resid));
                }
                if d < tol {
                    break;
                }
            }
            if sweeps > MAX_CD_SWEEPS {
                return Err(Error::LassoNoConvergence {
                    sweeps,
                    best: self.rescale(beta_scaled, zbar),
                });
            }
        }
        Ok(self.rescale(beta_scaled, zbar))
    }

    /// Back-transform to the original column scale and solve the
    /// intercept from the weighted means.
    fn rescale(&self, beta_scaled: &[f64], zbar: f64) -> Vec<f64> {
        let p = self.cols.len();
        let mut beta = vec![0.0; p];
        let mut mean_shift = 0.0;
        for j in 0..p {
            if self.cols[j].is_some() && beta_scaled[j] != 0.0 {
                beta[j] = beta_scaled[j] / self.sd[j];
                mean_shift += beta[j] * self.mean[j];
            }
        }
        if let Some((j0, c0)) = self.intercept {
            beta[j0] = (zbar - mean_shift) / c0;
        }
        beta
    }

    fn predict(&self, beta: &[f64], x: &Array2<f64>) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (e, v) in eta.iter_mut().zip(x.column(j)) {
                    *e += b * v;
                }
            }
        }
        eta
    }
}

/// Geometric λ-path from λ_max (all penalized coefficients zero) down to
/// λ_max·ratio.
pub fn lambda_grid(
    x: &Array2<f64>,
    z: &[f64],
    w: &[f64],
    penalized: &[bool],
    n_lambda: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    let solver = WlsSolver::new(x, w, penalized);
    lambda_grid_for(&solver, z, penalized, n_lambda, ratio)
}

fn lambda_grid_for(
    solver: &WlsSolver,
    z: &[f64],
    penalized: &[bool],
    n_lambda: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    let Some(lmax) = solver.lambda_max(z, penalized) else {
        return Err(Error::Degenerate(
            "no penalized column with positive variance".into(),
        ));
    };
    // a response orthogonal to every column still deserves a valid path
    let lmax = if lmax > 0.0 { lmax } else { 1e-12 };
    let step = ratio.powf(1.0 / (n_lambda as f64 - 1.0));
    Ok((0..n_lambda).map(|k| lmax * step.powi(k as i32)).collect())
}

/// One lasso solve at a fixed λ (the λ-path inside `rs_backfit` reuses
/// the standardization across λ values; this entry point standardizes per
/// call).
pub fn weighted_lasso(
    x: &Array2<f64>,
    z: &[f64],
    w: &[f64],
    lambda: f64,
    penalized: &[bool],
    warm: Option<&[f64]>,
    tol: f64,
) -> Result<Vec<f64>> {
    let solver = WlsSolver::new(x, w, penalized);
    let p = x.ncols();
    let mut beta_scaled = vec![0.0; p];
    if let Some(warm) = warm {
        for j in 0..p {
            beta_scaled[j] = warm[j] * solver.sd[j];
        }
    }
    solver.solve(z, lambda, penalized, &mut beta_scaled, tol)
}

fn nnz(v: &[f64]) -> usize {
    v.iter().filter(|&&b| b != 0.0).count()
}

struct WorkingModel<'a> {
    family: Family,
    design: &'a DesignMatrix,
}

impl WorkingModel<'_> {
    fn params_at(&self, etas: &[Vec<f64>], t: usize) -> Result<ParamVector> {
        let links = self.family.links();
        let mu = links[0].invert(etas[0][t]);
        if self.family.n_params() == 1 {
            ParamVector::new(self.family, &[mu])
        } else {
            ParamVector::new(self.family, &[mu, links[1].invert(etas[1][t])])
        }
    }

    fn log_lik(&self, etas: &[Vec<f64>]) -> Result<f64> {
        let mut ll = 0.0;
        for t in 0..self.design.n_rows() {
            ll += self.params_at(etas, t)?.log_pmf(self.design.target[t] as u64);
        }
        if !ll.is_finite() {
            return Err(Error::Numerical("non-finite log-likelihood".into()));
        }
        Ok(ll)
    }
}

/// Cyclic IWLS backfit of all distribution parameters with per-parameter
/// λ selection by information criterion.
pub fn rs_backfit(design: &DesignMatrix, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let family = config.family;
    let n_params = family.n_params();
    let n = design.n_rows();
    let p = design.n_cols();
    if n == 0 {
        return Err(Error::Degenerate("empty design".into()));
    }
    let links = family.links();
    let model = WorkingModel { family, design };

    // initialize the location predictor from a smoothed target and the
    // scale predictor at the family default
    let ybar = design.target.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let hint = design.location_hint();
    let mut etas: Vec<Vec<f64>> = Vec::with_capacity(n_params);
    let eta0: Vec<f64> = (0..n)
        .map(|t| {
            let local = hint.as_ref().map_or(ybar, |h| 0.5 * h[t] + 0.5 * ybar);
            links[0].apply(local.max(INIT_MEAN_FLOOR)).expect("positive init mean")
        })
        .collect();
    etas.push(eta0);
    if n_params == 2 {
        let scale0 = links[1].apply(family.default_scale().unwrap()).expect("valid default scale");
        etas.push(vec![scale0; n]);
    }

    let mut coefs: Vec<Vec<f64>> = vec![vec![0.0; p]; n_params];
    // whether etas[m] currently equals X * coefs[m]; the initial
    // predictors are hint-based (location) or constant (scale), so they
    // generally live outside the column span until the first accepted step
    let mut in_span = vec![false; n_params];
    let intercept_col = (0..p).filter(|&j| !design.penalized[j]).find(|&j| {
        let v0 = design.x[[0, j]];
        v0 != 0.0 && (0..n).all(|t| design.x[[t, j]] == v0)
    });
    if let Some(j) = intercept_col {
        // constant predictors are exactly representable through the
        // intercept column; start the coefficients there so that reverted
        // steps stay consistent with the serialized model
        if n_params == 2 {
            coefs[1][j] = etas[1][0] / design.x[[0, j]];
            in_span[1] = true;
        }
        if design.location_hint().is_none() {
            coefs[0][j] = etas[0][0] / design.x[[0, j]];
            in_span[0] = true;
        }
    }
    let mut lambdas = vec![0.0; n_params];
    let mut dev = -2.0 * model.log_lik(&etas)?;
    let mut deviance_path = Vec::with_capacity(config.outer_max_cycles);
    let mut converged = false;
    let mut cycles_used = 0;

    for _cycle in 0..config.outer_max_cycles {
        cycles_used += 1;
        let cycle_start_dev = dev;
        for m in 0..n_params {
            // working response from score and curvature
            let mut w = vec![0.0; n];
            let mut z = vec![0.0; n];
            for t in 0..n {
                let theta = model.params_at(&etas, t)?;
                let (u, wt) = score_and_weight(
                    family,
                    m,
                    &theta,
                    etas[m][t],
                    design.target[t] as u64,
                    config.weight_floor,
                )
                .map_err(|e| {
                    Error::Numerical(format!("cycle {cycles_used} parameter {m} row {t}: {e}"))
                })?;
                w[t] = wt;
                z[t] = etas[m][t] + (u / wt).clamp(-MAX_WORKING_STEP, MAX_WORKING_STEP);
            }

            let solver = WlsSolver::new(&design.x, &w, &design.penalized);
            let grid = match lambda_grid_for(&solver, &z, &design.penalized, config.n_lambda, config.lambda_min_ratio) {
                Ok(g) => g,
                // no penalized columns at all: a single unpenalized solve
                Err(Error::Degenerate(_)) => vec![0.0],
                Err(e) => return Err(e),
            };
            let other_df: usize =
                (0..n_params).filter(|&m2| m2 != m).map(|m2| nnz(&coefs[m2])).sum();

            let mut beta_scaled = vec![0.0; p];
            let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
            for &lambda in &grid {
                // an exhausted descent still carries a feasible iterate;
                // the step-halving/revert guard below protects the
                // deviance path if it is a poor one
                let beta = match solver.solve(&z, lambda, &design.penalized, &mut beta_scaled, config.inner_tol) {
                    Ok(beta) => beta,
                    Err(Error::LassoNoConvergence { best, .. }) => best,
                    Err(e) => return Err(e),
                };
                let eta_cand = solver.predict(&beta, &design.x);
                let mut probe = etas.clone();
                probe[m] = eta_cand;
                let ll = model.log_lik(&probe)?;
                let ic = information_criteria(ll, nnz(&beta) + other_df, n)?.get(config.ic);
                if best.as_ref().map_or(true, |(b, ..)| ic < *b) {
                    best = Some((ic, lambda, beta, probe.swap_remove(m)));
                }
            }
            let (_, lambda, mut beta, eta_new) = best.expect("non-empty lambda grid");

            // accept with step-halving; revert if the deviance still rises.
            // eta is linear in beta, so halving the eta step and averaging
            // the coefficients stay consistent (when the previous eta was
            // itself in the column span)
            let eta_old = std::mem::replace(&mut etas[m], eta_new);
            let mut cand_in_span = true;
            let mut new_dev = -2.0 * model.log_lik(&etas)?;
            let mut halvings = 0;
            while new_dev > dev + DEVIANCE_SLACK * dev.abs().max(1.0)
                && halvings < MAX_STEP_HALVINGS
            {
                for t in 0..n {
                    etas[m][t] = 0.5 * (etas[m][t] + eta_old[t]);
                }
                if in_span[m] {
                    for j in 0..p {
                        beta[j] = 0.5 * (beta[j] + coefs[m][j]);
                    }
                } else {
                    cand_in_span = false;
                }
                new_dev = -2.0 * model.log_lik(&etas)?;
                halvings += 1;
            }
            if new_dev > dev + DEVIANCE_SLACK * dev.abs().max(1.0) {
                etas[m] = eta_old;
            } else {
                coefs[m] = beta;
                lambdas[m] = lambda;
                dev = new_dev;
                in_span[m] = cand_in_span;
            }
        }
        deviance_path.push(dev);
        let change = (cycle_start_dev - dev).abs() / cycle_start_dev.abs().max(1e-10);
        if change < config.outer_tol {
            converged = true;
            break;
        }
    }

    // if a parameter never accepted a representable step, its predictor
    // is still the out-of-span initializer; report the likelihood of the
    // model the coefficients actually encode
    if in_span.iter().any(|&s| !s) {
        for m in 0..n_params {
            if !in_span[m] {
                for t in 0..n {
                    etas[m][t] = (0..p).map(|j| coefs[m][j] * design.x[[t, j]]).sum();
                }
            }
        }
        dev = -2.0 * model.log_lik(&etas)?;
    }

    let log_lik = -dev / 2.0;
    let df = coefs.iter().map(|c| nnz(c)).sum();
    let ic = information_criteria(log_lik, df, n)?;
    Ok(FitResult {
        family,
        coefficients: coefs,
        lambda_chosen: lambdas,
        log_lik,
        df,
        n_obs: n,
        ic,
        converged,
        cycles_used,
        column_names: design.column_names.clone(),
        deviance_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Family;
    use crate::features::{build_training_set, SalesPanel};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// plain Gauss elimination with partial pivoting, the oracle for the
    /// unpenalized solves
    fn gauss_solve(a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        let mut a = a;
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            b.swap(k, piv);
            assert!(a[k][k].abs() > 1e-12, "singular oracle system");
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    fn wls_oracle(x: &Array2<f64>, z: &[f64], w: &[f64]) -> Vec<f64> {
        let p = x.ncols();
        let mut xtx = vec![vec![0.0; p]; p];
        let mut xtz = vec![0.0; p];
        for t in 0..x.nrows() {
            for j in 0..p {
                xtz[j] += w[t] * x[[t, j]] * z[t];
                for k in 0..p {
                    xtx[j][k] += w[t] * x[[t, j]] * x[[t, k]];
                }
            }
        }
        gauss_solve(xtx, xtz)
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
    ) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let mut x = Array2::zeros((n, p));
        for t in 0..n {
            x[[t, 0]] = 1.0;
            for j in 1..p {
                x[[t, j]] = rng.gen::<f64>() * 4.0 - 2.0;
            }
        }
        let z: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 + 0.05).collect();
        (x, z, w)
    }

    #[test]
    fn ic_normalization_example() {
        let ic = information_criteria(-100.0, 5, 100).unwrap();
        assert_abs_diff_eq!(ic.aic, 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(ic.bic, (200.0 + 5.0 * (100f64).ln()) / 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ic.hqc, 2.152718, epsilon = 1e-5);
        // saturated penalties order: AIC < HQC < BIC for n >= 16
        assert!(ic.aic < ic.hqc && ic.hqc < ic.bic);
        assert!(information_criteria(-1.0, 1, 7).is_err());
    }

    #[test]
    fn lambda_grid_geometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, z, w) = random_instance(&mut rng, 60, 5);
        let pen = vec![false, true, true, true, true];
        let grid = lambda_grid(&x, &z, &w, &pen, 100, 1e-4).unwrap();
        assert_eq!(grid.len(), 100);
        assert_abs_diff_eq!(grid[99] / grid[0], 1e-4, epsilon = 1e-12);
        let ratio = grid[1] / grid[0];
        for k in 1..100 {
            assert!(grid[k] < grid[k - 1]);
            assert_abs_diff_eq!(grid[k] / grid[k - 1], ratio, epsilon = 1e-12);
        }
        // at lambda_max every penalized coefficient is exactly zero
        let beta = weighted_lasso(&x, &z, &w, grid[0], &pen, None, 1e-9).unwrap();
        for j in 1..5 {
            assert_eq!(beta[j], 0.0);
        }
        // and the intercept carries the weighted mean of z
        let sw: f64 = w.iter().sum();
        let zbar: f64 = z.iter().zip(&w).map(|(z, w)| z * w).sum::<f64>() / sw;
        assert_abs_diff_eq!(beta[0], zbar, epsilon = 1e-10);
        // all-unpenalized design has no lambda_max
        assert!(lambda_grid(&x, &z, &w, &vec![false; 5], 100, 1e-4).is_err());
    }

    #[test]
    fn lasso_at_zero_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p = rng.gen_range(2..=8);
            let (x, z, w) = random_instance(&mut rng, 80, p);
            let mut pen = vec![true; p];
            pen[0] = false;
            let beta = weighted_lasso(&x, &z, &w, 0.0, &pen, None, 1e-10).unwrap();
            let oracle = wls_oracle(&x, &z, &w);
            for j in 0..p {
                assert_abs_diff_eq!(beta[j], oracle[j], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn lasso_orthonormal_soft_threshold() {
        // columns built orthonormal under the weighted inner product
        // (weighted mean 0, weighted variance 1, weighted cross-moment 0),
        // where the lasso solution is soft(x_j' W z / sum(w), lambda)
        let n = 6;
        let w = vec![1.0; n];
        let c1: Vec<f64> = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let c2: Vec<f64> = vec![1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        // orthogonalize c2 against c1 and renormalize
        let dot: f64 = c1.iter().zip(&c2).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let mut c2: Vec<f64> = c2.iter().zip(&c1).map(|(b, a)| b - dot * a).collect();
        let norm = (c2.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        for v in &mut c2 {
            *v /= norm;
        }
        let mut x = Array2::zeros((n, 3));
        for t in 0..n {
            x[[t, 0]] = 1.0;
            x[[t, 1]] = c1[t];
            x[[t, 2]] = c2[t];
        }
        let z = vec![3.0, -1.0, 2.0, 0.5, -2.0, 1.5];
        let pen = vec![false, true, true];
        let zbar = z.iter().sum::<f64>() / n as f64;
        let g1: f64 = c1.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let g2: f64 = c2.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for lambda in [0.0, 0.3, 0.8, 2.0] {
            let beta = weighted_lasso(&x, &z, &w, lambda, &pen, None, 1e-11).unwrap();
            assert_abs_diff_eq!(beta[1], soft_threshold(g1, lambda), epsilon = 1e-8);
            assert_abs_diff_eq!(beta[2], soft_threshold(g2, lambda), epsilon = 1e-8);
            let expect0 = zbar - beta[1] * 0.0 - beta[2] * 0.0;
            assert_abs_diff_eq!(beta[0], expect0, epsilon = 1e-8);
        }
    }

    #[test]
    fn lasso_column_scaling_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (mut x, z, w) = random_instance(&mut rng, 70, 6);
        let pen = vec![false, true, true, true, true, true];
        let beta = weighted_lasso(&x, &z, &w, 0.07, &pen, None, 1e-10).unwrap();
        for t in 0..70 {
            x[[t, 3]] *= 25.0;
        }
        let beta2 = weighted_lasso(&x, &z, &w, 0.07, &pen, None, 1e-10).unwrap();
        assert_abs_diff_eq!(beta2[3], beta[3] / 25.0, epsilon = 1e-7);
        for j in [0usize, 1, 2, 4, 5] {
            assert_abs_diff_eq!(beta2[j], beta[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn lasso_path_continuity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (x, z, w) = random_instance(&mut rng, 90, 6);
        let mut pen = vec![true; 6];
        pen[0] = false;
        let grid = lambda_grid(&x, &z, &w, &pen, 40, 1e-3).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for &l in &grid {
            let beta = weighted_lasso(&x, &z, &w, l, &pen, prev.as_deref(), 1e-9).unwrap();
            if let Some(p) = &prev {
                let jump: f64 =
                    beta.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(jump < 1.0, "coefficient jump {jump} along path");
            }
            prev = Some(beta);
        }
    }

    /// Design holding nothing but an unpenalized intercept column.
    fn intercept_design(target: Vec<u32>) -> DesignMatrix {
        let n = target.len();
        DesignMatrix {
            x: Array2::ones((n, 1)),
            target,
            rows: (0..n)
                .map(|t| crate::features::RowKey { target_day: t, item: 0, store: 0 })
                .collect(),
            column_names: vec!["intercept".into()],
            column_groups: std::collections::BTreeMap::new(),
            penalized: vec![false],
        }
    }

    #[test]
    fn poisson_intercept_only_recovers_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let target: Vec<u32> = (0..600)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < 0.25 { 0 } else if u < 0.7 { 2 } else { 5 }
            })
            .collect();
        let design = intercept_design(target);
        let ybar =
            design.target.iter().map(|&v| v as f64).sum::<f64>() / design.n_rows() as f64;
        let mut cfg = FitConfig::new(Family::Poisson);
        cfg.outer_tol = 1e-12;
        cfg.inner_tol = 1e-12;
        cfg.outer_max_cycles = 200;
        let fit = rs_backfit(&design, &cfg).unwrap();
        // the Poisson MLE of an intercept-only log link is log(ybar)
        let mu_hat = fit.coefficients[0][0].exp();
        assert_abs_diff_eq!(mu_hat, ybar, epsilon = 1e-8 * ybar);
        assert!(fit.converged);
        assert_eq!(fit.df, 1);
    }

    #[test]
    fn neg_binomial_intercept_only_moments() {
        // NB(mu=3, sigma=0.8) draws via Gamma-Poisson mixture
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = 1.0 / 0.8;
        let gamma = rand_distr::Gamma::new(shape, 0.8 * 3.0).unwrap();
        let target: Vec<u32> = (0..4000)
            .map(|_| {
                let lam: f64 = gamma.sample(&mut rng);
                let pois = rand_distr::Poisson::new(lam.max(1e-12)).unwrap();
                pois.sample(&mut rng) as u32
            })
            .collect();
        let design = intercept_design(target);
        let mut cfg = FitConfig::new(Family::NegBinomial);
        cfg.outer_tol = 1e-10;
        cfg.outer_max_cycles = 100;
        let fit = rs_backfit(&design, &cfg).unwrap();
        let mu_hat = fit.coefficients[0][0].exp();
        let sigma_hat = fit.coefficients[1][0].exp();
        assert!((mu_hat - 3.0).abs() / 3.0 < 0.1, "mu_hat {mu_hat}");
        assert!((sigma_hat - 0.8).abs() / 0.8 < 0.2, "sigma_hat {sigma_hat}");
        for pair in fit.deviance_path.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8 * pair[0].abs());
        }
    }

    #[test]
    fn poisson_regression_recovers_signal() {
        // counts driven by the previous day through a log link; the lag-1
        // column should survive selection and dominate
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_days = 371 + 900;
        let mut counts = Array3::zeros((n_days, 2, 1));
        let mut level = 2.0f64;
        for t in 0..n_days {
            for i in 0..2 {
                let mu = (0.3 + 0.4 * level).clamp(0.05, 60.0);
                let pois = rand_distr::Poisson::new(mu).unwrap();
                counts[[t, i, 0]] = pois.sample(&mut rng) as u32;
            }
            level = (counts[[t, 0, 0]] + counts[[t, 1, 0]]) as f64 / 2.0;
        }
        let start = NaiveDate::from_ymd_opt(2012, 1, 2).unwrap();
        let dates = (0..n_days).map(|t| start + chrono::Days::new(t as u64)).collect();
        let panel = SalesPanel::new(
            counts,
            dates,
            vec!["item_a".into(), "item_b".into()],
            vec!["store_a".into()],
        )
        .unwrap();
        let design = build_training_set(&panel, &[0, 1], 1).unwrap();
        let fit = rs_backfit(&design, &FitConfig::new(Family::Poisson)).unwrap();
        assert!(fit.df < design.n_cols() / 2, "df {} should be sparse", fit.df);
        // the saturated working signal sits in the short-window features
        let informative: f64 = design
            .column_names
            .iter()
            .zip(&fit.coefficients[0])
            .filter(|(n, _)| n.contains("lag_") && n.ends_with("_0") || n.contains("rm_"))
            .map(|(_, &b)| b.abs())
            .sum();
        assert!(informative > 0.05, "informative mass {informative}");
        for pair in fit.deviance_path.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8 * pair[0].abs());
        }
    }

    #[test]
    fn select_best_prefers_min_hqc_then_canonical_order() {
        let mk = |family: Family, hqc: f64| FitResult {
            family,
            coefficients: vec![vec![1.0]],
            lambda_chosen: vec![0.0],
            log_lik: -10.0,
            df: 1,
            n_obs: 100,
            ic: IcValues { aic: 0.0, bic: 0.0, hqc },
            converged: true,
            cycles_used: 3,
            column_names: vec!["intercept".into()],
            deviance_path: vec![],
        };
        let best = select_best(vec![
            mk(Family::Waring, 2.0),
            mk(Family::Poisson, 1.5),
            mk(Family::NegBinomial, 1.5),
        ])
        .unwrap();
        assert_eq!(best.family, Family::Poisson);
        assert!(select_best(vec![]).is_err());
    }

    #[test]
    fn fit_result_json_round_trip() {
        let fit = FitResult {
            family: Family::NegBinomial,
            coefficients: vec![vec![0.7, 0.0, -0.2], vec![0.1, 0.0, 0.0]],
            lambda_chosen: vec![0.03, 0.5],
            log_lik: -123.4,
            df: 3,
            n_obs: 500,
            ic: IcValues { aic: 0.5, bic: 0.6, hqc: 0.55 },
            converged: true,
            cycles_used: 7,
            column_names: vec!["intercept".into(), "lag_is_0".into(), "rm_is_6".into()],
            deviance_path: vec![250.0, 246.8],
        };
        let json = fit.to_json().unwrap();
        let back = FitResult::from_json(&json).unwrap();
        assert_eq!(back.family, Family::NegBinomial);
        assert_eq!(back.df, 3);
        assert_eq!(back.n_obs, 500);
        assert_abs_diff_eq!(back.ic.hqc, 0.55);
        assert_eq!(back.lambda_chosen, vec![0.03, 0.5]);
        let m0 = back.coefficient_map(0);
        assert_abs_diff_eq!(m0["intercept"], 0.7);
        assert_abs_diff_eq!(m0["rm_is_6"], -0.2);
        assert!(!m0.contains_key("lag_is_0"));
        let m1 = back.coefficient_map(1);
        assert_eq!(m1.len(), 1);
        assert_abs_diff_eq!(m1["intercept"], 0.1);
    }
}
