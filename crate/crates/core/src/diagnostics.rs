//! Exploratory dispersion diagnostics: per-series index of dispersion and
//! observed-vs-fitted zero fractions under unconditional Poisson and
//! negative-binomial maximum-likelihood fits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{Family, ParamVector};
use crate::error::{Error, Result};
use crate::features::SalesPanel;

const SIGMA_LOG_LO: f64 = -13.815510557964274; // ln 1e-6
const SIGMA_LOG_HI: f64 = 6.907755278982137; // ln 1e3
const GOLDEN_TOL: f64 = 1e-10;

/// Per-series dispersion summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersionRecord {
    pub item_id: String,
    pub store_id: String,
    pub mean: f64,
    /// sample variance, n-1 denominator
    pub variance: f64,
    /// variance/mean; None for an all-zero series where the ratio is
    /// undefined
    pub iod: Option<f64>,
    pub zero_prop: f64,
    pub n: usize,
}

/// Per-series zero-fraction comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroFitRecord {
    pub item_id: String,
    pub store_id: String,
    pub f0_observed: f64,
    pub f0_poisson: f64,
    pub f0_negbin: f64,
    pub mle_mu: f64,
    pub mle_sigma: f64,
}

/// Unconditional maximum-likelihood fit of a single series.
#[derive(Debug, Clone)]
pub struct MlFit {
    pub params: ParamVector,
    /// set when the scale is unidentifiable (all-zero series under NB)
    pub degenerate: bool,
}

fn mean_var(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn zero_prop(series: &[f64]) -> f64 {
    series.iter().filter(|&&v| v == 0.0).count() as f64 / series.len() as f64
}

/// One dispersion record per (item, store) series; all-zero series are
/// kept with the ratio flagged undefined.
pub fn iod_table(panel: &SalesPanel) -> Result<Vec<DispersionRecord>> {
    if panel.n_days() < 2 {
        return Err(Error::Range("dispersion needs series of length >= 2".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..panel.n_items())
        .flat_map(|i| (0..panel.n_stores()).map(move |j| (i, j)))
        .collect();
    Ok(pairs
        .par_iter()
        .map(|&(i, j)| {
            let series = panel.series(i, j);
            let (mean, variance) = mean_var(&series);
            DispersionRecord {
                item_id: panel.item_ids[i].clone(),
                store_id: panel.store_ids[j].clone(),
                mean,
                variance,
                iod: if mean > 0.0 { Some(variance / mean) } else { None },
                zero_prop: zero_prop(&series),
                n: series.len(),
            }
        })
        .collect())
}

fn golden_section_max(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > GOLDEN_TOL {
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Unconditional MLE of one series. Poisson: mean. Negative binomial:
/// mean-matched location with the scale from a golden-section search of
/// the profile likelihood over log sigma.
pub fn ml_fit_unconditional(family: Family, series: &[f64]) -> Result<MlFit> {
    if series.is_empty() {
        return Err(Error::Range("cannot fit an empty series".into()));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let mu = mean.max(1e-10);
    match family {
        Family::Poisson => Ok(MlFit {
            params: ParamVector::new(Family::Poisson, &[mu])?,
            degenerate: mean == 0.0,
        }),
        Family::NegBinomial => {
            if mean == 0.0 {
                // sigma unidentifiable; report the Poisson-degenerate corner
                return Ok(MlFit {
                    params: ParamVector::new(Family::NegBinomial, &[mu, 1e-6])?,
                    degenerate: true,
                });
            }
            let counts: Vec<u64> = series.iter().map(|&v| v as u64).collect();
            let profile = |log_sigma: f64| -> f64 {
                let theta =
                    ParamVector::new(Family::NegBinomial, &[mu, log_sigma.exp()]).unwrap();
                counts.iter().map(|&y| theta.log_pmf(y)).sum()
            };
            let log_sigma = golden_section_max(SIGMA_LOG_LO, SIGMA_LOG_HI, profile);
            Ok(MlFit {
                params: ParamVector::new(Family::NegBinomial, &[mu, log_sigma.exp()])?,
                degenerate: false,
            })
        }
        other => Err(Error::Range(format!(
            "unconditional MLE only supports poisson and neg_binomial, got {}",
            other.name()
        ))),
    }
}

/// Observed zero fraction per series against fitted P(0) under the
/// Poisson and negative-binomial MLE fits.
pub fn zero_fit_table(panel: &SalesPanel) -> Result<Vec<ZeroFitRecord>> {
    if panel.n_days() < 2 {
        return Err(Error::Range("zero-fit table needs series of length >= 2".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..panel.n_items())
        .flat_map(|i| (0..panel.n_stores()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let series = panel.series(i, j);
            let pois = ml_fit_unconditional(Family::Poisson, &series)?;
            let nb = ml_fit_unconditional(Family::NegBinomial, &series)?;
            let mu = pois.params.mu();
            let sigma = nb.params.get(1);
            Ok(ZeroFitRecord {
                item_id: panel.item_ids[i].clone(),
                store_id: panel.store_ids[j].clone(),
                f0_observed: zero_prop(&series),
                f0_poisson: (-mu).exp(),
                f0_negbin: (1.0 + sigma * mu).powf(-1.0 / sigma),
                mle_mu: mu,
                mle_sigma: sigma,
            })
        })
        .collect()
}
