//! Credible bands, goodness of fit and estimated coverage.

use alloc::{format, vec::Vec};

use crate::dataset::{FunctionGrid, MechanicalTest, StackedLayout};
use crate::diffnum::Tensor;
use crate::gp::{StackedPosterior, Z95};
use crate::{num, Error, Result};

/// Mean and 95% interval of one stress function on its grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Band {
    pub test: usize,
    pub q: usize,
    pub controls: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Linear interpolation of `ys` over increasing `xs`, clamped at the ends.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|v| *v <= x).clamp(1, n - 1);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let t = (x - x0) / (x1 - x0);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Gaussian bands mean ± 1.959964·std from GP posteriors.
pub fn bands_from_posterior(grid: &FunctionGrid, posterior: &StackedPosterior) -> Vec<Band> {
    grid.layout()
        .blocks()
        .iter()
        .zip(posterior.blocks())
        .map(|(b, p)| {
            let (lower, upper) = p.interval(Z95);
            Band {
                test: b.test,
                q: b.q,
                controls: grid.tests()[b.test].controls.clone(),
                mean: p.mean.iter().copied().collect(),
                lower,
                upper,
            }
        })
        .collect()
}

/// Sample-based bands: mean and 2.5/97.5 percentiles of stacked samples
/// given one sample per column (n_s × count).
pub fn bands_from_samples(grid: &FunctionGrid, samples: &Tensor) -> Result<Vec<Band>> {
    let layout: &StackedLayout = grid.layout();
    if samples.nrows() != layout.len() || samples.ncols() == 0 {
        return Err(Error::dim("sample matrix rows", layout.len(), samples.nrows()));
    }
    let count = samples.ncols() as f64;
    let mut bands = Vec::with_capacity(layout.blocks().len());
    let mut row = Vec::with_capacity(samples.ncols());
    for b in layout.blocks() {
        let mut band = Band {
            test: b.test,
            q: b.q,
            controls: grid.tests()[b.test].controls.clone(),
            mean: Vec::with_capacity(b.len),
            lower: Vec::with_capacity(b.len),
            upper: Vec::with_capacity(b.len),
        };
        for s in 0..b.len {
            row.clear();
            row.extend(samples.row(b.offset + s).iter().copied());
            band.mean.push(row.iter().sum::<f64>() / count);
            row.sort_by(f64::total_cmp);
            band.lower.push(percentile(&row, 0.025));
            band.upper.push(percentile(&row, 0.975));
        }
        bands.push(band);
    }
    Ok(bands)
}

/// Fit and coverage of one stress function.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FunctionMetrics {
    pub test_id: alloc::string::String,
    pub component: alloc::string::String,
    pub r2: f64,
    pub rmse: f64,
    pub ec: f64,
}

/// Pooled R², RMSE and total estimated coverage.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub r2: f64,
    pub rmse: f64,
    pub ec: f64,
    pub functions: Vec<FunctionMetrics>,
}

/// Coverage per function (in band order) and the total over tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub per_function: Vec<f64>,
    pub total: f64,
}

/// Rejects controls outside the band's grid.
fn check_span(b: &Band, x: f64) -> Result<()> {
    let (lo, hi) = match (b.controls.first(), b.controls.last()) {
        (Some(lo), Some(hi)) => (*lo, *hi),
        _ => return Err(Error::InvalidInput("empty band".into())),
    };
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    if x < lo - tol || x > hi + tol {
        return Err(Error::Domain(format!(
            "measurement control {x} lies outside the grid [{lo}, {hi}]; extrapolation is not allowed"
        )));
    }
    Ok(())
}

fn band_for<'a>(bands: &'a [Band], t: usize, q: usize) -> Result<&'a Band> {
    bands
        .iter()
        .find(|b| b.test == t && b.q == q)
        .ok_or_else(|| Error::InvalidInput(format!("no band for test {t}, component {q}")))
}

/// Fraction of measurements inside their interpolated pointwise interval;
/// the total is the mean over tests of the per-test mean.
pub fn estimated_coverage(bands: &[Band], tests: &[MechanicalTest]) -> Result<Coverage> {
    if tests.is_empty() {
        return Err(Error::InvalidInput("coverage of an empty dataset".into()));
    }
    let mut per_function = Vec::new();
    let mut per_test = Vec::with_capacity(tests.len());
    for (t, test) in tests.iter().enumerate() {
        let mut sum = 0.0;
        for q in 0..test.n_q() {
            let b = band_for(bands, t, q)?;
            for c in test.controls() {
                check_span(b, *c)?;
            }
            let inside = test
                .controls()
                .iter()
                .zip(test.stresses(q))
                .filter(|(c, p)| {
                    let lo = interpolate(&b.controls, &b.lower, **c);
                    let hi = interpolate(&b.controls, &b.upper, **c);
                    lo <= **p && **p <= hi
                })
                .count();
            let ec = inside as f64 / test.n_d() as f64;
            per_function.push(ec);
            sum += ec;
        }
        per_test.push(sum / test.n_q() as f64);
    }
    let total = per_test.iter().sum::<f64>() / per_test.len() as f64;
    Ok(Coverage { per_function, total })
}

/// R² and RMSE pooled over all measurements, plus coverage.
pub fn compute_metrics(bands: &[Band], tests: &[MechanicalTest]) -> Result<Metrics> {
    let coverage = estimated_coverage(bands, tests)?;
    let mut all = Vec::new();
    let mut functions = Vec::new();
    let mut k = 0;
    for (t, test) in tests.iter().enumerate() {
        for q in 0..test.n_q() {
            let b = band_for(bands, t, q)?;
            let pairs: Vec<(f64, f64)> = test
                .controls()
                .iter()
                .zip(test.stresses(q))
                .map(|(c, p)| (*p, interpolate(&b.controls, &b.mean, *c)))
                .collect();
            let (r2, rmse) = fit_stats(&pairs);
            functions.push(FunctionMetrics {
                test_id: test.id().into(),
                component: test.components()[q].name(),
                r2,
                rmse,
                ec: coverage.per_function[k],
            });
            k += 1;
            all.extend(pairs);
        }
    }
    let (r2, rmse) = fit_stats(&all);
    Ok(Metrics {
        r2,
        rmse,
        ec: coverage.total,
        functions,
    })
}

/// (R², RMSE) for (observed, predicted) pairs.
fn fit_stats(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ss_res: f64 = pairs.iter().map(|(o, m)| (o - m) * (o - m)).sum();
    let ss_tot: f64 = pairs.iter().map(|(o, _)| (o - mean) * (o - mean)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    (r2, num::sqrt(ss_res / n))
}
