//! Total-order Sobol' indices, deformation-resolved averaging and library
//! reduction.

use alloc::{format, string::String, vec, vec::Vec};

use rand::Rng as _;

use crate::dataset::StackedLayout;
use crate::diffnum::Tensor;
use crate::distill::ForwardMap;
use crate::flow::FlowModel;
use crate::mechanics::ModelLibrary;
use crate::{rng::Rng, Error, Result};

/// Closed interval used for uniform sampling of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::Domain(format!(
                "degenerate sampling bounds [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Source of the uniform points behind the A and B matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Sampling {
    /// Owen-scrambled Sobol' sequence; A takes dimensions 0..d and B d..2d.
    #[default]
    ScrambledSobol,
    PseudoRandom,
}

/// Largest parameter count supported by the scrambled sequence.
pub const MAX_QMC_DIM: usize = (sobol_burley::NUM_DIMENSIONS / 2) as usize;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SobolConfig {
    /// Base sample count N of the Saltelli design.
    pub n_base: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub sampling: Sampling,
    /// Flow samples used to estimate the parameter bounds.
    pub bound_samples: usize,
    pub threshold: f64,
}

impl Default for SobolConfig {
    fn default() -> Self {
        Self {
            n_base: 4096,
            sampling: Sampling::ScrambledSobol,
            bound_samples: 8192,
            threshold: 1e-4,
        }
    }
}

impl SobolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_base < 2 || self.bound_samples < 2 {
            return Err(Error::Config("Sobol' sample counts must be at least 2".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config("Sobol' threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Rows [A; B; A_B^(1); …; A_B^(d)], each block N × d.
#[derive(Debug, Clone, PartialEq)]
pub struct SaltelliDesign {
    pub n_base: usize,
    pub rows: Tensor,
}

impl SaltelliDesign {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Row range of block `b` (0 = A, 1 = B, 2 + i = A_B^(i)).
    pub fn block_rows(&self, b: usize) -> core::ops::Range<usize> {
        b * self.n_base..(b + 1) * self.n_base
    }
}

pub fn saltelli_samples(
    bounds: &[Interval],
    n_base: usize,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<SaltelliDesign> {
    if bounds.is_empty() || n_base == 0 {
        return Err(Error::InvalidInput("Saltelli design needs parameters and samples".into()));
    }
    for b in bounds {
        Interval::new(b.lower, b.upper)?;
    }
    let d = bounds.len();
    let scale = |j: usize, u: f64| bounds[j].lower + u * bounds[j].width();
    let (a, b) = match sampling {
        Sampling::PseudoRandom => {
            let a = Tensor::from_fn(n_base, d, |_, j| scale(j, rng.random::<f64>()));
            let b = Tensor::from_fn(n_base, d, |_, j| scale(j, rng.random::<f64>()));
            (a, b)
        }
        Sampling::ScrambledSobol => {
            if d > MAX_QMC_DIM {
                return Err(Error::Config(format!(
                    "scrambled Sobol' sampling supports at most {MAX_QMC_DIM} parameters, got {d}"
                )));
            }
            if u32::try_from(n_base).is_err() {
                return Err(Error::Config(format!("base sample count {n_base} too large")));
            }
            let seed: u32 = rng.random();
            let point = |i: usize, dim: usize| f64::from(sobol_burley::sample(i as u32, dim as u32, seed));
            let a = Tensor::from_fn(n_base, d, |i, j| scale(j, point(i, j)));
            let b = Tensor::from_fn(n_base, d, |i, j| scale(j, point(i, d + j)));
            (a, b)
        }
    };
    let mut rows = Tensor::zeros(n_base * (d + 2), d);
    rows.rows_mut(0, n_base).copy_from(&a);
    rows.rows_mut(n_base, n_base).copy_from(&b);
    for i in 0..d {
        let mut ab = a.clone();
        ab.column_mut(i).copy_from(&b.column(i));
        rows.rows_mut((2 + i) * n_base, n_base).copy_from(&ab);
    }
    Ok(SaltelliDesign { n_base, rows })
}

/// Total-order index of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TotalIndex {
    pub value: f64,
    /// Output variance vanished; `value` is 0 by convention.
    pub degenerate: bool,
}

/// Jansen estimator: mean (f(A) − f(A_B^(i)))² / 2 over the variance of
/// the pooled A and B outputs.
pub fn total_order_index(fa: &[f64], fb: &[f64], fab: &[Vec<f64>]) -> Result<Vec<TotalIndex>> {
    let n = fa.len();
    if n < 2 || fb.len() != n || fab.iter().any(|v| v.len() != n) {
        return Err(Error::InvalidInput("Sobol' value vectors must share a length of at least 2".into()));
    }
    let var = pooled_variance(fa, fb);
    let scale = fa.iter().chain(fb).fold(0.0_f64, |m, v| m.max(v.abs()));
    let degenerate = !(var > (1e-12 * scale) * (1e-12 * scale));
    Ok(fab
        .iter()
        .map(|f| {
            if degenerate {
                return TotalIndex {
                    value: 0.0,
                    degenerate: true,
                };
            }
            let sq: f64 = fa.iter().zip(f).map(|(x, y)| (x - y) * (x - y)).sum();
            TotalIndex {
                value: sq / (2.0 * n as f64) / var,
                degenerate: false,
            }
        })
        .collect())
}

fn pooled_variance(fa: &[f64], fb: &[f64]) -> f64 {
    let m = (fa.len() + fb.len()) as f64;
    let mean = fa.iter().chain(fb).sum::<f64>() / m;
    fa.iter().chain(fb).map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
}

/// Indices for a scalar function from its values on every design row.
pub fn indices_from_values(design: &SaltelliDesign, values: &[f64]) -> Result<Vec<TotalIndex>> {
    if values.len() != design.rows.nrows() {
        return Err(Error::dim("design values", design.rows.nrows(), values.len()));
    }
    let fa = &values[design.block_rows(0)];
    let fb = &values[design.block_rows(1)];
    let fab: Vec<Vec<f64>> = (0..design.dim())
        .map(|i| values[design.block_rows(2 + i)].to_vec())
        .collect();
    total_order_index(fa, fb, &fab)
}

/// Per-parameter [min, max] over flow samples.
pub fn flow_bounds(flow: &FlowModel, count: usize, rng: &mut Rng) -> Result<Vec<Interval>> {
    let s = flow.sample(count, rng)?;
    (0..flow.dim())
        .map(|i| {
            let col = s.kappa.column(i);
            Interval::new(col.min(), col.max())
        })
        .collect()
}

/// Forward map on every design row, returned as rows × n_s.
pub fn evaluate_design(forward: &ForwardMap, design: &SaltelliDesign) -> Result<Tensor> {
    Ok(forward.eval_rows(&design.rows)?.values.transpose())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SobolReport {
    pub parameter_names: Vec<String>,
    pub bounds: Vec<Interval>,
    pub n_base: usize,
    pub threshold: f64,
    /// Stacked-point index → owning test.
    pub point_tests: Vec<usize>,
    /// Raw indices, one row per stacked point (n_s × n_κ).
    pub per_point: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
    /// Double average: over (q, s) within each test, then over tests.
    pub averaged: Vec<f64>,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Clip range applied when displaying indices.
pub const REPORT_CLIP: (f64, f64) = (-0.05, 1.05);

impl SobolReport {
    pub fn n_kappa(&self) -> usize {
        self.averaged.len()
    }

    /// Averaged indices clipped for display.
    pub fn averaged_clipped(&self) -> Vec<f64> {
        self.averaged
            .iter()
            .map(|v| v.clamp(REPORT_CLIP.0, REPORT_CLIP.1))
            .collect()
    }

    /// Recomputes the double average from the stored per-point indices.
    pub fn recompute_average(&self) -> Vec<f64> {
        average_indices(&self.per_point, &self.point_tests)
    }
}

fn average_indices(per_point: &[Vec<f64>], point_tests: &[usize]) -> Vec<f64> {
    let d = per_point.first().map_or(0, Vec::len);
    let n_tests = point_tests.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; n_tests];
    let mut counts = vec![0usize; n_tests];
    for (row, t) in per_point.iter().zip(point_tests) {
        counts[*t] += 1;
        for (s, v) in sums[*t].iter_mut().zip(row) {
            *s += v;
        }
    }
    let used: Vec<usize> = (0..n_tests).filter(|t| counts[*t] > 0).collect();
    (0..d)
        .map(|i| {
            used.iter()
                .map(|t| sums[*t][i] / counts[*t] as f64)
                .sum::<f64>()
                / used.len() as f64
        })
        .collect()
}

/// Kept parameter indices under `threshold`: a term survives when its
/// outer coefficient does, and then keeps its inner parameter too.
pub fn classify(library: &ModelLibrary, averaged: &[f64], threshold: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if averaged.len() != library.n_kappa() {
        return Err(Error::dim("averaged indices", library.n_kappa(), averaged.len()));
    }
    let mut keep = vec![false; library.n_kappa()];
    for t in library.terms() {
        // Negative estimates count as zero.
        if averaged[t.outer_index].max(0.0) >= threshold {
            keep[t.outer_index] = true;
            if let Some(w) = t.inner_index {
                keep[w] = true;
            }
        }
    }
    let kept = (0..keep.len()).filter(|i| keep[*i]).collect();
    let removed = (0..keep.len()).filter(|i| !keep[*i]).collect();
    Ok((kept, removed))
}

/// Assembles a report from outputs on the design (rows × n_s).
pub fn report_from_outputs(
    library: &ModelLibrary,
    layout: &StackedLayout,
    design: &SaltelliDesign,
    outputs: &Tensor,
    bounds: Vec<Interval>,
    threshold: f64,
) -> Result<SobolReport> {
    if outputs.ncols() != layout.len() || outputs.nrows() != design.rows.nrows() {
        return Err(Error::dim("design outputs", layout.len(), outputs.ncols()));
    }
    if design.dim() != library.n_kappa() {
        return Err(Error::dim("design dimension", library.n_kappa(), design.dim()));
    }
    let mut point_tests = vec![0; layout.len()];
    for b in layout.blocks() {
        for s in 0..b.len {
            point_tests[b.offset + s] = b.test;
        }
    }
    let mut per_point = Vec::with_capacity(layout.len());
    let mut degenerate = Vec::with_capacity(layout.len());
    for s in 0..layout.len() {
        let col: Vec<f64> = outputs.column(s).iter().copied().collect();
        let idx = indices_from_values(design, &col)?;
        degenerate.push(idx.first().is_some_and(|i| i.degenerate));
        per_point.push(idx.iter().map(|i| i.value).collect());
    }
    let averaged = average_indices(&per_point, &point_tests);
    let (kept, removed) = classify(library, &averaged, threshold)?;
    Ok(SobolReport {
        parameter_names: library.parameter_names(),
        bounds,
        n_base: design.n_base,
        threshold,
        point_tests,
        per_point,
        degenerate,
        averaged,
        kept,
        removed,
    })
}

/// Full sensitivity analysis of a trained flow on the forward map's grid.
pub fn deformation_resolved_indices(
    flow: &FlowModel,
    forward: &ForwardMap,
    config: &SobolConfig,
    rng: &mut Rng,
) -> Result<SobolReport> {
    config.validate()?;
    let bounds = flow_bounds(flow, config.bound_samples, rng)?;
    let design = saltelli_samples(&bounds, config.n_base, config.sampling, rng)?;
    let outputs = evaluate_design(forward, &design)?;
    report_from_outputs(
        forward.library(),
        forward.layout(),
        &design,
        &outputs,
        bounds,
        config.threshold,
    )
}

/// Reduced library and old → new parameter positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub library: ModelLibrary,
    pub index_map: Vec<Option<usize>>,
}

pub fn reduce_library(library: &ModelLibrary, report: &SobolReport, threshold: f64) -> Result<Reduction> {
    if !(threshold > 0.0) {
        return Err(Error::Config("Sobol' threshold must be positive".into()));
    }
    let (kept, _) = classify(library, &report.averaged, threshold)?;
    if kept.is_empty() {
        let max = report.averaged.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::InvalidInput(format!(
            "threshold {threshold:e} removes every parameter (largest averaged index {max:e})"
        )));
    }
    let keep_terms: Vec<bool> = library
        .terms()
        .iter()
        .map(|t| kept.contains(&t.outer_index))
        .collect();
    let reduced = library.retain_terms(&keep_terms)?;
    let old_names = library.parameter_names();
    let new_names = reduced.parameter_names();
    let index_map = old_names
        .iter()
        .map(|n| new_names.iter().position(|m| m == n))
        .collect();
    Ok(Reduction {
        library: reduced,
        index_map,
    })
}
