//! Independent Gaussian-process regression per observed stress component.

use alloc::{format, vec, vec::Vec};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Block, FunctionGrid, MechanicalTest, StackedLayout};
use crate::diffnum::{AdamW, AdamWConfig, Optimizer, Tensor};
use crate::mechanics::{deformation_filter, protocol_deformation, StressComponent};
use crate::{num, rng::Rng, Error, Result};

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.959964;
/// Initial diagonal jitter relative to σ².
pub const JITTER_START: f64 = 1e-8;
/// Largest diagonal jitter relative to σ².
pub const JITTER_MAX: f64 = 1e-4;

/// Heteroskedastic noise: variance max{σ_min², σ_r² P²}.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErrorModel {
    sigma_min: f64,
    sigma_r: f64,
}

impl ErrorModel {
    /// σ_min = 0 is accepted to express the noiseless limit.
    pub fn new(sigma_min: f64, sigma_r: f64) -> Result<Self> {
        if !(sigma_min >= 0.0 && sigma_r >= 0.0) || !sigma_min.is_finite() || !sigma_r.is_finite() {
            return Err(Error::Config(format!(
                "error model needs finite σ_min ≥ 0 and σ_r ≥ 0, got {sigma_min}, {sigma_r}"
            )));
        }
        Ok(Self { sigma_min, sigma_r })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r
    }

    pub fn variance(&self, stress: f64) -> f64 {
        let a = self.sigma_min * self.sigma_min;
        let b = self.sigma_r * self.sigma_r * stress * stress;
        a.max(b)
    }

    pub fn std_dev(&self, stress: f64) -> f64 {
        num::sqrt(self.variance(stress))
    }
}

/// Squared-exponential kernel hyperparameters ζ = (l, σ).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelParams {
    length_scales: Vec<f64>,
    output_scale: f64,
}

impl KernelParams {
    pub fn new(length_scales: Vec<f64>, output_scale: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if length_scales.is_empty() || !length_scales.iter().all(|l| ok(*l)) || !ok(output_scale) {
            return Err(Error::InvalidInput(format!(
                "kernel parameters must be finite and positive: l = {length_scales:?}, σ = {output_scale}"
            )));
        }
        Ok(Self {
            length_scales,
            output_scale,
        })
    }

    pub fn length_scales(&self) -> &[f64] {
        &self.length_scales
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    fn from_log(theta: &[f64]) -> Result<Self> {
        let d = theta.len() - 1;
        Self::new(theta[..d].iter().map(|t| num::exp(*t)).collect(), num::exp(theta[d]))
    }

    fn to_log(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.length_scales.iter().map(|l| num::ln(*l)).collect();
        t.push(num::ln(self.output_scale));
        t
    }
}

/// l ← factor · l with σ unchanged.
pub fn shrink_length_scales(params: &KernelParams, factor: f64) -> Result<KernelParams> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Config(format!("length-scale factor must lie in (0, 1], got {factor}")));
    }
    KernelParams::new(
        params.length_scales.iter().map(|l| l * factor).collect(),
        params.output_scale,
    )
}

/// k(x, x') = σ² exp(−½ Σ ((x_i − x'_i)/l_i)²).
pub fn kernel(x: &[f64], y: &[f64], params: &KernelParams) -> Result<f64> {
    if x.len() != params.dim() || y.len() != params.dim() {
        return Err(Error::dim("kernel input", params.dim(), x.len().max(y.len())));
    }
    Ok(kernel_unchecked(x, y, params))
}

fn kernel_unchecked(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    let mut r2 = 0.0;
    for ((a, b), l) in x.iter().zip(y).zip(&params.length_scales) {
        let d = (a - b) / l;
        r2 += d * d;
    }
    params.output_scale * params.output_scale * num::exp(-0.5 * r2)
}

/// Cross-covariance matrix K(a, b).
pub fn kernel_matrix(a: &[Vec<f64>], b: &[Vec<f64>], params: &KernelParams) -> Result<DMatrix<f64>> {
    for x in a.iter().chain(b) {
        if x.len() != params.dim() {
            return Err(Error::dim("kernel input", params.dim(), x.len()));
        }
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| kernel_unchecked(&a[i], &b[j], params)))
}

/// Cholesky factor of `m + jitter·I`, escalating the jitter ×10 from
/// `JITTER_START·scale` up to `JITTER_MAX·scale`. Returns the jitter used.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
        if rel > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "covariance of size {} not positive definite after jitter {:e}",
                m.nrows(),
                JITTER_MAX * scale
            )));
        }
    }
}

/// Affine map of raw reduced deformations onto [0, 1] per dimension.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InputNormalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNormalization {
    pub fn fit(inputs: &[Vec<f64>]) -> Result<Self> {
        let d = inputs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("no training inputs".into()))?;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for x in inputs {
            if x.len() != d {
                return Err(Error::dim("training input", d, x.len()));
            }
            for k in 0..d {
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        }
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| if b - a > 0.0 { b - a } else { 1.0 })
            .collect();
        Ok(Self { offset: lo, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }
}

/// Raw GP training data for one stress component, pooled over tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub component: StressComponent,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Collects every measurement of `component` across the tests.
pub fn training_data(tests: &[MechanicalTest], component: StressComponent) -> Result<TrainingData> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in tests {
        let Some(q) = t.components().iter().position(|c| *c == component) else { continue };
        for (c, p) in t.controls().iter().zip(t.stresses(q)) {
            let f = protocol_deformation(t.protocol(), *c)?;
            inputs.push(deformation_filter(&component, &f)?);
            targets.push(*p);
        }
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput(format!("no measurements of {component}")));
    }
    Ok(TrainingData {
        component,
        inputs,
        targets,
    })
}

fn noise_diagonal(targets: &[f64], error_model: &ErrorModel) -> Vec<f64> {
    targets.iter().map(|p| error_model.variance(*p)).collect()
}

struct Factorized {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

fn factorize(
    inputs: &[Vec<f64>],
    targets: &[f64],
    params: &KernelParams,
    noise: &[f64],
) -> Result<(DMatrix<f64>, Factorized)> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::dim("training targets", inputs.len(), targets.len()));
    }
    let k = kernel_matrix(inputs, inputs, params)?;
    let mut kt = k.clone();
    for (i, n) in noise.iter().enumerate() {
        kt[(i, i)] += n;
    }
    let s2 = params.output_scale * params.output_scale;
    let (chol, jitter) = cholesky_with_jitter(&kt, s2)?;
    let alpha = chol.solve(&DVector::from_column_slice(targets));
    Ok((k, Factorized { chol, alpha, jitter }))
}

fn lml_from(f: &Factorized, targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    let y = DVector::from_column_slice(targets);
    let log_det: f64 = f.chol.l_dirty().diagonal().iter().map(|d| num::ln(*d)).sum::<f64>() * 2.0;
    -0.5 * y.dot(&f.alpha) - 0.5 * log_det - 0.5 * n * num::ln(2.0 * core::f64::consts::PI)
}

/// −½ Pᵀ K̃⁻¹ P − ½ log det K̃ − (n/2) log 2π with K̃ = K + Σ_ϵ (+ jitter).
pub fn log_marginal_likelihood(
    inputs: &[Vec<f64>],
    targets: &[f64],
    params: &KernelParams,
    error_model: &ErrorModel,
) -> Result<f64> {
    let noise = noise_diagonal(targets, error_model);
    let (_, f) = factorize(inputs, targets, params, &noise)?;
    Ok(lml_from(&f, targets))
}

/// LML and its gradient with respect to (log l_1..log l_d, log σ).
fn lml_and_gradient(
    inputs: &[Vec<f64>],
    targets: &[f64],
    params: &KernelParams,
    noise: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (k, f) = factorize(inputs, targets, params, noise)?;
    let lml = lml_from(&f, targets);
    let n = targets.len();
    let k_inv = f.chol.inverse();
    let w = &f.alpha * f.alpha.transpose() - k_inv;
    let d = params.dim();
    let mut grad = vec![0.0; d + 1];
    for i in 0..n {
        for j in 0..n {
            let c = 0.5 * w[(i, j)] * k[(i, j)];
            for (m, l) in params.length_scales.iter().enumerate() {
                let r = (inputs[i][m] - inputs[j][m]) / l;
                grad[m] += c * r * r;
            }
            grad[d] += 2.0 * c;
        }
    }
    Ok((lml, grad))
}

/// Settings of the empirical-Bayes hyperparameter search.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub weight_decay: f64,
    pub initial_length_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            iterations: 200,
            weight_decay: 0.01,
            initial_length_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: KernelParams,
    pub lml: f64,
    pub initial_lml: f64,
    /// LML at every evaluated iterate, including the initial one.
    pub history: Vec<f64>,
}

/// Maximizes the LML in log-parameter space with AdamW, returning the best
/// iterate. `inputs` must already be normalized.
pub fn fit_hyperparameters(
    inputs: &[Vec<f64>],
    targets: &[f64],
    error_model: &ErrorModel,
    config: &FitConfig,
) -> Result<FitResult> {
    let d = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("no training inputs".into()))?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let mut sigma0 = num::sqrt(var);
    if !(sigma0 > 0.0) {
        sigma0 = error_model.sigma_min().max(1e-3);
    }
    let init = KernelParams::new(vec![config.initial_length_scale; d], sigma0)?;
    let noise = noise_diagonal(targets, error_model);
    let mut theta = [Tensor::from_row_slice(1, d + 1, &init.to_log())];
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &[(1, d + 1)],
    );
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, KernelParams)> = None;
    for it in 0..=config.iterations {
        let params = KernelParams::from_log(theta[0].as_slice())?;
        let (lml, grad) = lml_and_gradient(inputs, targets, &params, &noise)?;
        if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite log marginal likelihood at iteration {it} (l = {:?}, σ = {})",
                params.length_scales, params.output_scale
            )));
        }
        history.push(lml);
        if best.as_ref().map_or(true, |(b, _)| lml > *b) {
            best = Some((lml, params));
        }
        if it == config.iterations {
            break;
        }
        let neg = Tensor::from_row_slice(1, d + 1, &grad.iter().map(|g| -g).collect::<Vec<_>>());
        opt.step(&mut theta, &[neg])?;
    }
    let (lml, params) = best.ok_or_else(|| Error::Numerical("no LML evaluation".into()))?;
    Ok(FitResult {
        params,
        lml,
        initial_lml: history[0],
        history,
    })
}

/// A GP conditioned on training data, ready to be queried.
#[derive(Debug, Clone)]
pub struct GpModel {
    component: StressComponent,
    params: KernelParams,
    normalization: InputNormalization,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    /// Conditions on raw training data; inputs are normalized with
    /// `normalization` (or one fitted to the inputs).
    pub fn new(
        data: &TrainingData,
        params: KernelParams,
        error_model: &ErrorModel,
        normalization: Option<InputNormalization>,
    ) -> Result<Self> {
        let normalization = match normalization {
            Some(n) => n,
            None => InputNormalization::fit(&data.inputs)?,
        };
        let inputs: Vec<Vec<f64>> = data.inputs.iter().map(|x| normalization.apply(x)).collect();
        let noise = noise_diagonal(&data.targets, error_model);
        let (_, f) = factorize(&inputs, &data.targets, &params, &noise)?;
        Ok(Self {
            component: data.component,
            params,
            normalization,
            inputs,
            targets: data.targets.clone(),
            chol: f.chol,
            alpha: f.alpha,
            jitter: f.jitter,
        })
    }

    pub fn component(&self) -> StressComponent {
        self.component
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn normalization(&self) -> &InputNormalization {
        &self.normalization
    }

    pub fn normalized_inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn training_jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior over raw query inputs.
    pub fn condition(&self, query: &[Vec<f64>]) -> Result<GpPosterior> {
        let q: Vec<Vec<f64>> = query.iter().map(|x| self.normalization.apply(x)).collect();
        let ks = kernel_matrix(&q, &self.inputs, &self.params)?;
        let kss = kernel_matrix(&q, &q, &self.params)?;
        let mean = &ks * &self.alpha;
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks.transpose())
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let mut cov = kss - v.tr_mul(&v);
        let sym = (&cov + cov.transpose()) * 0.5;
        cov = sym;
        let s2 = self.params.output_scale * self.params.output_scale;
        let (factor, jitter) = cholesky_with_jitter(&cov, s2)?;
        Ok(GpPosterior {
            component: self.component,
            params: self.params.clone(),
            normalization: self.normalization.clone(),
            query: query.to_vec(),
            mean,
            cov,
            factor: factor.l(),
            jitter,
        })
    }
}

/// Posterior mean and covariance on a query grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub component: StressComponent,
    pub params: KernelParams,
    pub normalization: InputNormalization,
    /// Raw (unnormalized) query inputs.
    pub query: Vec<Vec<f64>>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov + jitter·I`.
    pub factor: DMatrix<f64>,
    pub jitter: f64,
}

impl GpPosterior {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| num::sqrt(v.max(0.0))).collect()
    }

    /// Pointwise mean ± z·std intervals.
    pub fn interval(&self, z: f64) -> (Vec<f64>, Vec<f64>) {
        let sd = self.std_dev();
        let lo = self.mean.iter().zip(&sd).map(|(m, s)| m - z * s).collect();
        let hi = self.mean.iter().zip(&sd).map(|(m, s)| m + z * s).collect();
        (lo, hi)
    }
}

/// Fits, shrinks and conditions one GP per (test, component) block of a grid.
#[derive(Debug, Clone)]
pub struct StackedPosterior {
    layout: StackedLayout,
    blocks: Vec<GpPosterior>,
}

impl StackedPosterior {
    pub fn new(layout: StackedLayout, blocks: Vec<GpPosterior>) -> Result<Self> {
        if blocks.len() != layout.blocks().len() {
            return Err(Error::dim("posterior blocks", layout.blocks().len(), blocks.len()));
        }
        for (b, p) in layout.blocks().iter().zip(&blocks) {
            if p.len() != b.len || p.component != b.component {
                return Err(Error::InvalidInput(format!(
                    "posterior for block (t={}, q={}) does not match the layout",
                    b.test, b.q
                )));
            }
        }
        Ok(Self { layout, blocks })
    }

    /// Conditions each component model on the grid inputs of every block.
    pub fn from_models(grid: &FunctionGrid, models: &[GpModel]) -> Result<Self> {
        let blocks = grid
            .layout()
            .blocks()
            .iter()
            .map(|b: &Block| {
                let model = models
                    .iter()
                    .find(|m| m.component == b.component)
                    .ok_or_else(|| Error::InvalidInput(format!("no GP for component {}", b.component)))?;
                model.condition(&grid.tests()[b.test].inputs[b.q])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.layout().clone(), blocks)
    }

    pub fn layout(&self) -> &StackedLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[GpPosterior] {
        &self.blocks
    }

    pub fn mean(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.mean.iter().copied()).collect()
    }

    /// `count` stacked draws, one per column (n_s × count).
    pub fn sample_columns(&self, count: usize, rng: &mut Rng) -> Tensor {
        let n = self.layout.len();
        let mut out = Tensor::zeros(n, count);
        let mut z = Vec::new();
        for j in 0..count {
            for (b, p) in self.layout.blocks().iter().zip(&self.blocks) {
                z.clear();
                z.extend((0..b.len).map(|_| -> f64 { StandardNormal.sample(rng) }));
                for i in 0..b.len {
                    let mut acc = p.mean[i];
                    for k in 0..=i {
                        acc += p.factor[(i, k)] * z[k];
                    }
                    out[(b.offset + i, j)] = acc;
                }
            }
        }
        out
    }
}

/// `count` stacked posterior draws as rows (count × n_s).
pub fn sample_stacked(posterior: &StackedPosterior, count: usize, rng: &mut Rng) -> DMatrix<f64> {
    posterior.sample_columns(count, rng).transpose()
}

/// GP stage output: one fitted model per stress component and the stacked
/// posterior on the grid.
#[derive(Debug, Clone)]
pub struct GpStage {
    pub models: Vec<GpModel>,
    pub fits: Vec<FitResult>,
    pub posterior: StackedPosterior,
}

/// Fits ζ per component on normalized inputs, multiplies the length scales
/// by `length_factor` and conditions every grid block.
pub fn fit_stage(
    tests: &[MechanicalTest],
    grid: &FunctionGrid,
    error_model: &ErrorModel,
    config: &FitConfig,
    length_factor: f64,
) -> Result<GpStage> {
    let mut components: Vec<StressComponent> = Vec::new();
    for t in tests {
        for c in t.components() {
            if !components.contains(c) {
                components.push(*c);
            }
        }
    }
    let mut models = Vec::with_capacity(components.len());
    let mut fits = Vec::with_capacity(components.len());
    for c in components {
        let data = training_data(tests, c)?;
        let norm = InputNormalization::fit(&data.inputs)?;
        let inputs: Vec<Vec<f64>> = data.inputs.iter().map(|x| norm.apply(x)).collect();
        let fit = fit_hyperparameters(&inputs, &data.targets, error_model, config)?;
        let params = shrink_length_scales(&fit.params, length_factor)?;
        models.push(GpModel::new(&data, params, error_model, Some(norm))?);
        fits.push(fit);
    }
    let posterior = StackedPosterior::from_models(grid, &models)?;
    Ok(GpStage {
        models,
        fits,
        posterior,
    })
}

pub use crate::metrics::estimated_coverage;
