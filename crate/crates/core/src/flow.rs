//! Inverse autoregressive flow over non-negative material parameters.
//!
//! u ~ N(0, I) passes through `n_layers` affine autoregressive maps
//! z ← l(z) + sigmoid(s(z)) ⊙ z with a component reversal between layers,
//! and κ = exp(clamp(z)).

use alloc::{format, string::String, vec, vec::Vec};

use rand_distr::{Distribution, StandardNormal};

use crate::diffnum::{MadeNetwork, NamedTensor, Parameterized, Tape, Tensor, Unary, Var};
use crate::{num, rng::Rng, Error, Result};

/// Bound on |log κ|.
pub const LOG_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowConfig {
    pub n_layers: usize,
    /// Hidden width as a multiple of n_κ.
    pub hidden_factor: usize,
    /// Initial location of log κ, written into the last layer's location bias.
    #[cfg_attr(feature = "serde", serde(default))]
    pub initial_log_location: f64,
    /// Initial bias of every layer's unconstrained scale, so each layer
    /// starts at s_c = sigmoid(bias) instead of 0.5.
    #[cfg_attr(feature = "serde", serde(default = "default_scale_bias"))]
    pub initial_scale_bias: f64,
}

fn default_scale_bias() -> f64 {
    2.0
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_layers: 16,
            hidden_factor: 4,
            initial_log_location: 0.0,
            initial_scale_bias: default_scale_bias(),
        }
    }
}

/// Samples with their log-densities.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// count × n_κ.
    pub kappa: Tensor,
    pub log_density: Vec<f64>,
    /// Entries whose log κ hit the clamp.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    n: usize,
    layers: Vec<MadeNetwork>,
    permutation: Vec<usize>,
}

fn standard_normal_log_density(u: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * num::ln(2.0 * core::f64::consts::PI);
    u.iter().map(|v| -0.5 * v * v - half_log_2pi).sum()
}

/// Tape and handles of a recorded forward pass.
#[derive(Debug)]
pub struct FlowGraph {
    pub tape: Tape,
    /// n_κ × batch.
    pub kappa: Var,
    /// Parameter nodes per layer.
    pub params: Vec<Vec<Var>>,
}

impl FlowModel {
    pub fn new(n: usize, config: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        if n == 0 || config.n_layers == 0 || config.hidden_factor == 0 {
            return Err(Error::Config("flow needs n_κ, layers and hidden width ≥ 1".into()));
        }
        if !(config.initial_log_location.is_finite() && config.initial_scale_bias.is_finite()) {
            return Err(Error::Config("initial flow biases must be finite".into()));
        }
        let mut layers = (0..config.n_layers)
            .map(|_| MadeNetwork::new(n, &[config.hidden_factor * n], rng))
            .collect::<Result<Vec<_>>>()?;
        for layer in &mut layers {
            let p = layer.params_mut();
            let bias = p.len() - 1;
            for i in n..2 * n {
                p[bias][(i, 0)] = config.initial_scale_bias;
            }
        }
        if let Some(last) = layers.last_mut() {
            let p = last.params_mut();
            let bias = p.len() - 1;
            for i in 0..n {
                p[bias][(i, 0)] = config.initial_log_location;
            }
        }
        Ok(Self {
            n,
            layers,
            permutation: (0..n).rev().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[MadeNetwork] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MadeNetwork] {
        &mut self.layers
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Parameter shapes of every layer, flattened in layer order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().flat_map(MadeNetwork::shapes).collect()
    }

    pub fn params_flat(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.params().iter().cloned()).collect()
    }

    pub fn set_params_flat(&mut self, params: &[Tensor]) -> Result<()> {
        let total: usize = self.layers.iter().map(|l| l.params().len()).sum();
        if params.len() != total {
            return Err(Error::dim("flow parameters", total, params.len()));
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                if let Some(src) = it.next() {
                    *p = src.clone();
                }
            }
        }
        Ok(())
    }

    fn permute(&self, z: &Tensor) -> Tensor {
        z.select_rows(self.permutation.iter())
    }

    /// Output of sub-transformation `k` for a batch (one sample per column)
    /// together with the per-sample log-determinant.
    pub fn layer_forward(&self, k: usize, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let made = self
            .layers
            .get(k)
            .ok_or_else(|| Error::InvalidInput(format!("flow has no layer {k}")))?;
        let (loc, raw) = made.forward_batch(z)?;
        let mut out = loc;
        let mut logdet = vec![0.0; z.ncols()];
        for j in 0..z.ncols() {
            for i in 0..self.n {
                let s = raw[(i, j)];
                out[(i, j)] += num::sigmoid(s) * z[(i, j)];
                logdet[j] += num::log_sigmoid(s);
            }
        }
        Ok((out, logdet))
    }

    /// log|det ∂T_k/∂z| = Σ log sigmoid(s_i) for one input.
    pub fn jacobian_logdet(&self, k: usize, z: &[f64]) -> Result<f64> {
        let (_, ld) = self.layer_forward(k, &Tensor::from_column_slice(z.len(), 1, z))?;
        Ok(ld[0])
    }

    /// Maps base samples (n × batch) to log κ before clamping plus the
    /// accumulated log-determinant of the affine layers.
    pub fn transform_base(&self, u: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if u.nrows() != self.n {
            return Err(Error::dim("base sample", self.n, u.nrows()));
        }
        let mut z = u.clone();
        let mut logdet = vec![0.0; u.ncols()];
        for k in 0..self.layers.len() {
            let (next, ld) = self.layer_forward(k, &z)?;
            for (a, b) in logdet.iter_mut().zip(ld) {
                *a += b;
            }
            z = if k + 1 < self.layers.len() { self.permute(&next) } else { next };
        }
        Ok((z, logdet))
    }

    /// Draws `count` parameter vectors with their log-densities.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<FlowSample> {
        let u = self.base_sample(count, rng);
        self.push_forward(&u)
    }

    /// n × count standard-normal draws in column order.
    pub fn base_sample(&self, count: usize, rng: &mut Rng) -> Tensor {
        let mut u = Tensor::zeros(self.n, count);
        for j in 0..count {
            for i in 0..self.n {
                u[(i, j)] = StandardNormal.sample(rng);
            }
        }
        u
    }

    /// κ and log p(κ) for given base samples (n × count).
    pub fn push_forward(&self, u: &Tensor) -> Result<FlowSample> {
        let (z, logdet) = self.transform_base(u)?;
        let count = u.ncols();
        let mut kappa = Tensor::zeros(count, self.n);
        let mut log_density = Vec::with_capacity(count);
        let mut clamped = 0;
        for j in 0..count {
            let mut lp = standard_normal_log_density(u.column(j).as_slice()) - logdet[j];
            for i in 0..self.n {
                let zc = z[(i, j)].clamp(-LOG_CLAMP, LOG_CLAMP);
                if zc != z[(i, j)] {
                    clamped += 1;
                }
                kappa[(j, i)] = num::exp(zc);
                lp -= zc;
            }
            log_density.push(lp);
        }
        Ok(FlowSample {
            kappa,
            log_density,
            clamped,
        })
    }

    /// Inverts sub-transformation `k` one component at a time.
    pub fn layer_inverse(&self, k: usize, y: &[f64]) -> Result<Vec<f64>> {
        let made = self
            .layers
            .get(k)
            .ok_or_else(|| Error::InvalidInput(format!("flow has no layer {k}")))?;
        let mut z = vec![0.0; self.n];
        for i in 0..self.n {
            let (loc, scale) = made.forward_made(&z)?;
            z[i] = (y[i] - loc[i]) / scale[i];
        }
        Ok(z)
    }

    /// Base point u with T(u) = log κ (unclamped domain).
    pub fn inverse(&self, kappa: &[f64]) -> Result<Vec<f64>> {
        if kappa.len() != self.n {
            return Err(Error::dim("kappa", self.n, kappa.len()));
        }
        if let Some(v) = kappa.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("flow density needs finite κ > 0, got {v}")));
        }
        let mut z: Vec<f64> = kappa.iter().map(|k| num::ln(*k)).collect();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                let mut unperm = vec![0.0; self.n];
                for (i, p) in self.permutation.iter().enumerate() {
                    unperm[*p] = z[i];
                }
                z = unperm;
            }
            z = self.layer_inverse(k, &z)?;
        }
        Ok(z)
    }

    /// log p(κ) via the sequential inverse.
    pub fn log_density(&self, kappa: &[f64]) -> Result<f64> {
        let u = self.inverse(kappa)?;
        let (_, logdet) = self.transform_base(&Tensor::from_column_slice(self.n, 1, &u))?;
        let log_kappa: f64 = kappa.iter().map(|k| num::ln(*k)).sum();
        Ok(standard_normal_log_density(&u) - logdet[0] - log_kappa)
    }

    /// Records κ(u) for base samples (n × batch) on a fresh tape.
    pub fn record(&self, u: &Tensor) -> Result<FlowGraph> {
        if u.nrows() != self.n {
            return Err(Error::dim("base sample", self.n, u.nrows()));
        }
        let mut tape = Tape::new();
        let params: Vec<Vec<Var>> = self.layers.iter().map(|l| l.register(&mut tape)).collect();
        let mut z = tape.constant(u.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let (loc, raw) = layer.record(&mut tape, z, &params[k])?;
            let sc = tape.unary(raw, Unary::Sigmoid);
            let scaled = tape.mul(sc, z)?;
            let next = tape.add(loc, scaled)?;
            z = if k + 1 < self.layers.len() {
                tape.permute_rows(next, self.permutation.clone())?
            } else {
                next
            };
        }
        let zc = tape.unary(
            z,
            Unary::ClampPass {
                lo: -LOG_CLAMP,
                hi: LOG_CLAMP,
            },
        );
        let kappa = tape.unary(zc, Unary::Exp);
        Ok(FlowGraph { tape, kappa, params })
    }
}

impl Parameterized for FlowModel {
    fn named_tensors(&self) -> Vec<NamedTensor> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                l.named_tensors().into_iter().map(move |mut t| {
                    t.name = format!("t{}.{}", k + 1, t.name);
                    t
                })
            })
            .collect()
    }

    fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let prefix: String = format!("t{}.", k + 1);
            let own: Vec<NamedTensor> = tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(&prefix).map(|rest| NamedTensor {
                        name: rest.into(),
                        ..t.clone()
                    })
                })
                .collect();
            layer.load_named(&own)?;
        }
        let expected: usize = self.layers.iter().map(|l| l.params().len()).sum();
        if tensors.len() != expected {
            return Err(Error::dim("flow checkpoint tensors", expected, tensors.len()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_bias() -> FlowConfig {
        FlowConfig {
            initial_scale_bias: 0.0,
            ..FlowConfig::default()
        }
    }

    #[test]
    fn zero_initialized_flow_contracts_towards_one() {
        let flow = FlowModel::new(3, &zero_bias(), &mut seeded(1)).unwrap();
        let u = Tensor::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let s = flow.push_forward(&u).unwrap();
        let factor = 0.5f64.powi(16);
        // Fifteen reversals between the 16 layers leave the order reversed.
        for i in 0..3 {
            let expected = (factor * u[(2 - i, 0)]).exp();
            assert!((s.kappa[(0, i)] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn one_dimensional_lognormal_density() {
        let flow = FlowModel::new(1, &zero_bias(), &mut seeded(2)).unwrap();
        let s_log = 0.5f64.powi(16);
        for kappa in [1.0 - 2e-5, 1.0, 1.0 + 3e-5] {
            let z = f64::ln(kappa);
            let expected = -0.5 * (z / s_log).powi(2)
                - (s_log * kappa).ln()
                - 0.5 * (2.0 * core::f64::consts::PI).ln();
            let got = flow.log_density(&[kappa]).unwrap();
            assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
        }
    }

    #[test]
    fn default_scale_bias_sets_the_initial_spread() {
        let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(5)).unwrap();
        let u = Tensor::from_column_slice(2, 1, &[0.7, -1.3]);
        let s = flow.push_forward(&u).unwrap();
        // Each layer multiplies by sigmoid(2) = 1 / (1 + e^-2).
        let factor = (1.0 / (1.0 + (-2.0f64).exp())).powi(16);
        for i in 0..2 {
            assert!((s.kappa[(0, i)].ln() - factor * u[(1 - i, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(3)).unwrap();
        let s = flow.sample(0, &mut seeded(4)).unwrap();
        assert_eq!(s.kappa.nrows(), 0);
        assert!(s.log_density.is_empty());
        assert!(matches!(flow.log_density(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(flow.log_density(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sampling_is_reproducible() {
        let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(5)).unwrap();
        let a = flow.sample(8, &mut seeded(6)).unwrap();
        let b = flow.sample(8, &mut seeded(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_graph_matches_direct_sampling() {
        let mut flow = FlowModel::new(3, &FlowConfig { n_layers: 3, ..FlowConfig::default() }, &mut seeded(7)).unwrap();
        let mut r = seeded(8);
        for layer in flow.layers_mut() {
            let (rows, cols) = layer.params()[2].shape();
            layer.params_mut()[2] = crate::diffnum::glorot_uniform(rows, cols, &mut r);
        }
        let u = flow.base_sample(5, &mut r);
        let direct = flow.push_forward(&u).unwrap();
        let g = flow.record(&u).unwrap();
        let k = g.tape.value(g.kappa);
        for j in 0..5 {
            for i in 0..3 {
                assert!((k[(i, j)] - direct.kappa[(j, i)]).abs() < 1e-14);
            }
        }
    }
}
