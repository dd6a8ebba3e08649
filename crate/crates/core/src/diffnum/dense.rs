use alloc::{format, string::String, vec, vec::Vec};

use rand_distr::{Distribution, StandardNormal};

use super::init::glorot_uniform;
use super::params::{load_into, NamedTensor, Parameterized};
use super::tape::{Tape, Tensor, Unary, Var};
use crate::{rng::Rng, Error, Result};

/// Smooth hidden activations (twice differentiable).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Tanh => Unary::Tanh,
            Activation::Softplus => Unary::Softplus,
        }
    }

    pub fn derivative(self) -> Unary {
        match self {
            Activation::Tanh => Unary::TanhPrime,
            Activation::Softplus => Unary::Sigmoid,
        }
    }
}

/// Power-iteration vectors of one spectrally normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: Tensor,
    pub v: Tensor,
}

fn normalized(t: Tensor) -> Tensor {
    let n = t.norm();
    if n > 1e-12 {
        t / n
    } else {
        t
    }
}

/// Scalar-output feedforward network R^n → R.
///
/// Parameters are stored as `[W1, b1, …, WL, bL, w_out, b_out]` with
/// `W_l` of shape (out × in), biases as columns and `w_out` as a column.
#[derive(Debug, Clone)]
pub struct DenseNetwork {
    sizes: Vec<usize>,
    params: Vec<Tensor>,
    activation: Activation,
    spectral: Option<Vec<SpectralState>>,
}

/// Nodes produced by recording a network on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CriticNodes {
    /// 1 × batch network outputs.
    pub output: Var,
    /// n_in × batch input gradients, when requested.
    pub input_grad: Option<Var>,
}

impl DenseNetwork {
    pub fn new(
        n_in: usize,
        hidden: &[usize],
        activation: Activation,
        spectral_norm: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_in == 0 || hidden.contains(&0) {
            return Err(Error::Config("network layers must have positive width".into()));
        }
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            params.push(glorot_uniform(w[1], w[0], rng));
            params.push(Tensor::zeros(w[1], 1));
        }
        let last = *sizes.last().unwrap_or(&n_in);
        params.push(glorot_uniform(last, 1, rng));
        params.push(Tensor::zeros(1, 1));
        let mut net = Self {
            sizes,
            params,
            activation,
            spectral: None,
        };
        if spectral_norm {
            let states = net
                .sizes
                .windows(2)
                .map(|w| {
                    let u = Tensor::from_fn(w[1], 1, |_, _| StandardNormal.sample(rng));
                    SpectralState {
                        u: normalized(u),
                        v: Tensor::zeros(w[0], 1),
                    }
                })
                .collect();
            net.spectral = Some(states);
            net.power_iteration(10);
        }
        Ok(net)
    }

    pub fn n_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn hidden_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| p.shape()).collect()
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral.is_some()
    }

    pub fn spectral_states(&self) -> Option<&[SpectralState]> {
        self.spectral.as_deref()
    }

    /// Runs `iters` power iterations on every hidden weight matrix.
    pub fn power_iteration(&mut self, iters: usize) {
        let Some(states) = self.spectral.as_mut() else { return };
        for (l, st) in states.iter_mut().enumerate() {
            let w = &self.params[2 * l];
            for _ in 0..iters {
                st.v = normalized(w.tr_mul(&st.u));
                st.u = normalized(w * &st.v);
            }
        }
    }

    /// Spectral-norm estimate uᵀ W v of hidden layer `l`.
    pub fn sigma(&self, l: usize) -> Option<f64> {
        let st = self.spectral.as_ref()?.get(l)?;
        Some(st.u.dot(&(&self.params[2 * l] * &st.v)))
    }

    /// Weight matrix of hidden layer `l` after normalization.
    pub fn effective_weight(&self, l: usize) -> Tensor {
        let w = &self.params[2 * l];
        match self.sigma(l) {
            Some(s) => w / s,
            None => w.clone(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.nrows() != self.n_in() {
            return Err(Error::dim("network input", self.n_in(), x.nrows()));
        }
        Ok(())
    }

    /// Outputs (1 × batch) for inputs with one sample per column.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_input_grad(x, false)?.0)
    }

    /// Outputs plus input gradients (n_in × batch) without a tape.
    pub fn forward_with_input_grad(&self, x: &Tensor, want_grad: bool) -> Result<(Tensor, Option<Tensor>)> {
        self.check_input(x)?;
        let act = self.activation;
        let mut h = x.clone();
        let mut pre = Vec::with_capacity(self.hidden_layers());
        for l in 0..self.hidden_layers() {
            let mut z = self.effective_weight(l) * &h;
            let b = &self.params[2 * l + 1];
            for mut c in z.column_iter_mut() {
                c += b.column(0);
            }
            h = z.map(|v| act.unary().apply(v));
            pre.push(z);
        }
        let n = self.params.len();
        let (w_out, b_out) = (&self.params[n - 2], self.params[n - 1][(0, 0)]);
        let out = w_out.tr_mul(&h).add_scalar(b_out);
        if !want_grad {
            return Ok((out, None));
        }
        let mut g = Tensor::from_fn(w_out.nrows(), x.ncols(), |i, _| w_out[(i, 0)]);
        for l in (0..self.hidden_layers()).rev() {
            let d = g.zip_map(&pre[l], |gi, z| gi * act.derivative().apply(z));
            g = self.effective_weight(l).tr_mul(&d);
        }
        Ok((out, Some(g)))
    }

    /// Registers the parameters as differentiable tape inputs.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Records the forward pass and optionally the explicit input-gradient
    /// graph, which stays differentiable with respect to the parameters.
    pub fn record(&self, tape: &mut Tape, x: Var, params: &[Var], input_grad: bool) -> Result<CriticNodes> {
        if params.len() != self.params.len() {
            return Err(Error::dim("network parameter nodes", self.params.len(), params.len()));
        }
        if tape.value(x).nrows() != self.n_in() {
            return Err(Error::dim("network input", self.n_in(), tape.value(x).nrows()));
        }
        let act = self.activation;
        let mut weights = Vec::with_capacity(self.hidden_layers());
        for l in 0..self.hidden_layers() {
            let w = params[2 * l];
            let w_eff = match self.spectral.as_ref().map(|s| &s[l]) {
                Some(st) => {
                    let u = tape.constant(st.u.clone());
                    let v = tape.constant(st.v.clone());
                    let wv = tape.matmul(w, v)?;
                    let sigma = tape.dot(u, wv)?;
                    tape.div_scalar(w, sigma)?
                }
                None => w,
            };
            weights.push(w_eff);
        }
        let mut h = x;
        let mut pre = Vec::with_capacity(weights.len());
        for (l, w) in weights.iter().enumerate() {
            let z = tape.matmul(*w, h)?;
            let z = tape.add_col(z, params[2 * l + 1])?;
            h = tape.unary(z, act.unary());
            pre.push(z);
        }
        let n = params.len();
        let o = tape.matmul_tn(params[n - 2], h)?;
        // b_out is 1×1; broadcast it along the batch.
        let ones = tape.constant(Tensor::from_element(1, o_cols(tape, o), 1.0));
        let bias_row = tape.matmul(params[n - 1], ones)?;
        let output = tape.add(o, bias_row)?;
        let input_grad = if input_grad {
            let mut g: Option<Var> = None;
            for l in (0..weights.len()).rev() {
                let dz = tape.unary(pre[l], act.derivative());
                let d = match g {
                    None => tape.mul_col(dz, params[n - 2])?,
                    Some(g) => tape.mul(g, dz)?,
                };
                g = Some(tape.matmul_tn(weights[l], d)?);
            }
            Some(match g {
                Some(g) => g,
                None => {
                    // No hidden layer: ∇x = w_out for every sample.
                    let ones = tape.constant(Tensor::from_element(self.n_in(), o_cols(tape, o), 1.0));
                    tape.mul_col(ones, params[n - 2])?
                }
            })
        } else {
            None
        };
        Ok(CriticNodes { output, input_grad })
    }
}

fn o_cols(tape: &Tape, v: Var) -> usize {
    tape.value(v).ncols()
}

impl Parameterized for DenseNetwork {
    fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params
            .iter()
            .enumerate()
            .map(|(k, p)| NamedTensor::from_tensor(param_name(k, self.params.len()), p))
            .collect();
        if let Some(states) = &self.spectral {
            for (l, st) in states.iter().enumerate() {
                out.push(NamedTensor::from_tensor(format!("sn{}.u", l + 1), &st.u));
                out.push(NamedTensor::from_tensor(format!("sn{}.v", l + 1), &st.v));
            }
        }
        out
    }

    fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let n = self.params.len();
        let mut targets: Vec<(String, &mut Tensor)> = self
            .params
            .iter_mut()
            .enumerate()
            .map(|(k, p)| (param_name(k, n), p))
            .collect();
        if let Some(states) = self.spectral.as_mut() {
            for (l, st) in states.iter_mut().enumerate() {
                targets.push((format!("sn{}.u", l + 1), &mut st.u));
                targets.push((format!("sn{}.v", l + 1), &mut st.v));
            }
        }
        load_into(&mut targets, tensors)
    }
}

fn param_name(k: usize, n: usize) -> String {
    if k == n - 2 {
        "out.weight".into()
    } else if k == n - 1 {
        "out.bias".into()
    } else if k % 2 == 0 {
        format!("layer{}.weight", k / 2 + 1)
    } else {
        format!("layer{}.bias", k / 2 + 1)
    }
}
