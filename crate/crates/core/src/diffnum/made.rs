use alloc::{format, string::String, vec, vec::Vec};

use super::init::glorot_uniform;
use super::params::{load_into, NamedTensor, Parameterized};
use super::tape::{Tape, Tensor, Unary, Var};
use crate::{num, rng::Rng, Error, Result};

/// Masked autoencoder producing location and unconstrained scale vectors.
///
/// Input degrees are 1..=n. Hidden degrees are assigned round-robin over
/// [1, max(n − 1, 1)]. Hidden masks use `m(u) ≥ m(v)`; the output layer uses
/// the strict rule so output pair i only sees inputs with degree < i.
/// Parameters are `[W1, b1, …, W_out, b_out]` with W_out of shape 2n × H,
/// rows 0..n giving the location and rows n..2n the scale pre-activation.
#[derive(Debug, Clone)]
pub struct MadeNetwork {
    n: usize,
    params: Vec<Tensor>,
    masks: Vec<Tensor>,
    degrees: Vec<Vec<usize>>,
}

fn hidden_degrees(n: usize, width: usize) -> Vec<usize> {
    let span = n.saturating_sub(1).max(1);
    (0..width).map(|u| 1 + u % span).collect()
}

impl MadeNetwork {
    /// Glorot-initialized hidden layers and a zero output layer.
    pub fn new(n: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if n == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config("MADE needs n ≥ 1 and at least one non-empty hidden layer".into()));
        }
        let mut degrees = vec![(1..=n).collect::<Vec<_>>()];
        for &h in hidden {
            degrees.push(hidden_degrees(n, h));
        }
        let mut masks = Vec::new();
        let mut params = Vec::new();
        for l in 1..degrees.len() {
            let (prev, cur) = (&degrees[l - 1], &degrees[l]);
            masks.push(Tensor::from_fn(cur.len(), prev.len(), |u, v| {
                if cur[u] >= prev[v] {
                    1.0
                } else {
                    0.0
                }
            }));
            params.push(glorot_uniform(cur.len(), prev.len(), rng));
            params.push(Tensor::zeros(cur.len(), 1));
        }
        let last = degrees.last().map_or(&[][..], |d| d.as_slice());
        masks.push(Tensor::from_fn(2 * n, last.len(), |i, u| {
            if (i % n) + 1 > last[u] {
                1.0
            } else {
                0.0
            }
        }));
        params.push(Tensor::zeros(2 * n, last.len()));
        params.push(Tensor::zeros(2 * n, 1));
        Ok(Self {
            n,
            params,
            masks,
            degrees,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn degrees(&self) -> &[Vec<usize>] {
        &self.degrees
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| p.shape()).collect()
    }

    fn layers(&self) -> usize {
        self.masks.len()
    }

    /// (location, raw scale) for a batch with one sample per column.
    pub fn forward_batch(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        if z.nrows() != self.n {
            return Err(Error::dim("MADE input", self.n, z.nrows()));
        }
        let mut h = z.clone();
        for l in 0..self.layers() {
            let w = self.params[2 * l].component_mul(&self.masks[l]);
            let mut a = w * &h;
            let b = &self.params[2 * l + 1];
            for mut c in a.column_iter_mut() {
                c += b.column(0);
            }
            h = if l + 1 < self.layers() { a.map(num::tanh) } else { a };
        }
        let loc = h.rows(0, self.n).into_owned();
        let raw = h.rows(self.n, self.n).into_owned();
        Ok((loc, raw))
    }

    /// Location and constrained scale sigmoid(s) ∈ (0, 1) for one input.
    pub fn forward_made(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (l, s) = self.forward_batch(&Tensor::from_column_slice(z.len(), 1, z))?;
        Ok((l.iter().copied().collect(), s.iter().map(|v| num::sigmoid(*v)).collect()))
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Records the forward pass; returns (location, raw scale) nodes.
    pub fn record(&self, tape: &mut Tape, z: Var, params: &[Var]) -> Result<(Var, Var)> {
        if params.len() != self.params.len() {
            return Err(Error::dim("MADE parameter nodes", self.params.len(), params.len()));
        }
        let mut h = z;
        for l in 0..self.layers() {
            let mask = tape.constant(self.masks[l].clone());
            let w = tape.mul(params[2 * l], mask)?;
            let a = tape.matmul(w, h)?;
            let a = tape.add_col(a, params[2 * l + 1])?;
            h = if l + 1 < self.layers() { tape.unary(a, Unary::Tanh) } else { a };
        }
        let loc = tape.rows(h, 0, self.n)?;
        let raw = tape.rows(h, self.n, self.n)?;
        Ok((loc, raw))
    }

    fn names(&self) -> Vec<String> {
        let n = self.params.len();
        (0..n)
            .map(|k| {
                let layer = if k >= n - 2 {
                    String::from("out")
                } else {
                    format!("hidden{}", k / 2 + 1)
                };
                format!("{layer}.{}", if k % 2 == 0 { "weight" } else { "bias" })
            })
            .collect()
    }
}

impl Parameterized for MadeNetwork {
    fn named_tensors(&self) -> Vec<NamedTensor> {
        self.names()
            .into_iter()
            .zip(&self.params)
            .map(|(name, p)| NamedTensor::from_tensor(name, p))
            .collect()
    }

    fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let names = self.names();
        let mut targets: Vec<(String, &mut Tensor)> = names.into_iter().zip(self.params.iter_mut()).collect();
        load_into(&mut targets, tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_output_layer_gives_half_scales() {
        let made = MadeNetwork::new(3, &[12], &mut seeded(1)).unwrap();
        let (l, s) = made.forward_made(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(l, vec![0.0; 3]);
        assert_eq!(s, vec![0.5; 3]);
    }

    #[test]
    fn perturbing_input_leaves_earlier_outputs() {
        let mut made = MadeNetwork::new(4, &[16], &mut seeded(2)).unwrap();
        let mut r = seeded(3);
        let shape = made.params()[2].shape();
        made.params_mut()[2] = glorot_uniform(shape.0, shape.1, &mut r);
        let z = [0.1, 0.2, -0.3, 0.4];
        let (l0, s0) = made.forward_made(&z).unwrap();
        for j in 0..4 {
            let mut zp = z;
            zp[j] += 0.7;
            let (l1, s1) = made.forward_made(&zp).unwrap();
            for i in 0..=j {
                assert_eq!(l0[i], l1[i], "loc {i} moved with input {j}");
                assert_eq!(s0[i], s1[i], "scale {i} moved with input {j}");
            }
        }
    }

    /// Two inputs, one hidden unit of degree 1, hand-set weights.
    #[test]
    fn two_dimensional_hand_computation() {
        let mut made = MadeNetwork::new(2, &[1], &mut seeded(0)).unwrap();
        assert_eq!(made.degrees()[1], vec![1]);
        assert_eq!(made.masks()[0], Tensor::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(made.masks()[1], Tensor::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]));
        let p = made.params_mut();
        p[0] = Tensor::from_row_slice(1, 2, &[0.8, 5.0]);
        p[1] = Tensor::from_element(1, 1, 0.1);
        p[2] = Tensor::from_column_slice(4, 1, &[9.0, 2.0, 9.0, -1.5]);
        p[3] = Tensor::from_column_slice(4, 1, &[0.3, 0.0, -0.2, 0.4]);
        let (l, s) = made.forward_made(&[0.5, 7.0]).unwrap();
        // h = tanh(0.8·0.5 + 0.1); the z2 weight and the first output row are masked.
        let h = (0.5f64).tanh();
        assert!((l[0] - 0.3).abs() < 1e-15);
        assert!((l[1] - 2.0 * h).abs() < 1e-15);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((s[0] - sig(-0.2)).abs() < 1e-15);
        assert!((s[1] - sig(-1.5 * h + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let made = MadeNetwork::new(3, &[12], &mut seeded(4)).unwrap();
        let named = made.named_tensors();
        let mut other = MadeNetwork::new(3, &[12], &mut seeded(5)).unwrap();
        other.load_named(&named).unwrap();
        assert_eq!(other.params(), made.params());
        let mut wrong = MadeNetwork::new(2, &[8], &mut seeded(5)).unwrap();
        assert!(wrong.load_named(&named).is_err());
    }
}
