//! Reverse-mode differentiation over dense matrices.
//!
//! Batched quantities use one column per sample. Second derivatives are
//! obtained by recording an explicit first-derivative graph (built from the
//! `*Prime` activations) and differentiating that graph once more.

use alloc::{vec, vec::Vec};

use nalgebra::DMatrix;

use crate::{num, Error, Result};

pub type Tensor = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    /// 1 − tanh²(x).
    TanhPrime,
    Sigmoid,
    /// σ(x)(1 − σ(x)).
    SigmoidPrime,
    Softplus,
    LogSigmoid,
    Exp,
    Ln,
    Square,
    /// Forward clamp to [lo, hi]; the backward pass treats it as identity.
    ClampPass { lo: f64, hi: f64 },
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => num::tanh(x),
            Unary::TanhPrime => {
                let t = num::tanh(x);
                1.0 - t * t
            }
            Unary::Sigmoid => num::sigmoid(x),
            Unary::SigmoidPrime => {
                let s = num::sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Softplus => num::softplus(x),
            Unary::LogSigmoid => num::log_sigmoid(x),
            Unary::Exp => num::exp(x),
            Unary::Ln => num::ln(x),
            Unary::Square => x * x,
            Unary::ClampPass { lo, hi } => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input x and output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::TanhPrime => -2.0 * num::tanh(x) * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::SigmoidPrime => y * (1.0 - 2.0 * num::sigmoid(x)),
            Unary::Softplus => num::sigmoid(x),
            Unary::LogSigmoid => num::sigmoid(-x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::ClampPass { .. } => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a b
    MatMul(Var, Var),
    /// aᵀ b
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a + b 1ᵀ with b a column.
    AddCol(Var, Var),
    /// a ⊙ (b 1ᵀ) with b a column.
    MulCol(Var, Var),
    /// a ⊙ (1 b) with b a row.
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    /// a / s with s a 1×1 node.
    DivScalar(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    /// Column sums as a 1×n row.
    ColSum(Var),
    /// Column Euclidean norms as a 1×n row.
    ColNorm(Var),
    /// Σ a ⊙ b as 1×1.
    Dot(Var, Var),
    Rows { of: Var, start: usize, len: usize },
    /// Output row i is input row perm[i].
    PermuteRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Norms below this are treated as non-differentiable.
pub const NORM_FLOOR: f64 = 1e-12;

/// Records operations for a single backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_norms: usize,
}

/// Gradients of a backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Column norms that fell below [`NORM_FLOOR`] and got zero gradient.
    pub degenerate_norms: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

fn column(v: &[f64]) -> Tensor {
    Tensor::from_column_slice(v.len(), 1, v)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(what, a.len(), b.len()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dim("matmul", va.ncols(), vb.nrows()));
        }
        let v = va * vb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::dim("transposed matmul", va.nrows(), vb.nrows()));
        }
        let v = va.tr_mul(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulTn(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).component_mul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.ncols() != 1 || vb.nrows() != va.nrows() {
            return Err(Error::dim("column broadcast", va.nrows(), vb.nrows()));
        }
        let mut v = va.clone();
        for mut c in v.column_iter_mut() {
            c += vb.column(0);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddCol(a, b), ng))
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.ncols() != 1 || vb.nrows() != va.nrows() {
            return Err(Error::dim("column broadcast", va.nrows(), vb.nrows()));
        }
        let mut v = va.clone();
        for mut c in v.column_iter_mut() {
            c.component_mul_assign(&vb.column(0));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MulCol(a, b), ng))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::dim("row broadcast", va.ncols(), vb.ncols()));
        }
        let mut v = va.clone();
        for (j, mut c) in v.column_iter_mut().enumerate() {
            c *= vb[(0, j)];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MulRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).add_scalar(s);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(Error::dim("scalar divisor", 1, vs.len()));
        }
        let v = self.value(a) / vs[(0, 0)];
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(v, Op::DivScalar(a, s), ng))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, f), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_element(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Tensor::from_element(1, 1, va.sum() / va.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sum();
        let ng = self.ng(a);
        self.push(Tensor::from_row_slice(1, v.len(), v.as_slice()), Op::ColSum(a), ng)
    }

    pub fn col_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Tensor::from_iterator(1, va.ncols(), va.column_iter().map(|c| c.norm()));
        let ng = self.ng(a);
        self.push(v, Op::ColNorm(a), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "dot")?;
        let v = Tensor::from_element(1, 1, self.value(a).dot(self.value(b)));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Dot(a, b), ng))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(Error::dim("row slice", va.nrows(), start + len));
        }
        let v = va.rows(start, len).into_owned();
        let ng = self.ng(a);
        Ok(self.push(v, Op::Rows { of: a, start, len }, ng))
    }

    pub fn permute_rows(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if perm.len() != va.nrows() || perm.iter().any(|p| *p >= va.nrows()) {
            return Err(Error::dim("row permutation", va.nrows(), perm.len()));
        }
        let v = va.select_rows(perm.iter());
        let ng = self.ng(a);
        Ok(self.push(v, Op::PermuteRows(a, perm), ng))
    }

    /// Gradient of a scalar output with respect to every recorded node.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        let v = self.value(output);
        if v.shape() != (1, 1) {
            return Err(Error::InvalidInput("gradient requires a scalar output".into()));
        }
        self.backward(output, Tensor::from_element(1, 1, 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::dim("backward seed", self.value(output).len(), seed.len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let mut degenerate = 0;
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads, &mut degenerate);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            degenerate_norms: degenerate + self.degenerate_norms,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>], degenerate: &mut usize) {
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => *t += d,
                slot => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g * vb.transpose());
                }
                if self.ng(*b) {
                    acc(*b, va.tr_mul(g));
                }
            }
            Op::MatMulTn(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, vb * g.transpose());
                }
                if self.ng(*b) {
                    acc(*b, va * g);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g.component_mul(self.value(*b)));
                acc(*b, g.component_mul(self.value(*a)));
            }
            Op::AddCol(a, b) => {
                acc(*a, g.clone());
                acc(*b, column(g.column_sum().as_slice()));
            }
            Op::MulCol(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut d = g.clone();
                    for mut c in d.column_iter_mut() {
                        c.component_mul_assign(&vb.column(0));
                    }
                    acc(*a, d);
                }
                if self.ng(*b) {
                    acc(*b, column(g.component_mul(va).column_sum().as_slice()));
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (j, mut c) in d.column_iter_mut().enumerate() {
                        c *= vb[(0, j)];
                    }
                    acc(*a, d);
                }
                if self.ng(*b) {
                    let s = g.component_mul(va).row_sum();
                    acc(*b, Tensor::from_row_slice(1, s.len(), s.as_slice()));
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::DivScalar(a, s) => {
                let sv = self.value(*s)[(0, 0)];
                acc(*a, g / sv);
                if self.ng(*s) {
                    let d = -g.dot(self.value(*a)) / (sv * sv);
                    acc(*s, Tensor::from_element(1, 1, d));
                }
            }
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let d = Tensor::from_fn(x.nrows(), x.ncols(), |i, j| {
                    g[(i, j)] * f.derivative(x[(i, j)], out[(i, j)])
                });
                acc(*a, d);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::from_element(x.nrows(), x.ncols(), g[(0, 0)]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let n = x.len().max(1) as f64;
                acc(*a, Tensor::from_element(x.nrows(), x.ncols(), g[(0, 0)] / n));
            }
            Op::ColSum(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::from_fn(x.nrows(), x.ncols(), |_, j| g[(0, j)]));
            }
            Op::ColNorm(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.nrows(), x.ncols());
                for j in 0..x.ncols() {
                    let n = out[(0, j)];
                    if n < NORM_FLOOR {
                        *degenerate += 1;
                        continue;
                    }
                    let s = g[(0, j)] / n;
                    for i in 0..x.nrows() {
                        d[(i, j)] = s * x[(i, j)];
                    }
                }
                acc(*a, d);
            }
            Op::Dot(a, b) => {
                acc(*a, self.value(*b) * g[(0, 0)]);
                acc(*b, self.value(*a) * g[(0, 0)]);
            }
            Op::Rows { of, start, len } => {
                let x = self.value(*of);
                let mut d = Tensor::zeros(x.nrows(), x.ncols());
                d.rows_mut(*start, *len).copy_from(g);
                acc(*of, d);
            }
            Op::PermuteRows(a, perm) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.nrows(), x.ncols());
                for (i, p) in perm.iter().enumerate() {
                    let row = g.row(i);
                    let mut target = d.row_mut(*p);
                    target += row;
                }
                acc(*a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_element(1, 1, 3.0));
        let y = t.unary(x, Unary::Square);
        let g = t.grad(y).unwrap();
        assert_eq!(g.get(x).unwrap()[(0, 0)], 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::from_element(2, 2, 1.5));
        let x = t.var(Tensor::from_element(2, 2, 0.5));
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y);
        let g = t.grad(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &Tensor::from_element(2, 2, 1.5));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.var(Tensor::zeros(2, 1));
        assert!(t.grad(x).is_err());
    }

    #[test]
    fn zero_norm_reports_degenerate_column() {
        let mut t = Tape::new();
        let x = t.var(Tensor::zeros(3, 2));
        let n = t.col_norm(x);
        let s = t.sum(n);
        let g = t.grad(s).unwrap();
        assert_eq!(g.degenerate_norms, 2);
        assert_eq!(g.get(x).unwrap(), &Tensor::zeros(3, 2));
    }

    /// Every op against central differences of a scalar reduction.
    #[test]
    fn all_ops_match_finite_differences() {
        let a0 = Tensor::from_fn(3, 2, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
        let b0 = Tensor::from_fn(3, 2, |i, j| 0.15 * (i * j) as f64 + 0.4);
        let col0 = Tensor::from_column_slice(3, 1, &[0.5, -0.7, 1.1]);
        let row0 = Tensor::from_row_slice(1, 2, &[0.9, -1.3]);
        let build = |t: &mut Tape, a: Var, b: Var, col: Var, row: Var| -> Var {
            let m = t.matmul_tn(a, b).unwrap();
            let m2 = t.matmul(a, m).unwrap();
            let s = t.add(m2, b).unwrap();
            let s = t.sub(s, a).unwrap();
            let s = t.mul(s, b).unwrap();
            let s = t.add_col(s, col).unwrap();
            let s = t.mul_col(s, col).unwrap();
            let s = t.mul_row(s, row).unwrap();
            let s = t.unary(s, Unary::Tanh);
            let p = t.unary(s, Unary::TanhPrime);
            let q = t.unary(p, Unary::Softplus);
            let q = t.unary(q, Unary::SigmoidPrime);
            let q = t.unary(q, Unary::LogSigmoid);
            let q = t.unary(q, Unary::Sigmoid);
            let q = t.unary(q, Unary::Exp);
            let q = t.unary(q, Unary::Ln);
            let q = t.permute_rows(q, alloc::vec![2, 0, 1]).unwrap();
            let r = t.rows(q, 1, 2).unwrap();
            let n = t.col_norm(r);
            let cs = t.col_sum(q);
            let nn = t.mul(n, cs).unwrap();
            let d = t.dot(a, b).unwrap();
            let d = t.offset(d, 2.0);
            let nn = t.div_scalar(nn, d).unwrap();
            let nn = t.scale(nn, 0.7);
            let m1 = t.mean(nn);
            let s1 = t.sum(q);
            t.add(m1, s1).unwrap()
        };
        let eval = |a: &Tensor, b: &Tensor, c: &Tensor, r: &Tensor| {
            let mut t = Tape::new();
            let (va, vb, vc, vr) = (t.var(a.clone()), t.var(b.clone()), t.var(c.clone()), t.var(r.clone()));
            let out = build(&mut t, va, vb, vc, vr);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let (va, vb, vc, vr) = (t.var(a0.clone()), t.var(b0.clone()), t.var(col0.clone()), t.var(row0.clone()));
        let out = build(&mut t, va, vb, vc, vr);
        let g = t.grad(out).unwrap();
        let h = 1e-6;
        let inputs = [&a0, &b0, &col0, &row0];
        for (k, var) in [va, vb, vc, vr].into_iter().enumerate() {
            let gk = g.get(var).unwrap();
            for e in 0..inputs[k].len() {
                let mut p: [Tensor; 4] = inputs.map(|x| x.clone());
                let mut m: [Tensor; 4] = inputs.map(|x| x.clone());
                p[k][e] += h;
                m[k][e] -= h;
                let fd = (eval(&p[0], &p[1], &p[2], &p[3]) - eval(&m[0], &m[1], &m[2], &m[3])) / (2.0 * h);
                let err = (gk[e] - fd).abs() / fd.abs().max(1e-3);
                assert!(err < 1e-5, "input {k} entry {e}: {} vs {fd}", gk[e]);
            }
        }
    }

    #[test]
    fn clamp_passes_gradient_through() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_element(1, 1, 50.0));
        let y = t.unary(x, Unary::ClampPass { lo: -30.0, hi: 30.0 });
        assert_eq!(t.scalar(y), 30.0);
        let g = t.grad(y).unwrap();
        assert_eq!(g.get(x).unwrap()[(0, 0)], 1.0);
    }
}
