//! Wasserstein-1 distillation of the flow against the GP posterior.

use alloc::{format, vec, vec::Vec};

use rand::Rng as _;

use crate::dataset::{FunctionGrid, StackedLayout};
use crate::diffnum::{
    Activation, AdamW, AdamWConfig, DenseNetwork, Optimizer, RmsProp, RmsPropConfig, Tape, Tensor,
};
use crate::flow::FlowModel;
use crate::gp::StackedPosterior;
use crate::mechanics::{Frame, ModelLibrary, ObservationPoint};
use crate::{rng::Rng, Error, Result};

/// κ ↦ stacked observed stresses on a grid.
#[derive(Debug, Clone)]
pub struct ForwardMap {
    library: ModelLibrary,
    points: Vec<ObservationPoint>,
    layout: StackedLayout,
}

/// Stacked stresses of a batch (n_s × count) and clamp events.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub values: Tensor,
    pub clamped: usize,
}

impl ForwardMap {
    pub fn new(library: ModelLibrary, grid: &FunctionGrid, frame: &Frame) -> Result<Self> {
        let points = grid.observation_points(&library, frame)?;
        Ok(Self {
            library,
            points,
            layout: grid.layout().clone(),
        })
    }

    pub fn library(&self) -> &ModelLibrary {
        &self.library
    }

    pub fn layout(&self) -> &StackedLayout {
        &self.layout
    }

    pub fn n_s(&self) -> usize {
        self.points.len()
    }

    pub fn n_kappa(&self) -> usize {
        self.library.n_kappa()
    }

    /// Stacked stresses for one κ; the flag reports exponent clamping.
    pub fn eval(&self, kappa: &[f64]) -> Result<(Vec<f64>, bool)> {
        let mut clamped = false;
        let mut out = Vec::with_capacity(self.points.len());
        for p in &self.points {
            let e = p.evaluate(&self.library, kappa, None)?;
            clamped |= e.clamped;
            out.push(e.value);
        }
        Ok((out, clamped))
    }

    /// Stacked stresses and the n_s × n_κ Jacobian.
    pub fn eval_with_jacobian(&self, kappa: &[f64]) -> Result<(Vec<f64>, Tensor, bool)> {
        let n = self.n_kappa();
        let mut jac = Tensor::zeros(self.points.len(), n);
        let mut row = vec![0.0; n];
        let mut out = Vec::with_capacity(self.points.len());
        let mut clamped = false;
        for (s, p) in self.points.iter().enumerate() {
            let e = p.evaluate(&self.library, kappa, Some(&mut row))?;
            clamped |= e.clamped;
            out.push(e.value);
            for (i, v) in row.iter().enumerate() {
                jac[(s, i)] = *v;
            }
        }
        Ok((out, jac, clamped))
    }

    /// Forward map of κ rows (count × n_κ) to columns (n_s × count).
    pub fn eval_rows(&self, kappa: &Tensor) -> Result<BatchOutput> {
        if kappa.ncols() != self.n_kappa() {
            return Err(Error::dim("kappa batch columns", self.n_kappa(), kappa.ncols()));
        }
        let mut values = Tensor::zeros(self.n_s(), kappa.nrows());
        let mut clamped = 0;
        let mut k = vec![0.0; self.n_kappa()];
        for r in 0..kappa.nrows() {
            for (i, v) in k.iter_mut().enumerate() {
                *v = kappa[(r, i)];
            }
            let (f, c) = self
                .eval(&k)
                .map_err(|e| Error::InvalidInput(format!("forward map failed for sample {r}: {e}")))?;
            clamped += usize::from(c);
            values.column_mut(r).copy_from_slice(&f);
        }
        Ok(BatchOutput { values, clamped })
    }
}

/// Terms of the critic objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLoss {
    /// mean f(GP) − mean f(model).
    pub wasserstein: f64,
    /// mean (‖∇f(f̂)‖ − 1)².
    pub penalty: f64,
    /// Maximized objective W − λ·penalty.
    pub objective: f64,
}

/// Critic loss with gradients of the minimized objective λ·penalty − W.
#[derive(Debug, Clone)]
pub struct CriticStep {
    pub loss: CriticLoss,
    pub grads: Vec<Tensor>,
    pub degenerate_norms: usize,
}

/// f̂ = α f_M + (1 − α) f_GP with one α per column.
pub fn interpolate_batches(gp: &Tensor, model: &Tensor, alphas: &[f64]) -> Result<Tensor> {
    if gp.shape() != model.shape() || alphas.len() != gp.ncols() {
        return Err(Error::dim("interpolation batch", gp.ncols(), alphas.len()));
    }
    let mut out = gp.clone();
    for (j, a) in alphas.iter().enumerate() {
        let mut c = out.column_mut(j);
        c.axpy(*a, &model.column(j), 1.0 - a);
    }
    Ok(out)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("non-finite {what}")))
    }
}

/// Critic objective on batches with one sample per column.
pub fn critic_loss(
    critic: &DenseNetwork,
    gp_batch: &Tensor,
    model_batch: &Tensor,
    interpolants: &Tensor,
    lambda: f64,
) -> Result<CriticStep> {
    if gp_batch.nrows() != model_batch.nrows() || gp_batch.nrows() != interpolants.nrows() {
        return Err(Error::dim("critic batch width", gp_batch.nrows(), model_batch.nrows()));
    }
    let mut tape = Tape::new();
    let params = critic.register(&mut tape);
    let xg = tape.constant(gp_batch.clone());
    let xm = tape.constant(model_batch.clone());
    let xi = tape.constant(interpolants.clone());
    let og = critic.record(&mut tape, xg, &params, false)?.output;
    let om = critic.record(&mut tape, xm, &params, false)?.output;
    let gi = critic
        .record(&mut tape, xi, &params, true)?
        .input_grad
        .ok_or_else(|| Error::Numerical("missing input gradient".into()))?;
    let mg = tape.mean(og);
    let mm = tape.mean(om);
    let w = tape.sub(mg, mm)?;
    let norms = tape.col_norm(gi);
    let dev = tape.offset(norms, -1.0);
    let sq = tape.unary(dev, crate::diffnum::Unary::Square);
    let pen = tape.mean(sq);
    let scaled = tape.scale(pen, lambda);
    let minimized = tape.sub(scaled, w)?;
    let wasserstein = check_finite(tape.scalar(w), "Wasserstein estimate")?;
    let penalty = check_finite(tape.scalar(pen), "gradient penalty")?;
    let g = tape.grad(minimized)?;
    let grads = params
        .iter()
        .zip(critic.params())
        .map(|(v, p)| g.get_or_zeros(*v, p.nrows(), p.ncols()))
        .collect();
    Ok(CriticStep {
        loss: CriticLoss {
            wasserstein,
            penalty,
            objective: wasserstein - lambda * penalty,
        },
        grads,
        degenerate_norms: g.degenerate_norms,
    })
}

/// Flow loss L_W and its gradient with respect to the flow parameters.
#[derive(Debug, Clone)]
pub struct FlowStep {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub clamped: usize,
}

/// L_W = mean f(GP) − mean f(T_M(κ(u))) for base samples `u` (n_κ × B).
pub fn flow_loss(
    critic: &DenseNetwork,
    flow: &FlowModel,
    forward: &ForwardMap,
    gp_batch: &Tensor,
    u: &Tensor,
) -> Result<FlowStep> {
    if flow.dim() != forward.n_kappa() {
        return Err(Error::dim("flow dimension", forward.n_kappa(), flow.dim()));
    }
    let graph = flow.record(u)?;
    let kappa = graph.tape.value(graph.kappa).clone();
    let batch = u.ncols();
    let mut model = Tensor::zeros(forward.n_s(), batch);
    let mut jacobians = Vec::with_capacity(batch);
    let mut clamped = 0;
    for j in 0..batch {
        let k: Vec<f64> = kappa.column(j).iter().copied().collect();
        let (f, jac, c) = forward.eval_with_jacobian(&k)?;
        clamped += usize::from(c);
        model.column_mut(j).copy_from_slice(&f);
        jacobians.push(jac);
    }
    let (om, g) = critic.forward_with_input_grad(&model, true)?;
    let g = g.ok_or_else(|| Error::Numerical("missing critic input gradient".into()))?;
    let og = critic.forward(gp_batch)?;
    let loss = og.mean() - om.mean();
    check_finite(loss, "flow loss")?;
    let mut seed = Tensor::zeros(flow.dim(), batch);
    for (j, jac) in jacobians.iter().enumerate() {
        let col = jac.tr_mul(&g.column(j)) * (-1.0 / batch as f64);
        seed.column_mut(j).copy_from(&col);
    }
    let grads_all = graph.tape.backward(graph.kappa, seed)?;
    let mut grads = Vec::new();
    for (layer, vars) in flow.layers().iter().zip(&graph.params) {
        for (v, p) in vars.iter().zip(layer.params()) {
            grads.push(grads_all.get_or_zeros(*v, p.nrows(), p.ncols()));
        }
    }
    Ok(FlowStep { loss, grads, clamped })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CriticConfig {
    pub lambda: f64,
    pub n_critic: usize,
    /// Hidden widths; `None` means three layers of width 2·n_s.
    pub hidden: Option<Vec<usize>>,
    pub activation: Activation,
    pub spectral_norm: bool,
    pub optimizer: AdamWConfig,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            n_critic: 10,
            hidden: None,
            activation: Activation::Softplus,
            spectral_norm: true,
            optimizer: AdamWConfig {
                lr: 1e-4,
                ..AdamWConfig::default()
            },
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.n_critic == 0 {
            return Err(Error::Config("critic needs λ_L > 0 and at least one step per iteration".into()));
        }
        Ok(())
    }

    pub fn hidden_widths(&self, n_s: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| vec![2 * n_s; 3])
    }

    pub fn build(&self, n_s: usize, rng: &mut Rng) -> Result<DenseNetwork> {
        self.validate()?;
        DenseNetwork::new(n_s, &self.hidden_widths(n_s), self.activation, self.spectral_norm, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub flow_optimizer: RmsPropConfig,
    /// Draw a new GP batch for every critic step (otherwise once per iteration).
    pub resample_gp_each_critic_step: bool,
    pub history_every: usize,
    pub checkpoint_every: usize,
    pub divergence_threshold: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 32,
            flow_optimizer: RmsPropConfig::default(),
            resample_gp_each_critic_step: true,
            history_every: 50,
            checkpoint_every: 1000,
            divergence_threshold: 1e8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.history_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch size and logging cadences must be positive".into()));
        }
        Ok(())
    }
}

/// One logged training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    /// Flow loss L_W.
    pub wasserstein: f64,
    /// Critic objective L_L = W − λ·penalty from the last critic step.
    pub critic_objective: f64,
    pub penalty: f64,
    pub flow_lr: f64,
    pub critic_grad_norm: f64,
    pub flow_grad_norm: f64,
    pub clamped: usize,
}

/// Hooks for logging and checkpointing during training.
pub trait TrainObserver {
    fn on_history(&mut self, _record: &HistoryRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: usize, _flow: &FlowModel, _critic: &DenseNetwork) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub critic_updates: usize,
    pub flow_updates: usize,
    pub history: Vec<HistoryRecord>,
    pub clamped: usize,
    pub degenerate_norms: usize,
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    crate::num::sqrt(grads.iter().map(|g| g.norm_squared()).sum())
}

/// Alternating critic/flow optimization.
pub struct Distiller<'a> {
    forward: &'a ForwardMap,
    target: &'a StackedPosterior,
    flow: FlowModel,
    critic: DenseNetwork,
    critic_opt: AdamW,
    flow_opt: RmsProp,
    critic_cfg: CriticConfig,
    schedule: TrainSchedule,
    rng: Rng,
    last_good: Vec<Tensor>,
}

impl<'a> Distiller<'a> {
    pub fn new(
        forward: &'a ForwardMap,
        target: &'a StackedPosterior,
        flow: FlowModel,
        critic_cfg: CriticConfig,
        schedule: TrainSchedule,
        mut rng: Rng,
    ) -> Result<Self> {
        schedule.validate()?;
        if target.layout() != forward.layout() {
            return Err(Error::InvalidInput("GP and forward-map layouts differ".into()));
        }
        if flow.dim() != forward.n_kappa() {
            return Err(Error::dim("flow dimension", forward.n_kappa(), flow.dim()));
        }
        let critic = critic_cfg.build(forward.n_s(), &mut rng)?;
        let critic_opt = AdamW::new(critic_cfg.optimizer, &critic.shapes());
        let flow_opt = RmsProp::new(schedule.flow_optimizer, &flow.shapes());
        let last_good = flow.params_flat();
        Ok(Self {
            forward,
            target,
            flow,
            critic,
            critic_opt,
            flow_opt,
            critic_cfg,
            schedule,
            rng,
            last_good,
        })
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn critic(&self) -> &DenseNetwork {
        &self.critic
    }

    pub fn into_flow(self) -> FlowModel {
        self.flow
    }

    /// Flow at the most recent checkpoint that passed the divergence check.
    pub fn last_good_flow(&self) -> Result<FlowModel> {
        let mut f = self.flow.clone();
        f.set_params_flat(&self.last_good)?;
        Ok(f)
    }

    fn model_batch(&mut self) -> Result<(Tensor, usize)> {
        let s = self.flow.sample(self.schedule.batch_size, &mut self.rng)?;
        let out = self.forward.eval_rows(&s.kappa)?;
        Ok((out.values, out.clamped + s.clamped))
    }

    /// One critic update; returns the loss and gradient norm.
    pub fn critic_step(&mut self, gp: &Tensor) -> Result<(CriticLoss, f64, usize, usize)> {
        let (model, clamped) = self.model_batch()?;
        let alphas: Vec<f64> = (0..gp.ncols()).map(|_| self.rng.random::<f64>()).collect();
        let interp = interpolate_batches(gp, &model, &alphas)?;
        self.critic.power_iteration(1);
        let step = critic_loss(&self.critic, gp, &model, &interp, self.critic_cfg.lambda)?;
        let norm = grad_norm(&step.grads);
        self.critic_opt.step(self.critic.params_mut(), &step.grads)?;
        Ok((step.loss, norm, clamped, step.degenerate_norms))
    }

    /// One flow update; returns (L_W, gradient norm, clamp events).
    pub fn flow_step(&mut self) -> Result<(f64, f64, usize)> {
        let gp = self.target.sample_columns(self.schedule.batch_size, &mut self.rng);
        let u = self.flow.base_sample(self.schedule.batch_size, &mut self.rng);
        let step = flow_loss(&self.critic, &self.flow, self.forward, &gp, &u)?;
        let norm = grad_norm(&step.grads);
        let mut params = self.flow.params_flat();
        self.flow_opt.step(&mut params, &step.grads)?;
        self.flow.set_params_flat(&params)?;
        Ok((step.loss, norm, step.clamped))
    }

    pub fn train(&mut self, observer: &mut dyn TrainObserver) -> Result<TrainReport> {
        let sched = self.schedule.clone();
        let mut report = TrainReport {
            iterations: 0,
            critic_updates: 0,
            flow_updates: 0,
            history: Vec::new(),
            clamped: 0,
            degenerate_norms: 0,
        };
        for it in 0..sched.iterations {
            let mut gp = self.target.sample_columns(sched.batch_size, &mut self.rng);
            let mut last = CriticLoss {
                wasserstein: 0.0,
                penalty: 0.0,
                objective: 0.0,
            };
            let mut critic_norm = 0.0;
            for k in 0..self.critic_cfg.n_critic {
                if k > 0 && sched.resample_gp_each_critic_step {
                    gp = self.target.sample_columns(sched.batch_size, &mut self.rng);
                }
                let (loss, norm, clamped, degenerate) = self
                    .critic_step(&gp)
                    .map_err(|e| diverged(it, &e))?;
                report.critic_updates += 1;
                report.clamped += clamped;
                report.degenerate_norms += degenerate;
                last = loss;
                critic_norm = norm;
            }
            let (lw, flow_norm, clamped) = self.flow_step().map_err(|e| diverged(it, &e))?;
            report.flow_updates += 1;
            report.clamped += clamped;
            report.iterations = it + 1;
            let limit = sched.divergence_threshold;
            if !(lw.abs() <= limit) || !(last.objective.abs() <= limit) {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: format!("loss magnitude exceeded {limit:e} (L_W = {lw}, L_L = {})", last.objective),
                });
            }
            if it % sched.history_every == 0 || it + 1 == sched.iterations {
                let rec = HistoryRecord {
                    iteration: it,
                    wasserstein: lw,
                    critic_objective: last.objective,
                    penalty: last.penalty,
                    flow_lr: self.flow_opt.learning_rate(),
                    critic_grad_norm: critic_norm,
                    flow_grad_norm: flow_norm,
                    clamped: report.clamped,
                };
                observer.on_history(&rec)?;
                report.history.push(rec);
            }
            if (it + 1) % sched.checkpoint_every == 0 || it + 1 == sched.iterations {
                self.last_good = self.flow.params_flat();
                observer.on_checkpoint(it + 1, &self.flow, &self.critic)?;
            }
        }
        Ok(report)
    }
}

fn diverged(iteration: usize, e: &Error) -> Error {
    match e {
        Error::Numerical(msg) => Error::Diverged {
            iteration,
            reason: msg.clone(),
        },
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_grid, MechanicalTest};
    use crate::mechanics::Protocol;
    use crate::rng::seeded;

    fn ut_grid(n: usize) -> FunctionGrid {
        let t = MechanicalTest::new(
            "UT",
            Protocol::Uniaxial,
            vec!["P11".parse().unwrap()],
            vec![1.0, 2.0],
            vec![vec![0.0, 1.0]],
        )
        .unwrap();
        build_grid(&[t], &[n]).unwrap()
    }

    #[test]
    fn forward_map_closed_forms() {
        let lib = ModelLibrary::isotropic_default().select(&["c(1,0)"]).unwrap();
        let grid = ut_grid(5);
        let fm = ForwardMap::new(lib, &grid, &Frame::default()).unwrap();
        let (zero, _) = fm.eval(&[0.0]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let (f, _) = fm.eval(&[0.7]).unwrap();
        for (v, l) in f.iter().zip(&grid.tests()[0].controls) {
            let expected = 2.0 * 0.7 * (l - 1.0 / (l * l));
            assert!((v - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn identical_batches_have_zero_wasserstein() {
        let mut r = seeded(1);
        let critic = CriticConfig::default().build(4, &mut r).unwrap();
        let x = Tensor::from_fn(4, 6, |i, j| (i as f64 - j as f64) * 0.3);
        let step = critic_loss(&critic, &x, &x, &x, 10.0).unwrap();
        assert_eq!(step.loss.wasserstein, 0.0);
    }

    #[test]
    fn linear_unit_critic_has_no_penalty() {
        let mut r = seeded(2);
        let cfg = CriticConfig {
            hidden: Some(vec![]),
            spectral_norm: false,
            ..CriticConfig::default()
        };
        let mut critic = cfg.build(3, &mut r).unwrap();
        let n = critic.params().len();
        critic.params_mut()[n - 2] = Tensor::from_column_slice(3, 1, &[0.6, 0.0, 0.8]);
        let gp = Tensor::from_fn(3, 2, |i, j| (i + j) as f64);
        let model = Tensor::from_fn(3, 2, |i, j| (i * j) as f64);
        let step = critic_loss(&critic, &gp, &model, &gp, 10.0).unwrap();
        assert!(step.loss.penalty.abs() < 1e-30);
        // Hand-evaluated means of 0.6 x0 + 0.8 x2 over the two columns.
        let mean_gp = ((0.6 * 0.0 + 0.8 * 2.0) + (0.6 * 1.0 + 0.8 * 3.0)) / 2.0;
        let mean_model = (0.0 + (0.6 * 0.0 + 0.8 * 2.0)) / 2.0;
        assert!((step.loss.wasserstein - (mean_gp - mean_model)).abs() < 1e-14);
    }
}
