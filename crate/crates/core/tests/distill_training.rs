//! Flow-loss gradients and trainer bookkeeping.

use hyperdisc_core::dataset::{build_grid, synthesize_dataset, FunctionGrid, MechanicalTest, TestDesign, linspace};
use hyperdisc_core::diffnum::Tensor;
use hyperdisc_core::distill::{
    flow_loss, CriticConfig, Distiller, ForwardMap, HistoryRecord, TrainObserver, TrainSchedule,
};
use hyperdisc_core::flow::{FlowConfig, FlowModel};
use hyperdisc_core::gp::{fit_stage, ErrorModel, FitConfig, StackedPosterior};
use hyperdisc_core::mechanics::{Frame, ModelLibrary, Protocol};
use hyperdisc_core::rng::{seeded, Rng};
use hyperdisc_core::Error;
use rand::Rng as _;

fn mr2() -> ModelLibrary {
    ModelLibrary::isotropic_default().select(&["c(0,1)", "c(1,0)"]).unwrap()
}

fn data() -> (Vec<MechanicalTest>, FunctionGrid) {
    let designs = [
        TestDesign::new("UT", Protocol::Uniaxial, linspace(1.0, 2.0, 8)),
        TestDesign::new("EBT", Protocol::Equibiaxial, linspace(1.0, 1.6, 8)),
    ];
    let tests = synthesize_dataset(
        &mr2(),
        &[0.1, 0.3],
        &designs,
        &ErrorModel::new(0.01, 0.05).unwrap(),
        &Frame::default(),
        7,
    )
    .unwrap();
    let grid = build_grid(&tests, &[6, 6]).unwrap();
    (tests, grid)
}

fn posterior(tests: &[MechanicalTest], grid: &FunctionGrid) -> StackedPosterior {
    let em = ErrorModel::new(0.01, 0.05).unwrap();
    fit_stage(tests, grid, &em, &FitConfig::default(), 0.8).unwrap().posterior
}

fn perturbed_flow(n: usize, layers: usize, seed: u64) -> FlowModel {
    let mut rng: Rng = seeded(seed);
    let mut flow = FlowModel::new(n, &FlowConfig { n_layers: layers, ..FlowConfig::default() }, &mut rng).unwrap();
    let p: Vec<Tensor> = flow
        .params_flat()
        .into_iter()
        .map(|t| {
            let noise = Tensor::from_fn(t.nrows(), t.ncols(), |_, _| 0.3 * (2.0 * rng.random::<f64>() - 1.0));
            t + noise
        })
        .collect();
    flow.set_params_flat(&p).unwrap();
    flow
}

#[test]
fn flow_gradient_matches_differences() {
    let (tests, grid) = data();
    let fm = ForwardMap::new(mr2(), &grid, &Frame::default()).unwrap();
    let post = posterior(&tests, &grid);
    for seed in 0..5 {
        let mut rng = seeded(100 + seed);
        let critic = CriticConfig::default().build(fm.n_s(), &mut rng).unwrap();
        let flow = perturbed_flow(2, 3, seed);
        let gp = post.sample_columns(4, &mut rng);
        let u = flow.base_sample(4, &mut rng);
        let step = flow_loss(&critic, &flow, &fm, &gp, &u).unwrap();
        let base = flow.params_flat();
        let h = 1e-6;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for (k, g) in step.grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut p = base.clone();
                p[k][i] += h;
                let mut fp = flow.clone();
                fp.set_params_flat(&p).unwrap();
                p[k][i] -= 2.0 * h;
                let mut fmn = flow.clone();
                fmn.set_params_flat(&p).unwrap();
                let lp = flow_loss(&critic, &fp, &fm, &gp, &u).unwrap().loss;
                let lm = flow_loss(&critic, &fmn, &fm, &gp, &u).unwrap().loss;
                num.push((lp - lm) / (2.0 * h));
                ana.push(g[i]);
            }
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-5, "seed {seed}: {:e}", diff / norm);
    }
}

#[derive(Default)]
struct Recorder {
    history: Vec<HistoryRecord>,
    checkpoints: Vec<usize>,
}

impl TrainObserver for Recorder {
    fn on_history(&mut self, r: &HistoryRecord) -> hyperdisc_core::Result<()> {
        self.history.push(*r);
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        iteration: usize,
        _: &FlowModel,
        _: &hyperdisc_core::diffnum::DenseNetwork,
    ) -> hyperdisc_core::Result<()> {
        self.checkpoints.push(iteration);
        Ok(())
    }
}

fn schedule(iterations: usize) -> TrainSchedule {
    TrainSchedule {
        iterations,
        batch_size: 8,
        history_every: 5,
        checkpoint_every: 10,
        ..TrainSchedule::default()
    }
}

#[test]
fn alternation_and_logging_cadence() {
    let (tests, grid) = data();
    let fm = ForwardMap::new(mr2(), &grid, &Frame::default()).unwrap();
    let post = posterior(&tests, &grid);
    let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(1)).unwrap();
    let cfg = CriticConfig { n_critic: 3, ..CriticConfig::default() };
    let mut d = Distiller::new(&fm, &post, flow, cfg, schedule(23), seeded(2)).unwrap();
    let mut rec = Recorder::default();
    let report = d.train(&mut rec).unwrap();
    assert_eq!(report.flow_updates, 23);
    assert_eq!(report.critic_updates, 3 * 23);
    let its: Vec<usize> = rec.history.iter().map(|h| h.iteration).collect();
    assert_eq!(its, vec![0, 5, 10, 15, 20, 22]);
    assert_eq!(rec.checkpoints, vec![10, 20, 23]);
    // RMSprop decays the learning rate once per flow step.
    let last = rec.history.last().unwrap();
    assert!((last.flow_lr - 5e-4 * 0.9999f64.powi(23)).abs() < 1e-15);
}

#[test]
fn zero_iterations_keep_the_initial_flow() {
    let (tests, grid) = data();
    let fm = ForwardMap::new(mr2(), &grid, &Frame::default()).unwrap();
    let post = posterior(&tests, &grid);
    let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(1)).unwrap();
    let before = flow.params_flat();
    let mut d = Distiller::new(&fm, &post, flow, CriticConfig::default(), schedule(0), seeded(2)).unwrap();
    let report = d.train(&mut Recorder::default()).unwrap();
    assert_eq!(report.flow_updates, 0);
    assert_eq!(d.flow().params_flat(), before);
}

#[test]
fn divergence_is_reported() {
    let (tests, grid) = data();
    let fm = ForwardMap::new(mr2(), &grid, &Frame::default()).unwrap();
    let post = posterior(&tests, &grid);
    let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(1)).unwrap();
    let sched = TrainSchedule { divergence_threshold: 0.0, ..schedule(5) };
    let mut d = Distiller::new(&fm, &post, flow, CriticConfig::default(), sched, seeded(2)).unwrap();
    match d.train(&mut Recorder::default()) {
        Err(Error::Diverged { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(d.last_good_flow().is_ok());
}

#[test]
fn training_is_deterministic() {
    let (tests, grid) = data();
    let fm = ForwardMap::new(mr2(), &grid, &Frame::default()).unwrap();
    let post = posterior(&tests, &grid);
    let run = || {
        let flow = FlowModel::new(2, &FlowConfig::default(), &mut seeded(1)).unwrap();
        let mut d = Distiller::new(&fm, &post, flow, CriticConfig::default(), schedule(6), seeded(2)).unwrap();
        let r = d.train(&mut Recorder::default()).unwrap();
        (r.history, d.into_flow().params_flat())
    };
    assert_eq!(run(), run());
}
