//! End-to-end discovery and calibration runs.
//!
//! Stages run in order: GP fit and conditioning, distillation, Sobol'
//! reduction, refinement. Every random stream is derived from the root seed
//! by label, and batch model evaluations are split into fixed chunks whose
//! results are reassembled in order, so outputs do not depend on the thread
//! count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperdisc_core::dataset::{build_grid, synthesize_dataset, FunctionGrid, MechanicalTest};
use hyperdisc_core::diffnum::Tensor;
use hyperdisc_core::distill::{Distiller, ForwardMap, TrainReport};
use hyperdisc_core::flow::FlowModel;
use hyperdisc_core::gp::{fit_stage, GpStage};
use hyperdisc_core::mechanics::{Frame, ModelLibrary};
use hyperdisc_core::metrics::{bands_from_posterior, bands_from_samples, compute_metrics, percentile, Band, Metrics};
use hyperdisc_core::rng::{derive_seed, seeded};
use hyperdisc_core::sobol::{flow_bounds, reduce_library, report_from_outputs, saltelli_samples, SobolReport};
use hyperdisc_core::Error as CoreError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    posterior_summary, write_function_tables, write_parameter_samples, write_sobol, FlowCheckpoint, Provenance,
    RunObserver, SobolArtifact,
};
use crate::config::{DataSource, RunConfig, Stage};
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::{PipelineError, Result};
use crate::json;

/// Rows per parallel work item; fixed so chunking never depends on threads.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discover,
    Calibrate,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Last stage to execute.
    pub stage: Stage,
    /// Worker threads for batch evaluations; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Stage progress on stderr.
    pub progress: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stage: Stage::All,
            threads: None,
            progress: false,
        }
    }
}

/// Posterior summary of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub std_dev: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    /// `distill` or `refine-<pass>`.
    pub stage: String,
    pub parameter_names: Vec<String>,
    pub metrics: Metrics,
    pub parameters: Vec<ParameterSummary>,
    /// Exponent and log κ clamp events while sampling the intervals.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolSummary {
    pub pass: usize,
    pub parameter_names: Vec<String>,
    pub averaged: Vec<f64>,
    pub kept: Vec<String>,
    pub removed: Vec<String>,
}

/// Contents of `metrics.json`; free of timings so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub seed: u64,
    pub gp: Metrics,
    pub models: Vec<ModelMetrics>,
    pub sobol: Vec<SobolSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    /// Derived stream seeds by label.
    pub seeds: BTreeMap<String, u64>,
    pub completed: Vec<String>,
    /// Directory of the final model stage, relative to the run.
    pub final_model: Option<String>,
    pub version: String,
}

/// A trained model stage.
#[derive(Debug, Clone)]
pub struct ModelStage {
    pub name: String,
    pub library: ModelLibrary,
    pub flow: FlowModel,
    pub train: Option<TrainReport>,
    pub metrics: ModelMetrics,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct DiscoveryRun {
    pub config: RunConfig,
    pub config_hash: String,
    pub dir: PathBuf,
    pub tests: Vec<MechanicalTest>,
    pub grid: FunctionGrid,
    pub gp: GpStage,
    pub models: Vec<ModelStage>,
    pub sobol: Vec<SobolReport>,
    pub metrics: RunMetrics,
    pub seeds: BTreeMap<String, u64>,
    pub timings: BTreeMap<String, f64>,
}

impl DiscoveryRun {
    /// Most recent trained model, if any.
    pub fn final_model(&self) -> Option<&ModelStage> {
        self.models.last()
    }
}

struct Seeds {
    root: u64,
    ledger: BTreeMap<String, u64>,
}

impl Seeds {
    fn new(root: u64) -> Self {
        Self {
            root,
            ledger: BTreeMap::new(),
        }
    }

    fn get(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.root, label);
        self.ledger.insert(label.to_string(), s);
        s
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| PipelineError::io(p, e))
}

fn stage_err(stage: Stage) -> impl FnOnce(CoreError) -> PipelineError {
    PipelineError::in_stage(stage)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(0) => Err(PipelineError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

/// Forward map over κ rows (count × n_κ) evaluated in parallel; returns
/// n_s × count and the clamp count.
pub fn evaluate_rows(forward: &ForwardMap, kappa: &Tensor) -> hyperdisc_core::Result<(Tensor, usize)> {
    let count = kappa.nrows();
    let chunks: Vec<(usize, usize)> = (0..count)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, EVAL_CHUNK.min(count - s)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|(s, len)| forward.eval_rows(&kappa.rows(*s, *len).into_owned()))
        .collect::<hyperdisc_core::Result<Vec<_>>>()?;
    let mut out = Tensor::zeros(forward.n_s(), count);
    let mut clamped = 0;
    for ((s, len), part) in chunks.iter().zip(parts) {
        out.columns_mut(*s, *len).copy_from(&part.values);
        clamped += part.clamped;
    }
    Ok((out, clamped))
}

fn parameter_summaries(names: &[String], kappa: &Tensor) -> Vec<ParameterSummary> {
    let n = kappa.nrows() as f64;
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut col: Vec<f64> = kappa.column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            col.sort_by(f64::total_cmp);
            ParameterSummary {
                name: name.clone(),
                mean,
                std_dev: var.sqrt(),
                q025: percentile(&col, 0.025),
                median: percentile(&col, 0.5),
                q975: percentile(&col, 0.975),
            }
        })
        .collect()
}

/// Samples drawn from a flow and pushed through the forward map.
pub struct ModelSamples {
    /// count × n_κ.
    pub kappa: Tensor,
    /// n_s × count.
    pub functions: Tensor,
    pub clamped: usize,
}

pub fn sample_model(forward: &ForwardMap, flow: &FlowModel, count: usize, seed: u64) -> hyperdisc_core::Result<ModelSamples> {
    let s = flow.sample(count, &mut seeded(seed))?;
    let (functions, clamped) = evaluate_rows(forward, &s.kappa)?;
    Ok(ModelSamples {
        kappa: s.kappa,
        functions,
        clamped: clamped + s.clamped,
    })
}

/// Data, grid and GP stage shared by fresh runs and run-directory tools.
struct Prepared {
    config: RunConfig,
    hash: String,
    tests: Vec<MechanicalTest>,
    test_ids: Vec<String>,
    grid: FunctionGrid,
    frame: Frame,
}

impl Prepared {
    fn new(config: RunConfig, tests: Vec<MechanicalTest>) -> Result<Self> {
        let hash = config.hash();
        let sizes = config.grid.sizes(tests.len())?;
        let grid = build_grid(&tests, &sizes).map_err(|e| match e {
            CoreError::Config(m) => PipelineError::Config(m),
            other => PipelineError::Stage {
                stage: Stage::Gp,
                source: other,
            },
        })?;
        let test_ids = tests.iter().map(|t| t.id().to_string()).collect();
        Ok(Self {
            config,
            hash,
            tests,
            test_ids,
            grid,
            frame: Frame::default(),
        })
    }

    fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            seed,
        }
    }

    fn gp(&self) -> Result<GpStage> {
        let error_model = self.config.error_model.build()?;
        fit_stage(
            &self.tests,
            &self.grid,
            &error_model,
            &self.config.gp.fit,
            self.config.gp.length_factor,
        )
        .map_err(stage_err(Stage::Gp))
    }

    fn forward(&self, library: &ModelLibrary, stage: Stage) -> Result<ForwardMap> {
        ForwardMap::new(library.clone(), &self.grid, &self.frame).map_err(stage_err(stage))
    }

    fn model_metrics(
        &self,
        name: &str,
        forward: &ForwardMap,
        flow: &FlowModel,
        seed: u64,
        stage: Stage,
    ) -> Result<(ModelMetrics, ModelSamples, Vec<Band>)> {
        let samples = sample_model(forward, flow, self.config.interval_samples, seed).map_err(stage_err(stage))?;
        let bands = bands_from_samples(&self.grid, &samples.functions).map_err(stage_err(stage))?;
        let metrics = compute_metrics(&bands, &self.tests).map_err(stage_err(stage))?;
        let names = forward.library().parameter_names();
        let parameters = parameter_summaries(&names, &samples.kappa);
        Ok((
            ModelMetrics {
                stage: name.to_string(),
                parameter_names: names,
                metrics,
                parameters,
                clamped: samples.clamped,
            },
            samples,
            bands,
        ))
    }
}

fn load_tests(config: &RunConfig, seeds: &mut Seeds) -> Result<Vec<MechanicalTest>> {
    match &config.data {
        DataSource::Files { csv, sidecar } => {
            for p in [csv, sidecar] {
                if !p.is_file() {
                    return Err(PipelineError::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
            read_dataset(csv, sidecar)
        }
        DataSource::Synthetic {
            generator,
            kappa,
            noise,
            designs,
        } => {
            let library = generator.build()?;
            let kappa = RunConfig::generator_kappa(&library, kappa);
            let designs = designs.iter().map(|d| d.build()).collect::<Result<Vec<_>>>()?;
            let noise = noise.build()?;
            synthesize_dataset(&library, &kappa, &designs, &noise, &Frame::default(), seeds.get("data"))
                .map_err(|e| PipelineError::Config(format!("synthetic data: {e}")))
        }
    }
}

struct Runner<'a> {
    prep: Prepared,
    seeds: Seeds,
    dir: PathBuf,
    mode: Mode,
    opts: &'a RunOptions,
    completed: Vec<String>,
    timings: BTreeMap<String, f64>,
    final_model: Option<String>,
    gp_posterior: Option<GpStage>,
}

impl Runner<'_> {
    fn log(&self, msg: &str) {
        if self.opts.progress {
            eprintln!("[{}] {msg}", self.dir.display());
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let m = Manifest {
            mode: self.mode,
            config_hash: self.prep.hash.clone(),
            seed: self.prep.config.seed,
            seeds: self.seeds.ledger.clone(),
            completed: self.completed.clone(),
            final_model: self.final_model.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        json::write(&self.dir.join("manifest.json"), &m)?;
        json::write(&self.dir.join("timing.json"), &self.timings)
    }

    fn done(&mut self, name: &str, started: Instant) -> Result<()> {
        self.completed.push(name.to_string());
        self.timings.insert(name.to_string(), started.elapsed().as_secs_f64());
        self.write_manifest()
    }

    /// Trains a fresh flow for `library` in `sub`, reusing a final checkpoint
    /// written by an identical earlier invocation.
    fn train(&mut self, sub: &str, library: &ModelLibrary, iterations: usize, stage: Stage) -> Result<ModelStage> {
        let started = Instant::now();
        let dir = self.dir.join(sub);
        mkdir(&dir)?;
        let forward = self.prep.forward(library, stage)?;
        let init_seed = self.seeds.get(&format!("{sub}.init"));
        let train_seed = self.seeds.get(&format!("{sub}.train"));
        let final_path = dir.join("flow_final.json");
        let provenance = self.prep.provenance(train_seed);
        let names = library.parameter_names();

        let reuse = final_path
            .is_file()
            .then(|| json::read::<FlowCheckpoint>(&final_path).ok())
            .flatten()
            .filter(|c| c.provenance == provenance && c.iteration == iterations && c.parameter_names == names);
        let (flow, train) = if let Some(ckpt) = reuse {
            self.log(&format!("{sub}: reusing {}", final_path.display()));
            (ckpt.restore()?, None)
        } else {
            self.log(&format!("{sub}: training {} parameters for {iterations} iterations", library.n_kappa()));
            let cfg = &self.prep.config;
            let flow =
                FlowModel::new(library.n_kappa(), &cfg.flow, &mut seeded(init_seed)).map_err(stage_err(stage))?;
            let mut schedule = cfg.schedule.clone();
            schedule.iterations = iterations;
            let mut observer = RunObserver::new(&dir, cfg.flow, names.clone(), provenance.clone())?;
            let gp = self.gp_posterior.as_ref().ok_or(PipelineError::MissingStage {
                stage: Stage::Gp,
                dir: self.dir.clone(),
            })?;
            let mut distiller = Distiller::new(
                &forward,
                &gp.posterior,
                flow,
                cfg.critic.clone(),
                schedule,
                seeded(train_seed),
            )
            .map_err(stage_err(stage))?;
            let result = distiller.train(&mut observer);
            observer.finish()?;
            let report = match result {
                Ok(r) => r,
                Err(e) => {
                    // Keep the last flow that passed the divergence check.
                    if let Ok(good) = distiller.last_good_flow() {
                        let c = FlowCheckpoint::capture(&good, &cfg.flow, names.clone(), 0, provenance.clone());
                        json::write(&dir.join("flow_last_good.json"), &c)?;
                    }
                    return Err(PipelineError::Stage { stage, source: e });
                }
            };
            let flow = distiller.into_flow();
            let ckpt = FlowCheckpoint::capture(&flow, &cfg.flow, names.clone(), iterations, provenance);
            json::write(&final_path, &ckpt)?;
            (flow, Some(report))
        };
        json::write(&dir.join("library.json"), library)?;
        let metrics_seed = self.seeds.get(&format!("{sub}.intervals"));
        let (metrics, _, _) = self.prep.model_metrics(sub, &forward, &flow, metrics_seed, stage)?;
        self.log(&format!(
            "{sub}: R² = {:.4}, RMSE = {:.4}, EC = {:.2}%",
            metrics.metrics.r2,
            metrics.metrics.rmse,
            100.0 * metrics.metrics.ec
        ));
        self.final_model = Some(sub.to_string());
        self.done(sub, started)?;
        Ok(ModelStage {
            name: sub.to_string(),
            library: library.clone(),
            flow,
            train,
            metrics,
        })
    }

    fn sobol(&mut self, pass: usize, model: &ModelStage) -> Result<(SobolReport, SobolSummary)> {
        let started = Instant::now();
        let label = format!("sobol-{pass}");
        self.log(&format!("{label}: analysing {} parameters", model.library.n_kappa()));
        let cfg = self.prep.config.sobol.clone();
        cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let seed = self.seeds.get(&label);
        let mut rng = seeded(seed);
        let st = Stage::Sobol;
        let forward = self.prep.forward(&model.library, st)?;
        let bounds = flow_bounds(&model.flow, cfg.bound_samples, &mut rng).map_err(stage_err(st))?;
        let design = saltelli_samples(&bounds, cfg.n_base, cfg.sampling, &mut rng).map_err(stage_err(st))?;
        let (outputs, _) = evaluate_rows(&forward, &design.rows).map_err(stage_err(st))?;
        let report = report_from_outputs(
            &model.library,
            forward.layout(),
            &design,
            &outputs.transpose(),
            bounds,
            cfg.threshold,
        )
        .map_err(stage_err(st))?;
        let names = report.parameter_names.clone();
        let summary = SobolSummary {
            pass,
            parameter_names: names.clone(),
            averaged: report.averaged.clone(),
            kept: report.kept.iter().map(|i| names[*i].clone()).collect(),
            removed: report.removed.iter().map(|i| names[*i].clone()).collect(),
        };
        let artifact = SobolArtifact {
            provenance: self.prep.provenance(seed),
            pass,
            averaged_clipped: report.averaged_clipped(),
            kept_names: summary.kept.clone(),
            removed_names: summary.removed.clone(),
            report: report.clone(),
        };
        let dir = self.dir.join(&label);
        write_sobol(&dir, &artifact, &self.prep.grid, &self.prep.test_ids)?;
        self.log(&format!("{label}: kept {:?}", summary.kept));
        self.done(&label, started)?;
        Ok((report, summary))
    }
}

fn write_config(dir: &Path, config: &RunConfig) -> Result<()> {
    mkdir(dir)?;
    json::write(&dir.join("config.json"), config)
}

fn finish_metrics(prep: &Prepared, gp: Metrics, models: &[ModelStage], sobol: Vec<SobolSummary>) -> RunMetrics {
    RunMetrics {
        config_hash: prep.hash.clone(),
        seed: prep.config.seed,
        gp,
        models: models.iter().map(|m| m.metrics.clone()).collect(),
        sobol,
    }
}

fn execute(config: RunConfig, mode: Mode, opts: &RunOptions) -> Result<DiscoveryRun> {
    config.validate()?;
    let dir = config.output_dir.clone();
    write_config(&dir, &config)?;
    let mut seeds = Seeds::new(config.seed);
    let tests = load_tests(&config, &mut seeds)?;
    let data_dir = dir.join("data");
    mkdir(&data_dir)?;
    write_dataset(&tests, &data_dir.join("dataset.csv"), &data_dir.join("dataset.json"))?;
    let prep = Prepared::new(config, tests)?;
    let mut r = Runner {
        prep,
        seeds,
        dir: dir.clone(),
        mode,
        opts,
        completed: Vec::new(),
        timings: BTreeMap::new(),
        final_model: None,
        gp_posterior: None,
    };

    // (i) GP fit and conditioning.
    let started = Instant::now();
    r.log("gp: fitting hyperparameters");
    let gp = r.prep.gp()?;
    let gp_dir = dir.join("gp");
    mkdir(&gp_dir)?;
    let summary = posterior_summary(
        &gp,
        &r.prep.grid,
        &r.prep.test_ids,
        r.prep.config.gp.length_factor,
        r.prep.provenance(r.prep.config.seed),
    );
    json::write(&gp_dir.join("posterior.json"), &summary)?;
    let gp_bands = bands_from_posterior(&r.prep.grid, &gp.posterior);
    let gp_metrics = compute_metrics(&gp_bands, &r.prep.tests).map_err(stage_err(Stage::Gp))?;
    r.log(&format!("gp: EC = {:.2}%", 100.0 * gp_metrics.ec));
    r.gp_posterior = Some(gp);
    r.done("gp", started)?;

    let mut models = Vec::new();
    let mut sobol_reports = Vec::new();
    let mut sobol_summaries = Vec::new();
    let stop = if mode == Mode::Calibrate {
        opts.stage.min(Stage::Distill)
    } else {
        opts.stage
    };

    if stop >= Stage::Distill {
        // (ii) Distillation over the full library.
        let library = r.prep.config.library.build()?;
        let iterations = r.prep.config.schedule.iterations;
        models.push(r.train("distill", &library, iterations, Stage::Distill)?);
    }

    if stop >= Stage::Sobol {
        // (iii) Sensitivity analysis and reduction, then (iv) refinement.
        let threshold = r.prep.config.sobol.threshold;
        let max_passes = r.prep.config.refinement.max_passes;
        let iterations = r.prep.config.refinement.iterations;
        for pass in 1..=max_passes {
            let current = models.last().ok_or(PipelineError::MissingStage {
                stage: Stage::Distill,
                dir: dir.clone(),
            })?;
            let (report, summary) = r.sobol(pass, current)?;
            if pass > 1 && summary.removed.is_empty() {
                sobol_reports.push(report);
                sobol_summaries.push(summary);
                break;
            }
            let reduction =
                reduce_library(&current.library, &report, threshold).map_err(stage_err(Stage::Sobol))?;
            json::write(&dir.join(format!("sobol-{pass}")).join("reduced_library.json"), &reduction.library)?;
            sobol_reports.push(report);
            sobol_summaries.push(summary);
            if stop < Stage::Refine {
                break;
            }
            let refined = r.train(&format!("refine-{pass}"), &reduction.library, iterations, Stage::Refine)?;
            models.push(refined);
        }
    }

    let metrics = finish_metrics(&r.prep, gp_metrics, &models, sobol_summaries);
    json::write(&dir.join("metrics.json"), &metrics)?;
    r.write_manifest()?;
    let gp = r.gp_posterior.take().ok_or(PipelineError::MissingStage {
        stage: Stage::Gp,
        dir: dir.clone(),
    })?;
    Ok(DiscoveryRun {
        config: r.prep.config,
        config_hash: r.prep.hash,
        dir,
        tests: r.prep.tests,
        grid: r.prep.grid,
        gp,
        models,
        sobol: sobol_reports,
        metrics,
        seeds: r.seeds.ledger,
        timings: r.timings,
    })
}

/// GP fit, distillation, Sobol' reduction and refinement.
pub fn run_discovery(config: RunConfig, opts: &RunOptions) -> Result<DiscoveryRun> {
    with_threads(opts.threads, || execute(config, Mode::Discover, opts))
}

/// GP fit and distillation of a fixed library.
pub fn run_calibration(config: RunConfig, opts: &RunOptions) -> Result<DiscoveryRun> {
    with_threads(opts.threads, || execute(config, Mode::Calibrate, opts))
}

/// A finished run directory reopened for metrics and plot export.
struct Reopened {
    prep: Prepared,
    manifest: Manifest,
    dir: PathBuf,
}

impl Reopened {
    fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(PipelineError::MissingStage {
                stage: Stage::Gp,
                dir: dir.to_path_buf(),
            });
        }
        let manifest: Manifest = json::read(&manifest_path)?;
        if !manifest.completed.iter().any(|s| s == "gp") {
            return Err(PipelineError::MissingStage {
                stage: Stage::Gp,
                dir: dir.to_path_buf(),
            });
        }
        let config: RunConfig = json::read(&dir.join("config.json"))?;
        let data = dir.join("data");
        let tests = read_dataset(&data.join("dataset.csv"), &data.join("dataset.json"))?;
        let prep = Prepared::new(config, tests)?;
        if prep.hash != manifest.config_hash {
            return Err(PipelineError::Config(format!(
                "config.json in {} does not match the manifest hash",
                dir.display()
            )));
        }
        Ok(Self {
            prep,
            manifest,
            dir: dir.to_path_buf(),
        })
    }

    /// Model stages in completion order with their flows.
    fn model_stages(&self) -> Result<Vec<(String, ModelLibrary, FlowModel)>> {
        self.manifest
            .completed
            .iter()
            .filter(|s| s.as_str() == "distill" || s.starts_with("refine-"))
            .map(|s| {
                let sub = self.dir.join(s);
                let library: ModelLibrary = json::read(&sub.join("library.json"))?;
                let ckpt: FlowCheckpoint = json::read(&sub.join("flow_final.json"))?;
                Ok((s.clone(), library, ckpt.restore()?))
            })
            .collect()
    }

    fn seed(&self, label: &str) -> Result<u64> {
        self.manifest.seeds.get(label).copied().ok_or_else(|| {
            PipelineError::Config(format!("manifest in {} lacks the `{label}` seed", self.dir.display()))
        })
    }
}

/// Recomputes `metrics.json` of a finished run from its saved artifacts.
pub fn recompute_metrics(dir: &Path, threads: Option<usize>) -> Result<RunMetrics> {
    with_threads(threads, || {
        let run = Reopened::open(dir)?;
        let gp = run.prep.gp()?;
        let gp_metrics = compute_metrics(&bands_from_posterior(&run.prep.grid, &gp.posterior), &run.prep.tests)
            .map_err(stage_err(Stage::Gp))?;
        let mut models = Vec::new();
        for (name, library, flow) in run.model_stages()? {
            let stage = if name == "distill" { Stage::Distill } else { Stage::Refine };
            let forward = run.prep.forward(&library, stage)?;
            let seed = run.seed(&format!("{name}.intervals"))?;
            let (m, _, _) = run.prep.model_metrics(&name, &forward, &flow, seed, stage)?;
            models.push(m);
        }
        let mut sobol = Vec::new();
        for s in run.manifest.completed.iter().filter(|s| s.starts_with("sobol-")) {
            let a: SobolArtifact = json::read(&run.dir.join(s).join("report.json"))?;
            let names = a.report.parameter_names.clone();
            sobol.push(SobolSummary {
                pass: a.pass,
                parameter_names: names,
                averaged: a.report.averaged.clone(),
                kept: a.kept_names,
                removed: a.removed_names,
            });
        }
        let metrics = RunMetrics {
            config_hash: run.prep.hash.clone(),
            seed: run.prep.config.seed,
            gp: gp_metrics,
            models,
            sobol,
        };
        json::write(&dir.join("metrics.json"), &metrics)?;
        Ok(metrics)
    })
}

/// Files written by [`export_plots`].
#[derive(Debug, Clone, Default)]
pub struct PlotExport {
    pub gp_functions: Vec<PathBuf>,
    pub model_functions: Vec<PathBuf>,
    pub parameter_samples: Option<PathBuf>,
    pub sobol_curves: Vec<PathBuf>,
}

/// Per-function tables for the GP and the final model, parameter samples
/// for corner plots and Sobol' curves, under `<run>/plots`.
pub fn export_plots(dir: &Path, threads: Option<usize>) -> Result<PlotExport> {
    with_threads(threads, || {
        let run = Reopened::open(dir)?;
        let out = dir.join("plots");
        let cfg = &run.prep.config;
        let mut export = PlotExport::default();

        let gp = run.prep.gp()?;
        let bands = bands_from_posterior(&run.prep.grid, &gp.posterior);
        let k = cfg.plot_samples;
        let draws = gp.posterior.sample_columns(k, &mut seeded(derive_seed(cfg.seed, "plots.gp")));
        export.gp_functions =
            write_function_tables(&out.join("gp"), &bands, Some(&draws), &run.prep.grid, &run.prep.test_ids)?;

        if let Some((name, library, flow)) = run.model_stages()?.pop() {
            let stage = if name == "distill" { Stage::Distill } else { Stage::Refine };
            let forward = run.prep.forward(&library, stage)?;
            let seed = run.seed(&format!("{name}.intervals"))?;
            let (_, samples, bands) = run.prep.model_metrics(&name, &forward, &flow, seed, stage)?;
            let shown = samples.functions.columns(0, k.min(samples.functions.ncols())).into_owned();
            export.model_functions = write_function_tables(
                &out.join("model"),
                &bands,
                Some(&shown),
                &run.prep.grid,
                &run.prep.test_ids,
            )?;
            let params = flow
                .sample(cfg.parameter_samples, &mut seeded(derive_seed(cfg.seed, "plots.parameters")))
                .map_err(stage_err(stage))?;
            let path = out.join("parameters.csv");
            write_parameter_samples(&path, &library.parameter_names(), &params.kappa)?;
            export.parameter_samples = Some(path);
        }

        for s in run.manifest.completed.iter().filter(|s| s.starts_with("sobol-")) {
            let src = run.dir.join(s).join("curves.csv");
            let dst = out.join(format!("{s}_curves.csv"));
            std::fs::copy(&src, &dst).map_err(|e| PipelineError::io(&src, e))?;
            export.sobol_curves.push(dst);
        }
        Ok(export)
    })
}
