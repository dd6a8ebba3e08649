//! On-disk artifacts: checkpoints, training history, posterior summaries,
//! Sobol' tables and plot data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperdisc_core::dataset::FunctionGrid;
use hyperdisc_core::diffnum::{DenseNetwork, NamedTensor, Parameterized, Tensor};
use hyperdisc_core::distill::{HistoryRecord, TrainObserver};
use hyperdisc_core::flow::{FlowConfig, FlowModel, LOG_CLAMP};
use hyperdisc_core::gp::{GpStage, Z95};
use hyperdisc_core::metrics::Band;
use hyperdisc_core::rng::seeded;
use hyperdisc_core::sobol::SobolReport;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::json;

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// Seed of the stream that produced the artifact.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub provenance: Provenance,
    pub iteration: usize,
    pub n_kappa: usize,
    pub n_layers: usize,
    pub hidden_factor: usize,
    pub permutation: Vec<usize>,
    /// Bounds on log κ.
    pub log_clamp: [f64; 2],
    pub parameter_names: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl FlowCheckpoint {
    pub fn capture(
        flow: &FlowModel,
        config: &FlowConfig,
        parameter_names: Vec<String>,
        iteration: usize,
        provenance: Provenance,
    ) -> Self {
        Self {
            provenance,
            iteration,
            n_kappa: flow.dim(),
            n_layers: flow.n_layers(),
            hidden_factor: config.hidden_factor,
            permutation: flow.permutation().to_vec(),
            log_clamp: [-LOG_CLAMP, LOG_CLAMP],
            parameter_names,
            tensors: flow.named_tensors(),
        }
    }

    /// Rebuilds the flow; the initialization draw is overwritten by the
    /// stored tensors.
    pub fn restore(&self) -> Result<FlowModel> {
        let config = FlowConfig {
            n_layers: self.n_layers,
            hidden_factor: self.hidden_factor,
            ..FlowConfig::default()
        };
        let mut flow = FlowModel::new(self.n_kappa, &config, &mut seeded(0))?;
        if flow.permutation() != self.permutation.as_slice() {
            return Err(PipelineError::Config("checkpoint permutation does not match the flow".into()));
        }
        flow.load_named(&self.tensors)?;
        Ok(flow)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticCheckpoint {
    pub provenance: Provenance,
    pub iteration: usize,
    pub tensors: Vec<NamedTensor>,
}

/// Writes history rows as they arrive and checkpoints at the schedule's cadence.
pub struct RunObserver {
    dir: PathBuf,
    history: csv::Writer<BufWriter<File>>,
    history_path: PathBuf,
    start: Instant,
    flow_config: FlowConfig,
    names: Vec<String>,
    provenance: Provenance,
    /// Iteration of the most recent checkpoint.
    pub last_checkpoint: Option<usize>,
}

pub const HISTORY_HEADER: [&str; 9] = [
    "iteration",
    "wasserstein",
    "critic_objective",
    "penalty",
    "flow_lr",
    "critic_grad_norm",
    "flow_grad_norm",
    "clamped",
    "wall_time_s",
];

impl RunObserver {
    pub fn new(dir: &Path, flow_config: FlowConfig, names: Vec<String>, provenance: Provenance) -> Result<Self> {
        let ckpt = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt).map_err(|e| PipelineError::io(&ckpt, e))?;
        let history_path = dir.join("history.csv");
        let file = File::create(&history_path).map_err(|e| PipelineError::io(&history_path, e))?;
        let mut history = csv::Writer::from_writer(BufWriter::new(file));
        history.write_record(HISTORY_HEADER).map_err(|source| PipelineError::Csv {
            path: history_path.clone(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            history,
            history_path,
            start: Instant::now(),
            flow_config,
            names,
            provenance,
            last_checkpoint: None,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.history.flush().map_err(|e| PipelineError::io(&self.history_path, e))
    }

    fn core_err(e: PipelineError) -> hyperdisc_core::Error {
        hyperdisc_core::Error::InvalidInput(e.to_string())
    }
}

impl TrainObserver for RunObserver {
    fn on_history(&mut self, r: &HistoryRecord) -> hyperdisc_core::Result<()> {
        let row = [
            r.iteration.to_string(),
            r.wasserstein.to_string(),
            r.critic_objective.to_string(),
            r.penalty.to_string(),
            r.flow_lr.to_string(),
            r.critic_grad_norm.to_string(),
            r.flow_grad_norm.to_string(),
            r.clamped.to_string(),
            format!("{:.3}", self.start.elapsed().as_secs_f64()),
        ];
        self.history
            .write_record(&row)
            .and_then(|_| self.history.flush().map_err(csv::Error::from))
            .map_err(|source| {
                Self::core_err(PipelineError::Csv {
                    path: self.history_path.clone(),
                    source,
                })
            })
    }

    fn on_checkpoint(&mut self, iteration: usize, flow: &FlowModel, critic: &DenseNetwork) -> hyperdisc_core::Result<()> {
        let ckpt = self.dir.join("checkpoints");
        let f = FlowCheckpoint::capture(flow, &self.flow_config, self.names.clone(), iteration, self.provenance.clone());
        json::write(&ckpt.join(format!("flow_{iteration:06}.json")), &f).map_err(Self::core_err)?;
        let c = CriticCheckpoint {
            provenance: self.provenance.clone(),
            iteration,
            tensors: critic.named_tensors(),
        };
        json::write(&ckpt.join(format!("critic_{iteration:06}.json")), &c).map_err(Self::core_err)?;
        self.last_checkpoint = Some(iteration);
        Ok(())
    }
}

/// GP stage summary: hyperparameters and the pointwise posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub provenance: Provenance,
    pub length_factor: f64,
    pub models: Vec<GpModelSummary>,
    pub blocks: Vec<BlockSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelSummary {
    pub component: String,
    /// Shrunk length scales on normalized inputs.
    pub length_scales: Vec<f64>,
    pub output_scale: f64,
    pub lml: f64,
    pub initial_lml: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSummary {
    pub test_id: String,
    pub component: String,
    pub controls: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn posterior_summary(
    stage: &GpStage,
    grid: &FunctionGrid,
    test_ids: &[String],
    length_factor: f64,
    provenance: Provenance,
) -> PosteriorSummary {
    let models = stage
        .models
        .iter()
        .zip(&stage.fits)
        .map(|(m, f)| GpModelSummary {
            component: m.component().name(),
            length_scales: m.params().length_scales().to_vec(),
            output_scale: m.params().output_scale(),
            lml: f.lml,
            initial_lml: f.initial_lml,
            jitter: m.training_jitter(),
        })
        .collect();
    let blocks = grid
        .layout()
        .blocks()
        .iter()
        .zip(stage.posterior.blocks())
        .map(|(b, p)| {
            let (lower, upper) = p.interval(Z95);
            BlockSummary {
                test_id: test_ids[b.test].clone(),
                component: b.component.name(),
                controls: grid.tests()[b.test].controls.clone(),
                mean: p.mean.iter().copied().collect(),
                std_dev: p.std_dev(),
                lower,
                upper,
            }
        })
        .collect();
    PosteriorSummary {
        provenance,
        length_factor,
        models,
        blocks,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a table from a header and stringified rows.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let err = |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SobolArtifact {
    pub provenance: Provenance,
    pub pass: usize,
    /// Averaged indices clipped to the display range; raw values are in `report`.
    pub averaged_clipped: Vec<f64>,
    pub kept_names: Vec<String>,
    pub removed_names: Vec<String>,
    pub report: SobolReport,
}

/// JSON report, averaged table and deformation-resolved curves.
pub fn write_sobol(dir: &Path, artifact: &SobolArtifact, grid: &FunctionGrid, test_ids: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    json::write(&dir.join("report.json"), artifact)?;
    let r = &artifact.report;
    let clipped = &artifact.averaged_clipped;
    write_table(
        &dir.join("indices.csv"),
        &["parameter", "total_index", "total_index_clipped", "kept"].map(String::from),
        (0..r.n_kappa()).map(|i| {
            vec![
                r.parameter_names[i].clone(),
                r.averaged[i].to_string(),
                clipped[i].to_string(),
                r.kept.contains(&i).to_string(),
            ]
        }),
    )?;
    let mut header = ["test_id", "component", "control", "degenerate"].map(String::from).to_vec();
    header.extend(r.parameter_names.iter().cloned());
    let mut rows = Vec::new();
    for b in grid.layout().blocks() {
        let controls = &grid.tests()[b.test].controls;
        for (s, c) in controls.iter().enumerate() {
            let k = b.offset + s;
            let mut row = vec![
                test_ids[b.test].clone(),
                b.component.name(),
                c.to_string(),
                r.degenerate[k].to_string(),
            ];
            row.extend(r.per_point[k].iter().map(f64::to_string));
            rows.push(row);
        }
    }
    write_table(&dir.join("curves.csv"), &header, rows)
}

/// One CSV per function: grid, mean, interval and `samples` function draws.
pub fn write_function_tables(
    dir: &Path,
    bands: &[Band],
    samples: Option<&Tensor>,
    grid: &FunctionGrid,
    test_ids: &[String],
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for band in bands {
        let block = grid
            .layout()
            .block(band.test, band.q)
            .ok_or_else(|| PipelineError::Config("band outside the grid layout".into()))?;
        let name = format!("{}_{}.csv", test_ids[band.test], block.component.name());
        let path = dir.join(name);
        let k = samples.map_or(0, |s| s.ncols());
        let mut header = ["control", "mean", "lower", "upper"].map(String::from).to_vec();
        header.extend((0..k).map(|j| format!("sample_{j}")));
        let rows = (0..band.controls.len()).map(|s| {
            let mut row = vec![
                band.controls[s].to_string(),
                band.mean[s].to_string(),
                band.lower[s].to_string(),
                band.upper[s].to_string(),
            ];
            if let Some(m) = samples {
                row.extend((0..k).map(|j| m[(block.offset + s, j)].to_string()));
            }
            row
        });
        write_table(&path, &header, rows)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parameter sample table (one row per sample) for corner plots.
pub fn write_parameter_samples(path: &Path, names: &[String], kappa: &Tensor) -> Result<()> {
    write_table(
        path,
        names,
        (0..kappa.nrows()).map(|i| (0..kappa.ncols()).map(|j| kappa[(i, j)].to_string()).collect()),
    )
}

/// Convenience for `BufWriter` text files.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| PipelineError::io(path, e))?;
    w.flush().map_err(|e| PipelineError::io(path, e))
}
