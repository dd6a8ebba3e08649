//! Run configuration, named presets and config hashing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use hyperdisc_core::dataset::{cardiac_designs, linspace, TestDesign};
use hyperdisc_core::distill::{CriticConfig, TrainSchedule};
use hyperdisc_core::flow::FlowConfig;
use hyperdisc_core::gp::{ErrorModel, FitConfig};
use hyperdisc_core::mechanics::{ModelLibrary, Protocol};
use hyperdisc_core::sobol::SobolConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

/// Pipeline stage; `--stage X` runs every stage up to and including X.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gp,
    Distill,
    Sobol,
    Refine,
    All,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Gp => "gp",
            Stage::Distill => "distill",
            Stage::Sobol => "sobol",
            Stage::Refine => "refine",
            Stage::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LibraryKind {
    /// Mooney-Rivlin degree 3 plus eight Ogden terms (17 parameters).
    Isotropic,
    /// Invariant-based orthotropic library (30 parameters).
    Cann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub kind: LibraryKind,
    /// Outer coefficient labels to keep, e.g. `["c(1,0)", "c(0,1)"]`; all terms when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<String>>,
}

impl LibrarySpec {
    pub fn full(kind: LibraryKind) -> Self {
        Self { kind, terms: None }
    }

    pub fn build(&self) -> Result<ModelLibrary> {
        let base = match self.kind {
            LibraryKind::Isotropic => ModelLibrary::isotropic_default(),
            LibraryKind::Cann => ModelLibrary::anisotropic_cann(),
        };
        match &self.terms {
            None => Ok(base),
            Some(t) => {
                let labels: Vec<&str> = t.iter().map(String::as_str).collect();
                base.select(&labels).map_err(|e| PipelineError::Config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSpec {
    /// kPa.
    pub sigma_min: f64,
    /// Relative, e.g. 0.05 for 5%.
    pub sigma_r: f64,
}

impl ErrorSpec {
    pub fn build(&self) -> Result<ErrorModel> {
        ErrorModel::new(self.sigma_min, self.sigma_r).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub id: String,
    pub protocol: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<[f64; 2]>,
    /// Control range [min, max].
    pub range: [f64; 2],
    pub points: usize,
}

impl DesignSpec {
    pub fn build(&self) -> Result<TestDesign> {
        let protocol = Protocol::parse(&self.protocol, self.ratio.map(|[f, n]| (f, n)))
            .map_err(|e| PipelineError::Config(format!("design `{}`: {e}", self.id)))?;
        let [lo, hi] = self.range;
        if self.points < 2 || !(lo < hi) {
            return Err(PipelineError::Config(format!(
                "design `{}` needs at least 2 points on a non-empty range",
                self.id
            )));
        }
        Ok(TestDesign::new(self.id.clone(), protocol, linspace(lo, hi, self.points)))
    }

    fn from_design(d: &TestDesign) -> Self {
        Self {
            id: d.id.clone(),
            protocol: d.protocol.id(),
            ratio: d.protocol.ratio().map(|(f, n)| [f, n]),
            range: [d.controls[0], d.controls[d.controls.len() - 1]],
            points: d.controls.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Measurements on disk; relative paths resolve against the config file.
    Files { csv: PathBuf, sidecar: PathBuf },
    /// Data generated from a known model plus heteroskedastic noise.
    Synthetic {
        generator: LibrarySpec,
        /// Generator parameters by name; unlisted parameters are zero.
        kappa: BTreeMap<String, f64>,
        noise: ErrorSpec,
        designs: Vec<DesignSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Discretization points n_s^(t) for every test.
    pub points_per_test: usize,
    /// Per-test override, in dataset order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_test: Option<Vec<usize>>,
}

impl GridSpec {
    pub fn sizes(&self, n_tests: usize) -> Result<Vec<usize>> {
        match &self.per_test {
            Some(v) if v.len() != n_tests => Err(PipelineError::Config(format!(
                "grid.per_test lists {} sizes for {n_tests} tests",
                v.len()
            ))),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![self.points_per_test; n_tests]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSpec {
    pub fit: FitConfig,
    /// Multiplier applied to the fitted length scales, in (0, 1].
    pub length_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSpec {
    pub iterations: usize,
    /// Refinement passes. With more than one, Sobol' analysis is repeated on
    /// the refined flow and refinement stops once nothing else is removed.
    pub max_passes: usize,
}

/// Maximum number of refinement passes.
pub const MAX_REFINEMENT_PASSES: usize = 3;

/// Smallest sample count for percentile intervals.
pub const MIN_INTERVAL_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub library: LibrarySpec,
    pub grid: GridSpec,
    pub error_model: ErrorSpec,
    pub gp: GpSpec,
    pub flow: FlowConfig,
    pub critic: CriticConfig,
    pub schedule: TrainSchedule,
    pub refinement: RefinementSpec,
    pub sobol: SobolConfig,
    /// Flow samples behind the distilled-model intervals and metrics.
    pub interval_samples: usize,
    /// Function samples written per plot table.
    pub plot_samples: usize,
    /// Parameter samples written for corner plots.
    pub parameter_samples: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn cfg_err(e: impl fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let library = self.library.build()?;
        self.error_model.build()?;
        let too_small = match &self.grid.per_test {
            Some(v) => v.iter().any(|n| *n < 2),
            None => self.grid.points_per_test < 2,
        };
        if too_small {
            return Err(cfg_err("grids need at least 2 points per test"));
        }
        let f = self.gp.length_factor;
        if !(f > 0.0 && f <= 1.0) {
            return Err(cfg_err(format!("gp.length_factor must lie in (0, 1], got {f}")));
        }
        if !(self.gp.fit.learning_rate > 0.0 && self.gp.fit.initial_length_scale > 0.0) {
            return Err(cfg_err("gp.fit needs a positive learning rate and initial length scale"));
        }
        if self.flow.n_layers == 0 || self.flow.hidden_factor == 0 || !self.flow.initial_log_location.is_finite() {
            return Err(cfg_err("flow needs n_layers, hidden_factor ≥ 1 and a finite initial location"));
        }
        self.critic.validate().map_err(cfg_err)?;
        self.schedule.validate().map_err(cfg_err)?;
        if !(self.schedule.flow_optimizer.lr > 0.0) || !(self.critic.optimizer.lr > 0.0) {
            return Err(cfg_err("learning rates must be positive"));
        }
        self.sobol.validate().map_err(cfg_err)?;
        if !(1..=MAX_REFINEMENT_PASSES).contains(&self.refinement.max_passes) {
            return Err(cfg_err(format!(
                "refinement.max_passes must lie in 1..={MAX_REFINEMENT_PASSES}"
            )));
        }
        if self.interval_samples < MIN_INTERVAL_SAMPLES {
            return Err(cfg_err(format!(
                "interval_samples must be at least {MIN_INTERVAL_SAMPLES}, got {}",
                self.interval_samples
            )));
        }
        if let DataSource::Synthetic {
            generator,
            kappa,
            noise,
            designs,
        } = &self.data
        {
            let g = generator.build()?;
            let names = g.parameter_names();
            if let Some(k) = kappa.keys().find(|k| !names.contains(k)) {
                return Err(cfg_err(format!("generator has no parameter `{k}`")));
            }
            if kappa.values().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(cfg_err("generator parameters must be finite and non-negative"));
            }
            noise.build()?;
            if designs.is_empty() {
                return Err(cfg_err("synthetic data needs at least one design"));
            }
            for d in designs {
                d.build()?;
            }
        }
        if library.n_kappa() > hyperdisc_core::sobol::MAX_QMC_DIM {
            return Err(cfg_err("library too large for the Sobol' sequence"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).unwrap_or_default();
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Generator κ in library order.
    pub fn generator_kappa(library: &ModelLibrary, kappa: &BTreeMap<String, f64>) -> Vec<f64> {
        library
            .parameter_names()
            .iter()
            .map(|n| kappa.get(n).copied().unwrap_or(0.0))
            .collect()
    }
}

/// Hyperparameters shared by every preset before per-case overrides.
fn base(data: DataSource, library: LibrarySpec, name: &str) -> RunConfig {
    RunConfig {
        data,
        library,
        grid: GridSpec {
            points_per_test: 32,
            per_test: None,
        },
        error_model: ErrorSpec {
            sigma_min: 0.01,
            sigma_r: 0.05,
        },
        gp: GpSpec {
            fit: FitConfig::default(),
            length_factor: 1.0,
        },
        flow: FlowConfig::default(),
        critic: CriticConfig::default(),
        schedule: TrainSchedule::default(),
        refinement: RefinementSpec {
            iterations: 10_000,
            max_passes: 1,
        },
        sobol: SobolConfig::default(),
        interval_samples: 8192,
        plot_samples: 20,
        parameter_samples: 4096,
        seed: 0,
        output_dir: PathBuf::from("runs").join(name),
    }
}

fn files(stem: &str) -> DataSource {
    DataSource::Files {
        csv: PathBuf::from(format!("data/{stem}.csv")),
        sidecar: PathBuf::from(format!("data/{stem}.json")),
    }
}

fn isotropic_designs(ut: [f64; 2], ebt: [f64; 2], ps: [f64; 2]) -> Vec<DesignSpec> {
    [("UT", ut, 25), ("EBT", ebt, 14), ("PS", ps, 14)]
        .into_iter()
        .map(|(p, range, points)| DesignSpec {
            id: p.to_string(),
            protocol: p.to_string(),
            ratio: None,
            range,
            points,
        })
        .collect()
}

fn cardiac(config: &mut RunConfig) {
    config.gp.length_factor = 0.6;
    config.critic.lambda = 100.0;
    config.sobol.threshold = 0.01;
}

pub const PRESETS: [&str; 5] = [
    "treloar",
    "cardiac-synthetic",
    "cardiac-experimental",
    "desk-isotropic",
    "desk-calibration",
];

/// A named preset. `treloar` and `cardiac-experimental` expect the published
/// tables under `data/` next to the config.
pub fn preset(name: &str) -> Result<RunConfig> {
    let noise = ErrorSpec {
        sigma_min: 0.01,
        sigma_r: 0.05,
    };
    match name {
        "treloar" => {
            let mut c = base(files("treloar"), LibrarySpec::full(LibraryKind::Isotropic), name);
            c.gp.length_factor = 0.8;
            c.critic.lambda = 10.0;
            c.sobol.threshold = 1e-4;
            Ok(c)
        }
        "cardiac-synthetic" => {
            let generator = LibrarySpec {
                kind: LibraryKind::Cann,
                terms: Some(["c(2,7)", "c(2,12)", "c(2,20)", "c(2,24)"].map(String::from).to_vec()),
            };
            let kappa = [
                ("c(2,7)", 5.162),
                ("c(2,12)", 0.081),
                ("w(1,12)", 21.151),
                ("c(2,20)", 0.315),
                ("w(1,20)", 4.371),
                ("c(2,24)", 0.486),
                ("w(1,24)", 0.508),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            let designs = cardiac_designs().iter().map(DesignSpec::from_design).collect();
            let data = DataSource::Synthetic {
                generator,
                kappa,
                noise,
                designs,
            };
            let mut c = base(data, LibrarySpec::full(LibraryKind::Cann), name);
            cardiac(&mut c);
            Ok(c)
        }
        "cardiac-experimental" => {
            let mut c = base(files("cardiac"), LibrarySpec::full(LibraryKind::Cann), name);
            cardiac(&mut c);
            Ok(c)
        }
        "desk-isotropic" => {
            let data = DataSource::Synthetic {
                generator: LibrarySpec {
                    kind: LibraryKind::Isotropic,
                    terms: Some(vec!["c(0,1)".into(), "c(1,0)".into()]),
                },
                kappa: [("c(1,0)".to_string(), 0.3), ("c(0,1)".to_string(), 0.1)].into_iter().collect(),
                noise,
                designs: isotropic_designs([1.0, 3.0], [1.0, 2.0], [1.0, 2.5]),
            };
            let mut c = base(data, LibrarySpec::full(LibraryKind::Isotropic), name);
            desk_training(&mut c);
            c.gp.length_factor = 0.4;
            c.grid.points_per_test = 16;
            c.schedule.iterations = 2000;
            c.refinement.iterations = 1000;
            Ok(c)
        }
        "desk-calibration" => {
            let nh = LibrarySpec {
                kind: LibraryKind::Isotropic,
                terms: Some(vec!["c(1,0)".into()]),
            };
            let data = DataSource::Synthetic {
                generator: nh.clone(),
                kappa: [("c(1,0)".to_string(), 0.5)].into_iter().collect(),
                noise,
                designs: isotropic_designs([1.0, 3.0], [1.0, 2.0], [1.0, 2.5]),
            };
            let mut c = base(data, nh, name);
            desk_training(&mut c);
            c.gp.length_factor = 0.8;
            c.grid.points_per_test = 16;
            c.schedule.iterations = 1500;
            c.refinement.iterations = 0;
            Ok(c)
        }
        other => Err(PipelineError::Config(format!(
            "unknown preset `{other}` (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Desk-scale runs are three orders of magnitude shorter than the full
/// schedule, so the flow starts near small parameters and decays its step
/// size quickly.
fn desk_training(c: &mut RunConfig) {
    c.flow.initial_log_location = -2.0;
    c.schedule.flow_optimizer.lr = 1e-3;
    c.schedule.flow_optimizer.decay = 0.999;
    c.critic.optimizer.lr = 1e-3;
    c.schedule.checkpoint_every = 500;
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Resolves `--preset` and `--config` into a validated config. Relative
/// dataset paths in the file resolve against its directory; preset paths
/// resolve against the working directory.
pub fn load(config_path: Option<&Path>, preset_name: Option<&str>) -> Result<RunConfig> {
    let mut value = match preset_name {
        Some(p) => serde_json::to_value(preset(p)?).map_err(cfg_err)?,
        None => Value::Object(Default::default()),
    };
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // Data paths from the file are relative to the file, not the preset.
        let mut resolved = patch;
        if let Some(Value::Object(data)) = resolved.get_mut("data") {
            let dir = path.parent().unwrap_or(Path::new("."));
            for key in ["csv", "sidecar"] {
                if let Some(Value::String(s)) = data.get_mut(key) {
                    let p = Path::new(s.as_str());
                    if p.is_relative() {
                        *s = dir.join(p).to_string_lossy().into_owned();
                    }
                }
            }
        }
        merge(&mut value, resolved);
    } else if preset_name.is_none() {
        return Err(cfg_err("either --config or --preset is required"));
    }
    let config: RunConfig = serde_json::from_value(value).map_err(cfg_err)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for p in PRESETS {
            let c = preset(p).unwrap();
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn merge_is_recursive() {
        let mut a = serde_json::json!({"x": {"y": 1, "z": 2}, "w": 3});
        merge(&mut a, serde_json::json!({"x": {"y": 5}, "v": 0}));
        assert_eq!(a, serde_json::json!({"x": {"y": 5, "z": 2}, "w": 3, "v": 0}));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = preset("desk-isotropic").unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn cardiac_generator_covers_four_terms() {
        let c = preset("cardiac-synthetic").unwrap();
        let DataSource::Synthetic { generator, kappa, designs, .. } = &c.data else {
            panic!("synthetic preset")
        };
        let lib = generator.build().unwrap();
        assert_eq!(lib.n_kappa(), 7);
        assert!(RunConfig::generator_kappa(&lib, kappa).iter().all(|v| *v > 0.0));
        assert_eq!(designs.len(), 11);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = preset("desk-isotropic").unwrap();
        c.gp.length_factor = 1.5;
        assert!(c.validate().is_err());
        let mut c = preset("desk-isotropic").unwrap();
        c.interval_samples = 10;
        assert!(c.validate().is_err());
        let mut c = preset("desk-isotropic").unwrap();
        c.refinement.max_passes = 4;
        assert!(c.validate().is_err());
    }
}
