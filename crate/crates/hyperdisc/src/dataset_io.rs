//! CSV measurements with a JSON sidecar describing each test.
//!
//! CSV columns are `test_id, control, stress_<component>...`; a test leaves
//! the cells of components it does not observe empty.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use hyperdisc_core::dataset::MechanicalTest;
use hyperdisc_core::mechanics::{Protocol, StressComponent};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarTest {
    pub id: String,
    /// Protocol identifier such as `UT`, `BT` or `SS_fs`.
    pub protocol: String,
    pub components: Vec<String>,
    /// Biaxial stretch ratio (λ_f*, λ_n*).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub tests: Vec<SidecarTest>,
}

const STRESS_PREFIX: &str = "stress_";

fn config_err(path: &Path, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{}: {msg}", path.display()))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_err(path, e))
}

/// Loads tests in sidecar order.
pub fn read_dataset(csv_path: &Path, sidecar_path: &Path) -> Result<Vec<MechanicalTest>> {
    let sidecar = read_sidecar(sidecar_path)?;
    let file = File::open(csv_path).map_err(|e| config_err(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| config_err(csv_path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(control_col)) = (col("test_id"), col("control")) else {
        return Err(config_err(csv_path, "header must contain `test_id` and `control`"));
    };

    struct Pending {
        controls: Vec<f64>,
        stresses: Vec<Vec<f64>>,
    }
    let mut pending: Vec<(Vec<StressComponent>, Vec<usize>, Pending)> = Vec::new();
    for t in &sidecar.tests {
        let mut comps = Vec::new();
        let mut cols = Vec::new();
        for c in &t.components {
            let comp: StressComponent = c.parse().map_err(|e| config_err(sidecar_path, e))?;
            let name = format!("{STRESS_PREFIX}{}", comp.name());
            let idx = col(&name).ok_or_else(|| config_err(csv_path, format!("missing column `{name}`")))?;
            comps.push(comp);
            cols.push(idx);
        }
        let n = comps.len();
        pending.push((
            comps,
            cols,
            Pending {
                controls: Vec::new(),
                stresses: vec![Vec::new(); n],
            },
        ));
    }

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| config_err(csv_path, e))?;
        let id = record.get(id_col).unwrap_or_default();
        let t = sidecar
            .tests
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| config_err(csv_path, format!("row {}: unknown test `{id}`", line + 2)))?;
        let parse = |k: usize, what: &str| -> Result<f64> {
            record
                .get(k)
                .unwrap_or_default()
                .parse::<f64>()
                .map_err(|e| config_err(csv_path, format!("row {}: bad {what}: {e}", line + 2)))
        };
        let control = parse(control_col, "control")?;
        let (comps, cols, p) = &mut pending[t];
        p.controls.push(control);
        for (q, k) in cols.iter().enumerate() {
            let v = parse(*k, &format!("stress_{}", comps[q].name()))?;
            p.stresses[q].push(v);
        }
    }

    sidecar
        .tests
        .iter()
        .zip(pending)
        .map(|(meta, (comps, _, p))| {
            let ratio = meta.ratio.map(|[f, n]| (f, n));
            let protocol = Protocol::parse(&meta.protocol, ratio).map_err(|e| config_err(sidecar_path, e))?;
            MechanicalTest::new(meta.id.clone(), protocol, comps, p.controls, p.stresses)
                .map_err(|e| config_err(csv_path, format!("test `{}`: {e}", meta.id)))
        })
        .collect()
}

pub fn sidecar_for(tests: &[MechanicalTest]) -> Sidecar {
    Sidecar {
        tests: tests
            .iter()
            .map(|t| SidecarTest {
                id: t.id().to_string(),
                protocol: t.protocol().id(),
                components: t.components().iter().map(StressComponent::name).collect(),
                ratio: t.protocol().ratio().map(|(f, n)| [f, n]),
            })
            .collect(),
    }
}

pub fn write_dataset(tests: &[MechanicalTest], csv_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut names = BTreeSet::new();
    for t in tests {
        for c in t.components() {
            names.insert(c.name());
        }
    }
    let names: Vec<String> = names.into_iter().collect();
    let csv_err = |source| PipelineError::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
    let mut header = vec!["test_id".to_string(), "control".to_string()];
    header.extend(names.iter().map(|n| format!("{STRESS_PREFIX}{n}")));
    w.write_record(&header).map_err(csv_err)?;
    for t in tests {
        for (k, c) in t.controls().iter().enumerate() {
            let mut row = vec![t.id().to_string(), c.to_string()];
            for n in &names {
                let cell = t
                    .components()
                    .iter()
                    .position(|comp| comp.name() == *n)
                    .map(|q| t.stresses(q)[k].to_string())
                    .unwrap_or_default();
                row.push(cell);
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| PipelineError::io(csv_path, e))?;
    json::write(sidecar_path, &sidecar_for(tests))
}
