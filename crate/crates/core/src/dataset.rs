//! Mechanical test data, discretization grids and the stacked function layout.

use alloc::{format, string::String, vec, vec::Vec};

use rand_distr::{Distribution, StandardNormal};

use crate::gp::ErrorModel;
use crate::mechanics::{
    deformation_filter, protocol_deformation, DeformationGradient, Frame, ModelLibrary, ObservationPoint,
    Protocol, StressComponent,
};
use crate::{rng, Error, Result};

/// Averaged measurements of one mechanical test.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanicalTest {
    id: String,
    protocol: Protocol,
    components: Vec<StressComponent>,
    controls: Vec<f64>,
    /// `stresses[q][d]` in kPa.
    stresses: Vec<Vec<f64>>,
}

impl MechanicalTest {
    pub fn new(
        id: impl Into<String>,
        protocol: Protocol,
        components: Vec<StressComponent>,
        controls: Vec<f64>,
        stresses: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        if components.is_empty() {
            return Err(Error::InvalidInput(format!("test `{id}` observes no stress component")));
        }
        let observable = protocol.observed_components();
        for c in &components {
            if !observable.contains(c) {
                return Err(Error::InvalidInput(format!(
                    "test `{id}`: protocol {protocol} does not observe {c}"
                )));
            }
        }
        if controls.is_empty() {
            return Err(Error::InvalidInput(format!("test `{id}` has no measurements")));
        }
        if let Some(w) = controls.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(format!(
                "test `{id}`: controls must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if controls.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("test `{id}` has non-finite controls")));
        }
        if stresses.len() != components.len() {
            return Err(Error::dim("stress columns", components.len(), stresses.len()));
        }
        for (q, col) in stresses.iter().enumerate() {
            if col.len() != controls.len() {
                return Err(Error::dim("stress rows", controls.len(), col.len()));
            }
            if let Some(d) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "test `{id}`: non-finite stress for {} at row {d}",
                    components[q]
                )));
            }
        }
        Ok(Self {
            id,
            protocol,
            components,
            controls,
            stresses,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn components(&self) -> &[StressComponent] {
        &self.components
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn stresses(&self, q: usize) -> &[f64] {
        &self.stresses[q]
    }

    pub fn n_d(&self) -> usize {
        self.controls.len()
    }

    pub fn n_q(&self) -> usize {
        self.components.len()
    }

    pub fn control_range(&self) -> (f64, f64) {
        (self.controls[0], self.controls[self.controls.len() - 1])
    }
}

/// Number of scalar stress functions over a set of tests.
pub fn function_count(tests: &[MechanicalTest]) -> usize {
    tests.iter().map(MechanicalTest::n_q).sum()
}

/// One contiguous (test, component) block of the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub test: usize,
    pub q: usize,
    pub component: StressComponent,
    pub offset: usize,
    pub len: usize,
}

/// Tests outer, components middle, grid points inner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedLayout {
    blocks: Vec<Block>,
    total: usize,
}

impl StackedLayout {
    /// Builds a layout from (component list, points) per test.
    pub fn new(per_test: &[(Vec<StressComponent>, usize)]) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (t, (comps, n)) in per_test.iter().enumerate() {
            for (q, c) in comps.iter().enumerate() {
                blocks.push(Block {
                    test: t,
                    q,
                    component: *c,
                    offset,
                    len: *n,
                });
                offset += n;
            }
        }
        Self {
            blocks,
            total: offset,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn n_tests(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.test + 1)
    }

    pub fn block(&self, test: usize, q: usize) -> Option<&Block> {
        self.blocks.iter().find(|b| b.test == test && b.q == q)
    }

    /// Flat position of (t, q, s).
    pub fn index(&self, test: usize, q: usize, s: usize) -> Option<usize> {
        self.block(test, q).filter(|b| s < b.len).map(|b| b.offset + s)
    }
}

/// A stacked vector f together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFunction {
    values: Vec<f64>,
    layout: StackedLayout,
}

impl StackedFunction {
    /// Stacks one value vector per layout block.
    pub fn stack(layout: &StackedLayout, blocks: &[Vec<f64>]) -> Result<Self> {
        if blocks.len() != layout.blocks().len() {
            return Err(Error::dim("stacked blocks", layout.blocks().len(), blocks.len()));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (b, v) in layout.blocks().iter().zip(blocks) {
            if v.len() != b.len {
                return Err(Error::InvalidInput(format!(
                    "block (t={}, q={}) expects {} values, got {}",
                    b.test, b.q, b.len, v.len()
                )));
            }
            values.extend_from_slice(v);
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn from_flat(layout: &StackedLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::dim("stacked vector", layout.len(), values.len()));
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &StackedLayout {
        &self.layout
    }

    /// Per-block views in layout order.
    pub fn unstack(&self) -> Vec<&[f64]> {
        self.layout
            .blocks()
            .iter()
            .map(|b| &self.values[b.offset..b.offset + b.len])
            .collect()
    }
}

/// Discretization of one test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestGrid {
    pub protocol: Protocol,
    pub components: Vec<StressComponent>,
    pub controls: Vec<f64>,
    pub deformations: Vec<DeformationGradient>,
    /// `inputs[q][s]`: reduced deformation of point s for component q.
    pub inputs: Vec<Vec<Vec<f64>>>,
}

/// Evenly spaced discretization points for every test plus the stacked layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionGrid {
    tests: Vec<TestGrid>,
    layout: StackedLayout,
}

/// `n` evenly spaced points on [lo, hi] with exact endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let mut v: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * (i as f64) / ((n - 1) as f64))
        .collect();
    v[n - 1] = hi;
    v
}

pub fn build_grid(tests: &[MechanicalTest], n_s: &[usize]) -> Result<FunctionGrid> {
    if tests.is_empty() {
        return Err(Error::InvalidInput("no tests to discretize".into()));
    }
    if n_s.len() != tests.len() {
        return Err(Error::dim("grid sizes", tests.len(), n_s.len()));
    }
    let mut grids = Vec::with_capacity(tests.len());
    for (test, &n) in tests.iter().zip(n_s) {
        if n < 2 {
            return Err(Error::Config(format!(
                "test `{}` needs at least 2 discretization points, got {n}",
                test.id()
            )));
        }
        let (lo, hi) = test.control_range();
        let controls = linspace(lo, hi, n);
        let deformations = controls
            .iter()
            .map(|c| protocol_deformation(test.protocol(), *c))
            .collect::<Result<Vec<_>>>()?;
        let inputs = test
            .components()
            .iter()
            .map(|comp| deformations.iter().map(|f| deformation_filter(comp, f)).collect())
            .collect::<Result<Vec<_>>>()?;
        grids.push(TestGrid {
            protocol: *test.protocol(),
            components: test.components().to_vec(),
            controls,
            deformations,
            inputs,
        });
    }
    let layout = StackedLayout::new(
        &grids
            .iter()
            .map(|g| (g.components.clone(), g.controls.len()))
            .collect::<Vec<_>>(),
    );
    Ok(FunctionGrid {
        tests: grids,
        layout,
    })
}

impl FunctionGrid {
    pub fn tests(&self) -> &[TestGrid] {
        &self.tests
    }

    pub fn layout(&self) -> &StackedLayout {
        &self.layout
    }

    pub fn n_s(&self) -> usize {
        self.layout.len()
    }

    /// Observation points for every stacked entry, in layout order.
    pub fn observation_points(&self, library: &ModelLibrary, frame: &Frame) -> Result<Vec<ObservationPoint>> {
        let mut out = Vec::with_capacity(self.n_s());
        for b in self.layout.blocks() {
            let g = &self.tests[b.test];
            for c in &g.controls {
                out.push(ObservationPoint::new(library, &g.protocol, *c, b.component, frame)?);
            }
        }
        Ok(out)
    }
}

/// Protocol and measurement controls of a synthetic test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestDesign {
    pub id: String,
    pub protocol: Protocol,
    pub controls: Vec<f64>,
}

impl TestDesign {
    pub fn new(id: impl Into<String>, protocol: Protocol, controls: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            protocol,
            controls,
        }
    }
}

/// Six simple-shear and five biaxial tests with 11 points each.
pub fn cardiac_designs() -> Vec<TestDesign> {
    let mut designs = Vec::new();
    for id in ["SS_sf", "SS_fs", "SS_nf", "SS_fn", "SS_ns", "SS_sn"] {
        if let Ok(p) = Protocol::parse(id, None) {
            designs.push(TestDesign::new(id, p, linspace(0.0, 0.5, 11)));
        }
    }
    for (rf, rn) in [(1.0, 1.0), (1.0, 0.75), (0.75, 1.0), (1.0, 0.5), (0.5, 1.0)] {
        designs.push(TestDesign::new(
            format!("BT_{rf}_{rn}"),
            Protocol::Biaxial {
                ratio_f: rf,
                ratio_n: rn,
            },
            linspace(1.0, 1.1, 11),
        ));
    }
    designs
}

/// Noise-free observed stress of a protocol component at one control value.
pub fn model_stress(
    library: &ModelLibrary,
    kappa: &[f64],
    protocol: &Protocol,
    component: StressComponent,
    control: f64,
    frame: &Frame,
) -> Result<f64> {
    ObservationPoint::new(library, protocol, control, component, frame)?
        .evaluate(library, kappa, None)
        .map(|e| e.value)
}

/// Synthetic tests: model stresses plus heteroskedastic Gaussian noise.
pub fn synthesize_dataset(
    library: &ModelLibrary,
    kappa: &[f64],
    designs: &[TestDesign],
    noise: &ErrorModel,
    frame: &Frame,
    seed: u64,
) -> Result<Vec<MechanicalTest>> {
    let mut rng = rng::seeded(seed);
    let mut tests = Vec::with_capacity(designs.len());
    for d in designs {
        let components = d.protocol.observed_components();
        let mut stresses = Vec::with_capacity(components.len());
        for comp in &components {
            let mut col = Vec::with_capacity(d.controls.len());
            for c in &d.controls {
                let clean = model_stress(library, kappa, &d.protocol, *comp, *c, frame)?;
                let z: f64 = StandardNormal.sample(&mut rng);
                col.push(clean + noise.std_dev(clean) * z);
            }
            stresses.push(col);
        }
        tests.push(MechanicalTest::new(
            d.id.clone(),
            d.protocol,
            components,
            d.controls.clone(),
            stresses,
        )?);
    }
    Ok(tests)
}
