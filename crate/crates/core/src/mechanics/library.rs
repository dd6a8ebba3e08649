use alloc::{format, string::String, vec::Vec};

use super::kinematics::{pair_slot, Axis, InvariantGradients, Invariants, Mat3};
use crate::{num, Error, Result};

/// Largest exponent argument evaluated before saturating.
pub const EXP_CLAMP: f64 = 30.0;

/// Scalar argument g of a CANN-style term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Argument {
    /// I1 − 3.
    I1,
    /// I2 − 3.
    I2,
    /// Ī4 − 1 with Ī4 = max{I4, 1}.
    I4Bar(Axis),
    /// I8 for a pair of directions.
    I8(Axis, Axis),
}

impl Argument {
    fn value(self, inv: &Invariants) -> f64 {
        match self {
            Argument::I1 => inv.i1 - 3.0,
            Argument::I2 => inv.i2 - 3.0,
            Argument::I4Bar(a) => inv.i4_bar(a) - 1.0,
            Argument::I8(a, b) => inv.i8(a, b),
        }
    }

    fn gradient(self, inv: &Invariants, g: &InvariantGradients) -> Mat3 {
        match self {
            Argument::I1 => g.d_i1,
            Argument::I2 => g.d_i2,
            Argument::I4Bar(a) => {
                if inv.i4(a) > 1.0 {
                    g.d_i4[a.index()]
                } else {
                    Mat3::zeros()
                }
            }
            Argument::I8(a, b) => g.d_i8[pair_slot(a, b)],
        }
    }

    fn label(self) -> String {
        match self {
            Argument::I1 => "I1".into(),
            Argument::I2 => "I2".into(),
            Argument::I4Bar(a) => format!("I4{}", a.letter()),
            Argument::I8(a, b) => format!("I8{}{}", a.letter(), b.letter()),
        }
    }
}

/// Functional form of a single strain-energy term φ.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TermForm {
    /// (I1 − 3)^m (I2 − 3)^k.
    MooneyRivlin { m: u32, k: u32 },
    /// Σ λ_i^α − 3.
    Ogden { alpha: f64 },
    /// g^p.
    Power { arg: Argument, power: u32 },
    /// exp(w g) − 1.
    ExpLinear { arg: Argument },
    /// exp(w g²) − 1.
    ExpSquare { arg: Argument },
}

impl TermForm {
    pub fn has_inner_parameter(&self) -> bool {
        matches!(self, TermForm::ExpLinear { .. } | TermForm::ExpSquare { .. })
    }

    fn description(&self) -> String {
        match self {
            TermForm::MooneyRivlin { m, k } => format!("MR({m},{k})"),
            TermForm::Ogden { alpha } => format!("Ogden({alpha})"),
            TermForm::Power { arg, power } => format!("{}-pow{power}", arg.label()),
            TermForm::ExpLinear { arg } => format!("{}-exp", arg.label()),
            TermForm::ExpSquare { arg } => format!("{}-sq-exp", arg.label()),
        }
    }
}

/// One library term c φ(w; F).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TermSpec {
    /// Label of the outer coefficient, e.g. `c(1,0)` or `c(2,12)`.
    pub label: String,
    /// Label of the inner parameter, e.g. `w(1,12)`.
    pub inner_label: Option<String>,
    pub form: TermForm,
    /// Position of c in κ.
    pub outer_index: usize,
    /// Position of w in κ.
    pub inner_index: Option<usize>,
}

impl TermSpec {
    pub fn identifier(&self) -> String {
        self.form.description()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LibraryKind {
    IsotropicMrOgden,
    AnisotropicCann,
}

/// Ordered set of strain-energy terms parameterised by κ.
///
/// κ stores every outer coefficient first (in term order) followed by the
/// inner parameters of the exponential terms (in term order).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelLibrary {
    kind: LibraryKind,
    terms: Vec<TermSpec>,
    n_kappa: usize,
}

/// Value and F-derivative of one term, plus derivatives w.r.t. its inner parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TermEval {
    pub value: f64,
    pub d_f: Mat3,
    pub value_dw: f64,
    pub d_f_dw: Mat3,
    pub clamped: bool,
}

/// Term prototype: form and labels before indices are assigned.
type Proto = (TermForm, String, Option<String>);

impl ModelLibrary {
    fn from_protos(kind: LibraryKind, protos: Vec<Proto>) -> Result<Self> {
        let n_outer = protos.len();
        let mut next_inner = n_outer;
        let mut terms = Vec::with_capacity(n_outer);
        for (k, (form, label, inner_label)) in protos.into_iter().enumerate() {
            if let TermForm::Ogden { alpha } = form {
                if alpha == 0.0 || alpha == 2.0 || alpha == -2.0 {
                    return Err(Error::Config(format!(
                        "Ogden exponent {alpha} duplicates a Mooney-Rivlin term or vanishes"
                    )));
                }
            }
            if form.has_inner_parameter() != inner_label.is_some() {
                return Err(Error::Config(format!("term {label} has inconsistent inner parameter")));
            }
            let inner_index = inner_label.as_ref().map(|_| {
                next_inner += 1;
                next_inner - 1
            });
            terms.push(TermSpec {
                label,
                inner_label,
                form,
                outer_index: k,
                inner_index,
            });
        }
        if terms.is_empty() {
            return Err(Error::Config("model library must contain at least one term".into()));
        }
        Ok(Self {
            kind,
            terms,
            n_kappa: next_inner,
        })
    }

    /// Mooney-Rivlin terms up to total degree `mr_degree` plus Ogden terms.
    pub fn isotropic(mr_degree: u32, ogden_exponents: &[f64]) -> Result<Self> {
        let mut protos: Vec<Proto> = Vec::new();
        for degree in 1..=mr_degree {
            for m in 0..=degree {
                let k = degree - m;
                protos.push((TermForm::MooneyRivlin { m, k }, format!("c({m},{k})"), None));
            }
        }
        for &alpha in ogden_exponents {
            protos.push((TermForm::Ogden { alpha }, format!("c({alpha})"), None));
        }
        Self::from_protos(LibraryKind::IsotropicMrOgden, protos)
    }

    /// Isotropic library of degree 3 with exponents {−5, −4, −3, −1, 1, 3, 4, 5}.
    pub fn isotropic_default() -> Self {
        Self::isotropic(3, &[-5.0, -4.0, -3.0, -1.0, 1.0, 3.0, 4.0, 5.0])
            .unwrap_or_else(|_| unreachable!("default library is valid"))
    }

    /// The 30-parameter invariant-based orthotropic library.
    pub fn anisotropic_cann() -> Self {
        let mut protos: Vec<Proto> = Vec::new();
        let mut push = |idx: u32, form: TermForm| {
            let inner = form.has_inner_parameter().then(|| format!("w(1,{idx})"));
            protos.push((form, format!("c(2,{idx})"), inner));
        };
        for (base, arg) in [(1, Argument::I1), (5, Argument::I2)] {
            push(base, TermForm::Power { arg, power: 1 });
            push(base + 1, TermForm::ExpLinear { arg });
            push(base + 2, TermForm::Power { arg, power: 2 });
            push(base + 3, TermForm::ExpSquare { arg });
        }
        for (base, axis) in [(11, Axis::F), (15, Axis::S), (19, Axis::N)] {
            let arg = Argument::I4Bar(axis);
            push(base, TermForm::Power { arg, power: 2 });
            push(base + 1, TermForm::ExpSquare { arg });
        }
        for (base, (a, b)) in [(23, (Axis::F, Axis::S)), (27, (Axis::F, Axis::N)), (31, (Axis::S, Axis::N))] {
            let arg = Argument::I8(a, b);
            push(base, TermForm::Power { arg, power: 2 });
            push(base + 1, TermForm::ExpSquare { arg });
        }
        Self::from_protos(LibraryKind::AnisotropicCann, protos)
            .unwrap_or_else(|_| unreachable!("CANN library is valid"))
    }

    /// Library restricted to the terms whose outer labels are listed, in
    /// the original order.
    pub fn select(&self, outer_labels: &[&str]) -> Result<Self> {
        for l in outer_labels {
            if !self.terms.iter().any(|t| t.label == *l) {
                return Err(Error::Config(format!("unknown library parameter `{l}`")));
            }
        }
        let keep: Vec<bool> = self
            .terms
            .iter()
            .map(|t| outer_labels.contains(&t.label.as_str()))
            .collect();
        self.retain_terms(&keep)
    }

    /// Library keeping the terms flagged in `keep` (one flag per term).
    pub fn retain_terms(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.terms.len() {
            return Err(Error::dim("term mask", self.terms.len(), keep.len()));
        }
        let protos = self
            .terms
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(t, _)| (t.form, t.label.clone(), t.inner_label.clone()))
            .collect();
        Self::from_protos(self.kind, protos)
    }

    pub fn kind(&self) -> LibraryKind {
        self.kind
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn n_kappa(&self) -> usize {
        self.n_kappa
    }

    /// Parameter names in κ order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.terms.iter().map(|t| t.label.clone()).collect();
        names.extend(self.terms.iter().filter_map(|t| t.inner_label.clone()));
        names
    }

    /// Term that owns κ index `p`.
    pub fn term_of_parameter(&self, p: usize) -> Option<usize> {
        self.terms
            .iter()
            .position(|t| t.outer_index == p || t.inner_index == Some(p))
    }

    pub fn needs_principal_stretches(&self) -> bool {
        self.terms
            .iter()
            .any(|t| matches!(t.form, TermForm::Ogden { .. }))
    }

    pub(crate) fn check_kappa(&self, kappa: &[f64]) -> Result<()> {
        if kappa.len() != self.n_kappa {
            return Err(Error::dim("kappa", self.n_kappa, kappa.len()));
        }
        if let Some(v) = kappa.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite material parameter {v}")));
        }
        Ok(())
    }

    pub(crate) fn inner(&self, term: &TermSpec, kappa: &[f64]) -> f64 {
        term.inner_index.map_or(0.0, |i| kappa[i])
    }
}

/// Energy of one term (without its outer coefficient).
pub(crate) fn term_value(form: &TermForm, w: f64, inv: &Invariants) -> (f64, bool) {
    match *form {
        TermForm::MooneyRivlin { m, k } => (
            num::powi(inv.i1 - 3.0, m as i32) * num::powi(inv.i2 - 3.0, k as i32),
            false,
        ),
        TermForm::Ogden { alpha } => (
            inv.principal_stretches
                .iter()
                .map(|l| num::pow(*l, alpha))
                .sum::<f64>()
                - 3.0,
            false,
        ),
        TermForm::Power { arg, power } => (num::powi(arg.value(inv), power as i32), false),
        TermForm::ExpLinear { arg } => {
            let (e, c) = clamped_exp(w * arg.value(inv));
            (e - 1.0, c)
        }
        TermForm::ExpSquare { arg } => {
            let g = arg.value(inv);
            let (e, c) = clamped_exp(w * g * g);
            (e - 1.0, c)
        }
    }
}

/// Exponential with its argument capped at [`EXP_CLAMP`].
pub(crate) fn clamped_exp(t: f64) -> (f64, bool) {
    if t > EXP_CLAMP {
        (num::exp(EXP_CLAMP), true)
    } else {
        (num::exp(t), false)
    }
}

/// Full evaluation of a term including derivatives. The clamp caps the
/// exponential factor only; derivatives keep the unclamped chain rule so that
/// saturated states still produce a restoring gradient.
pub(crate) fn term_eval(
    form: &TermForm,
    w: f64,
    inv: &Invariants,
    grads: &InvariantGradients,
    f: &Mat3,
    diagonal: bool,
) -> Result<TermEval> {
    let mut out = TermEval {
        value: 0.0,
        d_f: Mat3::zeros(),
        value_dw: 0.0,
        d_f_dw: Mat3::zeros(),
        clamped: false,
    };
    match *form {
        TermForm::MooneyRivlin { m, k } => {
            let (a, b) = (inv.i1 - 3.0, inv.i2 - 3.0);
            out.value = num::powi(a, m as i32) * num::powi(b, k as i32);
            if m > 0 {
                out.d_f += (m as f64 * num::powi(a, m as i32 - 1) * num::powi(b, k as i32)) * grads.d_i1;
            }
            if k > 0 {
                out.d_f += (k as f64 * num::powi(a, m as i32) * num::powi(b, k as i32 - 1)) * grads.d_i2;
            }
        }
        TermForm::Ogden { alpha } => {
            if !diagonal {
                return Err(Error::UnsupportedKinematics(
                    "Ogden terms need a diagonal deformation gradient".into(),
                ));
            }
            out.value = term_value(form, w, inv).0;
            for i in 0..3 {
                out.d_f[(i, i)] = alpha * num::pow(f[(i, i)], alpha - 1.0);
            }
        }
        TermForm::Power { arg, power } => {
            let g = arg.value(inv);
            out.value = num::powi(g, power as i32);
            out.d_f = (power as f64 * num::powi(g, power as i32 - 1)) * arg.gradient(inv, grads);
        }
        TermForm::ExpLinear { arg } => {
            let g = arg.value(inv);
            let dg = arg.gradient(inv, grads);
            let (e, c) = clamped_exp(w * g);
            out.value = e - 1.0;
            out.clamped = c;
            out.d_f = (w * e) * dg;
            out.value_dw = g * e;
            out.d_f_dw = (e * (1.0 + w * g)) * dg;
        }
        TermForm::ExpSquare { arg } => {
            let g = arg.value(inv);
            let dg = arg.gradient(inv, grads);
            let (e, c) = clamped_exp(w * g * g);
            out.value = e - 1.0;
            out.clamped = c;
            out.d_f = (2.0 * w * g * e) * dg;
            out.value_dw = g * g * e;
            out.d_f_dw = (2.0 * g * e * (1.0 + w * g * g)) * dg;
        }
    }
    Ok(out)
}
