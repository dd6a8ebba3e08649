use alloc::vec::Vec;

use super::kinematics::{invariants_of, DeformationGradient, Frame, InvariantGradients, Invariants, Mat3};
use super::library::{term_eval, term_value, ModelLibrary};
use super::protocol::{protocol_deformation, PressureRule, Protocol, StressComponent, StressMeasure};
use crate::{Error, Result};

/// A computed value plus whether any exponential argument saturated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation<T> {
    pub value: T,
    pub clamped: bool,
}

/// Strain energy density W̄(κ; F) in kPa.
pub fn sef_value(library: &ModelLibrary, kappa: &[f64], inv: &Invariants) -> Result<Evaluation<f64>> {
    library.check_kappa(kappa)?;
    let mut total = 0.0;
    let mut clamped = false;
    for term in library.terms() {
        let (v, c) = term_value(&term.form, library.inner(term, kappa), inv);
        total += kappa[term.outer_index] * v;
        clamped |= c;
    }
    Ok(Evaluation {
        value: total,
        clamped,
    })
}

/// ∂W̄/∂F together with the pressure that enforces a boundary condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressState {
    pub f: Mat3,
    pub dw_df: Mat3,
    pub pressure: f64,
}

impl StressState {
    pub fn with_pressure(mut self, p: f64) -> Self {
        self.pressure = p;
        self
    }

    /// P = ∂W̄/∂F − p F^{-T}.
    pub fn first_piola(&self) -> Mat3 {
        let f_inv_t = self.f.try_inverse().unwrap_or_else(Mat3::identity).transpose();
        self.dw_df - self.pressure * f_inv_t
    }

    /// σ = ∂W̄/∂F Fᵀ − p I (J = 1).
    pub fn cauchy(&self) -> Mat3 {
        self.dw_df * self.f.transpose() - self.pressure * Mat3::identity()
    }
}

/// ∂W̄/∂F by the closed-form chain rule.
pub fn energy_gradient(
    library: &ModelLibrary,
    kappa: &[f64],
    f: &DeformationGradient,
    frame: &Frame,
) -> Result<Evaluation<Mat3>> {
    library.check_kappa(kappa)?;
    let inv = invariants_of(f, Some(frame))?;
    let grads = InvariantGradients::new(f, frame);
    let diagonal = f.is_diagonal();
    let mut d = Mat3::zeros();
    let mut clamped = false;
    for term in library.terms() {
        let e = term_eval(&term.form, library.inner(term, kappa), &inv, &grads, f.matrix(), diagonal)?;
        d += kappa[term.outer_index] * e.d_f;
        clamped |= e.clamped;
    }
    Ok(Evaluation { value: d, clamped })
}

pub fn stress_state(
    library: &ModelLibrary,
    kappa: &[f64],
    f: &DeformationGradient,
    rule: PressureRule,
    frame: &Frame,
) -> Result<Evaluation<StressState>> {
    let d = energy_gradient(library, kappa, f, frame)?;
    let pressure = rule.pressure(&d.value, f.matrix(), &f.inverse_transpose())?;
    Ok(Evaluation {
        value: StressState {
            f: *f.matrix(),
            dw_df: d.value,
            pressure,
        },
        clamped: d.clamped,
    })
}

/// First Piola-Kirchhoff stress with the pressure fixed by `rule`.
pub fn stress_first_pk(
    library: &ModelLibrary,
    kappa: &[f64],
    f: &DeformationGradient,
    rule: PressureRule,
) -> Result<Evaluation<Mat3>> {
    let s = stress_state(library, kappa, f, rule, &Frame::default())?;
    Ok(Evaluation {
        value: s.value.first_piola(),
        clamped: s.clamped,
    })
}

/// Cauchy stress with the pressure fixed by `rule`.
pub fn stress_cauchy(
    library: &ModelLibrary,
    kappa: &[f64],
    f: &DeformationGradient,
    rule: PressureRule,
) -> Result<Evaluation<Mat3>> {
    let s = stress_state(library, kappa, f, rule, &Frame::default())?;
    Ok(Evaluation {
        value: s.value.cauchy(),
        clamped: s.clamped,
    })
}

/// Observed stress at one fixed deformation, prepared for repeated evaluation
/// with many parameter vectors.
///
/// The observed scalar is linear in ∂W̄/∂F once the pressure rule is applied,
/// so the contribution of every term without an inner parameter is cached.
#[derive(Debug, Clone)]
pub struct ObservationPoint {
    f: DeformationGradient,
    f_inv_t: Mat3,
    inv: Invariants,
    grads: InvariantGradients,
    rule: PressureRule,
    component: StressComponent,
    /// Observed contribution of each term per unit outer coefficient, for
    /// terms without an inner parameter.
    cached: Vec<Option<f64>>,
}

impl ObservationPoint {
    pub fn new(
        library: &ModelLibrary,
        protocol: &Protocol,
        control: f64,
        component: StressComponent,
        frame: &Frame,
    ) -> Result<Self> {
        if !protocol.observed_components().contains(&component) {
            return Err(Error::Config(alloc::format!(
                "protocol {protocol} does not observe {component}"
            )));
        }
        let f = protocol_deformation(protocol, control)?;
        let inv = invariants_of(&f, Some(frame))?;
        let grads = InvariantGradients::new(&f, frame);
        let mut point = Self {
            f_inv_t: f.inverse_transpose(),
            f,
            inv,
            grads,
            rule: protocol.pressure_rule(),
            component,
            cached: Vec::new(),
        };
        let diagonal = f.is_diagonal();
        let mut cached = Vec::with_capacity(library.terms().len());
        for term in library.terms() {
            if term.form.has_inner_parameter() {
                cached.push(None);
            } else {
                let e = term_eval(&term.form, 0.0, &inv, &grads, f.matrix(), diagonal)?;
                cached.push(Some(point.observe(&e.d_f)?));
            }
        }
        point.cached = cached;
        Ok(point)
    }

    pub fn deformation(&self) -> &DeformationGradient {
        &self.f
    }

    pub fn component(&self) -> StressComponent {
        self.component
    }

    /// Linear map from ∂W̄/∂F to the observed scalar.
    fn observe(&self, d: &Mat3) -> Result<f64> {
        let fm = self.f.matrix();
        let p = self.rule.pressure(d, fm, &self.f_inv_t)?;
        let (i, j) = (self.component.i, self.component.j);
        Ok(match self.component.measure {
            StressMeasure::FirstPiola => d[(i, j)] - p * self.f_inv_t[(i, j)],
            StressMeasure::Cauchy => {
                let s = d.row(i).dot(&fm.row(j));
                if i == j {
                    s - p
                } else {
                    s
                }
            }
        })
    }

    /// Observed stress for κ; when `jacobian` is given it receives ∂/∂κ.
    pub fn evaluate(
        &self,
        library: &ModelLibrary,
        kappa: &[f64],
        mut jacobian: Option<&mut [f64]>,
    ) -> Result<Evaluation<f64>> {
        library.check_kappa(kappa)?;
        if self.cached.len() != library.terms().len() {
            return Err(Error::dim("observation point terms", self.cached.len(), library.terms().len()));
        }
        if let Some(j) = jacobian.as_deref_mut() {
            if j.len() != kappa.len() {
                return Err(Error::dim("jacobian row", kappa.len(), j.len()));
            }
            j.fill(0.0);
        }
        let diagonal = self.f.is_diagonal();
        let mut total = 0.0;
        let mut clamped = false;
        for (term, cached) in library.terms().iter().zip(&self.cached) {
            let c = kappa[term.outer_index];
            match (cached, term.inner_index) {
                (Some(o), _) => {
                    total += c * o;
                    if let Some(j) = jacobian.as_deref_mut() {
                        j[term.outer_index] = *o;
                    }
                }
                (None, inner) => {
                    let w = inner.map_or(0.0, |i| kappa[i]);
                    let e = term_eval(&term.form, w, &self.inv, &self.grads, self.f.matrix(), diagonal)?;
                    clamped |= e.clamped;
                    let o = self.observe(&e.d_f)?;
                    total += c * o;
                    if let Some(j) = jacobian.as_deref_mut() {
                        j[term.outer_index] = o;
                        if let Some(i) = inner {
                            j[i] = c * self.observe(&e.d_f_dw)?;
                        }
                    }
                }
            }
        }
        Ok(Evaluation {
            value: total,
            clamped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanics::kinematics::Axis;
    use approx::assert_relative_eq;

    fn neo_hooke(c: f64) -> (ModelLibrary, Vec<f64>) {
        let lib = ModelLibrary::isotropic_default().select(&["c(1,0)"]).unwrap();
        (lib, alloc::vec![c])
    }

    #[test]
    fn neo_hooke_uniaxial_closed_form() {
        let (lib, kappa) = neo_hooke(0.5);
        let f = protocol_deformation(&Protocol::Uniaxial, 2.0).unwrap();
        let inv = invariants_of(&f, None).unwrap();
        assert_relative_eq!(sef_value(&lib, &kappa, &inv).unwrap().value, 1.0, epsilon = 1e-14);
        let p = stress_first_pk(&lib, &kappa, &f, Protocol::Uniaxial.pressure_rule()).unwrap().value;
        assert_relative_eq!(p[(0, 0)], 1.75, epsilon = 1e-13);
        assert!(p[(1, 1)].abs() < 1e-12);
        assert!(p[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn reference_state_is_stress_free() {
        let lib = ModelLibrary::anisotropic_cann();
        let kappa: Vec<f64> = (0..30).map(|i| 0.1 + 0.05 * i as f64).collect();
        let f = DeformationGradient::identity();
        let inv = invariants_of(&f, None).unwrap();
        assert_eq!(sef_value(&lib, &kappa, &inv).unwrap().value, 0.0);
        let s = stress_cauchy(&lib, &kappa, &f, PressureRule::CauchyNormalZero { i: 1 }).unwrap();
        assert!(s.value.abs().max() < 1e-14);
    }

    #[test]
    fn observation_point_matches_full_stress_and_jacobian() {
        let lib = ModelLibrary::anisotropic_cann();
        let kappa: Vec<f64> = (0..30).map(|i| 0.05 + 0.02 * (i % 7) as f64).collect();
        let frame = Frame::default();
        let bt = Protocol::Biaxial { ratio_f: 1.0, ratio_n: 0.75 };
        for (protocol, control) in [(bt, 1.08), (Protocol::parse("SS_nf", None).unwrap(), 0.35)] {
            for comp in protocol.observed_components() {
                let pt = ObservationPoint::new(&lib, &protocol, control, comp, &frame).unwrap();
                let mut jac = alloc::vec![0.0; 30];
                let v = pt.evaluate(&lib, &kappa, Some(&mut jac)).unwrap().value;
                let f = protocol_deformation(&protocol, control).unwrap();
                let sigma = stress_cauchy(&lib, &kappa, &f, protocol.pressure_rule()).unwrap().value;
                assert_relative_eq!(v, sigma[(comp.i, comp.j)], epsilon = 1e-12, max_relative = 1e-12);
                for p in 0..30 {
                    let h = 1e-6;
                    let mut kp = kappa.clone();
                    kp[p] += h;
                    let mut km = kappa.clone();
                    km[p] -= h;
                    let fd = (pt.evaluate(&lib, &kp, None).unwrap().value
                        - pt.evaluate(&lib, &km, None).unwrap().value)
                        / (2.0 * h);
                    assert_relative_eq!(jac[p], fd, epsilon = 1e-7, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn ogden_requires_diagonal_deformation() {
        let lib = ModelLibrary::isotropic_default();
        let kappa = alloc::vec![0.1; 17];
        let ss = Protocol::SimpleShear { a: Axis::F, b: Axis::S };
        let f = protocol_deformation(&ss, 0.2).unwrap();
        assert!(matches!(
            stress_cauchy(&lib, &kappa, &f, ss.pressure_rule()),
            Err(Error::UnsupportedKinematics(_))
        ));
    }

    #[test]
    fn kappa_length_is_checked() {
        let lib = ModelLibrary::isotropic_default();
        let inv = invariants_of(&DeformationGradient::identity(), None).unwrap();
        assert!(matches!(sef_value(&lib, &[1.0], &inv), Err(Error::Dimension { .. })));
    }
}
