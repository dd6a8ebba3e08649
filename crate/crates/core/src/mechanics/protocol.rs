use alloc::{format, string::String, vec, vec::Vec};
use core::fmt;
use core::str::FromStr;

use super::kinematics::{Axis, DeformationGradient, Mat3};
use crate::{num, Error, Result};

/// Loading protocol of a mechanical test.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Protocol {
    /// Uniaxial tension/compression.
    Uniaxial,
    /// Equibiaxial tension.
    Equibiaxial,
    /// Pure shear (planar tension).
    PureShear,
    /// Biaxial extension with stretch ratio λf* : λn*.
    Biaxial { ratio_f: f64, ratio_n: f64 },
    /// Simple shear F = I + γ e_a ⊗ e_b.
    SimpleShear { a: Axis, b: Axis },
}

impl Protocol {
    /// Parses a protocol id such as `UT`, `EBT`, `PS`, `BT` or `SS_fs`.
    /// Biaxial tests take their ratio separately.
    pub fn parse(id: &str, ratio: Option<(f64, f64)>) -> Result<Self> {
        match id {
            "UT" => Ok(Protocol::Uniaxial),
            "EBT" => Ok(Protocol::Equibiaxial),
            "PS" => Ok(Protocol::PureShear),
            "BT" => {
                let (ratio_f, ratio_n) = ratio.ok_or_else(|| {
                    Error::InvalidInput("biaxial protocol requires a stretch ratio".into())
                })?;
                if !(ratio_f > 0.0 && ratio_n > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "biaxial ratio must be positive, got {ratio_f}:{ratio_n}"
                    )));
                }
                Ok(Protocol::Biaxial { ratio_f, ratio_n })
            }
            _ => {
                let mut chars = id.strip_prefix("SS_").map(str::chars);
                let pair = chars.as_mut().and_then(|c| {
                    let a = Axis::from_letter(c.next()?)?;
                    let b = Axis::from_letter(c.next()?)?;
                    c.next().is_none().then_some((a, b))
                });
                match pair {
                    Some((a, b)) if a != b => Ok(Protocol::SimpleShear { a, b }),
                    _ => Err(Error::InvalidInput(format!("unknown protocol id `{id}`"))),
                }
            }
        }
    }

    pub fn id(&self) -> String {
        match self {
            Protocol::Uniaxial => "UT".into(),
            Protocol::Equibiaxial => "EBT".into(),
            Protocol::PureShear => "PS".into(),
            Protocol::Biaxial { .. } => "BT".into(),
            Protocol::SimpleShear { a, b } => format!("SS_{}{}", a.letter(), b.letter()),
        }
    }

    pub fn ratio(&self) -> Option<(f64, f64)> {
        match self {
            Protocol::Biaxial { ratio_f, ratio_n } => Some((*ratio_f, *ratio_n)),
            _ => None,
        }
    }

    /// Components observed by this protocol, in q order.
    pub fn observed_components(&self) -> Vec<StressComponent> {
        match *self {
            Protocol::Uniaxial | Protocol::Equibiaxial | Protocol::PureShear => {
                vec![StressComponent::first_piola(0, 0)]
            }
            Protocol::Biaxial { .. } => vec![
                StressComponent::cauchy(Axis::F, Axis::F),
                StressComponent::cauchy(Axis::N, Axis::N),
            ],
            Protocol::SimpleShear { a, b } => vec![StressComponent::cauchy(b, a)],
        }
    }

    pub fn pressure_rule(&self) -> PressureRule {
        match *self {
            Protocol::Uniaxial | Protocol::Equibiaxial | Protocol::PureShear => {
                PressureRule::FirstPiolaZero { i: 2, j: 2 }
            }
            Protocol::Biaxial { .. } => PressureRule::CauchyNormalZero { i: Axis::S.index() },
            Protocol::SimpleShear { a, b } => PressureRule::CauchyNormalZero {
                i: Axis::complement(a, b).index(),
            },
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Biaxial { ratio_f, ratio_n } => write!(f, "BT({ratio_f}:{ratio_n})"),
            other => f.write_str(&other.id()),
        }
    }
}

/// Deformation gradient of a protocol at a control value (stretch or shear).
pub fn protocol_deformation(protocol: &Protocol, control: f64) -> Result<DeformationGradient> {
    if !control.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite control value {control}")));
    }
    match *protocol {
        Protocol::Uniaxial => {
            let l = positive_stretch(control)?;
            let t = 1.0 / num::sqrt(l);
            DeformationGradient::diagonal(l, t, 1.0 / (l * t))
        }
        Protocol::Equibiaxial => {
            let l = positive_stretch(control)?;
            DeformationGradient::diagonal(l, l, 1.0 / (l * l))
        }
        Protocol::PureShear => {
            let l = positive_stretch(control)?;
            DeformationGradient::diagonal(l, 1.0, 1.0 / l)
        }
        Protocol::Biaxial { ratio_f, ratio_n } => {
            let l = positive_stretch(control)?;
            let lf = positive_stretch(1.0 + ratio_f * (l - 1.0))?;
            let ln = positive_stretch(1.0 + ratio_n * (l - 1.0))?;
            let mut m = Mat3::zeros();
            m[(Axis::F.index(), Axis::F.index())] = lf;
            m[(Axis::S.index(), Axis::S.index())] = 1.0 / (lf * ln);
            m[(Axis::N.index(), Axis::N.index())] = ln;
            DeformationGradient::new(m)
        }
        Protocol::SimpleShear { a, b } => {
            if !(0.0..=0.5).contains(&control) {
                return Err(Error::InvalidInput(format!(
                    "simple-shear amount must lie in [0, 0.5], got {control}"
                )));
            }
            let mut m = Mat3::identity();
            m[(a.index(), b.index())] = control;
            DeformationGradient::new(m)
        }
    }
}

fn positive_stretch(l: f64) -> Result<f64> {
    if l > 0.0 {
        Ok(l)
    } else {
        Err(Error::InvalidInput(format!("stretch must be positive, got {l}")))
    }
}

/// Which stress measure a component refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum StressMeasure {
    FirstPiola,
    Cauchy,
}

/// A single entry of a stress tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StressComponent {
    pub measure: StressMeasure,
    pub i: usize,
    pub j: usize,
}

impl StressComponent {
    pub fn first_piola(i: usize, j: usize) -> Self {
        Self {
            measure: StressMeasure::FirstPiola,
            i,
            j,
        }
    }

    pub fn cauchy(a: Axis, b: Axis) -> Self {
        Self {
            measure: StressMeasure::Cauchy,
            i: a.index(),
            j: b.index(),
        }
    }

    /// Name as used in file headers, e.g. `P11` or `sigma_fs`.
    pub fn name(&self) -> String {
        match self.measure {
            StressMeasure::FirstPiola => format!("P{}{}", self.i + 1, self.j + 1),
            StressMeasure::Cauchy => format!(
                "sigma_{}{}",
                Axis::from_index(self.i).map_or('?', Axis::letter),
                Axis::from_index(self.j).map_or('?', Axis::letter)
            ),
        }
    }
}

impl fmt::Display for StressComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for StressComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown stress component `{s}`"));
        if let Some(rest) = s.strip_prefix("sigma_") {
            let mut c = rest.chars();
            let a = c.next().and_then(Axis::from_letter).ok_or_else(bad)?;
            let b = c.next().and_then(Axis::from_letter).ok_or_else(bad)?;
            if c.next().is_some() {
                return Err(bad());
            }
            Ok(StressComponent::cauchy(a, b))
        } else if let Some(rest) = s.strip_prefix('P') {
            let d: Vec<usize> = rest
                .chars()
                .map(|c| c.to_digit(10).map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(bad)?;
            match d.as_slice() {
                [i @ 1..=3, j @ 1..=3] => Ok(StressComponent::first_piola(i - 1, j - 1)),
                _ => Err(bad()),
            }
        } else {
            Err(bad())
        }
    }
}

/// How the hydrostatic pressure is eliminated for a protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureRule {
    /// P_ij = 0.
    FirstPiolaZero { i: usize, j: usize },
    /// σ_ii = 0.
    CauchyNormalZero { i: usize },
}

impl PressureRule {
    /// Pressure that enforces the rule for a given ∂W̄/∂F.
    pub fn pressure(&self, dw_df: &Mat3, f: &Mat3, f_inv_t: &Mat3) -> Result<f64> {
        match *self {
            PressureRule::FirstPiolaZero { i, j } => {
                let denom = f_inv_t[(i, j)];
                if denom == 0.0 {
                    return Err(Error::Config(format!(
                        "pressure rule P{}{} = 0 is degenerate for this deformation",
                        i + 1,
                        j + 1
                    )));
                }
                Ok(dw_df[(i, j)] / denom)
            }
            PressureRule::CauchyNormalZero { i } => Ok(dw_df.row(i).dot(&f.row(i))),
        }
    }
}

/// Scalar observed by component `q` (1-based) of a protocol.
pub fn observation_map(protocol: &Protocol, q: usize, stress: &Mat3) -> Result<f64> {
    let comps = protocol.observed_components();
    let c = q
        .checked_sub(1)
        .and_then(|k| comps.get(k))
        .ok_or_else(|| Error::Config(format!("protocol {protocol} has no observed component {q}")))?;
    Ok(stress[(c.i, c.j)])
}

/// Reduced deformation vector used as GP input for a component.
pub fn deformation_filter(component: &StressComponent, f: &DeformationGradient) -> Result<Vec<f64>> {
    let m = f.matrix();
    match component.measure {
        StressMeasure::FirstPiola if component.i == 0 && component.j == 0 => {
            Ok(vec![m[(0, 0)], m[(1, 1)]])
        }
        StressMeasure::Cauchy if component.i == component.j && component.i != 1 => {
            Ok(vec![m[(0, 0)], m[(2, 2)]])
        }
        StressMeasure::Cauchy if component.i != component.j => {
            Ok(vec![m[(component.j, component.i)]])
        }
        _ => Err(Error::Config(format!(
            "no deformation filter registered for component {component}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn protocol_kinematics() {
        let f = protocol_deformation(&Protocol::Uniaxial, 4.0).unwrap();
        assert_eq!(*f.matrix(), Mat3::from_diagonal(&[4.0, 0.5, 0.5].into()));

        let bt = Protocol::parse("BT", Some((1.0, 0.5))).unwrap();
        let f = protocol_deformation(&bt, 1.1).unwrap();
        let m = f.matrix();
        assert_relative_eq!(m[(0, 0)], 1.1);
        assert_relative_eq!(m[(2, 2)], 1.05);
        assert_relative_eq!(m[(1, 1)], 1.0 / (1.1 * 1.05));

        let ss = Protocol::parse("SS_fs", None).unwrap();
        let f = protocol_deformation(&ss, 0.2).unwrap();
        assert_eq!(f.matrix()[(0, 1)], 0.2);
        assert_eq!(f.det(), 1.0);
    }

    #[test]
    fn determinants_are_unity() {
        let protocols = [
            Protocol::Uniaxial,
            Protocol::Equibiaxial,
            Protocol::PureShear,
            Protocol::Biaxial { ratio_f: 0.75, ratio_n: 1.0 },
        ];
        for p in protocols {
            for k in 1..40 {
                let f = protocol_deformation(&p, 0.3 + 0.17 * k as f64).unwrap();
                assert!((f.det() - 1.0).abs() < 1e-10, "{p} {k}");
            }
        }
    }

    #[test]
    fn protocol_ids_round_trip() {
        for id in ["UT", "EBT", "PS", "SS_fs", "SS_sf", "SS_fn", "SS_nf", "SS_sn", "SS_ns"] {
            assert_eq!(Protocol::parse(id, None).unwrap().id(), id);
        }
        assert!(Protocol::parse("SS_ff", None).is_err());
        assert!(Protocol::parse("XT", None).is_err());
        assert!(Protocol::parse("BT", None).is_err());
        assert!(protocol_deformation(&Protocol::parse("SS_fs", None).unwrap(), 0.6).is_err());
        assert!(protocol_deformation(&Protocol::Uniaxial, 0.0).is_err());
    }

    #[test]
    fn observation_maps() {
        let s = Mat3::from_fn(|i, j| (10 * (i + 1) + j + 1) as f64);
        assert_eq!(observation_map(&Protocol::Uniaxial, 1, &s).unwrap(), 11.0);
        let bt = Protocol::Biaxial { ratio_f: 1.0, ratio_n: 1.0 };
        assert_eq!(observation_map(&bt, 2, &s).unwrap(), 33.0);
        let ss_ns = Protocol::parse("SS_ns", None).unwrap();
        assert_eq!(observation_map(&ss_ns, 1, &s).unwrap(), 23.0);
        let ss_sf = Protocol::parse("SS_sf", None).unwrap();
        assert_eq!(observation_map(&ss_sf, 1, &s).unwrap(), 12.0);
        assert!(observation_map(&Protocol::Uniaxial, 2, &s).is_err());
        assert!(observation_map(&bt, 0, &s).is_err());
    }

    #[test]
    fn deformation_filters() {
        let f = protocol_deformation(&Protocol::Uniaxial, 2.0).unwrap();
        let v = deformation_filter(&"P11".parse().unwrap(), &f).unwrap();
        assert_relative_eq!(v[0], 2.0);
        assert_relative_eq!(v[1], 0.5f64.sqrt(), epsilon = 1e-15);

        let sf = Protocol::parse("SS_fs", None).unwrap();
        let f = protocol_deformation(&sf, 0.3).unwrap();
        let comp = sf.observed_components()[0];
        assert_eq!(comp.name(), "sigma_sf");
        assert_eq!(deformation_filter(&comp, &f).unwrap(), vec![0.3]);

        let bt = Protocol::Biaxial { ratio_f: 1.0, ratio_n: 0.5 };
        let f = protocol_deformation(&bt, 1.1).unwrap();
        let v = deformation_filter(&"sigma_ff".parse().unwrap(), &f).unwrap();
        assert_relative_eq!(v[0], 1.1);
        assert_relative_eq!(v[1], 1.05);
        assert!(deformation_filter(&"P22".parse().unwrap(), &f).is_err());
        assert!(deformation_filter(&"sigma_ss".parse().unwrap(), &f).is_err());
    }

    #[test]
    fn component_names_round_trip() {
        for name in ["P11", "P33", "sigma_ff", "sigma_nn", "sigma_sf"] {
            assert_eq!(name.parse::<StressComponent>().unwrap().name(), name);
        }
        assert!("P41".parse::<StressComponent>().is_err());
        assert!("sigma_fx".parse::<StressComponent>().is_err());
        assert!("tau".parse::<StressComponent>().is_err());
    }
}
