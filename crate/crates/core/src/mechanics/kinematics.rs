use alloc::format;

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Material direction of the local anisotropy frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Axis {
    F,
    S,
    N,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::F, Axis::S, Axis::N];

    /// Row/column index when the frame coincides with the canonical basis.
    pub fn index(self) -> usize {
        match self {
            Axis::F => 0,
            Axis::S => 1,
            Axis::N => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            Axis::F => 'f',
            Axis::S => 's',
            Axis::N => 'n',
        }
    }

    pub fn from_letter(c: char) -> Option<Axis> {
        match c {
            'f' => Some(Axis::F),
            's' => Some(Axis::S),
            'n' => Some(Axis::N),
            _ => None,
        }
    }

    /// The axis that is neither `a` nor `b` (which must differ).
    pub fn complement(a: Axis, b: Axis) -> Axis {
        Axis::from_index(3 - a.index() - b.index()).unwrap_or(Axis::N)
    }
}

/// Deformation gradient with finite entries and positive determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationGradient(Mat3);

impl DeformationGradient {
    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "deformation gradient has non-finite entries: {m:?}"
            )));
        }
        let det = m.determinant();
        if !(det > 0.0) {
            return Err(Error::InvalidInput(format!(
                "deformation gradient must have det F > 0, got {det}"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    pub fn diagonal(l1: f64, l2: f64, l3: f64) -> Result<Self> {
        Self::new(Mat3::from_diagonal(&Vec3::new(l1, l2, l3)))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    pub fn right_cauchy_green(&self) -> Mat3 {
        self.0.transpose() * self.0
    }

    /// Exactly diagonal (off-diagonal entries are zero).
    pub fn is_diagonal(&self) -> bool {
        (0..3).all(|i| (0..3).all(|j| i == j || self.0[(i, j)] == 0.0))
    }

    pub fn inverse_transpose(&self) -> Mat3 {
        // det > 0 is checked at construction, so the inverse exists.
        self.0
            .try_inverse()
            .unwrap_or_else(Mat3::identity)
            .transpose()
    }
}

/// Orthonormal anisotropy frame (f0, s0, n0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    f0: Vec3,
    s0: Vec3,
    n0: Vec3,
}

impl Default for Frame {
    fn default() -> Self {
        Self {
            f0: Vec3::x(),
            s0: Vec3::y(),
            n0: Vec3::z(),
        }
    }
}

impl Frame {
    pub fn new(f0: Vec3, s0: Vec3, n0: Vec3) -> Result<Self> {
        let vs = [f0, s0, n0];
        for (i, a) in vs.iter().enumerate() {
            for (j, b) in vs.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (a.dot(b) - target).abs() > 1e-10 {
                    return Err(Error::InvalidInput(
                        "anisotropy frame vectors must be orthonormal".into(),
                    ));
                }
            }
        }
        Ok(Self { f0, s0, n0 })
    }

    pub fn direction(&self, axis: Axis) -> Vec3 {
        match axis {
            Axis::F => self.f0,
            Axis::S => self.s0,
            Axis::N => self.n0,
        }
    }

    /// Rank-one projector a0 ⊗ a0.
    pub fn structural_tensor(&self, axis: Axis) -> Mat3 {
        let a = self.direction(axis);
        a * a.transpose()
    }
}

/// Invariants of C = FᵀF together with the principal stretches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Invariants {
    pub i1: f64,
    pub i2: f64,
    /// Singular values of F, descending.
    pub principal_stretches: [f64; 3],
    /// I4 for f, s, n.
    pub i4: [f64; 3],
    /// I8 for the pairs fs, fn, sn.
    pub i8: [f64; 3],
}

impl Invariants {
    pub fn i4(&self, axis: Axis) -> f64 {
        self.i4[axis.index()]
    }

    /// Tension-only fourth invariant max{I4, 1}.
    pub fn i4_bar(&self, axis: Axis) -> f64 {
        self.i4(axis).max(1.0)
    }

    pub fn i8(&self, a: Axis, b: Axis) -> f64 {
        self.i8[pair_slot(a, b)]
    }
}

/// Slot of the unordered pair in the fs, fn, sn ordering.
pub(crate) fn pair_slot(a: Axis, b: Axis) -> usize {
    match (a.min(b), a.max(b)) {
        (Axis::F, Axis::S) => 0,
        (Axis::F, Axis::N) => 1,
        _ => 2,
    }
}

pub(crate) const PAIRS: [(Axis, Axis); 3] = [(Axis::F, Axis::S), (Axis::F, Axis::N), (Axis::S, Axis::N)];

pub fn invariants_of(f: &DeformationGradient, frame: Option<&Frame>) -> Result<Invariants> {
    let frame = frame.copied().unwrap_or_default();
    let c = f.right_cauchy_green();
    let tr = c.trace();
    let i1 = tr;
    let i2 = 0.5 * (tr * tr - (c * c).trace());
    let principal_stretches = principal_stretches(f)?;
    let mut i4 = [0.0; 3];
    for axis in Axis::ALL {
        let a = frame.direction(axis);
        i4[axis.index()] = a.dot(&(c * a));
    }
    let mut i8 = [0.0; 3];
    for (k, (a, b)) in PAIRS.iter().enumerate() {
        i8[k] = frame.direction(*a).dot(&(c * frame.direction(*b)));
    }
    Ok(Invariants {
        i1,
        i2,
        principal_stretches,
        i4,
        i8,
    })
}

fn principal_stretches(f: &DeformationGradient) -> Result<[f64; 3]> {
    let mut s = if f.is_diagonal() {
        let m = f.matrix();
        [m[(0, 0)].abs(), m[(1, 1)].abs(), m[(2, 2)].abs()]
    } else {
        let values = f
            .matrix()
            .try_svd(false, false, 1e-15, 200)
            .ok_or_else(|| {
                Error::UnsupportedKinematics("singular value decomposition did not converge".into())
            })?
            .singular_values;
        [values[0], values[1], values[2]]
    };
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Gradients of the invariants with respect to F at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantGradients {
    pub d_i1: Mat3,
    pub d_i2: Mat3,
    pub d_i4: [Mat3; 3],
    pub d_i8: [Mat3; 3],
}

impl InvariantGradients {
    pub fn new(f: &DeformationGradient, frame: &Frame) -> Self {
        let fm = f.matrix();
        let c = f.right_cauchy_green();
        let d_i1 = 2.0 * fm;
        let d_i2 = 2.0 * (c.trace() * fm - fm * c);
        let mut d_i4 = [Mat3::zeros(); 3];
        for axis in Axis::ALL {
            d_i4[axis.index()] = 2.0 * fm * frame.structural_tensor(axis);
        }
        let mut d_i8 = [Mat3::zeros(); 3];
        for (k, (a, b)) in PAIRS.iter().enumerate() {
            let (va, vb) = (frame.direction(*a), frame.direction(*b));
            d_i8[k] = fm * (va * vb.transpose() + vb * va.transpose());
        }
        Self {
            d_i1,
            d_i2,
            d_i4,
            d_i8,
        }
    }
}
