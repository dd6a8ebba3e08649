//! Incompressible hyperelastic kinematics, model libraries and stresses.

mod kinematics;
mod library;
mod protocol;
mod stress;

pub use kinematics::{invariants_of, Axis, DeformationGradient, Frame, InvariantGradients, Invariants, Mat3, Vec3};
pub use library::{Argument, LibraryKind, ModelLibrary, TermForm, TermSpec, EXP_CLAMP};
pub use protocol::{
    deformation_filter, observation_map, protocol_deformation, PressureRule, Protocol, StressComponent,
    StressMeasure,
};
pub use stress::{
    energy_gradient, sef_value, stress_cauchy, stress_first_pk, stress_state, Evaluation, ObservationPoint,
    StressState,
};
