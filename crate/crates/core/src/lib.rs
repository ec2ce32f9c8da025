//! Safety filtering for moving convex sets via smooth set distance.
//!
//! This crate keeps a parameterized convex "ego" body disjoint from a
//! collection of moving convex obstacles.  It does so in two layers:
//!
//! * a **smooth distance layer**: the squared minimum distance between two
//!   convex sets, each described by a stack of convex inequality constraints,
//!   is approximated by replacing the elementwise maximum of the stack with a
//!   rectified log-sum-exp surrogate.  The resulting program is smooth and
//!   strictly convex, so the optimal value is differentiable in the set
//!   parameters, and its gradient follows from implicit differentiation of
//!   the KKT conditions ([`distance`], [`sensitivity`]);
//! * a **control layer**: the smooth distance (minus a safety margin) serves
//!   as a control barrier function.  A small quadratic program filters a
//!   nominal input so that every pairwise barrier stays nonnegative along the
//!   closed-loop trajectory ([`cbf`], [`dynamics`], [`sim`]).
//!
//! The [`oracles`] module holds slow, independent reference implementations
//! (exact polytope distance, finite differences, exhaustive QP enumeration)
//! used to validate the fast paths; production code never calls them.

pub mod cbf;
pub mod corpus;
pub mod distance;
pub mod dynamics;
pub mod lse;
pub mod oracles;
pub mod sensitivity;
pub mod sets;
pub mod sim;

mod error;

pub use error::{Error, Result};

pub use cbf::{
    AlphaSpec, BarrierConfig, FilteredInput, ObstacleTerm, QpStatus, SafetyConstraintRow,
};
pub use distance::{solve_distance, DistanceProblem, DistanceSolution, DistanceStatus, SolveOptions};
pub use dynamics::{ControlAffineDynamics, IntegrationMethod, UnicycleAgent};
pub use lse::{LseEval, SmoothMaxParams};
pub use sensitivity::{distance_gradient, DistanceGradient, KktSystem};
pub use sets::{
    membership_margin, ParamVector, RigidPolytope, SetSpec, SmoothLens, StackEval,
    StandardConditionsReport,
};
pub use sim::{run_simulation, SimConfig, SimTrace, TickStatus};
