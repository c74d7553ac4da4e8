//! Numerical toolkit for building and checking coordinate charts adapted to a
//! finite family of vector fields on an open subset of Euclidean space.
//!
//! The pipeline runs in stages: symbolic field definitions ([`fieldspec`]),
//! pointwise frame linear algebra ([`vectorfield`]), ODE flows and
//! Carnot-Caratheodory geometry ([`flows`]), smoothness estimation
//! ([`funcspaces`]), the grid PDE layer that straightens the frame
//! ([`elliptic`]), the chart assembly itself ([`chart`]), and density
//! pullbacks with ball-volume comparisons ([`densities`]).

pub mod chart;
pub mod densities;
pub mod elliptic;
pub mod fieldspec;
pub mod flows;
pub mod funcspaces;
pub mod grid;
pub mod vectorfield;

pub use fieldspec::{Ball, FieldExpr, FieldSet};
pub use grid::GridField;
