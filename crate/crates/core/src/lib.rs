//! Safe switching controllers for hybrid input automata.
//!
//! Each mode of a hybrid automaton carries a local control barrier function
//! (CBF). Local CBFs alone do not guarantee safety across mode jumps: a state
//! can be safe for the current mode and still land outside the successor's
//! safe set when the guard fires. This crate
//!
//! * identifies safe and unsafe switching sets on a grid ([`grid`]),
//! * computes the set of states that are forced into the unsafe switching set
//!   and refines the local CBF of the source mode so its zero superlevel set
//!   avoids it ([`reach`]),
//! * enforces the resulting CBFs online with a small active-set QP
//!   ([`filter`]),
//! * simulates the closed-loop hybrid system with event-accurate guard
//!   crossings and monitors pairwise and global safety ([`sim`]),
//! * ships the adaptive-cruise-control and Dubins-car studies ([`scenarios`]).

pub mod error;
pub mod filter;
pub mod grid;
pub mod model;
pub mod reach;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
pub use filter::{CbfDef, FilterResult, HalfspaceConstraint, Policy, SwitchingLaw};
pub use grid::{Axis, Grid, GridFn, ImplicitSet, SwitchingSets};
pub use model::{BoxSet, GuardDef, HybridAutomaton, ModeDef};
pub use reach::{ReachOutcome, ReachSettings, RefinedCbf};
pub use sim::{HybridTrajectory, SafetyVerdict, TerminalReason};
