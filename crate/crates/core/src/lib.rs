//! Core domain library for desk-scale bacterial chromosome ensemble modeling.
//!
//! The crate is organized around four concerns:
//!
//! * [`geom`] — bead-level conformations with replication masks, the tabular
//!   row layout used by the learning pipeline, and preprocessing transforms
//!   (centering, scale normalization, uniform random rotation).
//! * [`sim`] — a coarse-grained Langevin simulator for a confined circular
//!   bead-spring polymer with an optional replication branch and annealed
//!   pairwise restraints.
//! * [`hic`] — contact-map construction from conformations and ensembles,
//!   plus the distance-decay curve P(s) under circular genomic distance.
//! * [`metrics`] — evaluation suite: stratum-adjusted correlation, full-matrix
//!   Pearson, pairwise dRMSD diversity and its perturbation baseline.
//!
//! All operations are pure functions on immutable inputs; anything random
//! takes an explicit seeded stream so parallel runs stay reproducible.

pub mod geom;
pub mod hic;
pub mod metrics;
pub mod sim;

pub use geom::{Conformation, Ensemble, RotationMatrix};
pub use hic::{HiCMap, PsCurve};
