//! Network-safe dynamic operating envelopes for radial distribution feeders.
//!
//! The crate designs per-customer flexibility limits that keep a feeder
//! within its voltage band and line ratings for *every* admissible
//! combination of customer actions. Non-coordinated customers receive
//! individual intervals (a box envelope); a coordinated cohort receives a
//! coupled region designed as a maximum-volume inscribed ellipsoid and
//! published as the residual polytope. The design problem is convex and is
//! solved over nonnegative, second-order, and exponential cones, with
//! optional budgeted robustness against fixed-load forecast errors and
//! tunable fairness floors on export/import headroom.
//!
//! Pipeline: [`feeder`] loads and validates the network and derives the
//! linearized sensitivities; [`constraints`] stacks the half-space system;
//! [`robust`] tightens it against the uncertainty budget; [`solver`] builds
//! and solves the design problem and audits solutions; [`geometry`]
//! reconstructs the published polytope, volumes, and aggregate ranges;
//! [`acpf`] stress-tests designs against nonlinear AC power flow;
//! [`scenario`] and [`report`] drive whole scenarios and sweeps from TOML
//! configs. The `gridflex` binary fronts all of it.
//!
//! The book under `book/` walks the same pipeline chapter by chapter; its
//! code blocks compile and run as doctests of this crate.

pub mod acpf;
pub mod conic;
pub mod constraints;
pub mod fairness;
pub mod feeder;
pub mod geometry;
pub mod report;
pub mod robust;
pub mod scenario;
pub mod solver;

// Keep the book's runnable snippets honest: every fenced Rust block in the
// chapters is executed by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Feeder, "../../../book/src/feeder.md");
    chapter!(Constraints, "../../../book/src/constraints.md");
    chapter!(Envelopes, "../../../book/src/envelopes.md");
    chapter!(Robustness, "../../../book/src/robustness.md");
    chapter!(Fairness, "../../../book/src/fairness.md");
    chapter!(Geometry, "../../../book/src/geometry.md");
    chapter!(Validation, "../../../book/src/validation.md");
    chapter!(Cli, "../../../book/src/cli.md");
}
