//! Multi-view classification toolkit.
//!
//! Builds per-view feature networks, couples every pair of views through a
//! multi-dimension bilinear interaction, classifies each view with a shared
//! head, and fuses the per-view losses with closed-form sparse simplex
//! weights. Training alternates gradient steps on the networks with the
//! exact weight update. Linear baselines (CCA, a multi-view discriminant
//! projection, concat + softmax) and a synthetic data generator round out a
//! desk-scale verification harness.
//!
//! See the guide under `book/` for worked examples; every snippet there runs
//! as a doctest.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};

// Compile the guide's code blocks as doctests so the book can never drift
// from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(getting_started, "../../../book/src/getting-started.md");
    chapter!(numerics, "../../../book/src/numerics.md");
    chapter!(architecture, "../../../book/src/architecture.md");
    chapter!(fusion, "../../../book/src/fusion.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(data, "../../../book/src/data.md");
    chapter!(baselines, "../../../book/src/baselines.md");
}
