//! Multi-frame face model learning and inverse rendering.
//!
//! This crate learns a face identity model — a graph-based geometry subspace
//! plus a per-vertex appearance subspace — from multi-frame image sets, and
//! fits per-frame pose, expression and illumination together with identity
//! parameters shared across all frames of a subject, by gradient descent
//! through a differentiable image-formation pipeline.
//!
//! See the book under `book/` for a guided tour; its code snippets double as
//! doc-tests (`cargo test --doc`).

#![allow(clippy::needless_range_loop)]

pub mod archive;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grad;
pub mod graph;
pub mod img;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod params;
pub mod procedural;
pub mod render;
pub mod rng;
pub mod shading;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};

// The book's code blocks run as doc-tests so the guide cannot drift from
// the library. mdbook renders the same files under book/.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/meshes.md")]
    mod meshes {}
    #[doc = include_str!("../../../book/src/identity-model.md")]
    mod identity_model {}
    #[doc = include_str!("../../../book/src/image-formation.md")]
    mod image_formation {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/fitting-learning.md")]
    mod fitting_learning {}
    #[doc = include_str!("../../../book/src/data-eval.md")]
    mod data_eval {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
