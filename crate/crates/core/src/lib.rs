//! Global-local attention transformers over symbolic scene graphs.
//!
//! The crate covers the whole pipeline at desk scale: a predicate-as-node
//! scene graph representation, a small reverse-mode autodiff engine, the
//! GLAT encoder with node and edge decoders, a rule-driven synthetic corpus
//! with exact Bayes oracles, ablation baselines, training, a simulated
//! perception front end, confidence-weighted fusion and SGG metrics.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod glat;
pub mod metrics;
pub mod optim;
pub mod perception;
pub mod rng;
pub mod scene_graph;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use fusion::ScoredGraph;
pub use glat::{GlatConfig, GlatModel, MaskedGraph};
pub use scene_graph::{EntityNode, PredicateNode, SceneGraph, Vocabulary};
pub use tensor::{Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scene-graphs.md")]
    mod scene_graphs {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/worlds.md")]
    mod worlds {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
