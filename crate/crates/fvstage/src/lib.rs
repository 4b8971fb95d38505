//! Files, manifests, artifact caching and the command-line pipeline around
//! [`fvstage_core`].

pub mod access;
pub mod extract;
pub mod manifest;
pub mod pgm;
pub mod pipeline;
pub mod store;
pub mod study;
pub mod synthio;
pub mod tensorio;

pub use fvstage_core as core;
