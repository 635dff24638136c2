//! Unsupervised object discovery: region proposals from CNN activations,
//! sparse region matching, and joint optimization of object regions and an
//! image neighborhood graph.

pub mod bbox;
pub mod discovery;
pub mod evaluation;
pub mod largescale;
pub mod matching;
pub mod pipeline;
pub mod proposals;
pub mod region_features;
pub mod saliency;
pub mod seed;
pub mod tensor_store;
mod union_find;
