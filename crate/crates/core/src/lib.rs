//! Adaptive tokenization for vision transformers.
//!
//! The crate provides a small reverse-mode autodiff engine ([`autograd`]),
//! transformer building blocks ([`nn`]), the spatial-attention tokenizer
//! ([`tokenlearner`]), token fusion back onto the spatial grid
//! ([`tokenfuser`]), pairwise vector attention ([`vector_attention`]),
//! declarative model assembly ([`model`]), an analytical FLOPs/parameter
//! model ([`cost`]) and a deterministic desk-scale training harness
//! ([`data`], [`train`], [`maps`], [`ablation`]).

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod maps;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tokenfuser;
pub mod tokenlearner;
pub mod train;
pub mod vector_attention;

pub use autograd::{Graph, Var};
pub use cost::{count_flops, count_params, placement_sweep, CostReport};
pub use error::{Error, Result};
pub use model::{build_model, MapInput, Model, ModelConfig};
pub use nn::ParamStore;
pub use tensor::Tensor;
pub use tokenfuser::TokenFuserLayer;
pub use tokenlearner::{TokenLearnerLayer, TokenLearnerVariant};
pub use vector_attention::VectorAttentionLayer;
