//! Video grounding with a multi-modal transformer.
//!
//! A raw clip is cut into overlapping 3-D cubes ([`video`]), the query is
//! embedded and run through a bidirectional GRU ([`text`]), both token sets
//! pass through plain transformer encoders ([`transformer`]), and a
//! cross-modal decoder ([`decoder`]) turns a set of learnable segment
//! queries into `(segment, confidence)` predictions. Training uses a
//! many-to-one matching loss ([`matching`]).

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod init;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;
pub mod verify;
pub mod video;

pub use error::{GtrError, Result};
pub use tensor::{Element, Graph, Tensor, Var};
