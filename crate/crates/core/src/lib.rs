//! Next-activity prediction for surgical process sequences with recurrent
//! networks, pre-trained word embeddings and layer-wise transfer.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod kv;
pub mod network;
pub mod plan;
pub mod procdata;
pub mod seed;
pub mod transfer;
pub mod weights;

pub use error::{Error, Result};
pub use exec::Exec;
