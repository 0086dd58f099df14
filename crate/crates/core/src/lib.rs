//! Desk-scale optical flow with matching-pretrained features.
//!
//! A residual encoder and a stack of quadtree attention blocks produce 1/8
//! resolution features that are first trained on static-scene matching and
//! then reused by an iterative GRU flow refiner.

pub mod attention;
pub mod config;
pub mod encoder;
mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod matching;
pub mod model;
pub mod params;
pub mod synth;
pub mod selftest;
pub mod tile;
pub mod train;

pub use config::{AttentionConfig, BlockKind, EncoderConfig, FlowConfig, ModelConfig, SIZE_MULTIPLE};
pub use error::{Error, Result};
pub use model::{FlowModel, MatchFlow};
pub use params::{ModelWeights, ParamGroup, Params};
