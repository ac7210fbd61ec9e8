//! BCAE architectures: declarative specs, layer graphs and the
//! encode/decode pipeline.

mod bcae;
mod build;
mod graph;
mod spec;

pub use bcae::{Bcae, Code, Decoded};
pub use build::{build_decoder_2d, build_decoder_3d, build_encoder_2d, build_encoder_3d, build_graphs};
pub use graph::{Backward, GraphBuilder, Layer, LayerGraph, Param, Tape};
pub use spec::{ModelSpec, Variant, BCAEHT_WIDTHS, BCAEPP_WIDTHS, THREE_D_STAGES};
