//! Detection and grounding of manipulated image-text pairs on a procedural
//! synthetic news world: dual transformer encoders aligned by
//! manipulation-aware contrastive learning, cross-attention grounding heads,
//! momentum twins with feature queues, and a full evaluation suite.

pub mod autodiff;
pub mod metrics;
pub mod model;
pub mod train;
pub mod manifest;
pub mod synth;
pub mod types;
